//! Training objectives: mutual-information, multiscale structural
//! similarity, adversarial terms, and their weighted combination.
//!
//! All losses are built on the autodiff graph so one backward pass yields
//! every gradient. The mutual-information term is the conditional entropy
//! of the label given the reconstruction over their smooth joint
//! distribution: `L_MI = -Σᵢⱼ P̃(i,j)·log₂(P̃(i,j)/P̃_G(j))`. Because the
//! label's marginal entropy is constant during training, minimizing this
//! conditional entropy maximizes the mutual information between label and
//! reconstruction, and the loss is bounded by `0 ≤ L_MI ≤ H̃(y)`.

use crate::error::{Error, Result};
use crate::hcu::{self, KernelBank};
use crate::image::Image;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Luminance stabilizer for unit dynamic range: (0.01)².
pub const SSIM_C1: f64 = 1e-4;
/// Contrast stabilizer for unit dynamic range: (0.03)².
pub const SSIM_C2: f64 = 9e-4;
/// Floor applied to similarity terms before exponentiation so fractional
/// powers stay real even when a covariance estimate dips negative.
const TERM_FLOOR: f64 = 1e-8;

/// Relative weights of the generator's loss components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the mutual-information term (λ₁).
    pub lambda_mi: f64,
    /// Weight of the multiscale similarity term (λ₂).
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mi: 1.0,
            lambda_ssim: 5.0,
        }
    }
}

impl LossWeights {
    /// Rejects negative or non-finite weights.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mi >= 0.0 && self.lambda_mi.is_finite())
            || !(self.lambda_ssim >= 0.0 && self.lambda_ssim.is_finite())
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got λ_mi={}, λ_ssim={}",
                self.lambda_mi, self.lambda_ssim
            )));
        }
        Ok(())
    }
}

/// Entropy diagnostics reported alongside the mutual-information loss.
///
/// All values are in bits and averaged over the batch. At double precision
/// `0 ≤ h_cond ≤ h_y` and `mi ≥ 0` hold to ~1e-12; at single precision the
/// difference may wobble below zero by rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyReport {
    /// Marginal entropy of the label's smooth distribution.
    pub h_y: f64,
    /// Conditional entropy of the label given the reconstruction
    /// (the loss value itself).
    pub h_cond: f64,
    /// Their difference: the mutual information.
    pub mi: f64,
}

/// Multiscale SSIM configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsSsimConfig {
    /// Number of dyadic scales.
    pub scales: usize,
    /// Per-scale exponents, finest scale first; the last also weights the
    /// luminance term at the coarsest scale. Normalized to sum 1 at use.
    pub exponents: Vec<f64>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            scales: 3,
            exponents: vec![0.25, 0.35, 0.40],
        }
    }
}

impl MsSsimConfig {
    /// Checks scale count and exponent positivity without evaluating.
    pub fn validate(&self) -> Result<()> {
        self.normalized_exponents().map(|_| ())
    }

    fn normalized_exponents(&self) -> Result<Vec<f64>> {
        if self.scales == 0 {
            return Err(Error::Config("multiscale SSIM needs at least 1 scale".into()));
        }
        if self.exponents.len() != self.scales {
            return Err(Error::Config(format!(
                "{} exponents provided for {} scales",
                self.exponents.len(),
                self.scales
            )));
        }
        if self.exponents.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config(
                "multiscale SSIM exponents must be positive and finite".into(),
            ));
        }
        let s: f64 = self.exponents.iter().sum();
        Ok(self.exponents.iter().map(|e| e / s).collect())
    }
}

/// One evaluated multiscale SSIM: the scalar graph node plus the per-term
/// diagnostics (useful for calibration checks and reports).
#[derive(Debug)]
pub struct MsSsimEval {
    /// Scalar node: the exponent-weighted product of all terms.
    pub value: Var,
    /// Mean contrast-structure term per scale, finest first.
    pub cs_terms: Vec<f64>,
    /// Mean luminance term at the coarsest scale, before exponentiation.
    pub luminance: f64,
}

/// Window size and width used at a given image extent: 11/1.5 normally,
/// shrunk to 7/1.0 below 32x32.
fn window_for_extent(min_extent: usize) -> (usize, f64) {
    if min_extent < 32 {
        (7, 1.0)
    } else {
        (11, 1.5)
    }
}

/// Normalized 2-D Gaussian window, row-major `[win, win]`.
fn gaussian_window(win: usize, sigma: f64) -> Vec<f64> {
    let c = (win - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..win * win)
        .map(|i| {
            let (y, x) = ((i / win) as f64 - c, (i % win) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

fn check_pair<R: Real>(g: &Graph<R>, a: Var, b: Var, what: &str) -> Result<(usize, usize, usize)> {
    let (ba, ca, ha, wa) = g.value(a).dims4()?;
    let (bb, cb, hb, wb) = g.value(b).dims4()?;
    if (ba, ca, ha, wa) != (bb, cb, hb, wb) {
        return Err(Error::Shape(format!(
            "{what} needs matching shapes, got [{ba},{ca},{ha},{wa}] and [{bb},{cb},{hb},{wb}]"
        )));
    }
    if ca != 1 {
        return Err(Error::Shape(format!(
            "{what} operates on single-channel images, got {ca} channels"
        )));
    }
    Ok((ba, ha, wa))
}

/// Mutual-information loss between a label batch and a reconstruction batch
/// (both `[B,1,H,W]`, intensities in `[0,1]`): the batch-mean conditional
/// entropy of the label given the reconstruction, in bits, plus entropy
/// diagnostics. Differentiable with respect to both inputs.
pub fn mi_loss<R: Real>(
    g: &mut Graph<R>,
    label: Var,
    generated: Var,
    bank: &KernelBank,
) -> Result<(Var, EntropyReport)> {
    let (b, _, _) = check_pair(g, label, generated, "mi_loss")?;
    let wl = hcu::kernel_weights_var(g, label, bank)?;
    let wg = hcu::kernel_weights_var(g, generated, bank)?;
    let (_, joint_probs) = hcu::joint_var(g, wl, wg, b)?;
    let ce = g.mi_cond_entropy(joint_probs)?;
    let loss = g.mean_all(ce)?;

    let (_, label_probs) = hcu::marginal_var(g, wl, b)?;
    let probs = g.value(label_probs);
    let k = bank.k();
    let mut h_y = 0.0;
    for i in 0..b {
        let row: Vec<f64> = probs.data()[i * k..(i + 1) * k]
            .iter()
            .map(|p| p.as_f64())
            .collect();
        h_y += hcu::entropy_bits(&row);
    }
    h_y /= b as f64;
    let h_cond = g.value(loss).item()?.as_f64();
    Ok((
        loss,
        EntropyReport {
            h_y,
            h_cond,
            mi: h_y - h_cond,
        },
    ))
}

/// Multiscale SSIM between two `[B,1,H,W]` batches: contrast-structure at
/// every dyadic scale, luminance at the coarsest, combined by normalized
/// exponents. Returns the scalar node plus per-term diagnostics.
pub fn ms_ssim<R: Real>(
    g: &mut Graph<R>,
    a: Var,
    b: Var,
    cfg: &MsSsimConfig,
) -> Result<MsSsimEval> {
    let (_, h0, w0) = check_pair(g, a, b, "ms_ssim")?;
    let exps = cfg.normalized_exponents()?;
    let mut cur_a = a;
    let mut cur_b = b;
    let (mut h, mut w) = (h0, w0);
    let mut cs_terms = Vec::with_capacity(cfg.scales);
    let mut luminance = 0.0;
    let mut value: Option<Var> = None;
    for m in 0..cfg.scales {
        let (win, wsigma) = window_for_extent(h.min(w));
        if h.min(w) < win {
            return Err(Error::Shape(format!(
                "scale {} of {} is {h}x{w}, smaller than its {win}x{win} window; \
                 reduce the scale count for this extent",
                m + 1,
                cfg.scales
            )));
        }
        let wt = Tensor::from_f64(&[1, 1, win, win], &gaussian_window(win, wsigma))?;
        let wv = g.constant(wt)?;
        let mu_a = g.conv2d(cur_a, wv, None, 1, 0)?;
        let mu_b = g.conv2d(cur_b, wv, None, 1, 0)?;
        let aa = g.mul(cur_a, cur_a)?;
        let bb = g.mul(cur_b, cur_b)?;
        let ab = g.mul(cur_a, cur_b)?;
        let s_aa = g.conv2d(aa, wv, None, 1, 0)?;
        let s_bb = g.conv2d(bb, wv, None, 1, 0)?;
        let s_ab = g.conv2d(ab, wv, None, 1, 0)?;
        let mu_aa = g.mul(mu_a, mu_a)?;
        let mu_bb = g.mul(mu_b, mu_b)?;
        let mu_ab = g.mul(mu_a, mu_b)?;
        let var_a = g.sub(s_aa, mu_aa)?;
        let var_b = g.sub(s_bb, mu_bb)?;
        let cov = g.sub(s_ab, mu_ab)?;
        let cs_num = {
            let t = g.mul_scalar(cov, 2.0)?;
            g.add_scalar(t, SSIM_C2)?
        };
        let cs_den = {
            let t = g.add(var_a, var_b)?;
            g.add_scalar(t, SSIM_C2)?
        };
        let cs_map = g.div(cs_num, cs_den)?;
        let cs = g.mean_all(cs_map)?;
        cs_terms.push(g.value(cs).item()?.as_f64());
        let cs_floored = g.clamp_min(cs, TERM_FLOOR)?;
        let term = g.pow_scalar(cs_floored, exps[m])?;
        value = Some(match value {
            None => term,
            Some(v) => g.mul(v, term)?,
        });
        if m + 1 == cfg.scales {
            let l_num = {
                let t = g.mul_scalar(mu_ab, 2.0)?;
                g.add_scalar(t, SSIM_C1)?
            };
            let l_den = {
                let t = g.add(mu_aa, mu_bb)?;
                g.add_scalar(t, SSIM_C1)?
            };
            let l_map = g.div(l_num, l_den)?;
            let l = g.mean_all(l_map)?;
            luminance = g.value(l).item()?.as_f64();
            let l_floored = g.clamp_min(l, TERM_FLOOR)?;
            let l_term = g.pow_scalar(l_floored, exps[m])?;
            value = Some(g.mul(value.expect("at least one scale"), l_term)?);
        } else {
            cur_a = g.avg_pool2(cur_a)?;
            cur_b = g.avg_pool2(cur_b)?;
            h /= 2;
            w /= 2;
        }
    }
    Ok(MsSsimEval {
        value: value.expect("at least one scale"),
        cs_terms,
        luminance,
    })
}

/// Sum of `1 - ms_ssim(upsample(Gₘ), y)` over a set of output scales, each
/// bilinearly upsampled to the label extent in a single step.
fn ssim_deficit_sum<R: Real>(
    g: &mut Graph<R>,
    outputs: &[Var],
    label: Var,
    cfg: &MsSsimConfig,
) -> Result<Var> {
    let (_, _, hl, wl) = g.value(label).dims4()?;
    let mut total: Option<Var> = None;
    for (m, &out) in outputs.iter().enumerate() {
        let (_, _, ho, wo) = g.value(out).dims4()?;
        if ho == 0 || hl % ho != 0 || wl % wo != 0 || hl / ho != wl / wo {
            return Err(Error::Shape(format!(
                "output scale {} is {ho}x{wo}, incompatible with label {hl}x{wl}",
                m + 1
            )));
        }
        let factor = hl / ho;
        let up = if factor == 1 {
            out
        } else {
            g.upsample_bilinear(out, factor)?
        };
        let eval = ms_ssim(g, up, label, cfg)?;
        let one_minus = {
            let n = g.neg(eval.value)?;
            g.add_scalar(n, 1.0)?
        };
        total = Some(match total {
            None => one_minus,
            Some(t) => g.add(t, one_minus)?,
        });
    }
    total.ok_or_else(|| Error::Contract("similarity loss needs at least one output".into()))
}

/// Similarity loss over the generator's three output scales:
/// `Σₘ (1 - ms_ssim(upsample(Gₘ), y))` with G₁ upsampled ×4 and G₂ ×2.
/// Zero at exact reconstruction; in `[0, 3)` always.
pub fn ssim_loss_3scale<R: Real>(
    g: &mut Graph<R>,
    g1: Var,
    g2: Var,
    g3: Var,
    label: Var,
    cfg: &MsSsimConfig,
) -> Result<Var> {
    ssim_deficit_sum(g, &[g1, g2, g3], label, cfg)
}

/// Similarity loss for a single full-resolution output: `1 - ms_ssim(G, y)`.
pub fn ssim_loss_single<R: Real>(
    g: &mut Graph<R>,
    out: Var,
    label: Var,
    cfg: &MsSsimConfig,
) -> Result<Var> {
    ssim_deficit_sum(g, &[out], label, cfg)
}

/// Adversarial generator loss: binary cross-entropy of the discriminator's
/// logits on generated samples against the "real" target, averaged over
/// patches.
pub fn adversarial_g_loss<R: Real>(g: &mut Graph<R>, fake_logits: Var) -> Result<Var> {
    g.bce_with_logits(fake_logits, 1.0)
}

/// Discriminator loss: `½·BCE(σ(real), 1) + ½·BCE(σ(fake), 0)`.
pub fn discriminator_loss<R: Real>(
    g: &mut Graph<R>,
    real_logits: Var,
    fake_logits: Var,
) -> Result<Var> {
    let lr = g.bce_with_logits(real_logits, 1.0)?;
    let lf = g.bce_with_logits(fake_logits, 0.0)?;
    let half_r = g.mul_scalar(lr, 0.5)?;
    let half_f = g.mul_scalar(lf, 0.5)?;
    g.add(half_r, half_f)
}

/// Mean absolute error between two equally shaped nodes.
pub fn l1_loss<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d)?;
    g.mean_all(ad)
}

/// Total generator objective: `adv + λ₁·mi + λ₂·ssim`.
pub fn generator_total<R: Real>(
    g: &mut Graph<R>,
    adv: Var,
    mi: Var,
    ssim: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let m = g.mul_scalar(mi, weights.lambda_mi)?;
    let s = g.mul_scalar(ssim, weights.lambda_ssim)?;
    let t = g.add(adv, m)?;
    g.add(t, s)
}

/// Single-scale structural similarity between two images, for evaluation
/// reports: mean over sliding windows of the combined luminance-contrast-
/// structure index. Uses the same window policy as the multiscale loss.
pub fn ssim_metric(a: &Image, b: &Image) -> Result<f64> {
    if (a.h(), a.w()) != (b.h(), b.w()) {
        return Err(Error::Shape(format!(
            "ssim_metric needs equal extents, got {}x{} and {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let (win, wsigma) = window_for_extent(a.h().min(a.w()));
    if a.h().min(a.w()) < win {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than the {win}x{win} similarity window",
            a.h(),
            a.w()
        )));
    }
    let mut g = Graph::<f64>::new();
    let va = g.constant(a.to_tensor())?;
    let vb = g.constant(b.to_tensor())?;
    let wt = Tensor::from_f64(&[1, 1, win, win], &gaussian_window(win, wsigma))?;
    let wv = g.constant(wt)?;
    let mu_a = g.conv2d(va, wv, None, 1, 0)?;
    let mu_b = g.conv2d(vb, wv, None, 1, 0)?;
    let aa = g.mul(va, va)?;
    let bb = g.mul(vb, vb)?;
    let ab = g.mul(va, vb)?;
    let s_aa = g.conv2d(aa, wv, None, 1, 0)?;
    let s_bb = g.conv2d(bb, wv, None, 1, 0)?;
    let s_ab = g.conv2d(ab, wv, None, 1, 0)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(s_aa, mu_aa)?;
    let var_b = g.sub(s_bb, mu_bb)?;
    let cov = g.sub(s_ab, mu_ab)?;
    let num = {
        let l = g.mul_scalar(mu_ab, 2.0)?;
        let l = g.add_scalar(l, SSIM_C1)?;
        let c = g.mul_scalar(cov, 2.0)?;
        let c = g.add_scalar(c, SSIM_C2)?;
        g.mul(l, c)?
    };
    let den = {
        let l = g.add(mu_aa, mu_bb)?;
        let l = g.add_scalar(l, SSIM_C1)?;
        let c = g.add(var_a, var_b)?;
        let c = g.add_scalar(c, SSIM_C2)?;
        g.mul(l, c)?
    };
    let map = g.div(num, den)?;
    let mean = g.mean_all(map)?;
    g.value(mean).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_multi, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_image_tensor(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[b, 1, h, w],
            (0..b * h * w).map(|_| r.gen_range(0.02..0.98)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mi_against_constant_conditioner_equals_label_entropy() {
        let bank = KernelBank::new(64, 0.02).unwrap();
        // Start from an Image so the graph input and the reference entropy
        // see bitwise-identical pixel values.
        let mut r = ChaCha8Rng::seed_from_u64(41);
        let im = Image::new(12, 12, (0..144).map(|_| r.gen_range(0.02..0.98)).collect())
            .unwrap();
        let constant = Tensor::filled(&[1, 1, 12, 12], 0.37);
        let mut g = Graph::<f64>::new();
        let vl = g.variable(im.to_tensor()).unwrap();
        let vc = g.constant(constant).unwrap();
        let (loss, report) = mi_loss(&mut g, vl, vc, &bank).unwrap();

        let h = hcu::smooth_histogram(&im, &bank).unwrap();
        let entropy = hcu::entropy_bits(&h.probs);
        let got = g.value(loss).item().unwrap();
        assert!(
            (got - entropy).abs() < 1e-6,
            "loss {got} vs entropy {entropy}"
        );
        // A constant conditioner carries no information.
        assert!((report.h_y - entropy).abs() < 1e-9);
        assert!(report.mi.abs() < 1e-6, "mi {}", report.mi);
    }

    #[test]
    fn mi_is_bounded_by_zero_and_label_entropy() {
        let bank = KernelBank::new(48, 0.03).unwrap();
        for seed in 0..5 {
            let label = unit_image_tensor(1, 10, 10, seed);
            let other = unit_image_tensor(1, 10, 10, seed + 100);
            let mut g = Graph::<f64>::new();
            let vl = g.variable(label.clone()).unwrap();
            let vo = g.variable(other).unwrap();
            let (loss, report) = mi_loss(&mut g, vl, vo, &bank).unwrap();
            let got = g.value(loss).item().unwrap();
            assert!(got >= -1e-9, "seed {seed}: loss {got} negative");
            assert!(
                got <= report.h_y + 1e-9,
                "seed {seed}: loss {got} exceeds entropy {}",
                report.h_y
            );
            assert!(report.mi >= -1e-9, "seed {seed}: mi {}", report.mi);
            assert!((report.h_cond - got).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_of_identical_batches_beats_independent_pairs() {
        // Perfect reconstruction leaves only the kernel-smoothing share of
        // the conditional entropy, so it recovers far more information than
        // an unrelated image does.
        let bank = KernelBank::new(64, 0.02).unwrap();
        let label = unit_image_tensor(2, 12, 12, 7);
        let other = unit_image_tensor(2, 12, 12, 8);
        let mut g = Graph::<f64>::new();
        let vl = g.variable(label.clone()).unwrap();
        let vg = g.constant(label).unwrap();
        let vo = g.constant(other).unwrap();
        let (self_loss, self_report) = mi_loss(&mut g, vl, vg, &bank).unwrap();
        let (other_loss, _) = mi_loss(&mut g, vl, vo, &bank).unwrap();
        let (s, o) = (
            g.value(self_loss).item().unwrap(),
            g.value(other_loss).item().unwrap(),
        );
        assert!(s < o, "self-conditioned {s} vs independent {o}");
        assert!(self_report.mi > 1.0, "mi {}", self_report.mi);
    }

    #[test]
    fn mi_gradient_matches_finite_differences() {
        let bank = KernelBank::new(16, 0.05).unwrap();
        let label = unit_image_tensor(1, 4, 4, 51);
        let gen = unit_image_tensor(1, 4, 4, 52);
        let rep = grad_check_multi(
            |g, vs| Ok(mi_loss(g, vs[0], vs[1], &bank)?.0),
            &[label, gen],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn msssim_of_identical_images_is_one() {
        let x = unit_image_tensor(2, 32, 32, 61);
        let mut g = Graph::<f64>::new();
        let va = g.variable(x.clone()).unwrap();
        let vb = g.constant(x).unwrap();
        let eval = ms_ssim(&mut g, va, vb, &MsSsimConfig::default()).unwrap();
        let got = g.value(eval.value).item().unwrap();
        assert!((got - 1.0).abs() < 1e-9, "ms_ssim(x,x) = {got}");
        for cs in &eval.cs_terms {
            assert!((cs - 1.0).abs() < 1e-12);
        }
        assert!((eval.luminance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn msssim_constant_images_match_closed_form_luminance() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::filled(&[1, 1, 32, 32], 0.0)).unwrap();
        let b = g.variable(Tensor::filled(&[1, 1, 32, 32], 1.0)).unwrap();
        let cfg = MsSsimConfig::default();
        let eval = ms_ssim(&mut g, a, b, &cfg).unwrap();
        // Zero variances: every contrast-structure term is exactly 1; the
        // luminance term is C1/(1+C1).
        let expect_l = SSIM_C1 / (1.0 + SSIM_C1);
        assert!(
            (eval.luminance - expect_l).abs() < 1e-7,
            "luminance {} vs {expect_l}",
            eval.luminance
        );
        for cs in &eval.cs_terms {
            assert!((cs - 1.0).abs() < 1e-12);
        }
        let got = g.value(eval.value).item().unwrap();
        assert!((got - expect_l.powf(0.4)).abs() < 1e-9);
    }

    #[test]
    fn msssim_is_symmetric() {
        let a = unit_image_tensor(1, 32, 32, 71);
        let b = unit_image_tensor(1, 32, 32, 72);
        let cfg = MsSsimConfig::default();
        let mut g = Graph::<f64>::new();
        let va = g.variable(a).unwrap();
        let vb = g.variable(b).unwrap();
        let ab = ms_ssim(&mut g, va, vb, &cfg).unwrap();
        let ba = ms_ssim(&mut g, vb, va, &cfg).unwrap();
        let (x, y) = (
            g.value(ab.value).item().unwrap(),
            g.value(ba.value).item().unwrap(),
        );
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }

    #[test]
    fn msssim_stays_in_unit_interval() {
        // Weighted Cauchy-Schwarz bounds every contrast-structure and
        // luminance window term by 1, and the floor keeps the product
        // positive.
        for seed in 0..4 {
            let a = unit_image_tensor(1, 32, 32, 200 + seed);
            let b = unit_image_tensor(1, 32, 32, 300 + seed);
            let mut g = Graph::<f64>::new();
            let va = g.variable(a).unwrap();
            let vb = g.variable(b).unwrap();
            let eval = ms_ssim(&mut g, va, vb, &MsSsimConfig::default()).unwrap();
            let got = g.value(eval.value).item().unwrap();
            assert!(got > 0.0 && got <= 1.0 + 1e-12, "seed {seed}: {got}");
        }
    }

    #[test]
    fn msssim_rejects_scales_too_deep_for_extent() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::filled(&[1, 1, 16, 16], 0.5)).unwrap();
        let b = g.variable(Tensor::filled(&[1, 1, 16, 16], 0.5)).unwrap();
        // 16 -> 8 -> 4: the third scale is smaller than its 7x7 window.
        let r = ms_ssim(&mut g, a, b, &MsSsimConfig::default());
        match r {
            Err(Error::Shape(msg)) => assert!(msg.contains("scale count"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn msssim_gradient_matches_finite_differences() {
        let a = unit_image_tensor(1, 16, 16, 81);
        let b = unit_image_tensor(1, 16, 16, 82);
        let cfg = MsSsimConfig {
            scales: 2,
            exponents: vec![0.4, 0.6],
        };
        let rep = grad_check_multi(
            |g, vs| Ok(ms_ssim(g, vs[0], vs[1], &cfg)?.value),
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn three_scale_loss_is_zero_at_exact_constant_reconstruction() {
        // A constant label survives downsampling and bilinear upsampling
        // exactly, so all three terms hit unit similarity.
        let cfg = MsSsimConfig::default();
        let mut g = Graph::<f64>::new();
        let y = g.variable(Tensor::filled(&[1, 1, 32, 32], 0.4)).unwrap();
        let g1 = g.variable(Tensor::filled(&[1, 1, 8, 8], 0.4)).unwrap();
        let g2 = g.variable(Tensor::filled(&[1, 1, 16, 16], 0.4)).unwrap();
        let g3 = g.variable(Tensor::filled(&[1, 1, 32, 32], 0.4)).unwrap();
        let loss = ssim_loss_3scale(&mut g, g1, g2, g3, y, &cfg).unwrap();
        let got = g.value(loss).item().unwrap();
        assert!(got.abs() < 1e-9, "loss {got}");
    }

    #[test]
    fn three_scale_loss_stays_in_range_and_rejects_bad_factors() {
        let cfg = MsSsimConfig::default();
        let y = unit_image_tensor(1, 32, 32, 91);
        let g1 = unit_image_tensor(1, 8, 8, 92);
        let g2 = unit_image_tensor(1, 16, 16, 93);
        let g3 = unit_image_tensor(1, 32, 32, 94);
        let mut g = Graph::<f64>::new();
        let vy = g.variable(y).unwrap();
        let v1 = g.variable(g1).unwrap();
        let v2 = g.variable(g2).unwrap();
        let v3 = g.variable(g3).unwrap();
        let loss = ssim_loss_3scale(&mut g, v1, v2, v3, vy, &cfg).unwrap();
        let got = g.value(loss).item().unwrap();
        assert!((0.0..3.0).contains(&got), "loss {got}");
        g.backward(loss).unwrap();
        assert!(g.grad(v1).is_some());
        assert!(g.grad(v2).is_some());
        assert!(g.grad(v3).is_some());

        // A 9x9 output cannot be upsampled onto a 32x32 label.
        let bad = g.variable(Tensor::filled(&[1, 1, 9, 9], 0.5)).unwrap();
        assert!(ssim_loss_3scale(&mut g, bad, v2, v3, vy, &cfg).is_err());
    }

    #[test]
    fn three_scale_loss_gradient_matches_finite_differences() {
        // Vary only the coarsest output (the cheapest input) to keep the
        // finite-difference sweep quick; the other inputs are constants.
        let y = unit_image_tensor(1, 32, 32, 95);
        let g1 = unit_image_tensor(1, 8, 8, 96);
        let g2 = unit_image_tensor(1, 16, 16, 97);
        let cfg = MsSsimConfig::default();
        let rep = grad_check_multi(
            |gr, vs| {
                let vy = gr.constant(y.clone())?;
                let v2 = gr.constant(g2.clone())?;
                let v3 = gr.constant(y.clone())?;
                ssim_loss_3scale(gr, vs[0], v2, v3, vy, &cfg)
            },
            std::slice::from_ref(&g1),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn single_scale_loss_is_zero_for_perfect_output() {
        let y = unit_image_tensor(1, 32, 32, 98);
        let mut g = Graph::<f64>::new();
        let vy = g.variable(y.clone()).unwrap();
        let out = g.constant(y).unwrap();
        let loss = ssim_loss_single(&mut g, out, vy, &MsSsimConfig::default()).unwrap();
        assert!(g.value(loss).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn adversarial_losses_at_zero_logits_are_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        let lg = adversarial_g_loss(&mut g, z).unwrap();
        let ld = discriminator_loss(&mut g, z, z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(lg).item().unwrap() - ln2).abs() < 1e-12);
        assert!((g.value(ld).item().unwrap() - ln2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_discriminator_has_low_loss() {
        let mut g = Graph::<f64>::new();
        let real = g.variable(Tensor::filled(&[1, 1, 2, 2], 12.0)).unwrap();
        let fake = g.variable(Tensor::filled(&[1, 1, 2, 2], -12.0)).unwrap();
        let ld = discriminator_loss(&mut g, real, fake).unwrap();
        assert!(g.value(ld).item().unwrap() < 1e-4);
        // And the generator loss on those confident "fake" logits is high.
        let lg = adversarial_g_loss(&mut g, fake).unwrap();
        assert!(g.value(lg).item().unwrap() > 10.0);
    }

    #[test]
    fn discriminator_loss_swaps_with_negated_logits() {
        // BCE(σ(z),1) = BCE(σ(-z),0), so swapping the halves while negating
        // both logit banks leaves the equally weighted loss unchanged.
        let a = unit_image_tensor(1, 4, 4, 111);
        let b = unit_image_tensor(1, 4, 4, 112);
        let mut g = Graph::<f64>::new();
        let va = g.variable(a.clone()).unwrap();
        let vb = g.variable(b.clone()).unwrap();
        let na = g.neg(va).unwrap();
        let nb = g.neg(vb).unwrap();
        let d1 = discriminator_loss(&mut g, va, vb).unwrap();
        let d2 = discriminator_loss(&mut g, nb, na).unwrap();
        let (x, y) = (
            g.value(d1).item().unwrap(),
            g.value(d2).item().unwrap(),
        );
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }

    #[test]
    fn generator_total_weights_components() {
        let mut g = Graph::<f64>::new();
        let adv = g.variable(Tensor::scalar(0.7)).unwrap();
        let mi = g.variable(Tensor::scalar(2.0)).unwrap();
        let ssim = g.variable(Tensor::scalar(1.5)).unwrap();
        let w = LossWeights::default();
        let total = generator_total(&mut g, adv, mi, ssim, &w).unwrap();
        // 0.7 + 1·2.0 + 5·1.5
        assert!((g.value(total).item().unwrap() - 10.2).abs() < 1e-12);

        // Zero weights degenerate to the adversarial term alone.
        let w0 = LossWeights {
            lambda_mi: 0.0,
            lambda_ssim: 0.0,
        };
        let t0 = generator_total(&mut g, adv, mi, ssim, &w0).unwrap();
        assert!((g.value(t0).item().unwrap() - 0.7).abs() < 1e-12);

        // Doubling the MI weight adds exactly the MI value.
        let w2 = LossWeights {
            lambda_mi: 2.0,
            lambda_ssim: 5.0,
        };
        let t2 = generator_total(&mut g, adv, mi, ssim, &w2).unwrap();
        let base = g.value(total).item().unwrap();
        assert!((g.value(t2).item().unwrap() - (base + 2.0)).abs() < 1e-12);

        // Negative weights are rejected.
        let wneg = LossWeights {
            lambda_mi: -1.0,
            lambda_ssim: 5.0,
        };
        assert!(generator_total(&mut g, adv, mi, ssim, &wneg).is_err());
    }

    /// Direct sliding-window SSIM, written independently of the graph path.
    fn ssim_naive(a: &Image, b: &Image, win: usize, sigma: f64) -> f64 {
        let (h, w) = (a.h(), a.w());
        let kw = gaussian_window(win, sigma);
        let (oh, ow) = (h - win + 1, w - win + 1);
        let mut total = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..win {
                    for kx in 0..win {
                        let wv = kw[ky * win + kx];
                        let av = a.data()[(oy + ky) * w + ox + kx] as f64;
                        let bv = b.data()[(oy + ky) * w + ox + kx] as f64;
                        ma += wv * av;
                        mb += wv * bv;
                        saa += wv * av * av;
                        sbb += wv * bv * bv;
                        sab += wv * av * bv;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
        total / (oh * ow) as f64
    }

    #[test]
    fn ssim_metric_matches_direct_sliding_window_evaluation() {
        let mut r = ChaCha8Rng::seed_from_u64(101);
        for (h, w, win, sigma) in [(40, 40, 11, 1.5), (20, 24, 7, 1.0)] {
            let a = Image::new(h, w, (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect())
                .unwrap();
            let b = Image::new(h, w, (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect())
                .unwrap();
            let got = ssim_metric(&a, &b).unwrap();
            let expect = ssim_naive(&a, &b, win, sigma);
            assert!(
                (got - expect).abs() < 1e-6,
                "{h}x{w}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn ssim_metric_identity_symmetry_and_size_guard() {
        let mut r = ChaCha8Rng::seed_from_u64(102);
        let a = Image::new(16, 16, (0..256).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let b = Image::new(16, 16, (0..256).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        assert!((ssim_metric(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (ab, ba) = (ssim_metric(&a, &b).unwrap(), ssim_metric(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
        let tiny = Image::zeros(5, 5);
        assert!(ssim_metric(&tiny, &tiny).is_err());
    }
}
