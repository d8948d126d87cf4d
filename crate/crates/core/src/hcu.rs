//! Histogram computation: smooth, differentiable intensity histograms.
//!
//! Intensities in `[0,1]` are spread over `k` equally spaced bin centers
//! with a Gaussian kernel of width `sigma`, row-normalized per pixel. The
//! resulting weight field yields marginal histograms by column summation and
//! joint histograms by pixel-wise outer-product accumulation, all
//! differentiable through the tape in [`crate::tensor`]. This module layers
//! the public bank/histogram types and plain-`f64` reporting helpers over
//! those graph operations.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Graph, Real, Var};

/// Floor for logarithm arguments in entropy computations.
pub const LOG_FLOOR: f64 = 1e-12;

/// A bank of `k` Gaussian kernels centered at `i/(k-1)` on `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    k: usize,
    sigma: f64,
}

impl KernelBank {
    pub fn new(k: usize, sigma: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!(
                "kernel bank needs at least 2 bins, got {k}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "kernel bank width must be positive and finite, got {sigma}"
            )));
        }
        Ok(KernelBank { k, sigma })
    }

    /// The bank used throughout training and reporting: 256 bins, width 0.01.
    pub fn default_bank() -> Self {
        KernelBank { k: 256, sigma: 0.01 }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Spacing between adjacent bin centers.
    pub fn bin_width(&self) -> f64 {
        1.0 / (self.k - 1) as f64
    }

    /// Bin center positions.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| i as f64 / (self.k - 1) as f64)
            .collect()
    }
}

impl Default for KernelBank {
    fn default() -> Self {
        Self::default_bank()
    }
}

/// Per-pixel kernel weights of one image: row `p` holds pixel `p`'s
/// normalized kernel evaluated at every bin center.
#[derive(Debug, Clone)]
pub struct WeightField {
    pub pixels: usize,
    pub bins: usize,
    /// Row-major `[pixels, bins]`.
    pub weights: Vec<f64>,
}

impl WeightField {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.weights[p * self.bins..(p + 1) * self.bins]
    }
}

/// A smooth marginal histogram: expected counts and their normalization.
#[derive(Debug, Clone)]
pub struct SmoothHistogram {
    /// Expected counts per bin; sums to the pixel count.
    pub counts: Vec<f64>,
    /// Probability mass per bin; sums to 1.
    pub probs: Vec<f64>,
}

/// A smooth joint histogram over `bins x bins` cells.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    pub bins: usize,
    /// Row-major expected counts; sums to the pixel count.
    pub counts: Vec<f64>,
    /// Row-major probability mass; sums to 1.
    pub probs: Vec<f64>,
}

impl JointHistogram {
    /// Marginal over columns (the row variable's histogram).
    pub fn row_marginal(&self) -> Vec<f64> {
        let k = self.bins;
        (0..k)
            .map(|i| self.probs[i * k..(i + 1) * k].iter().sum())
            .collect()
    }

    /// Marginal over rows (the column variable's histogram).
    pub fn col_marginal(&self) -> Vec<f64> {
        let k = self.bins;
        let mut out = vec![0.0; k];
        for i in 0..k {
            for (o, &v) in out.iter_mut().zip(&self.probs[i * k..(i + 1) * k]) {
                *o += v;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Graph-level building blocks (used by the losses and the trainer).
// ---------------------------------------------------------------------------

/// Kernel weight field of an image batch node: clamps to `[0,1]` and spreads
/// every pixel over the bank. Output is `[total_pixels, k]`.
pub fn kernel_weights_var<R: Real>(g: &mut Graph<R>, image: Var, bank: &KernelBank) -> Result<Var> {
    let c = g.clamp(image, 0.0, 1.0)?;
    g.gauss_weights(c, bank.k(), bank.sigma())
}

/// Marginal histograms from a weight field, one row per image: returns
/// expected counts `[images, k]` and probabilities `[images, k]`.
pub fn marginal_var<R: Real>(
    g: &mut Graph<R>,
    weights: Var,
    images: usize,
) -> Result<(Var, Var)> {
    let rows = g.value(weights).shape()[0];
    if images == 0 || rows % images != 0 {
        return Err(Error::Shape(format!(
            "{rows} weight rows do not divide into {images} images"
        )));
    }
    let counts = g.col_sum_grouped(weights, images)?;
    let probs = g.mul_scalar(counts, images as f64 / rows as f64)?;
    Ok((counts, probs))
}

/// Joint histograms of two weight fields, one `[k,k]` slice per image:
/// returns expected counts `[images, k, k]` and probabilities.
pub fn joint_var<R: Real>(
    g: &mut Graph<R>,
    wa: Var,
    wb: Var,
    images: usize,
) -> Result<(Var, Var)> {
    let rows = g.value(wa).shape()[0];
    if images == 0 || rows % images != 0 {
        return Err(Error::Shape(format!(
            "{rows} weight rows do not divide into {images} images"
        )));
    }
    let counts = g.joint_hist(wa, wb, images)?;
    let probs = g.mul_scalar(counts, images as f64 / rows as f64)?;
    Ok((counts, probs))
}

// ---------------------------------------------------------------------------
// Plain-f64 evaluation for reports and tests.
// ---------------------------------------------------------------------------

/// Kernel weight field of a single image, evaluated in `f64`.
pub fn kernel_weights(image: &Image, bank: &KernelBank) -> Result<WeightField> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(image.to_tensor())?;
    let w = kernel_weights_var(&mut g, x, bank)?;
    Ok(WeightField {
        pixels: image.len(),
        bins: bank.k(),
        weights: g.value(w).data().to_vec(),
    })
}

/// Smooth marginal histogram of a single image, evaluated in `f64`.
pub fn smooth_histogram(image: &Image, bank: &KernelBank) -> Result<SmoothHistogram> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(image.to_tensor())?;
    let w = kernel_weights_var(&mut g, x, bank)?;
    let (h, p) = marginal_var(&mut g, w, 1)?;
    Ok(SmoothHistogram {
        counts: g.value(h).data().to_vec(),
        probs: g.value(p).data().to_vec(),
    })
}

/// Smooth joint histogram of two equally sized images, evaluated in `f64`.
pub fn joint_histogram(a: &Image, b: &Image, bank: &KernelBank) -> Result<JointHistogram> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "joint histogram needs equally sized images, got {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let xa = g.constant(a.to_tensor())?;
    let xb = g.constant(b.to_tensor())?;
    let wa = kernel_weights_var(&mut g, xa, bank)?;
    let wb = kernel_weights_var(&mut g, xb, bank)?;
    let (h, p) = joint_var(&mut g, wa, wb, 1)?;
    Ok(JointHistogram {
        bins: bank.k(),
        counts: g.value(h).data().to_vec(),
        probs: g.value(p).data().to_vec(),
    })
}

/// Hard-assignment histogram with one bin per kernel center (nearest-center
/// binning), normalized to sum 1. This is the non-differentiable reference
/// the smooth histogram approximates.
pub fn hard_histogram(image: &Image, k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Config(format!(
            "hard histogram needs at least 2 bins, got {k}"
        )));
    }
    if image.is_empty() {
        return Err(Error::Contract("hard histogram of an empty image".into()));
    }
    let mut counts = vec![0.0f64; k];
    let scale = (k - 1) as f64;
    for &v in image.data() {
        let idx = (v as f64).clamp(0.0, 1.0) * scale;
        counts[idx.round() as usize] += 1.0;
    }
    let n = image.len() as f64;
    for c in &mut counts {
        *c /= n;
    }
    Ok(counts)
}

/// Shannon entropy in bits of a probability vector; zero-mass bins
/// contribute nothing and log arguments are floored at 1e-12.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.max(LOG_FLOOR).log2();
        }
    }
    h
}

/// Total-variation distance between two probability vectors of equal length.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
}

/// One-dimensional earth-mover's distance between two histograms on the
/// same uniformly spaced support: the area between their CDFs.
pub fn emd_1d(p: &[f64], q: &[f64], bin_width: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "earth-mover distance needs equal lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    let mut emd = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        acc += a - b;
        emd += acc.abs() * bin_width;
    }
    Ok(emd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(1, n, (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn bank_validation_and_geometry() {
        assert!(KernelBank::new(1, 0.01).is_err());
        assert!(KernelBank::new(256, 0.0).is_err());
        assert!(KernelBank::new(256, f64::NAN).is_err());
        let bank = KernelBank::default_bank();
        assert_eq!(bank.k(), 256);
        assert_eq!(bank.sigma(), 0.01);
        assert!((bank.bin_width() - 1.0 / 255.0).abs() < 1e-18);
        let c = bank.centers();
        assert_eq!(c[0], 0.0);
        assert_eq!(c[255], 1.0);
    }

    #[test]
    fn smooth_histogram_normalizations() {
        let im = random_image(400, 1);
        let bank = KernelBank::default_bank();
        let h = smooth_histogram(&im, &bank).unwrap();
        let count_sum: f64 = h.counts.iter().sum();
        let prob_sum: f64 = h.probs.iter().sum();
        assert!((count_sum - 400.0).abs() < 1e-6, "counts sum {count_sum}");
        assert!((prob_sum - 1.0).abs() < 1e-9, "probs sum {prob_sum}");
    }

    #[test]
    fn constant_image_recovers_single_kernel_row() {
        let im = Image::new(2, 2, vec![0.5; 4]).unwrap();
        let bank = KernelBank::default_bank();
        let wf = kernel_weights(&im, &bank).unwrap();
        let h = smooth_histogram(&im, &bank).unwrap();
        for (a, b) in h.probs.iter().zip(wf.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_marginalization_matches_marginals() {
        let bank = KernelBank::new(64, 0.02).unwrap();
        let a = random_image(200, 2);
        let b = random_image(200, 3);
        let j = joint_histogram(&a, &b, &bank).unwrap();
        let ha = smooth_histogram(&a, &bank).unwrap();
        let hb = smooth_histogram(&b, &bank).unwrap();
        let rm = j.row_marginal();
        let cm = j.col_marginal();
        for i in 0..64 {
            assert!((rm[i] - ha.probs[i]).abs() < 1e-9, "row marginal bin {i}");
            assert!((cm[i] - hb.probs[i]).abs() < 1e-9, "col marginal bin {i}");
        }
        let total: f64 = j.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smooth_tracks_hard_histogram_within_tv_bound() {
        let bank = KernelBank::default_bank();
        // Dense continuous intensity distributions (uniform noise and a
        // speckle-like exponential) stay within 5% total variation of the
        // hard-binned reference at sigma = 0.01, provided the sample is
        // large enough that per-bin counting noise does not dominate.
        let n = 256 * 256;
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let uniform = random_image(n, 4);
        let speckle = Image::new(
            256,
            256,
            (0..n)
                .map(|_| {
                    let e = -(1.0f64 - r.gen::<f64>()).ln();
                    ((e / 4.0) as f32).clamp(0.0, 1.0)
                })
                .collect(),
        )
        .unwrap();
        for im in [&uniform, &speckle] {
            let smooth = smooth_histogram(im, &bank).unwrap();
            let hard = hard_histogram(im, bank.k()).unwrap();
            let tv = tv_distance(&smooth.probs, &hard);
            assert!(tv < 0.05, "TV {tv}");
        }
    }

    #[test]
    fn entropy_hand_values() {
        assert!((entropy_bits(&[0.25; 4]) - 2.0).abs() < 1e-12);
        assert_eq!(entropy_bits(&[1.0, 0.0]), 0.0);
        assert!((entropy_bits(&[0.5, 0.5]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emd_hand_values() {
        // All mass moved from the first to the last of 3 bins spaced 0.5
        // apart travels distance 1.
        let d = emd_1d(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], 0.5).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(emd_1d(&[0.3, 0.7], &[0.3, 0.7], 0.1).unwrap(), 0.0);
        assert!(emd_1d(&[1.0], &[0.5, 0.5], 0.1).is_err());
        // Symmetry.
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let ab = emd_1d(&p, &q, 1.0 / 2.0).unwrap();
        let ba = emd_1d(&q, &p, 1.0 / 2.0).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Every weight row is a probability vector regardless of bank
        /// geometry or image content.
        #[test]
        fn prop_weight_rows_sum_to_one(
            seed in 0u64..1000,
            k in 2usize..300,
            sigma in 1e-4f64..0.5,
            n in 1usize..50,
        ) {
            let im = random_image(n, seed);
            let bank = KernelBank::new(k, sigma).unwrap();
            let wf = kernel_weights(&im, &bank).unwrap();
            for p in 0..n {
                let s: f64 = wf.row(p).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9, "row {} sums to {}", p, s);
                prop_assert!(wf.row(p).iter().all(|&w| w >= 0.0));
            }
        }

        /// Marginal normalizations hold for arbitrary content.
        #[test]
        fn prop_marginal_sums(seed in 0u64..1000, n in 1usize..80) {
            let im = random_image(n, seed);
            let bank = KernelBank::new(64, 0.02).unwrap();
            let h = smooth_histogram(&im, &bank).unwrap();
            let cs: f64 = h.counts.iter().sum();
            let ps: f64 = h.probs.iter().sum();
            prop_assert!((cs - n as f64).abs() < 1e-6);
            prop_assert!((ps - 1.0).abs() < 1e-9);
        }

        /// Swapping the joint's arguments transposes it exactly.
        #[test]
        fn prop_joint_transpose_symmetry(seed in 0u64..1000, n in 1usize..40) {
            let a = random_image(n, seed);
            let b = random_image(n, seed.wrapping_add(1));
            let bank = KernelBank::new(32, 0.03).unwrap();
            let jab = joint_histogram(&a, &b, &bank).unwrap();
            let jba = joint_histogram(&b, &a, &bank).unwrap();
            for i in 0..32 {
                for j in 0..32 {
                    prop_assert_eq!(
                        jab.counts[i * 32 + j].to_bits(),
                        jba.counts[j * 32 + i].to_bits()
                    );
                }
            }
        }
    }
}
