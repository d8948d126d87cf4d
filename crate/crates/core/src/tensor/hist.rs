//! Differentiable histogram operations.
//!
//! [`Graph::gauss_weights`] spreads each pixel's intensity over a bank of
//! histogram bins with a row-normalized Gaussian kernel; weights more than
//! 6 standard deviations from a pixel's value (below 2e-8 of the peak
//! before normalization) are dropped, so each row is nonzero only inside a
//! recorded window. [`Graph::joint_hist`] exploits those windows to build
//! per-image joint histograms by accumulating tiny per-pixel outer products
//! in pixel-major order instead of multiplying dense weight matrices, and
//! [`Graph::mi_cond_entropy`] reduces a joint distribution to the
//! conditional entropy (in bits) of its row variable given its column
//! variable.

use super::graph::{add_grad, Node, Op};
use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to logarithm arguments inside the entropy reduction.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-pixel nonzero bin range for a value `v`, as a half-open interval.
fn window(v: f64, k: usize, sigma: f64) -> (u32, u32) {
    let vf = v * (k - 1) as f64;
    let cut = 6.0 * sigma * (k - 1) as f64;
    let lo = (vf - cut).ceil().max(0.0) as u32;
    let hi = (((vf + cut).floor() as i64 + 1).clamp(0, k as i64)) as u32;
    if lo >= hi {
        // Degenerate kernel (sigma far below the bin pitch): fall back to
        // the nearest bin so every row keeps positive mass.
        let nearest = vf.round().clamp(0.0, (k - 1) as f64) as u32;
        (nearest, nearest + 1)
    } else {
        (lo, hi)
    }
}

fn windows_of<'a, R: Real>(nodes: &'a [Node<R>], v: Var) -> Result<&'a [(u32, u32)]> {
    match &nodes[v.0].op {
        Op::GaussWeights { windows, .. } => Ok(windows),
        _ => Err(Error::Contract(
            "joint_hist inputs must come directly from gauss_weights".to_string(),
        )),
    }
}

impl<R: Real> Graph<R> {
    /// Row-normalized Gaussian kernel weights of an image against `k`
    /// equally spaced bin centers `i/(k-1)` on `[0,1]`.
    ///
    /// The input may have any shape; each element becomes one row of the
    /// `[pixels, k]` output, and every row sums to exactly the normalization
    /// of its windowed kernel (1 up to rounding). Values must already lie in
    /// `[0,1]`; clamp first if that is not guaranteed.
    pub fn gauss_weights(&mut self, x: Var, k: usize, sigma: f64) -> Result<Var> {
        if k < 2 {
            return Err(Error::Contract(format!(
                "gauss_weights needs at least 2 bins, got {k}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::Contract(format!(
                "gauss_weights needs a positive kernel width, got {sigma}"
            )));
        }
        let t = self.value(x);
        let p = t.len();
        if p == 0 {
            return Err(Error::Contract("gauss_weights on an empty tensor".into()));
        }
        if let Some(bad) = t.data().iter().find(|v| {
            !(**v >= R::zero() && **v <= R::one())
        }) {
            return Err(Error::Contract(format!(
                "gauss_weights input must lie in [0,1], found {bad}"
            )));
        }
        let centers: Vec<R> = (0..k)
            .map(|i| R::of(i as f64 / (k - 1) as f64))
            .collect();
        let sig = R::of(sigma);
        let half = R::of(-0.5);
        let mut weights = vec![R::zero(); p * k];
        let mut windows = vec![(0u32, 0u32); p];
        for (pi, &v) in t.data().iter().enumerate() {
            let (lo, hi) = window(v.as_f64(), k, sigma);
            windows[pi] = (lo, hi);
            let row = &mut weights[pi * k..pi * k + k];
            // The normalized row is a softmax of -z²/2; shifting by the
            // window's smallest z² cancels in the normalization and keeps
            // the peak weight at exactly 1, so the row sum can never
            // underflow to zero even for extreme kernel widths.
            let mut z2_min = R::infinity();
            for i in lo as usize..hi as usize {
                let z = (v - centers[i]) / sig;
                let z2 = z * z;
                row[i] = z2;
                if z2 < z2_min {
                    z2_min = z2;
                }
            }
            let mut s = R::zero();
            for i in lo as usize..hi as usize {
                let w = (half * (row[i] - z2_min)).exp();
                row[i] = w;
                s = s + w;
            }
            for w in &mut row[lo as usize..hi as usize] {
                *w = *w / s;
            }
        }
        let value = Tensor::new(&[p, k], weights)?;
        let needs = self.needs(x);
        self.push(
            value,
            Op::GaussWeights {
                x,
                sigma: sig,
                centers,
                windows,
            },
            needs,
        )
    }

    /// Joint histogram of two weight fields, one `[k, k]` slice per image.
    ///
    /// Both inputs must come straight from [`Graph::gauss_weights`] over
    /// tensors of identical pixel count, which must divide evenly into
    /// `groups` images. Slice `g` accumulates, in ascending pixel order, the
    /// outer product of the two kernel rows of every pixel of image `g`; the
    /// result sums to the per-image pixel count.
    pub fn joint_hist(&mut self, wa: Var, wb: Var, groups: usize) -> Result<Var> {
        let (pa, ka) = self.value(wa).dims2()?;
        let (pb, kb) = self.value(wb).dims2()?;
        if (pa, ka) != (pb, kb) {
            return Err(Error::Shape(format!(
                "joint_hist weight fields disagree: [{pa},{ka}] vs [{pb},{kb}]"
            )));
        }
        if groups == 0 || pa % groups != 0 {
            return Err(Error::Shape(format!(
                "joint_hist: {pa} pixels do not divide into {groups} images"
            )));
        }
        let k = ka;
        let per = pa / groups;
        let awin = windows_of(&self.nodes, wa)?.to_vec();
        let bwin = windows_of(&self.nodes, wb)?.to_vec();
        let a = self.value(wa).data();
        let b = self.value(wb).data();
        let mut out = vec![R::zero(); groups * k * k];
        for gi in 0..groups {
            let slice = &mut out[gi * k * k..(gi + 1) * k * k];
            for p in gi * per..(gi + 1) * per {
                let (alo, ahi) = awin[p];
                let (blo, bhi) = bwin[p];
                let arow = &a[p * k..(p + 1) * k];
                let brow = &b[p * k + blo as usize..p * k + bhi as usize];
                for i in alo as usize..ahi as usize {
                    let av = arow[i];
                    let orow = &mut slice[i * k + blo as usize..i * k + bhi as usize];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = av.mul_add(bv, *o);
                    }
                }
            }
        }
        let value = Tensor::new(&[groups, k, k], out)?;
        let needs = self.needs(wa) || self.needs(wb);
        self.push(value, Op::JointHist { wa, wb, groups }, needs)
    }

    /// Conditional entropy, in bits, of each `[k, k]` joint distribution
    /// slice: `-Σᵢⱼ P(i,j)·log₂(P(i,j)/P_col(j))`, where `P_col` is the
    /// column marginal. Zero-mass cells contribute nothing and logarithm
    /// arguments are floored at 1e-12. Accepts `[k,k]` or `[groups,k,k]`
    /// and returns one value per slice.
    pub fn mi_cond_entropy(&mut self, p: Var) -> Result<Var> {
        let sh = self.value(p).shape().to_vec();
        let (groups, k) = match sh.as_slice() {
            [k1, k2] if k1 == k2 => (1, *k1),
            [g, k1, k2] if k1 == k2 => (*g, *k1),
            _ => {
                return Err(Error::Shape(format!(
                    "mi_cond_entropy expects a square [k,k] or [groups,k,k] tensor, got {sh:?}"
                )))
            }
        };
        let data = self.value(p).data();
        let floor = R::of(LOG_FLOOR);
        let mut out = vec![R::zero(); groups];
        for gi in 0..groups {
            let slice = &data[gi * k * k..(gi + 1) * k * k];
            let mut q = vec![R::zero(); k];
            for i in 0..k {
                let row = &slice[i * k..(i + 1) * k];
                for (qq, &v) in q.iter_mut().zip(row) {
                    *qq = *qq + v;
                }
            }
            let mut l = R::zero();
            for i in 0..k {
                let row = &slice[i * k..(i + 1) * k];
                for (j, &v) in row.iter().enumerate() {
                    if v > R::zero() {
                        let r = (v / q[j]).max(floor);
                        l = l - v * r.log2();
                    }
                }
            }
            out[gi] = l;
        }
        let value = Tensor::new(&[groups], out)?;
        let needs = self.needs(p);
        self.push(value, Op::MiCondEntropy(p), needs)
    }
}

/// Backward rules for the histogram operations.
pub(crate) fn backward_hist_family<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Tensor<R>>],
    idx: usize,
    gout: &Tensor<R>,
) -> Result<()> {
    let needs = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| &nodes[v.0].value;
    let g = gout.data();
    match &nodes[idx].op {
        Op::GaussWeights {
            x,
            sigma,
            centers,
            windows,
        } => {
            if needs(*x) {
                // With raw kernel w_i = exp(-((v-b_i)/σ)²/2) and normalized
                // row y_i = w_i/s: dL/dv = Σᵢ gᵢ·yᵢ·((bᵢ-v)/σ² - e), where
                // e = Σⱼ yⱼ·(bⱼ-v)/σ² is the row's mean drift term from the
                // quotient rule through s.
                let k = centers.len();
                let y = nodes[idx].value.data();
                let xd = val(*x).data();
                let inv_s2 = R::one() / (*sigma * *sigma);
                let mut dx = vec![R::zero(); xd.len()];
                for (pi, &v) in xd.iter().enumerate() {
                    let (lo, hi) = windows[pi];
                    let row = &y[pi * k..(pi + 1) * k];
                    let grow = &g[pi * k..(pi + 1) * k];
                    let mut drift = R::zero();
                    for i in lo as usize..hi as usize {
                        drift = drift + row[i] * (centers[i] - v) * inv_s2;
                    }
                    let mut acc = R::zero();
                    for i in lo as usize..hi as usize {
                        acc = acc + grow[i] * row[i] * ((centers[i] - v) * inv_s2 - drift);
                    }
                    dx[pi] = acc;
                }
                add_grad(grads, *x, val(*x).shape(), &dx);
            }
        }
        Op::JointHist { wa, wb, groups } => {
            let (p, k) = val(*wa).dims2()?;
            let per = p / groups;
            let awin = windows_of(nodes, *wa)?;
            let bwin = windows_of(nodes, *wb)?;
            let a = val(*wa).data();
            let b = val(*wb).data();
            let need_a = needs(*wa);
            let need_b = needs(*wb);
            let mut da = if need_a { vec![R::zero(); p * k] } else { Vec::new() };
            let mut db = if need_b { vec![R::zero(); p * k] } else { Vec::new() };
            for gi in 0..*groups {
                let gslice = &g[gi * k * k..(gi + 1) * k * k];
                for pi in gi * per..(gi + 1) * per {
                    let (alo, ahi) = awin[pi];
                    let (blo, bhi) = bwin[pi];
                    for i in alo as usize..ahi as usize {
                        let av = a[pi * k + i];
                        let grow = &gslice[i * k + blo as usize..i * k + bhi as usize];
                        let brow = &b[pi * k + blo as usize..pi * k + bhi as usize];
                        if need_a {
                            let mut acc = R::zero();
                            for (&gg, &bv) in grow.iter().zip(brow) {
                                acc = gg.mul_add(bv, acc);
                            }
                            da[pi * k + i] = da[pi * k + i] + acc;
                        }
                        if need_b {
                            let dbrow =
                                &mut db[pi * k + blo as usize..pi * k + bhi as usize];
                            for (d, &gg) in dbrow.iter_mut().zip(grow) {
                                *d = gg.mul_add(av, *d);
                            }
                        }
                    }
                }
            }
            if need_a {
                add_grad(grads, *wa, val(*wa).shape(), &da);
            }
            if need_b {
                add_grad(grads, *wb, val(*wb).shape(), &db);
            }
        }
        Op::MiCondEntropy(p) => {
            if needs(*p) {
                let sh = val(*p).shape();
                let (groups, k) = if sh.len() == 2 {
                    (1, sh[0])
                } else {
                    (sh[0], sh[1])
                };
                let data = val(*p).data();
                let floor = R::of(LOG_FLOOR);
                let ln2 = R::of(std::f64::consts::LN_2);
                let mut dp = vec![R::zero(); data.len()];
                for gi in 0..groups {
                    let slice = &data[gi * k * k..(gi + 1) * k * k];
                    let gg = g[gi];
                    // Column marginals, then the column-wise sums of cells
                    // whose log argument is unfloored (those feel the q
                    // dependency).
                    let mut q = vec![R::zero(); k];
                    for i in 0..k {
                        for (qq, &v) in q.iter_mut().zip(&slice[i * k..(i + 1) * k]) {
                            *qq = *qq + v;
                        }
                    }
                    let mut s = vec![R::zero(); k];
                    for i in 0..k {
                        for (j, &v) in slice[i * k..(i + 1) * k].iter().enumerate() {
                            if v > R::zero() && v / q[j] > floor {
                                s[j] = s[j] + v;
                            }
                        }
                    }
                    let dslice = &mut dp[gi * k * k..(gi + 1) * k * k];
                    for i in 0..k {
                        for j in 0..k {
                            let v = slice[i * k + j];
                            let direct = if v > R::zero() {
                                let r = v / q[j];
                                let rt = r.max(floor);
                                let inner = if r > floor {
                                    R::one() / ln2
                                } else {
                                    R::zero()
                                };
                                rt.log2() + inner
                            } else {
                                R::zero()
                            };
                            let via_q = if q[j] > R::zero() {
                                s[j] / (q[j] * ln2)
                            } else {
                                R::zero()
                            };
                            dslice[i * k + j] = gg * (via_q - direct);
                        }
                    }
                }
                add_grad(grads, *p, val(*p).shape(), &dp);
            }
        }
        _ => unreachable!("backward_hist_family called for a non-histogram op"),
    }
    Ok(())
}
