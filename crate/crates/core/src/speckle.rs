//! Multimode-fiber speckle simulation via random transmission matrices.
//!
//! A fiber is modeled as an `M x N` matrix of i.i.d. circular complex
//! Gaussian entries with variance `1/N`. Input images are phase-encoded
//! onto a unit-modulus field `u_n = exp(i*pi*I_n)`, and the observed speckle
//! is the per-output-mode intensity `s_m = |Σ_n T_mn u_n|²`. Because a sum
//! of independent complex Gaussians is again Gaussian, each `s_m` is exactly
//! unit-mean exponential for any input, which is what fully developed
//! speckle statistics require; [`ks_statistic_exp1`] quantifies the match.

use crate::error::{Error, Result};
use crate::image::Image;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Refuse to allocate transmission matrices beyond this size (desk scale is
/// two orders of magnitude smaller).
const MAX_TM_BYTES: usize = 1 << 30;

/// Default percentile used to normalize raw speckle intensities for display
/// and training.
pub const DEFAULT_NORM_PERCENTILE: f64 = 99.9;

/// A dense `rows x cols` complex transmission matrix.
#[derive(Clone, Debug)]
pub struct TransmissionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl TransmissionMatrix {
    /// Wrap explicit row-major entries (used by tests that need exactly
    /// unitary matrices).
    pub fn from_parts(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "transmission matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(TransmissionMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Apply the matrix to a complex field and return per-row intensities
    /// `|Σ_n T_mn u_n|²`, accumulating each row in ascending column order.
    pub fn intensities(&self, field: &[Complex64]) -> Result<Vec<f64>> {
        if field.len() != self.cols {
            return Err(Error::Shape(format!(
                "field has {} modes, matrix expects {}",
                field.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.data[m * self.cols..(m + 1) * self.cols];
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, u) in row.iter().zip(field) {
                re = t.re.mul_add(u.re, re) - t.im * u.im;
                im = t.re.mul_add(u.im, im) + t.im * u.re;
            }
            *o = re * re + im * im;
        }
        Ok(out)
    }
}

/// Draw a fresh transmission matrix, deterministically from `seed`, with
/// i.i.d. circular complex Gaussian entries of variance `1/cols`.
pub fn build_tm(rows: usize, cols: usize, seed: u64) -> Result<TransmissionMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Contract(format!(
            "transmission matrix needs positive dimensions, got {rows}x{cols}"
        )));
    }
    let bytes = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(std::mem::size_of::<Complex64>()))
        .ok_or_else(|| Error::Capacity(format!("{rows}x{cols} matrix overflows size")))?;
    if bytes > MAX_TM_BYTES {
        return Err(Error::Capacity(format!(
            "{rows}x{cols} transmission matrix needs {bytes} bytes (limit {MAX_TM_BYTES})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Each component has variance 1/(2N) so |T|² has expectation 1/N.
    let scale = 1.0 / (2.0 * cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    Ok(TransmissionMatrix { rows, cols, data })
}

/// Phase-encode an image onto a unit-modulus field, `u = exp(i*pi*I)`.
pub fn phase_encode(label: &Image) -> Vec<Complex64> {
    label
        .data()
        .iter()
        .map(|&v| {
            let phase = std::f64::consts::PI * v as f64;
            Complex64::new(phase.cos(), phase.sin())
        })
        .collect()
}

/// Propagate a label image through the fiber: phase encoding followed by
/// intensity detection. The label pixel count must match the matrix columns.
pub fn propagate(label: &Image, tm: &TransmissionMatrix) -> Result<Vec<f64>> {
    tm.intensities(&phase_encode(label))
}

/// Normalize raw intensities by their nearest-rank percentile, clamp to
/// `[0, 1]`, and reshape to a square `extent x extent` image.
pub fn normalize_speckle(raw: &[f64], extent: usize, percentile: f64) -> Result<Image> {
    if raw.len() != extent * extent {
        return Err(Error::Shape(format!(
            "{} intensities cannot form a {extent}x{extent} frame",
            raw.len()
        )));
    }
    if !(0.0 < percentile && percentile <= 100.0) {
        return Err(Error::Config(format!(
            "normalization percentile must lie in (0, 100], got {percentile}"
        )));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Numeric(format!(
            "speckle intensities must be finite and non-negative, found {bad}"
        )));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    let denom = sorted[rank.clamp(1, sorted.len()) - 1];
    if denom <= 0.0 {
        return Err(Error::Numeric(format!(
            "cannot normalize speckle frame: percentile {percentile} of intensities is zero"
        )));
    }
    let data = raw
        .iter()
        .map(|&v| (v / denom).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(extent, extent, data)
}

/// Summary statistics of a raw intensity sample.
#[derive(Debug, Clone, Copy)]
pub struct SpeckleStats {
    pub n: usize,
    pub mean: f64,
    /// Kolmogorov–Smirnov distance to the unit-mean exponential law.
    pub ks_exp1: f64,
}

/// Compare a raw intensity sample against the unit-mean exponential
/// distribution expected of fully developed speckle.
pub fn stats_check(raw: &[f64]) -> Result<SpeckleStats> {
    if raw.is_empty() {
        return Err(Error::Contract("stats_check on an empty sample".into()));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(SpeckleStats {
        n: raw.len(),
        mean,
        ks_exp1: ks_statistic_exp1(raw),
    })
}

/// Kolmogorov–Smirnov statistic of a sample against `Exp(1)`:
/// `sup_x |F_n(x) - (1 - e^{-x})|`.
pub fn ks_statistic_exp1(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = 1.0 - (-x).exp();
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}
