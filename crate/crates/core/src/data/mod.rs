//! Dataset construction, splits, and every persistence format: synthetic
//! label generation, the speckle-pair dataset container, array-archive
//! ingestion, image export, metrics tables, and model checkpoints.
//!
//! All multi-byte on-disk values are little-endian. Byte layouts are
//! documented in `FORMATS.md` at the repository root. Every artifact this
//! module writes can be read back and rewritten to identical bytes.

mod checkpoint;
mod csvio;
mod dataset;
mod labels;
mod npy;
mod pgm;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, split_optimizer_entries, StateEntry, OPT_PREFIX,
};
pub use csvio::{read_csv, write_csv};
pub use dataset::{
    build_dataset, compose_perturbed, read_dataset, regenerate, split_counts, write_dataset,
    BuildParams, Dataset, DatasetHeader, DatasetRecord, FiberConfig, LabelSource, DEFAULT_RATIOS,
};
pub use labels::gen_synthetic_labels;
pub use npy::{read_npy_archive, NamedArray};
pub use pgm::{read_pgm, write_pgm};

use crate::error::{Error, Result};
use crate::image::Image;

/// Resamples a square image to another square extent by an integer factor:
/// bilinear when growing, block averaging when shrinking. Non-integer
/// ratios are rejected — dataset geometry should be chosen so extents
/// divide evenly.
pub fn resample_to_extent(img: &Image, extent: usize) -> Result<Image> {
    if img.h() != img.w() {
        return Err(Error::Shape(format!(
            "resampling expects a square image, got {}x{}",
            img.h(),
            img.w()
        )));
    }
    let src = img.h();
    if extent == 0 {
        return Err(Error::Shape("target extent must be positive".into()));
    }
    if src == extent {
        return Ok(img.clone());
    }
    if extent > src {
        if extent % src != 0 {
            return Err(Error::Shape(format!(
                "cannot grow {src} to {extent}: not an integer factor"
            )));
        }
        let f = extent / src;
        let axis = |d: usize| -> (usize, usize, f32) {
            let s = (((d as f64 + 0.5) / f as f64) - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        };
        let mut out = vec![0.0f32; extent * extent];
        for oy in 0..extent {
            let (y0, y1, fy) = axis(oy);
            for ox in 0..extent {
                let (x0, x1, fx) = axis(ox);
                let g = |y: usize, x: usize| img.data()[y * src + x];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                out[oy * extent + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
        Image::new(extent, extent, out)
    } else {
        if src % extent != 0 {
            return Err(Error::Shape(format!(
                "cannot shrink {src} to {extent}: not an integer factor"
            )));
        }
        let f = src / extent;
        let inv = 1.0 / (f * f) as f32;
        let mut out = vec![0.0f32; extent * extent];
        for oy in 0..extent {
            for ox in 0..extent {
                let mut acc = 0.0f32;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += img.data()[(oy * f + dy) * src + ox * f + dx];
                    }
                }
                out[oy * extent + ox] = acc * inv;
            }
        }
        Image::new(extent, extent, out)
    }
}

/// Derives an independent per-record stream seed from a base seed, so
/// record generation can be split across workers without changing results.
pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the combined value.
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
