//! Binary PGM (P5) image export and import.
//!
//! Intensities in [0,1] map to bytes by round-half-up: `byte =
//! floor(v·255 + 0.5)`, clamped to [0,255]. Reading maps bytes back by
//! /255, so write→read→write reproduces the file bytes exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Quantizes one intensity to its output byte.
pub(crate) fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a binary P5 file with maxval 255.
pub fn write_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", image.w(), image.h()).into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary P5 file written by [`write_pgm`] (or any 8-bit P5).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(Error::Format(format!(
            "{}: not a binary P5 file",
            path.display()
        )));
    }
    // Header: three whitespace-separated numbers after the magic, with
    // optional '#' comment lines; a single whitespace byte then payload.
    let mut at = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while at < bytes.len() && (bytes[at].is_ascii_whitespace() || bytes[at] == b'#') {
            if bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                at += 1;
            }
        }
        let start = at;
        while at < bytes.len() && bytes[at].is_ascii_digit() {
            at += 1;
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad header number", path.display())))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: only maxval 255 supported, got {maxval}",
            path.display()
        )));
    }
    at += 1; // the single whitespace byte after maxval
    if bytes.len() < at + w * h {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes, header promises {}",
            path.display(),
            bytes.len().saturating_sub(at),
            w * h
        )));
    }
    let data = bytes[at..at + w * h]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Image::new(h, w, data)
}
