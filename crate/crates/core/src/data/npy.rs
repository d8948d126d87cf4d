//! Read-only ingestion of `.npy` single-array files and `.npz` archives.
//!
//! Supported subset: `.npy` versions 1.0 and 2.0 with element types `u8`
//! (rescaled to [0,1] by /255), little-endian `f4`, and little-endian `f8`,
//! C-order only. `.npz` files are plain zip containers whose entries must
//! be STORED (uncompressed); each entry is itself a `.npy` stream. Anything
//! else is rejected with a targeted error rather than silently misread.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One array from an archive: name (entry name without the `.npy` suffix,
/// or the file stem for a bare `.npy`), shape, and data as f64 (u8 sources
/// arrive divided by 255).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Reads a `.npy` file as a single-element list, or all entries of an
/// uncompressed `.npz` archive, preserving archive order.
pub fn read_npy_archive(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"PK\x03\x04") {
        return parse_npz(&bytes);
    }
    if bytes.starts_with(&NPY_MAGIC) {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "array".to_string());
        let (shape, data) = parse_npy(&bytes)?;
        return Ok(vec![NamedArray {
            name: stem,
            shape,
            data,
        }]);
    }
    Err(Error::Format(format!(
        "{}: neither an array file (\\x93NUMPY) nor a zip archive (PK\\x03\\x04)",
        path.display()
    )))
}

const NPY_MAGIC: [u8; 6] = [0x93, b'N', b'U', b'M', b'P', b'Y'];

fn parse_npy(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() < 10 || bytes[..6] != NPY_MAGIC {
        return Err(Error::Format("bad array-file magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated version-2 header".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => {
            return Err(Error::Format(format!(
                "unsupported array-file version {major}.{minor}"
            )))
        }
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(Error::Format("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;

    let descr = dict_value(header, "descr")?
        .split(',')
        .next()
        .unwrap_or("")
        .trim()
        .trim_matches(|c| c == '\'' || c == '"');
    let fortran = dict_value(header, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::Format(
            "column-major (fortran_order) arrays are unsupported; save in C order".into(),
        ));
    }
    if !fortran.starts_with("False") {
        return Err(Error::Format(format!(
            "unrecognized fortran_order value {fortran:?}"
        )));
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;
    let count: usize = shape.iter().product();

    let payload = &bytes[data_start..];
    let need = |elem: usize| -> Result<()> {
        if payload.len() < count * elem {
            Err(Error::Format(format!(
                "payload holds {} bytes but shape {shape:?} needs {}",
                payload.len(),
                count * elem
            )))
        } else {
            Ok(())
        }
    };
    let data = match descr {
        "|u1" | "u1" | "<u1" => {
            need(1)?;
            payload[..count].iter().map(|&b| b as f64 / 255.0).collect()
        }
        "<f4" => {
            need(4)?;
            payload[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        "<f8" => {
            need(8)?;
            payload[..count * 8]
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect()
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported element type {other:?}; supported: u8, <f4, <f8"
            )))
        }
    };
    Ok((shape, data))
}

/// Extracts the value text following `'key':` in the header's dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| Error::Format(format!("header missing key {key:?}")))?;
    Ok(header[at + pat.len()..].trim_start())
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    let open = text
        .find('(')
        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
    let close = text[open..]
        .find(')')
        .ok_or_else(|| Error::Format("unterminated shape tuple".into()))?
        + open;
    text[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape element {s:?}")))
        })
        .collect()
}

fn parse_npz(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut out = Vec::new();
    let mut at = 0usize;
    let u16at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let u32at = |i: usize| {
        u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize
    };
    while at + 4 <= bytes.len() {
        let sig = &bytes[at..at + 4];
        if sig == b"PK\x01\x02" || sig == b"PK\x05\x06" {
            break; // central directory: all entries seen
        }
        if sig != b"PK\x03\x04" {
            return Err(Error::Format(format!(
                "unexpected zip record signature {sig:02x?}"
            )));
        }
        if at + 30 > bytes.len() {
            return Err(Error::Format("truncated zip entry header".into()));
        }
        let flags = u16at(at + 6);
        let method = u16at(at + 8);
        let comp_size = u32at(at + 18);
        let name_len = u16at(at + 26);
        let extra_len = u16at(at + 28);
        let name_start = at + 30;
        if name_start + name_len + extra_len > bytes.len() {
            return Err(Error::Format("truncated zip entry name".into()));
        }
        let name = String::from_utf8_lossy(&bytes[name_start..name_start + name_len])
            .into_owned();
        if method != 0 {
            return Err(Error::Format(format!(
                "entry {name:?}: compressed archives unsupported; re-save uncompressed"
            )));
        }
        if flags & 0x08 != 0 {
            return Err(Error::Format(format!(
                "entry {name:?} uses a data descriptor (streamed zip); re-save uncompressed"
            )));
        }
        let data_start = name_start + name_len + extra_len;
        if data_start + comp_size > bytes.len() {
            return Err(Error::Format(format!("entry {name:?}: truncated payload")));
        }
        let (shape, data) = parse_npy(&bytes[data_start..data_start + comp_size])?;
        out.push(NamedArray {
            name: name.strip_suffix(".npy").unwrap_or(&name).to_string(),
            shape,
            data,
        });
        at = data_start + comp_size;
    }
    if out.is_empty() {
        return Err(Error::Format("archive holds no entries".into()));
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("hs-npy-{}-{name}", std::process::id()));
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn u8_array_round_trips_through_written_bytes() {
        let payload: Vec<u8> = vec![0, 51, 102, 153, 204, 255];
        let bytes = write::npy_bytes("|u1", &[2, 3], &payload);
        let path = tmp("u8.npy", &bytes);
        let arrays = read_npy_archive(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(arrays.len(), 1);
        assert_eq!(arrays[0].shape, vec![2, 3]);
        for (got, &orig) in arrays[0].data.iter().zip(&payload) {
            assert_eq!(*got, orig as f64 / 255.0);
        }
    }

    #[test]
    fn reference_header_text_parses_to_f32_3x4() {
        let payload: Vec<u8> = (0..12u32)
            .flat_map(|i| (i as f32 * 0.25).to_le_bytes())
            .collect();
        // Header text laid out exactly as the reference writer emits it.
        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (3, 4), }";
        let mut header = header.to_string();
        let pad = (64 - (10 + header.len() + 1) % 64) % 64;
        header.push_str(&" ".repeat(pad));
        header.push('\n');
        let mut bytes = vec![0x93];
        bytes.extend_from_slice(b"NUMPY\x01\x00");
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&payload);

        let (shape, data) = parse_npy(&bytes).unwrap();
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(data[5], 1.25);
    }

    #[test]
    fn f64_arrays_read_exactly() {
        let values = [1.5f64, -2.25, 0.875];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = write::npy_bytes("<f8", &[3], &payload);
        let path = tmp("f8.npy", &bytes);
        let arrays = read_npy_archive(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(arrays[0].data, values);
    }

    #[test]
    fn truncated_payload_reports_length_mismatch() {
        let bytes = write::npy_bytes("<f4", &[10], &[0u8; 8]);
        let err = parse_npy(&bytes).unwrap_err().to_string();
        assert!(err.contains("needs 40"), "{err}");
    }

    #[test]
    fn fortran_order_is_rejected() {
        let mut bytes = write::npy_bytes("<f4", &[2], &1.0f32.to_le_bytes().repeat(2));
        let at = bytes
            .windows(5)
            .position(|w| w == b"False")
            .expect("header contains the flag");
        bytes[at..at + 5].copy_from_slice(b"True ");
        let err = parse_npy(&bytes).unwrap_err().to_string();
        assert!(err.contains("C order"), "{err}");
    }

    #[test]
    fn npz_with_stored_entries_reads_all_names() {
        let a = write::npy_bytes("|u1", &[2], &[10, 20]);
        let b = write::npy_bytes("<f4", &[1], &0.5f32.to_le_bytes());
        let bytes = write::npz_bytes(&[("images.npy", a), ("labels.npy", b)]);
        let path = tmp("ok.npz", &bytes);
        let arrays = read_npy_archive(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(arrays.len(), 2);
        assert_eq!(arrays[0].name, "images");
        assert_eq!(arrays[1].name, "labels");
        assert_eq!(arrays[1].data, vec![0.5]);
    }

    #[test]
    fn deflate_entry_names_the_remedy() {
        let a = write::npy_bytes("|u1", &[1], &[7]);
        let bytes = write::npz_bytes_with_method(&[("x.npy", a)], 8);
        let path = tmp("bad.npz", &bytes);
        let err = read_npy_archive(&path).unwrap_err().to_string();
        std::fs::remove_file(&path).ok();
        assert!(
            err.contains("compressed archives unsupported; re-save uncompressed"),
            "{err}"
        );
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let path = tmp("junk.bin", b"not an array");
        let err = read_npy_archive(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, Error::Format(_)));
    }
}
