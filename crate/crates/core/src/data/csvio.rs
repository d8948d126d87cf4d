//! Minimal CSV writing and reading for metrics and histogram tables.
//!
//! One header row, comma separators, decimal points, every row
//! newline-terminated. Fields must not contain commas, quotes, or
//! newlines — the writer rejects them so no quoting dialect is needed and
//! write→read→write is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn check_field(f: &str) -> Result<()> {
    if f.contains(',') || f.contains('\n') || f.contains('\r') || f.contains('"') {
        return Err(Error::Contract(format!(
            "field {f:?} needs quoting, which this table format does not use"
        )));
    }
    Ok(())
}

/// Writes a table with a header row; every row must match the header width.
pub fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for f in header {
        check_field(f)?;
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Contract(format!(
                "row width {} does not match header width {}",
                row.len(),
                header.len()
            )));
        }
        for f in row {
            check_field(f)?;
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads back a table written by [`write_csv`]: (header, rows).
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty table", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "{}: row width {} does not match header width {}",
                path.display(),
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
