//! C ABI over the reconstruction library.
//!
//! Conventions:
//! - Handles (`HsDataset`, `HsGenerator`) are opaque; create them with the
//!   `*_open`/`*_load` functions and release them with the matching
//!   `*_free`. A null return means failure.
//! - Functions returning `int32_t` yield `HS_OK` (0) on success or a
//!   nonzero `HS_ERR_*` code; the most recent failure message on the
//!   calling thread is available via [`hs_last_error_message`].
//! - Images cross the boundary as row-major `float` buffers of
//!   `extent * extent` values in `[0, 1]`.
//! - All functions are panic-safe: internal panics surface as
//!   `HS_ERR_INTERNAL` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use histospeckle::data::{load_checkpoint, read_dataset, Dataset};
use histospeckle::image::Image;
use histospeckle::losses::ssim_metric;
use histospeckle::networks::Generator;
use histospeckle::speckle::{build_tm, normalize_speckle, propagate};
use histospeckle::Error;

/// Success.
pub const HS_OK: i32 = 0;
/// Configuration or contract violation (bad arguments, mismatched sizes).
pub const HS_ERR_USAGE: i32 = 2;
/// Data, format, or I/O failure.
pub const HS_ERR_DATA: i32 = 3;
/// Non-finite values encountered.
pub const HS_ERR_NUMERIC: i32 = 4;
/// A required pointer argument was null.
pub const HS_ERR_NULL: i32 = 5;
/// Internal failure (a bug, reported rather than crashing the caller).
pub const HS_ERR_INTERNAL: i32 = 6;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().map(|b| if b == 0 { b' ' } else { b }).collect();
    let c = CString::new(sanitized).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(err: &Error) -> i32 {
    match err.exit_code() {
        2 => HS_ERR_USAGE,
        4 => HS_ERR_NUMERIC,
        _ => HS_ERR_DATA,
    }
}

/// Runs a fallible body, translating errors and panics into codes.
fn guarded(body: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => HS_OK,
        Ok(Err((code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            HS_ERR_INTERNAL
        }
    }
}

fn lib_err(e: Error) -> (i32, String) {
    (code_of(&e), e.to_string())
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, (i32, String)> {
    if ptr.is_null() {
        return Err((HS_ERR_NULL, "null path".into()));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (HS_ERR_USAGE, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Opaque dataset handle.
pub struct HsDataset {
    inner: Dataset,
}

/// Opaque generator handle.
pub struct HsGenerator {
    inner: Generator<f32>,
    extent: usize,
}

/// Most recent error message on this thread. The pointer stays valid
/// until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn hs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opens a dataset container file. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_open(path: *const c_char) -> *mut HsDataset {
    let mut out: *mut HsDataset = std::ptr::null_mut();
    guarded(|| {
        let p = path_arg(path)?;
        let inner = read_dataset(&p).map_err(lib_err)?;
        out = Box::into_raw(Box::new(HsDataset { inner }));
        Ok(())
    });
    out
}

/// Releases a dataset handle (null is a no-op).
///
/// # Safety
/// `ds` must be a pointer returned by [`hs_dataset_open`], freed once.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_free(ds: *mut HsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Label/speckle edge length of the dataset's records (0 for null input).
///
/// # Safety
/// `ds` must be a valid dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_extent(ds: *const HsDataset) -> u32 {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.header.label_extent
}

/// Record counts per split.
///
/// # Safety
/// `ds` must be a valid dataset handle; count pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_counts(
    ds: *const HsDataset,
    train: *mut u32,
    val: *mut u32,
    test: *mut u32,
) -> i32 {
    guarded(|| {
        if ds.is_null() {
            return Err((HS_ERR_NULL, "null dataset handle".into()));
        }
        let d = &(*ds).inner;
        for (ptr, len) in [
            (train, d.train.len()),
            (val, d.val.len()),
            (test, d.test.len()),
        ] {
            if !ptr.is_null() {
                *ptr = len as u32;
            }
        }
        Ok(())
    })
}

fn split_of(ds: &Dataset, split: u32) -> Result<&[histospeckle::data::DatasetRecord], (i32, String)> {
    match split {
        0 => Ok(&ds.train),
        1 => Ok(&ds.val),
        2 => Ok(&ds.test),
        _ => Err((
            HS_ERR_USAGE,
            format!("split must be 0 (train), 1 (val), or 2 (test), got {split}"),
        )),
    }
}

/// Copies one record's speckle and/or label into caller buffers of
/// `extent * extent` floats each (either pointer may be null to skip).
///
/// # Safety
/// `ds` must be a valid dataset handle; non-null buffers must hold at
/// least `extent * extent` floats.
#[no_mangle]
pub unsafe extern "C" fn hs_dataset_record(
    ds: *const HsDataset,
    split: u32,
    index: u64,
    speckle: *mut f32,
    label: *mut f32,
) -> i32 {
    guarded(|| {
        if ds.is_null() {
            return Err((HS_ERR_NULL, "null dataset handle".into()));
        }
        let records = split_of(&(*ds).inner, split)?;
        let rec = records.get(index as usize).ok_or((
            HS_ERR_USAGE,
            format!("record {index} outside split of {} records", records.len()),
        ))?;
        for (ptr, img) in [(speckle, &rec.speckle), (label, &rec.label)] {
            if !ptr.is_null() {
                std::ptr::copy_nonoverlapping(img.data().as_ptr(), ptr, img.data().len());
            }
        }
        Ok(())
    })
}

/// Loads the generator stored in a checkpoint file, reconstructing its
/// architecture from the saved tensor shapes. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hs_generator_load(
    path: *const c_char,
    extent: u32,
) -> *mut HsGenerator {
    let mut out: *mut HsGenerator = std::ptr::null_mut();
    guarded(|| {
        let p = path_arg(path)?;
        let entries = load_checkpoint(&p).map_err(lib_err)?;
        let g_entries: Vec<_> = entries
            .into_iter()
            .filter(|(name, _, _)| name.starts_with("g."))
            .collect();
        let inner = Generator::from_state(extent as usize, &g_entries).map_err(lib_err)?;
        out = Box::into_raw(Box::new(HsGenerator {
            inner,
            extent: extent as usize,
        }));
        Ok(())
    });
    out
}

/// Releases a generator handle (null is a no-op).
///
/// # Safety
/// `gen` must be a pointer returned by [`hs_generator_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn hs_generator_free(gen: *mut HsGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Reconstructs an image from a speckle frame. Both buffers hold
/// `extent * extent` floats, where `extent` is the value the generator
/// was loaded with.
///
/// # Safety
/// `gen` must be a valid generator handle; `speckle` and `out` must hold
/// `extent * extent` floats each.
#[no_mangle]
pub unsafe extern "C" fn hs_generator_reconstruct(
    gen: *const HsGenerator,
    speckle: *const f32,
    out: *mut f32,
) -> i32 {
    guarded(|| {
        if gen.is_null() || speckle.is_null() || out.is_null() {
            return Err((HS_ERR_NULL, "null argument".into()));
        }
        let h = &*gen;
        let n = h.extent * h.extent;
        let pixels = std::slice::from_raw_parts(speckle, n).to_vec();
        let img = Image::new(h.extent, h.extent, pixels).map_err(lib_err)?;
        let recon = h.inner.reconstruct(&img).map_err(lib_err)?;
        std::ptr::copy_nonoverlapping(recon.data().as_ptr(), out, n);
        Ok(())
    })
}

/// Structural similarity between two images of `h * w` floats.
///
/// # Safety
/// `a` and `b` must hold `h * w` floats; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hs_ssim(
    a: *const f32,
    b: *const f32,
    h: u32,
    w: u32,
    out: *mut f64,
) -> i32 {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err((HS_ERR_NULL, "null argument".into()));
        }
        let n = (h as usize) * (w as usize);
        let ia = Image::new(h as usize, w as usize, std::slice::from_raw_parts(a, n).to_vec())
            .map_err(lib_err)?;
        let ib = Image::new(h as usize, w as usize, std::slice::from_raw_parts(b, n).to_vec())
            .map_err(lib_err)?;
        *out = ssim_metric(&ia, &ib).map_err(lib_err)?;
        Ok(())
    })
}

/// Runs the fiber simulator once: propagates a label of `extent * extent`
/// pixels through a seeded transmission matrix with `modes` rows and
/// writes the percentile-normalized speckle frame (sqrt(modes) edge
/// length, `modes` floats) to `out`.
///
/// # Safety
/// `label` must hold `extent * extent` floats; `out` must hold `modes`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn hs_simulate_speckle(
    label: *const f32,
    extent: u32,
    modes: u32,
    tm_seed: u64,
    percentile: f64,
    out: *mut f32,
) -> i32 {
    guarded(|| {
        if label.is_null() || out.is_null() {
            return Err((HS_ERR_NULL, "null argument".into()));
        }
        let n = (extent as usize) * (extent as usize);
        let img = Image::new(
            extent as usize,
            extent as usize,
            std::slice::from_raw_parts(label, n).to_vec(),
        )
        .map_err(lib_err)?;
        let side = (modes as f64).sqrt().round() as usize;
        if side * side != modes as usize || modes == 0 {
            return Err((
                HS_ERR_USAGE,
                format!("mode count {modes} is not a positive perfect square"),
            ));
        }
        let tm = build_tm(modes as usize, n, tm_seed).map_err(lib_err)?;
        let raw = propagate(&img, &tm).map_err(lib_err)?;
        let speckle = normalize_speckle(&raw, side, percentile).map_err(lib_err)?;
        std::ptr::copy_nonoverlapping(speckle.data().as_ptr(), out, modes as usize);
        Ok(())
    })
}
