//! The speckle-pair dataset container (magic "HSPK1"): header plus
//! train/validation/test records, each a (speckle, label) image pair tagged
//! with its fiber configuration and ordinal.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic       5 bytes  "HSPK1"
//! version     u16      currently 1
//! label_ext   u32      stored label extent (square)
//! speckle_ext u32      stored speckle extent (square, after resampling)
//! tm_rows     u32      transmission-matrix rows M (raw speckle modes)
//! tm_cols     u32      transmission-matrix cols N (label pixel count)
//! percentile  f64      normalization percentile
//! source      u8       0 external labels, 1 synthetic labels
//! label_seed  u64      synthetic-label stream seed (0 when external)
//! n_configs   u32      fiber configurations represented
//! config*     u32 id, u64 matrix seed
//! counts      u32 × 3  train, validation, test record counts
//! echo_len    u32      creation-parameters echo length
//! echo        bytes    UTF-8 free-form parameter echo
//! record*     u32 config_id, u32 index,
//!             f32 × label_ext², f32 × speckle_ext²
//! ```
//!
//! Records appear train split first, then validation, then test. For
//! synthetic labels, the header alone regenerates every record bit-exactly
//! (see [`regenerate`]).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::labels::gen_label;
use crate::data::resample_to_extent;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::speckle::{build_tm, normalize_speckle, propagate, TransmissionMatrix};

/// Default split proportions: train:validation:test = 50,000 : 2,947 :
/// 5,883 (≈ 0.850 : 0.050 : 0.100).
pub const DEFAULT_RATIOS: (f64, f64, f64) = (
    50_000.0 / 58_830.0,
    2_947.0 / 58_830.0,
    5_883.0 / 58_830.0,
);

const MAGIC: &[u8; 5] = b"HSPK1";
const VERSION: u16 = 1;

/// One fiber configuration: its id and the seed of its transmission matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FiberConfig {
    pub config_id: u32,
    pub tm_seed: u64,
}

/// Where the label images came from; synthetic labels carry their stream
/// seed so records can be regenerated from the header alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Synthetic { seed: u64 },
    External,
}

/// One (speckle, label) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Model input x.
    pub speckle: Image,
    /// Ground truth y.
    pub label: Image,
    /// Fiber configuration that produced the speckle.
    pub config_id: u32,
    /// Ordinal of the label in its generation stream.
    pub index: u32,
}

/// Everything needed to identify, validate, and regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub label_extent: u32,
    pub speckle_extent: u32,
    pub tm_rows: u32,
    pub tm_cols: u32,
    pub percentile: f64,
    pub label_source: LabelSource,
    pub configs: Vec<FiberConfig>,
    /// Record counts: train, validation, test.
    pub counts: [u32; 3],
    /// Free-form echo of the creation parameters.
    pub params_echo: String,
}

/// An in-memory dataset: header plus the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Knobs of dataset construction beyond the label images themselves.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildParams {
    /// Transmission-matrix rows M; must be a perfect square (raw speckle
    /// frames are √M × √M before resampling to the label extent).
    pub speckle_modes: usize,
    /// Normalization percentile for raw intensities.
    pub percentile: f64,
    /// Split proportions (train, validation, test); must sum to 1.
    pub ratios: (f64, f64, f64),
    /// Worker threads for record generation; results are identical for any
    /// value because every record derives from its own index.
    pub threads: usize,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            speckle_modes: 4096,
            percentile: 99.9,
            ratios: DEFAULT_RATIOS,
            threads: 1,
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<()> {
        let side = (self.speckle_modes as f64).sqrt().round() as usize;
        if self.speckle_modes == 0 || side * side != self.speckle_modes {
            return Err(Error::Config(format!(
                "speckle mode count {} is not a positive perfect square",
                self.speckle_modes
            )));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!(
                "normalization percentile {} outside (0, 100]",
                self.percentile
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        split_counts(100, self.ratios).map(|_| ())
    }
}

/// Proportional split of `n` records: the train and validation counts
/// round to nearest, the test split takes the remainder.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (r0, r1, r2) = ratios;
    if !(r0 >= 0.0 && r1 >= 0.0 && r2 >= 0.0) || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got ({r0}, {r1}, {r2})"
        )));
    }
    let tr = (n as f64 * r0).round() as usize;
    let va = (n as f64 * r1).round() as usize;
    if tr + va > n {
        return Err(Error::Config(format!(
            "split ratios leave no test records for n = {n}"
        )));
    }
    Ok((tr, va, n - tr - va))
}

/// Generates speckle frames for a contiguous label range, optionally split
/// across worker threads. Output order always follows label order.
fn make_speckles(
    labels: &[Image],
    tm: &TransmissionMatrix,
    percentile: f64,
    record_extent: usize,
    threads: usize,
) -> Result<Vec<Image>> {
    let one = |label: &Image| -> Result<Image> {
        let raw = propagate(label, tm)?;
        let extent = (raw.len() as f64).sqrt() as usize;
        let frame = normalize_speckle(&raw, extent, percentile)?;
        resample_to_extent(&frame, record_extent)
    };
    if threads <= 1 || labels.len() < 2 {
        return labels.iter().map(one).collect();
    }
    let workers = threads.min(labels.len());
    let chunk = labels.len().div_ceil(workers);
    let mut results: Vec<Result<Vec<Image>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = labels
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        for h in handles {
            results.push(h.join().expect("speckle worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(labels.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Builds one dataset per fiber configuration: every label is propagated
/// through that configuration's matrix, normalized, resampled to the label
/// extent, and split train/validation/test by the configured ratios.
pub fn build_dataset(
    labels: &[Image],
    fibers: &[FiberConfig],
    params: &BuildParams,
    source: LabelSource,
) -> Result<Vec<Dataset>> {
    if fibers.is_empty() {
        return Err(Error::Config(
            "at least one fiber configuration is required".into(),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Contract("no label images given".into()));
    }
    let le = labels[0].h();
    if labels
        .iter()
        .any(|l| l.h() != le || l.w() != le)
    {
        return Err(Error::Shape(
            "all labels must be square images of one extent".into(),
        ));
    }
    let n = le * le;
    let m = params.speckle_modes;
    let raw_extent = (m as f64).sqrt() as usize;
    if raw_extent * raw_extent != m {
        return Err(Error::Config(format!(
            "speckle_modes {m} is not a perfect square"
        )));
    }
    let (tr, va, te) = split_counts(labels.len(), params.ratios)?;

    let mut out = Vec::with_capacity(fibers.len());
    for fiber in fibers {
        let tm = build_tm(m, n, fiber.tm_seed)?;
        let speckles = make_speckles(labels, &tm, params.percentile, le, params.threads)?;
        let records: Vec<DatasetRecord> = labels
            .iter()
            .zip(speckles)
            .enumerate()
            .map(|(i, (label, speckle))| DatasetRecord {
                speckle,
                label: label.clone(),
                config_id: fiber.config_id,
                index: i as u32,
            })
            .collect();
        let mut records = records.into_iter();
        let train: Vec<_> = records.by_ref().take(tr).collect();
        let val: Vec<_> = records.by_ref().take(va).collect();
        let test: Vec<_> = records.collect();
        let header = DatasetHeader {
            label_extent: le as u32,
            speckle_extent: le as u32,
            tm_rows: m as u32,
            tm_cols: n as u32,
            percentile: params.percentile,
            label_source: source,
            configs: vec![*fiber],
            counts: [tr as u32, va as u32, te as u32],
            params_echo: format!(
                "build(labels={}, extent={le}, modes={m}, percentile={}, ratios=({:.6},{:.6},{:.6}))",
                labels.len(),
                params.percentile,
                params.ratios.0,
                params.ratios.1,
                params.ratios.2,
            ),
        };
        out.push(Dataset {
            header,
            train,
            val,
            test,
        });
    }
    Ok(out)
}

/// Rebuilds a synthetic-label dataset from its header alone; the result is
/// bit-identical to the original. Only single-configuration headers can be
/// regenerated (combined sets record their sampling in the echo only).
pub fn regenerate(header: &DatasetHeader) -> Result<Dataset> {
    let seed = match header.label_source {
        LabelSource::Synthetic { seed } => seed,
        LabelSource::External => {
            return Err(Error::Contract(
                "dataset was built from external labels; regeneration needs the original files"
                    .into(),
            ))
        }
    };
    if header.configs.len() != 1 {
        return Err(Error::Contract(
            "regeneration is supported for single-configuration datasets".into(),
        ));
    }
    let total = header.counts.iter().map(|&c| c as usize).sum::<usize>();
    let le = header.label_extent as usize;
    let labels: Vec<Image> = (0..total)
        .map(|i| gen_label(le, seed, i as u64))
        .collect();
    let n = total as f64;
    let ratios = (
        header.counts[0] as f64 / n,
        header.counts[1] as f64 / n,
        header.counts[2] as f64 / n,
    );
    let params = BuildParams {
        speckle_modes: header.tm_rows as usize,
        percentile: header.percentile,
        ratios,
        threads: 1,
    };
    let mut sets = build_dataset(&labels, &header.configs, &params, header.label_source)?;
    let mut ds = sets.remove(0);
    // Rounding inside split_counts could differ from the recorded counts on
    // ties; enforce the header's own counts exactly.
    let all: Vec<DatasetRecord> = ds
        .train
        .drain(..)
        .chain(ds.val.drain(..))
        .chain(ds.test.drain(..))
        .collect();
    let (tr, va) = (header.counts[0] as usize, header.counts[1] as usize);
    let mut it = all.into_iter();
    ds.train = it.by_ref().take(tr).collect();
    ds.val = it.by_ref().take(va).collect();
    ds.test = it.collect();
    ds.header = header.clone();
    Ok(ds)
}

/// Combines the training splits of several single-configuration datasets:
/// a seeded uniform sample without replacement of `per_config_count`
/// records from each, concatenated in input order. Sampling with the full
/// count is the identity, so the combination is then the plain
/// concatenation. Validation and test splits stay with their per-config
/// originals and are left empty here.
pub fn compose_perturbed(
    sources: &[&Dataset],
    per_config_count: usize,
    seed: u64,
) -> Result<Dataset> {
    if sources.is_empty() {
        return Err(Error::Contract("no source datasets given".into()));
    }
    let head = &sources[0].header;
    for ds in sources {
        if ds.header.configs.len() != 1 {
            return Err(Error::Contract(
                "combine single-configuration datasets only".into(),
            ));
        }
        if ds.header.label_extent != head.label_extent
            || ds.header.speckle_extent != head.speckle_extent
        {
            return Err(Error::Shape(
                "source datasets disagree on image extents".into(),
            ));
        }
        if ds.train.len() < per_config_count {
            return Err(Error::Contract(format!(
                "configuration {} has {} training records, need {per_config_count}",
                ds.header.configs[0].config_id,
                ds.train.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(per_config_count * sources.len());
    for ds in sources {
        let len = ds.train.len();
        if per_config_count == len {
            train.extend(ds.train.iter().cloned());
        } else {
            // Partial Fisher-Yates: the first `per_config_count` slots end
            // up holding a uniform sample without replacement.
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..per_config_count {
                let j = rng.gen_range(i..len);
                idx.swap(i, j);
            }
            train.extend(idx[..per_config_count].iter().map(|&i| ds.train[i].clone()));
        }
    }
    let configs: Vec<FiberConfig> = sources
        .iter()
        .map(|ds| ds.header.configs[0])
        .collect();
    let source = if sources
        .iter()
        .all(|ds| ds.header.label_source == head.label_source)
    {
        head.label_source
    } else {
        LabelSource::External
    };
    Ok(Dataset {
        header: DatasetHeader {
            label_extent: head.label_extent,
            speckle_extent: head.speckle_extent,
            tm_rows: head.tm_rows,
            tm_cols: head.tm_cols,
            percentile: head.percentile,
            label_source: source,
            configs,
            counts: [train.len() as u32, 0, 0],
            params_echo: format!(
                "perturbed(per_config={per_config_count}, seed={seed}) over [{}]",
                sources
                    .iter()
                    .map(|ds| ds.header.params_echo.as_str())
                    .collect::<Vec<_>>()
                    .join(" | ")
            ),
        },
        train,
        val: Vec::new(),
        test: Vec::new(),
    })
}

fn push_image(out: &mut Vec<u8>, img: &Image) {
    for &v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a dataset to its container file.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = &ds.header;
    if [ds.train.len(), ds.val.len(), ds.test.len()]
        != [h.counts[0] as usize, h.counts[1] as usize, h.counts[2] as usize]
    {
        return Err(Error::Contract(
            "header counts do not match the split lengths".into(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&h.label_extent.to_le_bytes());
    out.extend_from_slice(&h.speckle_extent.to_le_bytes());
    out.extend_from_slice(&h.tm_rows.to_le_bytes());
    out.extend_from_slice(&h.tm_cols.to_le_bytes());
    out.extend_from_slice(&h.percentile.to_le_bytes());
    match h.label_source {
        LabelSource::External => {
            out.push(0);
            out.extend_from_slice(&0u64.to_le_bytes());
        }
        LabelSource::Synthetic { seed } => {
            out.push(1);
            out.extend_from_slice(&seed.to_le_bytes());
        }
    }
    out.extend_from_slice(&(h.configs.len() as u32).to_le_bytes());
    for c in &h.configs {
        out.extend_from_slice(&c.config_id.to_le_bytes());
        out.extend_from_slice(&c.tm_seed.to_le_bytes());
    }
    for &c in &h.counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&(h.params_echo.len() as u32).to_le_bytes());
    out.extend_from_slice(h.params_echo.as_bytes());
    for rec in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        if rec.label.h() != h.label_extent as usize
            || rec.speckle.h() != h.speckle_extent as usize
        {
            return Err(Error::Shape(format!(
                "record {} extents do not match the header",
                rec.index
            )));
        }
        out.extend_from_slice(&rec.config_id.to_le_bytes());
        out.extend_from_slice(&rec.index.to_le_bytes());
        push_image(&mut out, &rec.label);
        push_image(&mut out, &rec.speckle);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a dataset container back into memory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(fail(format!("truncated at byte {at}", at = *at)));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let u16v = |at: &mut usize| -> Result<u16> {
        Ok(u16::from_le_bytes(take(at, 2)?.try_into().unwrap()))
    };
    let u32v = |at: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()))
    };
    let u64v = |at: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()))
    };

    if take(&mut at, 5)? != MAGIC {
        return Err(fail("not a dataset container (bad magic)".into()));
    }
    let version = u16v(&mut at)?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let label_extent = u32v(&mut at)?;
    let speckle_extent = u32v(&mut at)?;
    let tm_rows = u32v(&mut at)?;
    let tm_cols = u32v(&mut at)?;
    let percentile = f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    let source_tag = take(&mut at, 1)?[0];
    let label_seed = u64v(&mut at)?;
    let label_source = match source_tag {
        0 => LabelSource::External,
        1 => LabelSource::Synthetic { seed: label_seed },
        t => return Err(fail(format!("unknown label-source tag {t}"))),
    };
    let n_configs = u32v(&mut at)? as usize;
    let mut configs = Vec::with_capacity(n_configs);
    for _ in 0..n_configs {
        let config_id = u32v(&mut at)?;
        let tm_seed = u64v(&mut at)?;
        configs.push(FiberConfig { config_id, tm_seed });
    }
    let counts = [u32v(&mut at)?, u32v(&mut at)?, u32v(&mut at)?];
    let echo_len = u32v(&mut at)? as usize;
    let params_echo = std::str::from_utf8(take(&mut at, echo_len)?)
        .map_err(|_| fail("parameter echo is not UTF-8".into()))?
        .to_string();

    let le = label_extent as usize;
    let se = speckle_extent as usize;
    let read_image = |at: &mut usize, extent: usize| -> Result<Image> {
        let raw = take(at, extent * extent * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Image::new(extent, extent, data)
    };
    let mut read_split = |count: u32| -> Result<Vec<DatasetRecord>> {
        let mut split = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let config_id = u32v(&mut at)?;
            let index = u32v(&mut at)?;
            let label = read_image(&mut at, le)?;
            let speckle = read_image(&mut at, se)?;
            split.push(DatasetRecord {
                speckle,
                label,
                config_id,
                index,
            });
        }
        Ok(split)
    };
    let train = read_split(counts[0])?;
    let val = read_split(counts[1])?;
    let test = read_split(counts[2])?;
    if at != bytes.len() {
        return Err(fail(format!(
            "{} unexpected trailing bytes",
            bytes.len() - at
        )));
    }
    Ok(Dataset {
        header: DatasetHeader {
            label_extent,
            speckle_extent,
            tm_rows,
            tm_cols,
            percentile,
            label_source,
            configs,
            counts,
            params_echo,
        },
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_labels;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("hs-ds-{}-{name}", std::process::id()))
    }

    fn small_build(n: usize, seed: u64, fibers: &[FiberConfig]) -> Vec<Dataset> {
        let labels = gen_synthetic_labels(n, 8, seed).unwrap();
        let params = BuildParams {
            speckle_modes: 64,
            percentile: 99.0,
            ratios: (0.6, 0.2, 0.2),
            threads: 1,
        };
        build_dataset(&labels, fibers, &params, LabelSource::Synthetic { seed }).unwrap()
    }

    #[test]
    fn split_counts_round_proportionally() {
        assert_eq!(split_counts(1000, (0.85, 0.05, 0.10)).unwrap(), (850, 50, 100));
        assert_eq!(split_counts(5883, DEFAULT_RATIOS).unwrap(), (5000, 295, 588));
        assert!(split_counts(10, (0.5, 0.4, 0.2)).is_err());
    }

    #[test]
    fn build_requires_a_configuration_and_splits_disjointly() {
        let labels = gen_synthetic_labels(10, 8, 1).unwrap();
        assert!(build_dataset(&labels, &[], &BuildParams::default(), LabelSource::External)
            .is_err());

        let sets = small_build(10, 1, &[FiberConfig { config_id: 0, tm_seed: 11 }]);
        let ds = &sets[0];
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (6, 2, 2));
        let mut indices: Vec<u32> = ds
            .train
            .iter()
            .chain(&ds.val)
            .chain(&ds.test)
            .map(|r| r.index)
            .collect();
        indices.sort_unstable();
        assert_eq!(indices, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn record_zero_matches_direct_propagation() {
        let labels = gen_synthetic_labels(3, 8, 5).unwrap();
        let params = BuildParams {
            speckle_modes: 64,
            percentile: 99.0,
            ratios: (0.34, 0.33, 0.33),
            threads: 1,
        };
        let fibers = [FiberConfig { config_id: 2, tm_seed: 77 }];
        let ds = &build_dataset(&labels, &fibers, &params, LabelSource::External).unwrap()[0];
        let tm = build_tm(64, 64, 77).unwrap();
        let raw = propagate(&labels[0], &tm).unwrap();
        let want = normalize_speckle(&raw, 8, 99.0).unwrap();
        assert_eq!(ds.train[0].speckle.data(), want.data());
        assert_eq!(ds.train[0].label.data(), labels[0].data());
        assert_eq!(ds.train[0].config_id, 2);
    }

    #[test]
    fn container_write_read_write_is_byte_identical() {
        let sets = small_build(10, 3, &[FiberConfig { config_id: 1, tm_seed: 21 }]);
        let p1 = tmp("a.hspk");
        let p2 = tmp("b.hspk");
        write_dataset(&sets[0], &p1).unwrap();
        let back = read_dataset(&p1).unwrap();
        assert_eq!(back, sets[0]);
        write_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
    }

    #[test]
    fn header_alone_regenerates_every_record() {
        let sets = small_build(10, 9, &[FiberConfig { config_id: 0, tm_seed: 31 }]);
        let again = regenerate(&sets[0].header).unwrap();
        assert_eq!(again, sets[0]);

        let mut external = sets[0].header.clone();
        external.label_source = LabelSource::External;
        assert!(regenerate(&external).is_err());
    }

    #[test]
    fn thread_count_does_not_change_records() {
        let labels = gen_synthetic_labels(7, 8, 13).unwrap();
        let fibers = [FiberConfig { config_id: 0, tm_seed: 41 }];
        let mut params = BuildParams {
            speckle_modes: 64,
            percentile: 99.0,
            ratios: (0.6, 0.2, 0.2),
            threads: 1,
        };
        let one = build_dataset(&labels, &fibers, &params, LabelSource::External).unwrap();
        params.threads = 3;
        let three = build_dataset(&labels, &fibers, &params, LabelSource::External).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn perturbed_combination_samples_each_config() {
        let fibers = [
            FiberConfig { config_id: 0, tm_seed: 51 },
            FiberConfig { config_id: 1, tm_seed: 52 },
            FiberConfig { config_id: 2, tm_seed: 53 },
        ];
        let sets = small_build(10, 15, &fibers);
        let refs: Vec<&Dataset> = sets.iter().collect();

        let combined = compose_perturbed(&refs, 4, 99).unwrap();
        assert_eq!(combined.train.len(), 12);
        assert_eq!(combined.header.configs.len(), 3);
        for (i, chunk) in combined.train.chunks(4).enumerate() {
            assert!(chunk.iter().all(|r| r.config_id == i as u32));
        }
        // Same seed, same order; different seed differs.
        let again = compose_perturbed(&refs, 4, 99).unwrap();
        assert_eq!(again, combined);
        let other = compose_perturbed(&refs, 4, 100).unwrap();
        let order = |d: &Dataset| d.train.iter().map(|r| r.index).collect::<Vec<_>>();
        assert_ne!(order(&other), order(&combined));

        // Full count: plain concatenation.
        let full = compose_perturbed(&refs, 6, 7).unwrap();
        let want: Vec<DatasetRecord> = sets
            .iter()
            .flat_map(|d| d.train.iter().cloned())
            .collect();
        assert_eq!(full.train, want);

        // Insufficient records.
        assert!(compose_perturbed(&refs, 7, 7).is_err());
    }
}
