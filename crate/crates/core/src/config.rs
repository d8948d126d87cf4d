//! Run configuration: one structured text file (TOML) drives every
//! command. Unknown keys are rejected, and each run echoes its effective
//! configuration to `<out>/config.resolved` so results stay attributable.

use std::path::{Path, PathBuf};

use crate::data::{gen_synthetic_labels, read_npy_archive, BuildParams, FiberConfig, LabelSource};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::trainer::TrainConfig;

/// Dataset-generation settings: which labels to use and how many fiber
/// configurations to simulate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataGenConfig {
    /// Number of synthetic labels to generate (ignored for external labels).
    pub label_count: usize,
    /// Square label edge length in pixels (external labels keep their own).
    pub label_extent: usize,
    /// Seed of the synthetic label stream.
    pub label_seed: u64,
    /// Number of fiber configurations (independent transmission matrices).
    pub configs: u32,
    /// Seed of the first configuration's transmission matrix; configuration
    /// `i` uses `tm_seed_base + i`.
    pub tm_seed_base: u64,
    /// Physical simulation and split parameters.
    pub params: BuildParams,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            label_count: 5883,
            label_extent: 64,
            label_seed: 101,
            configs: 1,
            tm_seed_base: 2024,
            params: BuildParams::default(),
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_count == 0 {
            return Err(Error::Config("label count must be positive".into()));
        }
        if self.configs == 0 {
            return Err(Error::Config(
                "at least one fiber configuration is required".into(),
            ));
        }
        self.params.validate()?;
        Ok(())
    }

    /// The fiber configurations this config describes.
    pub fn fibers(&self) -> Vec<FiberConfig> {
        (0..self.configs)
            .map(|i| FiberConfig {
                config_id: i,
                tm_seed: self.tm_seed_base.wrapping_add(i as u64),
            })
            .collect()
    }
}

/// Simulator-diagnostics settings: how many random inputs to propagate
/// when checking the speckle statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Random labels propagated for the pooled statistics.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            samples: 16,
            seed: 404,
        }
    }
}

/// Top-level run configuration; sections mirror the module configs.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataGenConfig,
    pub simulate: SimulateConfig,
}

impl RunConfig {
    /// Loads and validates a configuration file. A missing or unreadable
    /// file is a usage error (exit code 2), reported with its name.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!(
                "cannot read configuration file {}: {e}",
                path.display()
            ))
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("configuration file {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.simulate.samples == 0 {
            return Err(Error::Config(
                "simulator diagnostics need at least one sample".into(),
            ));
        }
        Ok(())
    }

    /// Writes the effective configuration to `<out>/config.resolved`.
    pub fn echo_resolved(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))?;
        let path = out_dir.join("config.resolved");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Where dataset labels come from, as written on the command line:
/// `synthetic` or `npy:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSpec {
    Synthetic,
    Npy(PathBuf),
}

impl LabelSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(LabelSpec::Synthetic)
        } else if let Some(path) = s.strip_prefix("npy:") {
            if path.is_empty() {
                return Err(Error::Config("empty path after npy: prefix".into()));
            }
            Ok(LabelSpec::Npy(PathBuf::from(path)))
        } else {
            Err(Error::Config(format!(
                "label source {s:?} not recognized; use \"synthetic\" or \"npy:<path>\""
            )))
        }
    }
}

/// Labels ready for dataset building, plus the source recorded in the
/// dataset header.
pub struct ResolvedLabels {
    pub images: Vec<Image>,
    pub source: LabelSource,
    /// Human-readable origin for logging.
    pub origin: String,
}

/// Produces the label set a `gen-data` run will encode: either the seeded
/// synthetic stream or square image arrays ingested from an array archive.
pub fn resolve_labels(labels: &LabelSpec, cfg: &DataGenConfig) -> Result<ResolvedLabels> {
    match labels {
        LabelSpec::Synthetic => Ok(ResolvedLabels {
            images: gen_synthetic_labels(cfg.label_count, cfg.label_extent, cfg.label_seed)?,
            source: LabelSource::Synthetic {
                seed: cfg.label_seed,
            },
            origin: format!(
                "synthetic (count {}, extent {}, seed {})",
                cfg.label_count, cfg.label_extent, cfg.label_seed
            ),
        }),
        LabelSpec::Npy(path) => {
            let arrays = read_npy_archive(path)?;
            let mut images = Vec::new();
            let mut used = Vec::new();
            for arr in &arrays {
                let (n, h, w) = match arr.shape.as_slice() {
                    [n, h, w] => (*n, *h, *w),
                    [h, w] => (1, *h, *w),
                    _ => continue, // class-id vectors and other non-image arrays
                };
                if h != w || h == 0 {
                    continue;
                }
                used.push(format!("{} [{}x{}x{}]", arr.name, n, h, w));
                for i in 0..n {
                    let slice = &arr.data[i * h * w..(i + 1) * h * w];
                    if let Some(bad) = slice.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return Err(Error::Format(format!(
                            "label array {:?} has value {bad} outside [0, 1]; \
                             store labels normalized (8-bit arrays are scaled by 1/255)",
                            arr.name
                        )));
                    }
                    images.push(Image::new(h, w, slice.iter().map(|&v| v as f32).collect())?);
                }
            }
            if images.is_empty() {
                return Err(Error::Format(format!(
                    "no square image arrays found in {}",
                    path.display()
                )));
            }
            let extent = images[0].h();
            if images.iter().any(|im| im.h() != extent) {
                return Err(Error::Format(
                    "image arrays in the archive disagree on extent".into(),
                ));
            }
            Ok(ResolvedLabels {
                images,
                source: LabelSource::External,
                origin: format!("{} ({})", path.display(), used.join(", ")),
            })
        }
    }
}
