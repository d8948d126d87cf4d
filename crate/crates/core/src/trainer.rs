//! Deterministic training loop: alternating discriminator and generator
//! updates, evaluation over test splits, baseline variants, and the
//! histogram-alignment report.
//!
//! Every run is a pure function of (config, dataset, seed): data order,
//! initialization, and updates all derive from seeded generators, so two
//! runs with the same inputs produce bit-identical metrics tables and
//! checkpoints on the same platform.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    self, compose_perturbed, read_dataset, save_checkpoint, split_optimizer_entries, write_csv,
    write_pgm, Dataset, DatasetRecord, StateEntry, OPT_PREFIX,
};
use crate::error::{Error, Result};
use crate::hcu::{emd_1d, smooth_histogram, KernelBank};
use crate::image::Image;
use crate::losses::{
    adversarial_g_loss, discriminator_loss, generator_total, l1_loss, mi_loss, ssim_loss_3scale,
    ssim_loss_single, ssim_metric, LossWeights, MsSsimConfig,
};
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Real, Tensor, Var};

/// Output-side weight of the L1 term in the pix2pix-style baseline.
pub const PIX2PIX_L1_WEIGHT: f64 = 100.0;
/// Fraction of the training split used by the reduced preset.
pub const REDUCED_FRACTION: f64 = 0.30;

/// Default bin count of the histogram kernel bank used for the MI loss.
pub const DEFAULT_KERNEL_BINS: usize = 256;
/// Default kernel width of the histogram kernel bank.
pub const DEFAULT_KERNEL_SIGMA: f64 = 0.01;

/// Which objective the run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Adversarial + mutual-information + three-scale similarity.
    Histospeckle,
    /// Same generator trunk, no discriminator: full-scale similarity + L1.
    UnetBaseline,
    /// Adversarial + 100·L1, no histogram or multi-scale terms.
    Pix2pixBaseline,
}

/// Which slice of the training data the run sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Every training record of a single dataset.
    Full,
    /// A seeded 30% sample of a single dataset's training split.
    Reduced30,
    /// A seeded per-configuration sample from several datasets, combined.
    Perturbed,
}

/// Complete description of a training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Histogram kernel bank for the MI loss.
    pub kernel_bins: usize,
    pub kernel_sigma: f64,
    pub msssim: MsSsimConfig,
    /// Epochs between validation passes (a pass also always runs after the
    /// final epoch).
    pub eval_every: usize,
    /// Records sampled per configuration by the perturbed preset.
    pub per_config_count: usize,
    /// Dataset container files: one for `full`/`reduced30`, one per
    /// configuration for `perturbed`.
    pub datasets: Vec<PathBuf>,
    /// Directory receiving checkpoints and metrics.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Histospeckle,
            preset: Preset::Full,
            epochs: 20,
            batch_size: 8,
            seed: 7,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            kernel_bins: DEFAULT_KERNEL_BINS,
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            msssim: MsSsimConfig::default(),
            eval_every: 1,
            per_config_count: 1200,
            datasets: Vec::new(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval cadence must be at least 1".into()));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.msssim.validate()?;
        KernelBank::new(self.kernel_bins, self.kernel_sigma)?;
        Ok(())
    }
}

/// One logged training event. Baseline variants leave the loss components
/// they do not optimize at zero; `l_gen` is always the total the generator
/// update minimized. The validation columns are filled on evaluation
/// passes and empty otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub l_dis: f64,
    pub l_adv: f64,
    pub l_mi: f64,
    pub l_ssim: f64,
    pub l_gen: f64,
    pub val_ssim: Option<f64>,
    pub hist_emd: Option<f64>,
}

/// Column order of the metrics table.
pub const METRICS_HEADER: [&str; 9] = [
    "step", "epoch", "L_Dis", "L_adv", "L_MI", "L_SSIM", "L_Gen", "val_ssim", "hist_emd",
];

impl MetricsRow {
    pub fn to_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.l_dis.to_string(),
            self.l_adv.to_string(),
            self.l_mi.to_string(),
            self.l_ssim.to_string(),
            self.l_gen.to_string(),
            opt(self.val_ssim),
            opt(self.hist_emd),
        ]
    }
}

/// Loss values of one optimization step, measured before the updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l_dis: f64,
    pub l_adv: f64,
    pub l_mi: f64,
    pub l_ssim: f64,
    pub l_gen: f64,
}

/// Both models plus their optimizer states.
#[derive(Debug, Clone)]
pub struct Models<R: Real> {
    pub gen: Generator<R>,
    pub disc: Discriminator<R>,
    pub gen_opt: AdamState<R>,
    pub disc_opt: AdamState<R>,
}

impl<R: Real> Models<R> {
    /// Seeded initialization; generator and discriminator draw from
    /// separate streams derived from the run seed.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let gen = Generator::new(&cfg.generator, derive(cfg.seed, 1))?;
        let disc = Discriminator::new(&cfg.discriminator, derive(cfg.seed, 2))?;
        let gen_opt = AdamState::new(&gen.params());
        let disc_opt = AdamState::new(&disc.params());
        Ok(Models {
            gen,
            disc,
            gen_opt,
            disc_opt,
        })
    }

    /// Serializes models and optimizer state into checkpoint entries.
    pub fn to_entries(&self) -> Vec<StateEntry> {
        let mut entries = self.gen.state();
        entries.extend(self.disc.state());
        let mut push_opt = |tag: &str, opt: &AdamState<R>, params: &[&crate::tensor::Parameter<R>]| {
            entries.push((format!("{OPT_PREFIX}{tag}/t"), vec![1], vec![opt.t as f64]));
            let (m, v) = opt.moments();
            for (which, slots) in [("m", m), ("v", v)] {
                for (p, slot) in params.iter().zip(slots) {
                    entries.push((
                        format!("{OPT_PREFIX}{tag}/{which}/{}", p.name),
                        slot.shape().to_vec(),
                        slot.data().iter().map(|x| x.as_f64()).collect(),
                    ));
                }
            }
        };
        push_opt("g", &self.gen_opt, &self.gen.params());
        push_opt("d", &self.disc_opt, &self.disc.params());
        entries
    }

    /// Restores models and optimizer state from checkpoint entries.
    pub fn from_entries(cfg: &TrainConfig, entries: &[StateEntry]) -> Result<Self> {
        let mut models = Models::init(cfg)?;
        let (model_entries, opt_entries) = split_optimizer_entries(entries.to_vec());
        let gen_count = models.gen.state().len();
        if model_entries.len() != gen_count + models.disc.state().len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} model tensors, expected {}",
                model_entries.len(),
                gen_count + models.disc.state().len()
            )));
        }
        models.gen.set_state(&model_entries[..gen_count])?;
        models.disc.set_state(&model_entries[gen_count..])?;

        let load_opt = |tag: &str, params: &[&crate::tensor::Parameter<R>]| -> Result<AdamState<R>> {
            let find = |name: String| -> Result<&StateEntry> {
                opt_entries
                    .iter()
                    .find(|(n, _, _)| *n == name)
                    .ok_or_else(|| {
                        Error::Contract(format!("checkpoint missing optimizer tensor {name:?}"))
                    })
            };
            let t = find(format!("{OPT_PREFIX}{tag}/t"))?.2[0] as u64;
            let mut moments = Vec::new();
            for which in ["m", "v"] {
                let mut slots = Vec::with_capacity(params.len());
                for p in params {
                    let (_, shape, data) =
                        find(format!("{OPT_PREFIX}{tag}/{which}/{}", p.name))?;
                    slots.push(Tensor::from_f64(shape, data)?);
                }
                moments.push(slots);
            }
            let v = moments.pop().expect("two groups pushed");
            let m = moments.pop().expect("two groups pushed");
            AdamState::from_parts(t, m, v)
        };
        models.gen_opt = load_opt("g", &models.gen.params())?;
        models.disc_opt = load_opt("d", &models.disc.params())?;
        Ok(models)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_entries())
    }

    pub fn load(cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        Models::from_entries(cfg, &data::load_checkpoint(path)?)
    }
}

/// Independent per-purpose seed streams derived from the run seed.
fn derive(seed: u64, purpose: u64) -> u64 {
    data::derive_seed(seed, purpose)
}

fn finite(value: f64, what: &str, step: u64, epoch: usize, batch: &[&DatasetRecord]) -> Result<f64> {
    if value.is_finite() {
        return Ok(value);
    }
    let indices: Vec<String> = batch
        .iter()
        .map(|r| format!("{}#{}", r.config_id, r.index))
        .collect();
    Err(Error::Numeric(format!(
        "aborting: {what} is {value} at step {step} (epoch {epoch}); \
         offending batch records (config#index): [{}]",
        indices.join(", ")
    )))
}

/// One optimization step: a discriminator update on detached generator
/// outputs (for adversarial variants), then a generator update against the
/// refreshed, frozen discriminator. Reported losses are the values the
/// updates minimized, measured before applying them.
pub fn train_step<R: Real>(
    models: &mut Models<R>,
    batch: &[&DatasetRecord],
    cfg: &TrainConfig,
    bank: &KernelBank,
    step: u64,
    epoch: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let bad: Vec<String> = batch
        .iter()
        .filter(|r| {
            r.speckle.data().iter().any(|v| !v.is_finite())
                || r.label.data().iter().any(|v| !v.is_finite())
        })
        .map(|r| format!("{}#{}", r.config_id, r.index))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numeric(format!(
            "aborting: non-finite pixels at step {step} (epoch {epoch}); \
             offending batch records (config#index): [{}]",
            bad.join(", ")
        )));
    }
    let speckles: Vec<&Image> = batch.iter().map(|r| &r.speckle).collect();
    let labels: Vec<&Image> = batch.iter().map(|r| &r.label).collect();
    let x_t: Tensor<R> = Image::batch_to_tensor(&speckles)?;
    let y_t: Tensor<R> = Image::batch_to_tensor(&labels)?;

    // Generator forward (train mode, trainable) — shared by both phases.
    let mut gg = Graph::<R>::new();
    let x = gg.constant(x_t.clone())?;
    let y = gg.constant(y_t.clone())?;
    let outs = models.gen.forward(&mut gg, x, Mode::Train, true)?;

    let mut stats = StepStats {
        l_dis: 0.0,
        l_adv: 0.0,
        l_mi: 0.0,
        l_ssim: 0.0,
        l_gen: 0.0,
    };

    let total: Var = match cfg.variant {
        Variant::UnetBaseline => {
            let ssim = ssim_loss_single(&mut gg, outs.g3, y, &cfg.msssim)?;
            let l1 = l1_loss(&mut gg, outs.g3, y)?;
            let total = gg.add(ssim, l1)?;
            stats.l_ssim = finite(
                gg.value(ssim).item()?.as_f64(),
                "similarity loss",
                step,
                epoch,
                batch,
            )?;
            total
        }
        Variant::Histospeckle | Variant::Pix2pixBaseline => {
            // Phase 1: discriminator step on detached generator outputs.
            // The generator's parameters are not present in this graph at
            // all, so they cannot receive gradient here.
            let g3_detached = gg.detached(outs.g3);
            let mut gd = Graph::<R>::new();
            let dvars = models.disc.register(&mut gd, true)?;
            let xd = gd.constant(x_t.clone())?;
            let yd = gd.constant(y_t.clone())?;
            let fake_in = gd.constant(g3_detached)?;
            let (real_logits, s_real) = models.disc.apply(&mut gd, &dvars, yd, xd, Mode::Train)?;
            let (fake_logits, s_fake) =
                models.disc.apply(&mut gd, &dvars, fake_in, xd, Mode::Train)?;
            let d_loss = discriminator_loss(&mut gd, real_logits, fake_logits)?;
            stats.l_dis = finite(
                gd.value(d_loss).item()?.as_f64(),
                "discriminator loss",
                step,
                epoch,
                batch,
            )?;
            gd.backward(d_loss)?;
            let d_grads = gd.param_grads();
            debug_assert!(
                d_grads.iter().all(|(n, _)| n.starts_with("d.")),
                "generator parameters must stay outside the discriminator step"
            );
            models.disc.load_grads(&d_grads)?;
            adam_step(&mut models.disc.params_mut(), &mut models.disc_opt, &cfg.adam)?;
            let mut d_stats = s_real;
            d_stats.extend(s_fake);
            models.disc.absorb_batch_stats(&d_stats)?;

            // Phase 2: generator step against the refreshed discriminator,
            // registered frozen so only generator parameters collect
            // gradients.
            let dvars_frozen = models.disc.register(&mut gg, false)?;
            let (logits_g, _) =
                models
                    .disc
                    .apply(&mut gg, &dvars_frozen, outs.g3, x, Mode::Train)?;
            let adv = adversarial_g_loss(&mut gg, logits_g)?;
            stats.l_adv = finite(
                gg.value(adv).item()?.as_f64(),
                "adversarial loss",
                step,
                epoch,
                batch,
            )?;
            match cfg.variant {
                Variant::Histospeckle => {
                    let (mi, _report) = mi_loss(&mut gg, y, outs.g3, bank)?;
                    let ssim =
                        ssim_loss_3scale(&mut gg, outs.g1, outs.g2, outs.g3, y, &cfg.msssim)?;
                    stats.l_mi = finite(
                        gg.value(mi).item()?.as_f64(),
                        "information loss",
                        step,
                        epoch,
                        batch,
                    )?;
                    stats.l_ssim = finite(
                        gg.value(ssim).item()?.as_f64(),
                        "similarity loss",
                        step,
                        epoch,
                        batch,
                    )?;
                    generator_total(&mut gg, adv, mi, ssim, &cfg.weights)?
                }
                Variant::Pix2pixBaseline => {
                    let l1 = l1_loss(&mut gg, outs.g3, y)?;
                    let weighted = gg.mul_scalar(l1, PIX2PIX_L1_WEIGHT)?;
                    gg.add(adv, weighted)?
                }
                Variant::UnetBaseline => unreachable!("handled above"),
            }
        }
    };

    stats.l_gen = finite(
        gg.value(total).item()?.as_f64(),
        "generator loss",
        step,
        epoch,
        batch,
    )?;
    gg.backward(total)?;
    let g_grads = gg.param_grads();
    debug_assert!(
        g_grads.iter().all(|(n, _)| n.starts_with("g.")),
        "discriminator must be frozen during the generator step"
    );
    models.gen.load_grads(&g_grads)?;
    adam_step(&mut models.gen.params_mut(), &mut models.gen_opt, &cfg.adam)?;
    models.gen.absorb_batch_stats(&outs.stats)?;
    Ok(stats)
}

/// Mean structural-similarity of eval-mode reconstructions over records.
pub fn validation_ssim<R: Real>(gen: &Generator<R>, records: &[DatasetRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("empty validation split".into()));
    }
    let mut total = 0.0;
    for rec in records {
        let recon = gen.reconstruct(&rec.speckle)?;
        total += ssim_metric(&recon, &rec.label)?;
    }
    Ok(total / records.len() as f64)
}

/// Smooth histogram averaged over a set of images.
fn mean_histogram(images: &[&Image], bank: &KernelBank) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; bank.k()];
    for img in images {
        let h = smooth_histogram(img, bank)?;
        for (a, p) in acc.iter_mut().zip(&h.probs) {
            *a += p;
        }
    }
    let n = images.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Alignment of validation reconstructions with truth in histogram space.
fn validation_emd<R: Real>(
    gen: &Generator<R>,
    records: &[DatasetRecord],
    bank: &KernelBank,
) -> Result<f64> {
    let truths: Vec<&Image> = records.iter().map(|r| &r.label).collect();
    let recons: Vec<Image> = records
        .iter()
        .map(|r| gen.reconstruct(&r.speckle))
        .collect::<Result<_>>()?;
    let recon_refs: Vec<&Image> = recons.iter().collect();
    let p_truth = mean_histogram(&truths, bank)?;
    let p_gen = mean_histogram(&recon_refs, bank)?;
    let delta = 1.0 / (bank.k() - 1) as f64;
    emd_1d(&p_gen, &p_truth, delta)
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub rows: Vec<MetricsRow>,
    pub initial_checkpoint: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    pub metrics_csv: PathBuf,
    /// Training records actually used after preset resolution.
    pub train_count: usize,
}

/// Resolves the preset into the training records and validation records.
fn resolve_preset(
    cfg: &TrainConfig,
    sources: &[Dataset],
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let val: Vec<DatasetRecord> = sources.iter().flat_map(|d| d.val.iter().cloned()).collect();
    let train = match cfg.preset {
        Preset::Full => {
            let [ds] = single(sources, "full")?;
            ds.train.clone()
        }
        Preset::Reduced30 => {
            let [ds] = single(sources, "reduced30")?;
            let n = ds.train.len();
            let count = (n as f64 * REDUCED_FRACTION).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 3));
            for i in 0..count {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            idx[..count].iter().map(|&i| ds.train[i].clone()).collect()
        }
        Preset::Perturbed => {
            let refs: Vec<&Dataset> = sources.iter().collect();
            compose_perturbed(&refs, cfg.per_config_count, derive(cfg.seed, 4))?.train
        }
    };
    Ok((train, val))
}

fn single<'a>(sources: &'a [Dataset], preset: &str) -> Result<[&'a Dataset; 1]> {
    match sources {
        [one] => Ok([one]),
        _ => Err(Error::Config(format!(
            "preset {preset} trains on exactly one dataset, got {}",
            sources.len()
        ))),
    }
}

/// Runs a full training job from dataset files on disk.
pub fn fit(cfg: &TrainConfig) -> Result<FitReport> {
    if cfg.datasets.is_empty() {
        return Err(Error::Config("no dataset files configured".into()));
    }
    let sources: Vec<Dataset> = cfg
        .datasets
        .iter()
        .map(read_dataset)
        .collect::<Result<_>>()?;
    fit_datasets(cfg, &sources)
}

/// Runs a full training job on in-memory datasets. Training is f32; the
/// checkpoints and metrics are produced here.
pub fn fit_datasets(cfg: &TrainConfig, sources: &[Dataset]) -> Result<FitReport> {
    cfg.validate()?;
    for ds in sources {
        let le = ds.header.label_extent as usize;
        let se = ds.header.speckle_extent as usize;
        if le != cfg.generator.extent || se != cfg.generator.extent {
            return Err(Error::Config(format!(
                "dataset extents {se}/{le} do not match the generator extent {}",
                cfg.generator.extent
            )));
        }
        if le != cfg.discriminator.extent {
            return Err(Error::Config(format!(
                "label extent {le} does not match the discriminator extent {}",
                cfg.discriminator.extent
            )));
        }
    }
    let (train, val) = resolve_preset(cfg, sources)?;
    let bank = KernelBank::new(cfg.kernel_bins, cfg.kernel_sigma)?;
    let mut models: Models<f32> = Models::init(cfg)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let initial_checkpoint = cfg.out_dir.join("checkpoint-initial.hsck");
    models.save(&initial_checkpoint)?;

    // Validation subset for the histogram-alignment column, kept small so
    // evaluation passes stay cheap.
    let emd_subset: Vec<DatasetRecord> = val.iter().take(32).cloned().collect();

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 1000 + epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            // Train-mode normalization needs at least two samples; a
            // trailing undersized batch is skipped.
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&DatasetRecord> = chunk.iter().map(|&i| &train[i]).collect();
            step += 1;
            let s = train_step(&mut models, &batch, cfg, &bank, step, epoch)?;
            rows.push(MetricsRow {
                step,
                epoch,
                l_dis: s.l_dis,
                l_adv: s.l_adv,
                l_mi: s.l_mi,
                l_ssim: s.l_ssim,
                l_gen: s.l_gen,
                val_ssim: None,
                hist_emd: None,
            });
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val_ssim = if val.is_empty() {
                None
            } else {
                Some(validation_ssim(&models.gen, &val)?)
            };
            let hist_emd = if emd_subset.is_empty() {
                None
            } else {
                Some(validation_emd(&models.gen, &emd_subset, &bank)?)
            };
            if let Some(last) = rows.last_mut() {
                last.val_ssim = val_ssim;
                last.hist_emd = hist_emd;
            }
            models.save(cfg.out_dir.join(format!("checkpoint-epoch{epoch:04}.hsck")))?;
        }
    }

    let final_checkpoint = if cfg.epochs > 0 {
        let path = cfg.out_dir.join("checkpoint-final.hsck");
        models.save(&path)?;
        Some(path)
    } else {
        None
    };

    let metrics_csv = cfg.out_dir.join("metrics.csv");
    let csv_rows: Vec<Vec<String>> = rows.iter().map(MetricsRow::to_row).collect();
    write_csv(&metrics_csv, &METRICS_HEADER, &csv_rows)?;

    Ok(FitReport {
        rows,
        initial_checkpoint,
        final_checkpoint,
        metrics_csv,
        train_count: train.len(),
    })
}

/// Evaluation artifacts: overall and per-configuration mean similarity,
/// plus where the per-record table(s) and sample reconstructions went.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_ssim: f64,
    pub per_config: Vec<(u32, f64)>,
    pub csv_paths: Vec<PathBuf>,
    pub triptych_paths: Vec<PathBuf>,
}

/// Evaluates a reconstruction function over records: per-record structural
/// similarity written as CSV (plus one CSV per configuration when several
/// are present), and the first 16 records exported as side-by-side
/// (speckle | truth | reconstruction) images.
pub fn evaluate_with(
    recon: impl Fn(&DatasetRecord) -> Result<Image>,
    records: &[DatasetRecord],
    out_dir: &Path,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("empty evaluation split".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows: Vec<(u32, u32, f64)> = Vec::with_capacity(records.len());
    let mut triptych_paths = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let image = recon(rec)?;
        let s = ssim_metric(&image, &rec.label)?;
        rows.push((rec.config_id, rec.index, s));
        if i < 16 {
            let path = out_dir.join(format!("triptych-{i:03}.pgm"));
            write_pgm(&triptych(&rec.speckle, &rec.label, &image)?, &path)?;
            triptych_paths.push(path);
        }
    }
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;

    let to_csv = |rows: &[(u32, u32, f64)]| -> Vec<Vec<String>> {
        rows.iter()
            .map(|(c, i, s)| vec![c.to_string(), i.to_string(), s.to_string()])
            .collect()
    };
    let header = ["config_id", "index", "ssim"];
    let mut csv_paths = vec![out_dir.join("ssim.csv")];
    write_csv(&csv_paths[0], &header, &to_csv(&rows))?;

    let mut config_ids: Vec<u32> = rows.iter().map(|r| r.0).collect();
    config_ids.sort_unstable();
    config_ids.dedup();
    let mut per_config = Vec::new();
    for id in &config_ids {
        let sub: Vec<(u32, u32, f64)> = rows.iter().filter(|r| r.0 == *id).copied().collect();
        per_config.push((*id, sub.iter().map(|r| r.2).sum::<f64>() / sub.len() as f64));
        if config_ids.len() > 1 {
            let path = out_dir.join(format!("ssim-cf{id}.csv"));
            write_csv(&path, &header, &to_csv(&sub))?;
            csv_paths.push(path);
        }
    }

    Ok(EvalReport {
        mean_ssim,
        per_config,
        csv_paths,
        triptych_paths,
    })
}

/// Evaluates a trained generator in eval mode.
pub fn evaluate<R: Real>(
    gen: &Generator<R>,
    records: &[DatasetRecord],
    out_dir: &Path,
) -> Result<EvalReport> {
    evaluate_with(|rec| gen.reconstruct(&rec.speckle), records, out_dir)
}

/// Side-by-side montage of equally sized panels.
fn triptych(a: &Image, b: &Image, c: &Image) -> Result<Image> {
    for img in [b, c] {
        if img.h() != a.h() || img.w() != a.w() {
            return Err(Error::Shape(
                "montage panels must share their extents".into(),
            ));
        }
    }
    let (h, w) = (a.h(), a.w());
    let mut data = vec![0.0f32; h * 3 * w];
    for y in 0..h {
        for (p, img) in [a, b, c].into_iter().enumerate() {
            data[y * 3 * w + p * w..y * 3 * w + (p + 1) * w]
                .copy_from_slice(&img.data()[y * w..(y + 1) * w]);
        }
    }
    Image::new(h, 3 * w, data)
}

/// Histogram-alignment numbers: distance of the initial and final models'
/// output histograms from the truth histogram.
#[derive(Debug, Clone)]
pub struct HistReport {
    pub emd_initial: f64,
    pub emd_final: f64,
    pub csv_path: PathBuf,
}

/// Compares average smooth histograms of truth, initial-model output, and
/// final-model output over the given records, writing one CSV row per bin.
pub fn histogram_report<R: Real>(
    initial: &Generator<R>,
    final_model: &Generator<R>,
    records: &[DatasetRecord],
    bank: &KernelBank,
    out_dir: &Path,
) -> Result<HistReport> {
    if records.is_empty() {
        return Err(Error::Contract("no records for the histogram report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let truths: Vec<&Image> = records.iter().map(|r| &r.label).collect();
    let recon_all = |gen: &Generator<R>| -> Result<Vec<Image>> {
        records.iter().map(|r| gen.reconstruct(&r.speckle)).collect()
    };
    let init_imgs = recon_all(initial)?;
    let final_imgs = recon_all(final_model)?;
    let p_truth = mean_histogram(&truths, bank)?;
    let p_init = mean_histogram(&init_imgs.iter().collect::<Vec<_>>(), bank)?;
    let p_final = mean_histogram(&final_imgs.iter().collect::<Vec<_>>(), bank)?;

    let delta = 1.0 / (bank.k() - 1) as f64;
    let emd_initial = emd_1d(&p_init, &p_truth, delta)?;
    let emd_final = emd_1d(&p_final, &p_truth, delta)?;

    let centers = bank.centers();
    let rows: Vec<Vec<String>> = (0..bank.k())
        .map(|i| {
            vec![
                centers[i].to_string(),
                p_truth[i].to_string(),
                p_init[i].to_string(),
                p_final[i].to_string(),
            ]
        })
        .collect();
    let csv_path = out_dir.join("histogram.csv");
    write_csv(&csv_path, &["bin", "P_truth", "P_initial", "P_final"], &rows)?;

    Ok(HistReport {
        emd_initial,
        emd_final,
        csv_path,
    })
}
