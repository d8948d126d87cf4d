//! Command-line entry point: dataset generation, training, evaluation,
//! histogram reporting, and simulator diagnostics.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data/format
//! error, 4 numeric abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use histospeckle::config::{resolve_labels, LabelSpec, RunConfig};
use histospeckle::data::{load_checkpoint, read_dataset, write_dataset, write_pgm, Dataset};
use histospeckle::hcu::KernelBank;
use histospeckle::networks::Generator;
use histospeckle::speckle::{build_tm, normalize_speckle, propagate, stats_check};
use histospeckle::trainer::{
    evaluate, fit_datasets, histogram_report, Preset, Variant, DEFAULT_KERNEL_BINS,
    DEFAULT_KERNEL_SIGMA,
};
use histospeckle::{Error, Result};

#[derive(Parser)]
#[command(
    name = "histospeckle",
    about = "Distribution-aware speckle-to-image reconstruction pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build speckle/label dataset files from a fiber simulation.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metrics table.
    Train(TrainArgs),
    /// Score a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Compare initial and final checkpoints in histogram space.
    Hist(HistArgs),
    /// Run the fiber simulator and report speckle statistics.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for dataset files.
    #[arg(long)]
    out: PathBuf,
    /// Number of fiber configurations (overrides the config file).
    #[arg(long)]
    configs: Option<u32>,
    /// Label source: "synthetic" or "npy:<path>".
    #[arg(long, default_value = "synthetic", value_parser = parse_labels)]
    labels: LabelSpec,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Training-set preset (overrides the config file).
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Objective variant (overrides the config file).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Run seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count (overrides the config file).
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset file(s); repeat for the perturbed preset (overrides the
    /// config file).
    #[arg(long = "dataset")]
    datasets: Vec<PathBuf>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file providing the records.
    #[arg(long)]
    dataset: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Output directory for tables and sample reconstructions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    /// Checkpoint before training.
    #[arg(long)]
    initial: PathBuf,
    /// Checkpoint after training.
    #[arg(long)]
    r#final: PathBuf,
    /// Dataset file providing the records.
    #[arg(long)]
    dataset: PathBuf,
    /// Which split to use.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Histogram bin count.
    #[arg(long, default_value_t = DEFAULT_KERNEL_BINS)]
    bins: usize,
    /// Histogram kernel width.
    #[arg(long, default_value_t = DEFAULT_KERNEL_SIGMA)]
    sigma: f64,
    /// Output directory for the histogram table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Print pooled intensity statistics (mean, KS distance to Exp(1)).
    #[arg(long)]
    stats: bool,
    /// Optional output directory for a sample speckle image.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
    Test,
}

fn parse_labels(s: &str) -> std::result::Result<LabelSpec, String> {
    LabelSpec::parse(s).map_err(|e| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    match s {
        "full" => Ok(Preset::Full),
        "reduced30" => Ok(Preset::Reduced30),
        "perturbed" => Ok(Preset::Perturbed),
        _ => Err(format!(
            "unknown preset {s:?} (expected full, reduced30, or perturbed)"
        )),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "histospeckle" => Ok(Variant::Histospeckle),
        "unet_baseline" => Ok(Variant::UnetBaseline),
        "pix2pix_baseline" => Ok(Variant::Pix2pixBaseline),
        _ => Err(format!(
            "unknown variant {s:?} (expected histospeckle, unet_baseline, or pix2pix_baseline)"
        )),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (expected train, val, or test)")),
    }
}

fn split_records(ds: &Dataset, split: Split) -> &[histospeckle::data::DatasetRecord] {
    match split {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    }
}

/// A user-named input file that must exist; missing files are usage
/// errors (exit 2), not I/O errors.
fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("no such file: {}", path.display())))
    }
}

/// Worker-thread cap from the environment; unset means "use the config".
fn env_threads() -> Result<Option<usize>> {
    match std::env::var("HSPK_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().map_err(|_| {
                Error::Config(format!("HSPK_THREADS must be a positive integer, got {v:?}"))
            })?;
            if n == 0 {
                return Err(Error::Config("HSPK_THREADS must be at least 1".into()));
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("HSPK_THREADS: {e}"))),
    }
}

/// Loads a generator from the model portion of a checkpoint at the extent
/// recorded in a dataset header.
fn generator_from_checkpoint(path: &Path, extent: usize) -> Result<Generator<f32>> {
    let entries = load_checkpoint(path)?;
    let g_entries: Vec<_> = entries
        .into_iter()
        .filter(|(name, _, _)| name.starts_with("g."))
        .collect();
    Generator::from_state(extent, &g_entries)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(n) = args.configs {
        cfg.data.configs = n;
    }
    if let Some(n) = env_threads()? {
        cfg.data.params.threads = n;
    }
    cfg.validate()?;

    let labels = resolve_labels(&args.labels, &cfg.data)?;
    println!("labels: {} records from {}", labels.images.len(), labels.origin);

    let fibers = cfg.data.fibers();
    println!(
        "simulating {} fiber configuration(s), {} modes, {} thread(s)",
        fibers.len(),
        cfg.data.params.speckle_modes,
        cfg.data.params.threads
    );
    let datasets = histospeckle::data::build_dataset(
        &labels.images,
        &fibers,
        &cfg.data.params,
        labels.source,
    )?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for ds in &datasets {
        let id = ds.header.configs[0].config_id;
        let path = args.out.join(format!("dataset-cf{id}.hspk"));
        write_dataset(ds, &path)?;
        println!(
            "config {id}: {} train / {} val / {} test -> {}",
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            path.display()
        );
    }
    cfg.echo_resolved(&args.out)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = args.preset {
        cfg.train.preset = p;
    }
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if !args.datasets.is_empty() {
        cfg.train.datasets = args.datasets;
    }
    if let Some(out) = args.out {
        cfg.train.out_dir = out;
    }
    cfg.validate()?;
    if cfg.train.datasets.is_empty() {
        return Err(Error::Config(
            "no dataset files given (config [train].datasets or --dataset)".into(),
        ));
    }
    for path in &cfg.train.datasets {
        require_file(path)?;
    }
    cfg.echo_resolved(&cfg.train.out_dir)?;

    let sources: Vec<Dataset> = cfg
        .train
        .datasets
        .iter()
        .map(read_dataset)
        .collect::<Result<_>>()?;
    if cfg.train.preset == Preset::Reduced30 {
        let n: usize = sources.iter().map(|d| d.train.len()).sum();
        println!(
            "preset reduced30: sampling {} of {n} training records (30%)",
            (n as f64 * 0.30).round() as usize
        );
    }

    let report = match fit_datasets(&cfg.train, &sources) {
        Ok(r) => r,
        Err(e @ Error::Numeric(_)) => {
            let path = cfg.train.out_dir.join("nan-abort.txt");
            std::fs::write(&path, format!("{e}\n")).map_err(|io| Error::io(&path, io))?;
            eprintln!("numeric abort; diagnostic written to {}", path.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    println!(
        "trained {} steps over {} records ({} epochs)",
        report.rows.len(),
        report.train_count,
        cfg.train.epochs
    );
    if let Some(row) = report.rows.last() {
        println!(
            "final losses: L_Dis {:.4} L_Gen {:.4}{}",
            row.l_dis,
            row.l_gen,
            row.val_ssim
                .map(|v| format!(" | val SSIM {v:.4}"))
                .unwrap_or_default()
        );
    }
    println!("metrics: {}", report.metrics_csv.display());
    println!("initial checkpoint: {}", report.initial_checkpoint.display());
    if let Some(p) = &report.final_checkpoint {
        println!("final checkpoint: {}", p.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    require_file(&args.checkpoint)?;
    require_file(&args.dataset)?;
    let ds = read_dataset(&args.dataset)?;
    let records = split_records(&ds, args.split);
    let gen = generator_from_checkpoint(&args.checkpoint, ds.header.label_extent as usize)?;
    let report = evaluate(&gen, records, &args.out)?;
    println!("mean SSIM {:.4} over {} records", report.mean_ssim, records.len());
    if report.per_config.len() > 1 {
        for (id, mean) in &report.per_config {
            println!("  config {id}: mean SSIM {mean:.4}");
        }
    }
    println!(
        "wrote {} table(s) and {} sample reconstruction(s) to {}",
        report.csv_paths.len(),
        report.triptych_paths.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_hist(args: HistArgs) -> Result<()> {
    require_file(&args.initial)?;
    require_file(&args.r#final)?;
    require_file(&args.dataset)?;
    let ds = read_dataset(&args.dataset)?;
    let records = split_records(&ds, args.split);
    let extent = ds.header.label_extent as usize;
    let initial = generator_from_checkpoint(&args.initial, extent)?;
    let final_model = generator_from_checkpoint(&args.r#final, extent)?;
    let bank = KernelBank::new(args.bins, args.sigma)?;
    let report = histogram_report(&initial, &final_model, records, &bank, &args.out)?;
    println!("EMD to truth: initial {:.6}, final {:.6}", report.emd_initial, report.emd_final);
    println!("histogram table: {}", report.csv_path.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let extent = cfg.data.label_extent;
    let modes = cfg.data.params.speckle_modes;
    let tm = build_tm(modes, extent * extent, cfg.data.tm_seed_base)?;
    println!(
        "transmission matrix: {} x {} (seed {})",
        tm.rows(),
        tm.cols(),
        cfg.data.tm_seed_base
    );

    let labels = histospeckle::data::gen_synthetic_labels(
        cfg.simulate.samples,
        extent,
        cfg.simulate.seed,
    )?;
    let mut pooled = Vec::with_capacity(cfg.simulate.samples * modes);
    for label in &labels {
        pooled.extend(propagate(label, &tm)?);
    }
    println!(
        "propagated {} labels -> {} pooled intensities",
        labels.len(),
        pooled.len()
    );

    if args.stats {
        let stats = stats_check(&pooled)?;
        println!("mean intensity {:.6}", stats.mean);
        println!(
            "KS distance to Exp(1): {:.6} ({})",
            stats.ks_exp1,
            if stats.ks_exp1 < 0.03 {
                "within 0.03 of fully developed speckle"
            } else {
                "outside the 0.03 band"
            }
        );
    }

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let raw = propagate(&labels[0], &tm)?;
        let speckle = normalize_speckle(&raw, (modes as f64).sqrt() as usize, cfg.data.params.percentile)?;
        let path = out.join("speckle-sample.pgm");
        write_pgm(&speckle, &path)?;
        println!("sample speckle: {}", path.display());
        cfg.echo_resolved(out)?;
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Hist(args) => cmd_hist(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
