//! `sarcaps` — dataset preparation, GAN rebalancing, training, evaluation,
//! and reporting for the SAR ship classifiers.
//!
//! Training and GAN options can come from a JSON config file whose fields
//! mirror the library config structs; explicit flags override file values.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sarcaps_core::checkpoint::Checkpoint;
use sarcaps_core::data::{
    augment_manifest, import_directory, split_dataset, synth_dataset, AugmentPolicy, Manifest,
    PolarizationMode, ShipClass, Split, SynthParams,
};
use sarcaps_core::cnn::HeadKind;
use sarcaps_core::gan::{self, GanConfig};
use sarcaps_core::gradsuites;
use sarcaps_core::report::write_report;
use sarcaps_core::train::{self, evaluate, ModelKind, TrainConfig, TrainedModel};

#[derive(Parser)]
#[command(name = "sarcaps", version, about = "SAR ship classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset creation and split management.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Expand the training split with flipped/rotated tile variants.
    Augment(AugmentArgs),
    /// Per-class GAN training and dataset rebalancing.
    #[command(subcommand)]
    Gan(GanCommand),
    /// Train a classifier and write its checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Collect evaluation JSONs into an architecture × polarization table.
    Report(ReportArgs),
    /// Run the 64-bit finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Import a directory tree of raster tiles plus metadata files.
    Import(ImportArgs),
    /// Generate a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Assign train/val/test splits, stratified by class.
    Split(SplitArgs),
}

#[derive(Args)]
struct ImportArgs {
    /// Root directory of the raw dataset.
    #[arg(long)]
    input: PathBuf,
    /// Manifest CSV to write; tiles are stored next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long = "per-class")]
    per_class: usize,
    /// Tile side length in pixels.
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest CSV to write; tiles are stored next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Percentages for train,val,test — must sum to 100.
    #[arg(long, default_value = "64,16,20")]
    proportions: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// A = horizontal + vertical flips (3n); B = A + one rotation (4n).
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum GanCommand {
    /// Train one per-class GAN; writes `<out>` and `<out>.history.csv`.
    Train(GanTrainArgs),
    /// Top deficient classes up to the target with generated tiles.
    Rebalance(RebalanceArgs),
}

#[derive(Args)]
struct GanTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Ship class: tanker, container (ship) or bulk (carrier).
    #[arg(long)]
    class: String,
    /// JSON file mirroring the GAN config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RebalanceArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training tiles per class after rebalancing.
    #[arg(long)]
    target: usize,
    /// Directory holding per-class GAN checkpoints (<class>.sckp).
    #[arg(long)]
    gans: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON file mirroring the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// capsnet | cnn
    #[arg(long)]
    model: Option<String>,
    /// CNN head size: S | L
    #[arg(long)]
    head: Option<String>,
    /// VH | VV | VHVV
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// none | A | B | gan
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model checkpoint to write.
    #[arg(long, default_value = "model.sckp")]
    out: PathBuf,
    /// Per-epoch loss/accuracy CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "model-ckpt")]
    model_ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// VH | VV | VHVV
    #[arg(long)]
    mode: String,
    /// Dataset split to score.
    #[arg(long, default_value = "test")]
    split: String,
    /// Where to write the report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of evaluation JSON files.
    #[arg(long = "in")]
    input: PathBuf,
    /// Text table path; a CSV twin is written to `<out>.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// tensor | capsnet | cnn | gan | all
    #[arg(long)]
    module: String,
}

fn parse_class(s: &str) -> Result<ShipClass> {
    let norm = s.trim().to_ascii_lowercase().replace([' ', '-', '_'], "");
    Ok(match norm.as_str() {
        "tanker" => ShipClass::Tanker,
        "container" | "containership" => ShipClass::ContainerShip,
        "bulk" | "bulkcarrier" => ShipClass::BulkCarrier,
        _ => bail!("unknown ship class {s:?} (expected tanker, container ship or bulk carrier)"),
    })
}

fn parse_mode(s: &str) -> Result<PolarizationMode> {
    Ok(match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
        "VH" => PolarizationMode::VH,
        "VV" => PolarizationMode::VV,
        "VHVV" => PolarizationMode::VHVV,
        _ => bail!("unknown polarization mode {s:?} (expected VH, VV or VHVV)"),
    })
}

fn parse_proportions(s: &str) -> Result<[u32; 3]> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().context("proportions must be integers"))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("expected three comma-separated percentages, e.g. 64,16,20"),
    }
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Import(args)) => {
            let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
            let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let (manifest, summary) = import_directory(&args.input, &dir)?;
            manifest.save(&args.out)?;
            println!(
                "imported {} tiles ({} rejected by label, {} missing metadata) -> {}",
                summary.imported,
                summary.rejected,
                summary.missing_metadata,
                args.out.display()
            );
        }
        Command::Dataset(DatasetCommand::Synth(args)) => {
            let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
            let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let params =
                SynthParams { per_class: args.per_class, size: args.size, seed: args.seed };
            let manifest = synth_dataset(&params, &dir)?;
            manifest.save(&args.out)?;
            println!("wrote {} synthetic tiles -> {}", manifest.records.len(), args.out.display());
        }
        Command::Dataset(DatasetCommand::Split(args)) => {
            let proportions = parse_proportions(&args.proportions)?;
            let mut manifest = load_manifest(&args.manifest)?;
            split_dataset(&mut manifest, proportions, args.seed)?;
            manifest.save(&args.manifest)?;
            let count = |s| manifest.split_records(s).len();
            println!(
                "split {} records into {}/{}/{} (train/val/test)",
                manifest.records.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test)
            );
        }
        Command::Augment(args) => {
            let policy = match args.policy.trim().to_ascii_uppercase().as_str() {
                "A" => AugmentPolicy::A,
                "B" => AugmentPolicy::B,
                other => bail!("unknown augmentation policy {other:?} (expected A or B)"),
            };
            let mut manifest = load_manifest(&args.manifest)?;
            let added = augment_manifest(&mut manifest, policy, args.seed)?;
            manifest.save(&args.manifest)?;
            println!("added {added} augmented tiles ({} records total)", manifest.records.len());
        }
        Command::Gan(GanCommand::Train(args)) => {
            let mut config: GanConfig = load_json_config(args.config.as_deref())?;
            if let Some(epochs) = args.epochs {
                config.epochs = epochs;
            }
            let class = parse_class(&args.class)?;
            let manifest = load_manifest(&args.manifest)?;
            let pair = gan::train_gan::<f32>(&manifest, class, &config, args.seed)?;
            pair.to_checkpoint().save(&args.out)?;
            let history_path = history_sibling(&args.out);
            gan::save_history_csv(&history_path, &pair.history)?;
            let last = pair.history.last();
            println!(
                "trained {} GAN for {} epochs (final d_loss {:.4}, g_loss {:.4}) -> {}",
                class.as_str(),
                pair.history.len(),
                last.map_or(f64::NAN, |e| e.d_loss),
                last.map_or(f64::NAN, |e| e.g_loss),
                args.out.display()
            );
        }
        Command::Gan(GanCommand::Rebalance(args)) => {
            let mut manifest = load_manifest(&args.manifest)?;
            let added = gan::rebalance(&mut manifest, &args.gans, args.target, args.seed)?;
            manifest.save(&args.manifest)?;
            for (class, n) in &added {
                println!("{}: +{} generated tiles", class.as_str(), n);
            }
            println!("training split now holds {} tiles per class", args.target);
        }
        Command::Train(args) => {
            let mut config: TrainConfig = load_json_config(args.config.as_deref())?;
            if let Some(model) = &args.model {
                config.model = model.parse::<ModelKind>().map_err(anyhow::Error::msg)?;
            }
            if let Some(head) = &args.head {
                config.head = head.parse::<HeadKind>().map_err(anyhow::Error::msg)?;
                config.cnn.head = config.head;
            }
            if let Some(mode) = &args.mode {
                config.mode = parse_mode(mode)?;
            }
            if let Some(epochs) = args.epochs {
                config.epochs = epochs;
            }
            if args.batch.is_some() {
                config.batch = args.batch;
            }
            if let Some(augment) = &args.augment {
                config.augment = augment.parse().map_err(anyhow::Error::msg)?;
            }
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let manifest = load_manifest(&args.manifest)?;
            let outcome = train::train(&manifest, &config)?;
            outcome.model.to_checkpoint().save(&args.out)?;
            let history_path = args.history.clone().unwrap_or_else(|| history_sibling(&args.out));
            train::save_history_csv(&history_path, &outcome.history)?;
            let last = outcome.history.last().expect("nonempty history");
            println!(
                "trained {} on {} for {} epochs (best epoch {}, final train acc {:.4}) -> {}",
                config.architecture(),
                config.mode.as_str(),
                outcome.history.len(),
                outcome.best_epoch,
                last.train_acc,
                args.out.display()
            );
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.model_ckpt)?;
            let model = TrainedModel::from_checkpoint(&ckpt)?;
            let manifest = load_manifest(&args.manifest)?;
            let mode = parse_mode(&args.mode)?;
            let split = Split::parse(&args.split)?;
            let report = evaluate(&model, &manifest, mode, split, args.seed)?;
            let json = serde_json::to_string_pretty(&report)?;
            match &args.out {
                Some(path) => {
                    std::fs::write(path, &json)
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!(
                        "{} on {}: accuracy {} -> {}",
                        report.architecture,
                        report.mode,
                        sarcaps_core::report::format_accuracy(report.accuracy),
                        path.display()
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Report(args) => {
            let table = write_report(&args.input, &args.out)?;
            if table.is_empty() {
                bail!("no evaluation JSON files found in {}", args.input.display());
            }
            println!("{}", table.render_text());
        }
        Command::Gradcheck(args) => {
            let results = gradsuites::run_module(&args.module)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "pass" } else { "FAIL" };
                println!("{status}  {:<60} max rel err {:.3e}", r.check, r.max_rel_err);
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", results.len());
            }
            println!("all {} gradient checks passed", results.len());
        }
    }
    Ok(())
}

/// `model.sckp` → `model.sckp.history.csv`.
fn history_sibling(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
