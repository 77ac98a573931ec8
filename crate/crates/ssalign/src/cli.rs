//! Command-line interface: argument definitions and command bodies.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use ssalign_core::align::StatMetric;
use ssalign_core::data::{
    generate_synthetic_benchmark, DomainDataset, ShiftSpec, SyntheticSpec, DEFAULT_BIAS_SCALE,
    DEFAULT_FRAMES_PER_VIDEO,
};
use ssalign_core::model::top1_accuracy;
use ssalign_core::trainer::{canonical_variants, run_ablation, train_with_clock, TrainConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::manifest::{load_manifest, write_dataset};
use crate::metrics::{write_json, AblationMetrics, DataPaths, EvalMetrics, TrainMetrics};

pub const SOURCE_STEM: &str = "source";
pub const TARGET_TRAIN_STEM: &str = "target_train";
pub const TARGET_TEST_STEM: &str = "target_test";

/// A bad combination of flags that the parser cannot catch (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "ssalign", version, about = "Few-shot video domain adaptation on precomputed frame features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target benchmark to disk.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, train log and metrics.
    Train(TrainArgs),
    /// Report top-1 accuracy of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train the canonical component variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    pub classes: u32,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(2..))]
    pub dim: u32,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub k_shot: u32,
    #[arg(long, default_value_t = 800, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_source: u32,
    #[arg(long, default_value_t = 400, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_test: u32,
    #[arg(long, default_value_t = DEFAULT_FRAMES_PER_VIDEO as u32, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    /// Target rotation angle in radians.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    pub rotation: f64,
    /// Norm of the target bias.
    #[arg(long, default_value_t = DEFAULT_BIAS_SCALE, allow_negative_numbers = true)]
    pub bias: f64,
    /// Extra per-frame noise on target frames.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenerateArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes as usize,
            feature_dim: self.dim as usize,
            n_source: self.n_source as usize,
            k_shot: self.k_shot as usize,
            n_test: self.n_test as usize,
            frames_per_video: self.frames as usize,
            shift: ShiftSpec {
                rotation_angle: self.rotation,
                bias_scale: self.bias,
                noise_std: self.noise,
                seed: self.seed,
            },
        }
    }
}

/// Manifest locations: `--data DIR` picks the generated file names, the
/// individual flags override it.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target_train: Option<PathBuf>,
    #[arg(long)]
    pub target_test: Option<PathBuf>,
}

impl DataArgs {
    fn pick(&self, explicit: &Option<PathBuf>, stem: &str, flag: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(format!("{stem}.json"))),
            (None, None) => Err(UsageError(format!("missing --{flag} (or --data DIR)")).into()),
        }
    }

    pub fn resolve(&self) -> Result<[PathBuf; 3]> {
        Ok([
            self.pick(&self.source, SOURCE_STEM, "source")?,
            self.pick(&self.target_train, TARGET_TRAIN_STEM, "target-train")?,
            self.pick(&self.target_test, TARGET_TEST_STEM, "target-test")?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Mmd,
    Coral,
    None,
}

/// Training hyper-parameters; unset flags keep the library defaults.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lambda_sem: Option<f64>,
    #[arg(long)]
    pub lambda_stat: Option<f64>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub alpha_v: Option<f64>,
    /// Frames per snippet.
    #[arg(long)]
    pub m: Option<usize>,
    /// Minimum start gap between target snippets of one video.
    #[arg(long)]
    pub mhat: Option<usize>,
    /// Snippets per target video.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub e_warmup: Option<usize>,
    #[arg(long, value_enum)]
    pub stat_metric: Option<MetricArg>,
    #[arg(long)]
    pub batch_source: Option<usize>,
    #[arg(long)]
    pub batch_target: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_ssa: bool,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_proto: bool,
    #[arg(long)]
    pub no_cross: bool,
    #[arg(long)]
    pub no_sn_dist: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(
            epochs => epochs, lr => lr, momentum => momentum, weight_decay => weight_decay,
            lambda_sem => lambda_sem, lambda_stat => lambda_stat, lambda_p => lambda_p,
            alpha_v => alpha_v, m => m, mhat => m_hat, r => r, e_warmup => e_warmup,
            batch_source => batch_source, batch_target => batch_target, hidden => hidden,
            embed => embed, seed => seed
        );
        if let Some(metric) = self.stat_metric {
            c.stat_metric = match metric {
                MetricArg::Mmd => Some(StatMetric::Mmd),
                MetricArg::Coral => Some(StatMetric::Coral),
                MetricArg::None => None,
            };
        }
        c.enable_ssa &= !self.no_ssa;
        c.enable_attention &= !self.no_attention;
        c.enable_proto &= !self.no_proto;
        c.enable_cross &= !self.no_cross;
        c.enable_sn_dist &= !self.no_sn_dist;
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for checkpoint.fsvm, train_log.json and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the metrics record.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Subset of full, no-ssa, lpred-only, no-attention (default: all).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Where to write the metrics record.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load(path: &Path) -> Result<DomainDataset> {
    load_manifest(path).with_context(|| format!("loading {}", path.display()))
}

fn load_all(paths: &[PathBuf; 3]) -> Result<[DomainDataset; 3]> {
    Ok([load(&paths[0])?, load(&paths[1])?, load(&paths[2])?])
}

fn data_paths(paths: &[PathBuf; 3]) -> DataPaths {
    DataPaths {
        source: display(&paths[0]),
        target_train: display(&paths[1]),
        target_test: display(&paths[2]),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Echo {
        command: &'static str,
        spec: SyntheticSpec,
        manifests: Vec<String>,
    }
    if !(args.noise >= 0.0) {
        return Err(UsageError(format!("--noise must be non-negative, got {}", args.noise)).into());
    }
    let spec = args.spec();
    let bench = generate_synthetic_benchmark(&spec)?;
    let manifests = [
        write_dataset(&bench.source, &args.out, SOURCE_STEM)?,
        write_dataset(&bench.target_train, &args.out, TARGET_TRAIN_STEM)?,
        write_dataset(&bench.target_test, &args.out, TARGET_TEST_STEM)?,
    ];
    let echo = Echo {
        command: "generate",
        spec,
        manifests: manifests.iter().map(|p| display(p)).collect(),
    };
    write_json(&echo, &args.out.join("generate.json"))?;
    println!("{}", serde_json::to_string_pretty(&echo)?);
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let paths = args.data.resolve()?;
    let config = args.config.resolve();
    config.validate()?;
    let [source, target_train, target_test] = load_all(&paths)?;
    let start = Instant::now();
    let mut clock = || start.elapsed().as_secs_f64();
    let (params, log) = train_with_clock(&source, &target_train, &target_test, &config, &mut clock)?;
    for e in &log.epochs {
        eprintln!(
            "epoch {:>3}  total {:.4}  pred {:.4}  acc {:.4}  {:.2}s",
            e.epoch, e.total, e.l_pred, e.test_accuracy, e.seconds
        );
    }
    let checkpoint = args.out.join("checkpoint.fsvm");
    save_checkpoint(&params, &checkpoint)?;
    write_json(&log, &args.out.join("train_log.json"))?;
    let metrics = TrainMetrics::new(data_paths(&paths), config, &log, display(&checkpoint));
    write_json(&metrics, &args.out.join("metrics.json"))?;
    match log.final_accuracy() {
        Some(acc) => println!("final target top-1: {acc:.6}"),
        None => println!("no epochs run"),
    }
    Ok(())
}

/// Top-1 accuracy of a checkpoint on a manifest.
pub fn evaluate(checkpoint: &Path, manifest: &Path) -> Result<(f64, usize)> {
    let params = load_checkpoint(checkpoint)?;
    let dataset = load(manifest)?;
    let dims = params.dims();
    if dims.frame_dim != dataset.feature_dim || dims.classes != dataset.num_classes {
        bail!(
            "checkpoint expects {}-dim features and {} classes, dataset '{}' has {}-dim features and {} classes",
            dims.frame_dim,
            dims.classes,
            dataset.name,
            dataset.feature_dim,
            dataset.num_classes
        );
    }
    Ok((top1_accuracy(&params, &dataset)?, dataset.len()))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (accuracy, videos) = evaluate(&args.checkpoint, &args.manifest)?;
    println!("{accuracy:.6}");
    if let Some(path) = &args.metrics {
        let record = EvalMetrics {
            command: "eval".into(),
            checkpoint: display(&args.checkpoint),
            manifest: display(&args.manifest),
            videos,
            accuracy,
        };
        write_json(&record, path)?;
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let paths = args.data.resolve()?;
    let base = args.config.resolve();
    let mut variants = canonical_variants(&base);
    if !args.variants.is_empty() {
        for name in &args.variants {
            if !variants.iter().any(|v| &v.name == name) {
                return Err(UsageError(format!(
                    "unknown variant '{name}' (expected full, no-ssa, lpred-only or no-attention)"
                ))
                .into());
            }
        }
        variants.retain(|v| args.variants.contains(&v.name));
    }
    for v in &variants {
        v.config.validate().with_context(|| format!("variant {}", v.name))?;
    }
    let [source, target_train, target_test] = load_all(&paths)?;
    let results = run_ablation(&variants, &args.seeds, &source, &target_train, &target_test)?;
    let configs: Vec<TrainConfig> = variants.iter().map(|v| v.config).collect();
    let record = AblationMetrics::new(data_paths(&paths), args.seeds.clone(), &configs, &results);
    print!("{}", record.table());
    if let Some(path) = &args.out {
        write_json(&record, path)?;
    }
    Ok(())
}
