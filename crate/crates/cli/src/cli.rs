//! Argument parsing. Flags override values from `--config`.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hyprometa_core::augment::PromptMode;
use hyprometa_core::datasets::SyntheticSpec;
use hyprometa_core::noise::NoiseKind;
use hyprometa_core::partition::PrototypeSpace;

use crate::ablation::{ablate, Grid, Variant};
use crate::config::{threads_from_env, DataSource, ExperimentConfig, LabelSource, NoiseConfig, SplitConfig};
use crate::experiment::{evaluate, gen_data, inject_noise, train, EvalRequest, InjectConfig, TrainExtras};

#[derive(Debug, Parser)]
#[command(name = "hyprometa", version, about = "Hyperbolic prototype meta-learning under noisy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-domain PPM dataset.
    GenData(GenDataArgs),
    /// Corrupt training labels and write the label table plus ledger.
    InjectNoise(InjectNoiseArgs),
    /// Train a model, then evaluate it on the held-out domain.
    Train(TrainArgs),
    /// Score a saved model on the held-out domain.
    Evaluate(EvaluateArgs),
    /// Train a grid of variants and tabulate their metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(3..=64))]
    pub domains: u64,
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(4..=256))]
    pub classes: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_class: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Symmetric,
    Asymmetric,
}

impl From<KindArg> for NoiseKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Symmetric => NoiseKind::Symmetric,
            KindArg::Asymmetric => NoiseKind::Asymmetric,
        }
    }
}

#[derive(Debug, Args)]
pub struct InjectNoiseArgs {
    /// Dataset tree written by gen-data (or any PPM tree).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "d3")]
    pub test_domain: String,
    #[arg(long, default_value_t = 1)]
    pub num_unknown: usize,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV similarity matrix over the known classes.
    #[arg(long, required_if_eq("kind", "asymmetric"))]
    pub similarity: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Hyperbolic,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PromptArg {
    Synchronous,
    Asynchronous,
    Adversarial,
    FixedCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    NoHybMeta,
    NoNcaPrompt,
    NoLabelCorrection,
    NoCrossDomain,
    Erm,
}

/// Configuration source plus per-field overrides shared by `train` and `ablate`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Experiment configuration JSON; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// PPM dataset root, replacing the configured data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the synthetic data source.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Training label table written by inject-noise.
    #[arg(long, conflicts_with = "noise_kind")]
    pub labels: Option<PathBuf>,
    /// Inject label noise in-process with this kind.
    #[arg(long, value_enum, requires = "noise_ratio")]
    pub noise_kind: Option<KindArg>,
    #[arg(long, requires = "noise_kind")]
    pub noise_ratio: Option<f64>,
    #[arg(long, requires = "noise_kind")]
    pub noise_seed: Option<u64>,
    #[arg(long, requires = "noise_kind")]
    pub similarity: Option<PathBuf>,
    #[arg(long)]
    pub test_domain: Option<String>,
    #[arg(long)]
    pub num_unknown: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps. Without --decay-at the decay moves to 80% of this.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub decay_at: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Prototype refresh period. Clamped to --steps when only that is given.
    #[arg(long)]
    pub n_epoch: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub ablation: Vec<AblationArg>,
    #[arg(long, value_enum)]
    pub prototype_space: Option<SpaceArg>,
    #[arg(long, value_enum)]
    pub prompt_mode: Option<PromptArg>,
    #[arg(long)]
    pub crop_fraction: Option<f64>,
    #[arg(long)]
    pub committed_inner_step: bool,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Confidence threshold for the reported H-score.
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(root) = &self.data {
            cfg.data = DataSource::Ppm { root: root.clone() };
        }
        if let Some(seed) = self.data_seed {
            match &mut cfg.data {
                DataSource::Synthetic(spec) => spec.seed = seed,
                DataSource::Ppm { .. } => anyhow::bail!("--data-seed only applies to synthetic data"),
            }
        }
        if let Some(path) = &self.labels {
            cfg.labels = LabelSource::Table { path: path.clone() };
        }
        if let Some(kind) = self.noise_kind {
            cfg.labels = LabelSource::Inject(NoiseConfig {
                kind: kind.into(),
                ratio: self.noise_ratio.unwrap_or_default(),
                seed: self.noise_seed.or(self.seed).unwrap_or(cfg.train.seed),
                similarity: self.similarity.clone(),
            });
        }
        if let Some(d) = &self.test_domain {
            cfg.split.test_domain = d.clone();
        }
        if let Some(n) = self.num_unknown {
            cfg.split.num_unknown = n;
        }
        let t = &mut cfg.train;
        if let Some(seed) = self.seed {
            t.seed = seed;
        }
        if let Some(steps) = self.steps {
            t.sgd.max_steps = steps;
            if self.decay_at.is_none() {
                t.sgd.decay_at_step = (steps * 4 / 5).max(1);
            }
            if self.n_epoch.is_none() {
                t.n_epoch_refresh = t.n_epoch_refresh.min(steps.max(1));
            }
        }
        if let Some(d) = self.decay_at {
            t.sgd.decay_at_step = d;
        }
        if let Some(lr) = self.lr {
            t.sgd.lr = lr;
        }
        if let Some(lr) = self.inner_lr {
            t.inner_lr = Some(lr);
        }
        if let Some(b) = self.batch_size {
            t.sgd.batch_size = b;
        }
        if let Some(n) = self.n_epoch {
            t.n_epoch_refresh = n;
        }
        if let Some(g) = self.gamma {
            t.ball = hyprometa_core::BallConfig::new(g)?;
        }
        for a in &self.ablation {
            let v = match a {
                AblationArg::NoHybMeta => Variant::NoHybMeta,
                AblationArg::NoNcaPrompt => Variant::NoNcaPrompt,
                AblationArg::NoLabelCorrection => Variant::NoLabelCorrection,
                AblationArg::NoCrossDomain => Variant::NoCrossDomain,
                AblationArg::Erm => Variant::Erm,
            };
            v.apply(t);
        }
        if let Some(space) = self.prototype_space {
            t.ablations.prototype_space = match space {
                SpaceArg::Hyperbolic => PrototypeSpace::Hyperbolic,
                SpaceArg::Euclidean => PrototypeSpace::Euclidean,
            };
        }
        if let Some(mode) = self.prompt_mode {
            t.augment.mode = match mode {
                PromptArg::Synchronous => PromptMode::Synchronous,
                PromptArg::Asynchronous => PromptMode::Asynchronous,
                PromptArg::Adversarial => PromptMode::Adversarial,
                PromptArg::FixedCrop => PromptMode::FixedCrop,
            };
        }
        if let Some(f) = self.crop_fraction {
            t.augment.crop_fraction = f;
        }
        if self.committed_inner_step {
            t.committed_inner_step = true;
        }
        if let Some(k) = self.checkpoint_every {
            cfg.checkpoint_every = k;
        }
        if let Some(th) = self.threshold {
            cfg.eval_threshold = th;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the final clean/noisy partition as partition.csv.
    #[arg(long)]
    pub dump_partition: bool,
    /// Also write this many prompt-augmented images under augmented/.
    #[arg(long, default_value_t = 0)]
    pub dump_augmented: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of a finished train run.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to score instead of the run's final model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub test_domain: Option<String>,
    /// Where to write the results; the run directory when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also export backbone embeddings of the test domain.
    #[arg(long)]
    pub embeddings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    /// Prototype refresh period sweep.
    NEpoch,
    /// Full model against w/o HYB-Meta and w/o NCA-Prompt.
    Components,
    /// An explicit list given with --variants.
    Variants,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "n-epoch")]
    pub grid: GridArg,
    /// N_epoch values for the n-epoch grid.
    #[arg(long, value_delimiter = ',', default_values_t = [500u64, 1000, 1500, 2000, 2500])]
    pub values: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub variants: Vec<Variant>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let spec = SyntheticSpec {
                num_domains: a.domains as usize,
                num_classes: a.classes as usize,
                per_class: a.per_class as usize,
                seed: a.seed,
                height: a.height,
                width: a.width,
            };
            let corpus = gen_data(&spec, &a.out, a.force)?;
            println!("wrote {} images to {}", corpus.num_samples(), a.out.display());
        }
        Command::InjectNoise(a) => {
            let cfg = InjectConfig {
                data: DataSource::Ppm { root: a.data },
                split: SplitConfig {
                    test_domain: a.test_domain,
                    num_unknown: a.num_unknown,
                },
                noise: NoiseConfig {
                    kind: a.kind.into(),
                    ratio: a.ratio,
                    seed: a.seed,
                    similarity: a.similarity,
                },
            };
            cfg.noise.validate()?;
            let flipped = inject_noise(&cfg, &a.out)?;
            println!("flipped {flipped} labels; wrote {}", a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = a.config.resolve()?;
            cfg.output_dir = Some(a.out);
            let extras = TrainExtras {
                dump_partition: a.dump_partition,
                dump_augmented: a.dump_augmented,
            };
            let outcome = train(&cfg, threads_from_env()?, extras)?;
            print_metrics(&outcome.metrics);
        }
        Command::Evaluate(a) => {
            let req = EvalRequest {
                run_dir: a.run,
                checkpoint: a.checkpoint,
                test_domain: a.test_domain,
                out: a.out,
                embeddings: a.embeddings,
            };
            let metrics = evaluate(&req, threads_from_env()?)?;
            print_metrics(&metrics);
        }
        Command::Ablate(a) => {
            let base = a.config.resolve()?;
            let grid = match a.grid {
                GridArg::NEpoch => Grid::NEpoch(a.values),
                GridArg::Components => Grid::components(),
                GridArg::Variants => Grid::Variants(a.variants),
            };
            let rows = ablate(&base, &grid, &a.out, threads_from_env()?)?;
            for r in rows {
                println!(
                    "{:<22} acc {:.4} h {:.4} oscr {:.4}  {}",
                    r.variant, r.acc, r.h_score, r.oscr, r.config_hash
                );
            }
        }
    }
    Ok(())
}

fn print_metrics(m: &crate::experiment::MetricsFile) {
    println!(
        "acc {:.4}  h-score {:.4} (best {:.4})  oscr {:.4}  [{} known, {} unknown]",
        m.metrics.acc, m.metrics.h_score_at_threshold, m.metrics.h_score_best, m.metrics.oscr, m.metrics.n_known, m.metrics.n_unknown
    );
}
