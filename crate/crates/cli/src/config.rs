//! Experiment configuration: what data to load, how to split and corrupt it,
//! and how to train. Every output directory gets a `config.json` holding the
//! canonical serialization of the configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hyprometa_core::datasets::{load_ppm_tree, Corpus, SyntheticSpec};
use hyprometa_core::noise::NoiseKind;
use hyprometa_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory, bit-identical to what `gen-data` would write.
    Synthetic(SyntheticSpec),
    /// A `<domain>/<class>/<id>.ppm` tree.
    Ppm { root: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            DataSource::Synthetic(spec) => Ok(spec.generate()?),
            DataSource::Ppm { root } => {
                load_ppm_tree(root).with_context(|| format!("loading dataset tree {}", root.display()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub test_domain: String,
    pub num_unknown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
    /// Similarity CSV over the known classes; required for asymmetric noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<PathBuf>,
}

/// Where the training labels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSource {
    /// The labels stored with the data.
    Given,
    /// A `train_labels.csv` written by `inject-noise`.
    Table { path: PathBuf },
    /// Corrupt the given labels in-process before training.
    Inject(NoiseConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub labels: LabelSource,
    pub train: TrainConfig,
    /// Save a checkpoint every this many steps; 0 keeps only the final model.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Confidence threshold for the reported H-score.
    #[serde(default = "default_threshold")]
    pub eval_threshold: f64,
    /// Set from the command line; kept out of `config.json` so that the same
    /// experiment written to two places has the same file and hash.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

fn default_threshold() -> f64 {
    hyprometa_core::metrics::DEFAULT_THRESHOLD
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec {
                num_domains: 4,
                num_classes: 7,
                per_class: 30,
                seed: 0,
                height: 16,
                width: 16,
            }),
            split: SplitConfig {
                test_domain: "d3".into(),
                num_unknown: 1,
            },
            labels: LabelSource::Given,
            train: TrainConfig::default(),
            checkpoint_every: 0,
            eval_threshold: default_threshold(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            bail!("eval_threshold must lie in [0, 1], got {}", self.eval_threshold);
        }
        if let LabelSource::Inject(noise) = &self.labels {
            noise.validate()?;
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir.as_deref().context("no output directory given (use --out)")
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            bail!("noise ratio must lie in [0, 1], got {}", self.ratio);
        }
        if self.kind == NoiseKind::Asymmetric && self.similarity.is_none() {
            bail!("asymmetric noise needs a similarity matrix");
        }
        Ok(())
    }
}

/// Pretty-printed JSON with a trailing newline. Field order follows the type
/// definitions, so equal values always give equal bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Hex SHA-256 of the canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(value)?.as_bytes())))
}

pub fn write_config<T: Serialize>(dir: &Path, value: &T) -> Result<String> {
    let text = canonical_json(value)?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Worker threads for embedding extraction: `HYPM_THREADS` if set, otherwise
/// the machine's available parallelism.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("HYPM_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("HYPM_THREADS='{v}' is not a count"))?;
            if n == 0 {
                bail!("HYPM_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
