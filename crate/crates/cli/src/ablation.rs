use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use hyprometa_core::augment::PromptMode;
use hyprometa_core::partition::PrototypeSpace;
use hyprometa_core::trainer::{Ablations, TrainConfig};
use serde::Serialize;

use crate::config::{write_config, ExperimentConfig};
use crate::experiment::{train, TrainExtras, ABLATION_FILE};

/// A named modification of the base training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Full,
    NoHybMeta,
    NoNcaPrompt,
    NoLabelCorrection,
    NoCrossDomain,
    EuclideanPrototypes,
    FixedCrop,
    Asynchronous,
    Adversarial,
    Erm,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHybMeta => "no-hyb-meta",
            Variant::NoNcaPrompt => "no-nca-prompt",
            Variant::NoLabelCorrection => "no-label-correction",
            Variant::NoCrossDomain => "no-cross-domain",
            Variant::EuclideanPrototypes => "euclidean-prototypes",
            Variant::FixedCrop => "fixed-crop",
            Variant::Asynchronous => "asynchronous",
            Variant::Adversarial => "adversarial",
            Variant::Erm => "erm",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let a = &mut cfg.ablations;
        match self {
            Variant::Full => {}
            Variant::NoHybMeta => a.use_hyb_meta = false,
            Variant::NoNcaPrompt => a.use_nca_prompt = false,
            Variant::NoLabelCorrection => a.use_label_correction = false,
            Variant::NoCrossDomain => a.cross_domain_meta_test = false,
            Variant::EuclideanPrototypes => a.prototype_space = PrototypeSpace::Euclidean,
            Variant::FixedCrop => cfg.augment.mode = PromptMode::FixedCrop,
            Variant::Asynchronous => cfg.augment.mode = PromptMode::Asynchronous,
            Variant::Adversarial => cfg.augment.mode = PromptMode::Adversarial,
            Variant::Erm => *a = Ablations::erm(),
        }
    }
}

/// Which parameter an ablation sweeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grid {
    /// Prototype refresh period values.
    NEpoch(Vec<u64>),
    /// Component variants applied one at a time to the base configuration.
    Variants(Vec<Variant>),
}

impl Grid {
    pub fn default_n_epoch() -> Self {
        Grid::NEpoch(vec![500, 1000, 1500, 2000, 2500])
    }

    pub fn components() -> Self {
        Grid::Variants(vec![Variant::Full, Variant::NoHybMeta, Variant::NoNcaPrompt])
    }

    fn expand(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut out = Vec::new();
        match self {
            Grid::NEpoch(values) => {
                if values.is_empty() {
                    bail!("empty N_epoch grid");
                }
                for &n in values {
                    let mut cfg = base.clone();
                    cfg.train.n_epoch_refresh = n;
                    out.push((format!("n_epoch_{n}"), cfg));
                }
            }
            Grid::Variants(variants) => {
                if variants.is_empty() {
                    bail!("empty variant grid");
                }
                for &v in variants {
                    let mut cfg = base.clone();
                    v.apply(&mut cfg.train);
                    out.push((v.name().to_string(), cfg));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub config_hash: String,
    pub n_epoch_refresh: u64,
    pub acc: f64,
    pub h_score: f64,
    pub h_score_best: f64,
    pub oscr: f64,
}

/// Trains every grid point in its own subdirectory of `out` and writes one
/// row per point to `ablation.csv`.
pub fn ablate(base: &ExperimentConfig, grid: &Grid, out: &Path, threads: usize) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let variants = grid.expand(base)?;
    for (name, cfg) in &variants {
        cfg.validate().with_context(|| format!("variant {name}"))?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(out, base)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (name, mut cfg) in variants {
        log::info!("ablation variant {name}");
        cfg.output_dir = Some(out.join(&name));
        let outcome = train(&cfg, threads, TrainExtras::default()).with_context(|| format!("variant {name}"))?;
        let m = &outcome.metrics.metrics;
        rows.push(AblationRow {
            variant: name,
            config_hash: outcome.config_hash,
            n_epoch_refresh: cfg.train.n_epoch_refresh,
            acc: m.acc,
            h_score: m.h_score_at_threshold,
            h_score_best: m.h_score_best,
            oscr: m.oscr,
        });
    }
    let path = out.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(rows)
}
