//! The work behind each subcommand, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hyprometa_core::augment::{build_augmented_batch, dump_ppm, random_crop_mask};
use hyprometa_core::datasets::{
    make_split, sample_batch_different_classes, write_ppm_tree, Corpus, DomainDataset, SplitSpec, SyntheticSpec,
};
use hyprometa_core::metrics::{export_confidences, export_curve, report, score_test_set, EvalRecord, MetricsReport};
use hyprometa_core::noise::{apply_label_table, inject, load_similarity, write_label_table, NoiseKind, NoiseSpec};
use hyprometa_core::partition::write_partition_csv;
use hyprometa_core::rng::SeedTree;
use hyprometa_core::trainer::{StepReport, Trainer, TrainingLog};
use hyprometa_core::ModelState;
use serde::{Deserialize, Serialize};

use crate::config::{write_config, DataSource, ExperimentConfig, LabelSource, NoiseConfig, SplitConfig};

pub const MODEL_FILE: &str = "model.hypm";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAIN_LABELS_FILE: &str = "train_labels.csv";
pub const LEDGER_FILE: &str = "labels_noisy.csv";
pub const LOG_FILE: &str = "training_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIDENCES_FILE: &str = "confidences.csv";
pub const CURVE_FILE: &str = "oscr_curve.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes a synthetic corpus as a PPM tree. A non-empty `out` is an error
/// unless `force` is set, in which case its contents are replaced.
pub fn gen_data(spec: &SyntheticSpec, out: &Path, force: bool) -> Result<Corpus> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                bail!("{} is not empty; pass --force to overwrite", out.display());
            }
            fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
        }
    }
    let corpus = spec.generate()?;
    create_dir(out)?;
    write_ppm_tree(out, &corpus)?;
    write_config(out, spec)?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub noise: NoiseConfig,
}

/// Training pools of a split, with labels still as stored.
pub fn source_domains(corpus: &Corpus, split: &SplitConfig) -> Result<(SplitSpec, Vec<DomainDataset>)> {
    let spec = make_split(corpus, &split.test_domain, split.num_unknown)?;
    let sources = corpus.training_domains(&spec)?;
    Ok((spec, sources))
}

fn corrupt(
    corpus: &Corpus,
    split: &SplitSpec,
    sources: &[DomainDataset],
    noise: &NoiseConfig,
    out: &Path,
) -> Result<Vec<DomainDataset>> {
    noise.validate()?;
    let known_names: Vec<String> = split.known_classes.iter().map(|&k| corpus.classes[k].clone()).collect();
    let spec = match noise.kind {
        NoiseKind::Symmetric => NoiseSpec::symmetric(noise.ratio, noise.seed),
        NoiseKind::Asymmetric => {
            let path = noise.similarity.as_deref().context("asymmetric noise needs a similarity matrix")?;
            NoiseSpec::asymmetric(noise.ratio, noise.seed, load_similarity(path, &known_names)?)
        }
    };
    let (noisy, ledger) = inject(sources, split.num_known(), &spec)?;
    ledger.write_csv(&out.join(LEDGER_FILE))?;
    write_label_table(&out.join(TRAIN_LABELS_FILE), &noisy)?;
    log::info!(
        "flipped {} of {} labels ({:.3})",
        ledger.entries.len(),
        noisy.iter().map(DomainDataset::len).sum::<usize>(),
        ledger.achieved_ratio
    );
    Ok(noisy)
}

/// Corrupts the training labels of a dataset, writing the labels the trainer
/// should use (`train_labels.csv`) and the ground-truth ledger (`labels_noisy.csv`)
/// to separate files.
pub fn inject_noise(cfg: &InjectConfig, out: &Path) -> Result<usize> {
    create_dir(out)?;
    write_config(out, cfg)?;
    let corpus = cfg.data.load()?;
    let (split, sources) = source_domains(&corpus, &cfg.split)?;
    let noisy = corrupt(&corpus, &split, &sources, &cfg.noise, out)?;
    let flipped = noisy
        .iter()
        .zip(&sources)
        .flat_map(|(a, b)| a.samples().iter().zip(b.samples()))
        .filter(|(a, b)| a.label != b.label)
        .count();
    Ok(flipped)
}

/// Extra diagnostics `train` can write next to its main outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainExtras {
    pub dump_partition: bool,
    pub dump_augmented: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub steps: u64,
    pub test_domain: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub config_hash: String,
    pub state: ModelState,
    pub reports: Vec<StepReport>,
    pub metrics: MetricsFile,
}

fn training_labels(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    sources: Vec<DomainDataset>,
    out: &Path,
) -> Result<Vec<DomainDataset>> {
    match &cfg.labels {
        LabelSource::Given => Ok(sources),
        LabelSource::Table { path } => {
            apply_label_table(path, &sources).with_context(|| format!("applying labels from {}", path.display()))
        }
        LabelSource::Inject(noise) => corrupt(corpus, split, &sources, noise, out),
    }
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}.hypm"))
}

/// Trains, saves the model, and evaluates it on the held-out domain.
pub fn train(cfg: &ExperimentConfig, threads: usize, extras: TrainExtras) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir()?;
    create_dir(out)?;
    let config_hash = write_config(out, cfg)?;

    let corpus = cfg.data.load()?;
    let (split, sources) = source_domains(&corpus, &cfg.split)?;
    let sources = training_labels(cfg, &corpus, &split, sources, out)?;

    let mut trainer = Trainer::new(&sources, split.num_known(), cfg.train.clone(), threads)?;
    let mut log = TrainingLog::create(&out.join(LOG_FILE))?;
    if cfg.checkpoint_every > 0 {
        create_dir(&out.join(CHECKPOINT_DIR))?;
    }
    let mut reports = Vec::with_capacity(cfg.train.sgd.max_steps as usize);
    for _ in 0..cfg.train.sgd.max_steps {
        let report = trainer.train_step()?;
        log.append(&report)?;
        ensure!(
            report.loss_meta_train.is_finite() && report.loss_meta_test.is_finite(),
            "non-finite loss at step {}",
            report.step
        );
        let done = report.step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            trainer.state().save(&checkpoint_path(out, done))?;
        }
        if report.step % 100 == 0 {
            log::info!(
                "step {} train {:.4} test {:.4} clean {} noisy {}",
                report.step,
                report.loss_meta_train,
                report.loss_meta_test,
                report.clean_count,
                report.noisy_count
            );
        }
        reports.push(report);
    }
    log.finish()?;

    if extras.dump_partition {
        match trainer.partition() {
            Some((table, partition)) => write_partition_csv(&out.join(PARTITION_FILE), &sources, table, partition)?,
            None => log::warn!("no partition to dump: prototype partitioning is disabled"),
        }
    }
    let state = trainer.into_state();
    state.save(&out.join(MODEL_FILE))?;
    if extras.dump_augmented > 0 {
        dump_augmented(cfg, &sources, &state, extras.dump_augmented, &out.join("augmented"))?;
    }

    let test = corpus.test_domain(&split)?;
    let records = score_test_set(&state, test, &split, threads)?;
    let metrics = write_evaluation(&records, cfg, &config_hash, state.optimizer.step, out)?;
    Ok(TrainOutcome {
        config_hash,
        state,
        reports,
        metrics,
    })
}

fn write_evaluation(
    records: &[EvalRecord],
    cfg: &ExperimentConfig,
    config_hash: &str,
    steps: u64,
    out: &Path,
) -> Result<MetricsFile> {
    let metrics = MetricsFile {
        config_hash: config_hash.to_string(),
        steps,
        test_domain: cfg.split.test_domain.clone(),
        metrics: report(records, cfg.eval_threshold)?,
    };
    let path = out.join(METRICS_FILE);
    fs::write(&path, crate::config::canonical_json(&metrics)?).with_context(|| format!("writing {}", path.display()))?;
    export_confidences(records, &out.join(CONFIDENCES_FILE))?;
    export_curve(records, &out.join(CURVE_FILE))?;
    Ok(metrics)
}

fn dump_augmented(
    cfg: &ExperimentConfig,
    sources: &[DomainDataset],
    state: &ModelState,
    count: usize,
    dir: &Path,
) -> Result<()> {
    let Some(domain) = sources.iter().find(|d| !d.is_empty()) else {
        bail!("no training samples to augment");
    };
    let mut rng = SeedTree::new(cfg.train.seed).stream("augmented-dump");
    let clean: Vec<_> = domain.samples().iter().cycle().take(count).collect();
    let labels: Vec<usize> = clean.iter().map(|s| s.label).collect();
    let partners = sample_batch_different_classes(domain.samples(), &labels, |s| s.label, &mut rng)?;
    let (h, w) = clean[0].image.shape();
    let mask = random_crop_mask(h, w, &cfg.train.augment, &mut rng)?;
    let a: Vec<_> = clean.iter().map(|s| &s.image).collect();
    let b: Vec<_> = partners.iter().map(|s| &s.image).collect();
    let (images, _) = build_augmented_batch(&a, &b, &state.prompt, mask, state.config().num_known)?;
    Ok(dump_ppm(dir, &images)?)
}

/// Evaluation options beyond the stored run configuration.
#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub test_domain: Option<String>,
    pub out: Option<PathBuf>,
    pub embeddings: bool,
}

/// Re-scores a trained model on its (or another) held-out domain.
pub fn evaluate(req: &EvalRequest, threads: usize) -> Result<MetricsFile> {
    let mut cfg = ExperimentConfig::load(&req.run_dir.join(crate::config::CONFIG_FILE))?;
    if let Some(d) = &req.test_domain {
        cfg.split.test_domain = d.clone();
    }
    let checkpoint = req.checkpoint.clone().unwrap_or_else(|| req.run_dir.join(MODEL_FILE));
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let state = ModelState::load(&checkpoint)?;
    let corpus = cfg.data.load()?;
    let split = make_split(&corpus, &cfg.split.test_domain, cfg.split.num_unknown)?;
    let test = corpus.test_domain(&split)?;
    let out = req.out.clone().unwrap_or_else(|| req.run_dir.clone());
    create_dir(&out)?;
    let config_hash = write_config(&out, &cfg)?;
    let records = score_test_set(&state, test, &split, threads)?;
    let metrics = write_evaluation(&records, &cfg, &config_hash, state.optimizer.step, &out)?;
    if req.embeddings {
        write_embeddings(&state, test, &split, threads, &out.join(EMBEDDINGS_FILE))?;
    }
    Ok(metrics)
}

/// Backbone features of the test domain for external plotting.
fn write_embeddings(
    state: &ModelState,
    test: &DomainDataset,
    split: &SplitSpec,
    threads: usize,
    path: &Path,
) -> Result<()> {
    let images: Vec<_> = test.samples().iter().map(|s| &s.image).collect();
    let embeddings = state.embed_images(&images, threads)?;
    let mut w = csv::Writer::from_path(path)?;
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut header = vec!["sample_id".to_string(), "label".to_string(), "population".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for (s, z) in test.samples().iter().zip(&embeddings) {
        let population = if split.is_known(s.label) { "known" } else { "unknown" };
        let mut row = vec![s.id.clone(), s.label.to_string(), population.to_string()];
        row.extend(z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}
