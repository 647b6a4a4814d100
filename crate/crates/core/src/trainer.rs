//! The episodic training loop.
//!
//! Each step picks an ordered pair of source domains `(s_i, s_j)`, takes one
//! inner SGD step on a copy of the model using `s_i` (clean labels, corrected
//! noisy labels, and prompt-augmented mixes), evaluates the adapted copy on
//! clean data from both domains, and finally moves the original parameters by
//! the sum of both gradients (first-order meta-learning).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augmented_batch_on_tape, random_crop_mask, AugmentConfig, PromptMode};
use crate::autodiff::{Tape, Var};
use crate::datasets::{sample_batch, sample_batch_different_classes, stack_images, DomainDataset, Image};
use crate::error::{Error, Result};
use crate::geometry::BallConfig;
use crate::model::{BoundModel, GradMode, ModelConfig, ModelState, ParamGrads, SgdConfig};
use crate::partition::{compute_partition, ModeConfig, Partition, PrototypeSpace, PrototypeTable};
use crate::rng::{SeedTree, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub use_hyb_meta: bool,
    pub use_nca_prompt: bool,
    pub use_label_correction: bool,
    pub cross_domain_meta_test: bool,
    pub prototype_space: PrototypeSpace,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_hyb_meta: true,
            use_nca_prompt: true,
            use_label_correction: true,
            cross_domain_meta_test: true,
            prototype_space: PrototypeSpace::Hyperbolic,
        }
    }
}

impl Ablations {
    /// Plain empirical risk minimisation on the given labels.
    pub fn erm() -> Self {
        Self {
            use_hyb_meta: false,
            use_nca_prompt: false,
            ..Self::default()
        }
    }
}

/// Layer widths; image size and class count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let m = ModelConfig::new(4, 4, 1);
        Self {
            conv1_channels: m.conv1_channels,
            conv2_channels: m.conv2_channels,
            embed_dim: m.embed_dim,
        }
    }
}

impl NetworkConfig {
    pub fn model_config(&self, height: usize, width: usize, num_known: usize) -> ModelConfig {
        ModelConfig {
            height,
            width,
            conv1_channels: self.conv1_channels,
            conv2_channels: self.conv2_channels,
            embed_dim: self.embed_dim,
            num_known,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_epoch_refresh: u64,
    pub ablations: Ablations,
    /// Inner-step learning rate; the scheduled outer rate when absent.
    pub inner_lr: Option<f64>,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub ball: BallConfig,
    pub augment: AugmentConfig,
    pub mode: ModeConfig,
    pub network: NetworkConfig,
    /// Keep the inner step and apply the combined update on top of it.
    pub committed_inner_step: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epoch_refresh: 500,
            ablations: Ablations::default(),
            inner_lr: None,
            seed: 0,
            sgd: SgdConfig::default(),
            ball: BallConfig::default(),
            augment: AugmentConfig::default(),
            mode: ModeConfig::default(),
            network: NetworkConfig::default(),
            committed_inner_step: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.augment.validate()?;
        if self.n_epoch_refresh == 0 || (self.sgd.max_steps > 0 && self.n_epoch_refresh > self.sgd.max_steps) {
            return Err(Error::InvalidConfig(format!(
                "n_epoch_refresh ({}) must be positive and at most max_steps ({})",
                self.n_epoch_refresh, self.sgd.max_steps
            )));
        }
        if let Some(lr) = self.inner_lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidConfig(format!("inner_lr must be non-negative, got {lr}")));
            }
        }
        if self.mode.num_bins < 2 {
            return Err(Error::InvalidConfig("mode.num_bins must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_meta_train: f64,
    pub loss_meta_test: f64,
    /// `(s_i, s_j)`; absent when the episodic loop is disabled.
    pub domains: Option<(String, String)>,
    pub clean_count: usize,
    pub noisy_count: usize,
    pub lr: f64,
}

/// Uniform ordered pair of distinct domain indices.
pub fn select_domain_pair(num_domains: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if num_domains < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two source domains, got {num_domains}"
        )));
    }
    let i = rng.random_range(0..num_domains);
    let j = rng.random_range(0..num_domains - 1);
    Ok((i, if j >= i { j + 1 } else { j }))
}

/// Gradients and value of the meta-train objective.
#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub adapted: ModelState,
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Training state over a fixed set of source domains.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    domains: &'a [DomainDataset],
    num_known: usize,
    state: ModelState,
    pair_rng: Stream,
    batch_rng: Stream,
    crop_rng: Stream,
    cache: Option<(PrototypeTable, Partition)>,
    threads: usize,
}

impl<'a> Trainer<'a> {
    /// `domains` are the source domains with (possibly noisy) labels in `0..num_known`.
    pub fn new(domains: &'a [DomainDataset], num_known: usize, cfg: TrainConfig, threads: usize) -> Result<Self> {
        cfg.validate()?;
        if domains.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two source domains, got {}",
                domains.len()
            )));
        }
        let (height, width) = domains
            .iter()
            .flat_map(|d| d.samples().first())
            .map(|s| s.image.shape())
            .next()
            .ok_or_else(|| Error::Empty("no training samples".into()))?;
        for d in domains {
            if d.is_empty() {
                return Err(Error::Empty(format!("source domain '{}' has no samples", d.name())));
            }
            if let Some(s) = d.samples().iter().find(|s| s.label >= num_known) {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: num_known,
                });
            }
        }
        let seeds = SeedTree::new(cfg.seed);
        let state = ModelState::init(
            cfg.network.model_config(height, width, num_known),
            seeds.seed_for("model-init"),
        )?;
        Ok(Self {
            pair_rng: seeds.stream("domain-pairs"),
            batch_rng: seeds.stream("batches"),
            crop_rng: seeds.stream("crops"),
            cfg,
            domains,
            num_known,
            state,
            cache: None,
            threads: threads.max(1),
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.state.optimizer.step
    }

    pub fn partition(&self) -> Option<&(PrototypeTable, Partition)> {
        self.cache.as_ref()
    }

    /// Recomputes prototypes for every source domain at step 0 and every
    /// `n_epoch_refresh` steps; otherwise keeps the cached result.
    pub fn refresh_partition_if_due(&mut self) -> Result<&(PrototypeTable, Partition)> {
        let step = self.step();
        if self.cache.is_none() || step % self.cfg.n_epoch_refresh == 0 {
            let fresh_needed = self.cache.as_ref().is_none_or(|(t, _)| t.computed_at_step != step);
            if fresh_needed {
                let computed = compute_partition(
                    &self.state,
                    self.domains,
                    self.cfg.ablations.prototype_space,
                    &self.cfg.ball,
                    &self.cfg.mode,
                    step,
                    self.threads,
                )?;
                log::debug!(
                    "step {step}: partition refreshed, {} clean / {} noisy",
                    computed.1.clean_count(),
                    computed.1.noisy_count()
                );
                self.cache = Some(computed);
            }
        }
        Ok(self.cache.as_ref().expect("partition computed above"))
    }

    fn grad_mode(&self) -> GradMode {
        let step = self.step();
        match self.cfg.augment.mode {
            PromptMode::Asynchronous if step % 2 == 1 => GradMode {
                params: false,
                prompt: self.cfg.ablations.use_nca_prompt,
            },
            PromptMode::Asynchronous => GradMode {
                params: true,
                prompt: false,
            },
            _ => GradMode {
                params: true,
                prompt: self.cfg.ablations.use_nca_prompt,
            },
        }
    }

    fn ce(&self, tape: &mut Tape, bound: &BoundModel, images: &[&Image], labels: &[usize]) -> Result<Var> {
        let x = tape.constant(stack_images(images.iter().copied())?);
        let logits = bound.logits(tape, x)?;
        tape.cross_entropy(logits, labels)
    }

    /// Samples `size` indices of `pool` (with their labels) as a batch.
    fn draw(&mut self, pool: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
        sample_batch(pool, self.cfg.sgd.batch_size, &mut self.batch_rng)
    }

    fn clean_pool(&self, partition: &Partition, d: usize) -> Result<Vec<(usize, usize)>> {
        let domain = &self.domains[d];
        let part = partition.domain(domain.name())?;
        if part.clean.is_empty() {
            return Err(Error::Empty(format!(
                "clean set of domain '{}' is empty at step {}; train longer before the first refresh or use another seed",
                domain.name(),
                self.step()
            )));
        }
        Ok(part.clean.iter().map(|&i| (i, domain.samples()[i].label)).collect())
    }

    /// Adds the prompt-augmentation term for a clean batch of domain `d`.
    fn augmented_term(
        &mut self,
        tape: &mut Tape,
        bound: &BoundModel,
        d: usize,
        clean: &[(usize, usize)],
        partner_domain: usize,
        partner_pool: &[(usize, usize)],
    ) -> Result<Var> {
        let refs: Vec<usize> = clean.iter().map(|&(_, l)| l).collect();
        let partners = sample_batch_different_classes(partner_pool, &refs, |p| p.1, &mut self.batch_rng)?;
        let (h, w) = (self.state.config().height, self.state.config().width);
        let mask = random_crop_mask(h, w, &self.cfg.augment, &mut self.crop_rng)?;
        let a: Vec<&Image> = clean.iter().map(|&(i, _)| &self.domains[d].samples()[i].image).collect();
        let b: Vec<&Image> = partners
            .iter()
            .map(|&(i, _)| &self.domains[partner_domain].samples()[i].image)
            .collect();
        let (batch, labels) = augmented_batch_on_tape(tape, &a, &b, bound.prompt, mask, self.num_known)?;
        let logits = bound.logits(tape, batch)?;
        tape.cross_entropy(logits, &labels)
    }

    fn images(&self, d: usize, batch: &[(usize, usize)]) -> Vec<&'a Image> {
        let domain = &self.domains[d];
        batch.iter().map(|&(i, _)| &domain.samples()[i].image).collect()
    }

    /// Meta-train loss on domain `s_i` and one inner step on a copy of the model.
    pub fn meta_train_step(&mut self, pair: (usize, usize)) -> Result<MetaTrainOutcome> {
        let (si, sj) = pair;
        let partition = self.refresh_partition_if_due()?.1.clone();
        let clean_pool = self.clean_pool(&partition, si)?;
        let part = partition.domain(self.domains[si].name())?;
        let noisy_pool: Vec<(usize, usize)> = part
            .noisy
            .iter()
            .zip(&part.corrected)
            .map(|(&i, &fixed)| {
                let given = self.domains[si].samples()[i].label;
                (i, if self.cfg.ablations.use_label_correction { fixed } else { given })
            })
            .collect();

        let mode = self.grad_mode();
        let mut tape = Tape::new();
        let bound = self.state.bind(&mut tape, mode);
        let clean = self.draw(&clean_pool)?;
        let labels: Vec<usize> = clean.iter().map(|&(_, l)| l).collect();
        let mut loss = self.ce(&mut tape, &bound, &self.images(si, &clean), &labels)?;
        if self.cfg.ablations.use_nca_prompt {
            let (pd, ppool) = if self.cfg.augment.mix_cross_domain {
                (sj, self.clean_pool(&partition, sj)?)
            } else {
                (si, clean_pool.clone())
            };
            let aug = self.augmented_term(&mut tape, &bound, si, &clean, pd, &ppool)?;
            loss = tape.add(loss, aug)?;
        }
        if !noisy_pool.is_empty() {
            let noisy = self.draw(&noisy_pool)?;
            let labels: Vec<usize> = noisy.iter().map(|&(_, l)| l).collect();
            let term = self.ce(&mut tape, &bound, &self.images(si, &noisy), &labels)?;
            loss = tape.add(loss, term)?;
        }
        let grads = bound.collect(&tape, &tape.backward(loss)?);
        let inner_lr = self.cfg.inner_lr.unwrap_or_else(|| self.cfg.sgd.lr_at(self.step()));
        let mut adapted = self.state.clone();
        adapted.descend_params(&grads, inner_lr);
        adapted.descend_prompt(&grads, inner_lr);
        Ok(MetaTrainOutcome {
            adapted,
            loss: tape.value(loss).item(),
            grads,
        })
    }

    /// Meta-test loss of the adapted model on clean batches of `s_i` and `s_j`
    /// (`s_i` twice without cross-domain meta-test), with its gradient.
    pub fn meta_test_step(&mut self, adapted: &ModelState, pair: (usize, usize)) -> Result<(f64, ParamGrads)> {
        let (si, sj) = pair;
        let second = if self.cfg.ablations.cross_domain_meta_test { sj } else { si };
        let partition = self.refresh_partition_if_due()?.1.clone();
        let mut tape = Tape::new();
        let bound = adapted.bind(
            &mut tape,
            GradMode {
                params: true,
                prompt: false,
            },
        );
        let mut total: Option<Var> = None;
        for d in [si, second] {
            let pool = self.clean_pool(&partition, d)?;
            let batch = self.draw(&pool)?;
            let labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();
            let term = self.ce(&mut tape, &bound, &self.images(d, &batch), &labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        let total = total.expect("two meta-test terms");
        let grads = bound.collect(&tape, &tape.backward(total)?);
        Ok((tape.value(total).item(), grads))
    }

    /// First-order update of the original parameters with
    /// `∇L_train(original) + ∇L_test(adapted)`; the prompt follows `∇L_train`.
    pub fn outer_update(&mut self, train: &MetaTrainOutcome, test_grads: &ParamGrads) -> Result<()> {
        if !train.grads.is_finite() || !test_grads.is_finite() {
            return Err(Error::NonFinite("meta gradient"));
        }
        let step = self.step();
        let lr = self.cfg.sgd.lr_at(step);
        let mode = self.grad_mode();
        if self.cfg.committed_inner_step {
            self.state.alpha = train.adapted.alpha.clone();
            self.state.beta = train.adapted.beta.clone();
            self.state.prompt = train.adapted.prompt.clone();
        }
        if mode.params {
            let mut combined = train.grads.clone();
            combined.add_assign(test_grads);
            self.state.descend_params(&combined, lr);
        }
        if mode.prompt {
            self.descend_prompt(&train.grads, lr);
        }
        self.state.optimizer.step = step + 1;
        self.state.optimizer.lr = lr;
        Ok(())
    }

    fn descend_prompt(&mut self, grads: &ParamGrads, lr: f64) {
        let signed = if self.cfg.augment.mode == PromptMode::Adversarial { -lr } else { lr };
        self.state.descend_prompt(grads, signed);
    }

    /// One step on pooled source data: given labels plus, when enabled, the augmented term.
    fn erm_step(&mut self) -> Result<StepReport> {
        let step = self.step();
        let lr = self.cfg.sgd.lr_at(step);
        let pool: Vec<(usize, usize, usize)> = self
            .domains
            .iter()
            .enumerate()
            .flat_map(|(d, ds)| ds.samples().iter().enumerate().map(move |(i, s)| (d, i, s.label)))
            .collect();
        let batch = sample_batch(&pool, self.cfg.sgd.batch_size, &mut self.batch_rng)?;
        let mode = self.grad_mode();
        let mut tape = Tape::new();
        let bound = self.state.bind(&mut tape, mode);
        let img = |&(d, i, _): &(usize, usize, usize)| &self.domains[d].samples()[i].image;
        let images: Vec<&Image> = batch.iter().map(img).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.2).collect();
        let mut loss = self.ce(&mut tape, &bound, &images, &labels)?;
        if self.cfg.ablations.use_nca_prompt {
            let partners = sample_batch_different_classes(&pool, &labels, |p| p.2, &mut self.batch_rng)?;
            let (h, w) = (self.state.config().height, self.state.config().width);
            let mask = random_crop_mask(h, w, &self.cfg.augment, &mut self.crop_rng)?;
            let others: Vec<&Image> = partners.iter().map(img).collect();
            let (aug, aug_labels) =
                augmented_batch_on_tape(&mut tape, &images, &others, bound.prompt, mask, self.num_known)?;
            let logits = bound.logits(&mut tape, aug)?;
            let term = tape.cross_entropy(logits, &aug_labels)?;
            loss = tape.add(loss, term)?;
        }
        let grads = bound.collect(&tape, &tape.backward(loss)?);
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        if mode.params {
            self.state.descend_params(&grads, lr);
        }
        if mode.prompt {
            self.descend_prompt(&grads, lr);
        }
        self.state.optimizer.step = step + 1;
        self.state.optimizer.lr = lr;
        Ok(StepReport {
            step,
            loss_meta_train: tape.value(loss).item(),
            loss_meta_test: 0.0,
            domains: None,
            clean_count: pool.len(),
            noisy_count: 0,
            lr,
        })
    }

    /// One full iteration; returns its report.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if !self.cfg.ablations.use_hyb_meta {
            return self.erm_step();
        }
        let step = self.step();
        let pair = select_domain_pair(self.domains.len(), &mut self.pair_rng)?;
        let train = self.meta_train_step(pair)?;
        let (test_loss, test_grads) = self.meta_test_step(&train.adapted, pair)?;
        let lr = self.cfg.sgd.lr_at(step);
        self.outer_update(&train, &test_grads)?;
        let part = &self.cache.as_ref().expect("refreshed during meta-train").1;
        Ok(StepReport {
            step,
            loss_meta_train: train.loss,
            loss_meta_test: test_loss,
            domains: Some((
                self.domains[pair.0].name().to_string(),
                self.domains[pair.1].name().to_string(),
            )),
            clean_count: part.clean_count(),
            noisy_count: part.noisy_count(),
            lr,
        })
    }
}

/// Runs `max_steps` iterations, calling `on_step` after each one.
pub fn run_training_with(
    domains: &[DomainDataset],
    num_known: usize,
    cfg: &TrainConfig,
    threads: usize,
    mut on_step: impl FnMut(&ModelState, &StepReport) -> Result<()>,
) -> Result<(ModelState, Vec<StepReport>)> {
    let mut trainer = Trainer::new(domains, num_known, cfg.clone(), threads)?;
    let mut reports = Vec::with_capacity(cfg.sgd.max_steps as usize);
    for _ in 0..cfg.sgd.max_steps {
        let report = trainer.train_step()?;
        if !(report.loss_meta_train.is_finite() && report.loss_meta_test.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        on_step(trainer.state(), &report)?;
        reports.push(report);
    }
    Ok((trainer.into_state(), reports))
}

pub fn run_training(
    domains: &[DomainDataset],
    num_known: usize,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<(ModelState, Vec<StepReport>)> {
    run_training_with(domains, num_known, cfg, threads, |_, _| Ok(()))
}

#[derive(Serialize)]
struct LogRow<'a> {
    step: u64,
    loss_meta_train: f64,
    loss_meta_test: f64,
    domain_i: &'a str,
    domain_j: &'a str,
    clean_count: usize,
    noisy_count: usize,
    lr: f64,
}

/// Streams step reports to `training_log.csv`.
pub struct TrainingLog {
    writer: csv::Writer<std::fs::File>,
}

impl TrainingLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn append(&mut self, r: &StepReport) -> Result<()> {
        let (di, dj) = r.domains.as_ref().map_or(("", ""), |(a, b)| (a.as_str(), b.as_str()));
        self.writer.serialize(LogRow {
            step: r.step,
            loss_meta_train: r.loss_meta_train,
            loss_meta_test: r.loss_meta_test,
            domain_i: di,
            domain_j: dj,
            clean_count: r.clean_count,
            noisy_count: r.noisy_count,
            lr: r.lr,
        })?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Io {
            path: "training_log.csv".into(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic;
    use crate::rng::stream_from_seed;

    fn source(num_classes: usize, per_class: usize) -> Vec<DomainDataset> {
        let corpus = generate_synthetic(3, num_classes, per_class, 4, (8, 8)).unwrap();
        corpus.domains
    }

    fn small_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            n_epoch_refresh: steps.max(1),
            sgd: SgdConfig {
                lr: 0.01,
                decay_factor: 0.1,
                decay_at_step: steps.max(2) - 1,
                max_steps: steps,
                batch_size: 4,
            },
            network: NetworkConfig {
                conv1_channels: 2,
                conv2_channels: 3,
                embed_dim: 4,
            },
            ball: BallConfig::new(1.0).unwrap(),
            ..TrainConfig::default()
        }
    }

    fn zero_head(state: &mut ModelState) {
        for t in &mut state.beta {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn domain_pairs_are_uniform_and_distinct() {
        let mut rng = stream_from_seed(2);
        let n = 100_000;
        let mut counts = [[0usize; 3]; 3];
        for _ in 0..n {
            let (i, j) = select_domain_pair(3, &mut rng).unwrap();
            assert_ne!(i, j);
            counts[i][j] += 1;
        }
        let p: f64 = 1.0 / 6.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
                }
            }
        }
        for _ in 0..20 {
            let pair = select_domain_pair(2, &mut rng).unwrap();
            assert!(pair == (0, 1) || pair == (1, 0));
        }
        assert!(select_domain_pair(1, &mut rng).is_err());
        let a: Vec<_> = (0..10).map(|_| select_domain_pair(4, &mut stream_from_seed(9)).unwrap()).collect();
        let b: Vec<_> = (0..10).map(|_| select_domain_pair(4, &mut stream_from_seed(9)).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn refresh_happens_on_schedule_only() {
        let data = source(4, 4);
        let mut cfg = small_cfg(6);
        cfg.n_epoch_refresh = 3;
        let mut t = Trainer::new(&data, 4, cfg, 1).unwrap();
        let mut seen = Vec::new();
        for _ in 0..6 {
            t.train_step().unwrap();
            seen.push(t.partition().unwrap().0.computed_at_step);
        }
        assert_eq!(seen, vec![0, 0, 0, 3, 3, 3]);
    }

    #[test]
    fn uniform_logit_losses() {
        // Eight outputs: seven known classes and the extra class.
        let data = source(7, 2);
        let mut t = Trainer::new(&data, 7, small_cfg(2), 1).unwrap();
        zero_head(&mut t.state);
        let train = t.meta_train_step((0, 1)).unwrap();
        let part = &t.partition().unwrap().1;
        let terms = if part.domain("d0").unwrap().noisy.is_empty() { 2.0 } else { 3.0 };
        assert!((train.loss - terms * 8f64.ln()).abs() < 1e-12, "{}", train.loss);
        let mut adapted = t.state().clone();
        zero_head(&mut adapted);
        let (test_loss, _) = t.meta_test_step(&adapted, (0, 1)).unwrap();
        assert!((test_loss - 2.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_inner_lr_leaves_the_copy_unchanged() {
        let data = source(4, 3);
        let mut cfg = small_cfg(2);
        cfg.inner_lr = Some(0.0);
        let mut t = Trainer::new(&data, 4, cfg, 1).unwrap();
        let before = t.state().clone();
        let out = t.meta_train_step((1, 2)).unwrap();
        assert_eq!(out.adapted, before);
        assert_eq!(t.state(), &before);
    }

    #[test]
    fn zero_lr_changes_nothing_but_the_step() {
        let data = source(4, 3);
        let mut cfg = small_cfg(3);
        cfg.sgd.lr = 0.0;
        let (state, reports) = run_training(&data, 4, &cfg, 1).unwrap();
        let init = Trainer::new(&data, 4, cfg.clone(), 1).unwrap().into_state();
        assert_eq!(state.alpha, init.alpha);
        assert_eq!(state.beta, init.beta);
        assert_eq!(state.prompt, init.prompt);
        assert_eq!(state.optimizer.step, 3);
        assert_eq!(reports.len(), 3);
    }

    #[test]
    fn zero_test_gradient_reduces_to_the_train_step() {
        let data = source(4, 3);
        let mut t = Trainer::new(&data, 4, small_cfg(2), 1).unwrap();
        let before = t.state().clone();
        let train = t.meta_train_step((0, 2)).unwrap();
        let zero = ParamGrads::zeros_like(&before);
        t.outer_update(&train, &zero).unwrap();
        let mut expected = before.clone();
        expected.descend_params(&train.grads, 0.01);
        expected.descend_prompt(&train.grads, 0.01);
        assert_eq!(t.state().alpha, expected.alpha);
        assert_eq!(t.state().prompt, expected.prompt);
    }

    #[test]
    fn ablations_shape_the_losses() {
        let data = source(4, 3);
        let mut cfg = small_cfg(2);
        cfg.ablations.use_nca_prompt = false;
        let mut t = Trainer::new(&data, 4, cfg, 1).unwrap();
        zero_head(&mut t.state);
        let out = t.meta_train_step((0, 1)).unwrap();
        let noisy = !t.partition().unwrap().1.domain("d0").unwrap().noisy.is_empty();
        let terms = if noisy { 2.0 } else { 1.0 };
        assert!((out.loss - terms * 5f64.ln()).abs() < 1e-12);
        assert!(out.grads.prompt.iter().all(|&g| g == 0.0));

        let mut erm = small_cfg(2);
        erm.ablations = Ablations::erm();
        let (_, reports) = run_training(&data, 4, &erm, 1).unwrap();
        assert!(reports.iter().all(|r| r.domains.is_none() && r.loss_meta_test == 0.0));
    }

    #[test]
    fn same_domain_meta_test_uses_source_domain_twice() {
        let data = source(4, 3);
        let mut cfg = small_cfg(2);
        cfg.ablations.cross_domain_meta_test = false;
        let mut t = Trainer::new(&data, 4, cfg.clone(), 1).unwrap();
        let mut u = Trainer::new(&data, 4, cfg, 1).unwrap();
        let adapted = t.state().clone();
        // With s_j ignored, the partner domain cannot influence the result.
        assert_eq!(
            t.meta_test_step(&adapted, (0, 1)).unwrap().0,
            u.meta_test_step(&adapted, (0, 2)).unwrap().0
        );
    }

    #[test]
    fn training_is_deterministic_and_reports_every_step() {
        let data = source(4, 4);
        let cfg = small_cfg(5);
        let (a, ra) = run_training(&data, 4, &cfg, 1).unwrap();
        let (b, rb) = run_training(&data, 4, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 5);
        assert!(ra.iter().all(|r| r.loss_meta_train >= 0.0 && r.loss_meta_test >= 0.0));
        let mut none = cfg.clone();
        none.sgd.max_steps = 0;
        none.n_epoch_refresh = 1;
        none.sgd.decay_at_step = 1;
        let (init, reports) = run_training(&data, 4, &none, 1).unwrap();
        assert!(reports.is_empty());
        assert_eq!(init, Trainer::new(&data, 4, none, 1).unwrap().into_state());
    }

    #[test]
    fn prompt_modes_run() {
        let data = source(4, 3);
        for mode in [PromptMode::Asynchronous, PromptMode::Adversarial, PromptMode::FixedCrop] {
            let mut cfg = small_cfg(3);
            cfg.augment.mode = mode;
            cfg.committed_inner_step = mode == PromptMode::Adversarial;
            let (state, _) = run_training(&data, 4, &cfg, 1).unwrap();
            assert!(state.prompt.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut cfg = small_cfg(2);
        cfg.augment.mix_cross_domain = true;
        cfg.ablations.prototype_space = PrototypeSpace::Euclidean;
        run_training(&data, 4, &cfg, 1).unwrap();
    }

    #[test]
    fn asynchronous_mode_alternates_frozen_parts() {
        let data = source(4, 3);
        let mut cfg = small_cfg(2);
        cfg.augment.mode = PromptMode::Asynchronous;
        let mut t = Trainer::new(&data, 4, cfg, 1).unwrap();
        let s0 = t.state().clone();
        t.train_step().unwrap();
        let s1 = t.state().clone();
        assert_eq!(s1.prompt, s0.prompt);
        assert_ne!(s1.alpha, s0.alpha);
        t.train_step().unwrap();
        assert_eq!(t.state().alpha, s1.alpha);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = source(4, 2);
        let mut cfg = small_cfg(4);
        cfg.n_epoch_refresh = 10;
        assert!(Trainer::new(&data, 4, cfg, 1).is_err());
        assert!(Trainer::new(&data[..1], 4, small_cfg(4), 1).is_err());
        assert!(Trainer::new(&data, 3, small_cfg(4), 1).is_err());
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_keys() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"n_epoch": 5}"#).is_err());
        assert_eq!(cfg.sgd.lr, 1e-3);
        assert_eq!(cfg.sgd.batch_size, 16);
        assert_eq!(cfg.sgd.max_steps, 10_000);
        assert_eq!(cfg.ball.gamma(), 2e-5);
        assert_eq!(cfg.n_epoch_refresh, 500);
    }
}
