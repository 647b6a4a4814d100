//! Desk-scale backbone, classifier head, loss, and SGD.
//!
//! Backbone: two blocks of (3×3 conv → ReLU → 2×2 max-pool), global average
//! pooling, then a dense layer to the embedding. The head maps embeddings to
//! `C + 1` logits; the last one is the augmentation class.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::datasets::{stack_images, Image};
use crate::error::{Error, Result};
use crate::rng::stream_from_seed;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"HYPM1";

pub const ALPHA_NAMES: [&str; 6] = ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "embed.w", "embed.b"];
pub const BETA_NAMES: [&str; 2] = ["head.w", "head.b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub embed_dim: usize,
    /// Number of known classes `C`; the head has `C + 1` outputs.
    pub num_known: usize,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize, num_known: usize) -> Self {
        Self {
            height,
            width,
            conv1_channels: 8,
            conv2_channels: 16,
            embed_dim: 64,
            num_known,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.num_known + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::InvalidConfig(format!(
                "input must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.num_known == 0 {
            return Err(Error::InvalidConfig("need at least one known class".into()));
        }
        Ok(())
    }

    fn alpha_shapes(&self) -> [Vec<usize>; 6] {
        let (c1, c2, n) = (self.conv1_channels, self.conv2_channels, self.embed_dim);
        [
            vec![3, 3, 3, c1],
            vec![c1],
            vec![3, 3, c1, c2],
            vec![c2],
            vec![c2, n],
            vec![n],
        ]
    }

    fn beta_shapes(&self) -> [Vec<usize>; 2] {
        [vec![self.embed_dim, self.num_outputs()], vec![self.num_outputs()]]
    }

    pub fn prompt_shape(&self) -> Vec<usize> {
        vec![self.height, self.width, 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_at_step: u64,
    pub max_steps: u64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_factor: 0.1,
            decay_at_step: 8000,
            max_steps: 10_000,
            batch_size: 16,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay_factor must lie in (0,1), got {}",
                self.decay_factor
            )));
        }
        if self.decay_at_step == 0 || (self.max_steps > 0 && self.decay_at_step >= self.max_steps) {
            return Err(Error::InvalidConfig(format!(
                "decay_at_step ({}) must be positive and below max_steps ({})",
                self.decay_at_step, self.max_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.decay_at_step {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
}

/// Parameters of the backbone (`alpha`), the head (`beta`), and the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub prompt: Tensor,
    pub optimizer: OptimizerState,
}

/// Which parts of a [`ModelState`] should receive gradients when bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMode {
    pub params: bool,
    pub prompt: bool,
}

impl GradMode {
    pub const NONE: GradMode = GradMode {
        params: false,
        prompt: false,
    };
    pub const ALL: GradMode = GradMode {
        params: true,
        prompt: true,
    };
}

/// Tape handles for every tensor of a [`ModelState`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
    pub prompt: Var,
}

/// One gradient buffer per parameter tensor, laid out like [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub prompt: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            alpha: state.alpha.iter().map(|t| vec![0.0; t.len()]).collect(),
            beta: state.beta.iter().map(|t| vec![0.0; t.len()]).collect(),
            prompt: vec![0.0; state.prompt.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.params_mut().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.prompt.iter_mut().zip(&other.prompt).for_each(|(x, y)| *x += y);
    }

    pub fn params(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.alpha.iter().chain(&self.beta)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.alpha.iter_mut().chain(self.beta.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.params().chain(std::iter::once(&self.prompt)).flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.params()
            .chain(std::iter::once(&self.prompt))
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl BoundModel {
    /// `x: [B,H,W,3]` → embeddings `[B,n]`.
    pub fn backbone(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = &self.alpha;
        let h = tape.conv3x3(x, a[0], a[1])?;
        let h = tape.relu(h);
        let h = tape.max_pool2(h)?;
        let h = tape.conv3x3(h, a[2], a[3])?;
        let h = tape.relu(h);
        let h = tape.max_pool2(h)?;
        let h = tape.global_avg_pool(h)?;
        tape.linear(h, a[4], a[5])
    }

    /// Embeddings `[B,n]` → logits `[B,C+1]`.
    pub fn head(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        tape.linear(z, self.beta[0], self.beta[1])
    }

    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.backbone(tape, x)?;
        self.head(tape, z)
    }

    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            alpha: self.alpha.iter().map(|&v| grads.wrt(tape, v)).collect(),
            beta: self.beta.iter().map(|&v| grads.wrt(tape, v)).collect(),
            prompt: grads.wrt(tape, self.prompt),
        }
    }
}

fn uniform_tensor(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl ModelState {
    /// Fan-in uniform weights, zero biases, mid-gray prompt.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_from_seed(seed);
        let mut init_layer = |shape: &Vec<usize>, is_bias: bool| {
            if is_bias {
                Tensor::zeros(shape.clone())
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                uniform_tensor(shape.clone(), 1.0 / (fan_in as f64).sqrt(), &mut rng)
            }
        };
        let alpha = config
            .alpha_shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| init_layer(s, i % 2 == 1))
            .collect();
        let beta = config
            .beta_shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| init_layer(s, i % 2 == 1))
            .collect();
        Ok(Self {
            config,
            alpha,
            beta,
            prompt: Tensor::filled(config.prompt_shape(), 0.5),
            optimizer: OptimizerState { step: 0, lr: 0.0 },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.alpha.iter().chain(&self.beta).map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape, mode: GradMode) -> BoundModel {
        let mut leaf = |t: &Tensor, grad: bool| tape.leaf(t.clone().with_grad(grad));
        let alpha = self.alpha.iter().map(|t| leaf(t, mode.params)).collect();
        let beta = self.beta.iter().map(|t| leaf(t, mode.params)).collect();
        let prompt = leaf(&self.prompt, mode.prompt);
        BoundModel { alpha, beta, prompt }
    }

    pub fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.height || s[2] != c.width || s[3] != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(0), c.height, c.width, 3],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Embeddings of a batch without recording gradients.
    pub fn backbone_forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, GradMode::NONE);
        let x = tape.constant(batch.clone());
        let z = bound.backbone(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn head_forward(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.config.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.embed_dim,
                actual: s.get(1).copied().unwrap_or(0),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, GradMode::NONE);
        let zv = tape.constant(z.clone());
        let logits = bound.head(&mut tape, zv)?;
        Ok(tape.value(logits).clone())
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let z = self.backbone_forward(batch)?;
        self.head_forward(&z)
    }

    /// `θ ← θ − lr·g` on the network parameters only.
    pub(crate) fn descend_params(&mut self, grads: &ParamGrads, lr: f64) {
        let tensors = self.alpha.iter_mut().chain(self.beta.iter_mut());
        for (t, g) in tensors.zip(grads.params()) {
            t.data_mut().iter_mut().zip(g).for_each(|(p, gv)| *p -= lr * gv);
        }
    }

    /// `p ← clamp(p − lr·g, 0, 1)`. A negative `lr` ascends.
    pub(crate) fn descend_prompt(&mut self, grads: &ParamGrads, lr: f64) {
        for (p, gv) in self.prompt.data_mut().iter_mut().zip(&grads.prompt) {
            *p = (*p - lr * gv).clamp(0.0, 1.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut BufReader::new(file), path)
    }

    /// Magic, optimizer state, then every tensor (shape + little-endian `f64`s)
    /// in declaration order: backbone, head, prompt.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.optimizer.step.to_le_bytes())?;
        w.write_all(&self.optimizer.lr.to_le_bytes())?;
        let tensors: Vec<&Tensor> = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain(std::iter::once(&self.prompt))
            .collect();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a HYPM1 checkpoint"));
        }
        let step = read_u64(r).map_err(io)?;
        let lr = f64::from_le_bytes(read_array(r).map_err(io)?);
        let count = u32::from_le_bytes(read_array(r).map_err(io)?) as usize;
        if count != ALPHA_NAMES.len() + BETA_NAMES.len() + 1 {
            return Err(bad(&format!("expected 9 tensors, found {count}")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = u32::from_le_bytes(read_array(r).map_err(io)?) as usize;
            if ndim > 8 {
                return Err(bad("tensor rank too large"));
            }
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let len: usize = shape.iter().product();
            if len > 1 << 28 {
                return Err(bad("tensor too large"));
            }
            let data = (0..len)
                .map(|_| read_array(r).map(f64::from_le_bytes))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            tensors.push(Tensor::new(shape, data)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        let prompt = tensors.pop().expect("count checked");
        let beta = tensors.split_off(ALPHA_NAMES.len());
        let alpha = tensors;
        let c1 = alpha[0].shape().get(3).copied().unwrap_or(0);
        let c2 = alpha[2].shape().get(3).copied().unwrap_or(0);
        let n = alpha[4].shape().get(1).copied().unwrap_or(0);
        let outputs = beta[0].shape().get(1).copied().unwrap_or(0);
        let ps = prompt.shape();
        if ps.len() != 3 || outputs < 2 {
            return Err(bad("malformed prompt or head shape"));
        }
        let config = ModelConfig {
            height: ps[0],
            width: ps[1],
            conv1_channels: c1,
            conv2_channels: c2,
            embed_dim: n,
            num_known: outputs - 1,
        };
        let shapes_ok = config
            .alpha_shapes()
            .iter()
            .zip(&alpha)
            .chain(config.beta_shapes().iter().zip(&beta))
            .all(|(s, t)| s.as_slice() == t.shape())
            && prompt.shape() == config.prompt_shape().as_slice();
        if !shapes_ok {
            return Err(bad("tensor shapes do not describe a consistent model"));
        }
        Ok(Self {
            config,
            alpha,
            beta,
            prompt,
            optimizer: OptimizerState { step, lr },
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// One plain SGD step on parameters and prompt at the scheduled learning rate.
/// A non-finite gradient aborts the step and leaves the state untouched.
pub fn sgd_step(state: &mut ModelState, grads: &ParamGrads, cfg: &SgdConfig) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let lr = cfg.lr_at(state.optimizer.step);
    state.descend_params(grads, lr);
    state.descend_prompt(grads, lr);
    state.optimizer.step += 1;
    state.optimizer.lr = lr;
    Ok(())
}

const KINK_TOLERANCE: f64 = 1e-6;

/// Largest relative disagreement between reverse-mode gradients and central
/// differences of the scalar `loss` over all `params`.
///
/// A ReLU or max-pool kink lying within `h` of the evaluation point makes the
/// two one-sided slopes disagree. For such coordinates the closer one-sided
/// slope, which comes from the kink-free side, is accepted as well.
pub fn grad_check_fn(
    params: &[Tensor],
    loss: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.constant(t.clone())).collect();
        let root = loss(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (i, t) in params.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        for j in 0..t.len() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let mut err = relative_error(analytic[j], (up - down) / (2.0 * h));
            if err > KINK_TOLERANCE {
                let f0 = eval(&probe)?;
                let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
                if relative_error(fwd, bwd) > KINK_TOLERANCE {
                    err = err.min(relative_error(analytic[j], fwd)).min(relative_error(analytic[j], bwd));
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Rows per inference chunk; per-sample results do not depend on this.
const INFER_CHUNK: usize = 32;

/// Applies `forward` to consecutive chunks of `images` and concatenates the
/// row-major outputs. Each sample's output is computed independently of its
/// chunk-mates, so results are bitwise identical for any `threads`.
pub fn map_chunks(
    images: &[&Image],
    threads: usize,
    forward: impl Fn(&Tensor) -> Result<Tensor> + Sync,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[&Image]> = images.chunks(INFER_CHUNK).collect();
    let run = |chunk: &[&Image]| -> Result<Vec<Vec<f64>>> {
        let out = forward(&stack_images(chunk.iter().copied())?)?;
        let width = out.shape()[1];
        Ok(out.data().chunks(width).map(<[f64]>::to_vec).collect())
    };
    let threads = threads.max(1).min(chunks.len().max(1));
    let results: Vec<Result<Vec<Vec<f64>>>> = if threads == 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let per_worker = chunks.len().div_ceil(threads);
            for (worker_chunks, worker_slots) in chunks.chunks(per_worker).zip(slots.chunks_mut(per_worker)) {
                let run = &run;
                scope.spawn(move || {
                    for (c, slot) in worker_chunks.iter().zip(worker_slots) {
                        *slot = Some(run(c));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk was processed")).collect()
    };
    let mut rows = Vec::with_capacity(images.len());
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

impl ModelState {
    /// Backbone embeddings, one row per image.
    pub fn embed_images(&self, images: &[&Image], threads: usize) -> Result<Vec<Vec<f64>>> {
        map_chunks(images, threads, |batch| self.backbone_forward(batch))
    }

    /// All `C + 1` logits, one row per image.
    pub fn logits_images(&self, images: &[&Image], threads: usize) -> Result<Vec<Vec<f64>>> {
        map_chunks(images, threads, |batch| self.logits(batch))
    }
}

/// `|a − b| / max(|a|, |b|, 1e-6)`; the floor keeps vanishing gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Gradient check of backbone + head + cross entropy on one labeled batch.
pub fn grad_check(state: &ModelState, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    state.check_batch(batch)?;
    let params: Vec<Tensor> = state.alpha.iter().chain(&state.beta).cloned().collect();
    let n_alpha = state.alpha.len();
    grad_check_fn(&params, |tape, vars| {
        let bound = BoundModel {
            alpha: vars[..n_alpha].to_vec(),
            beta: vars[n_alpha..].to_vec(),
            prompt: tape.constant(Tensor::zeros(vec![1])),
        };
        let x = tape.constant(batch.clone());
        let logits = bound.logits(tape, x)?;
        tape.cross_entropy(logits, labels)
    })
}
