//! A small reverse-mode differentiation engine.
//!
//! Values live on a [`Tape`]; every operation appends a node recording its
//! inputs, and [`Tape::backward`] walks the nodes in reverse creation order.
//! Layer-sized operations (convolution, pooling, dense layers, softmax cross
//! entropy) are single nodes; elementwise arithmetic is available for small
//! vector computations such as ball distances.
//!
//! Image batches are laid out `[batch, height, width, channels]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Axis-aligned window inside an `H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 { x: Var, w: Var, b: Var },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    PasteWindow { prompt: Var, window: Window },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    Broadcast(Var),
    Sqrt(Var),
    Tanh(Var),
    Atanh(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, or zeros of the right length when nothing flowed into it.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(var).len()],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    /// Adds an input. It participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad;
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `x: [B,H,W,Ci]`, `w: [3,3,Ci,Co]`, `b: [Co]` → `[B,H,W,Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != xs[3] {
            return Err(Error::ShapeMismatch {
                expected: vec![3, 3, *xs.get(3).unwrap_or(&0), *ws.get(3).unwrap_or(&0)],
                actual: ws,
            });
        }
        let (batch, height, width, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[3];
        if self.shape(b) != [co] {
            return Err(Error::ShapeMismatch {
                expected: vec![co],
                actual: self.shape(b).to_vec(),
            });
        }
        let input = self.value(x).data();
        let weight = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; batch * height * width * co];
        for n in 0..batch {
            for y in 0..height {
                for xx in 0..width {
                    let o = &mut out[((n * height + y) * width + xx) * co..][..co];
                    o.copy_from_slice(bias);
                    for ky in 0..3 {
                        let Some(iy) = (y + ky).checked_sub(1).filter(|&iy| iy < height) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) = (xx + kx).checked_sub(1).filter(|&ix| ix < width) else {
                                continue;
                            };
                            let inp = &input[((n * height + iy) * width + ix) * ci..][..ci];
                            let wk = &weight[(ky * 3 + kx) * ci * co..][..ci * co];
                            for (c, &v) in inp.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                for (acc, &wv) in o.iter_mut().zip(&wk[c * co..][..co]) {
                                    *acc += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, height, width, co], out)?;
        Ok(self.push(value, Op::Conv3x3 { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x);
        let data = value.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = value.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor { shape, data, requires_grad: false }, Op::Relu(x), needs)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] < 2 || xs[2] < 2 {
            return Err(Error::InvalidArgument(format!("max_pool2 needs [B,H>=2,W>=2,C], got {xs:?}")));
        }
        let (batch, height, width, ch) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (height / 2, width / 2);
        let input = self.value(x).data();
        let mut out = vec![0.0; batch * oh * ow * ch];
        let mut argmax = vec![0usize; out.len()];
        for n in 0..batch {
            for y in 0..oh {
                for xx in 0..ow {
                    for c in 0..ch {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((n * height + 2 * y + dy) * width + 2 * xx + dx) * ch + c;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                        let o = ((n * oh + y) * ow + xx) * ch + c;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![batch, oh, ow, ch], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    /// `[B,H,W,C]` → `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidArgument(format!("global_avg_pool needs [B,H,W,C], got {xs:?}")));
        }
        let (batch, area, ch) = (xs[0], xs[1] * xs[2], xs[3]);
        let input = self.value(x).data();
        let mut out = vec![0.0; batch * ch];
        for n in 0..batch {
            let o = &mut out[n * ch..][..ch];
            for p in 0..area {
                for (acc, &v) in o.iter_mut().zip(&input[(n * area + p) * ch..][..ch]) {
                    *acc += v;
                }
            }
            let inv = 1.0 / area as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![batch, ch], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), needs))
    }

    /// Dense layer: `x: [B,In]`, `w: [In,Out]`, `b: [Out]` → `[B,Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::InvalidArgument(format!("linear needs 2-D operands, got {xs:?} and {ws:?}")));
        }
        if ws[0] != xs[1] {
            return Err(Error::DimensionMismatch {
                expected: ws[0],
                actual: xs[1],
            });
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        if self.shape(b) != [fan_out] {
            return Err(Error::ShapeMismatch {
                expected: vec![fan_out],
                actual: self.shape(b).to_vec(),
            });
        }
        let input = self.value(x).data();
        let weight = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; batch * fan_out];
        for n in 0..batch {
            let o = &mut out[n * fan_out..][..fan_out];
            o.copy_from_slice(bias);
            for (i, &v) in input[n * fan_in..][..fan_in].iter().enumerate() {
                for (acc, &wv) in o.iter_mut().zip(&weight[i * fan_out..][..fan_out]) {
                    *acc += v * wv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Mean softmax cross entropy of `logits: [B,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy needs [B,K] logits with B={} labels, got {ls:?}",
                labels.len()
            )));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if batch == 0 {
            return Err(Error::Empty("cross_entropy batch".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for n in 0..batch {
            let row = &data[n * classes..][..classes];
            let p = &mut probs[n * classes..][..classes];
            let lse = log_softmax_into(row, p);
            loss += lse - row[labels[n]];
        }
        loss /= batch as f64;
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Copies `base: [B,H,W,C]` and overwrites `window` in every image with the
    /// same window of `prompt: [H,W,C]`. Gradients flow to the prompt only.
    pub fn paste_window(&mut self, base: Tensor, prompt: Var, window: Window) -> Result<Var> {
        let bs = base.shape().to_vec();
        let ps = self.shape(prompt).to_vec();
        if bs.len() != 4 || ps != bs[1..] {
            return Err(Error::ShapeMismatch {
                expected: bs.get(1..).map(<[usize]>::to_vec).unwrap_or_default(),
                actual: ps,
            });
        }
        let (height, width, ch) = (bs[1], bs[2], bs[3]);
        check_window(window, height, width)?;
        let mut out = base.into_data();
        let p = self.value(prompt).data();
        for n in 0..bs[0] {
            for y in window.top..window.top + window.height {
                let row = (y * width + window.left) * ch;
                let len = window.width * ch;
                out[n * height * width * ch + row..][..len].copy_from_slice(&p[row..][..len]);
            }
        }
        let needs = self.needs(prompt);
        let value = Tensor::new(bs, out)?;
        Ok(self.push(value, Op::PasteWindow { prompt, window }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, op, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor { shape, data, requires_grad: false }, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn atanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::atanh, Op::Atanh(a))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    /// Repeats a one-element tensor `len` times.
    pub fn broadcast(&mut self, a: Var, len: usize) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::InvalidArgument("broadcast needs a one-element tensor".into()));
        }
        let v = self.value(a).item();
        let needs = self.needs(a);
        Ok(self.push(Tensor::filled(vec![len], v), Op::Broadcast(a), needs))
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(var) {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { x, w, b } => self.conv3x3_backward(*x, *w, *b, g, grads),
            Op::Relu(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gv), &o) in dx.iter_mut().zip(g).zip(out) {
                        if o > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |dx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let (area, ch) = (xs[1] * xs[2], xs[3]);
                let inv = 1.0 / area as f64;
                self.accumulate(grads, *x, |dx| {
                    for (n, gn) in g.chunks_exact(ch).enumerate() {
                        for p in 0..area {
                            for (d, &gv) in dx[(n * area + p) * ch..][..ch].iter_mut().zip(gn) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fan_in) = (xs[0], xs[1]);
                let fan_out = self.shape(*w)[1];
                let input = self.value(*x).data();
                let weight = self.value(*w).data();
                self.accumulate(grads, *b, |db| {
                    for gn in g.chunks_exact(fan_out) {
                        db.iter_mut().zip(gn).for_each(|(d, &gv)| *d += gv);
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for n in 0..batch {
                        let gn = &g[n * fan_out..][..fan_out];
                        for (i, &v) in input[n * fan_in..][..fan_in].iter().enumerate() {
                            for (d, &gv) in dw[i * fan_out..][..fan_out].iter_mut().zip(gn) {
                                *d += v * gv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for n in 0..batch {
                        let gn = &g[n * fan_out..][..fan_out];
                        for i in 0..fan_in {
                            let wrow = &weight[i * fan_out..][..fan_out];
                            dx[n * fan_in + i] += wrow.iter().zip(gn).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                self.accumulate(grads, *logits, |dl| {
                    for (n, &label) in labels.iter().enumerate() {
                        let row = &mut dl[n * classes..][..classes];
                        for (k, (d, &p)) in row.iter_mut().zip(&probs[n * classes..][..classes]).enumerate() {
                            let target = if k == label { 1.0 } else { 0.0 };
                            *d += scale * (p - target);
                        }
                    }
                });
            }
            Op::PasteWindow { prompt, window } => {
                let s = node.value.shape();
                let (batch, height, width, ch) = (s[0], s[1], s[2], s[3]);
                self.accumulate(grads, *prompt, |dp| {
                    for n in 0..batch {
                        for y in window.top..window.top + window.height {
                            let row = (y * width + window.left) * ch;
                            let len = window.width * ch;
                            let src = &g[n * height * width * ch + row..][..len];
                            dp[row..][..len].iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv / y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (((d, &gv), &x), &y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gv * x / (y * y);
                    }
                });
            }
            Op::Neg(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * factor));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Sum(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Broadcast(a) => self.accumulate(grads, *a, |d| d[0] += g.iter().sum::<f64>()),
            Op::Sqrt(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &s) in d.iter_mut().zip(g).zip(out) {
                        *d += gv * 0.5 / s;
                    }
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &t) in d.iter_mut().zip(g).zip(out) {
                        *d += gv * (1.0 - t * t);
                    }
                });
            }
            Op::Atanh(a) => {
                let input = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(input) {
                        *d += gv / (1.0 - x * x);
                    }
                });
            }
        }
    }

    fn conv3x3_backward(&self, x: Var, w: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let (batch, height, width, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let co = self.shape(w)[3];
        let input = self.value(x).data();
        let weight = self.value(w).data();
        self.accumulate(grads, b, |db| {
            for go in g.chunks_exact(co) {
                db.iter_mut().zip(go).for_each(|(d, &gv)| *d += gv);
            }
        });
        let want_w = self.needs(w);
        let want_x = self.needs(x);
        let mut dw = want_w.then(|| vec![0.0; weight.len()]);
        let mut dx = want_x.then(|| vec![0.0; input.len()]);
        for n in 0..batch {
            for y in 0..height {
                for xx in 0..width {
                    let go = &g[((n * height + y) * width + xx) * co..][..co];
                    for ky in 0..3 {
                        let Some(iy) = (y + ky).checked_sub(1).filter(|&iy| iy < height) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(ix) = (xx + kx).checked_sub(1).filter(|&ix| ix < width) else {
                                continue;
                            };
                            let base = ((n * height + iy) * width + ix) * ci;
                            let koff = (ky * 3 + kx) * ci * co;
                            if let Some(dw) = dw.as_mut() {
                                for (c, &v) in input[base..][..ci].iter().enumerate() {
                                    if v == 0.0 {
                                        continue;
                                    }
                                    for (d, &gv) in dw[koff + c * co..][..co].iter_mut().zip(go) {
                                        *d += v * gv;
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                for c in 0..ci {
                                    let wrow = &weight[koff + c * co..][..co];
                                    dx[base + c] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, |d| add_into(d, &dw));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, |d| add_into(d, &dx));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn check_window(window: Window, height: usize, width: usize) -> Result<()> {
    if window.height == 0
        || window.width == 0
        || window.top + window.height > height
        || window.left + window.width > width
    {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} does not fit inside {height}x{width}"
        )));
    }
    Ok(())
}

/// Writes `softmax(row)` into `probs` and returns `logsumexp(row)`.
pub fn log_softmax_into(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, &v) in probs.iter_mut().zip(row) {
        *p = (v - max).exp();
        total += *p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    max + total.ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut probs = vec![0.0; row.len()];
    log_softmax_into(row, &mut probs);
    probs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
        let root = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(root).unwrap();
        let eval = |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &vars).unwrap();
            tape.value(root).item()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(&tape, vars[i]);
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = Tensor::new(vec![2, 4, 5, 2], pseudo(80, 1)).unwrap();
        let w = Tensor::new(vec![3, 3, 2, 3], pseudo(54, 2)).unwrap();
        let b = Tensor::vector(pseudo(3, 3));
        let err = fd_check(&[x, w, b], |t, v| {
            let y = t.conv3x3(v[0], v[1], v[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
        assert!(err < 1e-6, "conv rel err {err}");
    }

    #[test]
    fn pool_and_dense_gradients_match_finite_differences() {
        let x = Tensor::new(vec![2, 4, 4, 3], pseudo(96, 4)).unwrap();
        let w = Tensor::new(vec![3, 5], pseudo(15, 5)).unwrap();
        let b = Tensor::vector(pseudo(5, 6));
        let err = fd_check(&[x, w, b], |t, v| {
            let p = t.max_pool2(v[0])?;
            let r = t.relu(p);
            let g = t.global_avg_pool(r)?;
            let l = t.linear(g, v[1], v[2])?;
            t.cross_entropy(l, &[1, 4])
        });
        assert!(err < 1e-6, "pool/dense rel err {err}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let a = Tensor::vector(vec![0.3, -0.2, 0.1]);
        let b = Tensor::vector(vec![0.5, 0.4, -0.6]);
        let err = fd_check(&[a, b], |t, v| {
            let m = t.mul(v[0], v[1])?;
            let d = t.div(m, v[1])?;
            let s = t.sub(d, v[1])?;
            let th = t.tanh(s);
            let n = t.neg(th);
            let sc = t.scale(n, 0.3);
            let at = t.atanh(sc);
            let sq = t.dot(at, at)?;
            let c = t.add_const(sq, 1.0);
            let r = t.sqrt(c);
            let bc = t.broadcast(r, 3)?;
            let out = t.add(bc, v[0])?;
            Ok(t.sum(out))
        });
        assert!(err < 1e-6, "elementwise rel err {err}");
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 4]));
        let loss = tape.cross_entropy(logits, &[0, 2, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad(true));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        for seed in 0..20 {
            let row: Vec<f64> = pseudo(7, seed).iter().map(|v| v * 50.0).collect();
            let total: f64 = softmax(&row).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
