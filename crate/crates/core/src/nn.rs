//! Parameter storage, layers, regularization and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] outside any tape. A forward pass binds
//! the parameters it touches onto a fresh [`Graph`]; after `backward` the
//! gradients are collected back into the store, where [`Adam`] consumes them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Reduce, Tape, Var};
use crate::tensor::Tensor;

/// Structural role of a stored tensor. Assigned at layer construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale: trained but neither penalized nor zeroed.
    Norm,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    grads: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind, init: Init) -> ParamId {
        let value = match init {
            Init::Constant(c) => Tensor::full(shape, c),
            Init::FanIn(_) => Tensor::zeros(shape),
        };
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
            init,
        });
        self.grads.push(None);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].kind != ParamKind::Buffer
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Scales every accumulated gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

/// Forward-pass context: a tape plus the bindings of stored parameters onto it.
#[derive(Debug, Default)]
pub struct Graph {
    pub tape: Tape,
    bound: Vec<Option<Var>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape variable for parameter `id`, binding it on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(store.value(id).clone(), store.is_trainable(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Adds the gradients of every bound trainable parameter into `store`.
    pub fn collect_grads(&self, store: &mut ParamStore) {
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.tape.grad(*v) {
                    store.accumulate_grad(ParamId(i), &g);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Fully-connected layer: `activation(x·W + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        let weight = store.register(
            alloc::format!("{name}.weight"),
            &[in_dim, out_dim],
            ParamKind::Weight,
            Init::FanIn(in_dim),
        );
        let bias = store.register(
            alloc::format!("{name}.bias"),
            &[out_dim],
            ParamKind::Bias,
            Init::Constant(0.0),
        );
        DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: shape.to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.tape.matmul(x, w)?;
        let y = g.tape.add(y, b)?;
        Ok(self.activation.apply(&mut g.tape, y))
    }
}

/// 2-D convolution layer over `[C,H,W]` or `[N,C,H,W]` inputs.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        activation: Activation,
    ) -> Self {
        let kernel = store.register(
            alloc::format!("{name}.kernel"),
            &[out_channels, in_channels, kernel_size, kernel_size],
            ParamKind::Weight,
            Init::FanIn(in_channels * kernel_size * kernel_size),
        );
        let bias = with_bias.then(|| {
            store.register(
                alloc::format!("{name}.bias"),
                &[out_channels],
                ParamKind::Bias,
                Init::Constant(0.0),
            )
        });
        ConvLayer {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let mut y = g.tape.conv2d(x, k, self.stride, self.padding)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            let b = g.tape.reshape(b, &[self.out_channels, 1, 1])?;
            y = g.tape.add(y, b)?;
        }
        Ok(self.activation.apply(&mut g.tape, y))
    }
}

/// Per-channel batch normalization over inputs shaped `[batch, C, ...]`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let reg = |store: &mut ParamStore, suffix: &str, kind, init| {
            store.register(alloc::format!("{name}.{suffix}"), &[channels], kind, init)
        };
        BatchNorm {
            scale: reg(store, "scale", ParamKind::Norm, Init::Constant(1.0)),
            shift: reg(store, "shift", ParamKind::Bias, Init::Constant(0.0)),
            running_mean: reg(store, "running_mean", ParamKind::Buffer, Init::Constant(0.0)),
            running_var: reg(store, "running_var", ParamKind::Buffer, Init::Constant(1.0)),
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Train mode standardizes by batch statistics and folds them into the
    /// running estimates (`running ← momentum·running + (1 − momentum)·batch`);
    /// eval mode uses the running estimates only.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: shape,
                rhs: vec![0, self.channels],
            });
        }
        let mut kept = vec![1; shape.len()];
        kept[1] = self.channels;
        let axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();

        let (centered, denom) = match mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "batchnorm in train mode needs a batch of at least 2, got {}",
                        shape[0]
                    )));
                }
                let mean = g.tape.reduce(Reduce::Mean, x, &axes, true)?;
                let centered = g.tape.sub(x, mean)?;
                let sq = g.tape.square(centered);
                let var = g.tape.reduce(Reduce::Mean, sq, &axes, true)?;
                let var_eps = g.tape.add_scalar(var, self.epsilon);
                let denom = g.tape.sqrt(var_eps);

                let batch_mean = g.value(mean).data().to_vec();
                let batch_var = g.value(var).data().to_vec();
                let m = self.momentum;
                for (r, b) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&batch_mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&batch_var) {
                    *r = m * *r + (1.0 - m) * b;
                }
                (centered, denom)
            }
            Mode::Eval => {
                let rm = store.value(self.running_mean).clone().reshape(&kept)?;
                let eps = self.epsilon;
                let rs = store.value(self.running_var).map(|v| libm::sqrt(v + eps)).reshape(&kept)?;
                let rm = g.constant(rm);
                let rs = g.constant(rs);
                (g.tape.sub(x, rm)?, rs)
            }
        };
        let normed = g.tape.div(centered, denom)?;
        let scale = g.param(store, self.scale);
        let shift = g.param(store, self.shift);
        let scale = g.tape.reshape(scale, &kept)?;
        let shift = g.tape.reshape(shift, &kept)?;
        let y = g.tape.mul(normed, scale)?;
        g.tape.add(y, shift)
    }
}

/// Inverted dropout: survivors are scaled by `1/(1 − rate)` at train time so
/// eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(alloc::format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Var {
        if mode == Mode::Eval || self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mask = g.constant(Tensor::new(&shape, mask).expect("mask shape"));
        g.tape.mul(x, mask).expect("same shape")
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam with bias-corrected step size:
/// `w ← w − η·√(1−β₂ᵗ)/(1−β₁ᵗ) · m / (√v + ε)`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        let m = self.first.get(id.0)?.as_deref()?;
        let v = self.second.get(id.0)?.as_deref()?;
        Some((m, v))
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Vec<f64>, Vec<f64>)>) {
        self.step = step;
        for (id, m, v) in moments {
            if self.first.len() <= id.0 {
                self.first.resize(id.0 + 1, None);
                self.second.resize(id.0 + 1, None);
            }
            self.first[id.0] = Some(m);
            self.second[id.0] = Some(v);
        }
    }

    /// One update of every trainable parameter in `store` from its accumulated
    /// gradient. Nothing is mutated if any gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, p) in store.iter() {
            if p.kind != ParamKind::Buffer && store.grad(id).is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let step_size = self.learning_rate * libm::sqrt(bc2) / bc1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let grad = store.grads[id.0].take().expect("checked above");
            let n = grad.numel();
            let m = self.first[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[id.0].get_or_insert_with(|| vec![0.0; n]);
            let w = store.params[id.0].value.data_mut();
            for i in 0..n {
                let gi = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                w[i] -= step_size * m[i] / (libm::sqrt(v[i]) + self.epsilon);
            }
            store.grads[id.0] = Some(grad);
        }
        Ok(())
    }
}

/// L2 penalty on weights. Bias and buffer tensors never contribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegPolicy {
    pub lambda: f64,
}

impl Default for RegPolicy {
    fn default() -> Self {
        RegPolicy { lambda: 1e-5 }
    }
}

/// `λ·Σ‖w‖²` over every weight-tagged parameter, recorded on the tape.
pub fn l2_penalty(g: &mut Graph, store: &ParamStore, policy: RegPolicy) -> Var {
    let mut terms = Vec::new();
    for (id, p) in store.iter() {
        if p.kind == ParamKind::Weight {
            let w = g.param(store, id);
            let sq = g.tape.square(w);
            terms.push(g.tape.sum(sq));
        }
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.tape.add(total, t).expect("scalars");
    }
    g.tape.scale(total, policy.lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Weights uniform in `±1/√fan_in`, biases at their constants.
    UniformFanIn,
    /// Every weight and bias zero; test-only.
    Zeros,
}

/// Deterministically (re)initializes every parameter of `store`.
pub fn init_parameters(store: &mut ParamStore, scheme: InitScheme, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut store.params {
        match (p.init, scheme) {
            (Init::FanIn(fan_in), InitScheme::UniformFanIn) => {
                let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
                for x in p.value.data_mut() {
                    *x = rng.random_range(-bound..bound);
                }
            }
            (Init::FanIn(_), InitScheme::Zeros) => p.value.data_mut().fill(0.0),
            (Init::Constant(_), InitScheme::Zeros) if p.kind == ParamKind::Bias => {
                p.value.data_mut().fill(0.0)
            }
            (Init::Constant(c), _) => p.value.data_mut().fill(c),
        }
    }
    for g in &mut store.grads {
        *g = None;
    }
}
