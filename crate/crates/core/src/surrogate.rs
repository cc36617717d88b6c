//! Trainable value network `f_θ` and its replay buffer.
//!
//! Parameters live in one flat vector. Layouts, in order:
//!
//! * `Linear`: `w[d]`, `b`
//! * `Mlp1`: `W1[h×d]`, `b1[h]`, `w2[h]`, `b2`
//! * `Mlp2PreLn`: `γ1[d]`, `β1[d]`, `W1[h×d]`, `b1[h]`, `γ2[h]`, `β2[h]`,
//!   `W2[h×h]`, `b2[h]`, `w3[h]`, `b3`
//!
//! Matrices are row-major with one row per output unit. The output bias is
//! always the last parameter.

use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::FeatureVector;
use crate::scalar::{all_finite, Scalar};

const LN_EPS: f64 = 1e-5;

/// Floor on the denominator of the gradient-check relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Regression target used by [`gradient_check`]'s single-sample loss.
pub const GRAD_CHECK_TARGET: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("invalid training hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("feature dimension {got} does not match network input {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network produced a non-finite output")]
    NonFiniteOutput,
    #[error("training loss became non-finite after {epochs} epoch(s)")]
    NonFiniteLoss { epochs: usize },
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("finite-difference step must be > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    ParameterCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp1,
    Mlp2PreLn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    pub hidden: usize,
    pub activation: Activation,
    pub input_dim: usize,
    pub init_seed: u64,
}

impl NetworkConfig {
    /// Single hidden layer, 512 GELU units.
    pub fn mlp1(input_dim: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp1,
            hidden: 512,
            activation: Activation::Gelu,
            input_dim,
            init_seed,
        }
    }

    pub fn linear(input_dim: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Linear,
            hidden: 1,
            activation: Activation::Gelu,
            input_dim,
            init_seed,
        }
    }

    /// Two pre-LayerNorm hidden layers of 512 GELU units.
    pub fn mlp2_preln(input_dim: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp2PreLn,
            hidden: 512,
            activation: Activation::Gelu,
            input_dim,
            init_seed,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        if self.input_dim == 0 {
            return Err(SurrogateError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(SurrogateError::InvalidConfig("hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden);
        match self.architecture {
            Architecture::Linear => d + 1,
            Architecture::Mlp1 => h * d + h + h + 1,
            Architecture::Mlp2PreLn => 2 * d + h * d + h + 2 * h + h * h + h + h + 1,
        }
    }
}

/// Parameter segment: offset and length inside θ, plus whether weight decay applies.
#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    len: usize,
    decay: bool,
}

impl Segment {
    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

fn layout(cfg: &NetworkConfig) -> Vec<Segment> {
    let (d, h) = (cfg.input_dim, cfg.hidden);
    let sizes: Vec<(usize, bool)> = match cfg.architecture {
        Architecture::Linear => vec![(d, true), (1, false)],
        Architecture::Mlp1 => vec![(h * d, true), (h, false), (h, true), (1, false)],
        Architecture::Mlp2PreLn => vec![
            (d, false),
            (d, false),
            (h * d, true),
            (h, false),
            (h, false),
            (h, false),
            (h * h, true),
            (h, false),
            (h, true),
            (1, false),
        ],
    };
    let mut start = 0;
    sizes
        .into_iter()
        .map(|(len, decay)| {
            let s = Segment { start, len, decay };
            start += len;
            s
        })
        .collect()
}

fn activate<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => {
            let c = T::of((2.0 / std::f64::consts::PI).sqrt());
            let u = c * (x + T::of(0.044715) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
    }
}

fn activate_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let c = T::of((2.0 / std::f64::consts::PI).sqrt());
            let k = T::of(0.044715);
            let t = (c * (x + k * x * x * x)).tanh();
            let half = T::of(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
        }
    }
}

struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: T,
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::of(LN_EPS)).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&xh, (&g, &b))| g * xh + b)
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Accumulates γ/β gradients and returns the gradient w.r.t. the LN input.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let n = dy.len();
    let mut dxhat = vec![T::zero(); n];
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for i in 0..n {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
        sum_dxhat += dxhat[i];
        sum_dxhat_xhat += dxhat[i] * cache.xhat[i];
    }
    let nf = T::of(n as f64);
    (0..n)
        .map(|i| cache.inv_std / nf * (nf * dxhat[i] - sum_dxhat - cache.xhat[i] * sum_dxhat_xhat))
        .collect()
}

fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            let row = &w[j * d..(j + 1) * d];
            row.iter().zip(x).fold(bj, |acc, (&a, &v)| acc + a * v)
        })
        .collect()
}

enum Cache<T> {
    Linear,
    Mlp1 {
        pre: Vec<T>,
        hidden: Vec<T>,
    },
    Mlp2 {
        ln1: LayerNormCache<T>,
        z1: Vec<T>,
        pre1: Vec<T>,
        ln2: LayerNormCache<T>,
        z2: Vec<T>,
        pre2: Vec<T>,
        h2: Vec<T>,
    },
}

/// `f_θ`: maps a feature vector to a scalar reward estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ValueNetwork<T> {
    config: NetworkConfig,
    parameters: Vec<T>,
    step_count: u64,
}

impl<T: Scalar> ValueNetwork<T> {
    /// Seeded initialization: weights and biases `U(±1/sqrt(fan_in))`,
    /// LayerNorm gains 1 and shifts 0.
    pub fn new(config: NetworkConfig) -> Result<Self, SurrogateError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, h) = (config.input_dim, config.hidden);
        let mut theta = Vec::with_capacity(config.parameter_count());
        let mut uniform = |n: usize, fan_in: usize, theta: &mut Vec<T>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..n {
                theta.push(T::of(rng.random_range(-bound..bound)));
            }
        };
        match config.architecture {
            Architecture::Linear => uniform(d + 1, d, &mut theta),
            Architecture::Mlp1 => {
                uniform(h * d + h, d, &mut theta);
                uniform(h + 1, h, &mut theta);
            }
            Architecture::Mlp2PreLn => {
                theta.extend(std::iter::repeat_n(T::one(), d));
                theta.extend(std::iter::repeat_n(T::zero(), d));
                uniform(h * d + h, d, &mut theta);
                theta.extend(std::iter::repeat_n(T::one(), h));
                theta.extend(std::iter::repeat_n(T::zero(), h));
                uniform(h * h + h, h, &mut theta);
                uniform(h + 1, h, &mut theta);
            }
        }
        debug_assert_eq!(theta.len(), config.parameter_count());
        Ok(Self {
            config,
            parameters: theta,
            step_count: 0,
        })
    }

    pub fn from_parts(config: NetworkConfig, parameters: Vec<T>, step_count: u64) -> Result<Self, SurrogateError> {
        config.validate()?;
        if parameters.len() != config.parameter_count() {
            return Err(SurrogateError::ParameterCount {
                expected: config.parameter_count(),
                got: parameters.len(),
            });
        }
        if !all_finite(&parameters) {
            return Err(SurrogateError::NonFiniteOutput);
        }
        Ok(Self {
            config,
            parameters,
            step_count,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[T] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.parameters
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.len()
    }

    /// Number of gradient updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn check_dim(&self, x: &[T]) -> Result<(), SurrogateError> {
        if x.len() != self.config.input_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[T]) -> (T, Cache<T>) {
        let seg = layout(&self.config);
        let p = &self.parameters;
        let act = self.config.activation;
        match self.config.architecture {
            Architecture::Linear => {
                let w = &p[seg[0].range()];
                let out = w.iter().zip(x).fold(p[seg[1].start], |acc, (&a, &v)| acc + a * v);
                (out, Cache::Linear)
            }
            Architecture::Mlp1 => {
                let pre = affine(&p[seg[0].range()], &p[seg[1].range()], x);
                let hidden: Vec<T> = pre.iter().map(|&z| activate(act, z)).collect();
                let out = p[seg[2].range()]
                    .iter()
                    .zip(&hidden)
                    .fold(p[seg[3].start], |acc, (&a, &v)| acc + a * v);
                (out, Cache::Mlp1 { pre, hidden })
            }
            Architecture::Mlp2PreLn => {
                let (z1, ln1) = layer_norm(x, &p[seg[0].range()], &p[seg[1].range()]);
                let pre1 = affine(&p[seg[2].range()], &p[seg[3].range()], &z1);
                let h1: Vec<T> = pre1.iter().map(|&z| activate(act, z)).collect();
                let (z2, ln2) = layer_norm(&h1, &p[seg[4].range()], &p[seg[5].range()]);
                let pre2 = affine(&p[seg[6].range()], &p[seg[7].range()], &z2);
                let h2: Vec<T> = pre2.iter().map(|&z| activate(act, z)).collect();
                let out = p[seg[8].range()]
                    .iter()
                    .zip(&h2)
                    .fold(p[seg[9].start], |acc, (&a, &v)| acc + a * v);
                (
                    out,
                    Cache::Mlp2 {
                        ln1,
                        z1,
                        pre1,
                        ln2,
                        z2,
                        pre2,
                        h2,
                    },
                )
            }
        }
    }

    /// Adds `dout · ∂f(x)/∂θ` into `grad`.
    fn backward(&self, x: &[T], cache: &Cache<T>, dout: T, grad: &mut [T]) {
        let seg = layout(&self.config);
        let p = &self.parameters;
        let act = self.config.activation;
        match cache {
            Cache::Linear => {
                for (g, &v) in grad[seg[0].range()].iter_mut().zip(x) {
                    *g += dout * v;
                }
                grad[seg[1].start] += dout;
            }
            Cache::Mlp1 { pre, hidden } => {
                let d = x.len();
                let w2 = &p[seg[2].range()];
                for (j, &hj) in hidden.iter().enumerate() {
                    grad[seg[2].start + j] += dout * hj;
                }
                grad[seg[3].start] += dout;
                for (j, &zj) in pre.iter().enumerate() {
                    let delta = dout * w2[j] * activate_grad(act, zj);
                    if delta.is_zero() {
                        continue;
                    }
                    grad[seg[1].start + j] += delta;
                    let row = &mut grad[seg[0].start + j * d..seg[0].start + (j + 1) * d];
                    for (g, &v) in row.iter_mut().zip(x) {
                        *g += delta * v;
                    }
                }
            }
            Cache::Mlp2 {
                ln1,
                z1,
                pre1,
                ln2,
                z2,
                pre2,
                h2,
            } => {
                let h = self.config.hidden;
                let d = x.len();
                let w3 = &p[seg[8].range()];
                for (j, &v) in h2.iter().enumerate() {
                    grad[seg[8].start + j] += dout * v;
                }
                grad[seg[9].start] += dout;

                // second hidden layer
                let delta2: Vec<T> = pre2
                    .iter()
                    .enumerate()
                    .map(|(j, &z)| dout * w3[j] * activate_grad(act, z))
                    .collect();
                let w2 = &p[seg[6].range()];
                let mut dz2 = vec![T::zero(); h];
                for (j, &dj) in delta2.iter().enumerate() {
                    grad[seg[7].start + j] += dj;
                    let row_start = seg[6].start + j * h;
                    for i in 0..h {
                        grad[row_start + i] += dj * z2[i];
                        dz2[i] += dj * w2[j * h + i];
                    }
                }
                let (g2, rest) = grad[seg[4].start..].split_at_mut(h);
                let dh1 = layer_norm_backward(&dz2, ln2, &p[seg[4].range()], g2, &mut rest[..h]);

                // first hidden layer
                let w1 = &p[seg[2].range()];
                let mut dz1 = vec![T::zero(); d];
                for (j, &zj) in pre1.iter().enumerate() {
                    let dj = dh1[j] * activate_grad(act, zj);
                    grad[seg[3].start + j] += dj;
                    let row_start = seg[2].start + j * d;
                    for i in 0..d {
                        grad[row_start + i] += dj * z1[i];
                        dz1[i] += dj * w1[j * d + i];
                    }
                }
                let (g1, rest) = grad[seg[0].start..].split_at_mut(d);
                layer_norm_backward(&dz1, ln1, &p[seg[0].range()], g1, &mut rest[..d]);
            }
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<T, SurrogateError> {
        self.check_dim(x)?;
        let (out, _) = self.forward_cached(x);
        if !out.is_finite() {
            return Err(SurrogateError::NonFiniteOutput);
        }
        Ok(out)
    }

    /// `v̂_k = f_θ(x_k)` for every feature vector, unclipped.
    pub fn predict(&self, features: &[FeatureVector<T>]) -> Result<Vec<T>, SurrogateError> {
        features.iter().map(|x| self.forward(x.values())).collect()
    }

    /// `∂f(x)/∂θ`, one entry per parameter.
    pub fn param_gradient(&self, x: &[T]) -> Result<Vec<T>, SurrogateError> {
        self.check_dim(x)?;
        let (_, cache) = self.forward_cached(x);
        let mut grad = vec![T::zero(); self.parameters.len()];
        self.backward(x, &cache, T::one(), &mut grad);
        Ok(grad)
    }

    /// Mean squared error over `samples`.
    pub fn mse<'a, I>(&self, samples: I) -> T
    where
        I: IntoIterator<Item = &'a (FeatureVector<T>, T)>,
    {
        let mut total = T::zero();
        let mut n = 0usize;
        for (x, r) in samples {
            let (out, _) = self.forward_cached(x.values());
            total += (out - *r) * (out - *r);
            n += 1;
        }
        if n == 0 {
            T::zero()
        } else {
            total / T::of(n as f64)
        }
    }

    /// Gradient of the batch-mean squared error.
    fn mse_gradient(&self, batch: &[&(FeatureVector<T>, T)], grad: &mut [T]) {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let scale = T::of(2.0 / batch.len() as f64);
        for (x, r) in batch {
            let (out, cache) = self.forward_cached(x.values());
            self.backward(x.values(), &cache, scale * (out - *r), grad);
        }
    }
}

pub fn init_network<T: Scalar>(config: NetworkConfig) -> Result<ValueNetwork<T>, SurrogateError> {
    ValueNetwork::new(config)
}

/// Ordered `(x, r)` samples with optional FIFO capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReplayBuffer<T> {
    samples: VecDeque<(FeatureVector<T>, T)>,
    capacity: Option<usize>,
}

impl<T: Scalar> Default for ReplayBuffer<T> {
    fn default() -> Self {
        Self::new(None)
    }
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            samples: VecDeque::new(),
            capacity: capacity.filter(|&c| c > 0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &(FeatureVector<T>, T)> {
        self.samples.iter()
    }

    pub fn get(&self, i: usize) -> Option<&(FeatureVector<T>, T)> {
        self.samples.get(i)
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn push_sample(&mut self, x: FeatureVector<T>, r: T) -> Result<(), SurrogateError> {
        if !(r >= T::zero() && r <= T::one()) {
            return Err(SurrogateError::RewardOutOfRange(r.as_f64()));
        }
        if let Some((first, _)) = self.samples.front() {
            if first.dim() != x.dim() {
                return Err(SurrogateError::DimensionMismatch {
                    expected: first.dim(),
                    got: x.dim(),
                });
            }
        }
        self.samples.push_back((x, r));
        if let Some(cap) = self.capacity {
            while self.samples.len() > cap {
                self.samples.pop_front();
            }
        }
        Ok(())
    }
}

/// Weight decay coefficient as a function of buffer size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDecay {
    /// `min(0.01, 0.01 / N)`.
    Dynamic,
    Fixed { value: f64 },
}

impl WeightDecay {
    pub fn coefficient(&self, buffer_len: usize) -> f64 {
        match *self {
            WeightDecay::Dynamic => (0.01f64).min(0.01 / buffer_len.max(1) as f64),
            WeightDecay::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: WeightDecay,
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
    /// Largest number of buffer samples scored per epoch for early stopping;
    /// `None` scores the full buffer.
    #[serde(default)]
    pub monitor_cap: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 8,
            max_epochs: 100,
            weight_decay: WeightDecay::Dynamic,
            early_stop_patience: 5,
            early_stop_tol: 1e-5,
            monitor_cap: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SurrogateError::InvalidHyper(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(SurrogateError::InvalidHyper(
                "batch_size, max_epochs and early_stop_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub stopped_early: bool,
    pub weight_decay: f64,
}

/// Minibatch gradient descent on the replay buffer.
///
/// Each epoch shuffles the buffer and takes one gradient step per minibatch
/// of `batch_size` samples on their mean squared error, applying decoupled
/// weight decay to the weight matrices before each step. Training stops
/// after `max_epochs`, or once the monitored MSE has improved by less than `early_stop_tol` for
/// `early_stop_patience` consecutive epochs. On a non-finite loss the
/// parameters are restored to their values on entry.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut ValueNetwork<T>,
    buffer: &ReplayBuffer<T>,
    hyper: &TrainHyper,
    rng: &mut R,
) -> Result<TrainReport, SurrogateError> {
    hyper.validate()?;
    if buffer.is_empty() {
        return Err(SurrogateError::EmptyBuffer);
    }
    if let Some((x, _)) = buffer.get(0) {
        net.check_dim(x.values())?;
    }
    let n = buffer.len();
    let monitor: Vec<&(FeatureVector<T>, T)> = match hyper.monitor_cap {
        Some(cap) if cap < n => index::sample(rng, n, cap)
            .into_iter()
            .map(|i| buffer.get(i).expect("index in range"))
            .collect(),
        _ => buffer.samples().collect(),
    };
    let initial = net.mse(monitor.iter().copied());
    if !initial.is_finite() {
        return Err(SurrogateError::NonFiniteLoss { epochs: 0 });
    }

    let saved = net.parameters.clone();
    let saved_steps = net.step_count;
    let lr = T::of(hyper.lr);
    let wd = hyper.weight_decay.coefficient(n);
    let shrink = T::one() - lr * T::of(wd);
    let decayed: Vec<Segment> = layout(&net.config).into_iter().filter(|s| s.decay).collect();
    let batch = hyper.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![T::zero(); net.parameters.len()];

    let mut prev = initial;
    let mut stall = 0;
    let mut epochs = 0;
    let mut stopped_early = false;
    while epochs < hyper.max_epochs {
        epochs += 1;
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let picks: Vec<&(FeatureVector<T>, T)> =
                chunk.iter().map(|&i| buffer.get(i).expect("index in range")).collect();
            net.mse_gradient(&picks, &mut grad);
            for s in &decayed {
                net.parameters[s.range()].iter_mut().for_each(|w| *w *= shrink);
            }
            for (w, &g) in net.parameters.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            net.step_count += 1;
        }

        let current = net.mse(monitor.iter().copied());
        if !current.is_finite() || !all_finite(&net.parameters) {
            net.parameters = saved;
            net.step_count = saved_steps;
            return Err(SurrogateError::NonFiniteLoss { epochs });
        }
        if prev - current < T::of(hyper.early_stop_tol) {
            stall += 1;
        } else {
            stall = 0;
        }
        prev = current;
        if stall >= hyper.early_stop_patience {
            stopped_early = epochs < hyper.max_epochs;
            break;
        }
    }

    Ok(TrainReport {
        epochs_run: epochs,
        initial_mse: initial.as_f64(),
        final_mse: net.mse(buffer.samples()).as_f64(),
        stopped_early,
        weight_decay: wd,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub passed: bool,
}

/// Compares analytic gradients of `(f(x) - 1)^2` against central finite
/// differences for every parameter. Relative error per parameter is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check<T: Scalar>(
    net: &ValueNetwork<T>,
    x: &FeatureVector<T>,
    eps: f64,
    tol: f64,
) -> Result<CheckReport, SurrogateError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SurrogateError::InvalidEpsilon(eps));
    }
    net.check_dim(x.values())?;
    let target = T::of(GRAD_CHECK_TARGET);
    let (out, cache) = net.forward_cached(x.values());
    let mut analytic = vec![T::zero(); net.parameter_count()];
    net.backward(x.values(), &cache, T::of(2.0) * (out - target), &mut analytic);

    let loss = |n: &ValueNetwork<T>| {
        let (o, _) = n.forward_cached(x.values());
        (o - target) * (o - target)
    };
    let mut probe = net.clone();
    let h = T::of(eps);
    let mut worst = 0.0f64;
    let mut worst_parameter = 0;
    for i in 0..probe.parameters.len() {
        let orig = probe.parameters[i];
        probe.parameters[i] = orig + h;
        let plus = loss(&probe);
        probe.parameters[i] = orig - h;
        let minus = loss(&probe);
        probe.parameters[i] = orig;
        let numeric = ((plus - minus) / (h + h)).as_f64();
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst {
            worst = rel;
            worst_parameter = i;
        }
    }
    Ok(CheckReport {
        max_relative_error: worst,
        worst_parameter,
        passed: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector<f64> {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    fn random_x(dim: usize, seed: u64) -> FeatureVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fv(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(NetworkConfig::linear(4, 0).parameter_count(), 5);
        assert_eq!(NetworkConfig::mlp1(4, 0).with_hidden(3).parameter_count(), 19);
        let net: ValueNetwork<f64> = init_network(NetworkConfig::mlp2_preln(4, 0).with_hidden(3)).unwrap();
        // 2·4 + 3·4 + 3 + 2·3 + 3·3 + 3 + 3 + 1
        assert_eq!(net.parameter_count(), 8 + 12 + 3 + 6 + 9 + 3 + 3 + 1);
    }

    #[test]
    fn init_is_seeded() {
        let a: ValueNetwork<f64> = init_network(NetworkConfig::mlp1(6, 3).with_hidden(5)).unwrap();
        let b: ValueNetwork<f64> = init_network(NetworkConfig::mlp1(6, 3).with_hidden(5)).unwrap();
        let c: ValueNetwork<f64> = init_network(NetworkConfig::mlp1(6, 4).with_hidden(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn invalid_config() {
        assert!(init_network::<f64>(NetworkConfig::mlp1(0, 0)).is_err());
        assert!(init_network::<f64>(NetworkConfig::mlp1(3, 0).with_hidden(0)).is_err());
    }

    #[test]
    fn zeroed_network_outputs_its_bias() {
        for cfg in [
            NetworkConfig::linear(3, 1),
            NetworkConfig::mlp1(3, 1).with_hidden(4),
            NetworkConfig::mlp2_preln(3, 1).with_hidden(4),
        ] {
            let mut net: ValueNetwork<f64> = init_network(cfg).unwrap();
            net.parameters_mut().iter_mut().for_each(|p| *p = 0.0);
            *net.parameters_mut().last_mut().unwrap() = 0.3;
            let out = net.predict(&[fv(&[1.0, 2.0, 3.0]), fv(&[-4.0, 0.0, 9.0])]).unwrap();
            assert_eq!(out, vec![0.3, 0.3]);
        }
    }

    #[test]
    fn linear_dot_product() {
        let net = ValueNetwork::from_parts(NetworkConfig::linear(2, 0), vec![1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(net.predict(&[fv(&[0.3, 9.0])]).unwrap(), vec![0.3]);
        assert!(matches!(
            net.predict(&[fv(&[1.0])]),
            Err(SurrogateError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let net: ValueNetwork<f64> = init_network(NetworkConfig::mlp1(5, 9).with_hidden(7)).unwrap();
        let x = random_x(5, 1);
        let out = net.predict(&[x.clone(), x]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut net = ValueNetwork::from_parts(NetworkConfig::linear(1, 0), vec![1.0, 0.0], 0).unwrap();
        net.parameters_mut()[0] = f64::MAX;
        assert_eq!(net.forward(&[10.0]), Err(SurrogateError::NonFiniteOutput));
    }

    #[test]
    fn buffer_rules() {
        let mut b: ReplayBuffer<f64> = ReplayBuffer::new(Some(2));
        b.push_sample(fv(&[1.0]), 0.1).unwrap();
        assert_eq!(b.len(), 1);
        b.push_sample(fv(&[2.0]), 0.2).unwrap();
        b.push_sample(fv(&[3.0]), 0.3).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0).unwrap().1, 0.2);
        assert_eq!(b.push_sample(fv(&[1.0]), 1.2), Err(SurrogateError::RewardOutOfRange(1.2)));
        assert!(b.push_sample(fv(&[1.0]), f64::NAN).is_err());
        assert!(matches!(
            b.push_sample(fv(&[1.0, 2.0]), 0.5),
            Err(SurrogateError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dynamic_weight_decay() {
        assert_eq!(WeightDecay::Dynamic.coefficient(1), 0.01);
        assert_eq!(WeightDecay::Dynamic.coefficient(4), 0.0025);
    }

    #[test]
    fn training_fits_single_sample() {
        let mut net: ValueNetwork<f64> = init_network(NetworkConfig::linear(3, 5)).unwrap();
        let mut buf = ReplayBuffer::default();
        buf.push_sample(fv(&[0.5, -0.2, 0.1]), 0.7).unwrap();
        let hyper = TrainHyper {
            lr: 0.1,
            ..TrainHyper::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = train_step(&mut net, &buf, &hyper, &mut rng).unwrap();
        assert_eq!(report.weight_decay, 0.01);
        let pred = net.predict(&[fv(&[0.5, -0.2, 0.1])]).unwrap()[0];
        assert!((pred - 0.7).abs() < 0.05, "pred {pred}");
        assert!(report.final_mse < report.initial_mse);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut net: ValueNetwork<f64> = init_network(NetworkConfig::mlp1(3, 5).with_hidden(4)).unwrap();
        let before = net.parameters().to_vec();
        let mut buf = ReplayBuffer::default();
        buf.push_sample(fv(&[0.5, -0.2, 0.1]), 0.7).unwrap();
        buf.push_sample(fv(&[0.1, 0.2, 0.3]), 0.2).unwrap();
        let hyper = TrainHyper {
            lr: 0.0,
            ..TrainHyper::default()
        };
        let report = train_step(&mut net, &buf, &hyper, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(net.parameters(), &before[..]);
        assert_eq!(report.final_mse, report.initial_mse);
        assert!(report.stopped_early);
        assert_eq!(report.epochs_run, 5);
    }

    #[test]
    fn training_errors() {
        let mut net: ValueNetwork<f64> = init_network(NetworkConfig::linear(2, 0)).unwrap();
        let buf = ReplayBuffer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            train_step(&mut net, &buf, &TrainHyper::default(), &mut rng),
            Err(SurrogateError::EmptyBuffer)
        );
        let mut buf = ReplayBuffer::default();
        buf.push_sample(fv(&[1.0, 1.0]), 1.0).unwrap();
        let bad = TrainHyper {
            batch_size: 0,
            ..TrainHyper::default()
        };
        assert!(matches!(train_step(&mut net, &buf, &bad, &mut rng), Err(SurrogateError::InvalidHyper(_))));
    }

    #[test]
    fn divergent_training_restores_parameters() {
        let mut net: ValueNetwork<f64> = init_network(NetworkConfig::linear(2, 0)).unwrap();
        let before = net.parameters().to_vec();
        let mut buf = ReplayBuffer::default();
        buf.push_sample(fv(&[1e3, -1e3]), 1.0).unwrap();
        let hyper = TrainHyper {
            lr: 1e10,
            early_stop_patience: 100,
            ..TrainHyper::default()
        };
        let err = train_step(&mut net, &buf, &hyper, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, SurrogateError::NonFiniteLoss { .. }));
        assert_eq!(net.parameters(), &before[..]);
    }

    #[test]
    fn gradient_checks() {
        let lin: ValueNetwork<f64> = init_network(NetworkConfig::linear(6, 2)).unwrap();
        let r = gradient_check(&lin, &random_x(6, 3), 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        let mlp: ValueNetwork<f64> = init_network(NetworkConfig::mlp1(6, 2).with_hidden(8)).unwrap();
        let r = gradient_check(&mlp, &random_x(6, 4), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        let relu: ValueNetwork<f64> = init_network(
            NetworkConfig::mlp1(6, 2).with_hidden(8).with_activation(Activation::Relu),
        )
        .unwrap();
        let r = gradient_check(&relu, &random_x(6, 4), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        let ln: ValueNetwork<f64> = init_network(NetworkConfig::mlp2_preln(6, 2).with_hidden(5)).unwrap();
        let r = gradient_check(&ln, &random_x(6, 5), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(
            gradient_check(&lin, &random_x(6, 3), 0.0, 1e-6),
            Err(SurrogateError::InvalidEpsilon(0.0))
        );
    }

    #[test]
    fn f32_network_runs() {
        let net: ValueNetwork<f32> = init_network(NetworkConfig::mlp1(3, 0).with_hidden(4)).unwrap();
        let x = FeatureVector::new(vec![0.1f32, 0.2, 0.3]).unwrap();
        assert!(net.predict(&[x]).unwrap()[0].is_finite());
    }
}
