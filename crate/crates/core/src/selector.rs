//! Arm-selection policies.
//!
//! [`AlsoState`] keeps one decayed score per arm, `S_k ← λ S_k + v̂_k`, and
//! samples from `π ∝ exp(η S)`. The baselines are ε-greedy over surrogate
//! predictions, classical EXP3 with importance-weighted reward estimates, and
//! NeuralUCB with a diagonal gradient covariance.
//!
//! Ties are always broken towards the lowest arm index.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::FeatureVector;
use crate::scalar::{all_finite, Scalar};
use crate::surrogate::{SurrogateError, ValueNetwork};

/// Tolerance on `Σπ = 1` accepted by [`sample_arm`].
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SelectorError {
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite score or prediction")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("no arms to select from")]
    NoArms,
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Max-subtracted softmax. Entries never underflow to exactly zero.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>, SelectorError> {
    if logits.is_empty() {
        return Err(SelectorError::NoArms);
    }
    if !all_finite(logits) {
        return Err(SelectorError::NonFinite);
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits
        .iter()
        .map(|&l| (l - max).exp().max(T::min_positive_value()))
        .collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn mix_uniform<T: Scalar>(pi: Vec<T>, gamma: T) -> Vec<T> {
    if gamma.is_zero() {
        return pi;
    }
    let k = T::of(pi.len() as f64);
    pi.into_iter()
        .map(|p| (T::one() - gamma) * p + gamma / k)
        .collect()
}

fn check_unit_interval<T: Scalar>(name: &str, v: T, open_low: bool) -> Result<(), SelectorError> {
    let ok = if open_low {
        v > T::zero() && v <= T::one()
    } else {
        v >= T::zero() && v <= T::one()
    };
    if ok {
        Ok(())
    } else {
        Err(SelectorError::InvalidParameter(format!("{name} = {v} out of range")))
    }
}

/// Smoothed-score exponential-weights state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AlsoState<T> {
    pub scores: Vec<T>,
    pub eta: T,
    pub lambda: T,
    /// Uniform mixing floor; zero by default.
    pub gamma: T,
}

impl<T: Scalar> AlsoState<T> {
    /// `K` arms at score 0 with `η = 10`, `λ = 0.9`.
    pub fn with_defaults(k: usize) -> Self {
        Self {
            scores: vec![T::zero(); k],
            eta: T::of(10.0),
            lambda: T::of(0.9),
            gamma: T::zero(),
        }
    }

    pub fn new(k: usize, eta: T, lambda: T) -> Result<Self, SelectorError> {
        let s = Self {
            scores: vec![T::zero(); k],
            eta,
            lambda,
            gamma: T::zero(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_gamma(mut self, gamma: T) -> Result<Self, SelectorError> {
        self.gamma = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.scores.is_empty() {
            return Err(SelectorError::NoArms);
        }
        if !(self.eta > T::zero() && self.eta.is_finite()) {
            return Err(SelectorError::InvalidParameter(format!("eta = {} must be > 0", self.eta)));
        }
        check_unit_interval("lambda", self.lambda, true)?;
        check_unit_interval("gamma", self.gamma, false)?;
        if !all_finite(&self.scores) {
            return Err(SelectorError::NonFinite);
        }
        Ok(())
    }

    pub fn arms(&self) -> usize {
        self.scores.len()
    }

    /// Adds an arm with score 0 at the end.
    pub fn push_arm(&mut self) {
        self.scores.push(T::zero());
    }

    /// `S'_k = λ S_k + v̂_k` for every arm.
    pub fn smooth_scores(&self, predictions: &[T]) -> Result<Self, SelectorError> {
        if predictions.len() != self.scores.len() {
            return Err(SelectorError::LengthMismatch {
                expected: self.scores.len(),
                got: predictions.len(),
            });
        }
        if !all_finite(predictions) {
            return Err(SelectorError::NonFinite);
        }
        let scores = self
            .scores
            .iter()
            .zip(predictions)
            .map(|(&s, &v)| self.lambda * s + v)
            .collect();
        Ok(Self {
            scores,
            ..self.clone()
        })
    }

    /// `π_k ∝ exp(η S_k)`, mixed with `γ/K` when a floor is set.
    pub fn selection_distribution(&self) -> Result<Vec<T>, SelectorError> {
        distribution_from_scores(&self.scores, self.eta, self.gamma)
    }
}

/// `(1 − γ)·softmax(η s) + γ/K`.
pub fn distribution_from_scores<T: Scalar>(scores: &[T], eta: T, gamma: T) -> Result<Vec<T>, SelectorError> {
    let logits: Vec<T> = scores.iter().map(|&s| eta * s).collect();
    Ok(mix_uniform(softmax(&logits)?, gamma))
}

/// Draws an index from `pi` by inverse CDF on one uniform variate.
pub fn sample_arm<T: Scalar, R: Rng + ?Sized>(pi: &[T], rng: &mut R) -> Result<usize, SelectorError> {
    if pi.is_empty() {
        return Err(SelectorError::NoArms);
    }
    let mut total = 0.0;
    for &p in pi {
        let p = p.as_f64();
        if !p.is_finite() || p < 0.0 {
            return Err(SelectorError::InvalidDistribution(format!("entry {p}")));
        }
        total += p;
    }
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(SelectorError::InvalidDistribution(format!("sums to {total}")));
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in pi.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Argmax of `predictions` with probability `1 − ε`, otherwise a uniform arm.
pub fn select_epsilon_greedy<T: Scalar, R: Rng + ?Sized>(
    predictions: &[T],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, SelectorError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(SelectorError::InvalidParameter(format!("epsilon = {epsilon} out of [0, 1]")));
    }
    if !all_finite(predictions) {
        return Err(SelectorError::NonFinite);
    }
    let best = argmax(predictions).ok_or(SelectorError::NoArms)?;
    if rng.random::<f64>() < epsilon {
        Ok(rng.random_range(0..predictions.len()))
    } else {
        Ok(best)
    }
}

/// Classical EXP3 over importance-weighted cumulative reward estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Exp3State<T> {
    pub cum_estimates: Vec<T>,
    pub gamma: T,
    pub eta: T,
}

impl<T: Scalar> Exp3State<T> {
    pub fn new(k: usize, eta: T, gamma: T) -> Result<Self, SelectorError> {
        let s = Self {
            cum_estimates: vec![T::zero(); k],
            gamma,
            eta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        if self.cum_estimates.is_empty() {
            return Err(SelectorError::NoArms);
        }
        if !(self.eta > T::zero() && self.eta.is_finite()) {
            return Err(SelectorError::InvalidParameter(format!("eta = {} must be > 0", self.eta)));
        }
        check_unit_interval("gamma", self.gamma, false)?;
        if !all_finite(&self.cum_estimates) {
            return Err(SelectorError::NonFinite);
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<Vec<T>, SelectorError> {
        self.validate()?;
        distribution_from_scores(&self.cum_estimates, self.eta, self.gamma)
    }

    /// Adds `reward / prob` to the played arm's estimate only.
    pub fn update_exp3(&mut self, arm: usize, reward: T, prob: T) -> Result<(), SelectorError> {
        let k = self.cum_estimates.len();
        if arm >= k {
            return Err(SelectorError::LengthMismatch { expected: k, got: arm + 1 });
        }
        if !(prob > T::zero() && prob <= T::one()) {
            return Err(SelectorError::InvalidDistribution(format!("played-arm probability {prob}")));
        }
        if !reward.is_finite() {
            return Err(SelectorError::NonFinite);
        }
        self.cum_estimates[arm] += reward / prob;
        Ok(())
    }
}

/// Samples an arm and returns it with the distribution used.
pub fn select_exp3<T: Scalar, R: Rng + ?Sized>(
    state: &Exp3State<T>,
    rng: &mut R,
) -> Result<(usize, Vec<T>), SelectorError> {
    let pi = state.distribution()?;
    let arm = sample_arm(&pi, rng)?;
    Ok((arm, pi))
}

/// Diagonal-covariance NeuralUCB state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NeuralUcbState<T> {
    pub grad_cov_diag: Vec<T>,
    pub lambda_reg: T,
    pub nu: T,
}

impl<T: Scalar> NeuralUcbState<T> {
    /// `λ_reg = 0.1`, `ν = 1.0`.
    pub fn with_defaults(parameter_count: usize) -> Self {
        Self::new(parameter_count, T::of(0.1), T::one()).expect("defaults are valid")
    }

    pub fn new(parameter_count: usize, lambda_reg: T, nu: T) -> Result<Self, SelectorError> {
        if !(lambda_reg > T::zero()) || !(nu >= T::zero()) {
            return Err(SelectorError::InvalidParameter(format!(
                "lambda_reg = {lambda_reg} must be > 0 and nu = {nu} >= 0"
            )));
        }
        Ok(Self {
            grad_cov_diag: vec![lambda_reg; parameter_count],
            lambda_reg,
            nu,
        })
    }

    /// `U_i += g_i²` for the played arm's prediction gradient.
    pub fn update(&mut self, gradient: &[T]) -> Result<(), SelectorError> {
        if gradient.len() != self.grad_cov_diag.len() {
            return Err(SelectorError::LengthMismatch {
                expected: self.grad_cov_diag.len(),
                got: gradient.len(),
            });
        }
        for (u, &g) in self.grad_cov_diag.iter_mut().zip(gradient) {
            *u += g * g;
        }
        Ok(())
    }

    /// `μ̂ + ν·sqrt(Σ_i λ·g_i² / U_i)` from a precomputed mean and gradient.
    pub fn ucb(&self, mean: T, gradient: &[T]) -> Result<T, SelectorError> {
        if gradient.len() != self.grad_cov_diag.len() {
            return Err(SelectorError::LengthMismatch {
                expected: self.grad_cov_diag.len(),
                got: gradient.len(),
            });
        }
        let width: T = gradient
            .iter()
            .zip(&self.grad_cov_diag)
            .map(|(&g, &u)| self.lambda_reg * g * g / u)
            .sum();
        Ok(mean + self.nu * width.sqrt())
    }
}

/// UCB score of every arm.
pub fn neural_ucb_scores<T: Scalar>(
    net: &ValueNetwork<T>,
    features: &[FeatureVector<T>],
    state: &NeuralUcbState<T>,
) -> Result<Vec<T>, SelectorError> {
    if state.grad_cov_diag.len() != net.parameter_count() {
        return Err(SelectorError::LengthMismatch {
            expected: net.parameter_count(),
            got: state.grad_cov_diag.len(),
        });
    }
    features
        .iter()
        .map(|x| {
            let mean = net.forward(x.values())?;
            let g = net.param_gradient(x.values())?;
            state.ucb(mean, &g)
        })
        .collect()
}

/// Argmax of the UCB scores. Does not touch `state`.
pub fn select_neural_ucb<T: Scalar>(
    net: &ValueNetwork<T>,
    features: &[FeatureVector<T>],
    state: &NeuralUcbState<T>,
) -> Result<usize, SelectorError> {
    let scores = neural_ucb_scores(net, features, state)?;
    argmax(&scores).ok_or(SelectorError::NoArms)
}
