//! Adversarial online strategy optimization.
//!
//! An agent augments its persona with one of `K` strategy instructions each
//! turn. A small value network scores every arm from `[arm embedding; context]`
//! features, the scores are smoothed with an exponential decay, and the next
//! arm is sampled from an exponential-weights distribution over the smoothed
//! scores. The crate also ships a simulated non-stationary social environment,
//! regret/budget metrics, and an experiment harness.
//!
//! The numeric core ([`surrogate`], [`selector`], [`featurizer`]) is generic
//! over [`Scalar`]; the aliases below fix it to `f64`, which is what the
//! harness uses.

pub mod environment;
pub mod evaluation;
pub mod featurizer;
pub mod harness;
pub mod scalar;
pub mod selector;
pub mod strategy_space;
pub mod surrogate;

pub use scalar::Scalar;

pub use environment::{
    normalize_reward, Dimension, EnvConfig, EnvError, EnvKind, Environment, TurnRecord,
};
pub use evaluation::{budget_report, drift_stats, pseudo_regret, BudgetReport, EpisodeLog, Method};
pub use featurizer::{EmbeddingProvider, FeatureError};
pub use harness::{run_episode, run_experiment, RunConfig, RunError};
pub use selector::SelectorError;
pub use strategy_space::{
    augment_persona, load_pool, AugmentedPersona, Category, Persona, PoolError, Strategy,
    StrategyPool,
};
pub use surrogate::{Architecture, NetworkConfig, SurrogateError, TrainHyper};

/// Double-precision value network.
pub type ValueNetwork = surrogate::ValueNetwork<f64>;
/// Single-precision value network.
pub type ValueNetworkF32 = surrogate::ValueNetwork<f32>;
pub type ReplayBuffer = surrogate::ReplayBuffer<f64>;
pub type FeatureVector = featurizer::FeatureVector<f64>;
pub type ArmEmbeddingTable = featurizer::ArmEmbeddingTable<f64>;
pub type AlsoState = selector::AlsoState<f64>;
pub type Exp3State = selector::Exp3State<f64>;
pub type NeuralUcbState = selector::NeuralUcbState<f64>;
