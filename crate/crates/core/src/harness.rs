//! Episode and experiment runner.
//!
//! [`run_episode`] plays `rounds` turns against one environment. Each turn
//! the agent encodes the dialogue so far, scores every arm with the value
//! network, samples an arm from the exponential-weights distribution, plays
//! it, trains on the new sample and folds the turn's predictions into its
//! smoothed scores. The environment is reset every `turns_per_episode`
//! turns; the optimizer state carries over.
//!
//! [`run_experiment`] runs every (variant, seed) cell and aggregates them.

pub mod checkpoint;
pub mod report;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::remote::RemoteEnvironment;
use crate::environment::{EnvConfig, EnvError, EnvKind, Environment, SocialEnvironment, TurnRecord};
use crate::evaluation::{budget_report, mean_se, BudgetReport, EpisodeLog, EvalError, MeanSe, Method};
use crate::featurizer::{
    build_features, precompute_arm_embeddings, serialize_history, ArmEmbeddingTable, Embedder, EmbeddingProvider,
    FeatureError, FeatureVector,
};
use crate::selector::{
    argmax, distribution_from_scores, neural_ucb_scores, sample_arm, select_epsilon_greedy, AlsoState, Exp3State,
    NeuralUcbState, SelectorError,
};
use crate::strategy_space::{augment_persona, default_pool, load_pool, Persona, PoolError, StrategyPool};
use crate::surrogate::{
    train_step, Activation, Architecture, NetworkConfig, ReplayBuffer, SurrogateError, TrainHyper, ValueNetwork,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, AgentCheckpoint, CHECKPOINT_VERSION};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "ALSO_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// True for errors caused by the configuration rather than by the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            RunError::Config(_) | RunError::Pool(_) | RunError::Env(EnvError::InvalidConfig(_))
        ) || matches!(
            self,
            RunError::Surrogate(SurrogateError::InvalidConfig(_) | SurrogateError::InvalidHyper(_))
        ) || matches!(self, RunError::Selector(SelectorError::InvalidParameter(_)))
            || matches!(self, RunError::Feature(FeatureError::InvalidProvider(_)))
    }
}

/// Which optimizer drives arm selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Also,
    EpsilonGreedy,
    Exp3,
    NeuralUcb,
    /// Bare persona every turn.
    Vanilla,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Also => "also",
            OptimizerKind::EpsilonGreedy => "epsilon_greedy",
            OptimizerKind::Exp3 => "exp3",
            OptimizerKind::NeuralUcb => "neural_ucb",
            OptimizerKind::Vanilla => "vanilla",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Also, Self::EpsilonGreedy, Self::Exp3, Self::NeuralUcb, Self::Vanilla]
            .into_iter()
            .find(|m| m.name() == s)
    }

    fn uses_surrogate(self) -> bool {
        matches!(self, Self::Also | Self::EpsilonGreedy | Self::NeuralUcb)
    }
}

/// Component removals, each valid only with the `also` optimizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Sample from `softmax(η v̂)` instead of the smoothed scores.
    pub no_smoothing: bool,
    /// Context vector fixed at zero.
    pub no_context: bool,
    /// Smoothed scores driven by the realized reward of the played arm.
    pub no_surrogate: bool,
    /// ε-greedy over `v̂` instead of exponential weights.
    pub epsilon_greedy_selector: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_smoothing", "no_context", "no_surrogate", "epsilon_greedy_selector"];

    pub fn any(&self) -> bool {
        self.no_smoothing || self.no_context || self.no_surrogate || self.epsilon_greedy_selector
    }

    pub fn set(&mut self, name: &str) -> Result<(), RunError> {
        match name {
            "no_smoothing" => self.no_smoothing = true,
            "no_context" => self.no_context = true,
            "no_surrogate" => self.no_surrogate = true,
            "epsilon_greedy_selector" => self.epsilon_greedy_selector = true,
            other => return Err(RunError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn only(name: &str) -> Result<Self, RunError> {
        let mut a = Self::default();
        a.set(name)?;
        Ok(a)
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip([self.no_smoothing, self.no_context, self.no_surrogate, self.epsilon_greedy_selector])
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundGranularity {
    /// One bandit round per dialogue turn.
    #[default]
    Turn,
    /// One arm per dialogue episode, rewarded with the episode's mean turn reward.
    Episode,
}

/// Value-network shape; the input width follows from the embedding size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp1,
            hidden: 512,
            activation: Activation::Gelu,
        }
    }
}

impl NetworkSpec {
    pub fn config(&self, input_dim: usize, init_seed: u64) -> NetworkConfig {
        NetworkConfig {
            architecture: self.architecture,
            hidden: self.hidden,
            activation: self.activation,
            input_dim,
            init_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorParams {
    pub eta: f64,
    pub lambda: f64,
    /// Uniform mixing floor on the selection distribution.
    pub gamma: f64,
    pub epsilon: f64,
    pub exp3_gamma: f64,
    /// Defaults to `exp3_gamma / K`.
    pub exp3_eta: Option<f64>,
    pub ucb_lambda_reg: f64,
    pub ucb_nu: f64,
}

impl Default for SelectorParams {
    fn default() -> Self {
        Self {
            eta: 10.0,
            lambda: 0.9,
            gamma: 0.0,
            epsilon: 0.1,
            exp3_gamma: 0.1,
            exp3_eta: None,
            ucb_lambda_reg: 0.1,
            ucb_nu: 1.0,
        }
    }
}

/// Everything that determines a run, apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario_id: String,
    /// Bundled 12-strategy pool when absent.
    pub pool_path: Option<PathBuf>,
    pub persona: String,
    pub partner_persona: String,
    pub env: EnvConfig,
    pub method: OptimizerKind,
    /// Both agents run their own optimizer.
    pub bilateral: bool,
    pub ablations: Ablations,
    pub embedding: EmbeddingProvider,
    pub network: NetworkSpec,
    pub train: TrainHyper,
    pub selector: SelectorParams,
    /// Turns of history embedded as context; all turns of the current episode when absent.
    pub context_window: Option<usize>,
    /// Bandit rounds in total, across dialogue episodes.
    pub rounds: usize,
    pub round_granularity: RoundGranularity,
    /// Train every this many rounds.
    pub update_interval: usize,
    pub buffer_capacity: Option<usize>,
    /// Budget row whose optimizer calls are counted; derived from `method` when absent.
    pub budget_method: Option<Method>,
    /// Seed of the partner's optimizer; derived from the run seed when absent.
    pub partner_seed: Option<u64>,
    /// Checkpoint to start the agent's value network from.
    pub init_checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario_id: "negotiation".into(),
            pool_path: None,
            persona: "You are Alex, a pragmatic small-business owner negotiating a supply contract.".into(),
            partner_persona: "You are Sam, a procurement lead who wants the lowest price.".into(),
            env: EnvConfig::default(),
            method: OptimizerKind::Also,
            bilateral: false,
            ablations: Ablations::default(),
            embedding: EmbeddingProvider::synthetic(64, 0),
            network: NetworkSpec::default(),
            train: TrainHyper::default(),
            selector: SelectorParams::default(),
            context_window: None,
            rounds: 20,
            round_granularity: RoundGranularity::Turn,
            update_interval: 1,
            buffer_capacity: None,
            budget_method: None,
            partner_seed: None,
            init_checkpoint: None,
            seeds: vec![0],
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Small setting for simulated runs of a thousand rounds on one core:
    /// 16-dim synthetic embeddings, a 32-unit value network trained with
    /// lr 0.01 for at most 10 passes over a 32-sample buffer, two turns of
    /// context and a 0.1 uniform floor on selection.
    pub fn compact(env: EnvConfig, rounds: usize, seeds: Vec<u64>) -> Self {
        Self {
            env,
            embedding: EmbeddingProvider::synthetic(16, 0),
            network: NetworkSpec {
                hidden: 32,
                ..NetworkSpec::default()
            },
            train: TrainHyper {
                lr: 0.01,
                max_epochs: 10,
                monitor_cap: Some(32),
                ..TrainHyper::default()
            },
            selector: SelectorParams {
                gamma: 0.1,
                ..SelectorParams::default()
            },
            buffer_capacity: Some(32),
            context_window: Some(2),
            rounds,
            seeds,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.ablations.any() && self.method != OptimizerKind::Also {
            return bad(format!("ablations apply to the also optimizer only, not {}", self.method.name()));
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.update_interval == 0 {
            return bad("update_interval must be >= 1".into());
        }
        if self.persona.trim().is_empty() || (self.bilateral && self.partner_persona.trim().is_empty()) {
            return bad("persona text must be non-empty".into());
        }
        if self.bilateral && self.env.kind == EnvKind::Remote {
            return bad("bilateral runs need a simulated environment".into());
        }
        let s = &self.selector;
        if !(0.0..=1.0).contains(&s.epsilon) || !(0.0..=1.0).contains(&s.exp3_gamma) {
            return bad("epsilon and exp3_gamma must be in [0, 1]".into());
        }
        if self.method == OptimizerKind::Exp3 && s.exp3_eta.is_none() && s.exp3_gamma == 0.0 {
            return bad("exp3 needs exp3_gamma > 0 or an explicit exp3_eta".into());
        }
        self.embedding.validate()?;
        self.train.validate()?;
        self.env.validate()?;
        self.network.config(2 * self.embedding.dim(), 0).validate()?;
        AlsoState::new(1, s.eta, s.lambda)?.with_gamma(s.gamma)?;
        Ok(())
    }

    pub fn load_pool(&self) -> Result<StrategyPool, RunError> {
        Ok(match &self.pool_path {
            Some(p) => load_pool(p)?,
            None => default_pool(),
        })
    }

    /// Budget row used for call accounting.
    pub fn budget_method(&self) -> Method {
        self.budget_method.unwrap_or(match self.method {
            OptimizerKind::Vanilla => Method::Vanilla,
            _ => Method::Also,
        })
    }

    /// Label used in logs and reports.
    pub fn variant_label(&self) -> String {
        if self.ablations.any() {
            format!("also[{}]", self.ablations.label())
        } else {
            self.method.name().to_string()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `output_dir`, overridden by [`OUTPUT_DIR_ENV`] when set.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        std::env::var_os(OUTPUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
    }
}

/// Derives independent stream seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut s = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5bd1_e995;
    s = (s ^ (s >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    s ^ (s >> 31)
}

/// Counts LLM calls a real deployment would make, per dialogue episode.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallLedger {
    pub agent_calls: usize,
    pub evaluator_calls: usize,
    pub optimizer_calls: usize,
    pub turns: usize,
}

impl CallLedger {
    /// One dialogue turn: an utterance from each side and one judgment.
    /// Prompt-rewriting baselines call their optimizer on turns 1, 6, 11, ...
    pub fn record_turn(&mut self, method: Method) {
        self.turns += 1;
        self.agent_calls += 2;
        self.evaluator_calls += 1;
        if (self.turns - 1) % crate::evaluation::OPTIMIZER_INTERVAL == 0 {
            self.optimizer_calls += match method {
                Method::Opro => 1,
                Method::Evoprompt => crate::evaluation::EVOPROMPT_POPULATION,
                _ => 0,
            };
        }
    }

    pub fn report(&self, method: Method) -> BudgetReport {
        BudgetReport {
            method,
            turns: self.turns,
            agent_calls: self.agent_calls,
            evaluator_calls: self.evaluator_calls,
            optimizer_calls: self.optimizer_calls,
        }
    }
}

/// What the agent decided for one round.
#[derive(Debug, Clone)]
struct Decision {
    arm: Option<usize>,
    pi: Vec<f64>,
    preds: Vec<f64>,
    features: Vec<FeatureVector<f64>>,
}

/// One optimizer with its persistent state.
pub struct Agent {
    pub agent_id: String,
    pub persona: Persona,
    method: OptimizerKind,
    ablations: Ablations,
    selector: SelectorParams,
    train: TrainHyper,
    context_window: Option<usize>,
    update_interval: usize,
    table: ArmEmbeddingTable<f64>,
    embedder: Embedder,
    pub network: Option<ValueNetwork<f64>>,
    pub buffer: ReplayBuffer<f64>,
    pub scores: AlsoState<f64>,
    exp3: Option<Exp3State<f64>>,
    ucb: Option<NeuralUcbState<f64>>,
    rng: ChaCha8Rng,
    rounds_seen: usize,
}

impl Agent {
    pub fn new(
        config: &RunConfig,
        pool: &StrategyPool,
        persona: Persona,
        seed: u64,
        init: Option<&AgentCheckpoint>,
    ) -> Result<Self, RunError> {
        let k = pool.len();
        let table = precompute_arm_embeddings(&config.embedding, &persona, pool)?;
        let input_dim = 2 * config.embedding.dim();
        let s = &config.selector;
        let network = if config.method.uses_surrogate() && !config.ablations.no_surrogate {
            Some(match init {
                Some(cp) => {
                    let net = cp.network()?;
                    if net.input_dim() != input_dim {
                        return Err(RunError::Checkpoint(format!(
                            "checkpoint input width {} does not match features of width {input_dim}",
                            net.input_dim()
                        )));
                    }
                    net
                }
                None => ValueNetwork::new(config.network.config(input_dim, derive_seed(seed, 11)))?,
            })
        } else {
            None
        };
        let exp3 = if config.method == OptimizerKind::Exp3 {
            let eta = s.exp3_eta.unwrap_or(s.exp3_gamma / k as f64);
            Some(Exp3State::new(k, eta, s.exp3_gamma)?)
        } else {
            None
        };
        let ucb = match (&network, config.method) {
            (Some(net), OptimizerKind::NeuralUcb) => {
                Some(NeuralUcbState::new(net.parameter_count(), s.ucb_lambda_reg, s.ucb_nu)?)
            }
            _ => None,
        };
        Ok(Self {
            agent_id: persona.agent_id.clone(),
            persona,
            method: config.method,
            ablations: config.ablations,
            selector: config.selector,
            train: config.train.clone(),
            context_window: config.context_window,
            update_interval: config.update_interval,
            table,
            embedder: Embedder::new(config.embedding.clone())?,
            network,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            scores: AlsoState::new(k, s.eta, s.lambda)?.with_gamma(s.gamma)?,
            exp3,
            ucb,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 12)),
            rounds_seen: 0,
        })
    }

    pub fn arms(&self) -> usize {
        self.table.len()
    }

    /// Provider calls made for context encoding.
    pub fn embedding_calls(&self) -> usize {
        self.embedder.calls()
    }

    pub fn checkpoint(&self) -> Option<AgentCheckpoint> {
        self.network
            .as_ref()
            .map(|net| AgentCheckpoint::new(net, &self.buffer, &self.scores.scores, self.table.pool_hash()))
    }

    fn context(&self, history: &[TurnRecord]) -> Result<FeatureVector<f64>, RunError> {
        let dim = self.table.dim();
        if self.ablations.no_context || history.is_empty() || self.context_window == Some(0) {
            return Ok(FeatureVector::zeros(dim));
        }
        Ok(self.embedder.embed(&serialize_history(history, self.context_window))?)
    }

    fn decide(&mut self, history: &[TurnRecord]) -> Result<Decision, RunError> {
        let k = self.arms();
        if self.method == OptimizerKind::Vanilla {
            return Ok(Decision {
                arm: None,
                pi: Vec::new(),
                preds: Vec::new(),
                features: Vec::new(),
            });
        }
        if let Some(exp3) = &self.exp3 {
            let pi = exp3.distribution()?;
            let arm = sample_arm(&pi, &mut self.rng)?;
            return Ok(Decision {
                arm: Some(arm),
                pi,
                preds: Vec::new(),
                features: Vec::new(),
            });
        }
        let features = if self.network.is_some() {
            build_features(&self.table, &self.context(history)?)?
        } else {
            Vec::new()
        };
        let preds = match &self.network {
            Some(net) => net.predict(&features)?,
            None => vec![0.0; k],
        };
        let (arm, pi) = if let (Some(ucb), Some(net)) = (&self.ucb, &self.network) {
            let scores = neural_ucb_scores(net, &features, ucb)?;
            let arm = argmax(&scores).ok_or(SelectorError::NoArms)?;
            (arm, one_hot(k, arm))
        } else if self.method == OptimizerKind::EpsilonGreedy || self.ablations.epsilon_greedy_selector {
            let eps = self.selector.epsilon;
            let arm = select_epsilon_greedy(&preds, eps, &mut self.rng)?;
            let best = argmax(&preds).ok_or(SelectorError::NoArms)?;
            let mut pi = vec![eps / k as f64; k];
            pi[best] += 1.0 - eps;
            (arm, pi)
        } else {
            let pi = if self.ablations.no_smoothing {
                distribution_from_scores(&preds, self.selector.eta, self.selector.gamma)?
            } else {
                self.scores.selection_distribution()?
            };
            (sample_arm(&pi, &mut self.rng)?, pi)
        };
        Ok(Decision {
            arm: Some(arm),
            pi,
            preds,
            features,
        })
    }

    /// Learns from the round's reward. Returns the prediction row to log and
    /// the surrogate's fit when it was trained.
    fn observe(&mut self, d: &Decision, reward: f64) -> Result<(Vec<f64>, Option<f64>), RunError> {
        self.rounds_seen += 1;
        let Some(arm) = d.arm else {
            return Ok((Vec::new(), None));
        };
        if let Some(exp3) = self.exp3.as_mut() {
            exp3.update_exp3(arm, reward, d.pi[arm])?;
            return Ok((Vec::new(), None));
        }
        if self.ablations.no_surrogate {
            let mut row = vec![0.0; self.arms()];
            row[arm] = reward;
            self.scores = self.scores.smooth_scores(&row)?;
            return Ok((row, None));
        }
        let mut mse = None;
        if let Some(net) = self.network.as_mut() {
            if let Some(ucb) = self.ucb.as_mut() {
                ucb.update(&net.param_gradient(d.features[arm].values())?)?;
            }
            self.buffer.push_sample(d.features[arm].clone(), reward)?;
            if self.rounds_seen % self.update_interval == 0 {
                mse = Some(train_step(net, &self.buffer, &self.train, &mut self.rng)?.final_mse);
            }
        }
        self.scores = self.scores.smooth_scores(&d.preds)?;
        Ok((d.preds.clone(), mse))
    }
}

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

/// The partner's view of a turn: utterances and scores swapped.
fn mirror(rec: &TurnRecord) -> TurnRecord {
    TurnRecord {
        turn: rec.turn,
        agent_arm: rec.opponent_arm,
        opponent_arm: rec.agent_arm,
        agent_utterance: crate::environment::agent_utterance(rec.opponent_arm),
        opponent_utterance: rec.agent_utterance.clone(),
        raw_dims: rec.opponent_raw_dims.unwrap_or(rec.raw_dims),
        reward: rec.opponent_reward.unwrap_or(rec.reward),
        opponent_raw_dims: Some(rec.raw_dims),
        opponent_reward: Some(rec.reward),
    }
}

/// Logs of one run: the focal agent, and the partner in bilateral runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub agent: EpisodeLog,
    pub partner: Option<EpisodeLog>,
    /// Final state of the focal agent's surrogate, if it has one.
    pub checkpoint: Option<AgentCheckpoint>,
}

fn open_environment(config: &RunConfig, seed: u64) -> Result<Box<dyn SocialEnvironment>, RunError> {
    let mut env_cfg = config.env.clone();
    env_cfg.seed = derive_seed(seed ^ config.env.seed, 21);
    if env_cfg.kind == EnvKind::Remote {
        let addr = env_cfg.remote_address.clone().unwrap_or_default();
        let env = RemoteEnvironment::connect(
            &addr,
            env_cfg.arms,
            env_cfg.turns_per_episode,
            std::time::Duration::from_secs(30),
        )?;
        return Ok(Box::new(env));
    }
    Ok(Box::new(Environment::new(env_cfg)?))
}

/// Runs one seeded session and returns the focal agent's log.
///
/// Configuration errors are returned as `Err`. Failures during play end the
/// run early with a log flagged incomplete.
pub fn run_episode(config: &RunConfig, seed: u64) -> Result<EpisodeLog, RunError> {
    Ok(run_session(config, seed, None)?.agent)
}

/// Like [`run_episode`], with both agents' logs and an optional starting checkpoint.
pub fn run_session(config: &RunConfig, seed: u64, init: Option<&AgentCheckpoint>) -> Result<RunOutput, RunError> {
    config.validate()?;
    let pool = config.load_pool()?;
    if pool.len() != config.env.arms {
        return Err(RunError::Config(format!(
            "pool has {} strategies but the environment has {} arms",
            pool.len(),
            config.env.arms
        )));
    }
    let loaded;
    let init = match (init, &config.init_checkpoint) {
        (Some(cp), _) => Some(cp),
        (None, Some(path)) => {
            loaded = load_checkpoint(path)?;
            Some(&loaded)
        }
        (None, None) => None,
    };
    let mut env = open_environment(config, seed)?;
    let mut agent = Agent::new(config, &pool, Persona::new("agent_1", &config.persona), seed, init)?;
    let mut partner = if config.bilateral {
        let pseed = config.partner_seed.unwrap_or_else(|| derive_seed(seed, 31));
        Some(Agent::new(config, &pool, Persona::new("agent_2", &config.partner_persona), pseed, None)?)
    } else {
        None
    };

    let label = config.variant_label();
    let mut log = EpisodeLog::new(&config.scenario_id, &agent.agent_id, &label, seed);
    let mut plog = partner
        .as_ref()
        .map(|p| EpisodeLog::new(&config.scenario_id, &p.agent_id, &label, seed));
    let simulated = config.env.kind != EnvKind::Remote;
    if simulated {
        log.expected_rewards = Some(Vec::new());
    }

    let result = play(config, &pool, env.as_mut(), &mut agent, partner.as_mut(), &mut log, plog.as_mut());
    match result {
        Ok(()) => {
            log.complete = true;
            if let Some(p) = plog.as_mut() {
                p.complete = true;
            }
        }
        Err(e) if e.is_config() => return Err(e),
        Err(e) => {
            let msg = e.to_string();
            log.error = Some(msg.clone());
            if let Some(p) = plog.as_mut() {
                p.error = Some(msg);
            }
        }
    }
    log.embedding_calls = agent.embedding_calls() + agent.arms();
    if let (Some(p), Some(pl)) = (&partner, plog.as_mut()) {
        pl.embedding_calls = p.embedding_calls() + p.arms();
    }
    Ok(RunOutput {
        checkpoint: agent.checkpoint(),
        agent: log,
        partner: plog,
    })
}

fn play(
    config: &RunConfig,
    pool: &StrategyPool,
    env: &mut dyn SocialEnvironment,
    agent: &mut Agent,
    mut partner: Option<&mut Agent>,
    log: &mut EpisodeLog,
    mut plog: Option<&mut EpisodeLog>,
) -> Result<(), RunError> {
    let budget = config.budget_method();
    let turns = env.turns_per_episode();
    let mut history: Vec<TurnRecord> = Vec::new();
    let mut ledger = CallLedger::default();
    let mut episode = 0;
    let mut held: Option<(Decision, Option<Decision>)> = None;
    let mut episode_rewards: (f64, f64) = (0.0, 0.0);

    for round in 0..config.rounds {
        if env.turn() >= turns {
            env.new_episode()?;
            log.episode_calls.push(ledger.report(budget));
            if let Some(pl) = plog.as_deref_mut() {
                pl.episode_calls.push(ledger.report(budget));
            }
            ledger = CallLedger::default();
            history.clear();
            episode += 1;
        }
        let per_episode = config.round_granularity == RoundGranularity::Episode;
        let fresh = !per_episode || env.turn() == 0;
        if fresh {
            let partner_history: Vec<TurnRecord> = history.iter().map(mirror).collect();
            let d = agent.decide(&history)?;
            let pd = match partner.as_deref_mut() {
                Some(p) => Some(p.decide(&partner_history)?),
                None => None,
            };
            held = Some((d, pd));
            episode_rewards = (0.0, 0.0);
        }
        let (d, pd) = held.as_ref().expect("decision made");

        let persona_text = match d.arm {
            Some(a) => augment_persona(&agent.persona, &pool.strategies()[a]).text,
            None => agent.persona.text.clone(),
        };
        let expected = env.expected_rewards();
        let rec = env.step_with_persona(d.arm, pd.as_ref().and_then(|p| p.arm), &persona_text)?;
        ledger.record_turn(budget);
        episode_rewards.0 += rec.reward;
        episode_rewards.1 += rec.opponent_reward.unwrap_or(0.0);

        let closes_round = !per_episode || env.turn() >= turns || round + 1 == config.rounds;
        let (row, mse, prow) = if closes_round {
            let n = if per_episode { env.turn() as f64 } else { 1.0 };
            let (row, mse) = agent.observe(d, if per_episode { episode_rewards.0 / n } else { rec.reward })?;
            let prow = match (partner.as_deref_mut(), pd) {
                (Some(p), Some(pd)) => {
                    let r = if per_episode {
                        episode_rewards.1 / n
                    } else {
                        rec.opponent_reward.unwrap_or(0.0)
                    };
                    Some(p.observe(pd, r)?)
                }
                _ => None,
            };
            (row, mse, prow)
        } else {
            (d.preds.clone(), None, pd.as_ref().map(|p| (p.preds.clone(), None)))
        };

        log.records.push(rec.clone());
        log.episode_per_turn.push(episode);
        log.predictions_per_turn.push(row);
        log.pi_per_turn.push(d.pi.clone());
        log.selected_arms.push(d.arm);
        if let (Some(m), Some(e)) = (log.expected_rewards.as_mut(), expected) {
            m.push(e);
        }
        if let Some(v) = mse {
            log.train_mse.push(v);
        }
        if let (Some(pl), Some(pd), Some((prow, pmse))) = (plog.as_deref_mut(), pd, prow) {
            pl.records.push(mirror(&rec));
            pl.episode_per_turn.push(episode);
            pl.predictions_per_turn.push(prow);
            pl.pi_per_turn.push(pd.pi.clone());
            pl.selected_arms.push(pd.arm);
            if let Some(v) = pmse {
                pl.train_mse.push(v);
            }
        }
        history.push(rec);
    }
    log.episode_calls.push(ledger.report(budget));
    if let Some(pl) = plog {
        pl.episode_calls.push(ledger.report(budget));
    }
    Ok(())
}

/// One named configuration in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub method: OptimizerKind,
    #[serde(default)]
    pub ablations: Ablations,
}

impl Variant {
    pub fn new(name: impl Into<String>, method: OptimizerKind, ablations: Ablations) -> Self {
        Self {
            name: name.into(),
            method,
            ablations,
        }
    }

    pub fn full() -> Self {
        Self::new("full", OptimizerKind::Also, Ablations::default())
    }

    pub fn ablation(name: &str) -> Result<Self, RunError> {
        Ok(Self::new(name, OptimizerKind::Also, Ablations::only(name)?))
    }

    /// The component-removal matrix: full method plus one variant per ablation.
    pub fn ablation_matrix() -> Vec<Self> {
        let mut v = vec![Self::full()];
        v.extend(Ablations::NAMES.iter().map(|n| Self::ablation(n).expect("known ablation")));
        v
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            method: self.method,
            ablations: self.ablations,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub base: RunConfig,
    pub variants: Vec<Variant>,
    /// Run cells on the rayon pool; results are identical either way.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(base: RunConfig, variants: Vec<Variant>) -> Self {
        Self {
            base,
            variants,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub variant: String,
    pub seed: u64,
    pub complete: bool,
    pub error: Option<String>,
    pub cumulative_reward: f64,
    pub mean_reward: f64,
    pub pseudo_regret: Option<f64>,
    pub dimension_means: [f64; 7],
    pub embedding_calls: usize,
}

impl CellSummary {
    pub fn from_log(variant: &str, log: &EpisodeLog) -> Self {
        Self {
            variant: variant.to_string(),
            seed: log.seed,
            complete: log.complete,
            error: log.error.clone(),
            cumulative_reward: log.cumulative_reward(),
            mean_reward: log.mean_reward(),
            pseudo_regret: log.pseudo_regret(),
            dimension_means: log.dimension_means(),
            embedding_calls: log.embedding_calls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub variant: String,
    pub cells: usize,
    pub mean_reward: MeanSe,
    pub cumulative_reward: MeanSe,
    pub pseudo_regret: Option<MeanSe>,
    pub dimension_means: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub cells: Vec<CellSummary>,
    pub aggregates: Vec<VariantAggregate>,
    /// `wins[i][j]`: seeds on which variant `i` earned strictly more cumulative reward than `j`.
    pub wins: Vec<Vec<usize>>,
    /// `wins / seeds`, with 1.0 on the diagonal.
    pub win_rates: Vec<Vec<f64>>,
    pub budgets: Vec<BudgetReport>,
    pub incomplete: bool,
    #[serde(skip)]
    pub logs: Vec<EpisodeLog>,
}

impl ExperimentReport {
    pub fn variant_index(&self, name: &str) -> Option<usize> {
        self.manifest.variants.iter().position(|v| v == name)
    }

    /// Seeds on which `a` beat `b`.
    pub fn wins_of(&self, a: &str, b: &str) -> Option<usize> {
        Some(self.wins[self.variant_index(a)?][self.variant_index(b)?])
    }
}

/// Runs every (variant, seed) cell and aggregates over seeds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    let base = &config.base;
    if base.seeds.is_empty() {
        return Err(RunError::Config("experiment needs at least one seed".into()));
    }
    if config.variants.is_empty() {
        return Err(RunError::Config("experiment needs at least one variant".into()));
    }
    let cells: Vec<(usize, u64)> = (0..config.variants.len())
        .flat_map(|v| base.seeds.iter().map(move |&s| (v, s)))
        .collect();
    for v in &config.variants {
        v.apply(base).validate()?;
    }
    let run_cell = |&(v, seed): &(usize, u64)| -> Result<EpisodeLog, RunError> {
        let variant = &config.variants[v];
        let mut log = match run_episode(&variant.apply(base), seed) {
            Ok(log) => log,
            Err(e) if e.is_config() => return Err(e),
            Err(e) => {
                let mut l = EpisodeLog::new(&base.scenario_id, "agent_1", &variant.name, seed);
                l.error = Some(e.to_string());
                l
            }
        };
        log.method = variant.name.clone();
        Ok(log)
    };
    let logs: Vec<EpisodeLog> = if config.parallel {
        cells.par_iter().map(run_cell).collect::<Result<_, _>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<_, _>>()?
    };
    assemble_report(config, logs)
}

fn assemble_report(config: &ExperimentConfig, logs: Vec<EpisodeLog>) -> Result<ExperimentReport, RunError> {
    let base = &config.base;
    let nv = config.variants.len();
    let ns = base.seeds.len();
    let cells: Vec<CellSummary> = logs
        .iter()
        .zip((0..nv).flat_map(|v| std::iter::repeat_n(v, ns)))
        .map(|(log, v)| CellSummary::from_log(&config.variants[v].name, log))
        .collect();

    let mut aggregates = Vec::with_capacity(nv);
    for (v, variant) in config.variants.iter().enumerate() {
        let slice = &cells[v * ns..(v + 1) * ns];
        let means: Vec<f64> = slice.iter().map(|c| c.mean_reward).collect();
        let cums: Vec<f64> = slice.iter().map(|c| c.cumulative_reward).collect();
        let regrets: Option<Vec<f64>> = slice.iter().map(|c| c.pseudo_regret).collect();
        let mut dims = [0.0; 7];
        for c in slice {
            for (d, x) in dims.iter_mut().zip(c.dimension_means) {
                *d += x / ns as f64;
            }
        }
        aggregates.push(VariantAggregate {
            variant: variant.name.clone(),
            cells: ns,
            mean_reward: mean_se(&means)?,
            cumulative_reward: mean_se(&cums)?,
            pseudo_regret: regrets.map(|r| mean_se(&r)).transpose()?,
            dimension_means: dims,
        });
    }

    let mut wins = vec![vec![0usize; nv]; nv];
    let mut win_rates = vec![vec![0.0; nv]; nv];
    for i in 0..nv {
        for j in 0..nv {
            if i == j {
                win_rates[i][j] = 1.0;
                continue;
            }
            wins[i][j] = (0..ns)
                .filter(|&s| cells[i * ns + s].cumulative_reward > cells[j * ns + s].cumulative_reward)
                .count();
            win_rates[i][j] = wins[i][j] as f64 / ns as f64;
        }
    }

    let turns = base.env.turns_per_episode;
    let budgets = config
        .variants
        .iter()
        .map(|v| budget_report(v.apply(base).budget_method(), turns))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ExperimentReport {
        manifest: Manifest {
            config_digest: hex::encode(Sha256::digest(
                serde_json::to_string(config).expect("config serializes").as_bytes(),
            )),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: base.seeds.clone(),
            variants: config.variants.iter().map(|v| v.name.clone()).collect(),
        },
        incomplete: cells.iter().any(|c| !c.complete),
        cells,
        aggregates,
        wins,
        win_rates,
        budgets,
        logs,
    })
}
