//! Simulated non-stationary social environment.
//!
//! Every arm has a latent mean in normalized-reward units. A turn turns that
//! mean into seven raw dimension scores (BEL, REL, KNO, SEC, SOC, FIN, GOAL),
//! each clamped to its range, and the scalar reward is their normalized
//! average. How the latent means evolve depends on [`EnvKind`]:
//!
//! * `Stationary`: fixed means.
//! * `Drifting`: mean-reverting random walk on every arm's seven per-dimension
//!   means, with shocks correlated across dimensions. Drift and observation
//!   noise are sized so that arm `k`'s reward variance sits at a fixed
//!   fraction of `drift_variance_range`.
//! * `AbruptSwitch`: one arm is lifted to `switch_high`; the lifted arm changes
//!   every `switch_period` turns.
//! * `AdaptiveAdversary`: fixed means plus a best-response opponent that
//!   depresses the agent's recent modal arm by `adversary_penalty`.
//!
//! Optional context regimes add a hidden opponent stance that lifts one arm
//! above all others.
//! The opponent announces its next stance in its utterance, so the dialogue
//! history carries the signal that decides the best arm.
//!
//! [`remote`] holds the line protocol for driving an external environment.

pub mod remote;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("episode exhausted after {turns} turns")]
    EpisodeExhausted { turns: usize },
    #[error("arm {arm} out of range for {arms} arms")]
    ArmOutOfRange { arm: usize, arms: usize },
    #[error("{dimension:?} score {value} outside [{min}, {max}]")]
    DimensionOutOfRange {
        dimension: Dimension,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("remote environment: {0}")]
    Remote(String),
}

/// The seven evaluation dimensions, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dimension {
    Bel,
    Rel,
    Kno,
    Sec,
    Soc,
    Fin,
    Goal,
}

impl Dimension {
    pub const ALL: [Dimension; 7] = [
        Dimension::Bel,
        Dimension::Rel,
        Dimension::Kno,
        Dimension::Sec,
        Dimension::Soc,
        Dimension::Fin,
        Dimension::Goal,
    ];

    /// Inclusive score range.
    pub fn range(self) -> (f64, f64) {
        match self {
            Dimension::Bel | Dimension::Kno | Dimension::Goal => (0.0, 10.0),
            Dimension::Rel | Dimension::Fin => (-5.0, 5.0),
            Dimension::Sec | Dimension::Soc => (-10.0, 0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Bel => "BEL",
            Dimension::Rel => "REL",
            Dimension::Kno => "KNO",
            Dimension::Sec => "SEC",
            Dimension::Soc => "SOC",
            Dimension::Fin => "FIN",
            Dimension::Goal => "GOAL",
        }
    }
}

pub type RawDims = [f64; 7];

/// Mean over dimensions of `(d - min) / (max - min)`.
pub fn normalize_reward(dims: &RawDims) -> Result<f64, EnvError> {
    let mut total = 0.0;
    for (&d, dim) in dims.iter().zip(Dimension::ALL) {
        let (min, max) = dim.range();
        if !(d >= min && d <= max) {
            return Err(EnvError::DimensionOutOfRange {
                dimension: dim,
                value: d,
                min,
                max,
            });
        }
        total += (d - min) / (max - min);
    }
    Ok(total / 7.0)
}

/// Maps normalized per-dimension values in `[0, 1]` to raw scores.
pub fn denormalize(units: &[f64; 7]) -> RawDims {
    let mut raw = [0.0; 7];
    for ((r, &u), dim) in raw.iter_mut().zip(units).zip(Dimension::ALL) {
        let (min, max) = dim.range();
        *r = min + u.clamp(0.0, 1.0) * (max - min);
    }
    raw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Stationary,
    Drifting,
    AbruptSwitch,
    AdaptiveAdversary,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// One shared Gaussian shock plus independent per-dimension shocks.
    Gaussian { common_std: f64, dim_std: f64 },
    /// Each dimension is at its maximum with probability equal to the latent mean, else at its minimum.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentKind {
    Static,
    Drifting,
    BestResponse,
}

/// Hidden opponent stance that favors one arm per stance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub count: usize,
    /// Per-turn probability of moving to a different stance.
    pub switch_prob: f64,
    /// Margin of the favored arm over the best other arm.
    pub bonus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub arms: usize,
    pub turns_per_episode: usize,
    pub seed: u64,
    pub drift_variance_range: [f64; 2],
    /// Per-turn autocorrelation of the drifting latent means.
    pub drift_rho: f64,
    pub switch_period: usize,
    pub switch_high: f64,
    pub adversary_memory: usize,
    pub adversary_penalty: f64,
    /// Explicit latent means; seeded draws from `mean_range` when absent.
    pub arm_means: Option<Vec<f64>>,
    pub mean_range: Option<[f64; 2]>,
    /// Kind-specific default when absent.
    pub noise: Option<NoiseModel>,
    /// Kind-specific default when absent.
    pub opponent: Option<OpponentKind>,
    /// Random-walk step of the drifting opponent's stance.
    pub opponent_step: f64,
    pub regimes: Option<RegimeConfig>,
    /// Shortfall of the no-strategy persona relative to the mean arm.
    pub baseline_gap: f64,
    /// `host:port` of a remote environment (kind `remote`).
    pub remote_address: Option<String>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Stationary,
            arms: 12,
            turns_per_episode: 20,
            seed: 0,
            drift_variance_range: [0.004, 0.015],
            drift_rho: 0.95,
            switch_period: 50,
            switch_high: 0.8,
            adversary_memory: 5,
            adversary_penalty: 0.15,
            arm_means: None,
            mean_range: None,
            noise: None,
            opponent: None,
            opponent_step: 0.02,
            regimes: None,
            baseline_gap: 0.05,
            remote_address: None,
        }
    }
}

impl EnvConfig {
    pub fn new(kind: EnvKind, arms: usize, seed: u64) -> Self {
        Self {
            kind,
            arms,
            seed,
            ..Self::default()
        }
    }

    pub fn with_turns(mut self, turns: usize) -> Self {
        self.turns_per_episode = turns;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.arms == 0 {
            return bad("arms must be >= 1".into());
        }
        if self.turns_per_episode == 0 {
            return bad("turns_per_episode must be >= 1".into());
        }
        let [lo, hi] = self.drift_variance_range;
        if !(lo > 0.0 && hi > 0.0 && lo <= hi) {
            return bad(format!("drift_variance_range [{lo}, {hi}] must satisfy 0 < low <= high"));
        }
        if !(0.0..1.0).contains(&self.drift_rho) {
            return bad(format!("drift_rho {} must be in [0, 1)", self.drift_rho));
        }
        if self.kind == EnvKind::AbruptSwitch && self.switch_period == 0 {
            return bad("switch_period must be >= 1".into());
        }
        if self.adversary_memory == 0 && self.opponent_kind() == OpponentKind::BestResponse {
            return bad("best-response opponent needs adversary_memory >= 1".into());
        }
        if let Some(means) = &self.arm_means {
            if means.len() != self.arms {
                return bad(format!("arm_means has {} entries for {} arms", means.len(), self.arms));
            }
            if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return bad("arm_means must lie in [0, 1]".into());
            }
        }
        if let Some([a, b]) = self.mean_range {
            if !(0.0 <= a && a <= b && b <= 1.0) {
                return bad(format!("mean_range [{a}, {b}] must lie in [0, 1]"));
            }
        }
        if let Some(r) = &self.regimes {
            if r.count == 0 || r.count > self.arms {
                return bad(format!("regime count {} must be in [1, arms]", r.count));
            }
            if !(0.0..=1.0).contains(&r.switch_prob) {
                return bad("regime switch_prob must be in [0, 1]".into());
            }
        }
        if self.kind == EnvKind::Remote && self.remote_address.is_none() {
            return bad("remote kind needs remote_address".into());
        }
        Ok(())
    }

    pub fn opponent_kind(&self) -> OpponentKind {
        self.opponent.unwrap_or(match self.kind {
            EnvKind::AdaptiveAdversary => OpponentKind::BestResponse,
            _ => OpponentKind::Static,
        })
    }

    fn default_mean_range(&self) -> [f64; 2] {
        self.mean_range.unwrap_or(match self.kind {
            EnvKind::AbruptSwitch => [0.35, 0.55],
            EnvKind::AdaptiveAdversary => [0.4, 0.6],
            _ => [0.35, 0.65],
        })
    }

    fn noise_model(&self) -> NoiseModel {
        self.noise.unwrap_or(NoiseModel::Gaussian {
            common_std: 0.05,
            dim_std: 0.1,
        })
    }

    /// Target reward variance of arm `k` in the drifting kind: spread over
    /// the middle 70% of the configured band.
    pub fn drift_target_variance(&self, arm: usize) -> f64 {
        let [lo, hi] = self.drift_variance_range;
        let q = if self.arms > 1 {
            arm as f64 / (self.arms - 1) as f64
        } else {
            0.5
        };
        lo + (hi - lo) * (0.15 + 0.7 * q)
    }
}

/// One turn of dialogue and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based.
    pub turn: usize,
    /// `None` when the agent spoke with its base persona only.
    pub agent_arm: Option<usize>,
    pub opponent_arm: Option<usize>,
    pub agent_utterance: String,
    pub opponent_utterance: String,
    pub raw_dims: RawDims,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opponent_raw_dims: Option<RawDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opponent_reward: Option<f64>,
}

/// Token the synthetic agent "says" when playing `arm`.
pub fn agent_utterance(arm: Option<usize>) -> String {
    match arm {
        Some(k) => format!("move_{k}"),
        None => "move_none".to_string(),
    }
}

/// The counterpart's adaptation to the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct OpponentModel {
    kind: OpponentKind,
    memory: VecDeque<usize>,
    capacity: usize,
    penalty: f64,
    /// Drifting stance and per-arm sensitivity to it.
    stance: f64,
    step: f64,
    sensitivity: Vec<f64>,
    rng: ChaCha8Rng,
}

impl OpponentModel {
    pub fn new(kind: OpponentKind, arms: usize, memory: usize, penalty: f64, step: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sensitivity = (0..arms).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            kind,
            memory: VecDeque::with_capacity(memory),
            capacity: memory.max(1),
            penalty,
            stance: 0.0,
            step,
            sensitivity,
            rng,
        }
    }

    pub fn kind(&self) -> OpponentKind {
        self.kind
    }

    pub fn stance(&self) -> f64 {
        self.stance
    }

    /// Arm with a unique maximal count of at least two in the memory window.
    pub fn modal_arm(&self) -> Option<usize> {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for &a in &self.memory {
            match counts.iter_mut().find(|(arm, _)| *arm == a) {
                Some((_, c)) => *c += 1,
                None => counts.push((a, 1)),
            }
        }
        let max = counts.iter().map(|&(_, c)| c).max()?;
        let mut top = counts.iter().filter(|&&(_, c)| c == max);
        let (arm, c) = *top.next()?;
        if c >= 2 && top.next().is_none() {
            Some(arm)
        } else {
            None
        }
    }

    /// Shift applied to `arm`'s latent mean on the next turn.
    pub fn adjustment(&self, arm: usize) -> f64 {
        match self.kind {
            OpponentKind::Static => 0.0,
            OpponentKind::Drifting => self.stance * self.sensitivity.get(arm).copied().unwrap_or(0.0),
            OpponentKind::BestResponse => {
                if self.modal_arm() == Some(arm) {
                    -self.penalty
                } else {
                    0.0
                }
            }
        }
    }

    /// Observes the agent's move and adapts.
    pub fn opponent_act(&mut self, observed_agent_arm: Option<usize>) {
        match self.kind {
            OpponentKind::Static => {}
            OpponentKind::Drifting => {
                let z: f64 = self.rng.sample(StandardNormal);
                self.stance = (self.stance + self.step * z).clamp(-1.0, 1.0);
            }
            OpponentKind::BestResponse => {
                if let Some(a) = observed_agent_arm {
                    if self.memory.len() == self.capacity {
                        self.memory.pop_front();
                    }
                    self.memory.push_back(a);
                }
            }
        }
    }
}

/// Correlation of drift shocks across the seven dimensions.
const DRIFT_CORRELATION: f64 = 0.8;
/// Variance of the dimension mean relative to one dimension's variance.
const DRIFT_MEAN_SHARE: f64 = DRIFT_CORRELATION + (1.0 - DRIFT_CORRELATION) / 7.0;

/// Seven shocks with standard deviation `std` and pairwise correlation [`DRIFT_CORRELATION`].
fn correlated_shocks<R: Rng + ?Sized>(rng: &mut R, std: f64) -> [f64; 7] {
    let shared: f64 = rng.sample(StandardNormal);
    let mut out = [0.0; 7];
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * (DRIFT_CORRELATION.sqrt() * shared + (1.0 - DRIFT_CORRELATION).sqrt() * z);
    }
    out
}

/// Latent reward process for one agent.
#[derive(Debug, Clone)]
struct ArmProcess {
    base: Vec<f64>,
    /// Per-dimension drift state of each arm.
    drift: Vec<[f64; 7]>,
    drift_std: Vec<f64>,
    rho: f64,
    offsets: Vec<[f64; 7]>,
    common_std: Vec<f64>,
    dim_std: Vec<f64>,
    bernoulli: bool,
    switch_schedule: Vec<usize>,
    rng: ChaCha8Rng,
}

impl ArmProcess {
    fn new(cfg: &EnvConfig, seed: u64) -> Self {
        let k = cfg.arms;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lo, hi] = cfg.default_mean_range();
        let base: Vec<f64> = match &cfg.arm_means {
            Some(m) => m.clone(),
            None => (0..k)
                .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect(),
        };
        // mean-zero per-dimension profile for each arm
        let offsets: Vec<[f64; 7]> = (0..k)
            .map(|_| {
                let mut o = [0.0; 7];
                for v in o.iter_mut() {
                    *v = rng.random_range(-0.05..0.05);
                }
                let mean = o.iter().sum::<f64>() / 7.0;
                o.iter_mut().for_each(|v| *v -= mean);
                o
            })
            .collect();

        let mut drift_std = vec![0.0; k];
        let mut drift = vec![[0.0; 7]; k];
        let (mut common_std, mut dim_std, mut bernoulli) = (vec![0.0; k], vec![0.0; k], false);
        match cfg.noise_model() {
            NoiseModel::Gaussian { common_std: c, dim_std: d } => {
                common_std.iter_mut().for_each(|v| *v = c);
                dim_std.iter_mut().for_each(|v| *v = d);
            }
            NoiseModel::Bernoulli => bernoulli = true,
        }
        if cfg.kind == EnvKind::Drifting {
            let rho = cfg.drift_rho;
            for arm in 0..k {
                let target = cfg.drift_target_variance(arm);
                // 60% of the variance from drift, 40% from observation noise
                let dim_var = 0.6 * target / DRIFT_MEAN_SHARE;
                drift_std[arm] = (dim_var * (1.0 - rho * rho)).sqrt();
                drift[arm] = correlated_shocks(&mut rng, dim_var.sqrt());
                if cfg.noise.is_none() {
                    let noise_var = 0.4 * target;
                    common_std[arm] = (0.3 * noise_var / 0.4).sqrt();
                    dim_std[arm] = (7.0 * 0.1 * noise_var / 0.4).sqrt();
                }
            }
        }

        let switch_schedule = if cfg.kind == EnvKind::AbruptSwitch {
            let phases = cfg.turns_per_episode / cfg.switch_period + 2;
            let mut sched = Vec::with_capacity(phases);
            let mut prev = usize::MAX;
            for _ in 0..phases {
                let mut b = rng.random_range(0..k);
                if k > 1 {
                    while b == prev {
                        b = rng.random_range(0..k);
                    }
                }
                sched.push(b);
                prev = b;
            }
            sched
        } else {
            Vec::new()
        };

        Self {
            base,
            drift,
            drift_std,
            rho: cfg.drift_rho,
            offsets,
            common_std,
            dim_std,
            bernoulli,
            switch_schedule,
            rng,
        }
    }

    fn switch_best(&self, time: usize, period: usize) -> Option<usize> {
        if self.switch_schedule.is_empty() {
            return None;
        }
        let phase = time / period;
        Some(self.switch_schedule[phase % self.switch_schedule.len()])
    }

    fn extend_schedule(&mut self, until_phase: usize, arms: usize) {
        while !self.switch_schedule.is_empty() && self.switch_schedule.len() <= until_phase {
            let prev = *self.switch_schedule.last().expect("non-empty");
            let mut b = self.rng.random_range(0..arms);
            if arms > 1 {
                while b == prev {
                    b = self.rng.random_range(0..arms);
                }
            }
            self.switch_schedule.push(b);
        }
    }

    /// Latent mean of `arm` before opponent and regime effects.
    fn mean(&self, arm: usize) -> f64 {
        self.base[arm] + self.drift[arm].iter().sum::<f64>() / 7.0
    }

    /// Draws normalized per-dimension values for an arm with expected reward `mean`.
    fn emit(&mut self, arm: Option<usize>, mean: f64) -> [f64; 7] {
        let idx = arm.unwrap_or(0);
        let mut offsets = arm.map_or([0.0; 7], |a| self.offsets[a]);
        if let Some(a) = arm {
            let d = self.drift[a];
            let avg = d.iter().sum::<f64>() / 7.0;
            offsets.iter_mut().zip(d).for_each(|(o, x)| *o += x - avg);
        }
        let mut units = [0.0; 7];
        if self.bernoulli {
            for (u, o) in units.iter_mut().zip(offsets) {
                let p = (mean + o).clamp(0.0, 1.0);
                *u = if self.rng.random::<f64>() < p { 1.0 } else { 0.0 };
            }
        } else {
            let common: f64 = self.rng.sample::<f64, _>(StandardNormal) * self.common_std[idx];
            for (u, o) in units.iter_mut().zip(offsets) {
                let z: f64 = self.rng.sample(StandardNormal);
                *u = (mean + o + common + z * self.dim_std[idx]).clamp(0.0, 1.0);
            }
        }
        units
    }

    fn advance(&mut self) {
        for arm in 0..self.drift.len() {
            if self.drift_std[arm] > 0.0 {
                let shock = correlated_shocks(&mut self.rng, self.drift_std[arm]);
                for (x, z) in self.drift[arm].iter_mut().zip(shock) {
                    *x = self.rho * *x + z;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Regimes {
    cfg: RegimeConfig,
    current: usize,
    favored: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Regimes {
    fn new(cfg: &RegimeConfig, arms: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, arms, cfg.count).into_vec();
        let current = rng.random_range(0..cfg.count);
        Self {
            cfg: cfg.clone(),
            current,
            favored: picks,
            rng,
        }
    }

    fn advance(&mut self) {
        let u: f64 = self.rng.random();
        let jump = self.rng.random_range(1..self.cfg.count.max(2));
        if self.cfg.count > 1 && u < self.cfg.switch_prob {
            self.current = (self.current + jump) % self.cfg.count;
        }
    }
}

/// Common surface of simulated and remote environments.
pub trait SocialEnvironment {
    fn arms(&self) -> usize;

    fn turns_per_episode(&self) -> usize;

    /// Turns taken in the current episode.
    fn turn(&self) -> usize;

    /// Plays one turn. `persona_text` is the augmented persona driving the agent.
    fn step_with_persona(
        &mut self,
        agent_arm: Option<usize>,
        opponent_arm: Option<usize>,
        persona_text: &str,
    ) -> Result<TurnRecord, EnvError>;

    /// Expected reward of every arm on the next turn, when the environment can tell.
    fn expected_rewards(&self) -> Option<Vec<f64>>;

    /// Starts a new episode; latent processes carry over.
    fn new_episode(&mut self) -> Result<(), EnvError>;
}

/// Seeded simulator. Everything it emits is a function of the config and
/// the sequence of arms played.
#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    agent: ArmProcess,
    partner: ArmProcess,
    opponent: OpponentModel,
    partner_opponent: OpponentModel,
    regimes: Option<Regimes>,
    turn: usize,
    time: usize,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut s = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    s = (s ^ (s >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    s ^ (s >> 31)
}

pub fn create_environment(config: EnvConfig) -> Result<Environment, EnvError> {
    Environment::new(config)
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        if config.kind == EnvKind::Remote {
            return Err(EnvError::InvalidConfig(
                "remote environments are driven through environment::remote".into(),
            ));
        }
        let seed = config.seed;
        let opp = |stream| {
            OpponentModel::new(
                config.opponent_kind(),
                config.arms,
                config.adversary_memory,
                config.adversary_penalty,
                config.opponent_step,
                sub_seed(seed, stream),
            )
        };
        Ok(Self {
            agent: ArmProcess::new(&config, sub_seed(seed, 1)),
            partner: ArmProcess::new(&config, sub_seed(seed, 2)),
            opponent: opp(3),
            partner_opponent: opp(4),
            regimes: config
                .regimes
                .as_ref()
                .map(|r| Regimes::new(r, config.arms, sub_seed(seed, 5))),
            turn: 0,
            time: 0,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Steps taken since creation, across episodes.
    pub fn time(&self) -> usize {
        self.time
    }

    pub fn opponent(&self) -> &OpponentModel {
        &self.opponent
    }

    /// Arm lifted by the abrupt-switch schedule at `time`.
    pub fn switch_best_arm_at(&mut self, time: usize) -> Option<usize> {
        let period = self.config.switch_period.max(1);
        self.agent.extend_schedule(time / period, self.config.arms);
        self.agent.switch_best(time, period)
    }

    /// Current stance index and the arm it favors.
    pub fn regime(&self) -> Option<(usize, usize)> {
        self.regimes.as_ref().map(|r| (r.current, r.favored[r.current]))
    }

    /// Latent mean before the stance effect.
    fn base_latent(&mut self, who: usize, arm: usize) -> f64 {
        let period = self.config.switch_period.max(1);
        let high = self.config.switch_high;
        let time = self.time;
        let arms = self.config.arms;
        let (process, opponent) = if who == 0 {
            (&mut self.agent, &self.opponent)
        } else {
            (&mut self.partner, &self.partner_opponent)
        };
        process.extend_schedule(time / period, arms);
        let mut m = process.mean(arm);
        if process.switch_best(time, period) == Some(arm) {
            m = high;
        }
        (m + opponent.adjustment(arm)).clamp(0.0, 1.0)
    }

    /// Expected reward of `arm`. Under a stance, the favored arm sits `bonus`
    /// above the best other arm.
    fn latent(&mut self, who: usize, arm: usize) -> f64 {
        let favored = self.regimes.as_ref().map(|r| (r.favored[r.current], r.cfg.bonus));
        match favored {
            Some((f, bonus)) if f == arm => {
                let best_other = (0..self.config.arms)
                    .filter(|&a| a != arm)
                    .map(|a| self.base_latent(who, a))
                    .fold(0.0, f64::max);
                (best_other + bonus).clamp(0.0, 1.0)
            }
            _ => self.base_latent(who, arm),
        }
    }

    fn baseline(&mut self, who: usize) -> f64 {
        let k = self.config.arms;
        let total: f64 = (0..k).map(|a| self.latent(who, a)).sum();
        (total / k as f64 - self.config.baseline_gap).clamp(0.0, 1.0)
    }

    /// Expected normalized reward of every arm for the agent on the next turn.
    pub fn expected_rewards_now(&mut self) -> Vec<f64> {
        (0..self.config.arms).map(|a| self.latent(0, a)).collect()
    }

    fn check_arm(&self, arm: Option<usize>) -> Result<(), EnvError> {
        match arm {
            Some(a) if a >= self.config.arms => Err(EnvError::ArmOutOfRange {
                arm: a,
                arms: self.config.arms,
            }),
            _ => Ok(()),
        }
    }

    /// Plays one turn for the agent, and for the partner when `opponent_arm` is set.
    pub fn step(&mut self, agent_arm: Option<usize>, opponent_arm: Option<usize>) -> Result<TurnRecord, EnvError> {
        if self.turn >= self.config.turns_per_episode {
            return Err(EnvError::EpisodeExhausted {
                turns: self.config.turns_per_episode,
            });
        }
        self.check_arm(agent_arm)?;
        self.check_arm(opponent_arm)?;

        let mean = match agent_arm {
            Some(a) => self.latent(0, a),
            None => self.baseline(0),
        };
        let units = self.agent.emit(agent_arm, mean);
        let raw_dims = denormalize(&units);
        let reward = normalize_reward(&raw_dims)?;

        let (opponent_raw_dims, opponent_reward) = match opponent_arm {
            Some(b) => {
                let m = self.latent(1, b);
                let raw = denormalize(&self.partner.emit(Some(b), m));
                (Some(raw), Some(normalize_reward(&raw)?))
            }
            None => (None, None),
        };

        self.agent.advance();
        self.partner.advance();
        self.opponent.opponent_act(agent_arm);
        self.partner_opponent.opponent_act(opponent_arm);
        let mut opponent_utterance = String::from("reply");
        if let Some(r) = self.regimes.as_mut() {
            r.advance();
            opponent_utterance.push_str(&format!(" stance_{}", r.current));
        }

        self.turn += 1;
        self.time += 1;
        Ok(TurnRecord {
            turn: self.turn,
            agent_arm,
            opponent_arm,
            agent_utterance: agent_utterance(agent_arm),
            opponent_utterance,
            raw_dims,
            reward,
            opponent_raw_dims,
            opponent_reward,
        })
    }
}

impl SocialEnvironment for Environment {
    fn arms(&self) -> usize {
        self.config.arms
    }

    fn turns_per_episode(&self) -> usize {
        self.config.turns_per_episode
    }

    fn turn(&self) -> usize {
        self.turn
    }

    fn step_with_persona(
        &mut self,
        agent_arm: Option<usize>,
        opponent_arm: Option<usize>,
        _persona_text: &str,
    ) -> Result<TurnRecord, EnvError> {
        self.step(agent_arm, opponent_arm)
    }

    fn expected_rewards(&self) -> Option<Vec<f64>> {
        Some(self.clone().expected_rewards_now())
    }

    fn new_episode(&mut self) -> Result<(), EnvError> {
        self.turn = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_reward(&[10.0, 5.0, 10.0, 0.0, 0.0, 5.0, 10.0]).unwrap(), 1.0);
        assert_eq!(normalize_reward(&[0.0, -5.0, 0.0, -10.0, -10.0, -5.0, 0.0]).unwrap(), 0.0);
        let r = normalize_reward(&[8.0, 0.0, 5.0, -2.0, 0.0, 1.0, 7.0]).unwrap();
        assert!((r - 0.7).abs() < 1e-12);
        let err = normalize_reward(&[8.0, 0.0, 5.0, 1.0, 0.0, 1.0, 7.0]).unwrap_err();
        assert!(matches!(err, EnvError::DimensionOutOfRange { dimension: Dimension::Sec, .. }));
        assert!(normalize_reward(&[f64::NAN, 0.0, 5.0, -1.0, 0.0, 1.0, 7.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EnvConfig::default();
        c.drift_variance_range = [0.02, 0.01];
        assert!(matches!(Environment::new(c), Err(EnvError::InvalidConfig(_))));
        let c = EnvConfig {
            arms: 0,
            ..EnvConfig::default()
        };
        assert!(Environment::new(c).is_err());
        let c = EnvConfig {
            arm_means: Some(vec![0.5]),
            ..EnvConfig::default()
        };
        assert!(Environment::new(c).is_err());
        let c = EnvConfig {
            kind: EnvKind::AdaptiveAdversary,
            adversary_memory: 0,
            ..EnvConfig::default()
        };
        assert!(Environment::new(c).is_err());
    }

    #[test]
    fn stationary_best_arm() {
        let cfg = EnvConfig {
            arms: 2,
            arm_means: Some(vec![0.9, 0.1]),
            turns_per_episode: 100,
            ..EnvConfig::default()
        };
        let mut env = Environment::new(cfg).unwrap();
        for _ in 0..100 {
            let e = env.expected_rewards_now();
            assert!(e[0] > e[1]);
            env.step(Some(1), None).unwrap();
        }
    }

    #[test]
    fn episode_length_enforced() {
        let mut env = Environment::new(EnvConfig::default()).unwrap();
        for t in 1..=20 {
            assert_eq!(env.step(Some(0), None).unwrap().turn, t);
        }
        assert_eq!(env.step(Some(0), None), Err(EnvError::EpisodeExhausted { turns: 20 }));
        env.new_episode().unwrap();
        assert_eq!(env.step(Some(0), None).unwrap().turn, 1);
        assert_eq!(env.time(), 21);
    }

    #[test]
    fn arm_range_checked() {
        let mut env = Environment::new(EnvConfig::new(EnvKind::Stationary, 3, 0)).unwrap();
        assert_eq!(env.step(Some(3), None), Err(EnvError::ArmOutOfRange { arm: 3, arms: 3 }));
        assert!(env.step(Some(0), Some(7)).is_err());
    }

    #[test]
    fn records_are_consistent() {
        for kind in [EnvKind::Stationary, EnvKind::Drifting, EnvKind::AbruptSwitch, EnvKind::AdaptiveAdversary] {
            let mut env = Environment::new(EnvConfig::new(kind, 4, 11).with_turns(200)).unwrap();
            for t in 0..200 {
                let rec = env.step(Some(t % 4), Some((t + 1) % 4)).unwrap();
                assert_eq!(rec.reward, normalize_reward(&rec.raw_dims).unwrap());
                assert!((0.0..=1.0).contains(&rec.reward));
                let o = rec.opponent_raw_dims.unwrap();
                assert_eq!(rec.opponent_reward.unwrap(), normalize_reward(&o).unwrap());
            }
        }
    }

    #[test]
    fn abrupt_switch_schedule() {
        let mut env = Environment::new(EnvConfig::new(EnvKind::AbruptSwitch, 12, 3).with_turns(400)).unwrap();
        let mut best = Vec::new();
        for _ in 0..400 {
            let e = env.expected_rewards_now();
            best.push(crate::selector::argmax(&e).unwrap());
            env.step(Some(0), None).unwrap();
        }
        for t in 1..400 {
            if t % 50 == 0 {
                assert_ne!(best[t], best[t - 1], "no switch at {t}");
            } else {
                assert_eq!(best[t], best[t - 1], "unexpected switch at {t}");
            }
        }
    }

    #[test]
    fn vanilla_persona_trails_mean_arm() {
        let cfg = EnvConfig {
            arm_means: Some(vec![0.6, 0.4]),
            arms: 2,
            noise: Some(NoiseModel::Gaussian {
                common_std: 0.0,
                dim_std: 0.0,
            }),
            ..EnvConfig::default()
        };
        let mut env = Environment::new(cfg).unwrap();
        let rec = env.step(None, None).unwrap();
        assert!((rec.reward - 0.45).abs() < 1e-9);
        assert_eq!(rec.agent_utterance, "move_none");
    }

    #[test]
    fn static_and_zero_step_opponents_do_nothing() {
        let mut s = OpponentModel::new(OpponentKind::Static, 3, 5, 0.15, 0.0, 1);
        let before = s.clone();
        for a in [0, 1, 2, 2, 2] {
            s.opponent_act(Some(a));
        }
        assert_eq!(s, before);
        let mut d = OpponentModel::new(OpponentKind::Drifting, 3, 5, 0.15, 0.0, 1);
        for a in [0, 1, 2] {
            d.opponent_act(Some(a));
        }
        assert!((0..3).all(|a| d.adjustment(a) == 0.0));
    }

    #[test]
    fn best_response_needs_a_unique_mode() {
        let mut o = OpponentModel::new(OpponentKind::BestResponse, 4, 5, 0.15, 0.0, 0);
        o.opponent_act(Some(1));
        assert_eq!(o.modal_arm(), None);
        o.opponent_act(Some(2));
        assert_eq!(o.modal_arm(), None);
        o.opponent_act(Some(2));
        assert_eq!(o.modal_arm(), Some(2));
        assert_eq!(o.adjustment(2), -0.15);
        assert_eq!(o.adjustment(1), 0.0);
    }

    #[test]
    fn regimes_announce_the_next_stance() {
        let cfg = EnvConfig {
            kind: EnvKind::Drifting,
            regimes: Some(RegimeConfig {
                count: 3,
                switch_prob: 0.2,
                bonus: 0.3,
            }),
            turns_per_episode: 300,
            ..EnvConfig::default()
        };
        let mut env = Environment::new(cfg).unwrap();
        for _ in 0..300 {
            let rec = env.step(Some(0), None).unwrap();
            let (stance, favored) = env.regime().unwrap();
            assert!(rec.opponent_utterance.ends_with(&format!("stance_{stance}")));
            let e = env.expected_rewards_now();
            assert_eq!(crate::selector::argmax(&e), Some(favored));
        }
    }
}
