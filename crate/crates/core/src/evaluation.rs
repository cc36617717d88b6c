//! Metrics over run traces: pseudo-regret, reward aggregates, drift
//! statistics and per-episode LLM call budgets.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::TurnRecord;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in reward matrix")]
    NonFinite,
    #[error("turn count must be >= 1")]
    ZeroTurns,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("no values to aggregate")]
    Empty,
    #[error("csv output: {0}")]
    Csv(String),
}

/// Trace of one optimizer run against one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario_id: String,
    pub agent_id: String,
    pub method: String,
    pub seed: u64,
    pub records: Vec<TurnRecord>,
    /// Dialogue episode each turn belongs to.
    pub episode_per_turn: Vec<usize>,
    pub predictions_per_turn: Vec<Vec<f64>>,
    pub pi_per_turn: Vec<Vec<f64>>,
    /// `None` for turns played with the bare persona.
    pub selected_arms: Vec<Option<usize>>,
    /// Expected reward of every arm at each turn (simulated environments only).
    pub expected_rewards: Option<Vec<Vec<f64>>>,
    /// Surrogate fit on the buffer after each update, when a surrogate is trained.
    pub train_mse: Vec<f64>,
    /// Counted LLM calls of each dialogue episode.
    pub episode_calls: Vec<BudgetReport>,
    /// Embedding provider invocations, arm table included.
    pub embedding_calls: usize,
    pub complete: bool,
    pub error: Option<String>,
}

impl EpisodeLog {
    pub fn new(scenario_id: impl Into<String>, agent_id: impl Into<String>, method: impl Into<String>, seed: u64) -> Self {
        Self {
            scenario_id: scenario_id.into(),
            agent_id: agent_id.into(),
            method: method.into(),
            seed,
            records: Vec::new(),
            episode_per_turn: Vec::new(),
            predictions_per_turn: Vec::new(),
            pi_per_turn: Vec::new(),
            selected_arms: Vec::new(),
            expected_rewards: None,
            train_mse: Vec::new(),
            episode_calls: Vec::new(),
            embedding_calls: 0,
            complete: false,
            error: None,
        }
    }

    pub fn turns(&self) -> usize {
        self.records.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.cumulative_reward() / self.records.len() as f64
    }

    /// Mean reward over the last `n` turns (all turns if fewer).
    pub fn tail_mean_reward(&self, n: usize) -> f64 {
        let start = self.records.len().saturating_sub(n);
        let tail = &self.records[start..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.reward).sum::<f64>() / tail.len() as f64
    }

    /// Checks list lengths and that every selection distribution sums to one.
    pub fn validate(&self) -> Result<(), EvalError> {
        let t = self.records.len();
        let lens = [
            ("episode_per_turn", self.episode_per_turn.len()),
            ("predictions_per_turn", self.predictions_per_turn.len()),
            ("pi_per_turn", self.pi_per_turn.len()),
            ("selected_arms", self.selected_arms.len()),
        ];
        for (name, n) in lens {
            if n != t {
                return Err(EvalError::ShapeMismatch(format!("{name} has {n} rows for {t} turns")));
            }
        }
        if let Some(m) = &self.expected_rewards {
            if m.len() != t {
                return Err(EvalError::ShapeMismatch(format!("expected_rewards has {} rows for {t} turns", m.len())));
            }
        }
        for (i, row) in self.pi_per_turn.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(EvalError::ShapeMismatch(format!("pi row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Pseudo-regret against expected rewards, if available and every turn played an arm.
    pub fn pseudo_regret(&self) -> Option<f64> {
        let m = self.expected_rewards.as_ref()?;
        let sel: Option<Vec<usize>> = self.selected_arms.iter().copied().collect();
        pseudo_regret(m, &sel?).ok()
    }

    /// Mean of each raw dimension over the trace.
    pub fn dimension_means(&self) -> [f64; 7] {
        dimension_means(&self.records)
    }
}

fn check_matrix(matrix: &[Vec<f64>], selected: &[usize]) -> Result<usize, EvalError> {
    if matrix.len() != selected.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} reward rows for {} selections",
            matrix.len(),
            selected.len()
        )));
    }
    let k = matrix.first().map_or(0, |r| r.len());
    for (t, (row, &a)) in matrix.iter().zip(selected).enumerate() {
        if row.len() != k {
            return Err(EvalError::ShapeMismatch(format!("row {t} has {} arms, expected {k}", row.len())));
        }
        if a >= k {
            return Err(EvalError::ShapeMismatch(format!("selection {a} at turn {t} outside {k} arms")));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite);
        }
    }
    Ok(k)
}

/// `max_k sum_t r[t][k] - sum_t r[t][selected[t]]`.
pub fn pseudo_regret(per_arm_rewards: &[Vec<f64>], selected: &[usize]) -> Result<f64, EvalError> {
    Ok(regret_curve(per_arm_rewards, selected)?.last().copied().unwrap_or(0.0))
}

/// Pseudo-regret of every prefix of the trace.
pub fn regret_curve(per_arm_rewards: &[Vec<f64>], selected: &[usize]) -> Result<Vec<f64>, EvalError> {
    let k = check_matrix(per_arm_rewards, selected)?;
    let mut arm_totals = vec![0.0; k];
    let mut played = 0.0;
    let mut out = Vec::with_capacity(selected.len());
    for (row, &a) in per_arm_rewards.iter().zip(selected) {
        for (tot, v) in arm_totals.iter_mut().zip(row) {
            *tot += v;
        }
        played += row[a];
        let best = arm_totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push(best - played);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Instinct,
    Also,
    Opro,
    Evoprompt,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Vanilla, Method::Instinct, Method::Also, Method::Opro, Method::Evoprompt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Instinct => "instinct",
            Method::Also => "also",
            Method::Opro => "opro",
            Method::Evoprompt => "evoprompt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| EvalError::UnknownMethod(s.to_string()))
    }
}

/// LLM calls spent in one episode of `T` turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub method: Method,
    pub turns: usize,
    pub agent_calls: usize,
    pub evaluator_calls: usize,
    pub optimizer_calls: usize,
}

/// Turns between optimizer calls for the prompt-rewriting baselines.
pub const OPTIMIZER_INTERVAL: usize = 5;
/// Candidates EvoPrompt generates per optimizer round.
pub const EVOPROMPT_POPULATION: usize = 5;

pub fn budget_report(method: Method, turns: usize) -> Result<BudgetReport, EvalError> {
    if turns == 0 {
        return Err(EvalError::ZeroTurns);
    }
    let rounds = turns.div_ceil(OPTIMIZER_INTERVAL);
    let optimizer_calls = match method {
        Method::Vanilla | Method::Instinct | Method::Also => 0,
        Method::Opro => rounds,
        Method::Evoprompt => EVOPROMPT_POPULATION * rounds,
    };
    Ok(BudgetReport {
        method,
        turns,
        agent_calls: 2 * turns,
        evaluator_calls: turns,
        optimizer_calls,
    })
}

/// Per-arm reward mean and unbiased variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Statistics of each arm's observed rewards; `None` for arms seen fewer than twice.
pub fn drift_stats<'a>(records: impl IntoIterator<Item = &'a TurnRecord>, arms: usize) -> Vec<Option<ArmStats>> {
    let mut per_arm: Vec<Vec<f64>> = vec![Vec::new(); arms];
    for r in records {
        if let Some(a) = r.agent_arm.filter(|&a| a < arms) {
            per_arm[a].push(r.reward);
        }
    }
    per_arm
        .iter()
        .map(|xs| {
            if xs.len() < 2 {
                return None;
            }
            let (mean, variance) = mean_variance(xs);
            Some(ArmStats {
                count: xs.len(),
                mean,
                variance,
            })
        })
        .collect()
}

/// Mean and unbiased variance. Inputs are summed in sorted order so the
/// result does not depend on the order of `xs`.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = sorted.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let variance = if sorted.len() > 1 {
        dev.iter().sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, variance)
}

/// Mean and standard error over independent seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn mean_se(values: &[f64]) -> Result<MeanSe, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mean, var) = mean_variance(values);
    Ok(MeanSe {
        mean,
        se: (var / values.len() as f64).sqrt(),
        n: values.len(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn dimension_means(records: &[TurnRecord]) -> [f64; 7] {
    let mut out = [0.0; 7];
    if records.is_empty() {
        return out;
    }
    for r in records {
        for (o, d) in out.iter_mut().zip(r.raw_dims) {
            *o += d;
        }
    }
    out.iter_mut().for_each(|o| *o /= records.len() as f64);
    out
}

/// Writes one CSV row per turn: run, episode, turn, method, arm, reward,
/// regret so far and the selection distribution.
pub fn write_turn_csv<W: Write>(logs: &[EpisodeLog], out: W) -> Result<(), EvalError> {
    let k = logs
        .iter()
        .flat_map(|l| l.pi_per_turn.iter().map(|r| r.len()))
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["run", "seed", "agent", "episode", "turn", "method", "arm", "reward", "regret_so_far"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|i| format!("pi_{i}")));
    let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (run, log) in logs.iter().enumerate() {
        let regret = match (&log.expected_rewards, log.selected_arms.iter().copied().collect::<Option<Vec<_>>>()) {
            (Some(m), Some(sel)) => Some(regret_curve(m, &sel)?),
            _ => None,
        };
        for (t, rec) in log.records.iter().enumerate() {
            let mut row = vec![
                run.to_string(),
                log.seed.to_string(),
                log.agent_id.clone(),
                log.episode_per_turn.get(t).map_or(String::new(), |e| e.to_string()),
                rec.turn.to_string(),
                log.method.clone(),
                rec.agent_arm.map_or(String::new(), |a| a.to_string()),
                rec.reward.to_string(),
                regret.as_ref().map_or(String::new(), |r| r[t].to_string()),
            ];
            let pi = log.pi_per_turn.get(t).map(|r| r.as_slice()).unwrap_or(&[]);
            row.extend((0..k).map(|i| pi.get(i).map_or(String::new(), |p| p.to_string())));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}
