//! `also`: run, sweep and inspect the strategy optimizer from the shell.
//!
//! Every command that writes files resolves its output directory from
//! `--output-dir`, then `ALSO_OUTPUT_DIR`, then the config's `output_dir`,
//! then `./also-output`. Exit codes: 0 ok, 1 config error, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use also_core::environment::{EnvConfig, EnvKind, Environment};
use also_core::evaluation::{budget_report, drift_stats, Method};
use also_core::featurizer::EmbeddingProvider;
use also_core::harness::report::{write_experiment, write_logs, write_value};
use also_core::harness::{
    load_checkpoint, run_experiment, run_session, save_checkpoint, ExperimentConfig, ExperimentReport, OptimizerKind,
    RunConfig, RunError, Variant,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "also", version, about = "Adversarial online strategy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded session and write its logs.
    Run(RunArgs),
    /// Run a sweep of variants over seeds.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        /// Variant: `full`, an ablation name, or an optimizer name. Repeatable.
        #[arg(long = "variant")]
        variants: Vec<String>,
        /// Run cells one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Run the full method against each single-component removal.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sequential: bool,
    },
    /// Measure per-arm reward variance of the drifting environment.
    CalibrateDrift {
        /// Environment config (JSON); the drifting defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 2000)]
        turns: usize,
    },
    /// Per-episode call budget of each method.
    Budget {
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 20)]
        turns: usize,
    },
    /// Save or load a trained value network.
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
}

#[derive(Subcommand)]
enum CheckpointCommand {
    /// Train on one session and save the agent's network, scores and buffer.
    Export {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start a session from a saved checkpoint and write its logs.
    Import {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "from")]
        from: PathBuf,
    },
}

/// Config file plus overrides of its most used fields.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run config; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the compact preset instead of the defaults.
    #[arg(long)]
    compact: bool,
    /// Seed to run. Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    method: Option<String>,
    /// stationary, drifting, abrupt_switch, adaptive_adversary or remote.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    remote_address: Option<String>,
    #[arg(long)]
    arms: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    turns_per_episode: Option<usize>,
    /// turn or episode.
    #[arg(long)]
    round_granularity: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// linear, mlp1 or mlp2_pre_ln.
    #[arg(long)]
    architecture: Option<String>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    context_window: Option<usize>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    /// Component to remove. Repeatable.
    #[arg(long = "ablation")]
    ablations: Vec<String>,
    #[arg(long)]
    bilateral: bool,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> RunError {
    RunError::Config(msg.into())
}

/// Parses a snake_case enum through its serde form.
fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, RunError> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| config_err(format!("unknown {what} `{s}`")))
}

fn read_json(path: &Path) -> Result<Value, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn parse_method(s: &str) -> Result<OptimizerKind, RunError> {
    OptimizerKind::parse(s).ok_or_else(|| config_err(format!("unknown method `{s}`")))
}

impl RunArgs {
    fn base(&self) -> Result<RunConfig, RunError> {
        let value = match &self.config {
            Some(p) => read_json(p)?,
            None => json!({}),
        };
        let value = value.get("base").cloned().unwrap_or(value);
        if self.compact {
            let preset = RunConfig::compact(EnvConfig::default(), 1000, vec![0]);
            let mut merged = serde_json::to_value(preset).expect("config serializes");
            merge(&mut merged, value);
            serde_json::from_value(merged).map_err(|e| config_err(e.to_string()))
        } else {
            serde_json::from_value(value).map_err(|e| config_err(e.to_string()))
        }
    }

    fn resolve(&self) -> Result<RunConfig, RunError> {
        let mut c = self.base()?;
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(m) = &self.method {
            c.method = parse_method(m)?;
        }
        if let Some(k) = &self.env {
            c.env.kind = parse_enum::<EnvKind>("environment", k)?;
        }
        if let Some(a) = &self.remote_address {
            c.env.remote_address = Some(a.clone());
        }
        if let Some(k) = self.arms {
            c.env.arms = k;
        }
        if let Some(r) = self.rounds {
            c.rounds = r;
        }
        if let Some(t) = self.turns_per_episode {
            c.env.turns_per_episode = t;
        }
        if let Some(g) = &self.round_granularity {
            c.round_granularity = parse_enum("round granularity", g)?;
        }
        c.selector.eta = self.eta.unwrap_or(c.selector.eta);
        c.selector.lambda = self.lambda.unwrap_or(c.selector.lambda);
        c.selector.gamma = self.gamma.unwrap_or(c.selector.gamma);
        c.selector.epsilon = self.epsilon.unwrap_or(c.selector.epsilon);
        c.train.lr = self.lr.unwrap_or(c.train.lr);
        c.train.max_epochs = self.max_epochs.unwrap_or(c.train.max_epochs);
        c.network.hidden = self.hidden.unwrap_or(c.network.hidden);
        if let Some(a) = &self.architecture {
            c.network.architecture = parse_enum("architecture", a)?;
        }
        if let Some(d) = self.embedding_dim {
            c.embedding = match c.embedding {
                EmbeddingProvider::Synthetic { seed, .. } => {
                    EmbeddingProvider::synthetic(d, seed)
                }
                EmbeddingProvider::Remote {
                    endpoint,
                    model,
                    timeout_ms,
                    retries,
                    ..
                } => EmbeddingProvider::Remote {
                    dim: d,
                    endpoint,
                    model,
                    timeout_ms,
                    retries,
                },
            };
        }
        if self.context_window.is_some() {
            c.context_window = self.context_window;
        }
        if self.buffer_capacity.is_some() {
            c.buffer_capacity = self.buffer_capacity;
        }
        for a in &self.ablations {
            c.ablations.set(a)?;
        }
        c.bilateral |= self.bilateral;
        if self.pool.is_some() {
            c.pool_path = self.pool.clone();
        }
        if self.init_checkpoint.is_some() {
            c.init_checkpoint = self.init_checkpoint.clone();
        }
        if self.output_dir.is_some() {
            c.output_dir = self.output_dir.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn output_dir(&self, c: &RunConfig) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| c.resolved_output_dir())
            .unwrap_or_else(|| PathBuf::from("also-output"))
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn parse_variant(name: &str) -> Result<Variant, RunError> {
    if name == "full" {
        return Ok(Variant::full());
    }
    if let Some(kind) = OptimizerKind::parse(name) {
        return Ok(Variant::new(name, kind, Default::default()));
    }
    Variant::ablation(name)
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn print(value: &Value) {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn session(args: &RunArgs, init_from: Option<&Path>, save_to: Option<&Path>) -> Result<(), RunError> {
    let cfg = args.resolve()?;
    let init = match init_from {
        Some(p) => Some(load_checkpoint(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let out = run_session(&cfg, seed, init.as_ref())?;
    let dir = args.output_dir(&cfg);
    write_value(&dir.join("config.json"), &cfg)?;
    let mut logs = vec![out.agent.clone()];
    logs.extend(out.partner.clone());
    write_logs(&dir, &logs)?;
    let checkpoint = match (&out.checkpoint, save_to) {
        (Some(cp), Some(path)) => {
            save_checkpoint(cp, path)?;
            Some(path.to_path_buf())
        }
        (Some(cp), None) => {
            let path = dir.join("checkpoint.json");
            save_checkpoint(cp, &path)?;
            Some(path)
        }
        (None, Some(_)) => return Err(config_err(format!("method {} has no value network", cfg.method.name()))),
        (None, None) => None,
    };
    let log = &out.agent;
    print(&json!({
        "seed": seed,
        "method": log.method,
        "turns": log.turns(),
        "complete": log.complete,
        "error": log.error,
        "mean_reward": log.mean_reward(),
        "cumulative_reward": log.cumulative_reward(),
        "pseudo_regret": log.pseudo_regret(),
        "output_dir": dir,
        "checkpoint": checkpoint,
    }));
    if log.complete {
        Ok(())
    } else {
        Err(runtime_err(log.error.clone().unwrap_or_default()))
    }
}

/// A failure during play, reported with the runtime exit code.
fn runtime_err(msg: String) -> RunError {
    RunError::Io(std::io::Error::other(msg))
}

fn sweep(args: &RunArgs, variants: Vec<Variant>, sequential: bool) -> Result<(), RunError> {
    let base = args.resolve()?;
    let dir = args.output_dir(&base);
    let exp = ExperimentConfig {
        base,
        variants,
        parallel: !sequential,
    };
    let report: ExperimentReport = run_experiment(&exp)?;
    write_experiment(&dir, &exp, &report)?;
    print(&json!({
        "output_dir": dir,
        "aggregates": report.aggregates,
        "win_rates": report.win_rates,
        "incomplete": report.incomplete,
    }));
    if report.incomplete {
        Err(runtime_err("some cells did not complete; see report.json".into()))
    } else {
        Ok(())
    }
}

fn experiment_variants(args: &RunArgs, names: &[String]) -> Result<Vec<Variant>, RunError> {
    if !names.is_empty() {
        return names.iter().map(|n| parse_variant(n)).collect();
    }
    if let Some(p) = &args.config {
        if let Some(v) = read_json(p)?.get("variants") {
            return serde_json::from_value(v.clone()).map_err(|e| config_err(format!("variants: {e}")));
        }
    }
    Ok(vec![Variant::full()])
}

fn calibrate(config: Option<&Path>, seeds: u64, turns: usize) -> Result<(), RunError> {
    let mut env = match config {
        Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| config_err(e.to_string()))?,
        None => EnvConfig::new(EnvKind::Drifting, 12, 0),
    };
    env.turns_per_episode = turns;
    env.validate()?;
    let [lo, hi] = env.drift_variance_range;
    let band = [0.8 * lo, 1.2 * hi];
    let mut rows = Vec::new();
    let mut in_band = true;
    for seed in 0..seeds {
        let mut e = Environment::new(EnvConfig {
            seed,
            ..env.clone()
        })?;
        let records = (0..turns)
            .map(|t| e.step(Some(t % env.arms), None))
            .collect::<Result<Vec<_>, _>>()?;
        let stats = drift_stats(&records, env.arms);
        for s in stats.iter().flatten() {
            in_band &= s.variance >= band[0] && s.variance <= band[1];
        }
        rows.push(json!({"seed": seed, "arms": stats}));
    }
    print(&json!({"band": band, "in_band": in_band, "seeds": rows}));
    Ok(())
}

fn budget(method: Option<&str>, turns: usize) -> Result<(), RunError> {
    let methods = match method {
        Some(m) => vec![m.parse::<Method>().map_err(|e| config_err(e.to_string()))?],
        None => Method::ALL.to_vec(),
    };
    let rows = methods
        .into_iter()
        .map(|m| budget_report(m, turns).map_err(|e| config_err(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    print(&serde_json::to_value(rows).expect("report serializes"));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(args) => session(&args, None, None),
        Command::Experiment {
            run,
            variants,
            sequential,
        } => {
            let v = experiment_variants(&run, &variants)?;
            sweep(&run, v, sequential)
        }
        Command::Ablate { run, sequential } => sweep(&run, Variant::ablation_matrix(), sequential),
        Command::CalibrateDrift { config, seeds, turns } => calibrate(config.as_deref(), seeds, turns),
        Command::Budget { method, turns } => budget(method.as_deref(), turns),
        Command::Checkpoint(CheckpointCommand::Export { run, out }) => session(&run, None, Some(&out)),
        Command::Checkpoint(CheckpointCommand::Import { run, from }) => session(&run, Some(&from), None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
