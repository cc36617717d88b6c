//! Acceptance criteria AC1 to AC11.
//!
//! Runs every criterion, prints one `PASS`/`FAIL` line each with the measured
//! quantity and wall time, and exits non-zero if any criterion failed.

use std::time::{Duration, Instant};

use also_core::environment::{
    normalize_reward, Dimension, EnvConfig, EnvKind, Environment, NoiseModel, RawDims, RegimeConfig,
};
use also_core::evaluation::{budget_report, drift_stats, Method};
use also_core::featurizer::FeatureVector;
use also_core::harness::report::write_experiment;
use also_core::harness::{
    run_episode, run_experiment, run_session, Ablations, ExperimentConfig, OptimizerKind, RunConfig, Variant,
};
use also_core::selector::{softmax, AlsoState};
use also_core::surrogate::{gradient_check, init_network, NetworkConfig, ValueNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn seeds() -> Vec<u64> {
    (0..20).collect()
}

fn random_dims(rng: &mut ChaCha8Rng) -> RawDims {
    let mut d = [0.0; 7];
    for (x, dim) in d.iter_mut().zip(Dimension::ALL) {
        let (lo, hi) = dim.range();
        *x = rng.random_range(lo..=hi);
    }
    d
}

fn ac1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = random_dims(&mut rng);
        let expected: f64 = d
            .iter()
            .zip(Dimension::ALL)
            .map(|(&x, dim)| {
                let (lo, hi) = dim.range();
                (x - lo) / (hi - lo)
            })
            .sum::<f64>()
            / 7.0;
        worst = worst.max((normalize_reward(&d).unwrap() - expected).abs());
    }
    let lows: RawDims = Dimension::ALL.map(|d| d.range().0);
    let highs: RawDims = Dimension::ALL.map(|d| d.range().1);
    let extremes = normalize_reward(&lows).unwrap() == 0.0 && normalize_reward(&highs).unwrap() == 1.0;
    outcome(worst <= 1e-12 && extremes, format!("max abs error {worst:.1e}, extremes exact: {extremes}"))
}

fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut shift_err = 0.0f64;
    for _ in 0..200 {
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let a = softmax(&x).unwrap();
        let b = softmax(&x.iter().map(|v| v + c).collect::<Vec<_>>()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            shift_err = shift_err.max((p - q).abs());
        }
    }
    let uniform = AlsoState::<f64>::with_defaults(12)
        .selection_distribution()
        .unwrap()
        .iter()
        .all(|&p| (p - 1.0 / 12.0).abs() <= 1e-15);

    let mut smooth_err = 0.0f64;
    for _ in 0..20 {
        let lambda = rng.random_range(0.0..1.0);
        let mut state = AlsoState::<f64>::new(5, 10.0, lambda).unwrap();
        let preds: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        for v in &preds {
            state = state.smooth_scores(v).unwrap();
        }
        let t = preds.len();
        for k in 0..5 {
            let closed: f64 = (0..t).map(|s| lambda.powi((t - 1 - s) as i32) * preds[s][k]).sum();
            smooth_err = smooth_err.max((state.scores[k] - closed).abs());
        }
    }
    outcome(
        shift_err <= 1e-12 && uniform && smooth_err <= 1e-10,
        format!("shift error {shift_err:.1e}, uniform at zero scores: {uniform}, smoothing error {smooth_err:.1e}"),
    )
}

fn ac3() -> Outcome {
    let mut worst = 0.0f64;
    let mut checks = 0;
    for dim in [4, 64] {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = FeatureVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            for cfg in [
                NetworkConfig::linear(dim, seed),
                NetworkConfig::mlp1(dim, seed).with_hidden(16),
                NetworkConfig::mlp2_preln(dim, seed).with_hidden(16),
            ] {
                let net: ValueNetwork<f64> = init_network(cfg).unwrap();
                let r = gradient_check(&net, &x, 1e-5, 1e-4).unwrap();
                worst = worst.max(r.max_relative_error);
                checks += 1;
            }
        }
    }
    outcome(worst <= 1e-4, format!("{checks} checks, max relative error {worst:.2e}"))
}

fn abrupt_experiment() -> ExperimentConfig {
    let env = EnvConfig {
        switch_period: 50,
        ..EnvConfig::new(EnvKind::AbruptSwitch, 12, 0)
    };
    ExperimentConfig::new(
        RunConfig::compact(env, 1000, seeds()),
        vec![Variant::full(), Variant::ablation("no_smoothing").unwrap()],
    )
}

fn ac4() -> Outcome {
    let r = run_experiment(&abrupt_experiment()).unwrap();
    let wins = r.wins_of("full", "no_smoothing").unwrap();
    let m = |v: &str| r.aggregates[r.variant_index(v).unwrap()].mean_reward.mean;
    outcome(
        wins >= 15 && !r.incomplete,
        format!("full beat no_smoothing on {wins}/20 seeds (mean {:.4} vs {:.4})", m("full"), m("no_smoothing")),
    )
}

fn ac5() -> Outcome {
    let env = EnvConfig {
        regimes: Some(RegimeConfig {
            count: 3,
            switch_prob: 0.1,
            bonus: 0.2,
        }),
        ..EnvConfig::new(EnvKind::Drifting, 12, 0)
    };
    let exp = ExperimentConfig::new(
        RunConfig::compact(env, 1000, seeds()),
        vec![Variant::full(), Variant::ablation("no_surrogate").unwrap()],
    );
    let r = run_experiment(&exp).unwrap();
    let wins = r.wins_of("full", "no_surrogate").unwrap();
    let m = |v: &str| r.aggregates[r.variant_index(v).unwrap()].mean_reward.mean;
    outcome(
        wins >= 15 && !r.incomplete,
        format!("full beat no_surrogate on {wins}/20 seeds (mean {:.4} vs {:.4})", m("full"), m("no_surrogate")),
    )
}

fn ac6() -> Outcome {
    let env = EnvConfig::new(EnvKind::AdaptiveAdversary, 12, 0);
    let exp = ExperimentConfig::new(
        RunConfig::compact(env, 1000, seeds()),
        vec![
            Variant::full(),
            Variant::new("epsilon_greedy", OptimizerKind::EpsilonGreedy, Ablations::default()),
        ],
    );
    let r = run_experiment(&exp).unwrap();
    let wins = r.wins_of("full", "epsilon_greedy").unwrap();
    let m = |v: &str| r.aggregates[r.variant_index(v).unwrap()].mean_reward.mean;
    outcome(
        wins >= 15 && !r.incomplete,
        format!("also beat epsilon_greedy on {wins}/20 seeds (mean {:.4} vs {:.4})", m("full"), m("epsilon_greedy")),
    )
}

fn table_row(method: Method, t: usize) -> (usize, usize, usize) {
    let rounds = t.div_ceil(5);
    let opt = match method {
        Method::Opro => rounds,
        Method::Evoprompt => 5 * rounds,
        _ => 0,
    };
    (2 * t, t, opt)
}

fn ac7() -> Outcome {
    let mut mismatches = Vec::new();
    for t in [1, 5, 19, 20, 21, 100] {
        for method in Method::ALL {
            let b = budget_report(method, t).unwrap();
            if (b.agent_calls, b.evaluator_calls, b.optimizer_calls) != table_row(method, t) {
                mismatches.push(format!("table {method} T={t}"));
            }
            let optimizer = if method == Method::Also {
                OptimizerKind::Also
            } else {
                OptimizerKind::Vanilla
            };
            let mut cfg = RunConfig::compact(EnvConfig::new(EnvKind::Stationary, 12, 0).with_turns(t), t, vec![0]);
            cfg.method = optimizer;
            cfg.budget_method = Some(method);
            let log = run_episode(&cfg, 0).unwrap();
            if log.episode_calls != vec![b] {
                mismatches.push(format!("counters {method} T={t}"));
            }
        }
    }
    outcome(mismatches.is_empty(), format!("mismatches: {mismatches:?}"))
}

fn ac8() -> Outcome {
    let (lo, hi) = (0.004 * 0.8, 0.015 * 1.2);
    let (mut min, mut max) = (f64::INFINITY, 0.0f64);
    for seed in 0..5u64 {
        let mut env = Environment::new(EnvConfig::new(EnvKind::Drifting, 12, seed).with_turns(2000)).unwrap();
        let records: Vec<_> = (0..2000).map(|t| env.step(Some(t % 12), None).unwrap()).collect();
        for s in drift_stats(&records, 12) {
            let v = s.expect("every arm played").variance;
            min = min.min(v);
            max = max.max(v);
        }
    }
    outcome(
        min >= lo && max <= hi,
        format!("per-arm variance in [{min:.4}, {max:.4}], band [{lo:.4}, {hi:.4}]"),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    (xs[(n - 1) / 2] + xs[n / 2]) / 2.0
}

fn ac9() -> Outcome {
    let env = EnvConfig {
        noise: Some(NoiseModel::Bernoulli),
        ..EnvConfig::new(EnvKind::Stationary, 12, 0)
    };
    let mut base = RunConfig::compact(env, 1000, seeds());
    base.selector.exp3_gamma = 0.05;
    base.selector.exp3_eta = Some(0.02);
    let ratio = |method: OptimizerKind| {
        let cfg = RunConfig {
            method,
            ..base.clone()
        };
        median(
            seeds()
                .into_iter()
                .map(|s| {
                    let log = run_episode(&cfg, s).unwrap();
                    let best = log.expected_rewards.as_ref().unwrap()[0]
                        .iter()
                        .copied()
                        .fold(f64::MIN, f64::max);
                    log.tail_mean_reward(200) / best
                })
                .collect(),
        )
    };
    let also = ratio(OptimizerKind::Also);
    let exp3 = ratio(OptimizerKind::Exp3);
    outcome(
        also >= 0.95 && exp3 >= 0.95,
        format!("median final-200 reward / best arm mean: also {also:.4}, exp3 {exp3:.4} (need >= 0.95)"),
    )
}

fn ac10() -> Outcome {
    let profile: Vec<f64> = (0..12).map(|k| 0.4 + 0.02 * k as f64).collect();
    let family_a = EnvConfig {
        arm_means: Some(profile.clone()),
        ..EnvConfig::new(EnvKind::Stationary, 12, 0)
    };
    let family_b = EnvConfig {
        arm_means: Some(profile),
        ..EnvConfig::new(EnvKind::Drifting, 12, 1000)
    };
    let train = RunConfig::compact(family_a, 1000, vec![]);
    let test = RunConfig::compact(family_b, 200, vec![]);
    let (mut fresh, mut warm) = (0.0, 0.0);
    for s in seeds() {
        let cp = run_session(&train, s, None).unwrap().checkpoint.unwrap();
        fresh += run_session(&test, 100 + s, None).unwrap().agent.mean_reward() / 20.0;
        warm += run_session(&test, 100 + s, Some(&cp)).unwrap().agent.mean_reward() / 20.0;
    }
    outcome(warm > fresh, format!("20-seed mean reward: transferred {warm:.4}, fresh {fresh:.4}"))
}

fn ac11() -> Outcome {
    let exp = abrupt_experiment();
    let outputs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let report = run_experiment(&exp).unwrap();
            write_experiment(dir.path(), &exp, &report)
                .unwrap()
                .into_iter()
                .map(|p| {
                    let name = p.file_name().unwrap().to_string_lossy().into_owned();
                    (name, std::fs::read(&p).unwrap())
                })
                .collect()
        })
        .collect();
    let files: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    outcome(
        outputs[0] == outputs[1],
        format!("byte-identical {}", files.join(", ")),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("AC1", ac1, Duration::from_secs(1)),
        ("AC2", ac2, Duration::from_secs(1)),
        ("AC3", ac3, Duration::from_secs(30)),
        ("AC4", ac4, Duration::from_secs(300)),
        ("AC5", ac5, Duration::from_secs(600)),
        ("AC6", ac6, Duration::from_secs(600)),
        ("AC7", ac7, Duration::from_secs(1)),
        ("AC8", ac8, Duration::from_secs(120)),
        ("AC9", ac9, Duration::from_secs(300)),
        ("AC10", ac10, Duration::from_secs(600)),
        ("AC11", ac11, Duration::from_secs(600)),
    ];
    let mut failed = Vec::new();
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed <= limit;
        println!(
            "{name} {}: {} [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 11 criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
