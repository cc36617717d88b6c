//! Simulation oracles for the environment.

use also_core::environment::{EnvConfig, EnvKind, Environment, OpponentKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn adversary(seed: u64) -> Environment {
    Environment::new(EnvConfig::new(EnvKind::AdaptiveAdversary, 12, seed).with_turns(5000)).unwrap()
}

#[test]
fn repeated_arm_is_depressed_on_the_sixth_turn() {
    let cfg = EnvConfig {
        opponent: Some(OpponentKind::BestResponse),
        arm_means: Some(vec![0.5; 12]),
        ..EnvConfig::new(EnvKind::Stationary, 12, 3)
    };
    let mut env = Environment::new(cfg.clone()).unwrap();
    let before = env.expected_rewards_now()[4];
    for _ in 0..5 {
        env.step(Some(4), None).unwrap();
    }
    let after = env.expected_rewards_now();
    assert!((before - after[4] - cfg.adversary_penalty).abs() < 1e-12);
    assert!(after.iter().enumerate().all(|(k, &v)| k == 4 || v == before));
}

#[test]
fn uniform_play_spreads_the_penalty() {
    for seed in 0..5 {
        let mut env = adversary(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut depressed = [0usize; 12];
        let turns = 2000;
        for _ in 0..turns {
            if let Some(a) = env.opponent().modal_arm() {
                depressed[a] += 1;
            }
            env.step(Some(rng.random_range(0..12)), None).unwrap();
        }
        let total: usize = depressed.iter().sum();
        let share = total as f64 / 12.0;
        assert!(
            depressed.iter().all(|&d| d as f64 <= 2.0 * share.max(1.0)),
            "seed {seed}: {depressed:?}"
        );
    }
}

#[test]
fn fixed_arm_play_is_exploitable() {
    let mut fixed = Vec::new();
    let mut uniform = Vec::new();
    for seed in 0..20 {
        let mut env = adversary(seed);
        let best = env
            .expected_rewards_now()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        fixed.push((0..500).map(|_| env.step(Some(best), None).unwrap().reward).sum::<f64>() / 500.0);
        let mut env = adversary(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform.push(
            (0..500)
                .map(|_| env.step(Some(rng.random_range(0..12)), None).unwrap().reward)
                .sum::<f64>()
                / 500.0,
        );
    }
    fixed.sort_by(f64::total_cmp);
    uniform.sort_by(f64::total_cmp);
    let med = |v: &[f64]| (v[9] + v[10]) / 2.0;
    assert!(med(&fixed) < med(&uniform), "{} vs {}", med(&fixed), med(&uniform));
}

#[test]
fn abrupt_switch_moves_the_best_arm() {
    let mut env = Environment::new(EnvConfig::new(EnvKind::AbruptSwitch, 12, 1).with_turns(1000)).unwrap();
    let mut leaders = Vec::new();
    for t in 0..1000 {
        if t % 50 == 0 {
            let e = env.expected_rewards_now();
            leaders.push(e.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0);
        }
        env.step(Some(t % 12), None).unwrap();
    }
    leaders.dedup();
    assert!(leaders.len() > 1, "{leaders:?}");
}

#[test]
fn records_stay_in_range_and_replay_exactly() {
    for kind in [EnvKind::Stationary, EnvKind::Drifting, EnvKind::AbruptSwitch, EnvKind::AdaptiveAdversary] {
        let cfg = EnvConfig::new(kind, 12, 9).with_turns(300);
        let run = || {
            let mut env = Environment::new(cfg.clone()).unwrap();
            (0..300).map(|t| env.step(Some((t * 7) % 12), None).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        for r in &a {
            assert!((0.0..=1.0).contains(&r.reward));
            assert_eq!(r.reward, also_core::normalize_reward(&r.raw_dims).unwrap());
        }
    }
}
