mod common;

use bms_bench::env::{self, BatteryParams, DiscreteAction};
use bms_bench::mpc::ground_truth;
use bms_bench::nn::{log_softmax, softmax, Dense, Head, Mlp};
use bms_bench::ppo::{
    self, act_sample, clipped_surrogate, compute_returns_and_advantages, gae, greedy_index, importance_ratios,
    ppo_update, surrogate_logit_grad, td_target, PpoConfig, PpoLearner, RolloutBatch, STATE_DIM,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gae_matches_hand_unrolled_sum() {
    let r = [0.5, -1.0, 2.0, 0.25, 1.0];
    let v = [1.0, 0.3, -0.2, 0.8, 0.4];
    let lambda = 0.95;
    let out = gae(&r, &v, &[false, false, false, false, true], 1.0, lambda);
    let next_v = |t: usize| if t + 1 < 5 { v[t + 1] } else { 0.0 };
    let delta: Vec<f64> = (0..5).map(|t| r[t] + next_v(t) - v[t]).collect();
    for t in 0..5 {
        let expected: f64 = (t..5).map(|k| lambda.powi((k - t) as i32) * delta[k]).sum();
        assert!((out.advantages[t] - expected).abs() < 1e-12, "t={t}");
        assert!((out.lambda_returns[t] - (expected + v[t])).abs() < 1e-12);
    }
    assert_eq!(out.returns, vec![2.75, 2.25, 3.25, 1.25, 1.0]);
}

#[test]
fn lambda_one_gives_return_minus_value_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 50;
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let dones: Vec<bool> = (0..n).map(|i| i % 17 == 16 || i == n - 1).collect();
    let out = gae(&r, &v, &dones, 1.0, 1.0);
    for t in 0..n {
        assert_eq!(out.advantages[t], out.returns[t] - v[t]);
    }
}

#[test]
fn standardized_advantages_have_zero_mean_unit_sd() {
    let mut batch = RolloutBatch {
        rewards: vec![1.0, 2.0, 3.0, -1.0, 0.5],
        values: vec![0.0; 5],
        dones: vec![false, false, true, false, true],
        ..Default::default()
    };
    compute_returns_and_advantages(&mut batch, &PpoConfig::default());
    let n = 5.0;
    let mean = batch.advantages.iter().sum::<f64>() / n;
    let sd = (batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-12);
    assert!((sd - 1.0).abs() < 1e-6);
    assert_eq!(batch.returns, vec![6.0, 5.0, 3.0, -0.5, 0.5]);
}

#[test]
fn value_target_is_one_step_td_form() {
    assert_eq!(td_target(1.0, 1.0, 2.0), 3.0);
}

#[test]
fn bandit_policy_gradient_matches_analytic() {
    // Two arms, logits [theta, 0] from a single linear layer fed x = 1.
    let adv = [1.7, -0.6];
    for theta in [-2.0, -0.3, 0.0, 0.8, 2.5] {
        let layer = Dense {
            w: Array2::from_shape_vec((1, 2), vec![theta, 0.0]).unwrap(),
            b: Array1::zeros(2),
        };
        let net = Mlp::from_layers(vec![layer], Head::Softmax).unwrap();
        let fwd = net.forward(&Array2::ones((1, 1))).unwrap();
        let p = fwd.output.row(0).to_vec();
        // J = sum_a pi(a) A(a) log pi_theta(a), pi held fixed.
        let analytic = p[0] * adv[0] * (1.0 - p[0]) + p[1] * adv[1] * (-p[0]);
        let mut up = Array2::zeros((1, 2));
        for a in 0..2 {
            for j in 0..2 {
                up[[0, j]] += p[a] * adv[a] * (if a == j { 1.0 } else { 0.0 } - p[j]);
            }
        }
        let g = net.backward(fwd.tape, &up).unwrap();
        assert!((g.layers[0].w[[0, 0]] - analytic).abs() < 1e-6);
        // Finite-difference check of the same objective.
        let j = |th: f64| {
            let lp = log_softmax(&[th, 0.0]);
            p[0] * adv[0] * lp[0] + p[1] * adv[1] * lp[1]
        };
        let fd = (j(theta + 1e-6) - j(theta - 1e-6)) / 2e-6;
        assert!((fd - analytic).abs() < 1e-6);
    }
}

#[test]
fn surrogate_gradient_at_unit_ratio_is_policy_gradient() {
    let probs = softmax(&[0.3, -0.2, 0.9]);
    let g = surrogate_logit_grad(1.0, 2.0, 0.2, &probs, 1);
    for j in 0..3 {
        let pg = 2.0 * (if j == 1 { 1.0 } else { 0.0 } - probs[j]);
        assert!((g[j] + pg).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn clipped_gradient_vanishes_when_clip_is_active(
        ratio in 0.0f64..3.0,
        adv in -3.0f64..3.0,
        logits in prop::collection::vec(-3.0f64..3.0, 3),
        action in 0usize..3,
    ) {
        let eps = 0.2;
        let probs = softmax(&logits);
        let g = surrogate_logit_grad(ratio, adv, eps, &probs, action);
        if (ratio > 1.0 + eps && adv > 0.0) || (ratio < 1.0 - eps && adv < 0.0) {
            prop_assert!(g.iter().all(|&x| x == 0.0));
        }
        // Away from the kinks the gradient matches finite differences of
        // -clipped_surrogate with respect to the logits.
        if (ratio - (1.0 + eps)).abs() > 1e-3 && (ratio - (1.0 - eps)).abs() > 1e-3 && ratio > 1e-3 {
            let logp_old = log_softmax(&logits)[action] - ratio.ln();
            let loss = |z: &[f64]| -clipped_surrogate((log_softmax(z)[action] - logp_old).exp(), adv, eps);
            for j in 0..3 {
                let h = 1e-6;
                let mut zp = logits.clone();
                zp[j] += h;
                let mut zm = logits.clone();
                zm[j] -= h;
                let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() < 1e-5, "j={} fd={} g={}", j, fd, g[j]);
            }
        }
    }
}

fn random_batch(policy: &Mlp, n: usize, seed: u64) -> RolloutBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = RolloutBatch::default();
    for i in 0..n {
        let s: [f64; STATE_DIM] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let (a, logp) = act_sample(policy, &s, &mut rng).unwrap();
        batch.states.push(s);
        batch.actions.push(a.index());
        batch.log_probs_old.push(logp);
        batch.rewards.push(rng.random_range(-1.0..1.0));
        batch.values.push(rng.random_range(-1.0..1.0));
        batch.dones.push(i % 50 == 49);
    }
    compute_returns_and_advantages(&mut batch, &PpoConfig::default());
    batch
}

#[test]
fn ratio_is_one_right_after_sync() {
    let learner = PpoLearner::new(&PpoConfig::default()).unwrap();
    let batch = random_batch(&learner.policy, 300, 42);
    let idx: Vec<usize> = (0..batch.len()).collect();
    for r in importance_ratios(&learner.policy, &batch, &idx).unwrap() {
        assert!((r - 1.0).abs() <= 1e-9);
    }
    let mut l2 = learner.clone();
    let stats = ppo_update(
        &mut l2,
        &batch,
        &PpoConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!((stats.first_ratio_mean - 1.0).abs() <= 1e-9);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let cfg = PpoConfig {
        lr: 0.0,
        ..PpoConfig::default()
    };
    let mut learner = PpoLearner::new(&cfg).unwrap();
    let batch = random_batch(&learner.policy, 256, 43);
    let (p0, v0) = (learner.policy.params_flat(), learner.value.params_flat());
    ppo_update(&mut learner, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (a, b) in p0.iter().zip(learner.policy.params_flat()) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in v0.iter().zip(learner.value.params_flat()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn update_reports_trust_region_diagnostics() {
    let cfg = PpoConfig::default();
    let mut learner = PpoLearner::new(&cfg).unwrap();
    let batch = random_batch(&learner.policy, 512, 44);
    let stats = ppo_update(&mut learner, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(stats.approx_kl >= 0.0 && stats.approx_kl.is_finite());
    assert!((0.0..=1.0).contains(&stats.clip_frac));
}

#[test]
fn non_finite_batch_aborts() {
    let cfg = PpoConfig::default();
    let mut learner = PpoLearner::new(&cfg).unwrap();
    let mut batch = random_batch(&learner.policy, 64, 45);
    batch.advantages[3] = f64::NAN;
    let err = ppo_update(&mut learner, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, bms_bench::Error::Numeric(_)));
}

#[test]
fn uniform_policy_sampling_frequencies() {
    let layer = Dense {
        w: Array2::zeros((STATE_DIM, 3)),
        b: Array1::zeros(3),
    };
    let policy = Mlp::from_layers(vec![layer], Head::Softmax).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let mut counts = [0usize; 3];
    let params = BatteryParams::default();
    let s = [0.5, 0.0, 0.0, 0.0, 1.0, 0.0];
    for _ in 0..30_000 {
        let (a, logp) = act_sample(&policy, &s, &mut rng).unwrap();
        assert!((logp - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        let value = a.to_action(&params).0;
        assert!(value == -params.a_max || value == 0.0 || value == params.a_max);
        counts[a.index()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn greedy_choice_is_invariant_to_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..200 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        assert_eq!(greedy_index(&softmax(&z)), greedy_index(&softmax(&shifted)));
    }
    assert_eq!(greedy_index(&[0.2, 0.5, 0.3]), 1);
    assert_eq!(
        DiscreteAction::from_index(greedy_index(&[0.4, 0.2, 0.4])),
        Some(DiscreteAction::Discharge)
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let (train, _) = common::default_split();
    let params = BatteryParams::default();
    let cfg = PpoConfig {
        total_env_steps: 5_000,
        seed: 3,
        ..PpoConfig::default()
    };
    let a = ppo::train(&train, &params, &cfg).unwrap();
    let b = ppo::train(&train, &params, &cfg).unwrap();
    assert_eq!(a.agent.policy.params_flat(), b.agent.policy.params_flat());
    assert_eq!(a.agent.value.params_flat(), b.agent.value.params_flat());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.agent.to_json().unwrap(), b.agent.to_json().unwrap());
    let c = ppo::train(&train, &params, &PpoConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.agent.policy.params_flat(), c.agent.policy.params_flat());
}

#[test]
fn agent_checkpoint_round_trips() {
    let (train, _) = common::default_split();
    let cfg = PpoConfig {
        total_env_steps: 2_000,
        ..PpoConfig::default()
    };
    let agent = ppo::train(&train, &BatteryParams::default(), &cfg).unwrap().agent;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.json");
    agent.save(&path).unwrap();
    let back = ppo::RlAgent::load(&path).unwrap();
    assert_eq!(back.policy.params_flat(), agent.policy.params_flat());
    assert_eq!(back.to_json().unwrap(), agent.to_json().unwrap());
}

#[test]
fn trivial_environment_reaches_ground_truth() {
    // Constant price, no demand: the only gain is draining the initial charge.
    let n = 720;
    let s = common::series(&vec![0.1; n], &vec![0.0; n]);
    let params = BatteryParams::default();
    let soc0 = params.default_soc0();
    let cfg = PpoConfig {
        total_env_steps: 30_000,
        seed: 1,
        ..PpoConfig::default()
    };
    let agent = ppo::train(&s, &params, &cfg).unwrap().agent;
    let cost = env::rollout(|st| agent.act_greedy(st), &s, &params, soc0)
        .unwrap()
        .total_cost();
    let gt = ground_truth(&s, &params, soc0).unwrap().cost;
    assert!((cost - gt).abs() <= 0.01 * gt.abs(), "rl {cost} vs gt {gt}");
}

#[test]
fn smoothed_learning_curve_does_not_rise_over_second_half() {
    let (train, _) = common::default_split();
    let cfg = PpoConfig {
        total_env_steps: 100_000,
        seed: 0,
        ..PpoConfig::default()
    };
    let curve = ppo::train(&train, &BatteryParams::default(), &cfg).unwrap().curve;
    let costs: Vec<f64> = curve.iter().map(|p| p.mean_episode_cost).collect();
    let n = costs.len();
    let w = (n / 4).max(1);
    let smoothed: Vec<f64> = (w - 1..n)
        .map(|i| costs[i + 1 - w..=i].iter().sum::<f64>() / w as f64)
        .collect();
    let half = &smoothed[smoothed.len() - n / 2..];
    let start = half[0];
    assert!(half.iter().all(|&c| c <= start), "{half:?}");
    // Least-squares slope over the second half.
    let m = half.len() as f64;
    let xm = (m - 1.0) / 2.0;
    let ym = half.iter().sum::<f64>() / m;
    let slope: f64 = half
        .iter()
        .enumerate()
        .map(|(i, y)| (i as f64 - xm) * (y - ym))
        .sum::<f64>()
        / half
            .iter()
            .enumerate()
            .map(|(i, _)| (i as f64 - xm).powi(2))
            .sum::<f64>();
    assert!(slope <= 0.0, "slope {slope}");
}
