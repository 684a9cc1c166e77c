//! Proximal policy optimization for the three-action battery MDP.
//!
//! Each iteration collects whole episodes of `episode_length` steps from
//! random offsets into the training series, computes undiscounted returns and
//! generalized advantages, then runs `epochs_per_update` passes of minibatch
//! updates on the clipped surrogate objective (policy) and a squared-error
//! regression onto lambda-returns (value).
//!
//! By default the learner sees only the battery part of the reward (the demand
//! bill is exogenous). Rewards are divided by the cost of one full-rate step at
//! the mean training price before learning, and the value network predicts returns standardized
//! with statistics frozen from the first batch. Both rescalings leave the
//! optimal policy unchanged.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExogenousSeries;
use crate::env::{self, Action, BatteryParams, DiscreteAction, EnvState};
use crate::error::{Error, Result};
use crate::forecast::ChannelStats;
use crate::nn::{log_softmax, softmax, Adam, Checkpoint, Gradients, Head, Mlp};

pub const STATE_DIM: usize = 6;
pub const N_ACTIONS: usize = 3;
pub const AGENT_SCHEMA: &str = "bms-bench/agent/v1";

/// Price and demand standardization from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub price_mean: f64,
    pub price_sd: f64,
    pub demand_mean: f64,
    pub demand_sd: f64,
}

impl NormStats {
    pub fn from_series(train: &ExogenousSeries) -> Self {
        let p = ChannelStats::of(train.prices());
        let d = ChannelStats::of(train.demands());
        Self {
            price_mean: p.mean,
            price_sd: p.sd,
            demand_mean: d.mean,
            demand_sd: d.sd,
        }
    }
}

/// `[soc, price_norm, demand_norm, sin(2 pi h / 24), cos(2 pi h / 24), weekend]`.
pub fn encode_state(state: &EnvState, norm: &NormStats) -> Result<[f64; STATE_DIM]> {
    if !(norm.price_sd > 0.0 && norm.demand_sd > 0.0) {
        return Err(Error::Encoding(format!(
            "normalization standard deviations must be positive (price {}, demand {})",
            norm.price_sd, norm.demand_sd
        )));
    }
    let angle = 2.0 * std::f64::consts::PI * state.hour as f64 / 24.0;
    let enc = [
        state.soc,
        (state.price - norm.price_mean) / norm.price_sd,
        (state.demand - norm.demand_mean) / norm.demand_sd,
        angle.sin(),
        angle.cos(),
        if state.is_weekend { 1.0 } else { 0.0 },
    ];
    if enc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Encoding(format!("non-finite encoding {enc:?}")));
    }
    Ok(enc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub rollout_steps: usize,
    pub minibatch: usize,
    pub epochs_per_update: usize,
    pub total_env_steps: u64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub episode_length: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub max_grad_norm: f64,
    /// Learn from `-price * E * a` instead of `-price * (demand + E * a)`.
    /// The dropped term does not depend on the action, so optimal policies
    /// are unchanged; it only adds return variance.
    pub exclude_demand_cost: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gae_lambda: 0.95,
            gamma: 1.0,
            lr: 3e-4,
            rollout_steps: 2048,
            minibatch: 64,
            epochs_per_update: 10,
            total_env_steps: 3_000_000,
            entropy_coef: 0.0,
            value_coef: 0.5,
            episode_length: 168,
            seed: 0,
            hidden: vec![64, 64],
            max_grad_norm: 0.5,
            exclude_demand_cost: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if self.gamma != 1.0 {
            return Err(Error::Config(format!("gamma is fixed at 1.0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if self.rollout_steps == 0 || self.minibatch == 0 || self.epochs_per_update == 0 || self.episode_length == 0 {
            return Err(Error::Config(
                "rollout_steps, minibatch, epochs_per_update and episode_length must be >= 1".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    fn widths(&self, out: usize) -> Vec<usize> {
        std::iter::once(STATE_DIM)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(out))
            .collect()
    }
}

/// Collected transitions plus the quantities derived from them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub log_probs_old: Vec<f64>,
    pub values: Vec<f64>,
    /// True on the last step of each episode.
    pub dones: Vec<bool>,
    /// Undiscounted Monte-Carlo returns within each episode.
    pub returns: Vec<f64>,
    /// Lambda-returns, the value regression targets.
    pub value_targets: Vec<f64>,
    pub advantages_raw: Vec<f64>,
    /// Standardized advantages used by the policy loss.
    pub advantages: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsAndAdvantages {
    pub returns: Vec<f64>,
    pub lambda_returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Generalized advantage estimation with episode boundaries.
///
/// `delta_t = r_t + gamma * V(s_{t+1}) - V(s_t)` with `V = 0` past a
/// terminal step, and `A_t = delta_t + gamma * lambda * A_{t+1}` within an
/// episode. With `lambda = 1` the advantage is exactly `G_t - V(s_t)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> ReturnsAndAdvantages {
    let n = rewards.len();
    let mut returns = vec![0.0; n];
    let mut advantages = vec![0.0; n];
    let mut next_return = 0.0;
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        if dones[t] {
            next_return = 0.0;
            next_adv = 0.0;
            next_value = 0.0;
        }
        returns[t] = rewards[t] + gamma * next_return;
        if lambda == 1.0 {
            advantages[t] = returns[t] - values[t];
        } else {
            let delta = rewards[t] + gamma * next_value - values[t];
            advantages[t] = delta + gamma * lambda * next_adv;
        }
        next_return = returns[t];
        next_adv = advantages[t];
        next_value = values[t];
    }
    let lambda_returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    ReturnsAndAdvantages {
        returns,
        lambda_returns,
        advantages,
    }
}

/// Zero-mean, unit-variance copy (population sd). Constant inputs map to 0.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values.iter().map(|v| (v - mean) / (sd + 1e-8)).collect()
}

/// Fills returns, lambda-returns and advantages of `batch` from its rewards
/// and recorded values.
pub fn compute_returns_and_advantages(batch: &mut RolloutBatch, config: &PpoConfig) {
    let out = gae(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        config.gamma,
        config.gae_lambda,
    );
    batch.advantages = standardize(&out.advantages);
    batch.returns = out.returns;
    batch.value_targets = out.lambda_returns;
    batch.advantages_raw = out.advantages;
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

/// One-step value regression target `r + gamma * V(s')`.
pub fn td_target(reward: f64, gamma: f64, next_value: f64) -> f64 {
    reward + gamma * next_value
}

/// Gradient of the per-sample loss `-clipped_surrogate` with respect to the
/// policy logits. Zero when the clipped branch is active and the ratio lies
/// outside the clip interval.
pub fn surrogate_logit_grad(ratio: f64, advantage: f64, clip_eps: f64, probs: &[f64], action: usize) -> Vec<f64> {
    let outside = ratio < 1.0 - clip_eps || ratio > 1.0 + clip_eps;
    let clipped_term = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if outside && clipped_term <= ratio * advantage {
        return vec![0.0; probs.len()];
    }
    // d(r A)/d logits = r A (onehot(a) - p); the loss is its negation.
    let scale = -ratio * advantage;
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| scale * (if j == action { 1.0 } else { 0.0 } - p))
        .collect()
}

/// Arg-max with ties resolved idle, then discharge, then charge.
pub fn greedy_index(probs: &[f64]) -> usize {
    let order = [
        DiscreteAction::Idle.index(),
        DiscreteAction::Discharge.index(),
        DiscreteAction::Charge.index(),
    ];
    let mut best = order[0];
    for &i in &order[1..] {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

pub fn act_greedy(policy: &Mlp, encoded: &[f64]) -> Result<DiscreteAction> {
    let probs = policy.infer(encoded)?;
    Ok(DiscreteAction::from_index(greedy_index(&probs)).expect("three-way head"))
}

/// Categorical draw from `pi(. | s)`; returns the action and its log-probability.
pub fn act_sample<R: Rng + ?Sized>(policy: &Mlp, encoded: &[f64], rng: &mut R) -> Result<(DiscreteAction, f64)> {
    let probs = policy.infer(encoded)?;
    let i = sample_index(&probs, rng);
    Ok((DiscreteAction::from_index(i).expect("three-way head"), probs[i].ln()))
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Frozen affine map between value-network outputs and returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueScale {
    pub mean: f64,
    pub sd: f64,
}

impl ValueScale {
    pub const IDENTITY: ValueScale = ValueScale { mean: 0.0, sd: 1.0 };

    fn from_returns(returns: &[f64]) -> Self {
        let s = ChannelStats::of(returns);
        Self { mean: s.mean, sd: s.sd }
    }

    pub fn to_return(&self, net_out: f64) -> f64 {
        self.mean + self.sd * net_out
    }

    pub fn to_net(&self, ret: f64) -> f64 {
        (ret - self.mean) / self.sd
    }
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: Mlp,
    pub value: Mlp,
    pub policy_opt: Adam,
    pub value_opt: Adam,
    pub value_scale: ValueScale,
}

impl PpoLearner {
    pub fn new(config: &PpoConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let policy = Mlp::with_output_gain(&config.widths(N_ACTIONS), Head::Softmax, 0.01, &mut rng)?;
        let value = Mlp::new(&config.widths(1), Head::Linear, &mut rng)?;
        Ok(Self {
            policy_opt: Adam::new(&policy, config.lr),
            value_opt: Adam::new(&value, config.lr),
            policy,
            value,
            value_scale: ValueScale::IDENTITY,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean importance ratio over the first minibatch of the first epoch.
    pub first_ratio_mean: f64,
}

fn gather_states(batch: &RolloutBatch, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), STATE_DIM), |(r, c)| batch.states[idx[r]][c])
}

/// Importance ratios `pi_theta(a|s) / pi_old(a|s)` for the given samples.
pub fn importance_ratios(policy: &Mlp, batch: &RolloutBatch, idx: &[usize]) -> Result<Vec<f64>> {
    let fwd = policy.forward(&gather_states(batch, idx))?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let row = fwd.logits.row(r).to_vec();
            (log_softmax(&row)[batch.actions[i]] - batch.log_probs_old[i]).exp()
        })
        .collect())
}

/// Runs `epochs_per_update` shuffled minibatch passes over `batch`.
pub fn ppo_update<R: Rng + ?Sized>(
    learner: &mut PpoLearner,
    batch: &RolloutBatch,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let n = batch.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    if batch.advantages.len() != n || batch.value_targets.len() != n {
        return Err(Error::State("batch advantages not computed".into()));
    }
    if batch
        .advantages
        .iter()
        .chain(&batch.value_targets)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite advantages or value targets in batch".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut n_minibatches = 0usize;
    let mut n_samples = 0usize;
    let eps = config.clip_eps;

    for epoch in 0..config.epochs_per_update {
        order.shuffle(rng);
        for (mb_i, idx) in order.chunks(config.minibatch).enumerate() {
            let m = idx.len() as f64;
            let x = gather_states(batch, idx);

            // Policy.
            let fwd = learner.policy.forward(&x)?;
            let mut upstream = Array2::<f64>::zeros((idx.len(), N_ACTIONS));
            let mut ratio_sum = 0.0;
            for (r, &i) in idx.iter().enumerate() {
                let logits = fwd.logits.row(r).to_vec();
                let logp = log_softmax(&logits);
                let probs = softmax(&logits);
                let a = batch.actions[i];
                let ratio = (logp[a] - batch.log_probs_old[i]).exp();
                let adv = batch.advantages[i];
                ratio_sum += ratio;
                stats.policy_loss -= clipped_surrogate(ratio, adv, eps);
                stats.approx_kl += (ratio - 1.0) - ratio.ln();
                if (ratio - 1.0).abs() > eps {
                    stats.clip_frac += 1.0;
                }
                let entropy: f64 = -probs.iter().zip(&logp).map(|(p, lp)| p * lp).sum::<f64>();
                stats.entropy += entropy;
                let g = surrogate_logit_grad(ratio, adv, eps, &probs, a);
                for j in 0..N_ACTIONS {
                    // Loss includes -entropy_coef * H; dH/dz_j = -p_j (log p_j + H).
                    let ent_grad = config.entropy_coef * probs[j] * (logp[j] + entropy);
                    upstream[[r, j]] = (g[j] + ent_grad) / m;
                }
            }
            if epoch == 0 && mb_i == 0 {
                stats.first_ratio_mean = ratio_sum / m;
            }
            if !stats.policy_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "policy loss became non-finite at epoch {epoch}, minibatch {mb_i}"
                )));
            }
            let mut grads = learner.policy.backward(fwd.tape, &upstream)?;
            grads.clip_norm(config.max_grad_norm);
            learner.policy_opt.step(&mut learner.policy, &grads)?;

            // Value.
            let vf = learner.value.forward(&x)?;
            let mut vup = Array2::<f64>::zeros((idx.len(), 1));
            for (r, &i) in idx.iter().enumerate() {
                let target = learner.value_scale.to_net(batch.value_targets[i]);
                let err = vf.output[[r, 0]] - target;
                stats.value_loss += err * err;
                vup[[r, 0]] = config.value_coef * 2.0 * err / m;
            }
            if !stats.value_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "value loss became non-finite at epoch {epoch}, minibatch {mb_i}"
                )));
            }
            let mut vgrads: Gradients = learner.value.backward(vf.tape, &vup)?;
            vgrads.clip_norm(config.max_grad_norm);
            learner.value_opt.step(&mut learner.value, &vgrads)?;

            n_minibatches += 1;
            n_samples += idx.len();
        }
    }
    let s = n_samples as f64;
    stats.approx_kl /= s;
    stats.clip_frac /= s;
    stats.policy_loss /= s;
    stats.value_loss /= s;
    stats.entropy /= s;
    debug_assert!(n_minibatches > 0);
    Ok(stats)
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningPoint {
    pub iter: usize,
    pub env_steps: u64,
    /// Mean true cost (currency) of the episodes collected this iteration.
    pub mean_episode_cost: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    /// Mean cost minus the idle-battery cost of the same episode windows.
    pub mean_episode_excess: f64,
}

/// Writes `iter,env_steps,mean_episode_cost,approx_kl,clip_frac`.
pub fn write_learning_curve(curve: &[LearningPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("iter,env_steps,mean_episode_cost,approx_kl,clip_frac\n");
    for p in curve {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            p.iter, p.env_steps, p.mean_episode_cost, p.approx_kl, p.clip_frac
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A trained policy with everything needed to act on raw environment states.
#[derive(Debug, Clone, PartialEq)]
pub struct RlAgent {
    pub policy: Mlp,
    pub value: Mlp,
    pub norm: NormStats,
    pub params: BatteryParams,
    pub seed: u64,
    pub env_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgentFile {
    schema: String,
    seed: u64,
    env_steps: u64,
    norm: NormStats,
    params: BatteryParams,
    policy: Checkpoint,
    value: Checkpoint,
}

impl RlAgent {
    pub fn act_greedy(&self, state: &EnvState) -> Result<Action> {
        let enc = encode_state(state, &self.norm)?;
        Ok(act_greedy(&self.policy, &enc)?.to_action(&self.params))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AgentFile {
            schema: AGENT_SCHEMA.to_string(),
            seed: self.seed,
            env_steps: self.env_steps,
            norm: self.norm,
            params: self.params,
            policy: self.policy.to_checkpoint(),
            value: self.value.to_checkpoint(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AgentFile = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if file.schema != AGENT_SCHEMA {
            return Err(Error::Serde(format!(
                "unsupported agent schema {:?} (expected {AGENT_SCHEMA})",
                file.schema
            )));
        }
        Ok(Self {
            policy: Mlp::from_checkpoint(&file.policy)?,
            value: Mlp::from_checkpoint(&file.value)?,
            norm: file.norm,
            params: file.params,
            seed: file.seed,
            env_steps: file.env_steps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: RlAgent,
    pub curve: Vec<LearningPoint>,
}

/// Collects `n_episodes` episodes with the current stochastic policy.
#[allow(clippy::too_many_arguments)]
fn collect<R: Rng + ?Sized>(
    learner: &PpoLearner,
    series: &ExogenousSeries,
    params: &BatteryParams,
    norm: &NormStats,
    episode_len: usize,
    n_episodes: usize,
    reward_unit: f64,
    exclude_demand_cost: bool,
    rng: &mut R,
) -> Result<(RolloutBatch, f64, f64)> {
    let mut batch = RolloutBatch::default();
    let mut cost_sum = 0.0;
    let mut excess_sum = 0.0;
    for _ in 0..n_episodes {
        let start = rng.random_range(0..=series.len() - episode_len);
        let soc0 = params.soc_at(rng.random_range(0..params.n_levels()));
        let mut state = EnvState::at(series, start, soc0)?;
        let mut cost = 0.0;
        let mut idle = 0.0;
        for k in 0..episode_len {
            let enc = encode_state(&state, norm)?;
            let probs = learner.policy.infer(&enc)?;
            let a = sample_index(&probs, rng);
            let v = learner.value.infer(&enc)?[0];
            let out = env::step(
                &state,
                DiscreteAction::from_index(a).expect("valid").to_action(params),
                params,
                series,
            )?;
            cost -= out.reward;
            idle += state.price * state.demand;
            batch.states.push(enc);
            batch.actions.push(a);
            batch.log_probs_old.push(probs[a].ln());
            batch.values.push(v);
            let r = if exclude_demand_cost {
                out.reward + state.price * state.demand
            } else {
                out.reward
            };
            batch.rewards.push(r / reward_unit);
            batch.dones.push(k + 1 == episode_len);
            state = out.next_state;
        }
        cost_sum += cost;
        excess_sum += cost - idle;
    }
    let n = n_episodes as f64;
    Ok((batch, cost_sum / n, excess_sum / n))
}

/// Trains a policy on `series` until `total_env_steps` have been consumed.
pub fn train(series: &ExogenousSeries, params: &BatteryParams, config: &PpoConfig) -> Result<TrainOutcome> {
    train_with_callback(series, params, config, |_| {})
}

pub fn train_with_callback<F: FnMut(&LearningPoint)>(
    series: &ExogenousSeries,
    params: &BatteryParams,
    config: &PpoConfig,
    mut on_iter: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    let norm = NormStats::from_series(series);
    let mut learner = PpoLearner::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);

    let step_cost = norm.price_mean * params.energy(params.a_max);
    let reward_unit = if step_cost > 0.0 { step_cost } else { 1.0 };
    let total = config.total_env_steps as usize;
    let episode_len = config.episode_length.min(series.len()).min(total.max(1));
    let per_iter = config.rollout_steps.div_ceil(episode_len).max(1);

    let mut env_steps = 0usize;
    let mut curve = Vec::new();
    let mut iter = 0;
    while env_steps + episode_len <= total {
        let n_episodes = per_iter.min((total - env_steps) / episode_len);
        let (mut batch, mean_cost, mean_excess) = collect(
            &learner,
            series,
            params,
            &norm,
            episode_len,
            n_episodes,
            reward_unit,
            config.exclude_demand_cost,
            &mut rng,
        )?;
        env_steps += batch.len();
        if iter == 0 {
            let raw = gae(&batch.rewards, &vec![0.0; batch.len()], &batch.dones, 1.0, 1.0);
            learner.value_scale = ValueScale::from_returns(&raw.returns);
        }
        let scale = learner.value_scale;
        batch.values.iter_mut().for_each(|v| *v = scale.to_return(*v));
        compute_returns_and_advantages(&mut batch, config);
        let stats = ppo_update(&mut learner, &batch, config, &mut rng)?;
        let point = LearningPoint {
            iter,
            env_steps: env_steps as u64,
            mean_episode_cost: mean_cost,
            approx_kl: stats.approx_kl,
            clip_frac: stats.clip_frac,
            mean_episode_excess: mean_excess,
        };
        log::debug!(
            "iter {iter} steps {env_steps} cost {mean_cost:.4} excess {mean_excess:.4} kl {:.5} clip {:.3} ent {:.3}",
            stats.approx_kl,
            stats.clip_frac,
            stats.entropy
        );
        on_iter(&point);
        curve.push(point);
        iter += 1;
    }
    Ok(TrainOutcome {
        agent: RlAgent {
            policy: learner.policy,
            value: learner.value,
            norm,
            params: *params,
            seed: config.seed,
            env_steps: env_steps as u64,
        },
        curve,
    })
}
