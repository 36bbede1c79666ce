//! From-scratch PPO.
//!
//! A tanh MLP policy head (five action logits) and a value head share
//! nothing but the observation. Rollouts are collected on-policy from the
//! simulator, advantages come from GAE(λ), and updates minimize the
//! clipped-surrogate policy loss plus value and entropy terms:
//!
//! `min(r_t · Â_t, clip(r_t, 1-ε, 1+ε) · Â_t)`
//!
//! with `r_t` the new/old policy probability ratio. Gradients are exact
//! backpropagation (see [`net`]), clipped by global norm, and applied with
//! Adam. Everything is deterministic given the seeds.

pub mod net;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::RiskConfig;
use crate::scenario::ScenarioConfig;
use crate::sim::{observation_len, Action, SimParams, Simulator};
use net::{AdamState, Mlp};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("observation length {got} does not match configured input size {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("non-finite loss at update {update_index} (policy {policy_loss}, value {value_loss}); update aborted")]
    NonFinite { update_index: u64, policy_loss: f64, value_loss: f64 },
    #[error("training requires at least one configuration")]
    NoConfigs,
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy file malformed: {0}")]
    Persist(#[from] serde_json::Error),
}

/// PPO hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub steps_per_update: usize,
    pub minibatch_size: usize,
    pub update_epochs: usize,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub hidden_sizes: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            steps_per_update: 2048,
            minibatch_size: 64,
            update_epochs: 10,
            value_loss_coeff: 0.5,
            entropy_coeff: 0.01,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            hidden_sizes: vec![64, 64],
        }
    }
}

/// Policy and value network weights plus their construction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden_sizes: Vec<usize>,
    pub init_seed: u64,
    pub policy: Mlp,
    pub value: Mlp,
}

impl PolicyParams {
    pub fn new(obs_dim: usize, hidden_sizes: &[usize], init_seed: u64) -> PolicyParams {
        let n_actions = Action::ALL.len();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden_sizes);
        let mut policy_sizes = sizes.clone();
        policy_sizes.push(n_actions);
        let mut value_sizes = sizes;
        value_sizes.push(1);
        // Orthogonal init: sqrt(2) gain on hidden layers, a small policy
        // head for near-uniform initial action probabilities.
        let mut policy_gains = vec![std::f64::consts::SQRT_2; hidden_sizes.len()];
        policy_gains.push(0.01);
        let mut value_gains = vec![std::f64::consts::SQRT_2; hidden_sizes.len()];
        value_gains.push(1.0);
        PolicyParams {
            obs_dim,
            n_actions,
            hidden_sizes: hidden_sizes.to_vec(),
            init_seed,
            policy: Mlp::new(&policy_sizes, &policy_gains, &mut rng),
            value: Mlp::new(&value_sizes, &value_gains, &mut rng),
        }
    }

    /// Action distribution (softmax over logits) and value estimate.
    pub fn forward(&self, observation: &[f64]) -> Result<(Vec<f64>, f64), PpoError> {
        if observation.len() != self.obs_dim {
            return Err(PpoError::ShapeMismatch { got: observation.len(), want: self.obs_dim });
        }
        let logits = self.policy.forward(observation);
        let probs = softmax(&logits);
        let value = self.value.forward(observation)[0];
        Ok((probs, value))
    }

    pub fn all_finite(&self) -> bool {
        self.policy.all_finite() && self.value.all_finite()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PpoError> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyParams, PpoError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// The per-sample clipped surrogate term of the PPO objective.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    debug_assert!(ratio > 0.0);
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Generalized advantage estimation. `dones[t]` cuts bootstrapping after
/// step `t`; `bootstrap_value` estimates the state following the last step.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    discount: f64,
    gae_lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let delta = rewards[t] + discount * next_value * not_done - values[t];
        acc = delta + discount * gae_lambda * not_done * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// One on-policy batch of transitions.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn assert_consistent(&self) {
        let n = self.len();
        assert!(
            [
                self.actions.len(),
                self.log_probs.len(),
                self.rewards.len(),
                self.dones.len(),
                self.values.len(),
                self.advantages.len(),
                self.returns.len(),
            ]
            .iter()
            .all(|&l| l == n),
            "rollout arrays must share one length"
        );
    }
}

/// Metrics from one PPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Runs `update_epochs` passes of minibatch gradient steps on the combined
/// loss. On a non-finite loss the parameters are restored to their state at
/// entry and an error is returned.
pub fn update(
    params: &mut PolicyParams,
    adam_policy: &mut AdamState,
    adam_value: &mut AdamState,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    update_index: u64,
) -> Result<UpdateMetrics, PpoError> {
    batch.assert_consistent();
    if batch.is_empty() || cfg.learning_rate == 0.0 {
        // A zero step leaves the parameters untouched by definition; skip
        // the arithmetic entirely.
        if cfg.learning_rate == 0.0 && !batch.is_empty() {
            return Ok(evaluate_batch_metrics(params, batch, cfg));
        }
        return Ok(UpdateMetrics { policy_loss: 0.0, value_loss: 0.0, entropy: 0.0, clip_fraction: 0.0 });
    }

    let snapshot = params.clone();
    let advantages = normalized_advantages(&batch.advantages, cfg.normalize_advantages);

    let n = batch.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut sums = UpdateMetrics { policy_loss: 0.0, value_loss: 0.0, entropy: 0.0, clip_fraction: 0.0 };
    let mut minibatches = 0usize;

    for _epoch in 0..cfg.update_epochs {
        shuffle(&mut indices, rng);
        for chunk in indices.chunks(cfg.minibatch_size.max(1)) {
            let mut policy_grads = params.policy.zeros_like();
            let mut value_grads = params.value.zeros_like();
            let inv_n = 1.0 / chunk.len() as f64;
            let mut policy_loss = 0.0;
            let mut value_loss = 0.0;
            let mut entropy_sum = 0.0;
            let mut clipped = 0usize;

            for &i in chunk {
                let obs = &batch.observations[i];
                let action = batch.actions[i];
                let adv = advantages[i];

                let p_cache = params.policy.forward_cached(obs);
                let logits = p_cache.last().unwrap().clone();
                let probs = softmax(&logits);
                let log_prob = log_softmax_at(&logits, action);
                let ratio = (log_prob - batch.log_probs[i]).exp();
                let objective = clipped_objective(ratio, adv, cfg.clip_epsilon);
                policy_loss -= objective * inv_n;
                if (ratio - 1.0).abs() > cfg.clip_epsilon {
                    clipped += 1;
                }

                let entropy: f64 = probs
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                    .sum();
                entropy_sum += entropy;

                // d(-objective)/dlogits: only the unclipped branch carries
                // gradient; inside the clip window both branches agree.
                let unclipped_selected = ratio * adv <= ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
                let mut d_logits = vec![0.0; params.n_actions];
                if unclipped_selected {
                    let g = adv * ratio * inv_n;
                    for (j, d) in d_logits.iter_mut().enumerate() {
                        let onehot = if j == action { 1.0 } else { 0.0 };
                        *d -= g * (onehot - probs[j]);
                    }
                }
                // Entropy bonus: loss includes -entropy_coeff * H.
                for (j, d) in d_logits.iter_mut().enumerate() {
                    if probs[j] > 0.0 {
                        *d += cfg.entropy_coeff * probs[j] * (probs[j].ln() + entropy) * inv_n;
                    }
                }
                params.policy.backward(&p_cache, &d_logits, &mut policy_grads);

                let v_cache = params.value.forward_cached(obs);
                let v = v_cache.last().unwrap()[0];
                let err = v - batch.returns[i];
                value_loss += err * err * inv_n;
                let d_value = [cfg.value_loss_coeff * 2.0 * err * inv_n];
                params.value.backward(&v_cache, &d_value, &mut value_grads);
            }

            let entropy = entropy_sum * inv_n;
            let total = policy_loss + cfg.value_loss_coeff * value_loss - cfg.entropy_coeff * entropy;
            if !total.is_finite() {
                *params = snapshot;
                return Err(PpoError::NonFinite { update_index, policy_loss, value_loss });
            }

            let norm = (policy_grads.squared_norm() + value_grads.squared_norm()).sqrt();
            if norm > cfg.max_grad_norm && norm > 0.0 {
                let factor = cfg.max_grad_norm / norm;
                policy_grads.scale(factor);
                value_grads.scale(factor);
            }
            adam_policy.step(&mut params.policy, &policy_grads, cfg.learning_rate);
            adam_value.step(&mut params.value, &value_grads, cfg.learning_rate);

            sums.policy_loss += policy_loss;
            sums.value_loss += value_loss;
            sums.entropy += entropy;
            sums.clip_fraction += clipped as f64 / chunk.len() as f64;
            minibatches += 1;
        }
    }

    if !params.all_finite() {
        *params = snapshot;
        return Err(PpoError::NonFinite { update_index, policy_loss: f64::NAN, value_loss: f64::NAN });
    }

    let k = minibatches.max(1) as f64;
    Ok(UpdateMetrics {
        policy_loss: sums.policy_loss / k,
        value_loss: sums.value_loss / k,
        entropy: sums.entropy / k,
        clip_fraction: sums.clip_fraction / k,
    })
}

fn evaluate_batch_metrics(params: &PolicyParams, batch: &RolloutBatch, cfg: &PpoConfig) -> UpdateMetrics {
    let advantages = normalized_advantages(&batch.advantages, cfg.normalize_advantages);
    let inv_n = 1.0 / batch.len() as f64;
    let mut m = UpdateMetrics { policy_loss: 0.0, value_loss: 0.0, entropy: 0.0, clip_fraction: 0.0 };
    for i in 0..batch.len() {
        let logits = params.policy.forward(&batch.observations[i]);
        let probs = softmax(&logits);
        let log_prob = log_softmax_at(&logits, batch.actions[i]);
        let ratio = (log_prob - batch.log_probs[i]).exp();
        m.policy_loss -= clipped_objective(ratio, advantages[i], cfg.clip_epsilon) * inv_n;
        if (ratio - 1.0).abs() > cfg.clip_epsilon {
            m.clip_fraction += inv_n;
        }
        m.entropy += probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum::<f64>() * inv_n;
        let v = params.value.forward(&batch.observations[i])[0];
        m.value_loss += (v - batch.returns[i]).powi(2) * inv_n;
    }
    m
}

fn normalized_advantages(advantages: &[f64], enabled: bool) -> Vec<f64> {
    if !enabled || advantages.is_empty() {
        return advantages.to_vec();
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    advantages.iter().map(|a| (a - mean) / std).collect()
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulation-side settings shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSettings {
    pub sim: SimParams,
    pub risk: RiskConfig,
}

/// Per-update training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update_index: u64,
    pub steps: u64,
    pub mean_reward: f64,
    pub mean_episode_len: f64,
    pub crash_count: u32,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Per-episode training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub config_id: String,
    pub reward: f64,
    pub length: u32,
    pub crashed: bool,
    pub ttc_near_miss_count: u32,
    pub r_threshold_count: u32,
}

/// Training budget: a step count or an episode count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Steps(u64),
    Episodes(u64),
}

struct LiveEpisode {
    sim: Simulator,
    config_id: String,
    total_reward: f64,
    ttc_near_miss_count: u32,
    r_threshold_count: u32,
}

/// On-policy trainer owning the parameters, optimizer state, and RNG.
pub struct PpoTrainer {
    pub params: PolicyParams,
    pub cfg: PpoConfig,
    pub env: EnvSettings,
    adam_policy: AdamState,
    adam_value: AdamState,
    rng: ChaCha8Rng,
    pub update_index: u64,
    pub total_steps: u64,
    episode_counter: u64,
}

impl PpoTrainer {
    pub fn new(cfg: PpoConfig, env: EnvSettings, seed: u64) -> PpoTrainer {
        let obs_dim = observation_len(env.sim.observe_neighbors);
        let params = PolicyParams::new(obs_dim, &cfg.hidden_sizes, mix_seed(seed, 1));
        let adam_policy = AdamState::new(&params.policy);
        let adam_value = AdamState::new(&params.value);
        PpoTrainer {
            params,
            cfg,
            env,
            adam_policy,
            adam_value,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)),
            update_index: 0,
            total_steps: 0,
            episode_counter: 0,
        }
    }

    /// Samples an action from the current policy.
    pub fn act_sample(&mut self, obs: &[f64]) -> Result<(usize, f64, f64), PpoError> {
        let (probs, value) = self.params.forward(obs)?;
        let draw: f64 = self.rng.gen();
        let mut cumulative = 0.0;
        let mut action = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                action = i;
                break;
            }
        }
        Ok((action, probs[action].max(1e-300).ln(), value))
    }

    /// Trains on `configs` sampled round-robin until the budget is spent,
    /// updating every `steps_per_update` transitions.
    ///
    /// `on_update` may return a replacement configuration set, which takes
    /// effect at the next episode boundary — the hook a closed training
    /// loop uses to steer the curriculum between updates.
    pub fn train(
        &mut self,
        configs: &[ScenarioConfig],
        budget: Budget,
        mut on_update: impl FnMut(&UpdateRecord) -> Option<Vec<ScenarioConfig>>,
        mut on_episode: impl FnMut(&EpisodeRecord),
    ) -> Result<(), PpoError> {
        if configs.is_empty() {
            return Err(PpoError::NoConfigs);
        }
        let mut configs = configs.to_vec();
        let mut live: Option<LiveEpisode> = None;
        let mut steps_spent: u64 = 0;
        let mut episodes_done: u64 = 0;

        loop {
            let remaining = match budget {
                Budget::Steps(total) => total.saturating_sub(steps_spent),
                Budget::Episodes(total) => {
                    if episodes_done >= total {
                        0
                    } else {
                        u64::MAX
                    }
                }
            };
            if remaining == 0 {
                break;
            }
            let target = (self.cfg.steps_per_update as u64).min(remaining) as usize;

            let mut batch = RolloutBatch::default();
            let mut window_records: Vec<EpisodeRecord> = Vec::new();
            let mut bootstrap = 0.0;
            while batch.len() < target {
                if live.is_none() {
                    let config = &configs[(self.episode_counter % configs.len() as u64) as usize];
                    let seed = mix_seed(config.seed, self.episode_counter);
                    let sim = Simulator::spawn_seeded(config, &self.env.sim, &self.env.risk, seed)?;
                    live = Some(LiveEpisode {
                        sim,
                        config_id: config.id.clone(),
                        total_reward: 0.0,
                        ttc_near_miss_count: 0,
                        r_threshold_count: 0,
                    });
                    self.episode_counter += 1;
                }
                let ep = live.as_mut().unwrap();
                let obs = ep.sim.observe();
                let (action, log_prob, value) = self.act_sample(&obs)?;
                let out = ep.sim.step(Action::from_index(action));
                ep.total_reward += out.reward;
                if out.risk.ttc < self.env.risk.params.ttc_threshold {
                    ep.ttc_near_miss_count += 1;
                }
                if out.risk.r > self.env.risk.params.r_threshold {
                    ep.r_threshold_count += 1;
                }

                batch.observations.push(obs);
                batch.actions.push(action);
                batch.log_probs.push(log_prob);
                batch.rewards.push(out.reward);
                batch.dones.push(out.done);
                batch.values.push(value);

                if out.done {
                    let ep = live.take().unwrap();
                    let record = EpisodeRecord {
                        config_id: ep.config_id,
                        reward: ep.total_reward,
                        length: ep.sim.steps(),
                        crashed: ep.sim.crashed(),
                        ttc_near_miss_count: ep.ttc_near_miss_count,
                        r_threshold_count: ep.r_threshold_count,
                    };
                    on_episode(&record);
                    window_records.push(record);
                    episodes_done += 1;
                    if matches!(budget, Budget::Episodes(total) if episodes_done >= total) {
                        break;
                    }
                }
            }
            if let Some(ep) = &live {
                let (_, v) = self.params.forward(&ep.sim.observe())?;
                bootstrap = v;
            }
            steps_spent += batch.len() as u64;
            self.total_steps += batch.len() as u64;

            if batch.is_empty() {
                break;
            }
            let (advantages, returns) = compute_gae(
                &batch.rewards,
                &batch.values,
                &batch.dones,
                bootstrap,
                self.cfg.discount,
                self.cfg.gae_lambda,
            );
            batch.advantages = advantages;
            batch.returns = returns;

            let metrics = update(
                &mut self.params,
                &mut self.adam_policy,
                &mut self.adam_value,
                &batch,
                &self.cfg,
                &mut self.rng,
                self.update_index,
            )?;
            self.update_index += 1;

            let n_eps = window_records.len().max(1) as f64;
            let record = UpdateRecord {
                update_index: self.update_index,
                steps: self.total_steps,
                mean_reward: window_records.iter().map(|r| r.reward).sum::<f64>() / n_eps,
                mean_episode_len: window_records.iter().map(|r| r.length as f64).sum::<f64>() / n_eps,
                crash_count: window_records.iter().filter(|r| r.crashed).count() as u32,
                policy_loss: metrics.policy_loss,
                value_loss: metrics.value_loss,
                entropy: metrics.entropy,
                clip_fraction: metrics.clip_fraction,
            };
            if let Some(new_configs) = on_update(&record) {
                if !new_configs.is_empty() {
                    configs = new_configs;
                    live = None;
                }
            }
        }
        Ok(())
    }

    /// Trains for exactly `episodes` episodes (round-robin over `configs`)
    /// and returns their records. Used by the closed loop, one epoch at a
    /// time.
    pub fn train_episodes(
        &mut self,
        configs: &[ScenarioConfig],
        episodes: u64,
        mut on_update: impl FnMut(&UpdateRecord),
        mut on_episode: impl FnMut(&EpisodeRecord),
    ) -> Result<Vec<EpisodeRecord>, PpoError> {
        let mut records = Vec::new();
        self.train(
            configs,
            Budget::Episodes(episodes),
            |update_record| {
                on_update(update_record);
                None
            },
            |episode_record| {
                on_episode(episode_record);
                records.push(episode_record.clone());
            },
        )?;
        Ok(records)
    }
}

/// Greedy action under `params`: the argmax probability.
pub fn act_greedy(params: &PolicyParams, obs: &[f64]) -> Result<usize, PpoError> {
    let (probs, _) = params.forward(obs)?;
    Ok(probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0))
}

/// One evaluation episode row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub config_id: String,
    pub run: u32,
    pub reward: f64,
    pub length: u32,
    pub crashed: bool,
    pub ttc_near_miss_count: u32,
    pub r_threshold_count: u32,
}

/// Deterministic greedy evaluation: `runs_per_config` episodes per config
/// with per-run spawn seeds derived from the config seed.
pub fn evaluate_policy(
    params: &PolicyParams,
    env: &EnvSettings,
    configs: &[ScenarioConfig],
    runs_per_config: u32,
    seed_salt: u64,
) -> Result<Vec<EvalEpisode>, PpoError> {
    let mut rows = Vec::with_capacity(configs.len() * runs_per_config as usize);
    for config in configs {
        for run in 0..runs_per_config {
            let seed = mix_seed(config.seed, mix_seed(seed_salt, run as u64));
            let mut failed: Option<PpoError> = None;
            let result = crate::sim::run_episode(
                config,
                &env.sim,
                &env.risk,
                &mut |obs| match act_greedy(params, obs) {
                    Ok(a) => Action::from_index(a),
                    Err(e) => {
                        failed = Some(e);
                        Action::Idle
                    }
                },
                Some(seed),
                None,
                false,
            )?;
            if let Some(e) = failed {
                return Err(e);
            }
            rows.push(EvalEpisode {
                config_id: config.id.clone(),
                run,
                reward: result.total_reward,
                length: result.length,
                crashed: result.crashed,
                ttc_near_miss_count: result.risk.ttc_near_miss_count,
                r_threshold_count: result.risk.r_threshold_count,
            });
        }
    }
    Ok(rows)
}

/// Aggregate of an evaluation table, mirroring the reward / episode length
/// / crash-count summary columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: u32,
    pub mean_reward: f64,
    pub mean_episode_len: f64,
    pub total_crashes: u32,
    pub mean_ttc_near_miss: f64,
    pub mean_r_threshold_count: f64,
}

pub fn summarize_eval(rows: &[EvalEpisode]) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    EvalSummary {
        episodes: rows.len() as u32,
        mean_reward: rows.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_episode_len: rows.iter().map(|r| r.length as f64).sum::<f64>() / n,
        total_crashes: rows.iter().filter(|r| r.crashed).count() as u32,
        mean_ttc_near_miss: rows.iter().map(|r| r.ttc_near_miss_count as f64).sum::<f64>() / n,
        mean_r_threshold_count: rows.iter().map(|r| r.r_threshold_count as f64).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_params(seed: u64) -> PolicyParams {
        PolicyParams::new(4, &[8, 8], seed)
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let mut params = toy_params(0);
        for layer in params.policy.layers.iter_mut().chain(params.value.layers.iter_mut()) {
            layer.w.iter_mut().for_each(|w| *w = 0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let (probs, value) = params.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for p in &probs {
            assert_relative_eq!(*p, 0.2, epsilon = 1e-12);
        }
        assert_eq!(value, 0.0);
    }

    #[test]
    fn forward_is_simplex_and_pure() {
        let params = toy_params(5);
        let obs = [0.5, -0.5, 0.25, 1.0];
        let (p1, v1) = params.forward(&obs).unwrap();
        let (p2, v2) = params.forward(&obs).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(v1, v2);
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_shape_mismatch() {
        let params = toy_params(5);
        assert!(matches!(
            params.forward(&[1.0, 2.0]),
            Err(PpoError::ShapeMismatch { got: 2, want: 4 })
        ));
    }

    #[test]
    fn clipped_objective_examples() {
        assert_eq!(clipped_objective(1.0, 3.5, 0.2), 3.5);
        assert_relative_eq!(clipped_objective(1.5, 2.0, 0.2), 2.4);
        assert_relative_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn gae_zero_case() {
        let (adv, ret) = compute_gae(&[0.0; 4], &[0.0; 4], &[false; 4], 0.0, 0.99, 0.95);
        assert_eq!(adv, vec![0.0; 4]);
        assert_eq!(ret, vec![0.0; 4]);
    }

    #[test]
    fn gae_single_step_td() {
        let (adv, ret) = compute_gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn gae_matches_independent_recursion() {
        let rewards = [1.0, -0.5, 2.0];
        let values = [0.3, 0.1, -0.2];
        let dones = [false, false, false];
        let bootstrap = 0.4;
        let (discount, lambda) = (0.9, 0.95);
        let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, discount, lambda);

        // Brute-force recursion, written separately.
        let mut expected = [0.0; 3];
        let next = [values[1], values[2], bootstrap];
        let deltas: Vec<f64> =
            (0..3).map(|t| rewards[t] + discount * next[t] - values[t]).collect();
        expected[2] = deltas[2];
        expected[1] = deltas[1] + discount * lambda * expected[2];
        expected[0] = deltas[0] + discount * lambda * expected[1];
        for t in 0..3 {
            assert_relative_eq!(adv[t], expected[t], epsilon = 1e-12);
            assert_relative_eq!(ret[t], expected[t] + values[t], epsilon = 1e-12);
        }
    }

    #[test]
    fn gae_done_cuts_bootstrap() {
        let (adv, _) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[true, true], 99.0, 0.99, 0.95);
        assert_eq!(adv, vec![1.0, 1.0]);
    }

    fn synthetic_batch(params: &PolicyParams, n: usize, seed: u64) -> RolloutBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = RolloutBatch::default();
        for _ in 0..n {
            let obs: Vec<f64> = (0..params.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (probs, value) = params.forward(&obs).unwrap();
            let action = rng.gen_range(0..params.n_actions);
            batch.log_probs.push(probs[action].ln());
            batch.observations.push(obs);
            batch.actions.push(action);
            batch.rewards.push(rng.gen_range(-1.0..1.0));
            batch.dones.push(false);
            batch.values.push(value);
        }
        let (adv, ret) =
            compute_gae(&batch.rewards, &batch.values, &batch.dones, 0.0, 0.99, 0.95);
        batch.advantages = adv;
        batch.returns = ret;
        batch
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut params = toy_params(9);
        let before = params.clone();
        let batch = synthetic_batch(&params, 32, 1);
        let mut cfg = PpoConfig::default();
        cfg.learning_rate = 0.0;
        let mut ap = AdamState::new(&params.policy);
        let mut av = AdamState::new(&params.value);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        update(&mut params, &mut ap, &mut av, &batch, &cfg, &mut rng, 0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn ratio_identity_before_any_change() {
        // Recomputing log-probs with unchanged params gives ratio 1, so the
        // objective equals the advantage and nothing is clipped.
        let params = toy_params(3);
        let batch = synthetic_batch(&params, 16, 2);
        for i in 0..batch.len() {
            let logits = params.policy.forward(&batch.observations[i]);
            let lp = log_softmax_at(&logits, batch.actions[i]);
            let ratio = (lp - batch.log_probs[i]).exp();
            assert_relative_eq!(ratio, 1.0, epsilon = 1e-12);
            assert_relative_eq!(
                clipped_objective(ratio, batch.advantages[i], 0.2),
                batch.advantages[i],
                epsilon = 1e-9
            );
        }
        let metrics = evaluate_batch_metrics(&params, &batch, &PpoConfig::default());
        assert_eq!(metrics.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantages_give_zero_policy_gradient() {
        let mut params = toy_params(11);
        let mut batch = synthetic_batch(&params, 16, 3);
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let mut cfg = PpoConfig::default();
        cfg.normalize_advantages = false;
        cfg.entropy_coeff = 0.0;
        cfg.value_loss_coeff = 0.0;
        cfg.update_epochs = 1;
        cfg.minibatch_size = 16;
        let before = params.policy.clone();
        let mut ap = AdamState::new(&params.policy);
        let mut av = AdamState::new(&params.value);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let metrics = update(&mut params, &mut ap, &mut av, &batch, &cfg, &mut rng, 0).unwrap();
        assert_eq!(metrics.policy_loss, 0.0);
        // Zero gradient everywhere: Adam must not move the policy.
        assert_eq!(params.policy, before);
    }

    /// Full combined loss for the finite-difference oracle.
    fn combined_loss(params: &PolicyParams, batch: &RolloutBatch, cfg: &PpoConfig) -> f64 {
        let inv_n = 1.0 / batch.len() as f64;
        let mut policy_loss = 0.0;
        let mut value_loss = 0.0;
        let mut entropy = 0.0;
        for i in 0..batch.len() {
            let logits = params.policy.forward(&batch.observations[i]);
            let probs = softmax(&logits);
            let lp = log_softmax_at(&logits, batch.actions[i]);
            let ratio = (lp - batch.log_probs[i]).exp();
            policy_loss -= clipped_objective(ratio, batch.advantages[i], cfg.clip_epsilon) * inv_n;
            entropy += probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum::<f64>()
                * inv_n;
            let v = params.value.forward(&batch.observations[i])[0];
            value_loss += (v - batch.returns[i]).powi(2) * inv_n;
        }
        policy_loss + cfg.value_loss_coeff * value_loss - cfg.entropy_coeff * entropy
    }

    /// Analytic gradient of the combined loss via the same code path the
    /// optimizer uses.
    fn analytic_grads(params: &PolicyParams, batch: &RolloutBatch, cfg: &PpoConfig) -> (Mlp, Mlp) {
        let mut policy_grads = params.policy.zeros_like();
        let mut value_grads = params.value.zeros_like();
        let inv_n = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            let p_cache = params.policy.forward_cached(&batch.observations[i]);
            let logits = p_cache.last().unwrap().clone();
            let probs = softmax(&logits);
            let lp = log_softmax_at(&logits, batch.actions[i]);
            let ratio = (lp - batch.log_probs[i]).exp();
            let adv = batch.advantages[i];
            let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
            let unclipped_selected = ratio * adv <= clipped * adv;
            let entropy: f64 =
                probs.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
            let mut d_logits = vec![0.0; params.n_actions];
            if unclipped_selected {
                let g = adv * ratio * inv_n;
                for (j, d) in d_logits.iter_mut().enumerate() {
                    let onehot = if j == batch.actions[i] { 1.0 } else { 0.0 };
                    *d -= g * (onehot - probs[j]);
                }
            }
            for (j, d) in d_logits.iter_mut().enumerate() {
                if probs[j] > 0.0 {
                    *d += cfg.entropy_coeff * probs[j] * (probs[j].ln() + entropy) * inv_n;
                }
            }
            params.policy.backward(&p_cache, &d_logits, &mut policy_grads);

            let v_cache = params.value.forward_cached(&batch.observations[i]);
            let v = v_cache.last().unwrap()[0];
            let d_value = [cfg.value_loss_coeff * 2.0 * (v - batch.returns[i]) * inv_n];
            params.value.backward(&v_cache, &d_value, &mut value_grads);
        }
        (policy_grads, value_grads)
    }

    /// Addresses of every scalar parameter: (policy?, layer, bias?, index).
    fn param_slots(params: &PolicyParams) -> Vec<(bool, usize, bool, usize)> {
        let mut slots = Vec::new();
        for (is_policy, net) in [(true, &params.policy), (false, &params.value)] {
            for (li, layer) in net.layers.iter().enumerate() {
                for i in 0..layer.w.len() {
                    slots.push((is_policy, li, false, i));
                }
                for i in 0..layer.b.len() {
                    slots.push((is_policy, li, true, i));
                }
            }
        }
        slots
    }

    fn param_mut(params: &mut PolicyParams, slot: (bool, usize, bool, usize)) -> &mut f64 {
        let (is_policy, li, is_bias, i) = slot;
        let net = if is_policy { &mut params.policy } else { &mut params.value };
        if is_bias {
            &mut net.layers[li].b[i]
        } else {
            &mut net.layers[li].w[i]
        }
    }

    /// Central finite differences against the analytic gradient of the
    /// combined loss; exercised harder by the acceptance suite.
    pub(crate) fn gradient_check(seed: u64) -> f64 {
        let mut params = toy_params(seed);
        // Make old log-probs differ from the current policy so ratios are
        // away from 1 and both objective branches get exercised.
        let mut batch = synthetic_batch(&params, 8, seed.wrapping_add(100));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        for lp in batch.log_probs.iter_mut() {
            *lp += rng.gen_range(-0.3..0.3);
        }
        let mut cfg = PpoConfig::default();
        cfg.normalize_advantages = false;

        let (pg, vg) = analytic_grads(&params, &batch, &cfg);
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for slot in param_slots(&params) {
            let (is_policy, li, is_bias, i) = slot;
            let g = if is_policy { &pg } else { &vg };
            let analytic =
                if is_bias { g.layers[li].b[i] } else { g.layers[li].w[i] };
            let orig = *param_mut(&mut params, slot);
            *param_mut(&mut params, slot) = orig + h;
            let up = combined_loss(&params, &batch, &cfg);
            *param_mut(&mut params, slot) = orig - h;
            let down = combined_loss(&params, &batch, &cfg);
            *param_mut(&mut params, slot) = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-3);
            max_rel = max_rel.max((fd - analytic).abs() / denom);
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let max_rel = gradient_check(seed);
            assert!(max_rel <= 1e-4, "seed {seed}: max relative error {max_rel}");
        }
    }

    #[test]
    fn train_zero_steps_returns_initial_params() {
        let env = EnvSettings::default();
        let mut trainer = PpoTrainer::new(PpoConfig::default(), env, 4);
        let before = trainer.params.clone();
        let config = crate::scenario::sample_config(3, &crate::scenario::ValidRanges::default()).unwrap();
        let mut updates = 0;
        trainer
            .train(&[config], Budget::Steps(0), |_| {
                updates += 1;
                None
            }, |_| {})
            .unwrap();
        assert_eq!(trainer.params, before);
        assert_eq!(updates, 0);
    }

    #[test]
    fn train_deterministic() {
        let env = EnvSettings::default();
        let config = ScenarioConfig {
            id: "det".into(),
            num_aggressive: 1,
            num_defensive: 1,
            num_regular: 1,
            num_trucks: 0,
            num_cars: 3,
            density: 12.0,
            vehicle_i: None,
            vehicle_j: None,
            lane_count: 2,
            seed: 5,
        };
        let mut cfg = PpoConfig::default();
        cfg.steps_per_update = 128;
        cfg.minibatch_size = 32;
        cfg.update_epochs = 2;

        let run = |seed: u64| {
            let mut trainer = PpoTrainer::new(cfg.clone(), env.clone(), seed);
            let mut update_log = Vec::new();
            let mut episode_log = Vec::new();
            trainer
                .train(
                    std::slice::from_ref(&config),
                    Budget::Steps(512),
                    |u| {
                        update_log.push(u.clone());
                        None
                    },
                    |e| episode_log.push(e.clone()),
                )
                .unwrap();
            (update_log, episode_log, trainer.params)
        };
        let (u1, e1, p1) = run(7);
        let (u2, e2, p2) = run(7);
        assert_eq!(u1, u2);
        assert_eq!(e1, e2);
        assert_eq!(p1, p2);
        assert!(!u1.is_empty());
        assert!(p1.all_finite());
    }

    #[test]
    fn policy_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let params = toy_params(13);
        params.save(&path).unwrap();
        let loaded = PolicyParams::load(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
