//! Policy optimization backbone: GAE advantages and the clipped-surrogate
//! update, plus the categorical-policy helpers shared by the rest of the
//! crate (restricted distributions, sampling, greedy evaluation).
//!
//! Policies are softmax-headed [`MlpNet`]s over the full action set; action
//! selection restricts and renormalizes the distribution to the current
//! legal set, and log-probabilities are always computed the same way so the
//! importance ratio of a freshly updated policy against itself is exactly 1.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{optimizer_step, GradientTape, MlpNet, OptimizerState};
use crate::rng::RngStream;

const PROB_FLOOR: f64 = 1e-12;

/// PPO hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch_size: 64,
            value_coef: 0.5,
            entropy_coef: 0.01,
            policy_lr: 3e-4,
            value_lr: 1e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config("clip_epsilon must be in (0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must be in [0, 1]".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One step record: the atom of all rollouts.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub mask_value: f64,
    pub done: bool,
    /// Legal actions at `state`; needed to recompute restricted log-probs.
    pub legal_actions: Vec<usize>,
}

/// Per-agent buffer of transitions plus computed advantages and returns.
#[derive(Debug, Clone, Default)]
pub struct MaskedRolloutBatch {
    pub transitions: Vec<Transition>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl MaskedRolloutBatch {
    pub fn push(&mut self, transition: Transition, log_prob: f64, value: f64) {
        self.transitions.push(transition);
        self.old_log_probs.push(log_prob);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Fills advantages and returns from the stored rewards/values/dones.
    pub fn compute_advantages(&mut self, bootstrap_value: f64, gamma: f64, lambda: f64) {
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) =
            compute_gae(&rewards, &self.values, &dones, bootstrap_value, gamma, lambda);
        self.advantages = adv;
        self.returns = ret;
    }

    /// Normalizes advantages to mean 0, std 1 (population std, floored at
    /// 1e-8 so an all-equal batch maps to zeros rather than blowing up).
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len();
        if n <= 1 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n as f64;
        let var = self
            .advantages
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt().max(1e-8);
        for a in &mut self.advantages {
            *a = (*a - mean) / std;
        }
    }
}

/// Backward GAE recursion.
///
/// `bootstrap_value` estimates the state after the last transition and is
/// ignored whenever that transition terminated its episode.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    debug_assert_eq!(values.len(), n);
    debug_assert_eq!(dones.len(), n);
    let mut advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], gae)
        } else {
            (bootstrap_value, 0.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        gae = delta + gamma * lambda * carry;
        advantages[t] = gae;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Probability distribution of `policy` at `obs`, restricted and
/// renormalized to `legal`. The result aligns with `legal`'s order.
pub fn action_distribution(policy: &MlpNet, obs: &[f64], legal: &[usize]) -> Result<Vec<f64>> {
    if legal.is_empty() {
        return Err(Error::EmptyInput("legal action set"));
    }
    let probs = policy.forward(obs)?;
    let mut restricted: Vec<f64> = legal
        .iter()
        .map(|&a| {
            probs
                .get(a)
                .copied()
                .ok_or(Error::IllegalAction { agent: 0, action: a })
        })
        .collect::<Result<_>>()?;
    let sum: f64 = restricted.iter().sum();
    if sum <= 0.0 {
        // Degenerate head: fall back to uniform over legal.
        let u = 1.0 / legal.len() as f64;
        restricted.iter_mut().for_each(|p| *p = u);
    } else {
        restricted.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(restricted)
}

/// Log-probability of `action` under the restricted distribution.
pub fn log_prob_of(policy: &MlpNet, obs: &[f64], legal: &[usize], action: usize) -> Result<f64> {
    let dist = action_distribution(policy, obs, legal)?;
    let pos = legal
        .iter()
        .position(|&a| a == action)
        .ok_or(Error::IllegalAction { agent: 0, action })?;
    Ok(dist[pos].max(PROB_FLOOR).ln())
}

/// Samples an action from the restricted distribution.
/// Returns `(action, log_prob)`.
pub fn sample_action(
    policy: &MlpNet,
    obs: &[f64],
    legal: &[usize],
    rng: &mut RngStream,
) -> Result<(usize, f64)> {
    let dist = action_distribution(policy, obs, legal)?;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut pick = legal.len() - 1;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            pick = i;
            break;
        }
    }
    Ok((legal[pick], dist[pick].max(PROB_FLOOR).ln()))
}

/// Highest-probability legal action; ties resolve to the lowest action id.
pub fn greedy_action(policy: &MlpNet, obs: &[f64], legal: &[usize]) -> Result<usize> {
    let dist = action_distribution(policy, obs, legal)?;
    let mut best = 0;
    for i in 1..dist.len() {
        if dist[i] > dist[best] {
            best = i;
        }
    }
    Ok(legal[best])
}

fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Negative mean clipped-surrogate objective (gradient-descent form).
///
/// The per-step term is `min(ratio * adv, clip(ratio, 1-eps, 1+eps) * adv)`
/// with `ratio = exp(new_log_prob - old_log_prob)`.
pub fn clipped_surrogate_loss(
    batch: &MaskedRolloutBatch,
    new_log_probs: &[f64],
    clip_epsilon: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("rollout batch"));
    }
    debug_assert_eq!(new_log_probs.len(), batch.len());
    let mut total = 0.0;
    for (step, ((&new_lp, &old_lp), &adv)) in new_log_probs
        .iter()
        .zip(&batch.old_log_probs)
        .zip(&batch.advantages)
        .enumerate()
    {
        let ratio = (new_lp - old_lp).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFiniteRatio { step });
        }
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        total += (ratio * adv).min(clipped * adv);
    }
    Ok(-total / batch.len() as f64)
}

/// Stats reported by one [`ppo_update`] call, computed against the full
/// batch after the final epoch.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PpoUpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    /// `mean(ratio - 1 - ln ratio)`; non-negative pointwise.
    pub approx_kl: f64,
    pub n_steps: usize,
}

/// Runs `epochs x minibatches` gradient steps on the combined loss
/// `surrogate + value_coef * value_mse - entropy_coef * entropy`.
pub fn ppo_update(
    policy: &mut MlpNet,
    value: &mut MlpNet,
    batch: &MaskedRolloutBatch,
    cfg: &PpoConfig,
    policy_opt: &mut OptimizerState,
    value_opt: &mut OptimizerState,
    rng: &mut RngStream,
) -> Result<PpoUpdateStats> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("rollout batch"));
    }
    let n = batch.len();
    let mut policy_tape = GradientTape::for_net(policy);
    let mut value_tape = GradientTape::for_net(value);
    let mut indices: Vec<usize> = (0..n).collect();

    for _epoch in 0..cfg.epochs {
        // Fisher-Yates shuffle driven by the update stream.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        for chunk in indices.chunks(cfg.minibatch_size.min(n)) {
            policy_tape.zero();
            value_tape.zero();
            let mb = chunk.len() as f64;
            for &idx in chunk {
                let tr = &batch.transitions[idx];
                let adv = batch.advantages[idx];
                let ret = batch.returns[idx];
                let old_lp = batch.old_log_probs[idx];
                let legal = &tr.legal_actions;

                let probs = policy.forward_cached(&tr.state)?;
                let sum_legal: f64 = legal.iter().map(|&a| probs[a]).sum();
                let sum_legal = sum_legal.max(PROB_FLOOR);
                let p_action = probs[tr.action].max(PROB_FLOOR);
                let new_lp = (p_action / sum_legal).max(PROB_FLOOR).ln();
                let ratio = (new_lp - old_lp).exp();
                if !ratio.is_finite() {
                    return Err(Error::NonFiniteRatio { step: idx });
                }

                // Surrogate gradient flows only through the unclipped branch.
                let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
                let active = ratio * adv <= clipped * adv;
                let d_loss_d_lp = if active { -adv * ratio / mb } else { 0.0 };

                // Restricted entropy gradient w.r.t. the softmax output:
                // with q_a = p_a / sum_legal, dH/dp_a = (-ln q_a - H) / sum_legal.
                let q: Vec<f64> = legal.iter().map(|&a| probs[a] / sum_legal).collect();
                let h = entropy(&q);

                let mut upstream = vec![0.0; probs.len()];
                for (pos, &a) in legal.iter().enumerate() {
                    // d new_lp / d p_a: 1/p_action on the taken action,
                    // minus 1/sum_legal on every legal action.
                    let mut g = -d_loss_d_lp / sum_legal;
                    if a == tr.action {
                        g += d_loss_d_lp / p_action;
                    }
                    let qa = q[pos].max(PROB_FLOOR);
                    g += cfg.entropy_coef * (qa.ln() + h) / sum_legal / mb;
                    upstream[a] = g;
                }
                policy.backward(&upstream, &mut policy_tape)?;

                let v = value.forward_cached(&tr.state)?[0];
                let dv = cfg.value_coef * 2.0 * (v - ret) / mb;
                value.backward(&[dv], &mut value_tape)?;
            }
            optimizer_step(policy, &mut policy_tape, policy_opt)?;
            optimizer_step(value, &mut value_tape, value_opt)?;
        }
    }

    // Post-update stats against the full batch.
    let mut new_lps = Vec::with_capacity(n);
    let mut ent_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut vloss_sum = 0.0;
    for (idx, tr) in batch.transitions.iter().enumerate() {
        let lp = log_prob_of(policy, &tr.state, &tr.legal_actions, tr.action)?;
        new_lps.push(lp);
        let dist = action_distribution(policy, &tr.state, &tr.legal_actions)?;
        ent_sum += entropy(&dist);
        let ratio = (lp - batch.old_log_probs[idx]).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFiniteRatio { step: idx });
        }
        ratio_sum += ratio;
        kl_sum += ratio - 1.0 - ratio.ln();
        let v = value.forward(&tr.state)?[0];
        let d = v - batch.returns[idx];
        vloss_sum += d * d;
    }
    let policy_loss = clipped_surrogate_loss(batch, &new_lps, cfg.clip_epsilon)?;
    Ok(PpoUpdateStats {
        policy_loss,
        value_loss: vloss_sum / n as f64,
        entropy: ent_sum / n as f64,
        mean_ratio: ratio_sum / n as f64,
        approx_kl: kl_sum / n as f64,
        n_steps: n,
    })
}
