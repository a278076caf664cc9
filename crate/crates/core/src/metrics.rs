//! The four evaluation metrics: final average reward, policy-shift KL,
//! inter-agent fidelity, and reward drop after perturbation.
//!
//! Everything here is a pure function over supplied data except
//! [`reward_drop_after_perturbation`], which drives fresh environment copies
//! through greedy evaluation episodes. Evaluation never mutates network
//! parameters.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::env::{state_key, MultiAgentEnv, StateKey};
use crate::error::{Error, Result};
use crate::masking::{greedy_episode_return, mask_value, Perturbation};
use crate::nn::MlpNet;
use crate::rng::{labelled_stream, labels};

const KL_FLOOR: f64 = 1e-12;

/// One evaluation snapshot, persisted to `metrics.csv` and `metrics.jsonl`.
///
/// Column order is fixed:
/// `run_id,iteration,final_avg_reward,reward_std,kl_divergence,fidelity,`
/// `fidelity_rank_corr,reward_drop_fraction,reward_drop_absolute_mode,`
/// `n_eval_episodes,seed`.
///
/// `fidelity_rank_corr` is a secondary rank-correlation view of mask
/// agreement, logged alongside the headline agreement-rate fidelity.
/// Single-agent runs report the vacuous fidelity of 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub iteration: usize,
    pub final_avg_reward: f64,
    pub reward_std: f64,
    pub kl_divergence: f64,
    pub fidelity: f64,
    pub fidelity_rank_corr: f64,
    /// Signed fraction; negative means degradation.
    pub reward_drop_fraction: f64,
    /// True when the clean return was too small for a relative drop and the
    /// absolute difference was recorded instead.
    pub reward_drop_absolute_mode: bool,
    pub n_eval_episodes: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let finite = self.final_avg_reward.is_finite()
            && self.reward_std.is_finite()
            && self.kl_divergence.is_finite()
            && self.fidelity.is_finite()
            && self.reward_drop_fraction.is_finite();
        if !finite {
            return Err(Error::Config("metrics record has non-finite fields".into()));
        }
        if self.kl_divergence < -KL_FLOOR {
            return Err(Error::Config("kl_divergence must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fidelity) {
            return Err(Error::Config("fidelity must be in [0, 1]".into()));
        }
        if self.n_eval_episodes == 0 {
            return Err(Error::Config("n_eval_episodes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "run_id,iteration,final_avg_reward,reward_std,kl_divergence,fidelity,\
         fidelity_rank_corr,reward_drop_fraction,reward_drop_absolute_mode,\
         n_eval_episodes,seed"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.iteration,
            self.final_avg_reward,
            self.reward_std,
            self.kl_divergence,
            self.fidelity,
            self.fidelity_rank_corr,
            self.reward_drop_fraction,
            self.reward_drop_absolute_mode,
            self.n_eval_episodes,
            self.seed
        )
    }
}

/// `sum p * ln(p / q)` with an epsilon floor on `q`. Requires equal support
/// sizes and both inputs normalized to 1 within 1e-9.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::MismatchedSupport { p: p.len(), q: q.len() });
    }
    if p.is_empty() {
        return Err(Error::EmptyInput("distribution"));
    }
    for (name, dist) in [("p", p), ("q", q)] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            let _ = name;
            return Err(Error::NotNormalized { sum });
        }
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += pi * (pi / qi.max(KL_FLOOR)).ln();
        }
    }
    Ok(total)
}

/// Mean over validation states of `KL(policy || hard-gated policy)`: the
/// distributional shift the mask introduces.
///
/// Each state carries its legal action set; the gated distribution is the
/// policy itself when `m > tau` and uniform over legal actions otherwise.
pub fn policy_shift_kl(
    policy: &MlpNet,
    mask_net: &MlpNet,
    states: &[(Vec<f64>, Vec<usize>)],
    tau: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyInput("validation states"));
    }
    let mut total = 0.0;
    for (obs, legal) in states {
        let dist = crate::ppo::action_distribution(policy, obs, legal)?;
        let m = mask_value(mask_net, obs)?;
        let gated: Vec<f64> = if m > tau {
            dist.clone()
        } else {
            vec![1.0 / legal.len() as f64; legal.len()]
        };
        total += kl_divergence(&dist, &gated)?;
    }
    Ok(total / states.len() as f64)
}

/// Mean pairwise agreement rate of binary mask decisions (`m <= tau` versus
/// `m > tau`) across agents over a shared state set.
///
/// `mask_values[agent][state]` must be rectangular with at least two agents
/// and one state.
pub fn fidelity_between_agents(mask_values: &[Vec<f64>], tau: f64) -> Result<f64> {
    let n_agents = mask_values.len();
    if n_agents < 2 {
        return Err(Error::TooFew { what: "agents", required: 2, got: n_agents });
    }
    let n_states = mask_values[0].len();
    if n_states == 0 {
        return Err(Error::EmptyInput("shared states"));
    }
    if mask_values.iter().any(|row| row.len() != n_states) {
        return Err(Error::ShapeMismatch { expected: n_states, got: 0 });
    }
    let decisions: Vec<Vec<bool>> = mask_values
        .iter()
        .map(|row| row.iter().map(|&m| m <= tau).collect())
        .collect();
    let mut agree_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..n_agents {
        for b in (a + 1)..n_agents {
            let agreed = decisions[a]
                .iter()
                .zip(&decisions[b])
                .filter(|(x, y)| x == y)
                .count();
            agree_sum += agreed as f64 / n_states as f64;
            pairs += 1;
        }
    }
    Ok(agree_sum / pairs as f64)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        // Constant rankings carry no ordering information; treat a pair of
        // constant vectors as perfectly correlated.
        if sxx == 0.0 && syy == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Secondary fidelity view: mean pairwise Spearman rank correlation of the
/// raw mask values. Logged next to the headline agreement rate.
pub fn fidelity_rank_correlation(mask_values: &[Vec<f64>]) -> Result<f64> {
    let n_agents = mask_values.len();
    if n_agents < 2 {
        return Err(Error::TooFew { what: "agents", required: 2, got: n_agents });
    }
    if mask_values[0].is_empty() {
        return Err(Error::EmptyInput("shared states"));
    }
    let ranks: Vec<Vec<f64>> = mask_values.iter().map(|row| average_ranks(row)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n_agents {
        for b in (a + 1)..n_agents {
            total += pearson(&ranks[a], &ranks[b]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Outcome of a perturbation evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct RewardDropReport {
    /// `(mean perturbed - mean clean) / |mean clean|`; negative means the
    /// perturbation degraded performance. Absolute difference when the clean
    /// mean is within 1e-6 of zero (see `absolute_mode`).
    pub fraction: f64,
    pub mean_clean: f64,
    pub mean_perturbed: f64,
    pub absolute_mode: bool,
}

/// Measures the return drop when the focal agent's action is replaced by a
/// uniform legal draw at every visit of any state in `critical_states`.
///
/// Every episode replays the same `env_seed` (critical states are bound to
/// an episode context, which this keeps on-trajectory under randomized
/// resets); all agents act greedily, so clean episodes are identical and
/// perturbed episodes differ only in the uniform replacement draws seeded
/// by `seed`.
pub fn reward_drop_after_perturbation(
    env_proto: &dyn MultiAgentEnv,
    focal_agent: usize,
    policies: &[MlpNet],
    critical_states: &[Vec<f64>],
    n_episodes: usize,
    env_seed: u64,
    seed: u64,
) -> Result<RewardDropReport> {
    if n_episodes < 2 {
        return Err(Error::TooFew { what: "evaluation episodes", required: 2, got: n_episodes });
    }
    let obs_dim = env_proto.spec().obs_dim;
    for s in critical_states {
        if s.len() != obs_dim {
            return Err(Error::ShapeMismatch { expected: obs_dim, got: s.len() });
        }
    }
    let keys: BTreeSet<StateKey> = critical_states.iter().map(|s| state_key(s)).collect();
    let mut rng = labelled_stream(seed, &[labels::PERTURBATION]);
    let mean_clean = greedy_episode_return(
        env_proto,
        focal_agent,
        policies,
        Perturbation::None,
        env_seed,
        &mut rng,
    )?;
    let mut pert_sum = 0.0;
    for _ in 0..n_episodes {
        pert_sum += greedy_episode_return(
            env_proto,
            focal_agent,
            policies,
            Perturbation::EverySet(&keys),
            env_seed,
            &mut rng,
        )?;
    }
    let mean_perturbed = pert_sum / n_episodes as f64;
    let (fraction, absolute_mode) = if mean_clean.abs() < 1e-6 {
        (mean_perturbed - mean_clean, true)
    } else {
        ((mean_perturbed - mean_clean) / mean_clean.abs(), false)
    };
    Ok(RewardDropReport { fraction, mean_clean, mean_perturbed, absolute_mode })
}

/// Arithmetic mean and population standard deviation of episode returns.
pub fn final_average_reward(returns: &[f64]) -> Result<(f64, f64)> {
    if returns.is_empty() {
        return Err(Error::EmptyInput("episode returns"));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChainMdp, ChainMdpSpec};
    use crate::masking::{mask_kl_penalty, GateMode};
    use crate::nn::OutputActivation;
    use crate::rng;
    use rand::Rng;

    fn random_dist(r: &mut crate::rng::RngStream, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut r = rng::stream(1);
        for _ in 0..50 {
            let n = r.gen_range(2..8);
            let p = random_dist(&mut r, n);
            let kl = kl_divergence(&p, &p).unwrap();
            assert!(kl.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_deterministic_vs_uniform_is_ln_two() {
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn kl_matches_term_by_term_oracle_and_is_non_negative() {
        let mut r = rng::stream(2);
        for _ in 0..100 {
            let n = r.gen_range(2..10);
            let p = random_dist(&mut r, n);
            let q = random_dist(&mut r, n);
            let got = kl_divergence(&p, &q).unwrap();
            let mut want = 0.0;
            for i in 0..n {
                if p[i] > 0.0 {
                    want += p[i] * (p[i] / q[i].max(1e-12)).ln();
                }
            }
            assert!((got - want).abs() < 1e-12);
            assert!(got >= -1e-12);
        }
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::MismatchedSupport { p: 1, q: 2 })
        ));
        assert!(matches!(
            kl_divergence(&[0.7, 0.7], &[0.5, 0.5]),
            Err(Error::NotNormalized { .. })
        ));
    }

    fn uniform_policy(obs_dim: usize, n_actions: usize) -> MlpNet {
        MlpNet::zeros(&[obs_dim, n_actions], OutputActivation::Softmax).unwrap()
    }

    fn mask_net_with_bias(obs_dim: usize, bias: f64) -> MlpNet {
        let mut net = MlpNet::zeros(&[obs_dim, 1], OutputActivation::Sigmoid).unwrap();
        net.params_mut().1[0] = vec![bias];
        net
    }

    #[test]
    fn policy_shift_zero_when_mask_above_tau() {
        let mut r = rng::stream(3);
        let policy = MlpNet::new(&[3, 8, 4], OutputActivation::Softmax, 0.5, &mut r).unwrap();
        let high_mask = mask_net_with_bias(3, 3.0); // m ~ 0.95 > tau
        let states: Vec<(Vec<f64>, Vec<usize>)> = (0..5)
            .map(|i| (vec![i as f64 * 0.1, 0.0, 1.0], vec![0, 1, 2, 3]))
            .collect();
        let kl = policy_shift_kl(&policy, &high_mask, &states, 0.5).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn policy_shift_zero_for_uniform_policy_all_masked() {
        let policy = uniform_policy(3, 4);
        let low_mask = mask_net_with_bias(3, -3.0); // m ~ 0.047 <= tau
        let states = vec![(vec![0.2, 0.4, 0.6], vec![0, 1, 2, 3])];
        let kl = policy_shift_kl(&policy, &low_mask, &states, 0.5).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn policy_shift_matches_per_state_aggregation_and_hard_gate_penalty() {
        let mut r = rng::stream(4);
        let policy = MlpNet::new(&[3, 8, 4], OutputActivation::Softmax, 1.0, &mut r).unwrap();
        let mask = MlpNet::new(&[3, 8, 1], OutputActivation::Sigmoid, 1.0, &mut r).unwrap();
        let states: Vec<(Vec<f64>, Vec<usize>)> = (0..6)
            .map(|_| {
                (
                    (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
                    vec![0, 1, 2, 3],
                )
            })
            .collect();
        let tau = 0.5;
        let got = policy_shift_kl(&policy, &mask, &states, tau).unwrap();

        // Hand aggregation of per-state KLs.
        let mut want = 0.0;
        for (obs, legal) in &states {
            let dist = crate::ppo::action_distribution(&policy, obs, legal).unwrap();
            let m = mask_value(&mask, obs).unwrap();
            let gated = if m > tau {
                dist.clone()
            } else {
                vec![0.25; 4]
            };
            want += kl_divergence(&dist, &gated).unwrap();
        }
        want /= states.len() as f64;
        assert!((got - want).abs() < 1e-12);

        // Dual route: the masking module's hard-gate penalty agrees.
        let masks: Vec<f64> = states
            .iter()
            .map(|(obs, _)| mask_value(&mask, obs).unwrap())
            .collect();
        let other = mask_kl_penalty(&policy, &states, &masks, tau, GateMode::Hard).unwrap();
        assert!((got - other).abs() < 1e-9);
    }

    #[test]
    fn fidelity_identical_masks_is_one() {
        let masks = vec![vec![0.1, 0.9, 0.4], vec![0.1, 0.9, 0.4]];
        assert_eq!(fidelity_between_agents(&masks, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn fidelity_complementary_masks_is_zero() {
        let masks = vec![vec![0.1, 0.9, 0.2], vec![0.9, 0.1, 0.8]];
        assert_eq!(fidelity_between_agents(&masks, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn fidelity_three_agents_matches_pair_counting() {
        let masks = vec![
            vec![0.1, 0.9, 0.4, 0.6],
            vec![0.2, 0.8, 0.7, 0.3],
            vec![0.9, 0.2, 0.1, 0.8],
        ];
        let tau = 0.5;
        let got = fidelity_between_agents(&masks, tau).unwrap();
        // Brute-force over all pairs and states.
        let dec: Vec<Vec<bool>> = masks
            .iter()
            .map(|r| r.iter().map(|&m| m <= tau).collect())
            .collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..3 {
            for b in (a + 1)..3 {
                let agreed = (0..4).filter(|&s| dec[a][s] == dec[b][s]).count();
                total += agreed as f64 / 4.0;
                pairs += 1;
            }
        }
        assert!((got - total / pairs as f64).abs() < 1e-15);
    }

    #[test]
    fn fidelity_is_symmetric_and_order_invariant() {
        let masks = vec![vec![0.1, 0.9, 0.4, 0.6], vec![0.2, 0.8, 0.7, 0.3]];
        let swapped = vec![masks[1].clone(), masks[0].clone()];
        let tau = 0.5;
        assert_eq!(
            fidelity_between_agents(&masks, tau).unwrap(),
            fidelity_between_agents(&swapped, tau).unwrap()
        );
        // Permute the shared-state order consistently.
        let permuted: Vec<Vec<f64>> = masks
            .iter()
            .map(|r| vec![r[2], r[0], r[3], r[1]])
            .collect();
        assert_eq!(
            fidelity_between_agents(&masks, tau).unwrap(),
            fidelity_between_agents(&permuted, tau).unwrap()
        );
    }

    #[test]
    fn fidelity_requires_two_agents() {
        assert!(matches!(
            fidelity_between_agents(&[vec![0.5]], 0.5),
            Err(Error::TooFew { .. })
        ));
    }

    #[test]
    fn rank_correlation_identical_is_one() {
        let masks = vec![vec![0.1, 0.5, 0.9], vec![0.2, 0.6, 0.8]];
        let got = fidelity_rank_correlation(&masks).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
        let anti = vec![vec![0.1, 0.5, 0.9], vec![0.9, 0.5, 0.1]];
        assert!((fidelity_rank_correlation(&anti).unwrap() + 1.0).abs() < 1e-12);
    }

    fn optimal_chain_policy() -> MlpNet {
        let mut net = MlpNet::zeros(&[5, 2], OutputActivation::Softmax).unwrap();
        net.params_mut().1[0] = vec![0.0, 5.0];
        net
    }

    #[test]
    fn reward_drop_zero_for_unvisited_states() {
        let env = ChainMdp::new(ChainMdpSpec::default()).unwrap();
        let policy = optimal_chain_policy();
        // A state vector that never occurs (two hot entries).
        let ghost = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        let report = reward_drop_after_perturbation(
            &env, 0, std::slice::from_ref(&policy), &[ghost], 20, 0, 7,
        )
        .unwrap();
        assert_eq!(report.fraction, 0.0);
        assert_eq!(report.mean_clean, report.mean_perturbed);
    }

    #[test]
    fn reward_drop_matches_chain_oracle() {
        let spec = ChainMdpSpec::default();
        let env = ChainMdp::new(spec.clone()).unwrap();
        let policy = optimal_chain_policy();
        let (idx, exact_drop) = crate::env::chain_oracle_critical_state(&spec);
        let mut critical = vec![0.0; 5];
        critical[idx] = 1.0;
        let report = reward_drop_after_perturbation(
            &env, 0, std::slice::from_ref(&policy), &[critical], 200, 0, 11,
        )
        .unwrap();
        // Clean return is 1; exact drop 1.0 means perturbed mean 0, so the
        // signed fraction approaches -1.
        assert!(!report.absolute_mode);
        let measured_drop = report.mean_clean - report.mean_perturbed;
        assert!(
            (measured_drop - exact_drop).abs() < 0.1,
            "measured {measured_drop} vs exact {exact_drop}"
        );
        assert!(report.fraction < 0.0);
    }

    #[test]
    fn reward_drop_critical_set_never_smaller_than_empty_set() {
        let spec = ChainMdpSpec::default();
        let env = ChainMdp::new(spec).unwrap();
        let policy = optimal_chain_policy();
        let mut critical = vec![0.0; 5];
        critical[2] = 1.0;
        let with_set = reward_drop_after_perturbation(
            &env, 0, std::slice::from_ref(&policy), &[critical], 50, 0, 13,
        )
        .unwrap();
        let empty = reward_drop_after_perturbation(
            &env, 0, std::slice::from_ref(&policy), &[], 50, 0, 13,
        )
        .unwrap();
        assert!(empty.fraction.abs() < 1e-12);
        assert!(with_set.fraction <= empty.fraction);
    }

    #[test]
    fn reward_drop_requires_two_episodes() {
        let env = ChainMdp::new(ChainMdpSpec::default()).unwrap();
        let policy = optimal_chain_policy();
        assert!(matches!(
            reward_drop_after_perturbation(&env, 0, std::slice::from_ref(&policy), &[], 1, 0, 0),
            Err(Error::TooFew { .. })
        ));
    }

    #[test]
    fn final_average_reward_cases() {
        assert_eq!(final_average_reward(&[2.5]).unwrap(), (2.5, 0.0));
        let (mean, _) = final_average_reward(&[1.0, -1.0]).unwrap();
        assert_eq!(mean, 0.0);
        assert!(matches!(
            final_average_reward(&[]),
            Err(Error::EmptyInput(_))
        ));

        let mut r = rng::stream(5);
        let returns: Vec<f64> = (0..100).map(|_| r.gen_range(-10.0..10.0)).collect();
        let (mean, std) = final_average_reward(&returns).unwrap();
        let m = returns.iter().sum::<f64>() / 100.0;
        let v = returns.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 100.0;
        assert!((mean - m).abs() < 1e-12);
        assert!((std - v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let rec = MetricsRecord {
            run_id: "r1".into(),
            iteration: 3,
            final_avg_reward: 1.5,
            reward_std: 0.2,
            kl_divergence: 0.01,
            fidelity: 0.9,
            fidelity_rank_corr: 0.8,
            reward_drop_fraction: -0.15,
            reward_drop_absolute_mode: false,
            n_eval_episodes: 20,
            seed: 42,
        };
        rec.validate().unwrap();
        let header_cols = MetricsRecord::csv_header().split(',').count();
        let row_cols = rec.to_csv_row().split(',').count();
        assert_eq!(header_cols, row_cols);
    }
}
