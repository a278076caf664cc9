//! The explanation core: mask-network evaluation, the gated action-selection
//! rule, mask training, and perturbation-based critical-state identification.
//!
//! A mask network maps an observation to `m` in `[0, 1]`. During rollouts the
//! gate is hard: `m > tau` follows the policy, `m <= tau` takes a uniform
//! legal action. For training, the gate is relaxed to a Bernoulli over
//! {policy, uniform} with success probability `m`, which gives the
//! reward-deviation term a differentiable log-density.
//!
//! Criticality itself is measured behaviorally: a state's saliency score is
//! the mean return drop over paired episodes in which only that state's
//! action is replaced by a uniform legal one.

use std::collections::BTreeSet;

use rand::Rng;

use crate::env::{state_key, MultiAgentEnv, StateKey};
use crate::error::{Error, Result};
use crate::nn::{optimizer_step, GradientTape, MlpNet, OptimizerState};
use crate::ppo;
use crate::rng::{derive_seed, RngStream};

const DIST_FLOOR: f64 = 1e-12;

/// Mask-training configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MaskConfig {
    /// Randomization threshold; the gate randomizes when `m <= tau`.
    pub tau: f64,
    /// Weight of the mean-mask consistency term.
    pub surrogate_weight: f64,
    /// Weight of the reward-deviation (score-function) term.
    pub reward_weight: f64,
    /// Weight of the soft-gate KL term. Zero by default: KL is logged as a
    /// diagnostic, and this weight exists for the regularized variant.
    pub kl_weight: f64,
    /// Weight of the fidelity term in the logged joint objective. Recorded
    /// for analysis only, never trained on.
    pub fidelity_weight: f64,
    pub lr: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            tau: 0.5,
            surrogate_weight: 2.0,
            reward_weight: 0.2,
            kl_weight: 0.0,
            fidelity_weight: 0.0,
            lr: 1e-3,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("tau must be in (0, 1)".into()));
        }
        for (name, w) in [
            ("surrogate_weight", self.surrogate_weight),
            ("reward_weight", self.reward_weight),
            ("kl_weight", self.kl_weight),
            ("fidelity_weight", self.fidelity_weight),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("mask lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Where an executed action came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ActionSource {
    Policy,
    Uniform,
    EpsilonRandom,
}

/// Outcome of one gated action selection.
#[derive(Debug, Clone)]
pub struct MaskDecision {
    pub mask_value: f64,
    /// True iff the mask gate randomized, i.e. `m <= tau`.
    pub randomized: bool,
    pub action: usize,
    pub source: ActionSource,
}

/// Uniform draw from a non-empty legal set.
pub fn uniform_action(legal: &[usize], rng: &mut RngStream) -> usize {
    legal[rng.gen_range(0..legal.len())]
}

/// Evaluates the sigmoid-headed mask network on an observation.
pub fn mask_value(mask_net: &MlpNet, obs: &[f64]) -> Result<f64> {
    let out = mask_net.forward(obs)?;
    Ok(out[0])
}

/// The gated action rule: follow the policy when `m > tau`, otherwise take a
/// uniform legal action. The boundary `m == tau` randomizes.
pub fn masked_action(
    policy: &MlpNet,
    mask_net: &MlpNet,
    obs: &[f64],
    legal: &[usize],
    tau: f64,
    rng: &mut RngStream,
) -> Result<MaskDecision> {
    if legal.is_empty() {
        return Err(Error::EmptyInput("legal action set"));
    }
    let m = mask_value(mask_net, obs)?;
    if m > tau {
        let (action, _) = ppo::sample_action(policy, obs, legal, rng)?;
        Ok(MaskDecision {
            mask_value: m,
            randomized: false,
            action,
            source: ActionSource::Policy,
        })
    } else {
        let action = uniform_action(legal, rng);
        Ok(MaskDecision {
            mask_value: m,
            randomized: true,
            action,
            source: ActionSource::Uniform,
        })
    }
}

/// Squared error between the batch-mean mask output and `tau`.
///
/// Deliberately a function of the mean, not elementwise: pinning every
/// output to `tau` would destroy the mask's selectivity.
pub fn surrogate_mask_loss(mask_values: &[f64], tau: f64) -> Result<f64> {
    if mask_values.is_empty() {
        return Err(Error::EmptyInput("mask values"));
    }
    let mean = mask_values.iter().sum::<f64>() / mask_values.len() as f64;
    Ok((mean - tau) * (mean - tau))
}

/// Gate form used by [`mask_kl_penalty`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// `m <= tau` replaces the policy with the uniform distribution.
    Hard,
    /// Mixture `m * policy + (1 - m) * uniform`; differentiable through `m`.
    Soft,
}

/// KL divergence between aligned distributions with an epsilon floor on the
/// second argument.
fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (pi / qi.max(DIST_FLOOR)).ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Mean over states of `KL(policy || gated policy)`.
///
/// `states` pairs each observation with its legal action set; `mask_values`
/// aligns with `states`.
pub fn mask_kl_penalty(
    policy: &MlpNet,
    states: &[(Vec<f64>, Vec<usize>)],
    mask_values: &[f64],
    tau: f64,
    mode: GateMode,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyInput("states"));
    }
    debug_assert_eq!(states.len(), mask_values.len());
    let mut total = 0.0;
    for ((obs, legal), &m) in states.iter().zip(mask_values) {
        let dist = ppo::action_distribution(policy, obs, legal)?;
        let u = 1.0 / legal.len() as f64;
        let gated: Vec<f64> = match mode {
            GateMode::Hard => {
                if m > tau {
                    dist.clone()
                } else {
                    vec![u; legal.len()]
                }
            }
            GateMode::Soft => dist.iter().map(|&p| m * p + (1.0 - m) * u).collect(),
        };
        total += kl_floored(&dist, &gated);
    }
    Ok(total / states.len() as f64)
}

/// One focal-agent step recorded during a masked episode.
#[derive(Debug, Clone)]
pub struct MaskStep {
    pub obs: Vec<f64>,
    pub legal: Vec<usize>,
    pub mask_value: f64,
    pub randomized: bool,
}

/// A matched pair of evaluation episodes: one rolled with the bare policy,
/// one with the mask gate active, sharing the same environment seed.
#[derive(Debug, Clone)]
pub struct PairedEpisode {
    pub unmasked_return: f64,
    pub masked_return: f64,
    pub steps: Vec<MaskStep>,
}

/// Stats from one mask-network update.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MaskUpdateStats {
    pub surrogate_loss: f64,
    pub reward_term: f64,
    pub kl_term: f64,
    pub total_loss: f64,
    pub mean_mask: f64,
    pub n_steps: usize,
    pub n_randomized: usize,
}

/// One gradient step on the mask objective
/// `surrogate_weight * (mean m - tau)^2 + reward_weight * score_term
///  + kl_weight * soft_gate_kl`.
///
/// The score term treats the hard gate decisions as draws from Bernoulli(m)
/// and weights each randomized decision's log-density by its episode's
/// absolute return deviation. Its gradient makes damaging randomizations
/// less likely: states whose randomization moved the return are pushed
/// above the threshold, and the flagged (`m <= tau`) set settles on states
/// whose actions are safe to replace. The term's reported value is the
/// deviation-weighted negative log-density, zero exactly when masked and
/// unmasked returns agree.
pub fn mask_update(
    mask_net: &mut MlpNet,
    policy: &MlpNet,
    pairs: &[PairedEpisode],
    cfg: &MaskConfig,
    tape: &mut GradientTape,
    opt: &mut OptimizerState,
) -> Result<MaskUpdateStats> {
    if pairs.is_empty() || pairs.iter().all(|p| p.steps.is_empty()) {
        return Err(Error::NoPairedRollouts);
    }

    struct Flat<'a> {
        step: &'a MaskStep,
        deviation: f64,
    }
    let flat: Vec<Flat> = pairs
        .iter()
        .flat_map(|p| {
            let dev = (p.unmasked_return - p.masked_return).abs();
            p.steps.iter().map(move |step| Flat { step, deviation: dev })
        })
        .collect();
    let n_steps = flat.len();
    let n_randomized = flat.iter().filter(|f| f.step.randomized).count();

    let masks: Vec<f64> = flat.iter().map(|f| f.step.mask_value).collect();
    let mean_mask = masks.iter().sum::<f64>() / n_steps as f64;
    let surrogate = surrogate_mask_loss(&masks, cfg.tau)?;

    // Per-step dLoss/dm accumulators.
    let mut d_mask = vec![0.0; n_steps];
    let d_surrogate_common = 2.0 * (mean_mask - cfg.tau) / n_steps as f64;
    for d in d_mask.iter_mut() {
        *d += cfg.surrogate_weight * d_surrogate_common;
    }

    let mut reward_term = 0.0;
    if n_randomized > 0 {
        for (i, f) in flat.iter().enumerate() {
            if !f.step.randomized {
                continue;
            }
            let density = (1.0 - f.step.mask_value).max(DIST_FLOOR);
            reward_term += -density.ln() * f.deviation;
            // Score-function step on the deviation objective: raise m where
            // randomization hurt, i.e. descend deviation * ln(1 - m).
            d_mask[i] -= cfg.reward_weight * f.deviation / density / n_randomized as f64;
        }
        reward_term /= n_randomized as f64;
    }

    let mut kl_term = 0.0;
    if cfg.kl_weight > 0.0 {
        for (i, f) in flat.iter().enumerate() {
            let dist = ppo::action_distribution(policy, &f.step.obs, &f.step.legal)?;
            let u = 1.0 / f.step.legal.len() as f64;
            let m = f.step.mask_value;
            let gated: Vec<f64> = dist.iter().map(|&p| m * p + (1.0 - m) * u).collect();
            kl_term += kl_floored(&dist, &gated);
            // d KL / dm = -sum_a p_a (p_a - u) / gated_a
            let dkl: f64 = dist
                .iter()
                .zip(&gated)
                .map(|(&p, &g)| -p * (p - u) / g.max(DIST_FLOOR))
                .sum();
            d_mask[i] += cfg.kl_weight * dkl / n_steps as f64;
        }
        kl_term /= n_steps as f64;
    }

    // Backpropagate each step's dLoss/dm through the mask net.
    tape.zero();
    for (f, &dm) in flat.iter().zip(&d_mask) {
        if dm == 0.0 {
            continue;
        }
        mask_net.forward_cached(&f.step.obs)?;
        mask_net.backward(&[dm], tape)?;
    }
    optimizer_step(mask_net, tape, opt)?;

    let total_loss = cfg.surrogate_weight * surrogate
        + cfg.reward_weight * reward_term
        + cfg.kl_weight * kl_term;
    Ok(MaskUpdateStats {
        surrogate_loss: surrogate,
        reward_term,
        kl_term,
        total_loss,
        mean_mask,
        n_steps,
        n_randomized,
    })
}

/// Collects matched unmasked/masked evaluation episode pairs for one agent.
///
/// Both episodes of a pair share an environment seed; the focal agent runs
/// bare policy sampling in the first and the hard mask gate in the second,
/// while peers sample their policies in both.
pub fn collect_paired_episodes(
    env_proto: &dyn MultiAgentEnv,
    focal_agent: usize,
    policies: &[MlpNet],
    mask_net: &MlpNet,
    tau: f64,
    n_pairs: usize,
    seed: u64,
    rng: &mut RngStream,
) -> Result<Vec<PairedEpisode>> {
    let mut out = Vec::with_capacity(n_pairs);
    for pair in 0..n_pairs {
        let env_seed = derive_seed(seed, &[pair as u64]);
        let unmasked_return =
            sampled_episode_return(env_proto, focal_agent, policies, None, tau, env_seed, rng)?;
        let mut steps = Vec::new();
        let masked_return = sampled_episode_return(
            env_proto,
            focal_agent,
            policies,
            Some((mask_net, &mut steps)),
            tau,
            env_seed,
            rng,
        )?;
        out.push(PairedEpisode {
            unmasked_return,
            masked_return,
            steps,
        });
    }
    Ok(out)
}

/// Rolls one episode with policy sampling for all agents; when `masked` is
/// set, the focal agent uses the hard mask gate and its steps are recorded.
/// Returns the focal agent's undiscounted return.
fn sampled_episode_return(
    env_proto: &dyn MultiAgentEnv,
    focal_agent: usize,
    policies: &[MlpNet],
    mut masked: Option<(&MlpNet, &mut Vec<MaskStep>)>,
    tau: f64,
    env_seed: u64,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut env = env_proto.box_clone();
    let n = env.spec().n_agents;
    let mut obs = env.reset(env_seed);
    let mut alive = vec![true; n];
    let mut total = 0.0;
    loop {
        if alive.iter().all(|a| !a) {
            break;
        }
        let acting = env.acting_agents();
        let mut joint = vec![0usize; n];
        let mut progressed = false;
        for agent in 0..n {
            if !alive[agent] {
                continue;
            }
            let legal = env.legal_actions(agent);
            if legal.is_empty() {
                continue;
            }
            if !acting.contains(&agent) {
                // Validated no-op for non-moving agents.
                joint[agent] = legal[0];
                continue;
            }
            progressed = true;
            let ob = &obs.per_agent[agent];
            if agent == focal_agent {
                if let Some((mask_net, steps)) = masked.as_mut() {
                    let decision =
                        masked_action(&policies[agent], mask_net, ob, &legal, tau, rng)?;
                    steps.push(MaskStep {
                        obs: ob.clone(),
                        legal: legal.clone(),
                        mask_value: decision.mask_value,
                        randomized: decision.randomized,
                    });
                    joint[agent] = decision.action;
                    continue;
                }
            }
            let (action, _) = ppo::sample_action(&policies[agent], ob, &legal, rng)?;
            joint[agent] = action;
        }
        if !progressed {
            break;
        }
        let res = env.step(&joint)?;
        total += res.rewards[focal_agent];
        for agent in 0..n {
            if res.done[agent] {
                alive[agent] = false;
            }
        }
        obs = res.next_obs;
        if obs.tick >= env.spec().max_episode_steps {
            break;
        }
    }
    Ok(total)
}

/// How a greedy evaluation episode perturbs the focal agent's actions.
pub enum Perturbation<'a> {
    /// No perturbation: the clean baseline.
    None,
    /// Replace the action at the first visit of this state.
    FirstVisit(&'a StateKey),
    /// Replace the action at every visit of any state in the set.
    EverySet(&'a BTreeSet<StateKey>),
}

/// Rolls one episode in which every agent acts greedily, except that the
/// focal agent's action is replaced by a uniform legal draw wherever the
/// perturbation matches. Returns the focal agent's undiscounted return.
pub fn greedy_episode_return(
    env_proto: &dyn MultiAgentEnv,
    focal_agent: usize,
    policies: &[MlpNet],
    perturb: Perturbation,
    env_seed: u64,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut env = env_proto.box_clone();
    let n = env.spec().n_agents;
    let mut obs = env.reset(env_seed);
    let mut alive = vec![true; n];
    let mut total = 0.0;
    let mut first_visit_spent = false;
    loop {
        if alive.iter().all(|a| !a) {
            break;
        }
        let acting = env.acting_agents();
        let mut joint = vec![0usize; n];
        let mut progressed = false;
        for agent in 0..n {
            if !alive[agent] {
                continue;
            }
            let legal = env.legal_actions(agent);
            if legal.is_empty() {
                continue;
            }
            if !acting.contains(&agent) {
                joint[agent] = legal[0];
                continue;
            }
            progressed = true;
            let ob = &obs.per_agent[agent];
            let mut action = ppo::greedy_action(&policies[agent], ob, &legal)?;
            if agent == focal_agent {
                let hit = match &perturb {
                    Perturbation::None => false,
                    Perturbation::FirstVisit(key) => {
                        !first_visit_spent && state_key(ob) == **key
                    }
                    Perturbation::EverySet(set) => set.contains(&state_key(ob)),
                };
                if hit {
                    if matches!(perturb, Perturbation::FirstVisit(_)) {
                        first_visit_spent = true;
                    }
                    action = uniform_action(&legal, rng);
                }
            }
            joint[agent] = action;
        }
        if !progressed {
            break;
        }
        let res = env.step(&joint)?;
        total += res.rewards[focal_agent];
        for agent in 0..n {
            if res.done[agent] {
                alive[agent] = false;
            }
        }
        obs = res.next_obs;
        if obs.tick >= env.spec().max_episode_steps {
            break;
        }
    }
    Ok(total)
}

/// A ranked critical-state candidate.
#[derive(Debug, Clone)]
pub struct SaliencyEntry {
    pub state: Vec<f64>,
    /// Mean return drop when this state's action is randomized.
    pub score: f64,
    pub agent_id: usize,
    /// Probe episode index the state was collected from.
    pub episode: usize,
    /// Timestep of the first visit within the probe episode.
    pub timestep: usize,
    pub mask_value: f64,
    /// True iff the mask gate flags this state (`m <= tau`).
    pub mask_selected: bool,
}

impl SaliencyEntry {
    /// Stable 64-bit hash of the rounded state features.
    pub fn state_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in state_key(&self.state) {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

/// Environment seed of the probe episode (and of every paired evaluation
/// episode) for a given saliency seed. Exposed so perturbation evaluations
/// can replay the same context the entries came from.
pub fn probe_env_seed(saliency_seed: u64) -> u64 {
    derive_seed(saliency_seed, &[1])
}

/// Options for [`identify_critical_states`].
#[derive(Debug, Clone)]
pub struct SaliencyOptions {
    /// Paired evaluation episodes per candidate state; at least 2.
    pub n_eval: usize,
    /// Upper bound on the number of candidate states to evaluate.
    pub max_candidates: usize,
    pub tau: f64,
    pub seed: u64,
}

/// Identifies the focal agent's critical states by action perturbation.
///
/// A greedy probe episode collects visited states. Each surviving candidate
/// is scored against the probe context: `n_eval` paired episodes replay the
/// probe's environment seed with only that state's first visit randomized,
/// and the score is the mean return drop against the clean replay. Sharing
/// the seed keeps the candidate on the trajectory even in environments with
/// randomized resets. Entries come back sorted by score, descending.
///
/// `selection_weight` maps a candidate state to a keep-probability in
/// `[0, 1]`; weights of exactly 1 consume no randomness, so runs with no
/// deprioritization are bit-identical to runs without the closure.
pub fn identify_critical_states(
    env_proto: &dyn MultiAgentEnv,
    agent_id: usize,
    policies: &[MlpNet],
    mask_net: &MlpNet,
    opts: &SaliencyOptions,
    selection_weight: &mut dyn FnMut(&[f64]) -> f64,
    rng: &mut RngStream,
) -> Result<Vec<SaliencyEntry>> {
    if opts.n_eval < 2 {
        return Err(Error::TooFew {
            what: "paired evaluation episodes",
            required: 2,
            got: opts.n_eval,
        });
    }

    // Probe episode: record the focal agent's visited states.
    let probe_seed = probe_env_seed(opts.seed);
    let visited = probe_visited_states(env_proto, agent_id, policies, probe_seed)?;

    // Dedup by rounded state key, keeping the first visit.
    let mut seen: BTreeSet<StateKey> = BTreeSet::new();
    let mut candidates: Vec<(usize, Vec<f64>)> = Vec::new();
    for (t, obs) in visited {
        if seen.insert(state_key(&obs)) {
            candidates.push((t, obs));
        }
    }

    // Deprioritization: candidates keep their slot with the given weight.
    // A weight of exactly 1 (or more) skips the draw entirely.
    let mut kept: Vec<(usize, Vec<f64>)> = Vec::new();
    for (t, obs) in candidates {
        let w = selection_weight(&obs);
        if w >= 1.0 || rng.gen::<f64>() < w {
            kept.push((t, obs));
        }
    }

    // Cap the evaluation budget with a seeded subsample, keeping probe order.
    if kept.len() > opts.max_candidates {
        let mut idx: Vec<usize> = (0..kept.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx.truncate(opts.max_candidates);
        idx.sort_unstable();
        kept = idx.into_iter().map(|i| kept[i].clone()).collect();
    }
    if kept.is_empty() {
        return Ok(Vec::new());
    }

    // Clean baseline: the greedy replay of the probe context itself.
    let clean_ret = greedy_episode_return(
        env_proto,
        agent_id,
        policies,
        Perturbation::None,
        probe_seed,
        rng,
    )?;

    let mut entries = Vec::with_capacity(kept.len());
    for (t, obs) in kept {
        let key = state_key(&obs);
        let mut drop_sum = 0.0;
        for _ in 0..opts.n_eval {
            let perturbed = greedy_episode_return(
                env_proto,
                agent_id,
                policies,
                Perturbation::FirstVisit(&key),
                probe_seed,
                rng,
            )?;
            drop_sum += clean_ret - perturbed;
        }
        let score = drop_sum / opts.n_eval as f64;
        let m = mask_value(mask_net, &obs)?;
        entries.push(SaliencyEntry {
            state: obs,
            score,
            agent_id,
            episode: 0,
            timestep: t,
            mask_value: m,
            mask_selected: m <= opts.tau,
        });
    }
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.timestep.cmp(&b.timestep))
    });
    Ok(entries)
}

/// Greedy probe rollout collecting `(timestep, observation)` for the focal
/// agent while it is alive.
fn probe_visited_states(
    env_proto: &dyn MultiAgentEnv,
    focal_agent: usize,
    policies: &[MlpNet],
    env_seed: u64,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut env = env_proto.box_clone();
    let n = env.spec().n_agents;
    let mut obs = env.reset(env_seed);
    let mut alive = vec![true; n];
    let mut visited = Vec::new();
    loop {
        if alive.iter().all(|a| !a) {
            break;
        }
        let acting = env.acting_agents();
        let mut joint = vec![0usize; n];
        let mut progressed = false;
        let mut focal_acted = false;
        for agent in 0..n {
            if !alive[agent] {
                continue;
            }
            let legal = env.legal_actions(agent);
            if legal.is_empty() {
                continue;
            }
            let ob = &obs.per_agent[agent];
            if !acting.contains(&agent) {
                joint[agent] = legal[0];
                continue;
            }
            progressed = true;
            if agent == focal_agent {
                focal_acted = true;
            }
            joint[agent] = ppo::greedy_action(&policies[agent], ob, &legal)?;
        }
        if !progressed {
            break;
        }
        if focal_acted {
            visited.push((obs.tick, obs.per_agent[focal_agent].clone()));
        }
        let res = env.step(&joint)?;
        for agent in 0..n {
            if res.done[agent] {
                alive[agent] = false;
            }
        }
        obs = res.next_obs;
        if obs.tick >= env.spec().max_episode_steps {
            break;
        }
    }
    Ok(visited)
}

/// Writes a critical-state report:
/// `agent_id,episode,t,state_hash,mask_value,saliency_score`.
pub fn write_critical_states_csv(
    path: &std::path::Path,
    entries: &[SaliencyEntry],
) -> Result<()> {
    let mut out = String::from("agent_id,episode,t,state_hash,mask_value,saliency_score\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{:016x},{},{}\n",
            e.agent_id,
            e.episode,
            e.timestep,
            e.state_hash(),
            e.mask_value,
            e.score
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// States the gate flagged (`m <= tau`) in a batch of steps, deduped by
/// rounded key in visitation order.
pub fn comm_set_from_steps(steps: &[MaskStep]) -> Vec<Vec<f64>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in steps {
        if s.randomized && seen.insert(state_key(&s.obs)) {
            out.push(s.obs.clone());
        }
    }
    out
}
