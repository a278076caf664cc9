//! The training loop: rollout, policy optimization, mask optimization, and
//! collaboration phases per iteration, with periodic held-out evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::collab::{
    apply_exploration, comm_union, epsilon_at, exploration_weight, CriticalStateEntry,
    SharedBuffer,
};
use crate::env::{state_key, MultiAgentEnv};
use crate::error::Result;
use crate::masking::{
    collect_paired_episodes, mask_kl_penalty, mask_update, masked_action, write_critical_states_csv,
    GateMode, MaskStep, SaliencyEntry, SaliencyOptions,
};
use crate::metrics::{
    fidelity_between_agents, fidelity_rank_correlation, final_average_reward,
    policy_shift_kl, reward_drop_after_perturbation, MetricsRecord,
};
use crate::nn::{GradientTape, MlpNet, OptimizerState, OutputActivation};
use crate::ppo::{ppo_update, sample_action, MaskedRolloutBatch, Transition};
use crate::rng::{derive_seed, labelled_stream, labels};

use super::ExperimentConfig;

const HIDDEN: usize = 64;
/// Early stop: reward spread below 1% of scale over this many evaluations.
const CONVERGENCE_WINDOW: usize = 10;
const CONVERGENCE_REL: f64 = 0.01;
/// Caps on pooled validation states used for the KL and fidelity metrics.
const MAX_KL_STATES: usize = 128;
const MAX_FIDELITY_STATES: usize = 64;

/// Everything a finished run leaves on disk, plus the in-memory metrics.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub config_path: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_jsonl: PathBuf,
    pub events_jsonl: PathBuf,
    pub critical_states_csv: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub completed_iterations: usize,
    pub converged_early: bool,
}

/// One agent's nets and optimizer states.
struct Agent {
    policy: MlpNet,
    value: MlpNet,
    mask: MlpNet,
    policy_opt: OptimizerState,
    value_opt: OptimizerState,
    mask_opt: OptimizerState,
    mask_tape: GradientTape,
    /// Cumulative acting steps; drives the epsilon schedule.
    steps: u64,
    /// Latest saliency entries, newest identification pass.
    saliency: Vec<SaliencyEntry>,
    /// Environment seed of the probe episode the entries came from.
    saliency_probe_seed: u64,
}

/// Per-agent rollout worker: an environment copy whose episodes persist
/// across iterations.
struct Worker {
    env: Box<dyn MultiAgentEnv>,
    obs: Vec<Vec<f64>>,
    episode: u64,
    active: bool,
}

struct EventLog {
    file: fs::File,
}

impl EventLog {
    fn new(path: &Path) -> Result<Self> {
        Ok(EventLog { file: fs::File::create(path)? })
    }

    fn write<T: Serialize>(&mut self, iteration: usize, phase: &str, agent: Option<usize>, payload: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Event<'a, T> {
            iteration: usize,
            phase: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            agent: Option<usize>,
            #[serde(flatten)]
            payload: T,
        }
        let line = serde_json::to_string(&Event { iteration, phase, agent, payload })?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RolloutEvent {
    steps: usize,
    episodes: u64,
    mean_reward: f64,
    masked_fraction: f64,
    epsilon: f64,
}

#[derive(Serialize)]
struct CollabEvent {
    comm_union_size: usize,
    buffer_size: usize,
    identified: usize,
}

#[derive(Serialize)]
struct BroadcastEvent {
    tick: u64,
    entry_count: usize,
    score_min: f64,
    score_max: f64,
}

#[derive(Serialize)]
struct Empty {}

/// Runs one experiment end to end. The config snapshot is written before
/// training starts; a numeric failure checkpoints, records the error, and
/// propagates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let run_dir = cfg.output_root().join(&run_id);
    fs::create_dir_all(&run_dir)?;
    let checkpoint_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir)?;

    // Config snapshot precedes every other artifact.
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml_string()?)?;

    let metrics_csv = run_dir.join("metrics.csv");
    let metrics_jsonl = run_dir.join("metrics.jsonl");
    let events_jsonl = run_dir.join("events.jsonl");
    let critical_states_csv = run_dir.join("critical_states.csv");
    fs::write(&metrics_csv, format!("{}\n", MetricsRecord::csv_header()))?;
    fs::write(&metrics_jsonl, "")?;
    let mut events = EventLog::new(&events_jsonl)?;

    let mut state = TrainState::new(cfg)?;
    let mut artifacts = RunArtifacts {
        run_id: run_id.clone(),
        run_dir: run_dir.clone(),
        config_path,
        metrics_csv,
        metrics_jsonl,
        events_jsonl,
        critical_states_csv,
        checkpoint_dir,
        metrics: Vec::new(),
        completed_iterations: 0,
        converged_early: false,
    };

    let outcome = train_loop(cfg, &mut state, &mut artifacts, &mut events);
    // Always leave final checkpoints and the critical-state report behind,
    // including after a mid-run numeric failure.
    state.save_checkpoints(&artifacts.checkpoint_dir)?;
    let all_entries: Vec<SaliencyEntry> = state
        .agents
        .iter()
        .flat_map(|a| a.saliency.iter().cloned())
        .collect();
    write_critical_states_csv(&artifacts.critical_states_csv, &all_entries)?;
    if !cfg.disable_comm {
        fs::write(artifacts.run_dir.join("buffer.json"), state.buffer.snapshot_json()?)?;
    }
    if let Err(e) = outcome {
        let diag = serde_json::json!({
            "error": e.to_string(),
            "numeric": e.is_numeric(),
            "completed_iterations": artifacts.completed_iterations,
        });
        fs::write(artifacts.run_dir.join("error.json"), serde_json::to_string_pretty(&diag)?)?;
        return Err(e);
    }
    Ok(artifacts)
}

struct TrainState {
    env_proto: Box<dyn MultiAgentEnv>,
    agents: Vec<Agent>,
    workers: Vec<Worker>,
    buffer: SharedBuffer,
    /// Entries most recently broadcast; guides exploration weights.
    current_broadcast: Vec<CriticalStateEntry>,
    last_broadcast_tick: Option<u64>,
    eval_history: Vec<f64>,
    similarity_delta: f64,
}

impl TrainState {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let env_proto = crate::env::make_env(&cfg.env, cfg.n_agents, cfg.max_episode_steps)?;
        let spec = env_proto.spec().clone();
        let mut agents = Vec::with_capacity(spec.n_agents);
        for i in 0..spec.n_agents {
            let mut init = labelled_stream(cfg.seed, &[labels::NET_INIT, i as u64]);
            let policy = MlpNet::new(
                &[spec.obs_dim, HIDDEN, HIDDEN, spec.action_count],
                OutputActivation::Softmax,
                0.01,
                &mut init,
            )?;
            let value = MlpNet::new(
                &[spec.obs_dim, HIDDEN, HIDDEN, 1],
                OutputActivation::Identity,
                1.0,
                &mut init,
            )?;
            let mask = MlpNet::new(
                &[spec.obs_dim, HIDDEN, HIDDEN, 1],
                OutputActivation::Sigmoid,
                1.0,
                &mut init,
            )?;
            let policy_opt = OptimizerState::adam(&policy, cfg.ppo.policy_lr);
            let value_opt = OptimizerState::adam(&value, cfg.ppo.value_lr);
            let mask_opt = OptimizerState::adam(&mask, cfg.mask.lr);
            let mask_tape = GradientTape::for_net(&mask);
            agents.push(Agent {
                policy,
                value,
                mask,
                policy_opt,
                value_opt,
                mask_opt,
                mask_tape,
                steps: 0,
                saliency: Vec::new(),
                saliency_probe_seed: 0,
            });
        }
        let workers = (0..spec.n_agents)
            .map(|i| {
                let mut env = env_proto.box_clone();
                let obs = env.reset(derive_seed(cfg.seed, &[labels::ENV, i as u64, 0]));
                Worker { env, obs: obs.per_agent, episode: 0, active: true }
            })
            .collect();
        let buffer = SharedBuffer::new(
            cfg.buffer.capacity,
            cfg.buffer.broadcast_interval,
            cfg.buffer.broadcast_size,
        );
        let similarity_delta = cfg.similarity_delta(spec.obs_dim);
        Ok(TrainState {
            env_proto,
            agents,
            workers,
            buffer,
            current_broadcast: Vec::new(),
            last_broadcast_tick: None,
            eval_history: Vec::new(),
            similarity_delta,
        })
    }

    fn policies(&self) -> Vec<MlpNet> {
        self.agents.iter().map(|a| a.policy.clone()).collect()
    }

    fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        for (i, agent) in self.agents.iter().enumerate() {
            let agent_dir = dir.join(format!("agent_{i}"));
            fs::create_dir_all(&agent_dir)?;
            agent.policy.save(&agent_dir.join("policy.json"))?;
            agent.value.save(&agent_dir.join("value.json"))?;
            agent.mask.save(&agent_dir.join("mask.json"))?;
        }
        Ok(())
    }
}

fn train_loop(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    artifacts: &mut RunArtifacts,
    events: &mut EventLog,
) -> Result<()> {
    let n_agents = state.agents.len();
    for t in 1..=cfg.t_max {
        // Parallel rollout phase (serial execution, per-agent env copies).
        let mut comm_sets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_agents);
        let mut batches: Vec<MaskedRolloutBatch> = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let (batch, comm_set, ev) = collect_rollout(cfg, state, i, t)?;
            events.write(t, "rollout", Some(i), &ev)?;
            batches.push(batch);
            comm_sets.push(comm_set);
        }

        // Policy optimization phase (PPO).
        for (i, batch) in batches.iter_mut().enumerate() {
            let bootstrap = bootstrap_value(&state.agents[i].value, batch)?;
            batch.compute_advantages(bootstrap, cfg.ppo.gamma, cfg.ppo.gae_lambda);
            batch.normalize_advantages();
            let mut shuffle = labelled_stream(cfg.seed, &[labels::PPO_SHUFFLE, i as u64, t as u64]);
            let agent = &mut state.agents[i];
            let stats = ppo_update(
                &mut agent.policy,
                &mut agent.value,
                batch,
                &cfg.ppo,
                &mut agent.policy_opt,
                &mut agent.value_opt,
                &mut shuffle,
            )?;
            events.write(t, "ppo_update", Some(i), &stats)?;
        }

        // Mask optimization phase.
        let policies = state.policies();
        for i in 0..n_agents {
            let mut rng = labelled_stream(cfg.seed, &[labels::MASK_PAIRS, i as u64, t as u64]);
            let pairs = collect_paired_episodes(
                state.env_proto.as_ref(),
                i,
                &policies,
                &state.agents[i].mask,
                cfg.mask.tau,
                cfg.mask_pairs,
                derive_seed(cfg.seed, &[labels::MASK_PAIRS, i as u64, t as u64]),
                &mut rng,
            )?;
            // Diagnostic KL is always logged, whatever the training weight.
            let kl_states: Vec<(Vec<f64>, Vec<usize>)> = pairs
                .iter()
                .flat_map(|p| p.steps.iter().map(|s| (s.obs.clone(), s.legal.clone())))
                .collect();
            let kl_masks: Vec<f64> = pairs
                .iter()
                .flat_map(|p| p.steps.iter().map(|s| s.mask_value))
                .collect();
            let diagnostic_kl = if kl_states.is_empty() {
                0.0
            } else {
                mask_kl_penalty(
                    &state.agents[i].policy,
                    &kl_states,
                    &kl_masks,
                    cfg.mask.tau,
                    GateMode::Hard,
                )?
            };
            let agent = &mut state.agents[i];
            let stats = mask_update(
                &mut agent.mask,
                &agent.policy,
                &pairs,
                &cfg.mask,
                &mut agent.mask_tape,
                &mut agent.mask_opt,
            )?;
            #[derive(Serialize)]
            struct MaskEvent {
                #[serde(flatten)]
                stats: crate::masking::MaskUpdateStats,
                diagnostic_kl: f64,
            }
            events.write(t, "mask_update", Some(i), &MaskEvent { stats, diagnostic_kl })?;
        }

        // Inter-agent collaboration phase.
        run_collaboration_phase(cfg, state, t, &comm_sets, events)?;

        artifacts.completed_iterations = t;

        // Periodic held-out evaluation.
        if t % cfg.eval_interval == 0 || t == cfg.t_max {
            let record = evaluate(cfg, state, t, &artifacts.run_id)?;
            events.write(t, "evaluation", None, &record)?;
            append_metrics(artifacts, &record)?;
            state.save_checkpoints(&artifacts.checkpoint_dir)?;
            state.eval_history.push(record.final_avg_reward);
            if converged(&state.eval_history) {
                artifacts.converged_early = true;
                events.write(t, "converged", None, &Empty {})?;
                return Ok(());
            }
        }
    }
    Ok(())
}

/// Saliency identification runs every iteration regardless of the comm
/// ablation (the critical set feeds evaluation); buffer inserts, the comm
/// union, broadcasts, and exploration reweighting are collaboration proper
/// and are skipped entirely when `disable_comm` is set.
fn run_collaboration_phase(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    t: usize,
    comm_sets: &[Vec<Vec<f64>>],
    events: &mut EventLog,
) -> Result<()> {
    let n_agents = state.agents.len();
    let policies = state.policies();

    let mut identified_total = 0usize;
    if t % cfg.saliency.interval == 0 {
        for i in 0..n_agents {
            let opts = SaliencyOptions {
                n_eval: cfg.saliency.n_eval,
                max_candidates: cfg.saliency.max_candidates,
                tau: cfg.mask.tau,
                seed: derive_seed(cfg.seed, &[labels::SALIENCY, i as u64, t as u64]),
            };
            let mut rng = labelled_stream(cfg.seed, &[labels::SALIENCY, 100 + i as u64, t as u64]);
            // Peer-reported broadcast entries deprioritize re-evaluation.
            let peer_entries: Vec<CriticalStateEntry> = if cfg.disable_comm {
                Vec::new()
            } else {
                state
                    .current_broadcast
                    .iter()
                    .filter(|e| e.agent_id != i)
                    .cloned()
                    .collect()
            };
            let delta = state.similarity_delta;
            let w_min = cfg.buffer.w_min;
            let mut weight = |s: &[f64]| -> f64 {
                if peer_entries.is_empty() {
                    1.0
                } else {
                    exploration_weight(s, &peer_entries, delta, w_min)
                }
            };
            let entries = crate::masking::identify_critical_states(
                state.env_proto.as_ref(),
                i,
                &policies,
                &state.agents[i].mask,
                &opts,
                &mut weight,
                &mut rng,
            )?;
            identified_total += entries.len();
            state.agents[i].saliency = entries;
            state.agents[i].saliency_probe_seed = crate::masking::probe_env_seed(opts.seed);
        }
    }

    if cfg.disable_comm {
        return Ok(());
    }

    let union = comm_union(comm_sets);
    for i in 0..n_agents {
        let tick = state.agents[i].steps;
        for e in &state.agents[i].saliency {
            state.buffer.insert(CriticalStateEntry {
                state: e.state.clone(),
                score: e.score,
                agent_id: e.agent_id,
                timestep: e.timestep,
                insertion_tick: tick,
                seq: 0,
            });
        }
    }
    events.write(
        t,
        "collaboration",
        None,
        &CollabEvent {
            comm_union_size: union.len(),
            buffer_size: state.buffer.len(),
            identified: identified_total,
        },
    )?;

    // Broadcast at the most recent crossed multiple of the interval.
    let max_steps = state.agents.iter().map(|a| a.steps).max().unwrap_or(0);
    let interval = cfg.buffer.broadcast_interval;
    let tick = (max_steps / interval) * interval;
    if tick > 0 && state.last_broadcast_tick != Some(tick) {
        let entries = state.buffer.broadcast_topk(tick);
        if !entries.is_empty() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for e in &entries {
                lo = lo.min(e.score);
                hi = hi.max(e.score);
            }
            events.write(
                t,
                "broadcast",
                None,
                &BroadcastEvent { tick, entry_count: entries.len(), score_min: lo, score_max: hi },
            )?;
            state.current_broadcast = entries;
            state.last_broadcast_tick = Some(tick);
        }
    }
    Ok(())
}

fn bootstrap_value(value: &MlpNet, batch: &MaskedRolloutBatch) -> Result<f64> {
    match batch.transitions.last() {
        Some(last) if !last.done => Ok(value.forward(&last.next_state)?[0]),
        _ => Ok(0.0),
    }
}

/// Collects `rollout_len` focal decision steps in the agent's own env copy.
/// Peers act by bare policy sampling; the focal agent runs the mask gate
/// plus epsilon exploration. Rewards earned between focal decisions (e.g.
/// the opponent's winning move) fold into the previous transition.
fn collect_rollout(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    focal: usize,
    t: usize,
) -> Result<(MaskedRolloutBatch, Vec<Vec<f64>>, RolloutEvent)> {
    let policies = state.policies();
    let mask = state.agents[focal].mask.clone();
    let mut rng = labelled_stream(cfg.seed, &[labels::ROLLOUT, focal as u64, t as u64]);
    let mut batch = MaskedRolloutBatch::default();
    let mut masked_steps: Vec<MaskStep> = Vec::new();
    let mut reward_sum = 0.0;
    let mut masked_count = 0usize;
    let mut episodes_started = 0u64;
    let mut last_epsilon = 0.0;

    let worker = &mut state.workers[focal];
    let n = worker.env.spec().n_agents;

    while batch.len() < cfg.rollout_len {
        // Reset when the focal agent can no longer act in this episode.
        if !worker.active || worker.env.legal_actions(focal).is_empty() {
            worker.episode += 1;
            episodes_started += 1;
            let seed = derive_seed(cfg.seed, &[labels::ENV, focal as u64, worker.episode]);
            worker.obs = worker.env.reset(seed).per_agent;
            worker.active = true;
        }

        let acting = worker.env.acting_agents();
        let mut joint = vec![0usize; n];
        let mut focal_record: Option<(Vec<f64>, usize, f64, f64, Vec<usize>, f64)> = None;
        for agent in 0..n {
            let legal = worker.env.legal_actions(agent);
            if legal.is_empty() {
                continue;
            }
            if !acting.contains(&agent) {
                joint[agent] = legal[0];
                continue;
            }
            let ob = &worker.obs[agent];
            if agent == focal {
                let fa = &state.agents[focal];
                let mut decision =
                    masked_action(&fa.policy, &mask, ob, &legal, cfg.mask.tau, &mut rng)?;
                let epsilon = if cfg.disable_adaptive_epsilon {
                    0.0
                } else {
                    epsilon_at(&cfg.exploration, fa.steps)
                };
                last_epsilon = epsilon;
                decision = apply_exploration(decision, epsilon, &legal, &mut rng);
                if decision.randomized {
                    masked_count += 1;
                    masked_steps.push(MaskStep {
                        obs: ob.clone(),
                        legal: legal.clone(),
                        mask_value: decision.mask_value,
                        randomized: true,
                    });
                }
                let log_prob =
                    crate::ppo::log_prob_of(&fa.policy, ob, &legal, decision.action)?;
                let value_pred = fa.value.forward(ob)?[0];
                focal_record = Some((
                    ob.clone(),
                    decision.action,
                    decision.mask_value,
                    log_prob,
                    legal.clone(),
                    value_pred,
                ));
                joint[agent] = decision.action;
            } else {
                let (action, _) = sample_action(&policies[agent], ob, &legal, &mut rng)?;
                joint[agent] = action;
            }
        }
        if acting.is_empty() {
            worker.active = false;
            continue;
        }

        let res = worker.env.step(&joint)?;
        let focal_reward = res.rewards[focal];
        reward_sum += focal_reward;
        let focal_done = res.done[focal];
        let episode_over = res.done.iter().all(|&d| d);

        if let Some((obs_v, action, m, log_prob, legal, value_pred)) = focal_record {
            state.agents[focal].steps += 1;
            batch.push(
                Transition {
                    state: obs_v,
                    action,
                    reward: focal_reward,
                    next_state: res.next_obs.per_agent[focal].clone(),
                    mask_value: m,
                    done: focal_done,
                    legal_actions: legal,
                },
                log_prob,
                value_pred,
            );
        } else if let Some(last) = batch.transitions.last_mut() {
            // Reward earned while the focal agent was not acting.
            last.reward += focal_reward;
            if focal_done {
                last.done = true;
            }
        }

        worker.obs = res.next_obs.per_agent;
        if focal_done || episode_over || worker.env.legal_actions(focal).is_empty() {
            worker.active = false;
        }
    }

    let comm_set = crate::masking::comm_set_from_steps(&masked_steps);
    let ev = RolloutEvent {
        steps: batch.len(),
        episodes: episodes_started,
        mean_reward: reward_sum / batch.len() as f64,
        masked_fraction: masked_count as f64 / batch.len() as f64,
        epsilon: last_epsilon,
    };
    Ok((batch, comm_set, ev))
}

/// Pools validation states (observation + legal set) and per-agent episode
/// returns from sampled policy-only episodes in a fresh env copy.
fn validation_episodes(
    cfg: &ExperimentConfig,
    env_proto: &dyn MultiAgentEnv,
    policies: &[MlpNet],
    t: usize,
) -> Result<(Vec<f64>, Vec<(Vec<f64>, Vec<usize>)>)> {
    let n = env_proto.spec().n_agents;
    let mut returns = Vec::new();
    let mut pool: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    let mut seen: BTreeSet<Vec<i64>> = BTreeSet::new();
    let mut rng = labelled_stream(cfg.seed, &[labels::VALIDATION, t as u64]);
    for ep in 0..cfg.n_eval_episodes {
        let mut env = env_proto.box_clone();
        let seed = derive_seed(cfg.seed, &[labels::VALIDATION, t as u64, ep as u64]);
        let mut obs = env.reset(seed).per_agent;
        let mut totals = vec![0.0; n];
        let mut alive = vec![true; n];
        loop {
            if alive.iter().all(|a| !a) {
                break;
            }
            let acting = env.acting_agents();
            if acting.is_empty() {
                break;
            }
            let mut joint = vec![0usize; n];
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
                let ob = &obs[agent];
                if seen.insert(state_key(ob)) {
                    pool.push((ob.clone(), legal.clone()));
                }
                let (action, _) = sample_action(&policies[agent], ob, &legal, &mut rng)?;
                joint[agent] = action;
            }
            let res = env.step(&joint)?;
            for agent in 0..n {
                totals[agent] += res.rewards[agent];
                if res.done[agent] {
                    alive[agent] = false;
                }
            }
            obs = res.next_obs.per_agent;
            if res.next_obs.tick >= env.spec().max_episode_steps {
                break;
            }
        }
        returns.extend(totals);
    }
    Ok((returns, pool))
}

/// One held-out evaluation pass. Never mutates network parameters; the
/// fingerprint check enforces that.
fn evaluate(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    t: usize,
    run_id: &str,
) -> Result<MetricsRecord> {
    let fingerprints: Vec<u64> = state
        .agents
        .iter()
        .flat_map(|a| {
            [
                a.policy.param_fingerprint(),
                a.value.param_fingerprint(),
                a.mask.param_fingerprint(),
            ]
        })
        .collect();

    let policies = state.policies();
    let (returns, pool) = validation_episodes(cfg, state.env_proto.as_ref(), &policies, t)?;
    let (avg_reward, reward_std) = final_average_reward(&returns)?;

    // Policy-shift KL, averaged over agents, on the pooled states.
    let kl_states: Vec<(Vec<f64>, Vec<usize>)> =
        pool.iter().take(MAX_KL_STATES).cloned().collect();
    let mut kl_sum = 0.0;
    for agent in &state.agents {
        kl_sum += policy_shift_kl(&agent.policy, &agent.mask, &kl_states, cfg.mask.tau)?;
    }
    let kl = kl_sum / state.agents.len() as f64;

    // Fidelity on shared states: broadcast states when available, else the
    // pooled validation sample (kept comparable across ablations).
    let fidelity_states: Vec<Vec<f64>> = if !state.current_broadcast.is_empty() {
        state.current_broadcast.iter().map(|e| e.state.clone()).collect()
    } else {
        pool.iter().take(MAX_FIDELITY_STATES).map(|(s, _)| s.clone()).collect()
    };
    let (fidelity, fidelity_rank) = if state.agents.len() >= 2 && !fidelity_states.is_empty() {
        let mut matrix = Vec::with_capacity(state.agents.len());
        for agent in &state.agents {
            let row: Vec<f64> = fidelity_states
                .iter()
                .map(|s| crate::masking::mask_value(&agent.mask, s))
                .collect::<Result<_>>()?;
            matrix.push(row);
        }
        (
            fidelity_between_agents(&matrix, cfg.mask.tau)?,
            fidelity_rank_correlation(&matrix)?,
        )
    } else {
        // Single-agent runs: vacuous perfect agreement.
        (1.0, 1.0)
    };

    // Reward drop on each agent's current mask-selected top-K set.
    let mut drop_sum = 0.0;
    let mut drop_absolute = false;
    for (i, agent) in state.agents.iter().enumerate() {
        let critical = critical_set(&agent.saliency, cfg.saliency.top_k);
        if critical.is_empty() {
            continue;
        }
        let report = reward_drop_after_perturbation(
            state.env_proto.as_ref(),
            i,
            &policies,
            &critical,
            cfg.n_eval_episodes.max(2),
            agent.saliency_probe_seed,
            derive_seed(cfg.seed, &[labels::PERTURBATION, i as u64, t as u64]),
        )?;
        drop_sum += report.fraction;
        drop_absolute |= report.absolute_mode;
    }
    let reward_drop = drop_sum / state.agents.len() as f64;

    let record = MetricsRecord {
        run_id: run_id.to_string(),
        iteration: t,
        final_avg_reward: avg_reward,
        reward_std,
        kl_divergence: kl,
        fidelity,
        fidelity_rank_corr: fidelity_rank,
        reward_drop_fraction: reward_drop,
        reward_drop_absolute_mode: drop_absolute,
        n_eval_episodes: cfg.n_eval_episodes,
        seed: cfg.seed,
    };
    record.validate()?;

    let after: Vec<u64> = state
        .agents
        .iter()
        .flat_map(|a| {
            [
                a.policy.param_fingerprint(),
                a.value.param_fingerprint(),
                a.mask.param_fingerprint(),
            ]
        })
        .collect();
    assert_eq!(fingerprints, after, "evaluation must not mutate parameters");
    Ok(record)
}

/// The method's critical set: the top-K states of the saliency ranking with
/// strictly positive measured drops. The mask-selected flag is reported in
/// the critical-state CSV but does not gate this set; ranking is the
/// behavioral measurement.
pub(crate) fn critical_set(entries: &[SaliencyEntry], top_k: usize) -> Vec<Vec<f64>> {
    entries
        .iter()
        .filter(|e| e.score > 0.0)
        .take(top_k)
        .map(|e| e.state.clone())
        .collect()
}

fn append_metrics(artifacts: &mut RunArtifacts, record: &MetricsRecord) -> Result<()> {
    let mut csv = fs::OpenOptions::new().append(true).open(&artifacts.metrics_csv)?;
    writeln!(csv, "{}", record.to_csv_row())?;
    let mut jsonl = fs::OpenOptions::new().append(true).open(&artifacts.metrics_jsonl)?;
    writeln!(jsonl, "{}", serde_json::to_string(record)?)?;
    artifacts.metrics.push(record.clone());
    Ok(())
}

fn converged(history: &[f64]) -> bool {
    if history.len() < CONVERGENCE_WINDOW {
        return false;
    }
    let window = &history[history.len() - CONVERGENCE_WINDOW..];
    let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = window.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    (max - min) <= CONVERGENCE_REL * mean.abs().max(1e-9)
}

/// Loads a run directory's config and checkpoints and reruns the evaluation
/// phase standalone, returning the resulting record (not persisted).
pub fn evaluate_checkpoint(run_dir: &Path) -> Result<MetricsRecord> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let mut state = TrainState::new(&cfg)?;
    let ckpt = run_dir.join("checkpoints");
    for (i, agent) in state.agents.iter_mut().enumerate() {
        let dir = ckpt.join(format!("agent_{i}"));
        agent.policy = MlpNet::load(&dir.join("policy.json"))?;
        agent.value = MlpNet::load(&dir.join("value.json"))?;
        agent.mask = MlpNet::load(&dir.join("mask.json"))?;
    }
    // Rebuild each agent's saliency entries so the reward-drop metric works.
    let policies = state.policies();
    for i in 0..state.agents.len() {
        let opts = SaliencyOptions {
            n_eval: cfg.saliency.n_eval,
            max_candidates: cfg.saliency.max_candidates,
            tau: cfg.mask.tau,
            seed: derive_seed(cfg.seed, &[labels::SALIENCY, i as u64, 0]),
        };
        let mut rng = labelled_stream(cfg.seed, &[labels::SALIENCY, 100 + i as u64, 0]);
        state.agents[i].saliency = crate::masking::identify_critical_states(
            state.env_proto.as_ref(),
            i,
            &policies,
            &state.agents[i].mask,
            &opts,
            &mut |_: &[f64]| 1.0,
            &mut rng,
        )?;
        state.agents[i].saliency_probe_seed = crate::masking::probe_env_seed(opts.seed);
    }
    let run_id = cfg.run_id();
    evaluate(&cfg, &mut state, 0, &run_id)
}
