// Scratch driver for calibrating the trained-run acceptance protocols.
// Not part of the deliverable surface; run with --release.

use std::time::Instant;

use xmarl_core::env::{chain_oracle_critical_state, make_env, ChainMdpSpec, MultiAgentEnv};
use xmarl_core::harness::{run_ablations, run_experiment, run_tau_sweep, ExperimentConfig};
use xmarl_core::masking::{identify_critical_states, Perturbation, SaliencyOptions};
use xmarl_core::metrics::reward_drop_after_perturbation;
use xmarl_core::nn::MlpNet;
use xmarl_core::rng::{derive_seed, labelled_stream};

fn chain_cfg(out: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = "chain".into();
    cfg.n_agents = 1;
    cfg.t_max = 30;
    cfg.rollout_len = 128;
    cfg.eval_interval = 10;
    cfg.n_eval_episodes = 10;
    cfg.max_episode_steps = 5;
    cfg.reward_target = 0.9;
    cfg.output_dir = out.into();
    cfg.seed = seed;
    cfg
}

fn highway_cfg(out: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = out.into();
    cfg.seed = seed;
    cfg
}

fn connect4_cfg(out: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = "connect4".into();
    cfg.n_agents = 2;
    cfg.t_max = 40;
    cfg.rollout_len = 256;
    cfg.eval_interval = 10;
    cfg.n_eval_episodes = 10;
    cfg.max_episode_steps = 42;
    cfg.reward_target = 0.5;
    cfg.output_dir = out.into();
    cfg.seed = seed;
    cfg
}

fn load_policies(artifacts: &xmarl_core::harness::RunArtifacts, n: usize) -> Vec<MlpNet> {
    (0..n)
        .map(|i| {
            MlpNet::load(&artifacts.checkpoint_dir.join(format!("agent_{i}/policy.json"))).unwrap()
        })
        .collect()
}

fn load_mask(artifacts: &xmarl_core::harness::RunArtifacts, i: usize) -> MlpNet {
    MlpNet::load(&artifacts.checkpoint_dir.join(format!("agent_{i}/mask.json"))).unwrap()
}

fn criterion6() {
    let t0 = Instant::now();
    let spec = ChainMdpSpec::default();
    let (oracle_idx, oracle_drop) = chain_oracle_critical_state(&spec);
    let mut top1_hits = 0;
    let mut drops = Vec::new();
    for seed in 0..20u64 {
        let dir = format!("/tmp/tune6/{seed}");
        let cfg = chain_cfg(&dir, 100 + seed);
        let artifacts = run_experiment(&cfg).unwrap();
        let policies = load_policies(&artifacts, 1);
        let mask = load_mask(&artifacts, 0);
        let env = make_env("chain", 1, 5).unwrap();
        let opts = SaliencyOptions {
            n_eval: 300,
            max_candidates: 8,
            tau: 0.5,
            seed: derive_seed(cfg.seed, &[777]),
        };
        let mut rng = labelled_stream(cfg.seed, &[778]);
        let entries = identify_critical_states(
            env.as_ref(), 0, &policies, &mask, &opts, &mut |_: &[f64]| 1.0, &mut rng,
        )
        .unwrap();
        let top = &entries[0];
        let hit = top.state[oracle_idx] == 1.0;
        if hit {
            top1_hits += 1;
        }
        drops.push(top.score);
        println!(
            "  seed {seed}: top1 t={} score={:.3} hit={hit} final_reward={:.3}",
            top.timestep,
            top.score,
            artifacts.metrics.last().unwrap().final_avg_reward
        );
    }
    let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    println!(
        "criterion6: top1 {top1_hits}/20, mean drop {mean_drop:.4} (oracle {oracle_drop}), elapsed {:?}",
        t0.elapsed()
    );
}

/// Winner of the greedy self-play game (the focal agent for criterion 7).
fn greedy_winner(env: &dyn MultiAgentEnv, policies: &[MlpNet], seed: u64) -> usize {
    let mut rng = labelled_stream(seed, &[42]);
    let returns: Vec<f64> = (0..policies.len())
        .map(|i| {
            xmarl_core::masking::greedy_episode_return(
                env, i, policies, Perturbation::None, seed, &mut rng,
            )
            .unwrap()
        })
        .collect();
    returns
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

fn criterion7(env_name: &str) {
    let t0 = Instant::now();
    let mut wins = 0;
    let n_seeds = 20;
    let k = 5;
    for seed in 0..n_seeds {
        let dir = format!("/tmp/tune7-{env_name}/{seed}");
        let cfg = match env_name {
            "connect4" => connect4_cfg(&dir, 200 + seed),
            _ => highway_cfg(&dir, 200 + seed),
        };
        let artifacts = run_experiment(&cfg).unwrap();
        let policies = load_policies(&artifacts, cfg.n_agents);
        let env = make_env(&cfg.env, cfg.n_agents, cfg.max_episode_steps).unwrap();
        let focal = if env_name == "connect4" {
            greedy_winner(env.as_ref(), &policies, derive_seed(cfg.seed, &[1]))
        } else {
            0
        };
        let mask = load_mask(&artifacts, focal);
        let opts = SaliencyOptions {
            n_eval: 8,
            max_candidates: 64,
            tau: cfg.mask.tau,
            seed: derive_seed(cfg.seed, &[900]),
        };
        let mut rng = labelled_stream(cfg.seed, &[901]);
        let entries = identify_critical_states(
            env.as_ref(), focal, &policies, &mask, &opts, &mut |_: &[f64]| 1.0, &mut rng,
        )
        .unwrap();
        if entries.is_empty() {
            println!("  seed {seed}: no entries!");
            continue;
        }
        let top: Vec<Vec<f64>> = entries.iter().take(k).map(|e| e.state.clone()).collect();
        // Random K drawn from the policy's sampled-episode state visits.
        use rand::seq::SliceRandom;
        let mut pool: Vec<Vec<f64>> = sampled_visit_pool(
            env.as_ref(), focal, &policies, 4, derive_seed(cfg.seed, &[905]),
        );
        let mut rand_rng = labelled_stream(cfg.seed, &[902]);
        pool.shuffle(&mut rand_rng);
        let rand_set: Vec<Vec<f64>> = pool.into_iter().take(k).collect();

        let probe_seed = xmarl_core::masking::probe_env_seed(opts.seed);
        let drop_top = reward_drop_after_perturbation(
            env.as_ref(), focal, &policies, &top, 40, probe_seed, derive_seed(cfg.seed, &[903]),
        )
        .unwrap();
        let drop_rand = reward_drop_after_perturbation(
            env.as_ref(), focal, &policies, &rand_set, 40, probe_seed, derive_seed(cfg.seed, &[904]),
        )
        .unwrap();
        let win = drop_top.fraction.abs() > drop_rand.fraction.abs();
        if win {
            wins += 1;
        }
        println!(
            "  seed {seed}: top |{:.4}| vs rand |{:.4}| win={win} clean={:.3} (focal {focal}, {} entries)",
            drop_top.fraction, drop_rand.fraction, drop_top.mean_clean, entries.len()
        );
    }
    println!("criterion7 {env_name}: wins {wins}/{n_seeds}, elapsed {:?}", t0.elapsed());
}


/// States the focal agent visits across sampled (stochastic) policy
/// episodes, deduped by rounded key.
fn sampled_visit_pool(
    env_proto: &dyn MultiAgentEnv,
    focal: usize,
    policies: &[MlpNet],
    n_episodes: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    use std::collections::BTreeSet;
    use xmarl_core::env::state_key;
    use xmarl_core::ppo::sample_action;
    let mut rng = labelled_stream(seed, &[1]);
    let mut seen = BTreeSet::new();
    let mut pool = Vec::new();
    for ep in 0..n_episodes {
        let mut env = env_proto.box_clone();
        let mut obs = env.reset(derive_seed(seed, &[2, ep as u64])).per_agent;
        let n = env.spec().n_agents;
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
                if agent == focal && seen.insert(state_key(ob)) {
                    pool.push(ob.clone());
                }
                let (a, _) = sample_action(&policies[agent], ob, &legal, &mut rng).unwrap();
                joint[agent] = a;
            }
            let res = env.step(&joint).unwrap();
            for agent in 0..n {
                if res.done[agent] {
                    alive[agent] = false;
                }
            }
            obs = res.next_obs.per_agent;
            if res.next_obs.tick >= env.spec().max_episode_steps {
                break;
            }
        }
    }
    pool
}

fn criterion8() {
    let t0 = Instant::now();
    let base = highway_cfg("/tmp/tune8", 300);
    let summary = run_tau_sweep(&base, &[0.3, 0.5, 0.7], 3).unwrap();
    println!("{}", summary.render_table());
    println!("criterion8 elapsed {:?}", t0.elapsed());
}

fn criterion9() {
    let t0 = Instant::now();
    let base = highway_cfg("/tmp/tune9", 400);
    let summary = run_ablations(&base, 3).unwrap();
    println!("{}", summary.render_table());
    println!("criterion9 elapsed {:?}", t0.elapsed());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("all");
    match which {
        "6" => criterion6(),
        "7c" => criterion7("connect4"),
        "7h" => criterion7("highway"),
        "8" => criterion8(),
        "9" => criterion9(),
        _ => {
            criterion6();
            criterion7("connect4");
            criterion7("highway");
            criterion8();
            criterion9();
        }
    }
}
