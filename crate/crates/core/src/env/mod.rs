//! Multi-agent environment abstraction and the three concrete environments.
//!
//! All environments expose flat `f64` observation vectors, discrete action
//! sets, and deterministic dynamics under a fixed reset seed. Observation
//! layouts are documented on each environment type.

mod chain;
mod connect4;
mod highway;

pub use chain::{chain_oracle_critical_state, ChainMdp, ChainMdpSpec};
pub use connect4::Connect4;
pub use highway::{Highway, HighwayParams};

use crate::error::{Error, Result};

/// Observation identity key: features rounded to the 1e-9 grid.
///
/// Two observations compare equal iff every coordinate matches after
/// rounding; this is the dedup rule used for comm sets, the shared buffer,
/// and perturbation targeting.
pub type StateKey = Vec<i64>;

const KEY_QUANTUM: f64 = 1e-9;

pub fn state_key(obs: &[f64]) -> StateKey {
    obs.iter().map(|&x| (x / KEY_QUANTUM).round() as i64).collect()
}

/// Static description of an environment instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    /// Per-agent observation length.
    pub obs_dim: usize,
    /// Size of the discrete action set, shared by all agents.
    pub action_count: usize,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.action_count < 2 {
            return Err(Error::Config("action_count must be at least 2".into()));
        }
        if self.obs_dim == 0 {
            return Err(Error::Config("obs_dim must be at least 1".into()));
        }
        if self.n_agents == 0 || self.max_episode_steps == 0 {
            return Err(Error::Config(
                "n_agents and max_episode_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One observation per agent plus the global tick.
#[derive(Debug, Clone, PartialEq)]
pub struct JointObservation {
    pub per_agent: Vec<Vec<f64>>,
    pub tick: usize,
}

/// Result of one joint environment step.
#[derive(Debug, Clone)]
pub struct JointStepResult {
    pub next_obs: JointObservation,
    pub rewards: Vec<f64>,
    pub done: Vec<bool>,
    /// Legal actions in the next state, per agent. Empty for done agents.
    pub legal_actions: Vec<Vec<usize>>,
}

/// A multi-agent environment with discrete actions.
///
/// Instances are single-threaded; training code creates independent clones
/// per agent/worker. `reset` must be deterministic under a fixed seed, and
/// `step` must reject actions not present in `legal_actions`.
pub trait MultiAgentEnv: Send {
    fn spec(&self) -> &EnvSpec;
    fn name(&self) -> &'static str;
    fn reset(&mut self, seed: u64) -> JointObservation;
    fn step(&mut self, joint_action: &[usize]) -> Result<JointStepResult>;
    /// Exactly the actions `step` would accept for this agent; empty once the
    /// agent is done.
    fn legal_actions(&self, agent: usize) -> Vec<usize>;
    /// Agents whose submitted action affects the next transition. Defaults
    /// to every agent with a non-empty legal set; alternating-move games
    /// narrow this to the mover so training data skips no-op turns.
    fn acting_agents(&self) -> Vec<usize> {
        (0..self.spec().n_agents)
            .filter(|&a| !self.legal_actions(a).is_empty())
            .collect()
    }
    fn box_clone(&self) -> Box<dyn MultiAgentEnv>;
}

impl Clone for Box<dyn MultiAgentEnv> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Builds an environment from its config string.
///
/// `n_agents` is validated against each environment's supported range.
pub fn make_env(name: &str, n_agents: usize, max_episode_steps: usize) -> Result<Box<dyn MultiAgentEnv>> {
    match name {
        "chain" => {
            if n_agents != 1 {
                return Err(Error::Config(format!(
                    "chain is single-agent, got n_agents = {n_agents}"
                )));
            }
            Ok(Box::new(ChainMdp::new(ChainMdpSpec::default())?))
        }
        "connect4" => {
            if n_agents != 2 {
                return Err(Error::Config(format!(
                    "connect4 needs exactly 2 agents, got {n_agents}"
                )));
            }
            Ok(Box::new(Connect4::new()))
        }
        "highway" => {
            if !(2..=4).contains(&n_agents) {
                return Err(Error::Config(format!(
                    "highway supports 2..=4 agents, got {n_agents}"
                )));
            }
            Ok(Box::new(Highway::new(HighwayParams {
                n_agents,
                max_episode_steps,
                ..HighwayParams::default()
            })?))
        }
        other => Err(Error::Config(format!("unknown environment '{other}'"))),
    }
}
