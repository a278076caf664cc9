//! Exactly solvable chain MDP, used as a verification oracle.
//!
//! A single agent walks positions `0..L-1`; both actions advance the walk, so
//! only the action taken at the decision index matters. That choice fixes a
//! bonus (`r_good` for action 1, `r_bad` for action 0) paid on the terminal
//! transition. Every quantity of interest has a closed dynamic-programming
//! solution, which [`chain_oracle_critical_state`] computes by backward
//! induction.
//!
//! Observation layout: one-hot of the current position, length `L`.

use crate::error::{Error, Result};

use super::{EnvSpec, JointObservation, JointStepResult, MultiAgentEnv};

#[derive(Debug, Clone, PartialEq)]
pub struct ChainMdpSpec {
    /// Number of positions, at least 3.
    pub length: usize,
    /// Index where the action choice matters, in `[1, length - 2]`.
    pub decision_index: usize,
    /// Bonus for taking action 1 at the decision index.
    pub r_good: f64,
    /// Bonus for taking action 0 at the decision index.
    pub r_bad: f64,
    /// Reward paid on every transition.
    pub step_reward: f64,
    /// Discount used by the dynamic-programming oracle, in `(0, 1]`.
    pub discount: f64,
}

impl Default for ChainMdpSpec {
    fn default() -> Self {
        ChainMdpSpec {
            length: 5,
            decision_index: 2,
            r_good: 1.0,
            r_bad: -1.0,
            step_reward: 0.0,
            discount: 1.0,
        }
    }
}

impl ChainMdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 3 {
            return Err(Error::Config("chain length must be at least 3".into()));
        }
        if self.decision_index < 1 || self.decision_index > self.length - 2 {
            return Err(Error::Config(format!(
                "decision_index must be in [1, {}]",
                self.length - 2
            )));
        }
        if self.r_good <= self.r_bad {
            return Err(Error::Config("r_good must exceed r_bad".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config("discount must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// How the evaluated policy picks an action at one position.
#[derive(Clone, Copy)]
enum ActionRule {
    Optimal,
    Uniform,
}

/// Expected discounted return from the start under a policy that is optimal
/// everywhere except possibly one position. Backward induction over the state
/// `(position, bonus slot)` where the slot records the action taken at the
/// decision index.
fn dp_return(spec: &ChainMdpSpec, rule_at: impl Fn(usize) -> ActionRule) -> f64 {
    let l = spec.length;
    // slot: 0 = not yet decided, 1 = good, 2 = bad
    let bonus = |slot: usize| match slot {
        1 => spec.r_good,
        2 => spec.r_bad,
        _ => 0.0,
    };
    // v[p][slot], terminal row p = l-1 is zero.
    let mut v = vec![[0.0f64; 3]; l];
    for p in (0..l - 1).rev() {
        for slot in 0..3 {
            let value_of = |action: usize| {
                let next_slot = if p == spec.decision_index {
                    if action == 1 {
                        1
                    } else {
                        2
                    }
                } else {
                    slot
                };
                let arriving_terminal = p + 1 == l - 1;
                let r = spec.step_reward + if arriving_terminal { bonus(next_slot) } else { 0.0 };
                r + spec.discount * v[p + 1][next_slot]
            };
            v[p][slot] = match rule_at(p) {
                ActionRule::Optimal => value_of(0).max(value_of(1)),
                ActionRule::Uniform => 0.5 * (value_of(0) + value_of(1)),
            };
        }
    }
    v[0][0]
}

/// Exact expected return of the optimal policy.
pub fn optimal_return(spec: &ChainMdpSpec) -> f64 {
    dp_return(spec, |_| ActionRule::Optimal)
}

/// Exact expected return when the action at `perturb_index` is uniform and
/// all other actions are optimal.
pub fn perturbed_return(spec: &ChainMdpSpec, perturb_index: usize) -> f64 {
    dp_return(spec, |p| {
        if p == perturb_index {
            ActionRule::Uniform
        } else {
            ActionRule::Optimal
        }
    })
}

/// Returns the position whose uniform-action perturbation maximizes the
/// expected return drop under the optimal policy, plus that exact drop.
/// Ties resolve to the lowest index.
pub fn chain_oracle_critical_state(spec: &ChainMdpSpec) -> (usize, f64) {
    let base = optimal_return(spec);
    let mut best = (0usize, f64::NEG_INFINITY);
    for p in 0..spec.length - 1 {
        let drop = base - perturbed_return(spec, p);
        if drop > best.1 {
            best = (p, drop);
        }
    }
    best
}

/// The chain environment itself (single agent, 2 actions).
#[derive(Debug, Clone)]
pub struct ChainMdp {
    spec: ChainMdpSpec,
    env_spec: EnvSpec,
    position: usize,
    decision_action: Option<usize>,
    done: bool,
    tick: usize,
}

impl ChainMdp {
    pub fn new(spec: ChainMdpSpec) -> Result<Self> {
        spec.validate()?;
        let env_spec = EnvSpec {
            n_agents: 1,
            obs_dim: spec.length,
            action_count: 2,
            max_episode_steps: spec.length,
        };
        env_spec.validate()?;
        Ok(ChainMdp {
            spec,
            env_spec,
            position: 0,
            decision_action: None,
            done: false,
            tick: 0,
        })
    }

    pub fn chain_spec(&self) -> &ChainMdpSpec {
        &self.spec
    }

    fn observation(&self) -> JointObservation {
        let mut one_hot = vec![0.0; self.spec.length];
        one_hot[self.position] = 1.0;
        JointObservation {
            per_agent: vec![one_hot],
            tick: self.tick,
        }
    }
}

impl MultiAgentEnv for ChainMdp {
    fn spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    fn name(&self) -> &'static str {
        "chain"
    }

    fn reset(&mut self, _seed: u64) -> JointObservation {
        self.position = 0;
        self.decision_action = None;
        self.done = false;
        self.tick = 0;
        self.observation()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<JointStepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if joint_action.len() != 1 {
            return Err(Error::ShapeMismatch {
                expected: 1,
                got: joint_action.len(),
            });
        }
        let action = joint_action[0];
        if action > 1 {
            return Err(Error::IllegalAction { agent: 0, action });
        }
        if self.position == self.spec.decision_index {
            self.decision_action = Some(action);
        }
        self.position += 1;
        self.tick += 1;
        let mut reward = self.spec.step_reward;
        if self.position == self.spec.length - 1 {
            reward += match self.decision_action {
                Some(1) => self.spec.r_good,
                Some(_) => self.spec.r_bad,
                // decision index is always visited before the terminal
                None => 0.0,
            };
            self.done = true;
        }
        let legal = if self.done { vec![] } else { vec![0, 1] };
        Ok(JointStepResult {
            next_obs: self.observation(),
            rewards: vec![reward],
            done: vec![self.done],
            legal_actions: vec![legal],
        })
    }

    fn legal_actions(&self, agent: usize) -> Vec<usize> {
        if agent != 0 || self.done {
            return vec![];
        }
        vec![0, 1]
    }

    fn box_clone(&self) -> Box<dyn MultiAgentEnv> {
        Box::new(self.clone())
    }
}
