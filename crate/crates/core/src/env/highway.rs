//! Toy multi-agent highway gridworld.
//!
//! A grid of 3 lanes x 20 cells. Each agent has a lane, a cell position, and
//! a speed in {1, 2, 3}. Actions: 0 keep, 1 lane-left, 2 lane-right,
//! 3 accelerate, 4 decelerate.
//!
//! Dynamics per step:
//! 1. Lane and speed changes apply.
//! 2. Two alive agents on the same cell after lane changes have merged into
//!    each other: both collide (-1, done).
//! 3. Agents advance by their speed with car-following: a car never passes
//!    the car ahead in its lane and stops on the cell behind it instead.
//! 4. Rewards: collision -1; otherwise 0.1 per cell actually advanced, plus
//!    +1 on reaching the final cell (which finishes the agent). Per-step
//!    reward is therefore bounded to [-1, 1.3].
//!
//! Legality is structural only (lane bounds, speed bounds); merging into an
//! occupied cell is a legal but penalized maneuver, which is what makes
//! lane choice near traffic critical.
//!
//! Observation layout (per agent, length 20): a 3x5 occupancy window of the
//! other agents over columns `x-1..=x+3` (lane-major), own lane one-hot (3),
//! own speed / 3, own position / (cells - 1). Done agents observe zeros.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

use super::{EnvSpec, JointObservation, JointStepResult, MultiAgentEnv};

pub const LANES: usize = 3;
pub const CELLS: usize = 20;
pub const MIN_SPEED: usize = 1;
pub const MAX_SPEED: usize = 3;

pub const ACT_KEEP: usize = 0;
pub const ACT_LEFT: usize = 1;
pub const ACT_RIGHT: usize = 2;
pub const ACT_FASTER: usize = 3;
pub const ACT_SLOWER: usize = 4;

const WINDOW_BACK: isize = 1;
const WINDOW_AHEAD: isize = 3;
const WINDOW_COLS: usize = (WINDOW_BACK + WINDOW_AHEAD + 1) as usize;

#[derive(Debug, Clone)]
pub struct HighwayParams {
    pub n_agents: usize,
    pub max_episode_steps: usize,
}

impl Default for HighwayParams {
    fn default() -> Self {
        HighwayParams {
            n_agents: 2,
            max_episode_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Car {
    lane: usize,
    x: usize,
    speed: usize,
    done: bool,
}

#[derive(Debug, Clone)]
pub struct Highway {
    env_spec: EnvSpec,
    cars: Vec<Car>,
    episode_over: bool,
    tick: usize,
}

impl Highway {
    pub fn new(params: HighwayParams) -> Result<Self> {
        if !(2..=4).contains(&params.n_agents) {
            return Err(Error::Config("highway supports 2..=4 agents".into()));
        }
        if params.max_episode_steps == 0 {
            return Err(Error::Config("max_episode_steps must be positive".into()));
        }
        let env_spec = EnvSpec {
            n_agents: params.n_agents,
            obs_dim: LANES * WINDOW_COLS + LANES + 2,
            action_count: 5,
            max_episode_steps: params.max_episode_steps,
        };
        env_spec.validate()?;
        Ok(Highway {
            env_spec,
            cars: Vec::new(),
            episode_over: true,
            tick: 0,
        })
    }

    fn observation_for(&self, agent: usize) -> Vec<f64> {
        let dim = self.env_spec.obs_dim;
        let car = &self.cars[agent];
        if car.done {
            return vec![0.0; dim];
        }
        let mut obs = vec![0.0; dim];
        for (other_id, other) in self.cars.iter().enumerate() {
            if other_id == agent || other.done {
                continue;
            }
            let dx = other.x as isize - car.x as isize;
            if (-WINDOW_BACK..=WINDOW_AHEAD).contains(&dx) {
                let col = (dx + WINDOW_BACK) as usize;
                obs[other.lane * WINDOW_COLS + col] = 1.0;
            }
        }
        let base = LANES * WINDOW_COLS;
        obs[base + car.lane] = 1.0;
        obs[base + LANES] = car.speed as f64 / MAX_SPEED as f64;
        obs[base + LANES + 1] = car.x as f64 / (CELLS - 1) as f64;
        obs
    }

    fn observation(&self) -> JointObservation {
        JointObservation {
            per_agent: (0..self.cars.len())
                .map(|a| self.observation_for(a))
                .collect(),
            tick: self.tick,
        }
    }

    fn legal_for(&self, car: &Car) -> Vec<usize> {
        let mut legal = vec![ACT_KEEP];
        if car.lane > 0 {
            legal.push(ACT_LEFT);
        }
        if car.lane < LANES - 1 {
            legal.push(ACT_RIGHT);
        }
        if car.speed < MAX_SPEED {
            legal.push(ACT_FASTER);
        }
        if car.speed > MIN_SPEED {
            legal.push(ACT_SLOWER);
        }
        legal
    }
}

impl MultiAgentEnv for Highway {
    fn spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    fn name(&self) -> &'static str {
        "highway"
    }

    fn reset(&mut self, seed: u64) -> JointObservation {
        let n = self.env_spec.n_agents;
        let mut r = rng::stream(seed);
        // Spawn into distinct cells among lanes 0..3 and columns 0..2.
        let mut slots: Vec<(usize, usize)> = (0..LANES)
            .flat_map(|lane| (0..2).map(move |x| (lane, x)))
            .collect();
        self.cars = (0..n)
            .map(|_| {
                let i = r.gen_range(0..slots.len());
                let (lane, x) = slots.swap_remove(i);
                Car {
                    lane,
                    x,
                    speed: MIN_SPEED,
                    done: false,
                }
            })
            .collect();
        self.episode_over = false;
        self.tick = 0;
        self.observation()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<JointStepResult> {
        if self.episode_over {
            return Err(Error::EpisodeFinished);
        }
        let n = self.cars.len();
        if joint_action.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: joint_action.len(),
            });
        }
        for (agent, (&action, car)) in joint_action.iter().zip(&self.cars).enumerate() {
            if car.done {
                continue;
            }
            if !self.legal_for(car).contains(&action) {
                return Err(Error::IllegalAction { agent, action });
            }
        }

        // Phase 1: lane and speed changes.
        for (&action, car) in joint_action.iter().zip(self.cars.iter_mut()) {
            if car.done {
                continue;
            }
            match action {
                ACT_LEFT => car.lane -= 1,
                ACT_RIGHT => car.lane += 1,
                ACT_FASTER => car.speed += 1,
                ACT_SLOWER => car.speed -= 1,
                _ => {}
            }
        }

        // Phase 2: merge collisions (same cell after lane changes).
        let mut collided = vec![false; n];
        for i in 0..n {
            if self.cars[i].done {
                continue;
            }
            for j in (i + 1)..n {
                if self.cars[j].done {
                    continue;
                }
                if self.cars[i].lane == self.cars[j].lane && self.cars[i].x == self.cars[j].x {
                    collided[i] = true;
                    collided[j] = true;
                }
            }
        }

        // Phase 3: car-following advance, front to back per lane. Collided
        // cars stay where they are and do not block (they are wreckage the
        // others steer past).
        let mut moved = vec![0usize; n];
        let mut reached_end = vec![false; n];
        for lane in 0..LANES {
            let mut ids: Vec<usize> = (0..n)
                .filter(|&i| {
                    !self.cars[i].done && !collided[i] && self.cars[i].lane == lane
                })
                .collect();
            ids.sort_by(|&a, &b| self.cars[b].x.cmp(&self.cars[a].x));
            let mut ahead: Option<usize> = None;
            for &i in &ids {
                let car = &self.cars[i];
                let mut target = car.x + car.speed;
                if let Some(limit) = ahead {
                    target = target.min(limit.saturating_sub(1));
                }
                if target >= CELLS - 1 {
                    target = CELLS - 1;
                    reached_end[i] = true;
                }
                moved[i] = target - car.x;
                self.cars[i].x = target;
                ahead = Some(target);
            }
        }

        self.tick += 1;
        let truncated = self.tick >= self.env_spec.max_episode_steps;
        let mut rewards = vec![0.0; n];
        for i in 0..n {
            let car = &mut self.cars[i];
            if car.done {
                continue;
            }
            if collided[i] {
                rewards[i] = -1.0;
                car.done = true;
            } else {
                rewards[i] = 0.1 * moved[i] as f64;
                if reached_end[i] {
                    rewards[i] += 1.0;
                    car.done = true;
                } else if truncated {
                    car.done = true;
                }
            }
        }
        if self.cars.iter().all(|c| c.done) {
            self.episode_over = true;
        }

        let done: Vec<bool> = self.cars.iter().map(|c| c.done).collect();
        let legal: Vec<Vec<usize>> = self
            .cars
            .iter()
            .map(|c| if c.done { vec![] } else { self.legal_for(c) })
            .collect();
        Ok(JointStepResult {
            next_obs: self.observation(),
            rewards,
            done,
            legal_actions: legal,
        })
    }

    fn legal_actions(&self, agent: usize) -> Vec<usize> {
        if agent >= self.cars.len() || self.cars[agent].done || self.episode_over {
            return vec![];
        }
        self.legal_for(&self.cars[agent])
    }

    fn box_clone(&self) -> Box<dyn MultiAgentEnv> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(n: usize) -> Highway {
        Highway::new(HighwayParams {
            n_agents: n,
            max_episode_steps: 50,
        })
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic_under_seed() {
        let mut a = fresh(3);
        let mut b = fresh(3);
        assert_eq!(a.reset(7), b.reset(7));
        assert_ne!(a.reset(7), a.reset(8));
    }

    #[test]
    fn leftmost_lane_excludes_lane_left() {
        let mut env = fresh(2);
        env.reset(0);
        env.cars[0].lane = 0;
        let legal = env.legal_actions(0);
        assert!(!legal.contains(&ACT_LEFT));
        assert!(legal.contains(&ACT_RIGHT));
        env.cars[0].lane = LANES - 1;
        let legal = env.legal_actions(0);
        assert!(legal.contains(&ACT_LEFT));
        assert!(!legal.contains(&ACT_RIGHT));
    }

    #[test]
    fn merging_into_the_same_cell_penalizes_both() {
        let mut env = fresh(2);
        env.reset(0);
        // Lane changes converge on lane 1 at the same column.
        env.cars[0] = Car { lane: 0, x: 4, speed: 1, done: false };
        env.cars[1] = Car { lane: 2, x: 4, speed: 1, done: false };
        let r = env.step(&[ACT_RIGHT, ACT_LEFT]).unwrap();
        assert_eq!(r.rewards, vec![-1.0, -1.0]);
        assert_eq!(r.done, vec![true, true]);
        assert!(matches!(env.step(&[0, 0]), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn cars_cannot_pass_through_each_other() {
        let mut env = fresh(2);
        env.reset(0);
        // Fast car behind a slow car in the same lane.
        env.cars[0] = Car { lane: 1, x: 4, speed: 3, done: false };
        env.cars[1] = Car { lane: 1, x: 6, speed: 1, done: false };
        let r = env.step(&[ACT_KEEP, ACT_KEEP]).unwrap();
        // Leader advances to 7; follower clamps to 6 (moved 2, not 3).
        assert_eq!(env.cars[1].x, 7);
        assert_eq!(env.cars[0].x, 6);
        assert!((r.rewards[0] - 0.2).abs() < 1e-12);
        assert!((r.rewards[1] - 0.1).abs() < 1e-12);
        assert!(!r.done[0] && !r.done[1]);
    }

    #[test]
    fn reaching_the_end_pays_bonus_and_finishes() {
        let mut env = fresh(2);
        env.reset(0);
        env.cars[0] = Car { lane: 0, x: 18, speed: 1, done: false };
        env.cars[1] = Car { lane: 2, x: 0, speed: 1, done: false };
        let r = env.step(&[ACT_KEEP, ACT_KEEP]).unwrap();
        assert!((r.rewards[0] - 1.1).abs() < 1e-12);
        assert!(r.done[0]);
        assert!(!r.done[1]);
        // The finished agent keeps its done flag and earns nothing more.
        let r2 = env.step(&[ACT_KEEP, ACT_KEEP]).unwrap();
        assert!(r2.done[0]);
        assert_eq!(r2.rewards[0], 0.0);
    }

    #[test]
    fn positions_stay_on_grid_and_rewards_bounded() {
        let mut env = fresh(4);
        let mut r = crate::rng::stream(5);
        use rand::Rng;
        for seed in 0..30u64 {
            env.reset(seed);
            loop {
                let joint: Vec<usize> = (0..4)
                    .map(|a| {
                        let legal = env.legal_actions(a);
                        if legal.is_empty() {
                            0
                        } else {
                            legal[r.gen_range(0..legal.len())]
                        }
                    })
                    .collect();
                match env.step(&joint) {
                    Ok(res) => {
                        for car in &env.cars {
                            assert!(car.x < CELLS);
                            assert!(car.lane < LANES);
                            assert!((MIN_SPEED..=MAX_SPEED).contains(&car.speed));
                        }
                        for &rw in &res.rewards {
                            assert!((-1.0..=1.3).contains(&rw));
                        }
                        // No two alive cars ever share a cell after a step.
                        for i in 0..4 {
                            for j in (i + 1)..4 {
                                if !env.cars[i].done && !env.cars[j].done {
                                    assert!(
                                        (env.cars[i].lane, env.cars[i].x)
                                            != (env.cars[j].lane, env.cars[j].x)
                                    );
                                }
                            }
                        }
                        if res.done.iter().all(|&d| d) {
                            break;
                        }
                    }
                    Err(Error::EpisodeFinished) => break,
                    Err(e) => panic!("unexpected error {e:?}"),
                }
            }
            assert!(env.tick <= env.spec().max_episode_steps);
        }
    }

    #[test]
    fn seeded_trajectories_are_bit_exact() {
        let run = |seed: u64| {
            let mut env = fresh(2);
            let mut obs_log = vec![env.reset(seed)];
            let actions = [ACT_FASTER, ACT_KEEP, ACT_RIGHT, ACT_FASTER, ACT_KEEP];
            for &a in &actions {
                let legal0 = env.legal_actions(0);
                let legal1 = env.legal_actions(1);
                if legal0.is_empty() || legal1.is_empty() {
                    break;
                }
                let a0 = if legal0.contains(&a) { a } else { ACT_KEEP };
                let a1 = if legal1.contains(&a) { a } else { ACT_KEEP };
                match env.step(&[a0, a1]) {
                    Ok(r) => obs_log.push(r.next_obs),
                    Err(_) => break,
                }
            }
            obs_log
        };
        assert_eq!(run(3), run(3));
    }
}
