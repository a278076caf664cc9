//! Connect-four as a two-agent alternating-move environment.
//!
//! Players drop tokens into a 7x6 grid; four in a row horizontally,
//! vertically, or diagonally wins. The non-moving agent receives a no-op
//! step with reward 0, which keeps the joint-step interface uniform.
//!
//! Observation layout (per agent, length 85): 42 cells with own tokens,
//! 42 cells with opponent tokens (column-major, row 0 at the bottom), then
//! one "my turn" flag.

use crate::error::{Error, Result};

use super::{EnvSpec, JointObservation, JointStepResult, MultiAgentEnv};

pub const COLS: usize = 7;
pub const ROWS: usize = 6;

#[derive(Debug, Clone)]
pub struct Connect4 {
    env_spec: EnvSpec,
    /// cells[col][row]; row 0 is the bottom. None = empty.
    cells: [[Option<u8>; ROWS]; COLS],
    heights: [usize; COLS],
    to_move: usize,
    winner: Option<usize>,
    done: bool,
    tick: usize,
}

impl Default for Connect4 {
    fn default() -> Self {
        Self::new()
    }
}

impl Connect4 {
    pub fn new() -> Self {
        Connect4 {
            env_spec: EnvSpec {
                n_agents: 2,
                obs_dim: COLS * ROWS * 2 + 1,
                action_count: COLS,
                max_episode_steps: COLS * ROWS,
            },
            cells: [[None; ROWS]; COLS],
            heights: [0; COLS],
            to_move: 0,
            winner: None,
            done: false,
            tick: 0,
        }
    }

    pub fn to_move(&self) -> usize {
        self.to_move
    }

    pub fn cell(&self, col: usize, row: usize) -> Option<u8> {
        self.cells[col][row]
    }

    pub fn token_count(&self, player: u8) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| **c == Some(player))
            .count()
    }

    fn observation_for(&self, agent: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.env_spec.obs_dim];
        for col in 0..COLS {
            for row in 0..ROWS {
                if let Some(p) = self.cells[col][row] {
                    let idx = col * ROWS + row;
                    if p as usize == agent {
                        obs[idx] = 1.0;
                    } else {
                        obs[COLS * ROWS + idx] = 1.0;
                    }
                }
            }
        }
        if !self.done && self.to_move == agent {
            obs[COLS * ROWS * 2] = 1.0;
        }
        obs
    }

    fn observation(&self) -> JointObservation {
        JointObservation {
            per_agent: (0..2).map(|a| self.observation_for(a)).collect(),
            tick: self.tick,
        }
    }

    /// Checks whether the token just placed at (col, row) completes a line.
    fn wins_at(&self, col: usize, row: usize, player: u8) -> bool {
        let dirs: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
        for (dc, dr) in dirs {
            let mut count = 1;
            for sign in [-1isize, 1] {
                let (mut c, mut r) = (col as isize, row as isize);
                loop {
                    c += dc * sign;
                    r += dr * sign;
                    if c < 0 || c >= COLS as isize || r < 0 || r >= ROWS as isize {
                        break;
                    }
                    if self.cells[c as usize][r as usize] == Some(player) {
                        count += 1;
                    } else {
                        break;
                    }
                }
            }
            if count >= 4 {
                return true;
            }
        }
        false
    }

    fn board_full(&self) -> bool {
        self.heights.iter().all(|&h| h == ROWS)
    }

    fn open_columns(&self) -> Vec<usize> {
        (0..COLS).filter(|&c| self.heights[c] < ROWS).collect()
    }
}

impl MultiAgentEnv for Connect4 {
    fn spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    fn name(&self) -> &'static str {
        "connect4"
    }

    fn reset(&mut self, _seed: u64) -> JointObservation {
        self.cells = [[None; ROWS]; COLS];
        self.heights = [0; COLS];
        self.to_move = 0;
        self.winner = None;
        self.done = false;
        self.tick = 0;
        self.observation()
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<JointStepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if joint_action.len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: 2,
                got: joint_action.len(),
            });
        }
        let mover = self.to_move;
        // Both agents submit actions; the non-mover's is a validated no-op.
        for (agent, &col) in joint_action.iter().enumerate() {
            if col >= COLS || self.heights[col] >= ROWS {
                return Err(Error::IllegalAction { agent, action: col });
            }
        }
        let col = joint_action[mover];
        let row = self.heights[col];
        self.cells[col][row] = Some(mover as u8);
        self.heights[col] += 1;
        self.tick += 1;

        let mut rewards = vec![0.0; 2];
        if self.wins_at(col, row, mover as u8) {
            self.winner = Some(mover);
            self.done = true;
            rewards[mover] = 1.0;
            rewards[1 - mover] = -1.0;
        } else if self.board_full() {
            self.done = true;
        } else {
            self.to_move = 1 - mover;
        }

        let done = vec![self.done; 2];
        let legal = if self.done {
            vec![vec![], vec![]]
        } else {
            let open = self.open_columns();
            vec![open.clone(), open]
        };
        Ok(JointStepResult {
            next_obs: self.observation(),
            rewards,
            done,
            legal_actions: legal,
        })
    }

    fn legal_actions(&self, agent: usize) -> Vec<usize> {
        if agent >= 2 || self.done {
            return vec![];
        }
        self.open_columns()
    }

    fn acting_agents(&self) -> Vec<usize> {
        if self.done {
            vec![]
        } else {
            vec![self.to_move]
        }
    }

    fn box_clone(&self) -> Box<dyn MultiAgentEnv> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn reset_is_empty_board_player_zero_to_move() {
        let mut env = Connect4::new();
        let obs = env.reset(0);
        assert_eq!(env.to_move(), 0);
        assert_eq!(env.token_count(0) + env.token_count(1), 0);
        // Player 0 sees the turn flag set, player 1 does not.
        assert_eq!(obs.per_agent[0][COLS * ROWS * 2], 1.0);
        assert_eq!(obs.per_agent[1][COLS * ROWS * 2], 0.0);
    }

    #[test]
    fn vertical_four_ends_the_game() {
        let mut env = Connect4::new();
        env.reset(0);
        // Player 0 stacks column 2; player 1 spreads over 0 and 1.
        let p1_cols = [0, 1, 0];
        for i in 0..3 {
            let res = env.step(&[2, 0]).unwrap();
            assert!(!res.done[0]);
            let res = env.step(&[2, p1_cols[i]]).unwrap();
            assert!(!res.done[0]);
        }
        let r = env.step(&[2, 0]).unwrap();
        assert_eq!(r.rewards, vec![1.0, -1.0]);
        assert_eq!(r.done, vec![true, true]);
        assert!(matches!(env.step(&[0, 0]), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn illegal_action_names_agent_and_action() {
        let mut env = Connect4::new();
        env.reset(0);
        match env.step(&[7, 0]) {
            Err(Error::IllegalAction { agent: 0, action: 7 }) => {}
            other => panic!("expected IllegalAction, got {other:?}"),
        }
    }

    #[test]
    fn full_column_is_excluded_from_legal_actions() {
        let mut env = Connect4::new();
        env.reset(0);
        // Fill column 3 (6 tokens, alternating players).
        for _ in 0..3 {
            env.step(&[3, 0]).unwrap();
            env.step(&[0, 3]).unwrap();
        }
        let legal = env.legal_actions(env.to_move());
        assert!(!legal.contains(&3));
        assert_eq!(legal.len(), COLS - 1);
    }

    #[test]
    fn empty_board_has_all_seven_columns() {
        let mut env = Connect4::new();
        env.reset(0);
        assert_eq!(env.legal_actions(0), vec![0, 1, 2, 3, 4, 5, 6]);
    }

    /// All 69 four-in-a-row lines on a 7x6 board.
    fn all_lines() -> Vec<[(usize, usize); 4]> {
        let mut lines = Vec::new();
        for c in 0..COLS {
            for r in 0..ROWS {
                for (dc, dr) in [(1isize, 0isize), (0, 1), (1, 1), (1, -1)] {
                    let end_c = c as isize + 3 * dc;
                    let end_r = r as isize + 3 * dr;
                    if end_c >= 0
                        && end_c < COLS as isize
                        && end_r >= 0
                        && end_r < ROWS as isize
                    {
                        let mut line = [(0, 0); 4];
                        for (k, cell) in line.iter_mut().enumerate() {
                            *cell = (
                                (c as isize + k as isize * dc) as usize,
                                (r as isize + k as isize * dr) as usize,
                            );
                        }
                        lines.push(line);
                    }
                }
            }
        }
        lines
    }

    fn brute_force_winner(env: &Connect4) -> Option<u8> {
        for line in all_lines() {
            let first = env.cell(line[0].0, line[0].1);
            if first.is_some() && line.iter().all(|&(c, r)| env.cell(c, r) == first) {
                return first;
            }
        }
        None
    }

    #[test]
    fn there_are_exactly_69_lines() {
        assert_eq!(all_lines().len(), 69);
    }

    #[test]
    fn random_games_match_brute_force_line_scan_and_token_balance() {
        let mut rng = crate::rng::stream(99);
        for _ in 0..200 {
            let mut env = Connect4::new();
            env.reset(0);
            loop {
                let mover = env.to_move();
                let legal = env.legal_actions(mover);
                // Token counts differ by at most one at all times.
                let diff = env.token_count(0) as isize - env.token_count(1) as isize;
                assert!(diff == 0 || diff == 1);
                if legal.is_empty() {
                    break;
                }
                let col = legal[rng.gen_range(0..legal.len())];
                let mut joint = [0usize; 2];
                joint[mover] = col;
                joint[1 - mover] = legal[0]; // validated no-op for the non-mover
                let res = env.step(&joint).unwrap();
                // Incremental win detection agrees with the full scan.
                let bf = brute_force_winner(&env);
                match bf {
                    Some(p) => {
                        assert!(res.done[0] && res.done[1]);
                        assert_eq!(res.rewards[p as usize], 1.0);
                        assert_eq!(res.rewards[1 - p as usize], -1.0);
                        break;
                    }
                    None => {
                        if res.done[0] {
                            // Draw: board full, no winner.
                            assert_eq!(res.rewards, vec![0.0, 0.0]);
                            break;
                        }
                    }
                }
            }
        }
    }
}
