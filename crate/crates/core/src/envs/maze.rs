//! Procedurally generated grid mazes.
//!
//! A fresh perfect maze is carved by randomized depth-first search for every
//! episode (unless a fixed episode seed is configured). Movement is
//! 4-connected and deterministic. Rewards: +2 on reaching the goal (episode
//! ends), −0.5 for bumping into a wall, −0.2 for any other step.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::planners::DeterministicModel;
use crate::rng::{seeded, RunRng};

pub const NUM_ACTIONS: usize = 4;
pub const GOAL_REWARD: f64 = 2.0;
pub const WALL_REWARD: f64 = -0.5;
pub const STEP_REWARD: f64 = -0.2;

const MOVES: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeConfig {
    pub size: usize,
    #[serde(default = "default_time_limit")]
    pub time_limit: usize,
    /// Fixes the maze across episodes when set.
    #[serde(default)]
    pub episode_seed: Option<u64>,
}

fn default_time_limit() -> usize {
    100
}

impl MazeConfig {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            time_limit: default_time_limit(),
            episode_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 5 {
            return Err(Error::Config("maze size must be at least 5".into()));
        }
        if self.time_limit == 0 {
            return Err(Error::Config("maze time limit must be positive".into()));
        }
        Ok(())
    }
}

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeState {
    pub size: usize,
    /// Row-major wall grid.
    pub walls: Vec<bool>,
    pub agent: Cell,
    pub goal: Cell,
    pub steps_elapsed: usize,
    pub time_limit: usize,
    pub done: bool,
}

impl MazeState {
    pub fn is_wall(&self, (r, c): Cell) -> bool {
        self.walls[r * self.size + c]
    }

    pub fn open_cells(&self) -> Vec<Cell> {
        (0..self.size)
            .flat_map(|r| (0..self.size).map(move |c| (r, c)))
            .filter(|&cell| !self.is_wall(cell))
            .collect()
    }

    /// Three stacked binary grids (walls, agent, goal), flattened row-major.
    pub fn observation(&self) -> Vec<f64> {
        let n = self.size * self.size;
        let mut obs = vec![0.0; 3 * n];
        for (i, &w) in self.walls.iter().enumerate() {
            if w {
                obs[i] = 1.0;
            }
        }
        obs[n + self.agent.0 * self.size + self.agent.1] = 1.0;
        obs[2 * n + self.goal.0 * self.size + self.goal.1] = 1.0;
        obs
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.size * (self.size + 1));
        for r in 0..self.size {
            for c in 0..self.size {
                let ch = if (r, c) == self.agent {
                    'A'
                } else if (r, c) == self.goal {
                    'G'
                } else if self.is_wall((r, c)) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Carves a perfect maze and places agent and goal on distinct open cells.
pub fn maze_generate(config: &MazeConfig, episode_seed: u64) -> Result<MazeState> {
    config.validate()?;
    let n = config.size;
    let mut rng = seeded(episode_seed);
    let mut walls = vec![true; n * n];
    let rooms: Vec<usize> = (1..n - 1).step_by(2).collect();
    let start = (
        *rooms.choose(&mut rng).expect("size >= 5 gives rooms"),
        *rooms.choose(&mut rng).expect("size >= 5 gives rooms"),
    );
    walls[start.0 * n + start.1] = false;
    let mut stack = vec![start];
    while let Some(&(r, c)) = stack.last() {
        let mut dirs = MOVES;
        dirs.shuffle(&mut rng);
        let next = dirs.iter().find_map(|&(dr, dc)| {
            let nr = r as isize + 2 * dr;
            let nc = c as isize + 2 * dc;
            let inside = nr >= 1 && nc >= 1 && (nr as usize) < n - 1 && (nc as usize) < n - 1;
            (inside && walls[nr as usize * n + nc as usize]).then_some((
                nr as usize,
                nc as usize,
                dr,
                dc,
            ))
        });
        match next {
            Some((nr, nc, dr, dc)) => {
                walls[(r as isize + dr) as usize * n + (c as isize + dc) as usize] = false;
                walls[nr * n + nc] = false;
                stack.push((nr, nc));
            }
            None => {
                stack.pop();
            }
        }
    }
    let open: Vec<Cell> = (0..n)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .filter(|&(r, c)| !walls[r * n + c])
        .collect();
    let picks: Vec<&Cell> = open.choose_multiple(&mut rng, 2).collect();
    Ok(MazeState {
        size: n,
        walls,
        agent: *picks[0],
        goal: *picks[1],
        steps_elapsed: 0,
        time_limit: config.time_limit,
        done: false,
    })
}

fn apply_move(state: &MazeState, action: usize) -> (Cell, f64) {
    let (dr, dc) = MOVES[action];
    let target = (
        (state.agent.0 as isize + dr) as usize,
        (state.agent.1 as isize + dc) as usize,
    );
    if state.is_wall(target) {
        (state.agent, WALL_REWARD)
    } else if target == state.goal {
        (target, GOAL_REWARD)
    } else {
        (target, STEP_REWARD)
    }
}

pub fn maze_step(state: &MazeState, action: usize) -> Result<(MazeState, f64)> {
    if state.done || state.steps_elapsed >= state.time_limit {
        return Err(Error::EpisodeOver);
    }
    if action >= NUM_ACTIONS {
        return Err(Error::Index {
            what: "action",
            index: action,
            limit: NUM_ACTIONS,
        });
    }
    let (agent, reward) = apply_move(state, action);
    let mut next = state.clone();
    next.agent = agent;
    next.steps_elapsed += 1;
    next.done = agent == state.goal || next.steps_elapsed >= state.time_limit;
    Ok((next, reward))
}

#[derive(Debug, Clone)]
pub struct Maze {
    config: MazeConfig,
    state: MazeState,
}

impl Maze {
    pub fn new(config: MazeConfig) -> Result<Self> {
        let state = maze_generate(&config, config.episode_seed.unwrap_or(0))?;
        Ok(Self { config, state })
    }

    pub fn state(&self) -> &MazeState {
        &self.state
    }

    pub fn config(&self) -> &MazeConfig {
        &self.config
    }

    /// Replaces the current episode with a given maze.
    pub fn set_state(&mut self, state: MazeState) {
        self.state = state;
    }
}

impl Environment for Maze {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn observation_dim(&self) -> usize {
        3 * self.config.size * self.config.size
    }

    fn max_steps(&self) -> usize {
        self.config.time_limit
    }

    fn steps_taken(&self) -> usize {
        self.state.steps_elapsed
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        let seed = self.config.episode_seed.unwrap_or_else(|| rng.gen());
        self.state = maze_generate(&self.config, seed).expect("config validated at construction");
        self.state.observation()
    }

    fn step(&mut self, action: usize, _rng: &mut RunRng) -> Result<StepOutcome> {
        let (next, reward) = maze_step(&self.state, action)?;
        self.state = next;
        Ok(StepOutcome {
            observation: self.state.observation(),
            reward,
            done: self.state.done,
        })
    }
}

/// Exact maze dynamics over observations. Once the agent stands on the goal
/// the observation is absorbing with reward 0.
#[derive(Debug, Clone, Copy)]
pub struct MazeTrueModel {
    pub size: usize,
}

impl MazeTrueModel {
    fn decode(&self, obs: &[f64]) -> MazeState {
        let n = self.size * self.size;
        let argmax = |block: &[f64]| {
            let i = block
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i);
            (i / self.size, i % self.size)
        };
        MazeState {
            size: self.size,
            walls: obs[..n].iter().map(|&x| x > 0.5).collect(),
            agent: argmax(&obs[n..2 * n]),
            goal: argmax(&obs[2 * n..3 * n]),
            steps_elapsed: 0,
            time_limit: usize::MAX,
            done: false,
        }
    }
}

impl DeterministicModel for MazeTrueModel {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn predict(&self, obs: &[f64], action: usize) -> (Vec<f64>, f64) {
        let mut s = self.decode(obs);
        if s.agent == s.goal {
            return (obs.to_vec(), 0.0);
        }
        let (agent, r) = apply_move(&s, action);
        s.agent = agent;
        (s.observation(), r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_maze_and_borders_are_walls() {
        let cfg = MazeConfig::new(9);
        let a = maze_generate(&cfg, 5).unwrap();
        assert_eq!(a, maze_generate(&cfg, 5).unwrap());
        for i in 0..9 {
            for cell in [(0, i), (8, i), (i, 0), (i, 8)] {
                assert!(a.is_wall(cell));
            }
        }
        assert!(maze_generate(&MazeConfig::new(4), 0).is_err());
    }

    #[test]
    fn step_rewards() {
        let mut s = maze_generate(&MazeConfig::new(5), 1).unwrap();
        s.agent = (1, 1);
        s.goal = (3, 3);
        s.walls = vec![true; 25];
        for c in [(1, 1), (1, 2), (1, 3), (2, 3), (3, 3)] {
            s.walls[c.0 * 5 + c.1] = false;
        }
        let (n, r) = maze_step(&s, 0).unwrap();
        assert_eq!((n.agent, r), ((1, 1), WALL_REWARD));
        let (n, r) = maze_step(&s, 3).unwrap();
        assert_eq!((n.agent, r), ((1, 2), STEP_REWARD));
        let mut near = s.clone();
        near.agent = (2, 3);
        let (n, r) = maze_step(&near, 1).unwrap();
        assert_eq!((n.agent, r, n.done), ((3, 3), GOAL_REWARD, true));
        assert!(matches!(maze_step(&n, 0), Err(Error::EpisodeOver)));
    }

    #[test]
    fn observation_channels() {
        let s = maze_generate(&MazeConfig::new(7), 3).unwrap();
        let o = s.observation();
        assert_eq!(o[49..98].iter().sum::<f64>(), 1.0);
        assert_eq!(o[98..].iter().sum::<f64>(), 1.0);
        for (i, &w) in s.walls.iter().enumerate() {
            assert_eq!(o[i] > 0.5, w);
        }
    }

    #[test]
    fn true_model_matches_env_and_absorbs_at_goal() {
        let s = maze_generate(&MazeConfig::new(7), 4).unwrap();
        let m = MazeTrueModel { size: 7 };
        for a in 0..4 {
            let (n, r) = maze_step(&s, a).unwrap();
            let (o, pr) = m.predict(&s.observation(), a);
            assert_eq!(o, n.observation());
            assert_eq!(r, pr);
        }
        let mut g = s.clone();
        g.agent = g.goal;
        let (o, r) = m.predict(&g.observation(), 1);
        assert_eq!((o, r), (g.observation(), 0.0));
    }

    #[test]
    fn time_limit_ends_episode() {
        let mut cfg = MazeConfig::new(5);
        cfg.time_limit = 2;
        cfg.episode_seed = Some(0);
        let mut env = Maze::new(cfg).unwrap();
        let mut rng = seeded(0);
        env.reset(&mut rng);
        let mut steps = 0;
        loop {
            let out = Environment::step(&mut env, 0, &mut rng).unwrap();
            steps += 1;
            if out.done {
                break;
            }
        }
        assert!(steps <= 2);
    }

    #[test]
    fn render_has_markers() {
        let s = maze_generate(&MazeConfig::new(5), 2).unwrap();
        let txt = s.render();
        assert_eq!(txt.lines().count(), 5);
        assert_eq!(txt.matches('A').count(), 1);
        assert_eq!(txt.matches('G').count(), 1);
    }
}
