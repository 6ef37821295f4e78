//! Mountain car with a sparse goal reward.
//!
//! Observations rescale the state to roughly [-1, 1]:
//! `((position + 0.3) / 0.9, velocity / 0.07)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::planners::DeterministicModel;
use crate::rng::RunRng;

pub const NUM_ACTIONS: usize = 3;
pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.5;
pub const FORCE: f64 = 0.001;
pub const GRAVITY: f64 = 0.0025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountainCarConfig {
    #[serde(default = "default_time_limit")]
    pub time_limit: usize,
}

fn default_time_limit() -> usize {
    500
}

impl Default for MountainCarConfig {
    fn default() -> Self {
        Self {
            time_limit: default_time_limit(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MountainCarState {
    pub position: f64,
    pub velocity: f64,
}

impl MountainCarState {
    pub fn observation(&self) -> Vec<f64> {
        vec![(self.position + 0.3) / 0.9, self.velocity / MAX_SPEED]
    }

    pub fn from_observation(obs: &[f64]) -> Self {
        Self {
            position: obs[0] * 0.9 - 0.3,
            velocity: obs[1] * MAX_SPEED,
        }
    }

    pub fn at_goal(&self) -> bool {
        self.position >= GOAL_POSITION
    }
}

/// Classic dynamics: action 0 pushes left, 1 coasts, 2 pushes right.
/// Returns the next state, the reward (1 on reaching the goal) and whether
/// the goal was reached.
pub fn mountaincar_step(
    s: MountainCarState,
    action: usize,
) -> Result<(MountainCarState, f64, bool)> {
    if action >= NUM_ACTIONS {
        return Err(Error::Index {
            what: "action",
            index: action,
            limit: NUM_ACTIONS,
        });
    }
    let mut velocity =
        s.velocity + FORCE * (action as f64 - 1.0) - GRAVITY * (3.0 * s.position).cos();
    velocity = velocity.clamp(-MAX_SPEED, MAX_SPEED);
    let mut position = (s.position + velocity).clamp(MIN_POSITION, MAX_POSITION);
    if position <= MIN_POSITION && velocity < 0.0 {
        position = MIN_POSITION;
        velocity = 0.0;
    }
    let next = MountainCarState { position, velocity };
    let done = next.at_goal();
    Ok((next, if done { 1.0 } else { 0.0 }, done))
}

#[derive(Debug, Clone)]
pub struct MountainCar {
    config: MountainCarConfig,
    state: MountainCarState,
    steps: usize,
    done: bool,
}

impl MountainCar {
    pub fn new(config: MountainCarConfig) -> Result<Self> {
        if config.time_limit == 0 {
            return Err(Error::Config(
                "mountain car time limit must be positive".into(),
            ));
        }
        Ok(Self {
            config,
            state: MountainCarState {
                position: -0.5,
                velocity: 0.0,
            },
            steps: 0,
            done: false,
        })
    }

    pub fn state(&self) -> MountainCarState {
        self.state
    }
}

impl Environment for MountainCar {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn observation_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        self.config.time_limit
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        self.state = MountainCarState {
            position: rng.gen_range(-0.6..-0.4),
            velocity: 0.0,
        };
        self.steps = 0;
        self.done = false;
        self.state.observation()
    }

    fn step(&mut self, action: usize, _rng: &mut RunRng) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeOver);
        }
        let (next, reward, goal) = mountaincar_step(self.state, action)?;
        self.state = next;
        self.steps += 1;
        self.done = goal || self.steps >= self.config.time_limit;
        Ok(StepOutcome {
            observation: next.observation(),
            reward,
            done: self.done,
        })
    }
}

/// Exact dynamics over observations; the goal region is absorbing with
/// reward 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct MountainCarTrueModel;

impl DeterministicModel for MountainCarTrueModel {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn predict(&self, obs: &[f64], action: usize) -> (Vec<f64>, f64) {
        let s = MountainCarState::from_observation(obs);
        if s.at_goal() {
            return (obs.to_vec(), 0.0);
        }
        let (next, r, _) = mountaincar_step(s, action).expect("action in range");
        (next.observation(), r)
    }
}
