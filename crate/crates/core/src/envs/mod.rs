//! Benchmark environments: the stochastic combination lock, procedurally
//! generated mazes and mountain car.

pub mod combolock;
pub mod maze;
pub mod mountaincar;

pub use combolock::{Combolock, CombolockConfig, CombolockState, Latent};
pub use maze::{Maze, MazeConfig, MazeState};
pub use mountaincar::{MountainCar, MountainCarConfig, MountainCarState};

use crate::error::Result;
use crate::rng::RunRng;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with vector observations and discrete actions.
pub trait Environment: Send {
    fn num_actions(&self) -> usize;
    fn observation_dim(&self) -> usize;
    /// Maximum number of steps in an episode.
    fn max_steps(&self) -> usize;
    /// Steps taken since the last reset.
    fn steps_taken(&self) -> usize;
    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64>;
    fn step(&mut self, action: usize, rng: &mut RunRng) -> Result<StepOutcome>;
}
