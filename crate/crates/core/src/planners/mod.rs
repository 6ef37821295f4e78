//! Planners: exhaustive search over a finite policy class, the priority-queue
//! planner for deterministic models, and distribution-propagating Monte-Carlo
//! tree search for stochastic models.

pub mod deterministic;
pub mod mcts;

pub use deterministic::{deterministic_plan, DeterministicPlan};
pub use mcts::{mcts_plan, MctsConfig, MctsPlan, TvEstimator};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::mdp::{Trajectory, Transition};
use crate::rng::RunRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    Explore,
    Exploit,
}

/// Model with deterministic next-observation and reward predictions.
pub trait DeterministicModel: Send + Sync {
    fn num_actions(&self) -> usize;
    fn predict(&self, obs: &[f64], action: usize) -> (Vec<f64>, f64);
}

/// Generative model over next observations and rewards.
pub trait StochasticModel: Send + Sync {
    fn num_actions(&self) -> usize;
    fn sample(&self, obs: &[f64], action: usize, rng: &mut RunRng) -> (Vec<f64>, f64);
}

impl<T: DeterministicModel + ?Sized> DeterministicModel for &T {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }
    fn predict(&self, obs: &[f64], action: usize) -> (Vec<f64>, f64) {
        (**self).predict(obs, action)
    }
}

impl<T: StochasticModel + ?Sized> StochasticModel for &T {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }
    fn sample(&self, obs: &[f64], action: usize, rng: &mut RunRng) -> (Vec<f64>, f64) {
        (**self).sample(obs, action, rng)
    }
}

/// Index and value of the best policy under `objective`; ties go to the
/// lowest index.
pub fn exhaustive_search<P>(
    policies: &[P],
    mut objective: impl FnMut(&P) -> Result<f64>,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in policies.iter().enumerate() {
        let v = objective(p)?;
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.ok_or_else(|| Error::Config("cannot search an empty policy class".into()))
}

/// How a returned plan is executed before replanning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Execute only the first action, then replan.
    FirstAction,
    /// Execute the whole sequence, then replan if the episode continues.
    FullSequence,
}

#[derive(Debug, Clone)]
pub struct ReplanningEpisode {
    pub trajectory: Trajectory<Vec<f64>>,
    pub planner_calls: usize,
}

/// Runs one episode, calling `planner(observation, steps_taken, rng)` for a
/// plan whenever the previous one is exhausted. An empty plan falls back to
/// one uniformly random action.
pub fn execute_with_replanning<E, F>(
    env: &mut E,
    execution: Execution,
    seed: u64,
    rng: &mut RunRng,
    mut planner: F,
) -> Result<ReplanningEpisode>
where
    E: Environment + ?Sized,
    F: FnMut(&[f64], usize, &mut RunRng) -> Result<Vec<usize>>,
{
    let mut obs = env.reset(rng);
    let mut steps = Vec::new();
    let mut calls = 0;
    let mut done = false;
    while !done && env.steps_taken() < env.max_steps() {
        let mut plan = planner(&obs, env.steps_taken(), rng)?;
        calls += 1;
        if plan.is_empty() {
            log::warn!("planner returned an empty plan; taking a random action");
            plan.push(rng.gen_range(0..env.num_actions()));
        }
        if execution == Execution::FirstAction {
            plan.truncate(1);
        }
        for a in plan {
            let h = env.steps_taken() + 1;
            let out = env.step(a, rng)?;
            done = out.done;
            steps.push(Transition {
                h,
                state: std::mem::take(&mut obs),
                action: a,
                reward: out.reward,
                next_state: out.observation.clone(),
                terminal: done,
            });
            obs = out.observation;
            if done || env.steps_taken() >= env.max_steps() {
                break;
            }
        }
    }
    Ok(ReplanningEpisode {
        trajectory: Trajectory { steps, seed },
        planner_calls: calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_ties_and_empty() {
        let ps = [1, 2, 3];
        assert_eq!(exhaustive_search(&ps, |_| Ok(0.0)).unwrap(), (0, 0.0));
        assert_eq!(
            exhaustive_search(&ps, |p| Ok(-((*p as f64) - 2.0).abs()))
                .unwrap()
                .0,
            1
        );
        assert_eq!(exhaustive_search(&[7], |_| Ok(1.0)).unwrap(), (0, 1.0));
        let empty: [i32; 0] = [];
        assert!(exhaustive_search(&empty, |_| Ok(0.0)).is_err());
    }
}
