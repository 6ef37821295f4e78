//! Explore-then-exploit agents on observation-vector environments: the
//! ensemble-disagreement agent, its uniform-exploration ablation, and an
//! ε-greedy online Q-learning baseline.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::qnet::evaluate_greedy;
use crate::ensemble::{
    ensemble_update, offline_q_train, Adam, Ensemble, EnsembleConfig, QConfig, QNetwork,
};
use crate::envs::{
    Combolock, CombolockConfig, Environment, Maze, MazeConfig, MountainCar, MountainCarConfig,
};
use crate::error::{Error, Result};
use crate::mdp::{ReplayBuffer, Trajectory, Transition};
use crate::planners::{
    deterministic_plan, execute_with_replanning, mcts_plan, Execution, MctsConfig, PlannerMode,
    ReplanningEpisode,
};
use crate::rng::{stream, RunRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    Combolock(CombolockConfig),
    Maze(MazeConfig),
    MountainCar(MountainCarConfig),
}

impl EnvSpec {
    pub fn label(&self) -> &'static str {
        match self {
            EnvSpec::Combolock(_) => "combolock",
            EnvSpec::Maze(_) => "maze",
            EnvSpec::MountainCar(_) => "mountain_car",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Exploit,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Exploit => "exploit",
        }
    }
}

/// One episode's outcome. `wall_ms` is 0 unless timing was requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode: usize,
    pub phase: Phase,
    #[serde(rename = "return")]
    pub ret: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlannerSpec {
    Mcts(MctsConfig),
    Deterministic {
        #[serde(default = "default_n_max")]
        n_max: usize,
    },
}

fn default_n_max() -> usize {
    2000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExploitMethod {
    #[default]
    OfflineQ,
    Planner,
}

/// How exploration actions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationRule {
    /// Plan for maximal ensemble disagreement.
    Disagreement,
    /// Uniformly random actions.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralE3Config {
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    pub planner: PlannerSpec,
    pub exploration_epochs: usize,
    #[serde(default = "default_one")]
    pub episodes_per_epoch: usize,
    #[serde(default = "default_exploit_episodes")]
    pub exploit_episodes: usize,
    #[serde(default)]
    pub exploit: ExploitMethod,
    #[serde(default)]
    pub q: QConfig,
    #[serde(default = "default_execution")]
    pub execution: Execution,
    #[serde(default)]
    pub buffer_capacity: Option<usize>,
    /// Select the best Q snapshot by greedy evaluation on a separate
    /// environment instance.
    #[serde(default = "default_true")]
    pub q_snapshot_eval: bool,
    /// Skip ensemble training (pure data collection, for Q-only baselines).
    #[serde(default)]
    pub skip_model_training: bool,
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_one() -> usize {
    1
}
fn default_exploit_episodes() -> usize {
    20
}
fn default_execution() -> Execution {
    Execution::FirstAction
}
fn default_true() -> bool {
    true
}

impl NeuralE3Config {
    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        self.q.validate()?;
        if self.episodes_per_epoch == 0 {
            return Err(Error::Config(
                "episodes_per_epoch must be at least 1".into(),
            ));
        }
        match &self.planner {
            PlannerSpec::Mcts(m) if m.playouts == 0 => {
                Err(Error::Config("MCTS needs at least one playout".into()))
            }
            PlannerSpec::Deterministic { n_max } if *n_max < 2 => {
                Err(Error::Config("n_max must be at least 2".into()))
            }
            _ => Ok(()),
        }
    }
}

pub struct AgentRun {
    pub records: Vec<EpisodeRecord>,
    pub ensemble: Ensemble,
    pub q: Option<QNetwork>,
    pub buffer: ReplayBuffer<Vec<f64>>,
    /// Best planner objective at the start of each exploration episode.
    pub explore_estimates: Vec<f64>,
}

fn plan(
    members: &[crate::ensemble::DynamicsNet],
    planner: &PlannerSpec,
    mode: PlannerMode,
    obs: &[f64],
    depth: usize,
    max_steps: usize,
    rng: &mut RunRng,
) -> (Vec<usize>, f64) {
    match planner {
        PlannerSpec::Mcts(cfg) => {
            let p = mcts_plan(
                obs,
                members,
                cfg,
                max_steps.saturating_sub(1),
                depth,
                mode,
                rng,
            );
            (p.actions, p.best_return)
        }
        PlannerSpec::Deterministic { n_max } => {
            let p = deterministic_plan(obs, members, *n_max, mode);
            (p.actions, p.utility_rate)
        }
    }
}

struct Clock {
    on: bool,
}

impl Clock {
    fn time<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<(T, u64)> {
        if !self.on {
            return Ok((f()?, 0));
        }
        let start = Instant::now();
        let out = f()?;
        Ok((out, start.elapsed().as_millis() as u64))
    }
}

/// Exploration epochs followed by exploitation episodes. `rule` selects
/// between disagreement-driven and uniform exploration; everything else is
/// shared.
pub fn neural_e3_run<E: Environment + Clone>(
    env: &mut E,
    config: &NeuralE3Config,
    rule: ExplorationRule,
    seed: u64,
) -> Result<AgentRun> {
    config.validate()?;
    let mut env_rng = stream(seed, 0);
    let mut agent_rng = stream(seed, 1);
    let clock = Clock {
        on: config.record_wall_time,
    };
    let num_actions = env.num_actions();
    let obs_dim = env.observation_dim();
    let max_steps = env.max_steps();
    let mut ensemble = Ensemble::new(
        config.ensemble.clone(),
        obs_dim,
        num_actions,
        &mut agent_rng,
    )?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut records = Vec::new();
    let mut explore_estimates = Vec::new();
    let mut warned = false;

    for epoch in 0..config.exploration_epochs {
        let mut trajs = Vec::with_capacity(config.episodes_per_epoch);
        for _ in 0..config.episodes_per_epoch {
            let episode_seed: u64 = env_rng.gen();
            let mut first_estimate = None;
            let (ep, ms) = clock.time(|| {
                execute_with_replanning(
                    env,
                    config.execution,
                    episode_seed,
                    &mut env_rng,
                    |obs, depth, rng| {
                        Ok(match rule {
                            ExplorationRule::Uniform => vec![rng.gen_range(0..num_actions)],
                            ExplorationRule::Disagreement => {
                                let (actions, value) = plan(
                                    &ensemble.members,
                                    &config.planner,
                                    PlannerMode::Explore,
                                    obs,
                                    depth,
                                    max_steps,
                                    rng,
                                );
                                first_estimate.get_or_insert(value);
                                actions
                            }
                        })
                    },
                )
            })?;
            if let Some(v) = first_estimate {
                explore_estimates.push(v);
                if v == 0.0 && !warned && ensemble.len() > 1 {
                    log::warn!("ensemble members agree everywhere the planner looked; exploration is undirected");
                    warned = true;
                }
            }
            records.push(EpisodeRecord {
                seed,
                episode: records.len(),
                phase: Phase::Explore,
                ret: ep.trajectory.total_reward(),
                wall_ms: ms,
            });
            trajs.push(ep.trajectory);
        }
        buffer.push(epoch, trajs)?;
        if !config.skip_model_training {
            let losses = ensemble_update(&mut ensemble, &buffer, &mut agent_rng)?;
            log::debug!("epoch {epoch}: member losses {losses:?}");
        }
    }

    let mut q = None;
    match config.exploit {
        ExploitMethod::OfflineQ => {
            if buffer.is_empty() {
                return Err(Error::EmptyBuffer);
            }
            let mut eval_env = env.clone();
            let trained = offline_q_train(
                &buffer,
                obs_dim,
                num_actions,
                config.q_snapshot_eval.then_some(&mut eval_env),
                &config.q,
                &mut agent_rng,
            )?;
            let net = trained.network;
            for _ in 0..config.exploit_episodes {
                let (ret, ms) = clock.time(|| greedy_episode(env, &net, &mut env_rng))?;
                records.push(EpisodeRecord {
                    seed,
                    episode: records.len(),
                    phase: Phase::Exploit,
                    ret,
                    wall_ms: ms,
                });
            }
            q = Some(net);
        }
        ExploitMethod::Planner => {
            for _ in 0..config.exploit_episodes {
                let episode_seed: u64 = env_rng.gen();
                let (ep, ms): (ReplanningEpisode, u64) = clock.time(|| {
                    execute_with_replanning(
                        env,
                        config.execution,
                        episode_seed,
                        &mut env_rng,
                        |obs, depth, rng| {
                            Ok(plan(
                                &ensemble.members,
                                &config.planner,
                                PlannerMode::Exploit,
                                obs,
                                depth,
                                max_steps,
                                rng,
                            )
                            .0)
                        },
                    )
                })?;
                records.push(EpisodeRecord {
                    seed,
                    episode: records.len(),
                    phase: Phase::Exploit,
                    ret: ep.trajectory.total_reward(),
                    wall_ms: ms,
                });
            }
        }
    }
    Ok(AgentRun {
        records,
        ensemble,
        q,
        buffer,
        explore_estimates,
    })
}

fn greedy_episode<E: Environment + ?Sized>(
    env: &mut E,
    q: &QNetwork,
    rng: &mut RunRng,
) -> Result<f64> {
    evaluate_greedy(q, env, 1, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyQConfig {
    #[serde(default)]
    pub q: QConfig,
    pub episodes: usize,
    #[serde(default = "default_exploit_episodes")]
    pub exploit_episodes: usize,
    /// Probability of a uniformly random action while learning.
    #[serde(default = "default_greedy_eps")]
    pub epsilon: f64,
    #[serde(default = "default_one")]
    pub updates_per_step: usize,
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_greedy_eps() -> f64 {
    0.001
}

/// Online ε-greedy double Q-learning: every environment step is followed by
/// `updates_per_step` updates once the buffer holds a minibatch.
pub fn greedy_q_run<E: Environment>(
    env: &mut E,
    config: &GreedyQConfig,
    seed: u64,
) -> Result<(Vec<EpisodeRecord>, QNetwork)> {
    config.q.validate()?;
    if !(0.0..=1.0).contains(&config.epsilon) {
        return Err(Error::Config(format!(
            "epsilon {} must lie in [0, 1]",
            config.epsilon
        )));
    }
    let mut env_rng = stream(seed, 0);
    let mut agent_rng = stream(seed, 1);
    let clock = Clock {
        on: config.record_wall_time,
    };
    let num_actions = env.num_actions();
    let mut q = QNetwork::new(
        env.observation_dim(),
        num_actions,
        &config.q,
        &mut agent_rng,
    )?;
    let mut opt = Adam::new(q.online().params().len(), config.q.learning_rate);
    let mut buffer: ReplayBuffer<Vec<f64>> = ReplayBuffer::new(None);
    let mut records = Vec::new();
    for episode in 0..config.episodes {
        let (traj, ms) = clock.time(|| {
            let mut obs = env.reset(&mut env_rng);
            let mut steps = Vec::new();
            let mut done = false;
            while !done && env.steps_taken() < env.max_steps() {
                let a = if agent_rng.gen::<f64>() < config.epsilon {
                    agent_rng.gen_range(0..num_actions)
                } else {
                    q.greedy_action(&obs)?
                };
                let h = env.steps_taken() + 1;
                let out = env.step(a, &mut env_rng)?;
                done = out.done || env.steps_taken() >= env.max_steps();
                steps.push(Transition {
                    h,
                    state: std::mem::take(&mut obs),
                    action: a,
                    reward: out.reward,
                    next_state: out.observation.clone(),
                    terminal: done,
                });
                obs = out.observation;
                let partial = Trajectory {
                    steps: vec![steps.last().expect("just pushed").clone()],
                    seed: episode as u64,
                };
                buffer.push(episode, vec![partial])?;
                if buffer.num_transitions() >= config.q.batch_size {
                    for _ in 0..config.updates_per_step {
                        let batch =
                            buffer.sample_prioritized(config.q.batch_size, &mut agent_rng)?;
                        q.train_step(&mut opt, &batch, config.q.gamma)?;
                    }
                }
            }
            Ok(steps.iter().map(|t| t.reward).sum::<f64>())
        })?;
        records.push(EpisodeRecord {
            seed,
            episode,
            phase: Phase::Explore,
            ret: traj,
            wall_ms: ms,
        });
    }
    for _ in 0..config.exploit_episodes {
        let (ret, ms) = clock.time(|| greedy_episode(env, &q, &mut env_rng))?;
        records.push(EpisodeRecord {
            seed,
            episode: records.len(),
            phase: Phase::Exploit,
            ret,
            wall_ms: ms,
        });
    }
    Ok((records, q))
}

/// Builds the environment and runs `f` on it.
pub fn with_env<T>(spec: &EnvSpec, f: impl EnvVisitor<Output = T>) -> Result<T> {
    match spec {
        EnvSpec::Combolock(c) => f.visit(&mut Combolock::new(c.clone())?),
        EnvSpec::Maze(c) => f.visit(&mut Maze::new(c.clone())?),
        EnvSpec::MountainCar(c) => f.visit(&mut MountainCar::new(c.clone())?),
    }
}

/// Generic callback over concrete environment types.
pub trait EnvVisitor {
    type Output;
    fn visit<E: Environment + Clone>(self, env: &mut E) -> Result<Self::Output>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_lock_config(epochs: usize) -> NeuralE3Config {
        NeuralE3Config {
            ensemble: EnsembleConfig {
                ensemble_size: 2,
                stochastic: true,
                hidden_sizes: vec![16],
                updates_per_epoch: 5,
                minibatch_size: 8,
                ..EnsembleConfig::default()
            },
            planner: PlannerSpec::Mcts(MctsConfig::new(10, 2)),
            exploration_epochs: epochs,
            episodes_per_epoch: 1,
            exploit_episodes: 3,
            exploit: ExploitMethod::Planner,
            q: QConfig::default(),
            execution: Execution::FirstAction,
            buffer_capacity: None,
            q_snapshot_eval: false,
            skip_model_training: false,
            record_wall_time: false,
        }
    }

    #[test]
    fn records_are_contiguous_and_deterministic() {
        let cfg = tiny_lock_config(3);
        let run = |seed| {
            let mut env = Combolock::new(CombolockConfig::new(3)).unwrap();
            neural_e3_run(&mut env, &cfg, ExplorationRule::Disagreement, seed)
                .unwrap()
                .records
        };
        let a = run(7);
        assert_eq!(a.len(), 6);
        assert!(a.iter().enumerate().all(|(i, r)| r.episode == i));
        assert_eq!(
            a[..3].iter().filter(|r| r.phase == Phase::Explore).count(),
            3
        );
        assert_eq!(a, run(7));
    }

    #[test]
    fn zero_epochs_exploit_from_random_models() {
        let mut env = Combolock::new(CombolockConfig::new(3)).unwrap();
        let run =
            neural_e3_run(&mut env, &tiny_lock_config(0), ExplorationRule::Uniform, 1).unwrap();
        assert_eq!(run.records.len(), 3);
        assert!(run.records.iter().all(|r| r.phase == Phase::Exploit));
    }

    #[test]
    fn uniform_exploration_is_uniform() {
        let mut cfg = tiny_lock_config(20_000);
        cfg.skip_model_training = true;
        cfg.exploit_episodes = 0;
        let mut env = Combolock::new(CombolockConfig::new(5)).unwrap();
        let run = neural_e3_run(&mut env, &cfg, ExplorationRule::Uniform, 3).unwrap();
        let mut counts = [0usize; 4];
        for t in run.buffer.transitions() {
            counts[t.action] += 1;
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, 100_000);
        assert!(counts
            .iter()
            .all(|&c| (c as f64 / total as f64 - 0.25).abs() < 0.02));
    }

    #[test]
    fn greedy_q_records_both_phases() {
        let cfg = GreedyQConfig {
            q: QConfig {
                hidden_sizes: vec![8],
                batch_size: 4,
                ..QConfig::default()
            },
            episodes: 5,
            exploit_episodes: 2,
            epsilon: 0.1,
            updates_per_step: 1,
            record_wall_time: false,
        };
        let mut env = Combolock::new(CombolockConfig::new(3)).unwrap();
        let (records, _) = greedy_q_run(&mut env, &cfg, 0).unwrap();
        assert_eq!(records.len(), 7);
        assert_eq!(records[6].phase, Phase::Exploit);
    }
}
