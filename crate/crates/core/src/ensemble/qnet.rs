//! Double Q-learning on a replay buffer, without further environment
//! interaction except optional greedy evaluations for snapshot selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossGrad;
use super::nn::{Adam, Mlp};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::mdp::{argmax, ReplayBuffer, Transition};
use crate::rng::{seeded, RunRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QConfig {
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_updates")]
    pub updates: usize,
    #[serde(default = "default_target_period")]
    pub target_period: usize,
    /// Greedy evaluation interval; 0 disables snapshot selection.
    #[serde(default = "default_eval_period")]
    pub eval_period: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_gamma() -> f64 {
    0.99
}
fn default_updates() -> usize {
    75_000
}
fn default_target_period() -> usize {
    5_000
}
fn default_eval_period() -> usize {
    1_000
}
fn default_eval_episodes() -> usize {
    5
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: default_hidden(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            gamma: default_gamma(),
            updates: default_updates(),
            target_period: default_target_period(),
            eval_period: default_eval_period(),
            eval_episodes: default_eval_episodes(),
        }
    }
}

impl QConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.target_period == 0 {
            return Err(Error::Config(
                "batch_size and target_period must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} must lie in [0, 1]",
                self.gamma
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Online network, a target copy, and the update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    online: Mlp,
    target: Mlp,
    updates: u64,
    target_period: u64,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        num_actions: usize,
        config: &QConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden_sizes);
        sizes.push(num_actions);
        let online = Mlp::new(&sizes, rng)?;
        Ok(Self {
            target: online.clone(),
            online,
            updates: 0,
            target_period: config.target_period as u64,
        })
    }

    pub fn online(&self) -> &Mlp {
        &self.online
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn num_actions(&self) -> usize {
        self.online.output_dim()
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.online.forward(obs)
    }

    pub fn greedy_action(&self, obs: &[f64]) -> Result<usize> {
        let q = self.q_values(obs)?;
        argmax(&q).ok_or_else(|| Error::Config("Q-network has no actions".into()))
    }

    /// One optimizer step on `batch`; the target copy is refreshed whenever
    /// the update count reaches a multiple of the refresh period.
    pub fn train_step(
        &mut self,
        optimizer: &mut Adam,
        batch: &[&Transition<Vec<f64>>],
        gamma: f64,
    ) -> Result<f64> {
        let lg = td_loss(&self.online, &self.target, batch, gamma)?;
        if !lg.loss.is_finite() {
            return Err(Error::TrainingDiverged { member: 0 });
        }
        optimizer.step(self.online.params_mut(), &lg.grad);
        self.updates += 1;
        if self.updates.is_multiple_of(self.target_period) {
            self.target = self.online.clone();
        }
        Ok(lg.loss)
    }

    fn with_weights(&self, online: Mlp) -> Self {
        Self {
            target: online.clone(),
            online,
            updates: self.updates,
            target_period: self.target_period,
        }
    }
}

/// Mean squared error against the double-Q target
/// `y = r + γ·Q_target(s', argmax_a Q_online(s', a))` (no bootstrap at
/// terminal transitions); the gradient is taken through `Q_online(s, a)`.
pub fn td_loss(
    online: &Mlp,
    target: &Mlp,
    batch: &[&Transition<Vec<f64>>],
    gamma: f64,
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut grad = vec![0.0; online.params().len()];
    let mut loss = 0.0;
    for t in batch {
        let y = if t.terminal {
            t.reward
        } else {
            let next_online = online.forward(&t.next_state)?;
            let a_star = argmax(&next_online).expect("at least one action");
            t.reward + gamma * target.forward(&t.next_state)?[a_star]
        };
        let cache = online.forward_cached(&t.state)?;
        if t.action >= cache.output.len() {
            return Err(Error::Index {
                what: "action",
                index: t.action,
                limit: cache.output.len(),
            });
        }
        let diff = cache.output[t.action] - y;
        loss += diff * diff;
        let mut d = vec![0.0; cache.output.len()];
        d[t.action] = 2.0 * diff;
        online.backward(&cache, &d, &mut grad);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad {
        loss: loss / n,
        grad,
    })
}

/// Mean undiscounted return of the greedy policy over `episodes` episodes.
pub fn evaluate_greedy<E: Environment + ?Sized>(
    q: &QNetwork,
    env: &mut E,
    episodes: usize,
    rng: &mut RunRng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut done = false;
        while !done && env.steps_taken() < env.max_steps() {
            let out = env.step(q.greedy_action(&obs)?, rng)?;
            total += out.reward;
            obs = out.observation;
            done = out.done;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct QTraining {
    pub network: QNetwork,
    pub best_eval: Option<f64>,
    /// `(update count, mean greedy return)` at each evaluation.
    pub evaluations: Vec<(u64, f64)>,
}

/// Trains a fresh Q-network on `buffer` with prioritized minibatches. With
/// an evaluation environment, greedy returns are measured every
/// `eval_period` updates and the best-scoring weights are returned.
pub fn offline_q_train<E: Environment + ?Sized>(
    buffer: &ReplayBuffer<Vec<f64>>,
    obs_dim: usize,
    num_actions: usize,
    mut eval_env: Option<&mut E>,
    config: &QConfig,
    rng: &mut RunRng,
) -> Result<QTraining> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut q = QNetwork::new(obs_dim, num_actions, config, rng)?;
    let mut opt = Adam::new(q.online.params().len(), config.learning_rate);
    let mut eval_rng = seeded(rng.gen());
    let mut best: Option<(f64, Mlp)> = None;
    let mut evaluations = Vec::new();
    for u in 1..=config.updates {
        let batch = buffer.sample_prioritized(config.batch_size, rng)?;
        q.train_step(&mut opt, &batch, config.gamma)?;
        let due = config.eval_period > 0 && (u % config.eval_period == 0 || u == config.updates);
        if let (true, Some(env)) = (due, eval_env.as_deref_mut()) {
            let score = evaluate_greedy(&q, env, config.eval_episodes, &mut eval_rng)?;
            evaluations.push((q.updates, score));
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, q.online.clone()));
            }
        }
    }
    let best_eval = best.as_ref().map(|(s, _)| *s);
    let network = match best {
        Some((_, weights)) => q.with_weights(weights),
        None => q,
    };
    Ok(QTraining {
        network,
        best_eval,
        evaluations,
    })
}
