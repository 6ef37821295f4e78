//! Ensembles of learned dynamics models, their training, and offline
//! Q-learning on the collected experience.

pub mod checkpoint;
pub mod loss;
pub mod nn;
pub mod qnet;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{loss_multistep, loss_multistep_batch, loss_nll_stochastic, LossGrad};
pub use nn::{Adam, DynamicsNet, DynamicsOutput, Mlp, OutputKind};
pub use qnet::{offline_q_train, td_loss, QConfig, QNetwork, QTraining};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::ReplayBuffer;
use crate::planners::{DeterministicModel, StochasticModel};
use crate::rng::{seeded, RunRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_size")]
    pub ensemble_size: usize,
    /// Unroll length K of the squared loss (deterministic models only).
    #[serde(default = "default_unroll")]
    pub unroll_steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub minibatch_size: usize,
    #[serde(default = "default_updates")]
    pub updates_per_epoch: usize,
    /// Bernoulli-output models trained by likelihood when set.
    #[serde(default)]
    pub stochastic: bool,
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_reward_weight")]
    pub reward_weight: f64,
    /// Deterministic state heads predict the change of state.
    #[serde(default = "default_residual")]
    pub residual: bool,
}

fn default_size() -> usize {
    4
}
fn default_unroll() -> usize {
    1
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    100
}
fn default_updates() -> usize {
    100
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_reward_weight() -> f64 {
    1.0
}
fn default_residual() -> bool {
    true
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            ensemble_size: default_size(),
            unroll_steps: default_unroll(),
            learning_rate: default_lr(),
            minibatch_size: default_batch(),
            updates_per_epoch: default_updates(),
            stochastic: false,
            hidden_sizes: default_hidden(),
            reward_weight: default_reward_weight(),
            residual: default_residual(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if self.ensemble_size == 1 {
            log::warn!("an ensemble of one model never disagrees");
        }
        if self.unroll_steps == 0 || self.minibatch_size == 0 {
            return Err(Error::Config(
                "unroll_steps and minibatch_size must be at least 1".into(),
            ));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(
                "hidden_sizes must be non-empty and positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn output_kind(&self) -> OutputKind {
        if self.stochastic {
            OutputKind::Bernoulli
        } else {
            OutputKind::Deterministic {
                residual: self.residual,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub members: Vec<DynamicsNet>,
    optimizers: Vec<Adam>,
}

impl Ensemble {
    /// Members start from independent random initializations.
    pub fn new<R: Rng + ?Sized>(
        config: EnsembleConfig,
        obs_dim: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden_sizes);
        sizes.push(obs_dim);
        let members = (0..config.ensemble_size)
            .map(|_| {
                DynamicsNet::new(
                    &sizes,
                    num_actions,
                    config.output_kind(),
                    &mut seeded(rng.gen()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizers = members
            .iter()
            .map(|m| Adam::new(m.params().len(), config.learning_rate))
            .collect();
        Ok(Self {
            config,
            members,
            optimizers,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Smallest L∞ distance between two members' parameter vectors.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.members.len() {
            for j in (i + 1)..self.members.len() {
                let d = self.members[i]
                    .params()
                    .iter()
                    .zip(self.members[j].params())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                best = best.min(d);
            }
        }
        best
    }
}

/// Runs `updates_per_epoch` optimizer steps on every member, each on its own
/// prioritized minibatches. Returns the last minibatch loss of each member.
pub fn ensemble_update<R: Rng + ?Sized>(
    ensemble: &mut Ensemble,
    buffer: &ReplayBuffer<Vec<f64>>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let cfg = ensemble.config.clone();
    let longest = buffer.trajectories().map(|t| t.len()).max().unwrap_or(0);
    let k = cfg.unroll_steps.min(longest).max(1);
    let seeds: Vec<u64> = (0..ensemble.members.len()).map(|_| rng.gen()).collect();
    let losses: Vec<Result<f64>> = ensemble
        .members
        .par_iter_mut()
        .zip(ensemble.optimizers.par_iter_mut())
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(member, ((net, opt), &seed))| {
            let mut rng = seeded(seed);
            let mut last = f64::NAN;
            for _ in 0..cfg.updates_per_epoch {
                let lg = if cfg.stochastic {
                    let batch = buffer.sample_prioritized(cfg.minibatch_size, &mut rng)?;
                    loss_nll_stochastic(net, &batch, cfg.reward_weight)?
                } else {
                    let segments = buffer.sample_segments(cfg.minibatch_size, k, &mut rng)?;
                    loss_multistep_batch(net, &segments, k, cfg.reward_weight)?
                };
                if !lg.loss.is_finite() {
                    return Err(Error::TrainingDiverged { member });
                }
                opt.step(net.params_mut(), &lg.grad);
                last = lg.loss;
            }
            if !net.is_finite() {
                return Err(Error::TrainingDiverged { member });
            }
            Ok(last)
        })
        .collect();
    losses.into_iter().collect()
}

impl DeterministicModel for DynamicsNet {
    fn num_actions(&self) -> usize {
        DynamicsNet::num_actions(self)
    }

    fn predict(&self, obs: &[f64], action: usize) -> (Vec<f64>, f64) {
        let out = self
            .forward(obs, action)
            .expect("observation matches the model input");
        (out.state, out.reward)
    }
}

impl StochasticModel for DynamicsNet {
    fn num_actions(&self) -> usize {
        DynamicsNet::num_actions(self)
    }

    fn sample(&self, obs: &[f64], action: usize, rng: &mut RunRng) -> (Vec<f64>, f64) {
        let (mut s, r) = DynamicsNet::sample(self, obs, action, 1, rng)
            .expect("observation matches the model input");
        (s.pop().expect("one sample"), r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Trajectory, Transition};

    fn linear_buffer() -> ReplayBuffer<Vec<f64>> {
        let mut buf = ReplayBuffer::new(None);
        let mut trajs = Vec::new();
        for i in 0..20 {
            let mut x = vec![i as f64 / 20.0, 0.5];
            let mut steps = Vec::new();
            for h in 1..=6 {
                let a = h % 2;
                let next = vec![x[0] + if a == 0 { 0.1 } else { -0.1 }, 0.9 * x[1]];
                steps.push(Transition {
                    h,
                    state: x.clone(),
                    action: a,
                    reward: next[0],
                    next_state: next.clone(),
                    terminal: h == 6,
                });
                x = next;
            }
            trajs.push(Trajectory { steps, seed: i });
        }
        buf.push(0, trajs).unwrap();
        buf
    }

    #[test]
    fn training_reduces_loss_and_members_stay_distinct() {
        let buf = linear_buffer();
        let cfg = EnsembleConfig {
            ensemble_size: 3,
            unroll_steps: 2,
            learning_rate: 0.003,
            minibatch_size: 16,
            updates_per_epoch: 10,
            hidden_sizes: vec![16],
            ..EnsembleConfig::default()
        };
        let mut rng = seeded(0);
        let mut ens = Ensemble::new(cfg, 2, 2, &mut rng).unwrap();
        assert!(ens.min_pairwise_distance() > 0.0);
        let segments: Vec<_> = buf.trajectories().map(|t| (t, 0)).collect();
        let before = loss_multistep_batch(&ens.members[0], &segments, 2, 1.0)
            .unwrap()
            .loss;
        for _ in 0..10 {
            ensemble_update(&mut ens, &buf, &mut rng).unwrap();
        }
        let after = loss_multistep_batch(&ens.members[0], &segments, 2, 1.0)
            .unwrap()
            .loss;
        assert!(after < before);
        assert!(ens.min_pairwise_distance() > 0.0);
    }

    #[test]
    fn empty_buffer_is_rejected() {
        let mut rng = seeded(0);
        let mut ens = Ensemble::new(EnsembleConfig::default(), 2, 2, &mut rng).unwrap();
        assert!(matches!(
            ensemble_update(&mut ens, &ReplayBuffer::new(None), &mut rng),
            Err(Error::EmptyBuffer)
        ));
    }
}
