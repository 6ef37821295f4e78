//! Stochastic combination lock.
//!
//! The lock has H levels with three latent states each (two good, one
//! dead). From a good state two of the four actions lead to the dead state
//! and two lead to the two good states of the next level; with probability
//! `flip_prob` the two good destinations are swapped. The dead state is
//! absorbing. At the last level each good state has one designated action
//! (one of its two good actions) that opens the lock and pays 5. An episode
//! is exactly H actions long.
//!
//! Observations are a one-hot encoding of (level, latent) over 3·H slots
//! followed by `noise_bits` fresh Bernoulli(1/2) bits. The state after the
//! final action has an all-zero one-hot block.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::mdp::{InitialState, TabularMdp};
use crate::planners::StochasticModel;
use crate::rng::{seeded, RunRng};

pub const NUM_ACTIONS: usize = 4;
pub const UNLOCK_REWARD: f64 = 5.0;
pub const DEAD_REWARD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latent {
    Good1,
    Good2,
    Dead,
}

impl Latent {
    fn index(self) -> usize {
        match self {
            Latent::Good1 => 0,
            Latent::Good2 => 1,
            Latent::Dead => 2,
        }
    }

    fn from_index(i: usize) -> Self {
        match i {
            0 => Latent::Good1,
            1 => Latent::Good2,
            _ => Latent::Dead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombolockConfig {
    pub horizon: usize,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    /// Defaults to the horizon.
    #[serde(default)]
    pub noise_bits: Option<usize>,
    #[serde(default)]
    pub antishaped: bool,
    #[serde(default)]
    pub env_seed: u64,
    #[serde(default = "default_initial")]
    pub initial_latent: Latent,
    /// Antishaped variant only: the unlock reward replaces the step shaping
    /// on the final transition instead of adding to it.
    #[serde(default = "default_true")]
    pub terminal_replaces_shaping: bool,
}

fn default_flip() -> f64 {
    0.1
}

fn default_initial() -> Latent {
    Latent::Good1
}

fn default_true() -> bool {
    true
}

impl CombolockConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            flip_prob: default_flip(),
            noise_bits: None,
            antishaped: false,
            env_seed: 0,
            initial_latent: Latent::Good1,
            terminal_replaces_shaping: true,
        }
    }

    pub fn noise_bits(&self) -> usize {
        self.noise_bits.unwrap_or(self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config(
                "combination lock horizon must be at least 2".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 0.5)".into()));
        }
        if self.initial_latent == Latent::Dead {
            return Err(Error::Config("initial latent must be a good state".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CombolockState {
    /// 0..H; level H is the terminal level reached after the last action.
    pub level: usize,
    pub latent: Latent,
}

/// Destination of an action from a good state before flipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Good(Latent),
    Dead,
}

#[derive(Debug, Clone)]
pub struct Combolock {
    config: CombolockConfig,
    /// `assignment[level][good][action]`.
    assignment: Vec<[[Dest; NUM_ACTIONS]; 2]>,
    /// Unlocking action for each good state of the last level.
    designated: [usize; 2],
    state: CombolockState,
    steps: usize,
}

impl Combolock {
    pub fn new(config: CombolockConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.env_seed);
        let mut assignment = Vec::with_capacity(config.horizon);
        for _ in 0..config.horizon {
            let mut level = [[Dest::Dead; NUM_ACTIONS]; 2];
            for row in level.iter_mut() {
                let mut perm = [0usize, 1, 2, 3];
                perm.shuffle(&mut rng);
                row[perm[0]] = Dest::Good(Latent::Good1);
                row[perm[1]] = Dest::Good(Latent::Good2);
            }
            assignment.push(level);
        }
        let last = &assignment[config.horizon - 1];
        let mut designated = [0; 2];
        for (k, d) in designated.iter_mut().enumerate() {
            let good: Vec<usize> = (0..NUM_ACTIONS)
                .filter(|&a| last[k][a] != Dest::Dead)
                .collect();
            *d = good[rng.gen_range(0..good.len())];
        }
        let state = CombolockState {
            level: 0,
            latent: config.initial_latent,
        };
        Ok(Self {
            config,
            assignment,
            designated,
            state,
            steps: 0,
        })
    }

    pub fn config(&self) -> &CombolockConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn assignment(&self, level: usize, good: Latent) -> Option<[Dest; NUM_ACTIONS]> {
        if good == Latent::Dead {
            return None;
        }
        self.assignment.get(level).map(|l| l[good.index()])
    }

    pub fn designated_action(&self, good: Latent) -> Option<usize> {
        (good != Latent::Dead).then(|| self.designated[good.index()])
    }

    pub fn initial_state(&self) -> CombolockState {
        CombolockState {
            level: 0,
            latent: self.config.initial_latent,
        }
    }

    pub fn state(&self) -> CombolockState {
        self.state
    }

    pub fn observation_dim(&self) -> usize {
        3 * self.config.horizon + self.config.noise_bits()
    }

    fn step_reward(&self, from: Latent, to: Latent, unlocked: bool) -> f64 {
        let h = self.config.horizon as f64;
        if self.config.antishaped {
            let shaping = match (from, to) {
                (Latent::Dead, _) => 0.0,
                (_, Latent::Dead) => DEAD_REWARD,
                _ => -1.0 / h,
            };
            if unlocked {
                if self.config.terminal_replaces_shaping {
                    UNLOCK_REWARD
                } else {
                    UNLOCK_REWARD + shaping
                }
            } else {
                shaping
            }
        } else if unlocked {
            UNLOCK_REWARD
        } else {
            0.0
        }
    }

    /// Exact successor distribution `(probability, next state, reward)`.
    pub fn outcomes(
        &self,
        s: CombolockState,
        action: usize,
    ) -> Result<Vec<(f64, CombolockState, f64)>> {
        let h = self.config.horizon;
        if s.level >= h {
            return Err(Error::EpisodeOver);
        }
        if action >= NUM_ACTIONS {
            return Err(Error::Index {
                what: "action",
                index: action,
                limit: NUM_ACTIONS,
            });
        }
        let level = s.level + 1;
        if s.latent == Latent::Dead {
            let next = CombolockState {
                level,
                latent: Latent::Dead,
            };
            return Ok(vec![(
                1.0,
                next,
                self.step_reward(Latent::Dead, Latent::Dead, false),
            )]);
        }
        let unlocked = s.level == h - 1 && self.designated[s.latent.index()] == action;
        match self.assignment[s.level][s.latent.index()][action] {
            Dest::Dead => {
                let next = CombolockState {
                    level,
                    latent: Latent::Dead,
                };
                Ok(vec![(
                    1.0,
                    next,
                    self.step_reward(s.latent, Latent::Dead, false),
                )])
            }
            Dest::Good(g) => {
                let other = if g == Latent::Good1 {
                    Latent::Good2
                } else {
                    Latent::Good1
                };
                let p = self.config.flip_prob;
                let r = self.step_reward(s.latent, g, unlocked);
                let mut out = vec![(1.0 - p, CombolockState { level, latent: g }, r)];
                if p > 0.0 {
                    out.push((
                        p,
                        CombolockState {
                            level,
                            latent: other,
                        },
                        r,
                    ));
                }
                Ok(out)
            }
        }
    }

    /// Samples one transition of the latent dynamics.
    pub fn step_state<R: Rng + ?Sized>(
        &self,
        s: CombolockState,
        action: usize,
        rng: &mut R,
    ) -> Result<(CombolockState, f64)> {
        let outs = self.outcomes(s, action)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(p, next, r) in &outs {
            acc += p;
            if u < acc {
                return Ok((next, r));
            }
        }
        let &(_, next, r) = outs.last().expect("outcomes are non-empty");
        Ok((next, r))
    }

    pub fn observe<R: Rng + ?Sized>(&self, s: CombolockState, rng: &mut R) -> Vec<f64> {
        let h = self.config.horizon;
        let mut obs = vec![0.0; self.observation_dim()];
        if s.level < h {
            obs[3 * s.level + s.latent.index()] = 1.0;
        }
        for bit in obs[3 * h..].iter_mut() {
            *bit = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
        obs
    }

    /// Recovers the latent state from the one-hot block; `None` for the
    /// terminal level.
    pub fn decode(&self, obs: &[f64]) -> Option<CombolockState> {
        let idx = obs[..3 * self.config.horizon]
            .iter()
            .position(|&x| x > 0.5)?;
        Some(CombolockState {
            level: idx / 3,
            latent: Latent::from_index(idx % 3),
        })
    }

    /// Latent tabular model: states `3·level + latent` for levels 0..H, then
    /// an unlocked terminal (`3H`) and a locked terminal (`3H + 1`), both
    /// absorbing. Rewards are divided by 5 so the unlocked terminal pays 1.
    /// Only the standard reward variant is expressible with state rewards.
    pub fn true_tabular_model(&self) -> Result<TabularMdp> {
        if self.config.antishaped {
            return Err(Error::Config(
                "the antishaped lock pays transition rewards and has no state-reward tabular model"
                    .into(),
            ));
        }
        let h = self.config.horizon;
        let n = 3 * h + 2;
        let (unlocked, locked) = (3 * h, 3 * h + 1);
        let mut rewards = vec![0.0; n];
        rewards[unlocked] = 1.0;
        let initial = InitialState::Index(self.config.initial_latent.index());
        TabularMdp::from_rows(
            n,
            NUM_ACTIONS,
            h,
            |s, a| {
                let mut row = vec![0.0; n];
                if s >= 3 * h {
                    row[s] = 1.0;
                    return row;
                }
                let state = CombolockState {
                    level: s / 3,
                    latent: Latent::from_index(s % 3),
                };
                for (p, next, r) in self.outcomes(state, a).expect("state and action in range") {
                    let idx = if next.level == h {
                        if r > 0.0 {
                            unlocked
                        } else {
                            locked
                        }
                    } else {
                        3 * next.level + next.latent.index()
                    };
                    row[idx] += p;
                }
                row
            },
            rewards,
            initial,
        )
    }

    /// Optimal closed-loop expected return from the initial state in raw
    /// reward units, by backward induction over the latent dynamics.
    pub fn optimal_value(&self) -> f64 {
        self.optimal_value_from(self.initial_state())
    }

    pub fn optimal_value_from(&self, s: CombolockState) -> f64 {
        let h = self.config.horizon;
        let mut v = vec![[0.0f64; 3]; h + 1];
        for level in (0..h).rev() {
            for k in 0..3 {
                let st = CombolockState {
                    level,
                    latent: Latent::from_index(k),
                };
                v[level][k] = (0..NUM_ACTIONS)
                    .map(|a| {
                        self.outcomes(st, a)
                            .expect("valid state")
                            .iter()
                            .map(|&(p, n, r)| p * (r + v[n.level][n.latent.index()]))
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        v[s.level.min(h)][s.latent.index()]
    }

    /// Greedy action of the optimal closed-loop policy at `s`.
    pub fn optimal_action(&self, s: CombolockState) -> Result<usize> {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..NUM_ACTIONS {
            let q: f64 = self
                .outcomes(s, a)?
                .iter()
                .map(|&(p, n, r)| {
                    let cont = if n.level < self.config.horizon {
                        self.optimal_value_from(n)
                    } else {
                        0.0
                    };
                    p * (r + cont)
                })
                .sum();
            if q > best.1 + 1e-12 {
                best = (a, q);
            }
        }
        Ok(best.0)
    }
}

impl Environment for Combolock {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn observation_dim(&self) -> usize {
        Combolock::observation_dim(self)
    }

    fn max_steps(&self) -> usize {
        self.config.horizon
    }

    fn steps_taken(&self) -> usize {
        self.steps
    }

    fn reset(&mut self, rng: &mut RunRng) -> Vec<f64> {
        self.state = self.initial_state();
        self.steps = 0;
        self.observe(self.state, rng)
    }

    fn step(&mut self, action: usize, rng: &mut RunRng) -> Result<StepOutcome> {
        let (next, reward) = self.step_state(self.state, action, rng)?;
        self.state = next;
        self.steps += 1;
        Ok(StepOutcome {
            observation: self.observe(next, rng),
            reward,
            done: next.level == self.config.horizon,
        })
    }
}

/// The exact environment dynamics used as a generative model over
/// observations; terminal observations map to themselves with reward 0.
impl StochasticModel for Combolock {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn sample(&self, obs: &[f64], action: usize, rng: &mut RunRng) -> (Vec<f64>, f64) {
        match self.decode(obs) {
            Some(s) => {
                let (next, r) = self
                    .step_state(s, action, rng)
                    .expect("decoded state is not terminal");
                (self.observe(next, rng), r)
            }
            None => {
                let terminal = CombolockState {
                    level: self.config.horizon,
                    latent: Latent::Dead,
                };
                (self.observe(terminal, rng), 0.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_assignment() {
        let a = Combolock::new(CombolockConfig::new(6)).unwrap();
        let b = Combolock::new(CombolockConfig::new(6)).unwrap();
        let mut c = CombolockConfig::new(6);
        c.env_seed = 99;
        let c = Combolock::new(c).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.designated, b.designated);
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn two_dead_actions_per_good_state() {
        for seed in 0..20 {
            let mut cfg = CombolockConfig::new(5);
            cfg.env_seed = seed;
            let env = Combolock::new(cfg).unwrap();
            for level in 0..5 {
                for g in [Latent::Good1, Latent::Good2] {
                    let row = env.assignment(level, g).unwrap();
                    assert_eq!(row.iter().filter(|d| **d == Dest::Dead).count(), 2);
                    assert!(row.contains(&Dest::Good(Latent::Good1)));
                    assert!(row.contains(&Dest::Good(Latent::Good2)));
                }
                let d = env.designated_action(Latent::Good1).unwrap();
                assert_ne!(env.assignment(4, Latent::Good1).unwrap()[d], Dest::Dead);
            }
        }
    }

    #[test]
    fn dead_is_absorbing() {
        let env = Combolock::new(CombolockConfig::new(4)).unwrap();
        let mut rng = seeded(0);
        for level in 0..4 {
            for a in 0..4 {
                let (n, r) = env
                    .step_state(
                        CombolockState {
                            level,
                            latent: Latent::Dead,
                        },
                        a,
                        &mut rng,
                    )
                    .unwrap();
                assert_eq!(n.latent, Latent::Dead);
                assert_eq!(r, 0.0);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = CombolockConfig::new(1);
        assert!(Combolock::new(c.clone()).is_err());
        c.horizon = 3;
        c.flip_prob = 0.5;
        assert!(Combolock::new(c).is_err());
    }

    #[test]
    fn noiseless_optimal_sequence_unlocks() {
        let mut cfg = CombolockConfig::new(6);
        cfg.flip_prob = 0.0;
        let mut env = Combolock::new(cfg).unwrap();
        let mut rng = seeded(1);
        env.reset(&mut rng);
        let mut total = 0.0;
        for _ in 0..6 {
            let a = env.optimal_action(env.state()).unwrap();
            let out = Environment::step(&mut env, a, &mut rng).unwrap();
            total += out.reward;
        }
        assert_eq!(total, UNLOCK_REWARD);
        assert!(matches!(
            Environment::step(&mut env, 0, &mut rng),
            Err(Error::EpisodeOver)
        ));
    }

    #[test]
    fn antishaped_early_death_pays_point_one() {
        let mut cfg = CombolockConfig::new(10);
        cfg.antishaped = true;
        let mut env = Combolock::new(cfg).unwrap();
        let mut rng = seeded(2);
        env.reset(&mut rng);
        let row = env.assignment(0, Latent::Good1).unwrap();
        let dead = row.iter().position(|d| *d == Dest::Dead).unwrap();
        let mut total = Environment::step(&mut env, dead, &mut rng).unwrap().reward;
        for _ in 1..10 {
            total += Environment::step(&mut env, 0, &mut rng).unwrap().reward;
        }
        assert!((total - 0.1).abs() < 1e-12);
        assert!((env.optimal_value() - (9.0 * -0.1 + 5.0)).abs() < 1e-12);
        assert!(env.true_tabular_model().is_err());
    }

    #[test]
    fn observation_layout() {
        let mut cfg = CombolockConfig::new(3);
        cfg.noise_bits = Some(0);
        let env = Combolock::new(cfg).unwrap();
        let mut rng = seeded(3);
        let s = CombolockState {
            level: 1,
            latent: Latent::Good2,
        };
        let o = env.observe(s, &mut rng);
        assert_eq!(o.len(), 9);
        assert_eq!(o.iter().sum::<f64>(), 1.0);
        assert_eq!(o[4], 1.0);
        assert_eq!(env.decode(&o), Some(s));
        let t = env.observe(
            CombolockState {
                level: 3,
                latent: Latent::Good1,
            },
            &mut rng,
        );
        assert!(t.iter().all(|&x| x == 0.0));
        assert_eq!(env.decode(&t), None);
    }

    #[test]
    fn noise_block_varies_one_hot_does_not() {
        let env = Combolock::new(CombolockConfig::new(4)).unwrap();
        let mut rng = seeded(4);
        let s = env.initial_state();
        let a = env.observe(s, &mut rng);
        let b = env.observe(s, &mut rng);
        assert_eq!(a[..12], b[..12]);
        let n = 10_000;
        let mut sums = vec![0.0; 4];
        for _ in 0..n {
            for (acc, x) in sums.iter_mut().zip(&env.observe(s, &mut rng)[12..]) {
                *acc += x;
            }
        }
        for s in sums {
            assert!((s / n as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn tabular_rows_and_deterministic_without_flip() {
        let mut cfg = CombolockConfig::new(3);
        cfg.flip_prob = 0.0;
        let m = Combolock::new(cfg).unwrap().true_tabular_model().unwrap();
        assert_eq!(m.num_states(), 11);
        for s in 0..11 {
            for a in 0..4 {
                assert!(m.row(s, a).iter().all(|&p| p == 0.0 || p == 1.0));
            }
        }
    }
}
