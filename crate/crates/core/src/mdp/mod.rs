//! Finite-horizon tabular MDPs, policies, exact distribution propagation and
//! trajectory collection.
//!
//! Step indices count transitions. `state_distribution(π, 0)` is the initial
//! distribution and `state_distribution(π, h)` the distribution after `h`
//! actions. The action at step `h` (1-based) is chosen in the state reached
//! after `h - 1` transitions, and its reward is `R(next_state)`.

mod buffer;

pub use buffer::ReplayBuffer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sample_categorical;

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialState {
    Index(usize),
    Distribution(Vec<f64>),
}

/// Explicit finite-horizon model with stationary transitions and state
/// rewards in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularMdpDoc", into = "TabularMdpDoc")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    initial: InitialState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularMdpDoc {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<f64>,
    initial: InitialState,
}

impl TryFrom<TabularMdpDoc> for TabularMdp {
    type Error = Error;
    fn try_from(d: TabularMdpDoc) -> Result<Self> {
        if d.transitions.len() != d.num_states {
            return Err(Error::SizeMismatch {
                expected: d.num_states,
                got: d.transitions.len(),
            });
        }
        let mut flat = Vec::with_capacity(d.num_states * d.num_actions * d.num_states);
        for per_action in &d.transitions {
            if per_action.len() != d.num_actions {
                return Err(Error::SizeMismatch {
                    expected: d.num_actions,
                    got: per_action.len(),
                });
            }
            for row in per_action {
                if row.len() != d.num_states {
                    return Err(Error::SizeMismatch {
                        expected: d.num_states,
                        got: row.len(),
                    });
                }
                flat.extend_from_slice(row);
            }
        }
        TabularMdp::from_flat(
            d.num_states,
            d.num_actions,
            d.horizon,
            flat,
            d.rewards,
            d.initial,
        )
    }
}

impl From<TabularMdp> for TabularMdpDoc {
    fn from(m: TabularMdp) -> Self {
        let transitions = (0..m.num_states)
            .map(|s| (0..m.num_actions).map(|a| m.row(s, a).to_vec()).collect())
            .collect();
        Self {
            num_states: m.num_states,
            num_actions: m.num_actions,
            horizon: m.horizon,
            transitions,
            rewards: m.rewards,
            initial: m.initial,
        }
    }
}

fn validate_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidModel(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidModel(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl TabularMdp {
    /// Builds a model from a flat `[s][a][s']` transition tensor.
    pub fn from_flat(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: InitialState,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::InvalidModel(
                "num_states, num_actions and horizon must be positive".into(),
            ));
        }
        let expected = num_states * num_actions * num_states;
        if transitions.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                got: transitions.len(),
            });
        }
        if rewards.len() != num_states {
            return Err(Error::SizeMismatch {
                expected: num_states,
                got: rewards.len(),
            });
        }
        if rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidModel("rewards must lie in [0, 1]".into()));
        }
        for (k, row) in transitions.chunks(num_states).enumerate() {
            validate_distribution(
                row,
                &format!(
                    "transition row (s={}, a={})",
                    k / num_actions,
                    k % num_actions
                ),
            )?;
        }
        match &initial {
            InitialState::Index(i) if *i >= num_states => {
                return Err(Error::Index {
                    what: "initial state",
                    index: *i,
                    limit: num_states,
                })
            }
            InitialState::Distribution(p) => {
                if p.len() != num_states {
                    return Err(Error::SizeMismatch {
                        expected: num_states,
                        got: p.len(),
                    });
                }
                validate_distribution(p, "initial distribution")?;
            }
            _ => {}
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            transitions,
            rewards,
            initial,
        })
    }

    /// Builds a model from a closure giving each transition row.
    pub fn from_rows(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mut row: impl FnMut(usize, usize) -> Vec<f64>,
        rewards: Vec<f64>,
        initial: InitialState,
    ) -> Result<Self> {
        let mut flat = Vec::with_capacity(num_states * num_actions * num_states);
        for s in 0..num_states {
            for a in 0..num_actions {
                let r = row(s, a);
                if r.len() != num_states {
                    return Err(Error::SizeMismatch {
                        expected: num_states,
                        got: r.len(),
                    });
                }
                flat.extend(r);
            }
        }
        Self::from_flat(num_states, num_actions, horizon, flat, rewards, initial)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn initial(&self) -> &InitialState {
        &self.initial
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        Self::from_flat(
            self.num_states,
            self.num_actions,
            self.horizon,
            self.transitions.clone(),
            rewards,
            self.initial.clone(),
        )
    }

    /// True when both models share |S|, |A| and H.
    pub fn compatible(&self, other: &TabularMdp) -> bool {
        self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.horizon == other.horizon
    }

    pub fn initial_distribution(&self) -> Distribution {
        match &self.initial {
            InitialState::Index(i) => {
                let mut p = vec![0.0; self.num_states];
                p[*i] = 1.0;
                Distribution(p)
            }
            InitialState::Distribution(p) => Distribution(p.clone()),
        }
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::Index {
                what: "state",
                index: s,
                limit: self.num_states,
            });
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.num_actions {
            return Err(Error::Index {
                what: "action",
                index: a,
                limit: self.num_actions,
            });
        }
        Ok(())
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.initial {
            InitialState::Index(i) => *i,
            InitialState::Distribution(p) => sample_categorical(p, rng),
        }
    }

    /// Samples a successor and returns it with its state reward.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
        self.check_state(s)?;
        self.check_action(a)?;
        let next = sample_categorical(self.row(s, a), rng);
        Ok((next, self.rewards[next]))
    }

    /// One episode of exactly H steps under `policy`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        policy: &Policy,
        seed: u64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut s = self.sample_initial(rng);
        let mut steps = Vec::with_capacity(self.horizon);
        for h in 1..=self.horizon {
            let a = policy.action(h, s)?;
            let (next, r) = self.step(s, a, rng)?;
            steps.push(Transition {
                h,
                state: s,
                action: a,
                reward: r,
                next_state: next,
                terminal: h == self.horizon,
            });
            s = next;
        }
        Ok(Trajectory { steps, seed })
    }

    /// Pushes a distribution one step forward under the action rule `act`.
    pub fn propagate(
        &self,
        dist: &[f64],
        mut act: impl FnMut(usize) -> Result<usize>,
    ) -> Result<Distribution> {
        let mut out = vec![0.0; self.num_states];
        for (s, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let a = act(s)?;
            self.check_action(a)?;
            for (o, &t) in out.iter_mut().zip(self.row(s, a)) {
                *o += p * t;
            }
        }
        Ok(Distribution(out))
    }

    /// Distribution over states after `h` transitions (h = 0 is the initial
    /// distribution).
    pub fn state_distribution(&self, policy: &Policy, h: usize) -> Result<Distribution> {
        if h > self.horizon {
            return Err(Error::Index {
                what: "step",
                index: h,
                limit: self.horizon + 1,
            });
        }
        let mut d = self.initial_distribution();
        for t in 1..=h {
            d = self.propagate(&d.0, |s| policy.action(t, s))?;
        }
        Ok(d)
    }

    /// All distributions for h = 0..=H.
    pub fn state_distributions(&self, policy: &Policy) -> Result<Vec<Distribution>> {
        let mut out = Vec::with_capacity(self.horizon + 1);
        out.push(self.initial_distribution());
        for t in 1..=self.horizon {
            let next = self.propagate(&out[t - 1].0, |s| policy.action(t, s))?;
            out.push(next);
        }
        Ok(out)
    }

    /// `Σ_{h=1}^{H} ⟨P^{π,h}, R⟩` for the supplied reward vector.
    pub fn policy_value(&self, policy: &Policy, rewards: &[f64]) -> Result<f64> {
        if rewards.len() != self.num_states {
            return Err(Error::SizeMismatch {
                expected: self.num_states,
                got: rewards.len(),
            });
        }
        let dists = self.state_distributions(policy)?;
        Ok(dists[1..]
            .iter()
            .map(|d| d.0.iter().zip(rewards).map(|(p, r)| p * r).sum::<f64>())
            .sum())
    }

    /// Backward induction; returns the optimal closed-loop policy and its
    /// value from the initial distribution. Ties pick the lowest action.
    pub fn optimal_policy(&self, rewards: &[f64]) -> Result<(Policy, f64)> {
        if rewards.len() != self.num_states {
            return Err(Error::SizeMismatch {
                expected: self.num_states,
                got: rewards.len(),
            });
        }
        let mut v = vec![0.0; self.num_states];
        let mut table = vec![vec![0usize; self.num_states]; self.horizon];
        for h in (1..=self.horizon).rev() {
            let mut nv = vec![0.0; self.num_states];
            for s in 0..self.num_states {
                let mut best = f64::NEG_INFINITY;
                for a in 0..self.num_actions {
                    let q: f64 = self
                        .row(s, a)
                        .iter()
                        .enumerate()
                        .map(|(s2, p)| p * (rewards[s2] + v[s2]))
                        .sum();
                    if q > best + 1e-12 {
                        best = q;
                        table[h - 1][s] = a;
                    }
                }
                nv[s] = best;
            }
            v = nv;
        }
        let init = self.initial_distribution();
        let value = init.0.iter().zip(&v).map(|(p, x)| p * x).sum();
        Ok((Policy::TabularDet(table), value))
    }
}

/// Probability vector over states.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_distribution(&probs, "distribution")?;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Deterministic policies. Step indices passed to [`Policy::action`] are
/// 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// `table[h - 1][s]` is the action at step h in state s.
    TabularDet(Vec<Vec<usize>>),
    /// Action sequence indexed by step, regardless of state.
    OpenLoop(Vec<usize>),
    /// Greedy with respect to a tabular Q-function `q[h - 1][s][a]`.
    Greedy(Vec<Vec<Vec<f64>>>),
}

impl Policy {
    pub fn action(&self, h: usize, s: usize) -> Result<usize> {
        let undefined = || Error::Config(format!("policy undefined at step {h}, state {s}"));
        if h == 0 {
            return Err(undefined());
        }
        match self {
            Policy::TabularDet(t) => t
                .get(h - 1)
                .and_then(|r| r.get(s))
                .copied()
                .ok_or_else(undefined),
            Policy::OpenLoop(seq) => seq.get(h - 1).copied().ok_or_else(undefined),
            Policy::Greedy(q) => {
                let row = q.get(h - 1).and_then(|r| r.get(s)).ok_or_else(undefined)?;
                argmax(row).ok_or_else(undefined)
            }
        }
    }

    /// Every open-loop sequence of length `horizon` over `num_actions`
    /// actions, in lexicographic order.
    pub fn all_open_loop(num_actions: usize, horizon: usize) -> Vec<Policy> {
        let total = num_actions.pow(horizon as u32);
        (0..total)
            .map(|mut code| {
                let mut seq = vec![0; horizon];
                for slot in seq.iter_mut().rev() {
                    *slot = code % num_actions;
                    code /= num_actions;
                }
                Policy::OpenLoop(seq)
            })
            .collect()
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<S = usize> {
    pub h: usize,
    pub state: S,
    pub action: usize,
    pub reward: f64,
    pub next_state: S,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S = usize> {
    pub steps: Vec<Transition<S>>,
    pub seed: u64,
}

impl<S> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}
