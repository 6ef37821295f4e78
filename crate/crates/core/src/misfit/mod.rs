//! Misfit and disagreement between tabular models.
//!
//! `W(π, M, h)` is the expected total variation (half the L1 distance)
//! between the one-step predictions of `M` and the truth, with states drawn
//! from the truth's roll-in distribution after `h - 1` steps of `π` and a
//! uniformly random last action. `D(π, M, M', h)` is the L1 distance between
//! the two models' joint predictions of (previous state, uniform action,
//! next state) under their own roll-ins.

pub mod mvee;
pub mod rank;

pub use mvee::{mvee_origin_centered, slab_shrink_ratio, volume_shrink_check, Ellipsoid};
pub use rank::{factor_matrix, low_rank_mdp_synthesize, Factorization, LowRankTransition};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mdp::{Policy, TabularMdp};

/// Candidate models sharing |S|, |A| and H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelClass {
    models: Vec<TabularMdp>,
    truth_index: Option<usize>,
}

impl ModelClass {
    pub fn new(models: Vec<TabularMdp>, truth_index: Option<usize>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Config("model class must not be empty".into()))?;
        if let Some(bad) = models.iter().position(|m| !m.compatible(first)) {
            return Err(Error::InvalidModel(format!(
                "model {bad} has incompatible dimensions"
            )));
        }
        if let Some(t) = truth_index {
            if t >= models.len() {
                return Err(Error::Index {
                    what: "truth index",
                    index: t,
                    limit: models.len(),
                });
            }
        }
        Ok(Self {
            models,
            truth_index,
        })
    }

    pub fn models(&self) -> &[TabularMdp] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn truth_index(&self) -> Option<usize> {
        self.truth_index
    }

    pub fn get(&self, i: usize) -> &TabularMdp {
        &self.models[i]
    }
}

fn check_compatible(a: &TabularMdp, b: &TabularMdp) -> Result<()> {
    if !a.compatible(b) {
        return Err(Error::InvalidModel(
            "models have different dimensions".into(),
        ));
    }
    Ok(())
}

fn check_step(model: &TabularMdp, h: usize) -> Result<()> {
    if h == 0 || h > model.horizon() {
        return Err(Error::Index {
            what: "step",
            index: h,
            limit: model.horizon() + 1,
        });
    }
    Ok(())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `E_{a~U(A)} TV(P_M(·|s,a), P*(·|s,a))` for every state.
pub fn per_state_tv(truth: &TabularMdp, model: &TabularMdp) -> Vec<f64> {
    let na = truth.num_actions() as f64;
    (0..truth.num_states())
        .map(|s| {
            (0..truth.num_actions())
                .map(|a| total_variation(model.row(s, a), truth.row(s, a)))
                .sum::<f64>()
                / na
        })
        .collect()
}

/// Exact misfit `W(π, M, h)` for 1 ≤ h ≤ H.
pub fn misfit_exact(
    truth: &TabularMdp,
    model: &TabularMdp,
    policy: &Policy,
    h: usize,
) -> Result<f64> {
    check_compatible(truth, model)?;
    check_step(truth, h)?;
    let d = truth.state_distribution(policy, h - 1)?;
    let tv = per_state_tv(truth, model);
    Ok(d.probs().iter().zip(&tv).map(|(p, t)| p * t).sum())
}

/// Exact misfits for h = 1..=H (index h - 1).
pub fn misfits_all_steps(
    truth: &TabularMdp,
    model: &TabularMdp,
    policy: &Policy,
) -> Result<Vec<f64>> {
    check_compatible(truth, model)?;
    let dists = truth.state_distributions(policy)?;
    let tv = per_state_tv(truth, model);
    Ok(dists[..truth.horizon()]
        .iter()
        .map(|d| d.probs().iter().zip(&tv).map(|(p, t)| p * t).sum())
        .collect())
}

/// Where a test function came from: the maximizer for `(policy, model, h)`
/// with the given sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFunctionTag {
    pub policy: usize,
    pub model: usize,
    pub h: usize,
    pub negated: bool,
}

/// Table `f(s, a, s')` with values in [−1, 1], laid out `[s][a][s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    num_states: usize,
    num_actions: usize,
    table: Vec<f64>,
    pub tag: TestFunctionTag,
}

impl TestFunction {
    /// `sign(P_M(s'|s,a) − P*(s'|s,a))`, with 0 where they agree.
    pub fn sign_of_difference(
        truth: &TabularMdp,
        model: &TabularMdp,
        tag: TestFunctionTag,
    ) -> Self {
        let (ns, na) = (truth.num_states(), truth.num_actions());
        let mut table = Vec::with_capacity(ns * na * ns);
        for s in 0..ns {
            for a in 0..na {
                for (pm, pt) in model.row(s, a).iter().zip(truth.row(s, a)) {
                    let d = pm - pt;
                    table.push(if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    });
                }
            }
        }
        Self {
            num_states: ns,
            num_actions: na,
            table,
            tag,
        }
    }

    pub fn from_table(
        num_states: usize,
        num_actions: usize,
        table: Vec<f64>,
        tag: TestFunctionTag,
    ) -> Result<Self> {
        if table.len() != num_states * num_actions * num_states {
            return Err(Error::SizeMismatch {
                expected: num_states * num_actions * num_states,
                got: table.len(),
            });
        }
        if table.iter().any(|x| x.abs() > 1.0) {
            return Err(Error::Config(
                "test function values must lie in [-1, 1]".into(),
            ));
        }
        Ok(Self {
            num_states,
            num_actions,
            table,
            tag,
        })
    }

    pub fn negated(&self) -> Self {
        let mut tag = self.tag;
        tag.negated = !tag.negated;
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            table: self.table.iter().map(|x| -x).collect(),
            tag,
        }
    }

    pub fn slice(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.table[start..start + self.num_states]
    }

    pub fn value(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.slice(s, a)[s2]
    }

    pub fn max_abs(&self) -> f64 {
        self.table.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// The finite test-function class: for every (π, M, h) the closed-form
/// maximizer and its negation. The maximizer does not depend on π or h, so
/// duplicates are dropped and each function keeps the tag of its first
/// occurrence; the result never exceeds `2·|Π|·|M|·H` entries.
pub fn build_test_functions(
    num_policies: usize,
    class: &ModelClass,
    truth: &TabularMdp,
) -> Result<Vec<TestFunction>> {
    let mut out = Vec::new();
    if num_policies == 0 {
        return Ok(out);
    }
    for (mi, m) in class.models().iter().enumerate() {
        check_compatible(truth, m)?;
        let f = TestFunction::sign_of_difference(
            truth,
            m,
            TestFunctionTag {
                policy: 0,
                model: mi,
                h: 1,
                negated: false,
            },
        );
        if out.iter().any(|g: &TestFunction| g.table == f.table) {
            continue;
        }
        out.push(f.negated());
        out.push(f);
    }
    Ok(out)
}

/// `½ · E_{s~P*^{π,h−1}, a~U} [E_{P_M(·|s,a)} f − E_{P*(·|s,a)} f]`.
pub fn ipm_objective(
    truth: &TabularMdp,
    model: &TabularMdp,
    policy: &Policy,
    h: usize,
    f: &TestFunction,
) -> Result<f64> {
    check_compatible(truth, model)?;
    check_step(truth, h)?;
    let d = truth.state_distribution(policy, h - 1)?;
    let na = truth.num_actions() as f64;
    let mut acc = 0.0;
    for (s, &p) in d.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for a in 0..truth.num_actions() {
            let fs = f.slice(s, a);
            let diff: f64 = model
                .row(s, a)
                .iter()
                .zip(truth.row(s, a))
                .zip(fs)
                .map(|((pm, pt), fv)| (pm - pt) * fv)
                .sum();
            acc += p * diff / na;
        }
    }
    Ok(0.5 * acc)
}

/// One `(s_{h−1}, a_{h−1}, s_h)` sample of the misfit data scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisfitSample {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

/// Rolls in with `π` for `h − 1` steps on the truth, then takes a uniformly
/// random action; repeated `n` times.
pub fn collect_misfit_data<R: Rng + ?Sized>(
    truth: &TabularMdp,
    policy: &Policy,
    h: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<MisfitSample>> {
    check_step(truth, h)?;
    (0..n)
        .map(|_| {
            let mut s = truth.sample_initial(rng);
            for t in 1..h {
                let a = policy.action(t, s)?;
                s = truth.step(s, a, rng)?.0;
            }
            let a = rng.gen_range(0..truth.num_actions());
            let next = truth.step(s, a, rng)?.0;
            Ok(MisfitSample {
                state: s,
                action: a,
                next_state: next,
            })
        })
        .collect()
}

/// Empirical misfit `W̃ = max_f ½·(1/n)·Σ_i [E_{P_M(·|s_i,a_i)} f − f(s_i,a_i,s'_i)]`.
pub fn misfit_empirical(
    data: &[MisfitSample],
    model: &TabularMdp,
    test_functions: &[TestFunction],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData(
            "empirical misfit needs at least one sample".into(),
        ));
    }
    if test_functions.is_empty() {
        return Err(Error::InsufficientData(
            "empirical misfit needs at least one test function".into(),
        ));
    }
    let n = data.len() as f64;
    let mut best = f64::NEG_INFINITY;
    for f in test_functions {
        let mut acc = 0.0;
        for z in data {
            let fs = f.slice(z.state, z.action);
            let model_side: f64 = model
                .row(z.state, z.action)
                .iter()
                .zip(fs)
                .map(|(p, v)| p * v)
                .sum();
            acc += model_side - fs[z.next_state];
        }
        best = best.max(0.5 * acc / n);
    }
    Ok(best)
}

/// The deviation bound `4·ln(2|M||Π|H/δ)/(3n) + 4·√(2·ln(2|M||Π|H/δ)/n)`.
pub fn deviation_bound(
    num_models: usize,
    num_policies: usize,
    horizon: usize,
    delta: f64,
    n: usize,
) -> f64 {
    let l = (2.0 * num_models as f64 * num_policies as f64 * horizon as f64 / delta).ln();
    let n = n as f64;
    4.0 * l / (3.0 * n) + 4.0 * (2.0 * l / n).sqrt()
}

/// `D(π, M, M', h)`.
pub fn disagreement(a: &TabularMdp, b: &TabularMdp, policy: &Policy, h: usize) -> Result<f64> {
    check_compatible(a, b)?;
    check_step(a, h)?;
    let da = a.state_distribution(policy, h - 1)?;
    let db = b.state_distribution(policy, h - 1)?;
    Ok(disagreement_from(a, b, da.probs(), db.probs()))
}

/// `D` from precomputed roll-in distributions `da`, `db` (step h − 1).
pub fn disagreement_from(a: &TabularMdp, b: &TabularMdp, da: &[f64], db: &[f64]) -> f64 {
    let na = a.num_actions();
    let mut acc = 0.0;
    for s in 0..a.num_states() {
        for act in 0..na {
            acc += a
                .row(s, act)
                .iter()
                .zip(b.row(s, act))
                .map(|(pa, pb)| (pa * da[s] - pb * db[s]).abs())
                .sum::<f64>();
        }
    }
    acc / na as f64
}

/// `Σ_{h=1}^{H} D(π, M, M', h)` with per-step terms.
pub fn disagreement_all_steps(a: &TabularMdp, b: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    check_compatible(a, b)?;
    let da = a.state_distributions(policy)?;
    let db = b.state_distributions(policy)?;
    Ok((0..a.horizon())
        .map(|t| disagreement_from(a, b, da[t].probs(), db[t].probs()))
        .collect())
}

/// `max_{M, M'} Σ_h D(π, M, M', h)` over unordered pairs; 0 for one model.
pub fn v_explore(policy: &Policy, models: &[&TabularMdp]) -> Result<f64> {
    let mut best = 0.0f64;
    for i in 0..models.len() {
        for j in (i + 1)..models.len() {
            best = best.max(
                disagreement_all_steps(models[i], models[j], policy)?
                    .iter()
                    .sum(),
            );
        }
    }
    Ok(best)
}

/// `v_exploit(π, M) = Σ_h ⟨P_M^{π,h}, R⟩`.
pub fn v_exploit(policy: &Policy, model: &TabularMdp, rewards: &[f64]) -> Result<f64> {
    model.policy_value(policy, rewards)
}

/// `A_h(π, M) = W(π, M, h)` for all policies and models.
#[derive(Debug, Clone, PartialEq)]
pub struct MisfitMatrix {
    pub h: usize,
    pub values: Matrix,
}

pub fn misfit_matrix(
    policies: &[Policy],
    class: &ModelClass,
    truth: &TabularMdp,
    h: usize,
) -> Result<MisfitMatrix> {
    check_step(truth, h)?;
    let tvs: Vec<Vec<f64>> = class
        .models()
        .iter()
        .map(|m| check_compatible(truth, m).map(|_| per_state_tv(truth, m)))
        .collect::<Result<_>>()?;
    let mut values = Matrix::zeros(policies.len(), class.len());
    for (i, p) in policies.iter().enumerate() {
        let d = truth.state_distribution(p, h - 1)?;
        for (j, tv) in tvs.iter().enumerate() {
            values[(i, j)] = d.probs().iter().zip(tv).map(|(a, b)| a * b).sum();
        }
    }
    Ok(MisfitMatrix { h, values })
}
