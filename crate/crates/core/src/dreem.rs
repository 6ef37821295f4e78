//! Version-space elimination over a finite class of tabular models.
//!
//! Each round picks the policy on which the surviving models disagree most.
//! If that disagreement is large, data is gathered with the policy and every
//! model whose misfit exceeds φ at some step is discarded; otherwise the
//! loop stops and plans in any surviving model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Distribution, InitialState, Policy, TabularMdp};
use crate::misfit::{
    build_test_functions, collect_misfit_data, disagreement_from, misfit_empirical,
    misfits_all_steps, MisfitSample, ModelClass, TestFunction,
};
use crate::planners::exhaustive_search;
use crate::rng::random_simplex;

/// One exploration round of the elimination loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub explore_policy: usize,
    pub v_explore: f64,
    /// `(model index, max_h misfit)` for every model alive at round start.
    pub misfits: Vec<(usize, f64)>,
    pub eliminated: Vec<usize>,
    pub surviving: usize,
}

/// How exploration samples are gathered in empirical mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataScheme {
    /// `n` roll-ins for every step h, each ending in a uniform action.
    #[default]
    PerStep,
    /// `n` roll-ins per round, each at a uniformly drawn step.
    UniformStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreemConfig {
    pub epsilon: f64,
    pub phi: f64,
    pub n: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub d_override: Option<usize>,
    #[serde(default = "default_scale")]
    pub sample_scale: f64,
    #[serde(default = "default_oracle")]
    pub oracle_misfit: bool,
    /// Defaults to ten times the number of models.
    #[serde(default)]
    pub round_cap: Option<usize>,
    #[serde(default)]
    pub data_scheme: DataScheme,
}

fn default_delta() -> f64 {
    0.1
}

fn default_scale() -> f64 {
    1.0
}

fn default_oracle() -> bool {
    true
}

impl DreemConfig {
    pub fn new(epsilon: f64, phi: f64, n: usize) -> Self {
        Self {
            epsilon,
            phi,
            n,
            delta: default_delta(),
            d_override: None,
            sample_scale: default_scale(),
            oracle_misfit: default_oracle(),
            round_cap: None,
            data_scheme: DataScheme::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon {} must lie in (0, 1]",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!(
                "delta {} must lie in (0, 1]",
                self.delta
            )));
        }
        if self.phi.is_nan() || self.phi <= 0.0 {
            return Err(Error::Config(format!("phi {} must be positive", self.phi)));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.sample_scale.is_nan() || self.sample_scale <= 0.0 {
            return Err(Error::Config("sample_scale must be positive".into()));
        }
        if self.d_override == Some(0) {
            return Err(Error::Config("d_override must be positive".into()));
        }
        Ok(())
    }
}

/// The surviving model indices and the per-round history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSpace {
    pub surviving: Vec<usize>,
    pub history: Vec<RoundRecord>,
}

impl VersionSpace {
    pub fn full(class: &ModelClass) -> Self {
        Self {
            surviving: (0..class.len()).collect(),
            history: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.surviving.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surviving.is_empty()
    }
}

/// Evidence for one elimination step.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    /// Exact misfits against the true model.
    Oracle(&'a TabularMdp),
    /// `samples[h - 1]` holds the data for step h.
    Empirical {
        samples: &'a [Vec<MisfitSample>],
        test_functions: &'a [TestFunction],
    },
}

/// Removes every surviving model whose misfit under `policy` exceeds `phi`
/// at some step with data, and appends the round to the history.
pub fn update_model_set(
    version_space: &mut VersionSpace,
    class: &ModelClass,
    policy_index: usize,
    policy: &Policy,
    v_explore: f64,
    evidence: Evidence<'_>,
    phi: f64,
) -> Result<()> {
    let mut misfits = Vec::with_capacity(version_space.len());
    let mut keep = Vec::new();
    let mut eliminated = Vec::new();
    for &m in &version_space.surviving {
        let model = class.get(m);
        let worst = match evidence {
            Evidence::Oracle(truth) => misfits_all_steps(truth, model, policy)?
                .into_iter()
                .fold(0.0, f64::max),
            Evidence::Empirical {
                samples,
                test_functions,
            } => {
                let mut worst = f64::NEG_INFINITY;
                for data in samples.iter().filter(|d| !d.is_empty()) {
                    worst = worst.max(misfit_empirical(data, model, test_functions)?);
                }
                worst
            }
        };
        misfits.push((m, worst));
        if worst > phi {
            eliminated.push(m);
        } else {
            keep.push(m);
        }
    }
    version_space.surviving = keep;
    version_space.history.push(RoundRecord {
        round: version_space.history.len() + 1,
        explore_policy: policy_index,
        v_explore,
        misfits,
        eliminated,
        surviving: version_space.surviving.len(),
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreemResult {
    pub exploit_policy_index: usize,
    pub exploit_policy: Policy,
    /// The surviving model the exploit policy was planned in.
    pub exploit_model: usize,
    pub rounds: usize,
    pub trajectories_used: usize,
    pub final_versionspace_size: usize,
    pub surviving: Vec<usize>,
    /// Value of the exploit policy in the true model.
    pub exploit_value: f64,
    pub optimal_value: f64,
    pub value_gap: Option<f64>,
    pub round_cap: usize,
    /// Set when the loop hit `round_cap` while still exploring.
    pub cap_exceeded: bool,
    pub history: Vec<RoundRecord>,
}

enum Halt {
    Exploit,
    CapReached,
}

/// Runs the explore/eliminate loop against the true model `env`, using its
/// reward vector for planning.
pub fn dreem_run<R: Rng + ?Sized>(
    class: &ModelClass,
    policies: &[Policy],
    env: &TabularMdp,
    config: &DreemConfig,
    rng: &mut R,
) -> Result<DreemResult> {
    let cap = config.round_cap.unwrap_or(10 * class.len().max(1));
    let (result, halt) = run_capped(class, policies, env, config, cap, rng)?;
    if let Halt::CapReached = halt {
        log::warn!(
            "elimination loop reached its round cap of {cap} with {} models left",
            result.final_versionspace_size
        );
    }
    Ok(result)
}

fn run_capped<R: Rng + ?Sized>(
    class: &ModelClass,
    policies: &[Policy],
    env: &TabularMdp,
    config: &DreemConfig,
    cap: usize,
    rng: &mut R,
) -> Result<(DreemResult, Halt)> {
    config.validate()?;
    if policies.is_empty() {
        return Err(Error::Config("policy class must not be empty".into()));
    }
    if let Some(bad) = class.models().iter().position(|m| !m.compatible(env)) {
        return Err(Error::InvalidModel(format!(
            "model {bad} does not match the environment's dimensions"
        )));
    }
    let horizon = env.horizon();
    let num_actions = env.num_actions() as f64;
    let dists: Vec<Vec<Vec<Distribution>>> = class
        .models()
        .iter()
        .map(|m| {
            policies
                .iter()
                .map(|p| m.state_distributions(p))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let test_functions = if config.oracle_misfit {
        Vec::new()
    } else {
        build_test_functions(policies.len(), class, env)?
    };
    let per_round = match config.data_scheme {
        DataScheme::PerStep => config.n * horizon,
        DataScheme::UniformStep => config.n,
    };

    let mut vs = VersionSpace::full(class);
    let mut halt = Halt::Exploit;
    loop {
        let surviving = vs.surviving.clone();
        let (pi, v) = exhaustive_search(&(0..policies.len()).collect::<Vec<_>>(), |&p| {
            let mut best = 0.0f64;
            for (x, &i) in surviving.iter().enumerate() {
                for &j in &surviving[x + 1..] {
                    let total: f64 = (0..horizon)
                        .map(|t| {
                            disagreement_from(
                                class.get(i),
                                class.get(j),
                                dists[i][p][t].probs(),
                                dists[j][p][t].probs(),
                            )
                        })
                        .sum();
                    best = best.max(total);
                }
            }
            Ok(best)
        })?;
        if v <= config.epsilon / num_actions {
            break;
        }
        if vs.history.len() >= cap {
            halt = Halt::CapReached;
            break;
        }
        let policy = &policies[pi];
        if config.oracle_misfit {
            update_model_set(
                &mut vs,
                class,
                pi,
                policy,
                v,
                Evidence::Oracle(env),
                config.phi,
            )?;
        } else {
            let samples = gather(env, policy, config, rng)?;
            let evidence = Evidence::Empirical {
                samples: &samples,
                test_functions: &test_functions,
            };
            update_model_set(&mut vs, class, pi, policy, v, evidence, config.phi)?;
        }
        if vs.is_empty() {
            return Err(Error::EliminationFailure {
                history: vs.history,
            });
        }
    }

    let chosen = vs.surviving[0];
    let (exploit_index, _) = exhaustive_search(policies, |p| {
        class.get(chosen).policy_value(p, env.rewards())
    })?;
    let exploit_value = env.policy_value(&policies[exploit_index], env.rewards())?;
    let (_, optimal_value) = env.optimal_policy(env.rewards())?;
    let rounds = vs.history.len();
    let result = DreemResult {
        exploit_policy_index: exploit_index,
        exploit_policy: policies[exploit_index].clone(),
        exploit_model: chosen,
        rounds,
        trajectories_used: rounds * per_round,
        final_versionspace_size: vs.len(),
        surviving: vs.surviving,
        exploit_value,
        optimal_value,
        value_gap: Some(optimal_value - exploit_value),
        round_cap: cap,
        cap_exceeded: matches!(halt, Halt::CapReached),
        history: vs.history,
    };
    Ok((result, halt))
}

fn gather<R: Rng + ?Sized>(
    env: &TabularMdp,
    policy: &Policy,
    config: &DreemConfig,
    rng: &mut R,
) -> Result<Vec<Vec<MisfitSample>>> {
    let horizon = env.horizon();
    match config.data_scheme {
        DataScheme::PerStep => (1..=horizon)
            .map(|h| collect_misfit_data(env, policy, h, config.n, rng))
            .collect(),
        DataScheme::UniformStep => {
            let mut out = vec![Vec::new(); horizon];
            for _ in 0..config.n {
                let h = rng.gen_range(1..=horizon);
                out[h - 1].extend(collect_misfit_data(env, policy, h, 1, rng)?);
            }
            Ok(out)
        }
    }
}

/// φ, n and the round budget T for given problem sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalParameters {
    pub phi: f64,
    pub n: u64,
    pub t: f64,
}

/// `φ = ε/(24H²|A|²√d)`, `T = H·d·ln(β/(2φ))/ln(5/3)` and
/// `n = ⌈36864·H⁴|A|⁴·d·ln(4TH|M||Π|/δ)/ε²⌉`.
#[allow(clippy::too_many_arguments)]
pub fn theoretical_parameters(
    num_actions: usize,
    horizon: usize,
    epsilon: f64,
    delta: f64,
    d: usize,
    beta: f64,
    model_count: usize,
    policy_count: usize,
) -> Result<TheoreticalParameters> {
    if num_actions == 0 || horizon == 0 || d == 0 || model_count == 0 || policy_count == 0 {
        return Err(Error::Config("sizes must be positive".into()));
    }
    if !(epsilon > 0.0 && delta > 0.0 && beta > 0.0) {
        return Err(Error::Config(
            "epsilon, delta and beta must be positive".into(),
        ));
    }
    let (h, a, df) = (horizon as f64, num_actions as f64, d as f64);
    let phi = epsilon / (24.0 * h * h * a * a * df.sqrt());
    if beta <= 2.0 * phi {
        return Err(Error::NonPositiveRounds {
            beta,
            two_phi: 2.0 * phi,
        });
    }
    let t = h * df * (beta / (2.0 * phi)).ln() / (5.0f64 / 3.0).ln();
    let log_term = (4.0 * t * h * model_count as f64 * policy_count as f64 / delta).ln();
    let n = (36864.0 * h.powi(4) * a.powi(4) * df * log_term / (epsilon * epsilon)).ceil() as u64;
    Ok(TheoreticalParameters { phi, n, t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingResult {
    pub result: DreemResult,
    pub outer_iterations: usize,
    /// The rank guess `2^i` of the successful iteration.
    pub d: usize,
}

/// Runs the elimination loop with rank guesses `d_i = 2^i` and failure
/// budgets `δ/(i(i+1))` until a run halts within its round budget.
#[allow(clippy::too_many_arguments)]
pub fn doubling_run<R: Rng + ?Sized>(
    class: &ModelClass,
    policies: &[Policy],
    env: &TabularMdp,
    epsilon: f64,
    delta: f64,
    beta: f64,
    sample_scale: f64,
    oracle_misfit: bool,
    max_outer: usize,
    rng: &mut R,
) -> Result<DoublingResult> {
    for i in 1..=max_outer {
        let d = 1usize << i.min(62);
        let delta_i = delta / (i * (i + 1)) as f64;
        let params = theoretical_parameters(
            env.num_actions(),
            env.horizon(),
            epsilon,
            delta_i,
            d,
            beta,
            class.len(),
            policies.len(),
        )?;
        let n = ((params.n as f64 * sample_scale).ceil() as usize).max(1);
        let config = DreemConfig {
            epsilon,
            phi: params.phi,
            n,
            delta: delta_i,
            d_override: Some(d),
            sample_scale,
            oracle_misfit,
            round_cap: Some(params.t.floor() as usize),
            data_scheme: DataScheme::PerStep,
        };
        let cap = params.t.floor() as usize;
        match run_capped(class, policies, env, &config, cap, rng) {
            Ok((result, Halt::Exploit)) => {
                return Ok(DoublingResult {
                    result,
                    outer_iterations: i,
                    d,
                })
            }
            Ok((_, Halt::CapReached)) | Err(Error::EliminationFailure { .. }) => {
                log::info!("rank guess {d} did not halt within {cap} rounds");
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoConvergence {
        iterations: max_outer,
    })
}

/// Copy of `truth` with `rows` randomly chosen non-absorbing `(s, a)` rows
/// replaced by `(1 − strength)·row + strength·q` for a random distribution
/// `q`. Rewards and the initial state are kept.
pub fn perturb_model<R: Rng + ?Sized>(
    truth: &TabularMdp,
    rows: usize,
    strength: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!(
            "perturbation strength {strength} must lie in [0, 1]"
        )));
    }
    let (ns, na) = (truth.num_states(), truth.num_actions());
    let candidates: Vec<(usize, usize)> = (0..ns)
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .filter(|&(s, a)| truth.row(s, a)[s] < 1.0)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidModel(
            "every transition is absorbing; nothing to perturb".into(),
        ));
    }
    let picked: Vec<(usize, usize)> =
        rand::seq::index::sample(rng, candidates.len(), rows.min(candidates.len()))
            .into_iter()
            .map(|k| candidates[k])
            .collect();
    let mut noise = std::collections::HashMap::new();
    for &sa in &picked {
        noise.insert(sa, random_simplex(ns, rng));
    }
    let initial: InitialState = truth.initial().clone();
    TabularMdp::from_rows(
        ns,
        na,
        truth.horizon(),
        |s, a| {
            let row = truth.row(s, a);
            match noise.get(&(s, a)) {
                Some(q) => row
                    .iter()
                    .zip(q)
                    .map(|(p, x)| (1.0 - strength) * p + strength * x)
                    .collect(),
                None => row.to_vec(),
            }
        },
        truth.rewards().to_vec(),
        initial,
    )
}

/// `truth` at index 0 followed by `count` perturbations, each altering
/// between 1 and `max_rows` rows with strength drawn from `[0.2, 1]`.
pub fn perturbed_class<R: Rng + ?Sized>(
    truth: &TabularMdp,
    count: usize,
    max_rows: usize,
    rng: &mut R,
) -> Result<ModelClass> {
    let mut models = vec![truth.clone()];
    for _ in 0..count {
        let rows = rng.gen_range(1..=max_rows.max(1));
        let strength = rng.gen_range(0.2..=1.0);
        models.push(perturb_model(truth, rows, strength, rng)?);
    }
    ModelClass::new(models, Some(0))
}

/// Every open-loop sequence plus the optimal policy of each model in the
/// class under `rewards`, so the class contains an optimal policy for the
/// truth whenever the truth is in the model class.
pub fn open_loop_plus_optimal(class: &ModelClass, rewards: &[f64]) -> Result<Vec<Policy>> {
    let first = class.get(0);
    let mut out = Policy::all_open_loop(first.num_actions(), first.horizon());
    for m in class.models() {
        let (p, _) = m.optimal_policy(rewards)?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Two states, two actions; action 1 from state 0 reaches the rewarding
    /// state 1 with probability `p`.
    fn chain(p: f64) -> TabularMdp {
        TabularMdp::from_rows(
            2,
            2,
            2,
            |s, a| match (s, a) {
                (0, 1) => vec![1.0 - p, p],
                (0, _) => vec![1.0, 0.0],
                _ => vec![0.0, 1.0],
            },
            vec![0.0, 1.0],
            InitialState::Index(0),
        )
        .unwrap()
    }

    #[test]
    fn singleton_class_exploits_immediately() {
        let truth = chain(0.9);
        let class = ModelClass::new(vec![truth.clone()], Some(0)).unwrap();
        let policies = Policy::all_open_loop(2, 2);
        let r = dreem_run(
            &class,
            &policies,
            &truth,
            &DreemConfig::new(0.5, 0.01, 10),
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(r.rounds, 0);
        assert_eq!(r.trajectories_used, 0);
        assert!(r.value_gap.unwrap().abs() < 1e-12);
    }

    #[test]
    fn far_model_eliminated_in_first_round() {
        let truth = chain(0.9);
        let class = ModelClass::new(vec![truth.clone(), chain(0.0)], Some(0)).unwrap();
        let policies = Policy::all_open_loop(2, 2);
        let r = dreem_run(
            &class,
            &policies,
            &truth,
            &DreemConfig::new(0.5, 0.05, 10),
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.history[0].eliminated, vec![1]);
        assert_eq!(r.surviving, vec![0]);
        assert_eq!(r.trajectories_used, 20);
    }

    #[test]
    fn phi_one_removes_nothing() {
        let truth = chain(0.9);
        let class = ModelClass::new(vec![truth.clone(), chain(0.0), chain(0.5)], Some(0)).unwrap();
        let mut vs = VersionSpace::full(&class);
        let p = Policy::OpenLoop(vec![1, 1]);
        update_model_set(&mut vs, &class, 0, &p, 1.0, Evidence::Oracle(&truth), 1.0).unwrap();
        assert_eq!(vs.surviving, vec![0, 1, 2]);
        assert_eq!(vs.history.len(), 1);
    }

    #[test]
    fn empirical_mode_eliminates_far_model() {
        let truth = chain(0.9);
        let class = ModelClass::new(vec![truth.clone(), chain(0.0)], Some(0)).unwrap();
        let policies = Policy::all_open_loop(2, 2);
        let mut cfg = DreemConfig::new(0.5, 0.1, 400);
        cfg.oracle_misfit = false;
        let r = dreem_run(&class, &policies, &truth, &cfg, &mut seeded(4)).unwrap();
        assert_eq!(r.surviving, vec![0]);
    }

    #[test]
    fn parameter_formulas() {
        let p = theoretical_parameters(2, 2, 0.5, 0.1, 1, 1.0, 3, 4).unwrap();
        assert!((p.phi - 1.0 / 768.0).abs() < 1e-15);
        let beta = 2.0 * p.phi * std::f64::consts::E;
        let q = theoretical_parameters(2, 2, 0.5, 0.1, 1, beta, 3, 4).unwrap();
        assert!((q.t - 2.0 / (5.0f64 / 3.0).ln()).abs() < 1e-9);
        let wider = theoretical_parameters(2, 2, 1.0, 0.1, 1, 1.0, 3, 4).unwrap();
        assert!((wider.phi - 2.0 * p.phi).abs() < 1e-15);
        assert!(wider.n * 4 <= p.n);
        assert!(matches!(
            theoretical_parameters(2, 2, 0.5, 0.1, 1, 2.0 / 768.0, 3, 4),
            Err(Error::NonPositiveRounds { .. })
        ));
    }

    #[test]
    fn doubling_succeeds_on_first_guess() {
        let truth = chain(0.9);
        let class = ModelClass::new(vec![truth.clone(), chain(0.0)], Some(0)).unwrap();
        let policies = Policy::all_open_loop(2, 2);
        let r = doubling_run(
            &class,
            &policies,
            &truth,
            0.5,
            0.1,
            1.0,
            1.0,
            true,
            5,
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(r.outer_iterations, 1);
        assert_eq!(r.d, 2);
    }

    #[test]
    fn perturbations_keep_rewards() {
        let truth = chain(0.9);
        let mut rng = seeded(9);
        let class = perturbed_class(&truth, 5, 2, &mut rng).unwrap();
        assert_eq!(class.len(), 6);
        assert!(class
            .models()
            .iter()
            .all(|m| m.rewards() == truth.rewards()));
        let policies = open_loop_plus_optimal(&class, truth.rewards()).unwrap();
        assert!(policies.len() > 4);
    }
}
