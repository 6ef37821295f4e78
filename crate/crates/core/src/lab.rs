//! Randomized numerical checks of the structural properties behind version
//! space elimination: misfit bounds disagreement, the closed-form test
//! functions attain the misfit, the empirical misfit concentrates, misfit
//! matrices have low rank, and slab cuts shrink the enclosing ellipsoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, Matrix};
use crate::mdp::{InitialState, Policy, TabularMdp};
use crate::misfit::mvee::{mvee_origin_centered, volume_shrink_check, Ellipsoid};
use crate::misfit::rank::low_rank_mdp_synthesize;
use crate::misfit::{
    build_test_functions, collect_misfit_data, deviation_bound, disagreement_all_steps,
    ipm_objective, misfit_empirical, misfit_exact, misfit_matrix, misfits_all_steps, ModelClass,
    TestFunction, TestFunctionTag,
};
use crate::rng::{random_simplex, seeded, stream};

/// Relative singular value cutoff for rank checks.
pub const RANK_TOL: f64 = 1e-8;

/// Random model with Dirichlet rows, uniform rewards and a random initial
/// state.
pub fn random_tabular_mdp<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<TabularMdp> {
    let rows: Vec<Vec<f64>> = (0..num_states * num_actions)
        .map(|_| random_simplex(num_states, rng))
        .collect();
    let rewards = (0..num_states).map(|_| rng.gen()).collect();
    let init = rng.gen_range(0..num_states);
    TabularMdp::from_rows(
        num_states,
        num_actions,
        horizon,
        |s, a| rows[s * num_actions + a].clone(),
        rewards,
        InitialState::Index(init),
    )
}

/// `(1 − λ)·P + λ·Q` row by row for a random model `Q`, keeping rewards and
/// the initial state of `base`.
pub fn mix_toward_random<R: Rng + ?Sized>(
    base: &TabularMdp,
    lambda: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let (ns, na) = (base.num_states(), base.num_actions());
    let rows: Vec<Vec<f64>> = (0..ns * na)
        .map(|i| {
            let q = random_simplex(ns, rng);
            base.row(i / na, i % na)
                .iter()
                .zip(q)
                .map(|(p, q)| (1.0 - lambda) * p + lambda * q)
                .collect()
        })
        .collect();
    TabularMdp::from_rows(
        ns,
        na,
        base.horizon(),
        |s, a| rows[s * na + a].clone(),
        base.rewards().to_vec(),
        base.initial().clone(),
    )
}

/// Random time-dependent deterministic policy.
pub fn random_policy<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut R,
) -> Policy {
    Policy::TabularDet(
        (0..horizon)
            .map(|_| {
                (0..num_states)
                    .map(|_| rng.gen_range(0..num_actions))
                    .collect()
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_implication")]
    pub implication_instances: usize,
    #[serde(default = "default_ipm")]
    pub ipm_instances: usize,
    #[serde(default = "default_rank")]
    pub rank_classes: usize,
    #[serde(default = "default_cuts")]
    pub mvee_cuts: usize,
    #[serde(default)]
    pub concentration: ConcentrationConfig,
}

/// Repeated empirical misfit estimates against the deviation bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationConfig {
    #[serde(default = "default_conc_instances")]
    pub instances: usize,
    #[serde(default = "default_conc_reps")]
    pub repetitions: usize,
    #[serde(default = "default_conc_n")]
    pub n: usize,
    #[serde(default = "default_conc_delta")]
    pub delta: f64,
}

fn default_conc_instances() -> usize {
    10
}
fn default_conc_reps() -> usize {
    200
}
fn default_conc_n() -> usize {
    2000
}
fn default_conc_delta() -> f64 {
    0.1
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        Self {
            instances: default_conc_instances(),
            repetitions: default_conc_reps(),
            n: default_conc_n(),
            delta: default_conc_delta(),
        }
    }
}

fn default_implication() -> usize {
    1000
}
fn default_ipm() -> usize {
    200
}
fn default_rank() -> usize {
    100
}
fn default_cuts() -> usize {
    100
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            implication_instances: default_implication(),
            ipm_instances: default_ipm(),
            rank_classes: default_rank(),
            mvee_cuts: default_cuts(),
            concentration: ConcentrationConfig::default(),
        }
    }
}

/// Outcome of the disagreement-to-misfit implication check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicationReport {
    pub instances: usize,
    /// `(instance, h)` pairs with a positive disagreement threshold.
    pub checks: usize,
    pub violations: usize,
    /// Smallest `max_{h'≤h} max(W, W') / (α / (4|A|H))` over all checks.
    pub min_slack: f64,
}

/// For random instances (|S| ≤ 5, |A| ≤ 3, H ≤ 4) with two models near the
/// truth, draws `α` below `D(π, M, M', h)` and checks that some `h' ≤ h`
/// has `max(W(π, M, h'), W(π, M', h')) > α / (4|A|H)`.
pub fn implication_check(instances: usize, seed: u64) -> Result<ImplicationReport> {
    let mut rng = stream(seed, 11);
    let mut report = ImplicationReport {
        instances,
        checks: 0,
        violations: 0,
        min_slack: f64::INFINITY,
    };
    for _ in 0..instances {
        let ns = rng.gen_range(2..=5);
        let na = rng.gen_range(1..=3);
        let horizon = rng.gen_range(1..=4);
        let truth = random_tabular_mdp(ns, na, horizon, &mut rng)?;
        let lambda_a = 10f64.powf(rng.gen_range(-3.0..0.0));
        let lambda_b = 10f64.powf(rng.gen_range(-3.0..0.0));
        let ma = mix_toward_random(&truth, lambda_a, &mut rng)?;
        let mb = mix_toward_random(&truth, lambda_b, &mut rng)?;
        let policy = random_policy(ns, na, horizon, &mut rng);
        let d = disagreement_all_steps(&ma, &mb, &policy)?;
        let wa = misfits_all_steps(&truth, &ma, &policy)?;
        let wb = misfits_all_steps(&truth, &mb, &policy)?;
        for h in 1..=horizon {
            if d[h - 1] <= 0.0 {
                continue;
            }
            let alpha = rng.gen::<f64>() * d[h - 1];
            let threshold = alpha / (4.0 * na as f64 * horizon as f64);
            let best = (0..h).map(|i| wa[i].max(wb[i])).fold(0.0, f64::max);
            report.checks += 1;
            if best <= threshold {
                report.violations += 1;
            }
            if threshold > 0.0 {
                report.min_slack = report.min_slack.min(best / threshold);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpmReport {
    pub instances: usize,
    pub max_abs_error: f64,
}

/// Plugs the sign-of-difference test function into the IPM objective and
/// compares with the exact misfit.
pub fn ipm_equality_check(instances: usize, seed: u64) -> Result<IpmReport> {
    let mut rng = stream(seed, 12);
    let mut max_abs_error = 0.0f64;
    for _ in 0..instances {
        let ns = rng.gen_range(2..=6);
        let na = rng.gen_range(1..=3);
        let horizon = rng.gen_range(1..=4);
        let truth = random_tabular_mdp(ns, na, horizon, &mut rng)?;
        let model = random_tabular_mdp(ns, na, horizon, &mut rng)?;
        let policy = random_policy(ns, na, horizon, &mut rng);
        let h = rng.gen_range(1..=horizon);
        let tag = TestFunctionTag {
            policy: 0,
            model: 0,
            h,
            negated: false,
        };
        let f = TestFunction::sign_of_difference(&truth, &model, tag);
        let ipm = ipm_objective(&truth, &model, &policy, h, &f)?;
        let exact = misfit_exact(&truth, &model, &policy, h)?;
        max_abs_error = max_abs_error.max((ipm - exact).abs());
    }
    Ok(IpmReport {
        instances,
        max_abs_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub classes: usize,
    /// Classes with some `rank(A_h) > |S|`.
    pub state_bound_violations: usize,
    /// Classes over low-rank truths with some `rank(A_h) > K`.
    pub inner_dim_violations: usize,
    pub max_rank_seen: usize,
}

fn max_rank(policies: &[Policy], class: &ModelClass, truth: &TabularMdp) -> Result<usize> {
    (1..=truth.horizon())
        .map(|h| {
            misfit_matrix(policies, class, truth, h).map(|m| numerical_rank(&m.values, RANK_TOL))
        })
        .try_fold(0, |acc, r| r.map(|r| acc.max(r)))
}

/// Ranks of misfit matrices with more policies and models than states:
/// bounded by |S| in general and by the inner dimension K for truths with a
/// factored kernel.
pub fn rank_check(classes: usize, seed: u64) -> Result<RankReport> {
    let mut rng = stream(seed, 13);
    let mut report = RankReport {
        classes,
        state_bound_violations: 0,
        inner_dim_violations: 0,
        max_rank_seen: 0,
    };
    for c in 0..classes {
        let ns = rng.gen_range(2..=5);
        let na = rng.gen_range(2..=3);
        let horizon = rng.gen_range(2..=4);
        let width = 2 * ns + 2;
        let truth = random_tabular_mdp(ns, na, horizon, &mut rng)?;
        let mut models = vec![truth.clone()];
        for _ in 1..width {
            models.push(random_tabular_mdp(ns, na, horizon, &mut rng)?);
        }
        let class = ModelClass::new(models, Some(0))?;
        let policies: Vec<Policy> = (0..width)
            .map(|_| random_policy(ns, na, horizon, &mut rng))
            .collect();
        let r = max_rank(&policies, &class, &truth)?;
        report.max_rank_seen = report.max_rank_seen.max(r);
        if r > ns {
            report.state_bound_violations += 1;
        }

        let k = 1 + c % 3;
        let ns = rng.gen_range(k.max(3)..=6);
        let (truth, _) = low_rank_mdp_synthesize(ns, na, k, horizon, &mut rng)?;
        let mut models = vec![truth.clone()];
        for _ in 1..width {
            models.push(random_tabular_mdp(ns, na, horizon, &mut rng)?);
        }
        let class = ModelClass::new(models, Some(0))?;
        let policies: Vec<Policy> = (0..width)
            .map(|_| random_policy(ns, na, horizon, &mut rng))
            .collect();
        if max_rank(&policies, &class, &truth)? > k {
            report.inner_dim_violations += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MveeReport {
    pub cuts: usize,
    /// Largest closed-form volume ratio.
    pub max_ratio: f64,
    /// Largest ratio measured by fitting an ellipsoid to sampled points of
    /// the cut body.
    pub max_sampled_ratio: f64,
}

fn random_spd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Ellipsoid> {
    let a = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let q = a
        .matmul(&a.transpose())?
        .add(&Matrix::identity(d).scale(0.1));
    Ellipsoid::new(q)
}

/// Points of `E ∩ {|pᵀx| ≤ c}`: the ellipsoid boundary clipped to the slab
/// and the slab faces clipped to the ellipsoid, from random directions.
fn sample_cut_body<R: Rng + ?Sized>(
    e: &Ellipsoid,
    p: &[f64],
    c: f64,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let d = e.dim();
    let root = e.sqrt_shape();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n.is_nan() || n <= 1e-9 {
            continue;
        }
        u.iter_mut().for_each(|x| *x /= n);
        let mut x = root.matvec(&u);
        let proj: f64 = x.iter().zip(p).map(|(a, b)| a * b).sum();
        if proj.abs() > c {
            x.iter_mut().for_each(|v| *v *= c / proj.abs());
            // Slide along the face until the ellipsoid boundary.
            let g = e.gauge(&x);
            if g < 1.0 {
                let mut t: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let tp: f64 = t.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
                    / p.iter().map(|v| v * v).sum::<f64>();
                t.iter_mut().zip(p).for_each(|(ti, pi)| *ti -= tp * pi);
                let (mut lo, mut hi) = (0.0, 1.0);
                while e.gauge(&add_scaled(&x, &t, hi)) < 1.0 {
                    hi *= 2.0;
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if e.gauge(&add_scaled(&x, &t, mid)) < 1.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                x = add_scaled(&x, &t, lo);
            }
        }
        out.push(x);
    }
    out
}

fn add_scaled(x: &[f64], t: &[f64], s: f64) -> Vec<f64> {
    x.iter().zip(t).map(|(a, b)| a + s * b).collect()
}

/// Random ellipsoids in d ∈ {2, 3} cut by slabs `|pᵀv| ≤ 2φ` with `φ`
/// drawn so that the support in direction `p` exceeds `6√d·φ`.
pub fn mvee_check(cuts: usize, seed: u64) -> Result<MveeReport> {
    let mut rng = stream(seed, 14);
    let mut report = MveeReport {
        cuts,
        max_ratio: 0.0,
        max_sampled_ratio: 0.0,
    };
    for i in 0..cuts {
        let d = 2 + i % 2;
        let e = random_spd(d, &mut rng)?;
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let support = e.support(&p);
        let phi = support / (6.0 * (d as f64).sqrt()) * rng.gen_range(0.05..0.999);
        let ratio = volume_shrink_check(&e, &p, support, phi)?;
        let points = sample_cut_body(&e, &p, 2.0 * phi, 400, &mut seeded(rng.gen()));
        let fit = mvee_origin_centered(&points, 1e-7)?;
        let sampled = fit.volume_factor() / e.volume_factor();
        report.max_ratio = report.max_ratio.max(ratio);
        report.max_sampled_ratio = report.max_sampled_ratio.max(sampled);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub instances: usize,
    pub repetitions: usize,
    pub bound: f64,
    /// Share of all repetitions whose estimate missed by more than `bound`.
    pub violation_fraction: f64,
    /// Largest share within a single instance.
    pub worst_instance_fraction: f64,
    pub max_abs_deviation: f64,
}

/// Each instance draws a truth, a class of the truth and four random models,
/// three random policies, and one `(π, M, h)` triple; every repetition
/// collects fresh data of size `n` and compares the empirical misfit with the
/// exact one.
pub fn concentration_check(config: &ConcentrationConfig, seed: u64) -> Result<ConcentrationReport> {
    if !(config.delta > 0.0 && config.delta <= 1.0) || config.n == 0 {
        return Err(Error::Config(
            "concentration needs n >= 1 and delta in (0, 1]".into(),
        ));
    }
    let mut rng = stream(seed, 14);
    let (num_models, num_policies) = (5, 3);
    let mut misses = 0usize;
    let mut worst_instance = 0.0f64;
    let mut max_dev = 0.0f64;
    let mut bound = 0.0;
    for _ in 0..config.instances {
        let ns = rng.gen_range(2..=5);
        let na = rng.gen_range(1..=3);
        let horizon = rng.gen_range(1..=4);
        let truth = random_tabular_mdp(ns, na, horizon, &mut rng)?;
        let mut models = vec![truth.clone()];
        for _ in 1..num_models {
            models.push(random_tabular_mdp(ns, na, horizon, &mut rng)?);
        }
        let class = ModelClass::new(models, Some(0))?;
        let policies: Vec<Policy> = (0..num_policies)
            .map(|_| random_policy(ns, na, horizon, &mut rng))
            .collect();
        let fs = build_test_functions(num_policies, &class, &truth)?;
        bound = deviation_bound(num_models, num_policies, horizon, config.delta, config.n);
        let policy = &policies[rng.gen_range(0..num_policies)];
        let model = class.get(rng.gen_range(0..num_models));
        let h = rng.gen_range(1..=horizon);
        let exact = misfit_exact(&truth, model, policy, h)?;
        let mut local = 0usize;
        for _ in 0..config.repetitions {
            let data = collect_misfit_data(&truth, policy, h, config.n, &mut rng)?;
            let dev = (misfit_empirical(&data, model, &fs)? - exact).abs();
            max_dev = max_dev.max(dev);
            if dev > bound {
                local += 1;
            }
        }
        misses += local;
        if config.repetitions > 0 {
            worst_instance = worst_instance.max(local as f64 / config.repetitions as f64);
        }
    }
    let total = config.instances * config.repetitions;
    Ok(ConcentrationReport {
        instances: config.instances,
        repetitions: config.repetitions,
        bound,
        violation_fraction: if total == 0 {
            0.0
        } else {
            misses as f64 / total as f64
        },
        worst_instance_fraction: worst_instance,
        max_abs_deviation: max_dev,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabReport {
    pub config: LabConfig,
    pub implication: ImplicationReport,
    pub ipm: IpmReport,
    pub concentration: ConcentrationReport,
    pub rank: RankReport,
    pub mvee: MveeReport,
}

pub fn run_lab(config: &LabConfig) -> Result<LabReport> {
    if config.implication_instances + config.ipm_instances + config.rank_classes + config.mvee_cuts
        == 0
    {
        return Err(Error::Config("the lab has nothing to run".into()));
    }
    Ok(LabReport {
        config: config.clone(),
        implication: implication_check(config.implication_instances, config.seed)?,
        ipm: ipm_equality_check(config.ipm_instances, config.seed)?,
        concentration: concentration_check(&config.concentration, config.seed)?,
        rank: rank_check(config.rank_classes, config.seed)?,
        mvee: mvee_check(config.mvee_cuts, config.seed)?,
    })
}
