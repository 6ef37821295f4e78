//! Helpers shared by the integration suites.

#![allow(dead_code)]

use e3_core::ensemble::{
    loss_multistep, loss_nll_stochastic, td_loss, DynamicsNet, LossGrad, Mlp, OutputKind,
};
use e3_core::mdp::{Trajectory, Transition};
use e3_core::rng::seeded;
use e3_core::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_COORDS: usize = 120;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    /// Coordinates compared, all with a nonzero analytic gradient.
    pub coords: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.coords >= 100 && self.max_rel_err <= FD_REL_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares `grad` with central differences of `loss` on random
/// coordinates that carry gradient.
fn check(
    name: &'static str,
    params: &[f64],
    grad: &[f64],
    seed: u64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let mut rng = seeded(seed);
    let live: Vec<usize> = (0..params.len())
        .filter(|&i| grad[i].abs() > 1e-9)
        .collect();
    assert!(!live.is_empty(), "{name}: gradient is identically zero");
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..FD_COORDS {
        let i = live[rng.gen_range(0..live.len())];
        let x = p[i];
        p[i] = x + FD_STEP;
        let up = loss(&p);
        p[i] = x - FD_STEP;
        let down = loss(&p);
        p[i] = x;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    GradCheck {
        name,
        coords: FD_COORDS,
        max_rel_err: worst,
    }
}

fn random_obs<R: Rng>(dim: usize, binary: bool, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            if binary {
                f64::from(rng.gen_bool(0.5))
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect()
}

fn random_trajectory<R: Rng>(
    dim: usize,
    num_actions: usize,
    len: usize,
    binary: bool,
    rng: &mut R,
) -> Trajectory<Vec<f64>> {
    let mut s = random_obs(dim, binary, rng);
    let steps = (1..=len)
        .map(|h| {
            let next = random_obs(dim, binary, rng);
            Transition {
                h,
                state: std::mem::replace(&mut s, next.clone()),
                action: rng.gen_range(0..num_actions),
                reward: rng.gen_range(0.0..1.0),
                next_state: next,
                terminal: h == len,
            }
        })
        .collect();
    Trajectory { steps, seed: 0 }
}

fn dynamics_check(name: &'static str, kind: OutputKind, k: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = seeded(seed);
    let (dim, na) = (6, 3);
    let sizes = [dim, 10, 8, dim];
    let net = DynamicsNet::new(&sizes, na, kind, &mut rng)?;
    let binary = kind == OutputKind::Bernoulli;
    let traj = random_trajectory(dim, na, 5, binary, &mut rng);
    let eval = |p: &[f64]| -> Result<LossGrad> {
        let net = DynamicsNet::from_params(&sizes, na, kind, p.to_vec())?;
        if binary {
            let batch: Vec<&Transition<Vec<f64>>> = traj.steps.iter().collect();
            loss_nll_stochastic(&net, &batch, 0.7)
        } else {
            loss_multistep(&net, &traj, 1, k, 0.7)
        }
    };
    let base = eval(net.params())?;
    Ok(check(name, net.params(), &base.grad, seed, |p| {
        eval(p).expect("loss evaluates").loss
    }))
}

fn td_check(seed: u64) -> Result<GradCheck> {
    let mut rng = seeded(seed);
    let (dim, na) = (5, 4);
    let sizes = [dim, 12, 12, na];
    let online = Mlp::new(&sizes, &mut rng)?;
    let target = Mlp::new(&sizes, &mut rng)?;
    let traj = random_trajectory(dim, na, 8, false, &mut rng);
    let batch: Vec<&Transition<Vec<f64>>> = traj.steps.iter().collect();
    let eval = |p: &[f64]| -> Result<LossGrad> {
        let net = Mlp::from_params(&sizes, p.to_vec())?;
        td_loss(&net, &target, &batch, 0.9)
    };
    let base = eval(online.params())?;
    Ok(check(
        "td loss (double Q)",
        online.params(),
        &base.grad,
        seed,
        |p| eval(p).expect("loss evaluates").loss,
    ))
}

/// Every differentiable loss against central finite differences.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        dynamics_check(
            "squared loss, K=1, residual",
            OutputKind::Deterministic { residual: true },
            1,
            seed,
        )?,
        dynamics_check(
            "squared loss, K=3, residual",
            OutputKind::Deterministic { residual: true },
            3,
            seed + 1,
        )?,
        dynamics_check(
            "squared loss, K=3, direct",
            OutputKind::Deterministic { residual: false },
            3,
            seed + 2,
        )?,
        dynamics_check("Bernoulli likelihood", OutputKind::Bernoulli, 1, seed + 3)?,
        td_check(seed + 4)?,
    ])
}
