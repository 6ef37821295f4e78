//! Low-rank transition synthesis and SVD-based factorization certificates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{norm, numerical_rank, svd, Matrix};
use crate::mdp::{InitialState, TabularMdp};
use crate::rng::random_simplex;

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Transition kernel `Γ = Γ1·Γ2` with column-stochastic factors:
/// `Γ1` is |S|×K and `Γ2` is K×(|S|·|A|), columns indexed by `s·|A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTransition {
    pub gamma1: Matrix,
    pub gamma2: Matrix,
    pub k: usize,
}

impl LowRankTransition {
    pub fn product(&self) -> Matrix {
        self.gamma1
            .matmul(&self.gamma2)
            .expect("factor shapes agree")
    }
}

/// Random MDP whose transition kernel has inner dimension `k`.
pub fn low_rank_mdp_synthesize<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    k: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<(TabularMdp, LowRankTransition)> {
    if k == 0 || k > num_states.min(num_states * num_actions) {
        return Err(Error::Config(format!(
            "inner dimension {k} must lie in 1..={}",
            num_states.min(num_states * num_actions)
        )));
    }
    let sa = num_states * num_actions;
    let mut gamma1 = Matrix::zeros(num_states, k);
    for j in 0..k {
        for (i, p) in random_simplex(num_states, rng).into_iter().enumerate() {
            gamma1[(i, j)] = p;
        }
    }
    let mut gamma2 = Matrix::zeros(k, sa);
    for j in 0..sa {
        for (i, p) in random_simplex(k, rng).into_iter().enumerate() {
            gamma2[(i, j)] = p;
        }
    }
    let lr = LowRankTransition { gamma1, gamma2, k };
    let gamma = lr.product();
    let rewards: Vec<f64> = (0..num_states).map(|_| rng.gen()).collect();
    let mdp = TabularMdp::from_rows(
        num_states,
        num_actions,
        horizon,
        |s, a| {
            let col = s * num_actions + a;
            let mut row: Vec<f64> = (0..num_states).map(|s2| gamma[(s2, col)]).collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
            row
        },
        rewards,
        InitialState::Index(0),
    )?;
    Ok((mdp, lr))
}

/// `B ≈ U·Vᵀ` from a truncated SVD with `√σ` on each side.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub u: Matrix,
    pub v: Matrix,
    /// `max_i ‖u_i‖ · max_j ‖v_j‖`.
    pub beta: f64,
    pub rank: usize,
}

impl Factorization {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .matmul(&self.v.transpose())
            .expect("factor shapes agree")
    }
}

pub fn factor_matrix(matrix: &Matrix, target_rank: usize, tol: f64) -> Result<Factorization> {
    let rank = numerical_rank(matrix, tol);
    if rank > target_rank {
        return Err(Error::Infeasible {
            rank,
            target: target_rank,
        });
    }
    let s = svd(matrix);
    let k = target_rank.min(s.sigma.len());
    let u = Matrix::from_fn(matrix.rows(), k, |i, j| s.u[(i, j)] * s.sigma[j].sqrt());
    let v = Matrix::from_fn(matrix.cols(), k, |i, j| s.v[(i, j)] * s.sigma[j].sqrt());
    let max_row = |m: &Matrix| (0..m.rows()).map(|i| norm(m.row(i))).fold(0.0, f64::max);
    let beta = max_row(&u) * max_row(&v);
    Ok(Factorization { u, v, beta, rank })
}
