//! Origin-centered minimum volume enclosing ellipsoids and the slab-cut
//! volume ratio used to bound the number of elimination rounds.

use crate::error::{Error, Result};
use crate::linalg::{inverse, spd_determinant, symmetric_eigen, Matrix};

pub const MAX_MVEE_ITERATIONS: usize = 200_000;

/// `{x : xᵀ Q⁻¹ x ≤ 1}` for a symmetric positive definite `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    q: Matrix,
    q_inv: Matrix,
}

impl Ellipsoid {
    pub fn new(q: Matrix) -> Result<Self> {
        if !q.is_symmetric(1e-9) {
            return Err(Error::InvalidModel(
                "ellipsoid shape matrix must be symmetric".into(),
            ));
        }
        let (vals, _) = symmetric_eigen(&q);
        if vals.iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::InvalidModel(
                "ellipsoid shape matrix must be positive definite".into(),
            ));
        }
        let q_inv = inverse(&q)?;
        Ok(Self { q, q_inv })
    }

    pub fn shape(&self) -> &Matrix {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// `xᵀ Q⁻¹ x`.
    pub fn gauge(&self, x: &[f64]) -> f64 {
        self.q_inv.quad_form(x)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.gauge(x) <= 1.0 + tol
    }

    /// `√det Q`, proportional to the volume.
    pub fn volume_factor(&self) -> f64 {
        spd_determinant(&self.q).sqrt()
    }

    /// `max_{x ∈ E} pᵀx = √(pᵀ Q p)`.
    pub fn support(&self, p: &[f64]) -> f64 {
        self.q.quad_form(p).sqrt()
    }

    /// Symmetric square root `Q^{1/2}`, mapping the unit ball onto the
    /// ellipsoid.
    pub fn sqrt_shape(&self) -> Matrix {
        let (vals, vecs) = symmetric_eigen(&self.q);
        let d = self.dim();
        Matrix::from_fn(d, d, |i, j| {
            (0..d)
                .map(|k| vecs[(i, k)] * vals[k].sqrt() * vecs[(j, k)])
                .sum()
        })
    }
}

fn weighted_scatter(points: &[Vec<f64>], u: &[f64], d: usize) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for (x, &w) in points.iter().zip(u) {
        if w == 0.0 {
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += w * x[i] * x[j];
            }
        }
    }
    m
}

/// Minimum volume origin-centered ellipsoid containing `±points`, by the
/// Khachiyan coordinate-ascent iteration with away steps. The returned
/// ellipsoid contains every point exactly and its volume is within a
/// `(1 + tol)^{d/2}` factor of optimal. Point sets that do not span the
/// space are padded with points `±√tol·r·e_i` (r the largest point norm).
pub fn mvee_origin_centered(points: &[Vec<f64>], tol: f64) -> Result<Ellipsoid> {
    let d = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InsufficientData("MVEE needs at least one point".into()))?;
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::SizeMismatch {
            expected: d,
            got: points.iter().map(Vec::len).find(|&l| l != d).unwrap_or(0),
        });
    }
    let df = d as f64;
    let uniform = vec![1.0 / points.len() as f64; points.len()];
    let (vals, _) = symmetric_eigen(&weighted_scatter(points, &uniform, d));
    let top = vals.iter().fold(0.0f64, |m, &v| m.max(v));
    let owned;
    let points = if vals.iter().any(|&v| v <= tol * top) || top == 0.0 {
        let scale = points
            .iter()
            .map(|p| p.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt()
            .max(1.0);
        let mut aug = points.to_vec();
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = tol.sqrt() * scale;
            aug.push(e);
        }
        owned = aug;
        &owned[..]
    } else {
        points
    };
    let n = points.len();
    let mut u = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_MVEE_ITERATIONS {
        let m = weighted_scatter(points, &u, d);
        let m_inv = inverse(&m)?;
        let g: Vec<f64> = points.iter().map(|x| m_inv.quad_form(x)).collect();
        let (jp, gp) =
            g.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &v)| if v > b.1 { (i, v) } else { b },
            );
        let (jm, gm) = g.iter().enumerate().filter(|(i, _)| u[*i] > 0.0).fold(
            (0, f64::INFINITY),
            |b, (i, &v)| if v < b.1 { (i, v) } else { b },
        );
        let eps_plus = gp / df - 1.0;
        let eps_minus = 1.0 - gm / df;
        residual = eps_plus.max(eps_minus);
        if residual <= tol {
            let scale = (gp / df).max(1.0);
            let q = m.scale(df * scale);
            let q = Matrix::from_fn(d, d, |i, j| 0.5 * (q[(i, j)] + q[(j, i)]));
            return Ellipsoid::new(q);
        }
        if eps_plus >= eps_minus {
            let lambda = (gp - df) / (df * (gp - 1.0));
            u.iter_mut().for_each(|w| *w *= 1.0 - lambda);
            u[jp] += lambda;
        } else {
            let bound = -u[jm] / (1.0 - u[jm]);
            let lambda = if gm <= 1.0 {
                bound
            } else {
                ((gm - df) / (df * (gm - 1.0))).max(bound)
            };
            u.iter_mut().for_each(|w| *w *= 1.0 - lambda);
            u[jm] += lambda;
            if lambda == bound {
                u[jm] = 0.0;
            }
        }
    }
    Err(Error::Convergence {
        iterations: MAX_MVEE_ITERATIONS,
        residual,
    })
}

/// Volume ratio between the minimum ellipsoid containing the symmetric slab
/// `{x ∈ B_d : |x_1| ≤ c}` of the unit ball and the ball itself.
pub fn slab_shrink_ratio(d: usize, c: f64) -> f64 {
    let df = d as f64;
    if d == 1 {
        return c.min(1.0);
    }
    if c * c >= 1.0 / df {
        return 1.0;
    }
    (df * c * c).sqrt() * (df * (1.0 - c * c) / (df - 1.0)).powf((df - 1.0) / 2.0)
}

/// Ratio `vol(MVEE(O ∩ {v : |pᵀv| ≤ 2φ})) / vol(O)` for an origin-centered
/// ellipsoid `O`, valid when some point of `O` witnesses `pᵀv > 6√d·φ`.
pub fn volume_shrink_check(
    ellipsoid: &Ellipsoid,
    p: &[f64],
    witness_value: f64,
    phi: f64,
) -> Result<f64> {
    let d = ellipsoid.dim();
    if p.len() != d {
        return Err(Error::SizeMismatch {
            expected: d,
            got: p.len(),
        });
    }
    let trigger = 6.0 * (d as f64).sqrt() * phi;
    if witness_value.is_nan() || witness_value <= trigger {
        return Err(Error::TriggerNotMet(format!(
            "witness {witness_value} does not exceed 6·√d·φ = {trigger}"
        )));
    }
    let support = ellipsoid.support(p);
    if witness_value > support * (1.0 + 1e-9) {
        return Err(Error::TriggerNotMet(format!(
            "witness {witness_value} exceeds the ellipsoid's support {support} in direction p"
        )));
    }
    let c = 2.0 * phi / support;
    let ratio = slab_shrink_ratio(d, c);
    debug_assert!(ratio <= 0.6 + 1e-9, "slab shrink ratio {ratio} above 3/5");
    Ok(ratio)
}
