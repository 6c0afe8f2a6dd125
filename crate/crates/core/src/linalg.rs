//! Dense symmetric positive (semi)definite solves for the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Pivot ratio below which an unregularized system counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Relative normal-equation residual every certified solve must reach.
pub const CERTIFY_TOL: f64 = 1e-8;

pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Diagonal shift that was needed to factor, 0 if none.
    pub jitter: f64,
}

impl SpdFactor {
    /// Cholesky factorization. With `allow_jitter`, a failed factorization
    /// is retried with a diagonal shift starting at `1e-12 · trace / n`.
    /// Without it, failure or a vanishing pivot is reported as singular.
    pub fn new(a: &DMatrix<f64>, allow_jitter: bool) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Shape(format!("expected a square system, got {}x{}", n, a.ncols())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("normal matrix has non-finite entries".into()));
        }
        let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_diag == 0.0 {
            return Err(Error::Singular("normal matrix is identically zero".into()));
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
            if allow_jitter || min_pivot > RANK_TOL * max_diag {
                return Ok(Self { chol, jitter: 0.0 });
            }
            return Err(Error::Singular(format!(
                "rank-deficient system: smallest pivot {:.3e} vs largest diagonal {:.3e}",
                min_pivot, max_diag
            )));
        }
        if !allow_jitter {
            return Err(Error::Singular(
                "system is not positive definite and no regularization was given".into(),
            ));
        }
        let base = 1e-12 * a.trace().abs() / n as f64;
        for scale in [1.0, 1e3, 1e6] {
            let jitter = base * scale;
            let mut shifted = a.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter });
            }
        }
        Err(Error::Singular("factorization failed even with diagonal jitter".into()))
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Outcome of a certified solve.
#[derive(Debug, Clone)]
pub struct Certified {
    pub x: DVector<f64>,
    /// `‖rhs − A x‖ / ‖rhs‖` measured with the exact operator.
    pub relative_residual: f64,
    pub jitter: f64,
}

/// Solves `A x = rhs` where `normal` is an assembled copy of `A` and
/// `apply` evaluates `A x` independently (matrix-free). Iterative refinement
/// against `apply` removes both factorization and assembly round-off; the
/// result must reach [`CERTIFY_TOL`].
pub fn solve_certified(
    normal: &DMatrix<f64>,
    rhs: &DVector<f64>,
    allow_jitter: bool,
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<Certified> {
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(Certified {
            x: DVector::zeros(rhs.len()),
            relative_residual: 0.0,
            jitter: 0.0,
        });
    }
    let factor = SpdFactor::new(normal, allow_jitter)?;
    let mut x = factor.solve(rhs);
    let mut best = (f64::INFINITY, x.clone());
    for _ in 0..6 {
        let r = rhs - apply(&x);
        let rel = r.norm() / rhs_norm;
        if !rel.is_finite() {
            break;
        }
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= CERTIFY_TOL * 1e-3 {
            break;
        }
        x += factor.solve(&r);
    }
    let (rel, x) = best;
    if !(rel <= CERTIFY_TOL) {
        return Err(Error::Numerical(format!(
            "normal-equation residual {rel:.3e} exceeds {CERTIFY_TOL:.0e}"
        )));
    }
    Ok(Certified {
        x,
        relative_residual: rel,
        jitter: factor.jitter,
    })
}

/// Preconditioned conjugate gradients on `A x = b` from the start `x`.
/// Returns the number of iterations run. Every iterate lowers the quadratic
/// `½ xᵀA x − bᵀx`, so an early stop still improves on the start.
pub fn pcg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    inv_diag: &[f64],
    x: &mut [f64],
    max_iters: usize,
    rel_tol: f64,
) -> usize {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return 0;
    }
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iters {
        if dot(&r, &r).sqrt() <= rel_tol * b_norm {
            return it;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return it;
        }
        let alpha = rz / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..z.len() {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
    }
    max_iters
}
