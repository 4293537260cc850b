//! Dense helpers on top of `nalgebra`: weighted normal equations with a
//! ridge fallback, residual makers and compensated sums.

use nalgebra::{DMatrix, DVector};

use crate::error::{DrError, Result};

/// Relative pivot floor below which a Jacobi-scaled Cholesky factor is
/// treated as numerically singular.
const PIVOT_FLOOR: f64 = 1e-13;

/// Outcome of a symmetric positive (semi)definite solve.
#[derive(Debug, Clone)]
pub struct SpdSolve {
    pub x: DVector<f64>,
    /// Ridge added to the diagonal, zero when the plain system was solved.
    pub ridge: f64,
    pub condition: f64,
}

/// Ridge used on singularity when the caller does not supply one:
/// `1e-8 * trace(a) / s`.
pub fn default_ridge(a: &DMatrix<f64>) -> f64 {
    let s = a.nrows().max(1) as f64;
    1e-8 * a.trace().abs() / s
}

fn jacobi_cholesky(a: &DMatrix<f64>) -> Option<(nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>, DVector<f64>, f64)> {
    let n = a.nrows();
    let mut scale = DVector::zeros(n);
    for i in 0..n {
        let d = a[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let mut scaled = a.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }
    let chol = scaled.cholesky()?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let p = l[(i, i)] * l[(i, i)];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if !(lo > PIVOT_FLOOR * hi) {
        return None;
    }
    Some((chol, scale, hi / lo))
}

/// Solve `a x = b` for symmetric positive definite `a`.
///
/// The system is Jacobi-scaled before factorisation. If the factorisation
/// fails, the solve is retried once with `ridge` (or [`default_ridge`] when
/// `ridge == 0`) added to the diagonal.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64, context: &str) -> Result<SpdSolve> {
    if let Some(x) = solve_scaled(a, b) {
        return Ok(SpdSolve { x: x.0, ridge: 0.0, condition: x.1 });
    }
    let lambda = if ridge > 0.0 { ridge } else { default_ridge(a) };
    if !(lambda > 0.0) {
        return Err(DrError::singular(context, f64::INFINITY));
    }
    let mut ar = a.clone();
    for i in 0..ar.nrows() {
        ar[(i, i)] += lambda;
    }
    match solve_scaled(&ar, b) {
        Some((x, condition)) => Ok(SpdSolve { x, ridge: lambda, condition }),
        None => Err(DrError::singular(context, f64::INFINITY)),
    }
}

fn solve_scaled(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let (chol, scale, cond) = jacobi_cholesky(a)?;
    let rhs = b.component_mul(&scale);
    let y = chol.solve(&rhs);
    let x = y.component_mul(&scale);
    if x.iter().all(|v| v.is_finite()) {
        Some((x, cond))
    } else {
        None
    }
}

/// Inverse of a symmetric positive definite matrix (Jacobi-scaled Cholesky).
pub fn spd_inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (chol, scale, _) =
        jacobi_cholesky(a).ok_or_else(|| DrError::singular(context, f64::INFINITY))?;
    let mut inv = chol.inverse();
    let n = a.nrows();
    for j in 0..n {
        for i in 0..n {
            inv[(i, j)] *= scale[i] * scale[j];
        }
    }
    Ok(inv)
}

/// General square inverse through LU with a crude condition estimate.
pub fn lu_inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| DrError::singular(context, f64::INFINITY))?;
    let cond = a.norm() * inv.norm();
    if !cond.is_finite() || cond > 1e15 {
        return Err(DrError::singular(context, cond));
    }
    Ok(inv)
}

/// Solve a general square system, reporting a condition estimate on failure.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let inv = lu_inverse(a, context)?;
    let mut x = &inv * b;
    // one step of iterative refinement
    let r = b - a * &x;
    x += &inv * r;
    Ok(x)
}

/// `x' diag(w) x`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut wx = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        wx.row_mut(i).scale_mut(wi);
    }
    x.tr_mul(&wx)
}

/// `x' diag(w) y`.
pub fn weighted_cross(x: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    let wy = DVector::from_iterator(y.len(), w.iter().zip(y).map(|(a, b)| a * b));
    x.tr_mul(&wy)
}

/// Weighted least squares solution of `min sum w (y - x b)^2`.
///
/// Two rounds of iterative refinement keep the weighted normal equations
/// satisfied to near machine precision, which the B-DR identities rely on.
pub fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64, context: &str) -> Result<SpdSolve> {
    let gram = weighted_gram(x, w);
    let rhs = weighted_cross(x, w, y);
    let mut sol = solve_spd(&gram, &rhs, ridge, context)?;
    if sol.ridge == 0.0 {
        for _ in 0..2 {
            let fitted = x * &sol.x;
            let resid: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
            let g = weighted_cross(x, w, &resid);
            let delta = solve_spd(&gram, &g, ridge, context)?;
            sol.x += delta.x;
        }
    }
    Ok(sol)
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix plus its numerical rank.
pub fn symmetric_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let eig = a.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = top * 1e-10 * n as f64;
    let mut inv = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > floor {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            inv += (&v * v.transpose()) / lambda;
        }
    }
    (inv, rank)
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance with denominator `n - 1` (zero for fewer than two values).
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() - 1) as f64
}

/// Sample covariance matrix (denominator `n - 1`) of the rows of `rows`.
pub fn sample_covariance(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let n = rows.nrows();
    let p = rows.ncols();
    if n < 2 {
        return DMatrix::zeros(p, p);
    }
    let means = rows.row_mean();
    let mut centered = rows.clone();
    for i in 0..n {
        let mut r = centered.row_mut(i);
        r -= &means;
    }
    centered.tr_mul(&centered) / (n - 1) as f64
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(eta))` without overflow.
pub fn log1pexp(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}
