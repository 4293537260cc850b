//! Variance estimation: the plug-in B-DR variance, the stacked M-estimation
//! sandwich for the semiparametric fit, and the homoscedastic closed forms.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::linalg::{self, compensated_sum, mean, sample_covariance, sample_variance};
use crate::report::z975;
use crate::semipar::{CTag, CWeights, PropensityModel, SemiparFit};

/// Variances of the B-DR estimator. `*_asymptotic` are for the
/// root-n-scaled estimator; the plain fields are divided by n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BdrVariance {
    pub con: f64,
    pub pop: f64,
    pub con_asymptotic: f64,
    pub pop_asymptotic: f64,
}

/// `sigma^2 P_n{omega^{-1}}` for `tau_con`, plus the sample variance of
/// `gamma_hat(X)` for `tau_pop`.
pub fn var_bdr(gamma_hat: &[f64], pi1: &[f64], sigma2: f64) -> BdrVariance {
    let n = pi1.len() as f64;
    let inv_omega = mean(&pi1.iter().map(|&p| 1.0 / (p * (1.0 - p))).collect::<Vec<_>>());
    let con = sigma2 * inv_omega;
    let pop = con + sample_variance(gamma_hat);
    BdrVariance { con: con / n, pop: pop / n, con_asymptotic: con, pop_asymptotic: pop }
}

/// Sample analogues of the derivative blocks of the stacked estimating
/// equations together with per-unit influence values.
///
/// With `M = [[a, b, e], [c, d, 0], [0, 0, k]]` (rows: beta, theta, alpha)
/// the influence function of `(beta, theta, alpha)` is `-M^{-1} S`.
#[derive(Debug, Clone)]
pub struct SandwichPieces {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Empty (d x 0) when the propensity is treated as known.
    pub e: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Whether the partitioned inverse (b = e = 0) was used.
    pub block_inverse: bool,
    /// Per-unit `S1` values, n x d.
    pub s1: DMatrix<f64>,
    /// Influence of `beta_hat`, n x d.
    pub psi: DMatrix<f64>,
    /// Influence of `P_{n,omega_hat}(beta'V)`.
    pub phi: Vec<f64>,
    /// Influence of `P_n(beta'V)`.
    pub varphi: Vec<f64>,
    /// Sample variance of `psi`.
    pub psi_cov: DMatrix<f64>,
    /// Sample variance of `phi`.
    pub lambda_omega: f64,
    /// Sample variance of `varphi`.
    pub lambda: f64,
    pub n: usize,
}

impl SandwichPieces {
    /// Wald interval for coordinate `j` of `beta_hat`.
    pub fn beta_ci(&self, fit: &SemiparFit, j: usize) -> (f64, f64) {
        let se = (self.psi_cov[(j, j)] / self.n as f64).sqrt();
        (fit.beta[j] - z975() * se, fit.beta[j] + z975() * se)
    }

    /// `Omega_hat Sigma_hat S1_i = (P_n omega_hat V V')^{-1} S1_i`, the
    /// influence of `beta_hat` when both working models hold.
    pub fn psi_simplified(&self, fit: &SemiparFit) -> Result<DMatrix<f64>> {
        let omega: Vec<f64> = fit.propensity.fitted.iter().map(|&p| p * (1.0 - p)).collect();
        let g = linalg::weighted_gram(&fit.v, &omega) / self.n as f64;
        let inv = linalg::spd_inverse(&g, "weighted V Gram")?;
        Ok(&self.s1 * inv)
    }
}

/// Partitioned inverse of `M` (first block row only), valid in general.
pub fn partitioned_first_row(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    e: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d_inv = linalg::lu_inverse(d, "sandwich block d")?;
    let a_inv = linalg::lu_inverse(a, "sandwich block a")?;
    let schur_a = linalg::lu_inverse(&(a - b * &d_inv * c), "a - b d^-1 c")?;
    let schur_d = linalg::lu_inverse(&(d - c * &a_inv * b), "d - c a^-1 b")?;
    let m11 = schur_a.clone();
    let m12 = -(&a_inv * b * schur_d);
    let m13 = if e.ncols() > 0 {
        let k_inv = linalg::lu_inverse(k, "sandwich block k")?;
        -(&schur_a * e * k_inv)
    } else {
        DMatrix::zeros(a.nrows(), 0)
    };
    Ok((m11, m12, m13))
}

/// Stacked sandwich at a semiparametric fit.
pub fn sandwich(ds: &Dataset, fit: &SemiparFit) -> Result<SandwichPieces> {
    let n = ds.n();
    let nf = n as f64;
    let v = &fit.v;
    let vdag = &fit.vdag;
    let (dd, kk) = (v.ncols(), vdag.ncols());
    let pi = &fit.propensity.fitted;
    let q = match &fit.propensity_model {
        PropensityModel::Logistic { q } => Some(q),
        PropensityModel::Fixed => None,
    };
    let ss = q.map_or(0, |q| q.ncols());
    let r = fit.residuals(ds);

    let mut a = DMatrix::zeros(dd, dd);
    let mut b = DMatrix::zeros(dd, kk);
    let mut c = DMatrix::zeros(kk, dd);
    let mut d = DMatrix::zeros(kk, kk);
    let mut e = DMatrix::zeros(dd, ss);
    let mut k = DMatrix::zeros(ss, ss);
    let mut s1 = DMatrix::zeros(n, dd);
    let mut s_all = DMatrix::zeros(n, dd + kk + ss);

    for i in 0..n {
        let t = ds.t()[i] as f64;
        let p = pi[i];
        let w = p * (1.0 - p);
        let vi = v.row(i).transpose();
        let vdi = vdag.row(i).transpose();
        let cv = apply_c(&fit.c, i, &vi);
        let s1i = &cv * (r[i] * (t - p));
        s1.row_mut(i).copy_from(&s1i.transpose());
        s_all.view_mut((i, 0), (1, dd)).copy_from(&s1i.transpose());
        s_all.view_mut((i, dd), (1, kk)).copy_from(&(vdi.transpose() * r[i]));
        a -= &cv * vi.transpose() * (t * (t - p));
        b -= &cv * vdi.transpose() * (t - p);
        c -= &vdi * vi.transpose() * t;
        d -= &vdi * vdi.transpose();
        if let Some(q) = q {
            let qi = q.row(i).transpose();
            s_all.view_mut((i, dd + kk), (1, ss)).copy_from(&(qi.transpose() * (t - p)));
            // derivative of c(X)(T - pi) along the logistic linear predictor
            let (dc, cvec) = match (&fit.c, fit.c_tag) {
                (CWeights::Scalar(_), CTag::InverseOmega) => {
                    (-(t * (1.0 - p) / p + (1.0 - t) * p / (1.0 - p)), vi.clone())
                }
                (CWeights::Scalar(cs), _) => (-w * cs[i], vi.clone()),
                (CWeights::Matrix(_), _) => (-w, cv.clone()),
            };
            e += &cvec * qi.transpose() * (r[i] * dc);
            k -= &qi * qi.transpose() * w;
        }
    }
    a /= nf;
    b /= nf;
    c /= nf;
    d /= nf;
    e /= nf;
    k /= nf;

    let small = b.amax() <= 1e-8 && (e.ncols() == 0 || e.amax() <= 1e-8);
    let psi = if small {
        let (m11, m12, m13) = partitioned_first_row(&a, &b, &c, &d, &e, &k)?;
        let mut row = DMatrix::zeros(dd, dd + kk + ss);
        row.view_mut((0, 0), (dd, dd)).copy_from(&m11);
        row.view_mut((0, dd), (dd, kk)).copy_from(&m12);
        if ss > 0 {
            row.view_mut((0, dd + kk), (dd, ss)).copy_from(&m13);
        }
        -(&s_all * row.transpose())
    } else {
        let mut m = DMatrix::zeros(dd + kk + ss, dd + kk + ss);
        m.view_mut((0, 0), (dd, dd)).copy_from(&a);
        m.view_mut((0, dd), (dd, kk)).copy_from(&b);
        m.view_mut((dd, 0), (kk, dd)).copy_from(&c);
        m.view_mut((dd, dd), (kk, kk)).copy_from(&d);
        if ss > 0 {
            m.view_mut((0, dd + kk), (dd, ss)).copy_from(&e);
            m.view_mut((dd + kk, dd + kk), (ss, ss)).copy_from(&k);
        }
        let m_inv = linalg::lu_inverse(&m, "stacked sandwich matrix")?;
        let row = m_inv.rows(0, dd).into_owned();
        -(&s_all * row.transpose())
    };

    let omega: Vec<f64> = pi.iter().map(|&p| p * (1.0 - p)).collect();
    let phi = weighted_mean_influence_raw(v, &fit.beta, &psi, &omega);
    let varphi = weighted_mean_influence_raw(v, &fit.beta, &psi, &vec![1.0; n]);
    let psi_cov = sample_covariance(&psi);
    let lambda_omega = sample_variance(&phi);
    let lambda = sample_variance(&varphi);
    Ok(SandwichPieces {
        a,
        b,
        c,
        d,
        e,
        k,
        block_inverse: small,
        s1,
        psi,
        phi,
        varphi,
        psi_cov,
        lambda_omega,
        lambda,
        n,
    })
}

fn apply_c(c: &CWeights, i: usize, v: &DVector<f64>) -> DVector<f64> {
    match c {
        CWeights::Scalar(cs) => v * cs[i],
        CWeights::Matrix(m) => &m[i] * v,
    }
}

fn weighted_mean_influence_raw(v: &DMatrix<f64>, beta: &DVector<f64>, psi: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let n = v.nrows();
    let wsum = compensated_sum(w.iter().copied());
    let wn = wsum / n as f64;
    let ev = v.tr_mul(&DVector::from_column_slice(w)) / wsum;
    let g = v * beta;
    let est = compensated_sum((0..n).map(|i| w[i] * g[i])) / wsum;
    let lin = psi * ev;
    (0..n).map(|i| lin[i] + w[i] / wn * (g[i] - est)).collect()
}

/// Influence of `P_n{w V}'beta / P_n{w}`:
/// `E_w(V)'psi_i + w_i / P_n(w) (V_i'beta - est)`.
pub fn weighted_mean_influence(fit: &SemiparFit, pieces: &SandwichPieces, w: &[f64], est: f64) -> Vec<f64> {
    let n = fit.v.nrows();
    let wsum = compensated_sum(w.iter().copied());
    let wn = wsum / n as f64;
    let ev = fit.v.tr_mul(&DVector::from_column_slice(w)) / wsum;
    let g = fit.gamma_values();
    let lin = &pieces.psi * ev;
    (0..n).map(|i| lin[i] + w[i] / wn * (g[i] - est)).collect()
}

/// Sample variance of an influence vector (denominator n - 1).
pub fn influence_variance(infl: &[f64]) -> f64 {
    sample_variance(infl)
}

/// Population quantities for the closed forms, with the law of `X`
/// represented by a reference sample.
#[derive(Debug, Clone)]
pub struct PopulationInputs {
    /// `V = v^d(X)` on the reference sample.
    pub v: DMatrix<f64>,
    /// `pi(X)`.
    pub pi: Vec<f64>,
    /// `gamma(X)`.
    pub gamma: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct Theorem1Report {
    /// `{E_omega(VV')}^{-1}`.
    pub sigma: DMatrix<f64>,
    /// `1 / E{omega}`.
    pub omega: f64,
    /// `b(X_i) = 1 - 3 pi + 3 pi^2`.
    pub b_values: Vec<f64>,
    /// Overlap-weighted projection coefficients of `gamma` on `V`.
    pub beta_dagger: DVector<f64>,
    pub gamma_beta: DMatrix<f64>,
    /// `Omega Sigma Gamma_beta Sigma`.
    pub psi: DMatrix<f64>,
    pub lambda_omega_terms: [f64; 3],
    pub lambda_omega: f64,
    pub lambda_terms: [f64; 3],
    pub lambda: f64,
    /// Simplified forms valid when `gamma` lies in `span(V)`.
    pub lambda_omega_part_d: f64,
    pub lambda_part_d: f64,
    pub gamma_con: DMatrix<f64>,
    /// `Gamma_beta - Gamma_con`.
    pub gamma_beta_c: DMatrix<f64>,
    /// `E_omega[omega VV' (Pi_perp gamma)^2]`, computed directly.
    pub gamma_beta_c_direct: DMatrix<f64>,
    /// B-DR asymptotic variances `sigma^2 E{1/omega} (+ var gamma)`.
    pub bdr_con: f64,
    pub bdr_pop: f64,
    /// `Omega^{-1} sigma^2 E_omega[(Pi_omega[1/omega | V^perp])^2]`.
    pub efficiency_gap: f64,
}

/// Closed-form asymptotic variances under the homoscedastic model with both
/// working models correct. Projections are overlap-weighted least squares
/// on the reference sample.
pub fn theorem1_closed_forms(inp: &PopulationInputs) -> Result<Theorem1Report> {
    let n = inp.v.nrows();
    if inp.pi.len() != n || inp.gamma.len() != n {
        return Err(DrError::InvalidData("reference sample lengths disagree".into()));
    }
    if !(inp.sigma2 >= 0.0) {
        return Err(DrError::InvalidData("sigma^2 must be nonnegative".into()));
    }
    let v = &inp.v;
    let d = v.ncols();
    let s2 = inp.sigma2;
    let om: Vec<f64> = inp.pi.iter().map(|&p| p * (1.0 - p)).collect();
    let e_om = mean(&om);
    let omega = 1.0 / e_om;
    // E_omega(f) = E(omega f) / E(omega)
    let e_w = |f: &dyn Fn(usize) -> f64| compensated_sum((0..n).map(|i| om[i] * f(i))) / (n as f64 * e_om);
    let e_w_mat = |f: &dyn Fn(usize) -> f64| {
        let w: Vec<f64> = (0..n).map(|i| om[i] * f(i) / (n as f64 * e_om)).collect();
        linalg::weighted_gram(v, &w)
    };

    let sigma = linalg::spd_inverse(&e_w_mat(&|_| 1.0), "E_omega(VV')")?;
    let beta_dagger = linalg::wls(v, &inp.gamma, &om, 0.0, "overlap projection of gamma")?.x;
    let gb = v * &beta_dagger;
    let perp: Vec<f64> = (0..n).map(|i| inp.gamma[i] - gb[i]).collect();
    let bfun: Vec<f64> = inp.pi.iter().map(|&p| 1.0 - 3.0 * p + 3.0 * p * p).collect();

    let gamma_beta = e_w_mat(&|i| s2 + perp[i] * perp[i] * bfun[i]);
    let psi = &sigma * &gamma_beta * &sigma * omega;

    let e_w_gb = e_w(&|i| gb[i]);
    let e_gb = mean(gb.as_slice());
    let lw1 = omega * (s2 + e_w(&|i| perp[i] * perp[i] * bfun[i]));
    let lw2 = omega * e_w(&|i| om[i] * (gb[i] - e_w_gb).powi(2));
    let lw3 = 2.0 * omega * e_w(&|i| om[i] * perp[i] * (gb[i] - e_w_gb));

    let inv_om: Vec<f64> = om.iter().map(|w| 1.0 / w).collect();
    let proj_coef = linalg::wls(v, &inv_om, &om, 0.0, "overlap projection of 1/omega")?.x;
    let proj = v * proj_coef;
    let l1 = e_w(&|i| proj[i] * proj[i] * (s2 + perp[i] * perp[i] * bfun[i])) / omega;
    let l2 = mean(&(0..n).map(|i| (gb[i] - e_gb).powi(2)).collect::<Vec<_>>());
    let l3 = 2.0 * e_w(&|i| proj[i] * perp[i] * (gb[i] - e_w_gb)) / omega;

    let e_g = mean(&inp.gamma);
    let var_gamma = mean(&inp.gamma.iter().map(|g| (g - e_g).powi(2)).collect::<Vec<_>>());
    let lambda_omega_part_d = omega * (s2 + e_w(&|i| om[i] * (gb[i] - e_w_gb).powi(2)));
    let lambda_part_d = s2 * e_w(&|i| proj[i] * proj[i]) / omega + var_gamma;

    let gamma_con = e_w_mat(&|i| s2 + perp[i] * perp[i] * (1.0 - 2.0 * inp.pi[i]).powi(2));
    let gamma_beta_c = &gamma_beta - &gamma_con;
    let gamma_beta_c_direct = e_w_mat(&|i| om[i] * perp[i] * perp[i]);

    let bdr_con = s2 * mean(&inv_om);
    let bdr_pop = bdr_con + var_gamma;
    let efficiency_gap = s2 * e_w(&|i| (inv_om[i] - proj[i]).powi(2)) / omega;
    debug_assert_eq!(sigma.nrows(), d);

    Ok(Theorem1Report {
        sigma,
        omega,
        b_values: bfun,
        beta_dagger,
        gamma_beta,
        psi,
        lambda_omega_terms: [lw1, lw2, lw3],
        lambda_omega: lw1 + lw2 + lw3,
        lambda_terms: [l1, l2, l3],
        lambda: l1 + l2 + l3,
        lambda_omega_part_d,
        lambda_part_d,
        gamma_con,
        gamma_beta_c,
        gamma_beta_c_direct,
        bdr_con,
        bdr_pop,
        efficiency_gap,
    })
}

/// The closed forms with `pi`, `gamma` and `sigma^2` replaced by estimates
/// from a fit: `pi_hat`, `beta_hat'V`, and the residual mean square over
/// `n - d - k` degrees of freedom.
pub fn theorem1_plug_in(ds: &Dataset, fit: &SemiparFit) -> Result<Theorem1Report> {
    let r = fit.residuals(ds);
    let df = ds.n().saturating_sub(fit.v.ncols() + fit.vdag.ncols()).max(1);
    let sigma2 = compensated_sum(r.iter().map(|x| x * x)) / df as f64;
    theorem1_closed_forms(&PopulationInputs {
        v: fit.v.clone(),
        pi: fit.propensity.fitted.clone(),
        gamma: fit.gamma_values().iter().copied().collect(),
        sigma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_half_propensity() {
        let v = var_bdr(&[0.0; 4], &[0.5; 4], 1.0);
        assert_relative_eq!(v.con_asymptotic, 4.0, epsilon = 1e-15);
        assert_relative_eq!(v.pop_asymptotic, 4.0, epsilon = 1e-15);
        assert_relative_eq!(v.con, 1.0, epsilon = 1e-15);
        let v = var_bdr(&[2.0; 4], &[0.3, 0.5, 0.6, 0.2], 1.5);
        assert_eq!(v.con, v.pop);
    }

    #[test]
    fn closed_forms_at_constant_half() {
        let n = 50;
        let v = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 / 7.0).sin() });
        let gamma: Vec<f64> = (0..n).map(|i| (i as f64 / 3.0).cos()).collect();
        let inp = PopulationInputs { v: v.clone(), pi: vec![0.5; n], gamma: gamma.clone(), sigma2: 2.0 };
        let r = theorem1_closed_forms(&inp).unwrap();
        assert_relative_eq!(r.omega, 4.0, epsilon = 1e-12);
        assert!(r.b_values.iter().all(|b| (b - 0.25).abs() < 1e-15));
        // constant omega: the weighted projection is ordinary least squares
        let ols = linalg::wls(&v, &gamma, &vec![1.0; n], 0.0, "ols").unwrap().x;
        assert_relative_eq!(r.beta_dagger, ols, epsilon = 1e-12);
        let fitted = &v * &ols;
        let perp_sq = mean(&(0..n).map(|i| (gamma[i] - fitted[i]).powi(2)).collect::<Vec<_>>());
        assert_relative_eq!(r.lambda_omega_terms[0], 4.0 * (2.0 + 0.25 * perp_sq), epsilon = 1e-12);
        assert_relative_eq!((&r.gamma_beta_c - &r.gamma_beta_c_direct).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn part_d_matches_general_when_gamma_in_span() {
        let n = 200;
        let v = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() * 2.0 });
        let pi: Vec<f64> = (0..n).map(|i| linalg::expit((i as f64 * 0.11).cos())).collect();
        let gamma: Vec<f64> = (0..n).map(|i| 0.5 + 1.5 * v[(i, 1)]).collect();
        let r = theorem1_closed_forms(&PopulationInputs { v, pi, gamma, sigma2: 1.3 }).unwrap();
        assert!(r.lambda_terms[2].abs() < 1e-8);
        assert!(r.lambda_omega_terms[2].abs() < 1e-8);
        assert_relative_eq!(r.lambda, r.lambda_part_d, epsilon = 1e-8);
        assert_relative_eq!(r.lambda_omega, r.lambda_omega_part_d, epsilon = 1e-8);
        assert_relative_eq!(r.bdr_pop - r.lambda_part_d, r.efficiency_gap, epsilon = 1e-8);
    }

    #[test]
    fn partitioned_inverse_matches_dense() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 0.3, 0.1, -1.5]);
        let b = DMatrix::from_row_slice(2, 3, &[0.2, -0.1, 0.05, 0.0, 0.3, -0.2]);
        let c = DMatrix::from_row_slice(3, 2, &[-0.5, 0.1, 0.2, -0.4, 0.0, 0.3]);
        let d = DMatrix::from_row_slice(3, 3, &[-3.0, 0.2, 0.1, 0.2, -2.5, 0.0, 0.1, 0.0, -2.0]);
        let e = DMatrix::from_row_slice(2, 1, &[0.4, -0.2]);
        let k = DMatrix::from_row_slice(1, 1, &[-0.8]);
        let mut m = DMatrix::zeros(6, 6);
        m.view_mut((0, 0), (2, 2)).copy_from(&a);
        m.view_mut((0, 2), (2, 3)).copy_from(&b);
        m.view_mut((0, 5), (2, 1)).copy_from(&e);
        m.view_mut((2, 0), (3, 2)).copy_from(&c);
        m.view_mut((2, 2), (3, 3)).copy_from(&d);
        m.view_mut((5, 5), (1, 1)).copy_from(&k);
        let dense = m.try_inverse().unwrap();
        let (m11, m12, m13) = partitioned_first_row(&a, &b, &c, &d, &e, &k).unwrap();
        assert_relative_eq!(dense.view((0, 0), (2, 2)).into_owned(), m11, epsilon = 1e-12);
        assert_relative_eq!(dense.view((0, 2), (2, 3)).into_owned(), m12, epsilon = 1e-12);
        assert_relative_eq!(dense.view((0, 5), (2, 1)).into_owned(), m13, epsilon = 1e-12);
    }
}
