//! Semiparametric effect-modification regression.
//!
//! The working models are `gamma(x) = beta' v^d(x)` for the treatment effect
//! and `E{Y - T beta'V | X} = theta' v^k(X)` for the baseline outcome, with
//! `V = v^d(X)` contained in `V_dag = v^k(X)`. With `H(beta) = Y - T beta'V`
//! and `r = H(beta) - theta'V_dag` the estimating functions are
//!
//! ```text
//! S1 = c(X) V r (T - pi(X; alpha))
//! S2 = V_dag r
//! S3 = q(X) (T - pi(X; alpha))
//! ```
//!
//! All three are linear in `(beta, theta)`, so the fit is closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSpec};
use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::estimators::{fit_propensity_design, FittedPropensity};
use crate::glm::IwlsConfig;
use crate::linalg::{self, compensated_sum};
use crate::report::EstimateReport;
use crate::variance;

/// Choice of `c(X)` premultiplying `S1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CTag {
    Identity,
    /// `c(X) = 1 / {pi(X)(1 - pi(X))}`.
    InverseOmega,
    /// Per-unit matrices supplied through [`fit_semipar_custom_c`].
    Custom,
}

/// Residual maker for the sample projection onto `span(V_dag)`.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    vdag: DMatrix<f64>,
    /// `(V_dag' V_dag)^{-1}`, equivalently `P_n(V_dag V_dag')^{-1} / n`.
    gram_inv: DMatrix<f64>,
    pub ridge: f64,
}

impl ProjectionCache {
    pub fn new(vdag: &DMatrix<f64>) -> Result<Self> {
        let gram = vdag.tr_mul(vdag);
        let (gram_inv, ridge) = match linalg::spd_inverse(&gram, "projection Gram matrix") {
            Ok(inv) => (inv, 0.0),
            Err(_) => {
                let lambda = linalg::default_ridge(&gram);
                let mut g = gram.clone();
                for i in 0..g.nrows() {
                    g[(i, i)] += lambda;
                }
                (linalg::spd_inverse(&g, "projection Gram matrix")?, lambda)
            }
        };
        Ok(Self { vdag: vdag.clone(), gram_inv, ridge })
    }

    pub fn vdag(&self) -> &DMatrix<f64> {
        &self.vdag
    }

    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    /// `W - V_dag (V_dag'V_dag)^{-1} V_dag' W`, column by column, with one
    /// refinement pass.
    pub fn residual_matrix(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let coef = &self.gram_inv * self.vdag.tr_mul(w);
        let mut r = w - &self.vdag * coef;
        let coef2 = &self.gram_inv * self.vdag.tr_mul(&r);
        r -= &self.vdag * coef2;
        r
    }

    pub fn residual(&self, w: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(w.len(), 1, w.as_slice());
        let r = self.residual_matrix(&m);
        DVector::from_column_slice(r.as_slice())
    }
}

/// `Pi_n(w | [V_dag]^perp)`.
pub fn residual_projection(w: &[f64], vdag: &DMatrix<f64>) -> Result<Vec<f64>> {
    if w.len() != vdag.nrows() {
        return Err(DrError::InvalidData(format!(
            "vector has length {}, design has {} rows",
            w.len(),
            vdag.nrows()
        )));
    }
    let cache = ProjectionCache::new(vdag)?;
    Ok(cache.residual(&DVector::from_column_slice(w)).iter().copied().collect())
}

/// How the propensity entering `S1` was obtained.
#[derive(Debug, Clone)]
pub enum PropensityModel {
    /// Logistic ML on the stored design `q`; contributes `S3` to the sandwich.
    Logistic { q: DMatrix<f64> },
    /// Treated as known (true propensities or a non-logistic fit).
    Fixed,
}

/// Per-unit `c(X_i)`.
#[derive(Debug, Clone)]
pub enum CWeights {
    Scalar(Vec<f64>),
    Matrix(Vec<DMatrix<f64>>),
}

impl CWeights {
    fn apply(&self, i: usize, v: &DVector<f64>) -> DVector<f64> {
        match self {
            CWeights::Scalar(c) => v * c[i],
            CWeights::Matrix(m) => &m[i] * v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemiparFit {
    pub beta: DVector<f64>,
    pub theta: DVector<f64>,
    pub propensity: FittedPropensity,
    pub propensity_model: PropensityModel,
    pub v_spec: BasisSpec,
    pub vdag_spec: BasisSpec,
    pub c_tag: CTag,
    pub c: CWeights,
    /// `V`, n x d.
    pub v: DMatrix<f64>,
    /// `V_dag`, n x k.
    pub vdag: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl SemiparFit {
    /// `r_i = Y_i - T_i beta'V_i - theta'V_dag_i`.
    pub fn residuals(&self, ds: &Dataset) -> DVector<f64> {
        let vb = &self.v * &self.beta;
        let vt = &self.vdag * &self.theta;
        DVector::from_iterator(
            ds.n(),
            (0..ds.n()).map(|i| ds.y()[i] - ds.t()[i] as f64 * vb[i] - vt[i]),
        )
    }

    /// Sup-norms of `P_n S1` and `P_n S2` at the returned fit.
    pub fn equation_residuals(&self, ds: &Dataset) -> (f64, f64) {
        let (s1, s2) = stacked_residual(ds, &self.v, &self.vdag, &self.propensity.fitted, &self.c, &self.beta, &self.theta);
        let n = ds.n() as f64;
        (s1.amax() / n, s2.amax() / n)
    }

    /// `beta' V_i` for every unit.
    pub fn gamma_values(&self) -> DVector<f64> {
        &self.v * &self.beta
    }
}

fn check_nesting(v_spec: &BasisSpec, vdag_spec: &BasisSpec) -> Result<()> {
    if !v_spec.is_subset_of(vdag_spec) {
        return Err(DrError::Basis(format!(
            "every term of v ({v_spec}) must also appear in v_dag ({vdag_spec})"
        )));
    }
    Ok(())
}

/// Fit with `c` = identity or inverse-omega and a logistic ML propensity.
pub fn fit_semipar(
    ds: &Dataset,
    v_spec: &BasisSpec,
    vdag_spec: &BasisSpec,
    prop_spec: &BasisSpec,
    c_tag: CTag,
    cfg: &IwlsConfig,
) -> Result<SemiparFit> {
    check_nesting(v_spec, vdag_spec)?;
    ds.require_both_arms()?;
    let v = design_matrix(ds, v_spec)?;
    let vdag = design_matrix(ds, vdag_spec)?;
    let q = design_matrix(ds, prop_spec)?;
    let pi = fit_propensity_design(ds, &q, prop_spec, cfg)?;
    fit_semipar_designs(ds, v, vdag, v_spec, vdag_spec, pi, PropensityModel::Logistic { q }, c_tag)
}

/// Fit on precomputed designs and a given propensity.
#[allow(clippy::too_many_arguments)]
pub fn fit_semipar_designs(
    ds: &Dataset,
    v: DMatrix<f64>,
    vdag: DMatrix<f64>,
    v_spec: &BasisSpec,
    vdag_spec: &BasisSpec,
    propensity: FittedPropensity,
    propensity_model: PropensityModel,
    c_tag: CTag,
) -> Result<SemiparFit> {
    let c = match c_tag {
        CTag::Identity => CWeights::Scalar(vec![1.0; ds.n()]),
        CTag::InverseOmega => {
            let c: Vec<f64> = propensity.fitted.iter().map(|&p| 1.0 / (p * (1.0 - p))).collect();
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(DrError::InvalidData(format!(
                    "inverse overlap weight is not finite at row {} (pi = {})",
                    i + 1,
                    propensity.fitted[i]
                )));
            }
            CWeights::Scalar(c)
        }
        CTag::Custom => {
            return Err(DrError::Config(vec!["custom c requires fit_semipar_custom_c".into()]))
        }
    };
    solve(ds, v, vdag, v_spec, vdag_spec, propensity, propensity_model, c_tag, c)
}

/// Expert entry point: `S1` premultiplied by arbitrary per-unit `d x d`
/// matrices. No optimality or robustness guarantees are implied.
#[allow(clippy::too_many_arguments)]
pub fn fit_semipar_custom_c(
    ds: &Dataset,
    v: DMatrix<f64>,
    vdag: DMatrix<f64>,
    v_spec: &BasisSpec,
    vdag_spec: &BasisSpec,
    propensity: FittedPropensity,
    propensity_model: PropensityModel,
    c: Vec<DMatrix<f64>>,
) -> Result<SemiparFit> {
    let d = v.ncols();
    if c.len() != ds.n() || c.iter().any(|m| m.nrows() != d || m.ncols() != d) {
        return Err(DrError::InvalidData(format!("custom c needs {} matrices of size {d}x{d}", ds.n())));
    }
    solve(ds, v, vdag, v_spec, vdag_spec, propensity, propensity_model, CTag::Custom, CWeights::Matrix(c))
}

fn stacked_residual(
    ds: &Dataset,
    v: &DMatrix<f64>,
    vdag: &DMatrix<f64>,
    pi: &[f64],
    c: &CWeights,
    beta: &DVector<f64>,
    theta: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = ds.n();
    let (d, k) = (v.ncols(), vdag.ncols());
    let vb = v * beta;
    let vt = vdag * theta;
    let mut s1_terms: Vec<Vec<f64>> = vec![Vec::with_capacity(n); d];
    let mut s2_terms: Vec<Vec<f64>> = vec![Vec::with_capacity(n); k];
    for i in 0..n {
        let t = ds.t()[i] as f64;
        let r = ds.y()[i] - t * vb[i] - vt[i];
        let vi = v.row(i).transpose();
        let cv = c.apply(i, &vi);
        for j in 0..d {
            s1_terms[j].push(cv[j] * r * (t - pi[i]));
        }
        for j in 0..k {
            s2_terms[j].push(vdag[(i, j)] * r);
        }
    }
    let s1 = DVector::from_iterator(d, s1_terms.into_iter().map(compensated_sum));
    let s2 = DVector::from_iterator(k, s2_terms.into_iter().map(compensated_sum));
    (s1, s2)
}

#[allow(clippy::too_many_arguments)]
fn solve(
    ds: &Dataset,
    v: DMatrix<f64>,
    vdag: DMatrix<f64>,
    v_spec: &BasisSpec,
    vdag_spec: &BasisSpec,
    propensity: FittedPropensity,
    propensity_model: PropensityModel,
    c_tag: CTag,
    c: CWeights,
) -> Result<SemiparFit> {
    let n = ds.n();
    let (d, k) = (v.ncols(), vdag.ncols());
    if d > k {
        return Err(DrError::Basis(format!("dim v ({d}) exceeds dim v_dag ({k})")));
    }
    let pi = &propensity.fitted;
    if pi.len() != n {
        return Err(DrError::InvalidData("propensity length does not match the data".into()));
    }
    let mut warnings = Vec::new();
    let cache = ProjectionCache::new(&vdag)?;
    if cache.ridge > 0.0 {
        warnings.push(format!("singular v_dag Gram matrix, ridge {:e} applied", cache.ridge));
    }
    let mut tv = v.clone();
    for i in 0..n {
        if ds.t()[i] == 0 {
            tv.row_mut(i).fill(0.0);
        }
    }
    let y = DVector::from_column_slice(ds.y());
    let ry = cache.residual(&y);
    let rtv = cache.residual_matrix(&tv);

    // A = sum c V (T - pi) R(TV)', rhs = sum c V (T - pi) R(Y)
    let mut a = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for i in 0..n {
        let resid_t = ds.t()[i] as f64 - pi[i];
        let cv = c.apply(i, &v.row(i).transpose()) * resid_t;
        a += &cv * rtv.row(i);
        rhs += &cv * ry[i];
    }
    let beta = linalg::solve_square(&a, &rhs, "beta system")?;
    let h: Vec<f64> = (0..n).map(|i| ds.y()[i] - (tv.row(i) * &beta)[0]).collect();
    let theta_sol = linalg::wls(&vdag, &h, &vec![1.0; n], 0.0, "theta system")?;
    let mut beta = beta;
    let mut theta = theta_sol.x;

    // Newton refinement on the stacked linear system (exact in one step, the
    // extra passes mop up rounding)
    let jac = stacked_jacobian(ds, &v, &vdag, pi, &c);
    if let Ok(jinv) = linalg::lu_inverse(&jac, "stacked system") {
        for _ in 0..2 {
            let (s1, s2) = stacked_residual(ds, &v, &vdag, pi, &c, &beta, &theta);
            let mut g = DVector::zeros(d + k);
            g.rows_mut(0, d).copy_from(&s1);
            g.rows_mut(d, k).copy_from(&s2);
            let delta = -(&jinv * g);
            beta += delta.rows(0, d);
            theta += delta.rows(d, k);
        }
    }

    if let Some(i) = (0..n).find(|&i| !((ds.t()[i] as f64 - pi[i]).abs() < 1.0)) {
        warnings.push(format!("|T - pi| is not below 1 at row {}", i + 1));
    }
    Ok(SemiparFit {
        beta,
        theta,
        propensity,
        propensity_model,
        v_spec: v_spec.clone(),
        vdag_spec: vdag_spec.clone(),
        c_tag,
        c,
        v,
        vdag,
        warnings,
    })
}

/// Derivative of the summed `(S1, S2)` with respect to `(beta, theta)`.
fn stacked_jacobian(ds: &Dataset, v: &DMatrix<f64>, vdag: &DMatrix<f64>, pi: &[f64], c: &CWeights) -> DMatrix<f64> {
    let (d, k) = (v.ncols(), vdag.ncols());
    let mut j = DMatrix::zeros(d + k, d + k);
    for i in 0..ds.n() {
        let t = ds.t()[i] as f64;
        let vi = v.row(i).transpose();
        let vdi = vdag.row(i).transpose();
        let cv = c.apply(i, &vi) * (t - pi[i]);
        let mut blk = j.view_mut((0, 0), (d, d));
        blk -= &cv * vi.transpose() * t;
        let mut blk = j.view_mut((0, d), (d, k));
        blk -= &cv * vdi.transpose();
        let mut blk = j.view_mut((d, 0), (k, d));
        blk -= &vdi * vi.transpose() * t;
        let mut blk = j.view_mut((d, d), (k, k));
        blk -= &vdi * vdi.transpose();
    }
    j
}

/// `beta' v^d(x)` for one covariate row.
pub fn gamma_hat(fit: &SemiparFit, x_row: &[f64], z_row: Option<&[f64]>) -> Result<f64> {
    let v = fit.v_spec.eval_row(x_row, z_row)?;
    Ok(v.iter().zip(fit.beta.iter()).map(|(a, b)| a * b).sum())
}

/// Weights for averaging `beta'V` over the sample.
#[derive(Debug, Clone, PartialEq)]
pub enum TauWeight {
    Unit,
    /// `pi_hat (1 - pi_hat)`.
    OmegaHat,
    Custom(Vec<f64>),
}

impl TauWeight {
    fn values(&self, fit: &SemiparFit) -> Result<Vec<f64>> {
        let n = fit.v.nrows();
        let w = match self {
            TauWeight::Unit => vec![1.0; n],
            TauWeight::OmegaHat => fit.propensity.fitted.iter().map(|&p| p * (1.0 - p)).collect(),
            TauWeight::Custom(w) => {
                if w.len() != n {
                    return Err(DrError::InvalidData(format!("weight vector has length {}, expected {n}", w.len())));
                }
                if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(DrError::InvalidData("weights must be finite and nonnegative".into()));
                }
                w.clone()
            }
        };
        if !(compensated_sum(w.iter().copied()) > 0.0) {
            return Err(DrError::ZeroDenominator("total weight"));
        }
        Ok(w)
    }
}

/// `P_n{w V}'beta / P_n{w}`.
pub fn tau_point(fit: &SemiparFit, weight: &TauWeight) -> Result<f64> {
    let w = weight.values(fit)?;
    let g = fit.gamma_values();
    let num = compensated_sum((0..w.len()).map(|i| w[i] * g[i]));
    Ok(num / compensated_sum(w.iter().copied()))
}

/// Point estimate plus a sandwich variance.
pub fn tau_from_semipar(ds: &Dataset, fit: &SemiparFit, weight: &TauWeight) -> Result<EstimateReport> {
    let w = weight.values(fit)?;
    let est = tau_point(fit, weight)?;
    let pieces = variance::sandwich(ds, fit)?;
    let infl = variance::weighted_mean_influence(fit, &pieces, &w, est);
    let var = variance::influence_variance(&infl) / ds.n() as f64;
    let tag = match (fit.c_tag, weight) {
        (CTag::Identity, TauWeight::Unit) => "semipar",
        (CTag::Identity, TauWeight::OmegaHat) => "semipar-omega",
        (CTag::InverseOmega, TauWeight::Unit) => "semipar-c-inv",
        (CTag::InverseOmega, TauWeight::OmegaHat) => "semipar-c-inv-omega",
        (_, TauWeight::Custom(_)) => "semipar-custom-weight",
        (CTag::Custom, _) => "semipar-custom-c",
    };
    let mut report = EstimateReport::new(tag, est, var).with_warnings(fit.warnings.iter().cloned());
    if matches!(weight, TauWeight::OmegaHat) {
        report = report.plug_in();
    }
    Ok(report)
}

/// Propensity under the overlap-weight parametrisation
/// `{pi (1 - pi)}^{-1} = alpha' v(x)`, taking the root `pi >= 1/2`.
#[derive(Debug, Clone)]
pub struct WopFit {
    pub alpha: DVector<f64>,
    pub spec: BasisSpec,
    /// `u_i = alpha' v(x_i) > 4`.
    pub u: Vec<f64>,
    pub pi: Vec<f64>,
    /// `1 - pi_i` computed without cancellation.
    pub one_minus_pi: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl WopFit {
    pub fn from_alpha(design: &DMatrix<f64>, alpha: DVector<f64>, spec: BasisSpec) -> Result<Self> {
        let u: Vec<f64> = (design * &alpha).iter().copied().collect();
        if let Some(i) = u.iter().position(|&x| !(x > 4.0)) {
            return Err(DrError::Infeasible(format!(
                "alpha'v = {} at row {} (must exceed 4)",
                u[i],
                i + 1
            )));
        }
        let (pi, one_minus_pi): (Vec<f64>, Vec<f64>) = u.iter().map(|&x| wop_probs(x)).unzip();
        Ok(Self { alpha, spec, u, pi, one_minus_pi, log_likelihood: f64::NAN, iterations: 0 })
    }

    pub fn propensity(&self) -> FittedPropensity {
        FittedPropensity {
            alpha: self.alpha.clone(),
            spec: self.spec.clone(),
            fitted: self.pi.clone(),
            extension: None,
            warnings: Vec::new(),
        }
    }
}

fn wop_probs(u: f64) -> (f64, f64) {
    let s = ((u - 4.0) / u).sqrt();
    let pi = 0.5 * (1.0 + s);
    let q = (2.0 / u) / (1.0 + s);
    (pi, q)
}

fn wop_objective(design: &DMatrix<f64>, t: &[u8], alpha: &DVector<f64>, mu: f64) -> Option<(f64, f64)> {
    let u = design * alpha;
    let mut ll = Vec::with_capacity(t.len());
    let mut bar = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        if !(u[i] > 4.0) {
            return None;
        }
        let (p, q) = wop_probs(u[i]);
        ll.push(if t[i] == 1 { p.ln() } else { q.ln() });
        bar.push((u[i] - 4.0).ln());
    }
    let l = compensated_sum(ll);
    Some((l + mu * compensated_sum(bar), l))
}

/// Coefficient size beyond which [`fit_wop`] reports a divergent fit.
pub const WOP_DIVERGENCE: f64 = 1e6;

/// Log-barrier maximum likelihood for [`WopFit`], started from
/// `alpha = (5, 0, ..., 0)` and driven by Fisher scoring with backtracking.
/// The barrier weight is shrunk geometrically to `1e-10`.
pub fn fit_wop(ds: &Dataset, spec: &BasisSpec, cfg: &IwlsConfig) -> Result<WopFit> {
    ds.require_both_arms()?;
    let design = design_matrix(ds, spec)?;
    let s = design.ncols();
    let t = ds.t();
    let mut alpha = DVector::zeros(s);
    alpha[0] = 5.0;
    let mut iterations = 0;
    let mut mu = 1.0;
    while mu >= 1e-10 {
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let u = &design * &alpha;
            let mut grad_w = vec![0.0; ds.n()];
            let mut info_w = vec![0.0; ds.n()];
            for i in 0..ds.n() {
                let ui = u[i];
                let sq = ((ui - 4.0) / ui).sqrt();
                let (p, _) = wop_probs(ui);
                let ti = t[i] as f64;
                grad_w[i] = (ti - p) / (sq * ui) + mu / (ui - 4.0);
                info_w[i] = 1.0 / (sq * sq * ui * ui * ui) + mu / ((ui - 4.0) * (ui - 4.0));
            }
            let grad = design.tr_mul(&DVector::from_vec(grad_w));
            let info = linalg::weighted_gram(&design, &info_w);
            let step = linalg::solve_spd(&info, &grad, cfg.ridge, "overlap-weight propensity")?;
            let (f0, _) = wop_objective(&design, t, &alpha, mu).expect("iterate is feasible");
            let mut scale = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand = &alpha + &step.x * scale;
                if let Some((f1, _)) = wop_objective(&design, t, &cand, mu) {
                    if f1 >= f0 - 1e-12 * f0.abs() {
                        let change = (&cand - &alpha).amax();
                        alpha = cand;
                        moved = change > cfg.tol * alpha.amax().max(1.0);
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !moved {
                break;
            }
        }
        mu *= 0.1;
    }
    // On samples where the likelihood keeps increasing towards pi = 1/2 the
    // coefficients run off along a recession direction; there is no maximiser.
    if alpha.amax() > WOP_DIVERGENCE {
        return Err(DrError::Infeasible(format!(
            "overlap-weight likelihood has no finite maximiser (|alpha| reached {:.3e})",
            alpha.amax()
        )));
    }
    let mut fit = WopFit::from_alpha(&design, alpha, spec.clone())?;
    fit.log_likelihood = wop_objective(&design, t, &fit.alpha, 0.0).map_or(f64::NAN, |x| x.1);
    fit.iterations = iterations;
    Ok(fit)
}

/// Both sides of the `d = k` equivalence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    /// `P_n(beta'V)`.
    pub pn_beta_v: f64,
    /// Unnormalised augmented form with `m_t = t beta'V + theta'V_dag`.
    pub augmented: f64,
    /// Self-normalised B-DR form with the same regressions.
    pub bdr_normalised: f64,
    /// `pn_beta_v - augmented`; zero up to rounding.
    pub difference: f64,
    pub difference_normalised: f64,
}

/// Evaluate the equivalence at a fit whose propensity came from `wop`.
pub fn d_equals_k_identity(ds: &Dataset, fit: &SemiparFit, wop: &WopFit) -> EquivalenceReport {
    let n = ds.n();
    let g = fit.gamma_values();
    let base = &fit.vdag * &fit.theta;
    let pn = |f: &dyn Fn(usize) -> f64| compensated_sum((0..n).map(f)) / n as f64;
    let pn_beta_v = pn(&|i| g[i]);
    let m1 = |i: usize| g[i] + base[i];
    let m0 = |i: usize| base[i];
    let t = |i: usize| ds.t()[i] as f64;
    let aug1 = pn(&|i| m1(i) + t(i) / wop.pi[i] * (ds.y()[i] - m1(i)));
    let aug0 = pn(&|i| m0(i) + (1.0 - t(i)) / wop.one_minus_pi[i] * (ds.y()[i] - m0(i)));
    let augmented = aug1 - aug0;
    let w1 = pn(&|i| t(i) / wop.pi[i]);
    let w0 = pn(&|i| (1.0 - t(i)) / wop.one_minus_pi[i]);
    let b1 = pn(&|i| m1(i)) + pn(&|i| t(i) / wop.pi[i] * (ds.y()[i] - m1(i))) / w1;
    let b0 = pn(&|i| m0(i)) + pn(&|i| (1.0 - t(i)) / wop.one_minus_pi[i] * (ds.y()[i] - m0(i))) / w0;
    let bdr_normalised = b1 - b0;
    EquivalenceReport {
        pn_beta_v,
        augmented,
        bdr_normalised,
        difference: pn_beta_v - augmented,
        difference_normalised: pn_beta_v - bdr_normalised,
    }
}

/// Fit the overlap-weight propensity on `prop_spec`, fit the semiparametric
/// model with `V = V_dag = v_spec`, and evaluate both sides of the
/// equivalence. `prop_spec` must be contained in `v_spec`.
pub fn verify_d_equals_k_equivalence(
    ds: &Dataset,
    v_spec: &BasisSpec,
    prop_spec: &BasisSpec,
    cfg: &IwlsConfig,
) -> Result<(EquivalenceReport, SemiparFit, WopFit)> {
    if !prop_spec.is_subset_of(v_spec) {
        return Err(DrError::Basis(format!(
            "propensity basis ({prop_spec}) must be contained in v ({v_spec})"
        )));
    }
    let wop = fit_wop(ds, prop_spec, cfg)?;
    let v = design_matrix(ds, v_spec)?;
    let fit = fit_semipar_designs(
        ds,
        v.clone(),
        v,
        v_spec,
        v_spec,
        wop.propensity(),
        PropensityModel::Fixed,
        CTag::Identity,
    )?;
    let report = d_equals_k_identity(ds, &fit, &wop);
    Ok((report, fit, wop))
}

/// Sample analogue of the conditional target: the `omega`-weighted least
/// squares projection of `gamma(X_i)` on `V_i`. Needs the true `gamma` and
/// `omega`, so it is a simulation-only quantity.
pub fn beta_c_dagger(v: &DMatrix<f64>, gamma: &[f64], omega: &[f64]) -> Result<DVector<f64>> {
    Ok(linalg::wls(v, gamma, omega, 0.0, "conditional target")?.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn annihilates_own_columns() {
        let vdag = DMatrix::from_row_slice(4, 2, &[1.0, 0.1, 1.0, -0.7, 1.0, 2.0, 1.0, 0.4]);
        let r = residual_projection(&[0.1, -0.7, 2.0, 0.4], &vdag).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_vector_is_unchanged() {
        let vdag = DMatrix::from_element(4, 1, 1.0);
        let w = [1.0, -1.0, 2.0, -2.0];
        let r = residual_projection(&w, &vdag).unwrap();
        for (a, b) in r.iter().zip(&w) {
            assert_relative_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn residual_is_idempotent() {
        let vdag = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, -1.0, 1.0, 0.8, 1.0, 2.2, 1.0, -0.5]);
        let w = [0.2, 1.5, -0.3, 0.9, 4.0];
        let r1 = residual_projection(&w, &vdag).unwrap();
        let r2 = residual_projection(&r1, &vdag).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn wop_probabilities() {
        let (p, q) = wop_probs(5.0);
        assert_relative_eq!(p * q, 0.2, epsilon = 1e-15);
        assert_relative_eq!(p + q, 1.0, epsilon = 1e-15);
        let (p, q) = wop_probs(1e12);
        assert_relative_eq!(p * q, 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn infeasible_alpha_is_reported() {
        let design = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let alpha = DVector::from_vec(vec![5.0, -2.0]);
        assert!(matches!(
            WopFit::from_alpha(&design, alpha, BasisSpec::linear(crate::basis::Source::X, 1)),
            Err(DrError::Infeasible(_))
        ));
    }
}
