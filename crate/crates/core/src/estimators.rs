//! Treatment-specific means and ATE estimators: IPW, HT and the bounded
//! double-robust (B-DR) estimator with REG / WLS / NR / ITER-WLS / ITER-REG
//! outcome fits.
//!
//! Propensities are always stored as `P(T = 1 | x)`; `pi_t` below means
//! `pi(x)^t (1 - pi(x))^(1-t)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSpec};
use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::glm::{self, FitWarning, IwlsConfig, Link};
use crate::linalg::{compensated_sum, expit};
use crate::report::{EstimateReport, OverlapSummary, DEFAULT_OVERLAP_EPS};
use crate::variance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "REG")]
    Reg,
    #[serde(rename = "WLS")]
    Wls,
    #[serde(rename = "NR")]
    Nr,
    #[serde(rename = "ITER-WLS")]
    IterWls,
    #[serde(rename = "ITER-REG")]
    IterReg,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Reg, Method::Wls, Method::Nr, Method::IterWls, Method::IterReg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Reg => "REG",
            Method::Wls => "WLS",
            Method::Nr => "NR",
            Method::IterWls => "ITER-WLS",
            Method::IterReg => "ITER-REG",
        }
    }

    fn is_iter(self) -> bool {
        matches!(self, Method::IterWls | Method::IterReg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = DrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "REG" => Ok(Method::Reg),
            "WLS" => Ok(Method::Wls),
            "NR" => Ok(Method::Nr),
            "ITER-WLS" => Ok(Method::IterWls),
            "ITER-REG" => Ok(Method::IterReg),
            _ => Err(DrError::Config(vec![format!("unknown method `{s}`")])),
        }
    }
}

/// `pi_t(x)` from `P(T=1|x)`.
#[inline]
pub fn pi_arm(pi1: f64, arm: u8) -> f64 {
    if arm == 1 {
        pi1
    } else {
        1.0 - pi1
    }
}

/// Covariates added by the ITER extended propensity model for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityExtension {
    pub arm: u8,
    /// `(phi_1, phi_2)`.
    pub phi: [f64; 2],
    /// `g_1(x_i) = m_t(x_i) / pi_t(x_i)` at the base fit.
    pub g1: Vec<f64>,
    /// `g_2(x_i) = 1 / pi_t(x_i)` at the base fit.
    pub g2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedPropensity {
    /// Coefficients on `q(x)`. Empty for [`FittedPropensity::known`].
    pub alpha: DVector<f64>,
    pub spec: BasisSpec,
    /// `P(T = 1 | x_i)`.
    pub fitted: Vec<f64>,
    pub extension: Option<PropensityExtension>,
    pub warnings: Vec<FitWarning>,
}

impl FittedPropensity {
    /// Wrap externally supplied propensities (e.g. the true ones in a
    /// simulation).
    pub fn known(fitted: Vec<f64>) -> Result<Self> {
        if let Some(i) = fitted.iter().position(|p| !(*p >= 0.0 && *p <= 1.0)) {
            return Err(DrError::InvalidData(format!(
                "propensity at row {} is {}, outside [0, 1]",
                i + 1,
                fitted[i]
            )));
        }
        Ok(Self {
            alpha: DVector::zeros(0),
            spec: BasisSpec::intercept(),
            fitted,
            extension: None,
            warnings: Vec::new(),
        })
    }

    pub fn pi_t(&self, arm: u8) -> Vec<f64> {
        self.fitted.iter().map(|&p| pi_arm(p, arm)).collect()
    }

    /// Linear predictor recomputed from the stored coefficients.
    pub fn linear_predictor(&self, q: &DMatrix<f64>) -> DVector<f64> {
        let mut eta = q * &self.alpha;
        if let Some(ext) = &self.extension {
            for i in 0..eta.len() {
                eta[i] += ext.phi[0] * ext.g1[i] + ext.phi[1] * ext.g2[i];
            }
        }
        eta
    }

    /// Fitted values recomputed from the stored coefficients.
    pub fn recompute(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let q = design_matrix(ds, &self.spec)?;
        Ok(self.linear_predictor(&q).iter().map(|&e| expit(e)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct FittedOutcome {
    /// `[varsigma_0, varsigma_1]`.
    pub varsigma: [DVector<f64>; 2],
    pub link: Link,
    pub spec: BasisSpec,
    pub method: Method,
    /// Coefficient on the extra `pi_t(x)` covariate for NR fits.
    pub nr_phi: Option<[f64; 2]>,
    /// `[m_0(x_i), m_1(x_i)]` for every unit.
    pub fitted: [Vec<f64>; 2],
    pub warnings: Vec<FitWarning>,
    /// Total number of estimated coefficients over both arms.
    pub n_coef: usize,
}

impl FittedOutcome {
    pub fn m(&self, arm: u8) -> &[f64] {
        &self.fitted[arm as usize]
    }

    /// `m_t(x_i)` recomputed from the stored coefficients; `pi1` is needed
    /// for NR fits only.
    pub fn recompute(&self, ds: &Dataset, pi1: Option<&[f64]>) -> Result<[Vec<f64>; 2]> {
        let v = design_matrix(ds, &self.spec)?;
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for arm in 0..2u8 {
            let eta = &v * &self.varsigma[arm as usize];
            let phi = self.nr_phi.map(|p| p[arm as usize]);
            out[arm as usize] = (0..ds.n())
                .map(|i| {
                    let mut e = eta[i];
                    if let (Some(phi), Some(pi1)) = (phi, pi1) {
                        e += phi * pi_arm(pi1[i], arm);
                    }
                    self.link.mean(e)
                })
                .collect();
        }
        Ok(out)
    }

    /// Pooled residual mean square `sum (Y - m_T(X))^2 / (n - coefficients)`.
    pub fn sigma2_pooled(&self, ds: &Dataset) -> f64 {
        let rss = compensated_sum((0..ds.n()).map(|i| {
            let r = ds.y()[i] - self.fitted[ds.t()[i] as usize][i];
            r * r
        }));
        let df = ds.n().saturating_sub(self.n_coef).max(1);
        rss / df as f64
    }
}

fn check_arm_weights(ds: &Dataset, pi1: &[f64], arm: u8) -> Result<()> {
    ds.require_arm(arm)?;
    if pi1.len() != ds.n() {
        return Err(DrError::InvalidData(format!(
            "propensity vector has length {}, expected {}",
            pi1.len(),
            ds.n()
        )));
    }
    for (i, (&t, &p)) in ds.t().iter().zip(pi1).enumerate() {
        if t == arm && !(pi_arm(p, arm) > 0.0) {
            return Err(DrError::InvalidData(format!(
                "pi_{arm} is {} at row {} in arm {arm}",
                pi_arm(p, arm),
                i + 1
            )));
        }
    }
    Ok(())
}

fn ipw_sums(ds: &Dataset, pi1: &[f64], arm: u8, m: Option<&[f64]>) -> (f64, f64) {
    let mut num = Vec::new();
    let mut den = Vec::new();
    for i in 0..ds.n() {
        if ds.t()[i] == arm {
            let w = 1.0 / pi_arm(pi1[i], arm);
            let r = ds.y()[i] - m.map_or(0.0, |m| m[i]);
            num.push(w * r);
            den.push(w);
        }
    }
    (compensated_sum(num), compensated_sum(den))
}

/// `P_n{I(T=t) Y / pi_t} / P_n{I(T=t) / pi_t}`.
pub fn mu_ipw(ds: &Dataset, pi1: &[f64], arm: u8) -> Result<f64> {
    check_arm_weights(ds, pi1, arm)?;
    let (num, den) = ipw_sums(ds, pi1, arm, None);
    if den == 0.0 || !den.is_finite() {
        return Err(DrError::ZeroDenominator("IPW normalisation"));
    }
    Ok(num / den)
}

/// `P_n{I(T=t) Y / pi_t}`.
pub fn mu_ht(ds: &Dataset, pi1: &[f64], arm: u8) -> Result<f64> {
    check_arm_weights(ds, pi1, arm)?;
    let (num, _) = ipw_sums(ds, pi1, arm, None);
    Ok(num / ds.n() as f64)
}

/// `P_n{m_t} + P_n[I(T=t)/pi_t (Y - m_t)] / P_n[I(T=t)/pi_t]`.
pub fn mu_bdr(ds: &Dataset, m_t: &[f64], pi1: &[f64], arm: u8) -> Result<f64> {
    check_arm_weights(ds, pi1, arm)?;
    if m_t.len() != ds.n() {
        return Err(DrError::InvalidData(format!(
            "regression vector has length {}, expected {}",
            m_t.len(),
            ds.n()
        )));
    }
    let (num, den) = ipw_sums(ds, pi1, arm, Some(m_t));
    if den == 0.0 || !den.is_finite() {
        return Err(DrError::ZeroDenominator("B-DR normalisation"));
    }
    Ok(compensated_sum(m_t.iter().copied()) / ds.n() as f64 + num / den)
}

/// `P_n{m_t} + P_n[I(T=t)/pi_t (Y - m_t)]` (unnormalised augmentation).
pub fn mu_aipw(ds: &Dataset, m_t: &[f64], pi1: &[f64], arm: u8) -> Result<f64> {
    check_arm_weights(ds, pi1, arm)?;
    let (num, _) = ipw_sums(ds, pi1, arm, Some(m_t));
    Ok((compensated_sum(m_t.iter().copied()) + num) / ds.n() as f64)
}

/// Clamp propensities into `[lower, 1 - lower]`. Off by default everywhere.
pub fn truncate_propensity(pi1: &[f64], lower: f64) -> Vec<f64> {
    pi1.iter().map(|&p| p.clamp(lower, 1.0 - lower)).collect()
}

/// Logistic ML fit of `T` on `q(x)`.
pub fn fit_propensity(ds: &Dataset, spec: &BasisSpec, cfg: &IwlsConfig) -> Result<FittedPropensity> {
    let q = design_matrix(ds, spec)?;
    fit_propensity_design(ds, &q, spec, cfg)
}

pub fn fit_propensity_design(
    ds: &Dataset,
    q: &DMatrix<f64>,
    spec: &BasisSpec,
    cfg: &IwlsConfig,
) -> Result<FittedPropensity> {
    ds.require_both_arms()?;
    let fit = glm::fit_logistic_ml(q, &ds.t_f64(), cfg)?;
    let eta = q * &fit.coef;
    Ok(FittedPropensity {
        fitted: eta.iter().map(|&e| expit(e)).collect(),
        alpha: fit.coef,
        spec: spec.clone(),
        extension: None,
        warnings: fit.warnings,
    })
}

struct ArmFit {
    coef: DVector<f64>,
    phi: Option<f64>,
    fitted: Vec<f64>,
    warnings: Vec<FitWarning>,
}

fn fit_arm(
    ds: &Dataset,
    v: &DMatrix<f64>,
    arm: u8,
    weights_pi1: Option<&[f64]>,
    nr: bool,
    link: Link,
    cfg: &IwlsConfig,
) -> Result<ArmFit> {
    ds.require_arm(arm)?;
    let n = ds.n();
    let ind = ds.indicator(arm);
    let w: Vec<f64> = match weights_pi1 {
        Some(pi1) => (0..n).map(|i| if ind[i] > 0.0 { 1.0 / pi_arm(pi1[i], arm) } else { 0.0 }).collect(),
        None => ind,
    };
    let design = if nr {
        let pi1 = weights_pi1.expect("NR fits are weighted");
        let mut d = v.clone().insert_column(v.ncols(), 0.0);
        for i in 0..n {
            d[(i, v.ncols())] = pi_arm(pi1[i], arm);
        }
        d
    } else {
        v.clone()
    };
    let fit = glm::fit_outcome(&design, ds.y(), &w, link, cfg)?;
    let eta = &design * &fit.coef;
    let fitted = eta.iter().map(|&e| link.mean(e)).collect();
    let (coef, phi) = if nr {
        let k = v.ncols();
        (fit.coef.rows(0, k).into_owned(), Some(fit.coef[k]))
    } else {
        (fit.coef, None)
    };
    Ok(ArmFit { coef, phi, fitted, warnings: fit.warnings })
}

fn assemble(arms: [ArmFit; 2], spec: &BasisSpec, link: Link, method: Method) -> FittedOutcome {
    let [a0, a1] = arms;
    let nr_phi = match (a0.phi, a1.phi) {
        (Some(p0), Some(p1)) => Some([p0, p1]),
        _ => None,
    };
    let n_coef = a0.coef.len() + a1.coef.len() + if nr_phi.is_some() { 2 } else { 0 };
    let mut warnings = a0.warnings;
    warnings.extend(a1.warnings);
    FittedOutcome {
        varsigma: [a0.coef, a1.coef],
        link,
        spec: spec.clone(),
        method,
        nr_phi,
        fitted: [a0.fitted, a1.fitted],
        warnings,
        n_coef,
    }
}

/// Per-arm fits with weights `I(T=t)`.
pub fn fit_m_reg(ds: &Dataset, spec: &BasisSpec, link: Link, cfg: &IwlsConfig) -> Result<FittedOutcome> {
    let v = design_matrix(ds, spec)?;
    fit_m_design(ds, &v, spec, None, Method::Reg, link, cfg)
}

/// Per-arm fits with weights `I(T=t) / pi_t(X)`.
pub fn fit_m_wls(
    ds: &Dataset,
    spec: &BasisSpec,
    pi: &FittedPropensity,
    link: Link,
    cfg: &IwlsConfig,
) -> Result<FittedOutcome> {
    let v = design_matrix(ds, spec)?;
    fit_m_design(ds, &v, spec, Some(&pi.fitted), Method::Wls, link, cfg)
}

/// WLS fits on the design `(v(x), pi_t(x))`.
pub fn fit_m_nr(
    ds: &Dataset,
    spec: &BasisSpec,
    pi: &FittedPropensity,
    link: Link,
    cfg: &IwlsConfig,
) -> Result<FittedOutcome> {
    let v = design_matrix(ds, spec)?;
    fit_m_design(ds, &v, spec, Some(&pi.fitted), Method::Nr, link, cfg)
}

/// Outcome fit on a precomputed design. `pi1` is required for WLS/NR and
/// ignored for REG. ITER methods are handled by [`fit_pi_iter`].
pub fn fit_m_design(
    ds: &Dataset,
    v: &DMatrix<f64>,
    spec: &BasisSpec,
    pi1: Option<&[f64]>,
    method: Method,
    link: Link,
    cfg: &IwlsConfig,
) -> Result<FittedOutcome> {
    let (weights, nr) = match method {
        Method::Reg | Method::IterReg => (None, false),
        Method::Wls | Method::IterWls => (Some(pi1.ok_or_else(missing_pi)?), false),
        Method::Nr => (Some(pi1.ok_or_else(missing_pi)?), true),
    };
    if let Some(p) = weights {
        check_arm_weights(ds, p, 0)?;
        check_arm_weights(ds, p, 1)?;
    }
    let a0 = fit_arm(ds, v, 0, weights, nr, link, cfg)?;
    let a1 = fit_arm(ds, v, 1, weights, nr, link, cfg)?;
    Ok(assemble([a0, a1], spec, link, method))
}

fn missing_pi() -> DrError {
    DrError::InvalidData("weighted outcome fit needs propensities".into())
}

/// Output of the ITER pipeline.
#[derive(Debug, Clone)]
pub struct IterFit {
    pub base: FittedPropensity,
    /// Arm-specific extended propensities `[pi^(0), pi^(1)]`.
    pub propensity: [FittedPropensity; 2],
    /// REG (ITER-REG) or refitted WLS (ITER-WLS) outcome regression.
    pub outcome: FittedOutcome,
}

/// ITER-WLS / ITER-REG: base propensity, first outcome fit, arm-specific
/// extended logistic fits with covariates `m_t / pi_t` and `1 / pi_t`, and
/// (ITER-WLS only) a WLS refit under the extended propensities.
pub fn fit_pi_iter(
    ds: &Dataset,
    variant: Method,
    q_spec: &BasisSpec,
    outcome_spec: &BasisSpec,
    link: Link,
    cfg: &IwlsConfig,
) -> Result<IterFit> {
    let q = design_matrix(ds, q_spec)?;
    let v = design_matrix(ds, outcome_spec)?;
    let base = fit_propensity_design(ds, &q, q_spec, cfg)?;
    fit_pi_iter_design(ds, variant, &q, &v, base, outcome_spec, link, cfg)
}

#[allow(clippy::too_many_arguments)]
pub fn fit_pi_iter_design(
    ds: &Dataset,
    variant: Method,
    q: &DMatrix<f64>,
    v: &DMatrix<f64>,
    base: FittedPropensity,
    outcome_spec: &BasisSpec,
    link: Link,
    cfg: &IwlsConfig,
) -> Result<IterFit> {
    if !variant.is_iter() {
        return Err(DrError::Config(vec![format!("{variant} is not an ITER variant")]));
    }
    let first_method = if variant == Method::IterWls { Method::Wls } else { Method::Reg };
    let first = fit_m_design(ds, v, outcome_spec, Some(&base.fitted), first_method, link, cfg)?;
    let n = ds.n();
    let t = ds.t_f64();
    let s = q.ncols();
    let mut ext: Vec<FittedPropensity> = Vec::with_capacity(2);
    for arm in 0..2u8 {
        let pit: Vec<f64> = base.pi_t(arm);
        let g1: Vec<f64> = (0..n).map(|i| first.m(arm)[i] / pit[i]).collect();
        let g2: Vec<f64> = pit.iter().map(|p| 1.0 / p).collect();
        let mut design = q.clone().resize_horizontally(s + 2, 0.0);
        for i in 0..n {
            design[(i, s)] = g1[i];
            design[(i, s + 1)] = g2[i];
        }
        let fit = glm::fit_logistic_ml(&design, &t, cfg)?;
        let eta = &design * &fit.coef;
        ext.push(FittedPropensity {
            alpha: fit.coef.rows(0, s).into_owned(),
            spec: base.spec.clone(),
            fitted: eta.iter().map(|&e| expit(e)).collect(),
            extension: Some(PropensityExtension {
                arm,
                phi: [fit.coef[s], fit.coef[s + 1]],
                g1,
                g2,
            }),
            warnings: fit.warnings,
        });
    }
    let p1 = ext.pop().expect("two arms");
    let p0 = ext.pop().expect("two arms");
    let outcome = if variant == Method::IterWls {
        for (arm, p) in [(0u8, &p0), (1u8, &p1)] {
            check_arm_weights(ds, &p.fitted, arm)?;
        }
        let a0 = fit_arm(ds, v, 0, Some(&p0.fitted), false, link, cfg)?;
        let a1 = fit_arm(ds, v, 1, Some(&p1.fitted), false, link, cfg)?;
        assemble([a0, a1], outcome_spec, link, Method::IterWls)
    } else {
        FittedOutcome { method: Method::IterReg, ..first }
    };
    Ok(IterFit { base, propensity: [p0, p1], outcome })
}

/// Model specifications for one B-DR evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpecs {
    pub propensity: BasisSpec,
    pub outcome: BasisSpec,
    pub link: Link,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    pub iwls: IwlsConfig,
    pub overlap_eps: f64,
    /// Clamp propensities into `[l, 1 - l]` before weighting.
    pub truncate: Option<f64>,
    /// Use this residual variance instead of the pooled estimate.
    pub sigma2: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            iwls: IwlsConfig::default(),
            overlap_eps: DEFAULT_OVERLAP_EPS,
            truncate: None,
            sigma2: None,
        }
    }
}

/// Everything produced by one B-DR evaluation.
#[derive(Debug, Clone)]
pub struct BdrFit {
    pub method: Method,
    /// `[mu_0, mu_1]`.
    pub mu: [f64; 2],
    pub tau: f64,
    /// Propensity fitted on `q(x)` by ML.
    pub base: FittedPropensity,
    /// Propensities used for arm `t` (both equal to `base` unless ITER).
    pub propensity: [FittedPropensity; 2],
    pub outcome: FittedOutcome,
}

impl BdrFit {
    pub fn warnings(&self) -> Vec<String> {
        let mut w: Vec<String> = self.base.warnings.iter().map(|w| format!("propensity: {w}")).collect();
        if self.method.is_iter() {
            for (arm, p) in self.propensity.iter().enumerate() {
                w.extend(p.warnings.iter().map(|w| format!("extended propensity (arm {arm}): {w}")));
            }
        }
        w.extend(self.outcome.warnings.iter().map(|w| format!("outcome: {w}")));
        w
    }
}

pub fn fit_bdr(ds: &Dataset, method: Method, specs: &ModelSpecs, opts: &EstimateOptions) -> Result<BdrFit> {
    let q = design_matrix(ds, &specs.propensity)?;
    let v = design_matrix(ds, &specs.outcome)?;
    let base = fit_propensity_design(ds, &q, &specs.propensity, &opts.iwls)?;
    fit_bdr_designs(ds, method, &q, &v, base, specs, opts)
}

/// [`fit_bdr`] on precomputed designs and a base propensity fit, so grids
/// and bootstraps can share work.
pub fn fit_bdr_designs(
    ds: &Dataset,
    method: Method,
    q: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mut base: FittedPropensity,
    specs: &ModelSpecs,
    opts: &EstimateOptions,
) -> Result<BdrFit> {
    ds.require_both_arms()?;
    if let Some(l) = opts.truncate {
        base.fitted = truncate_propensity(&base.fitted, l);
    }
    let (propensity, outcome) = if method.is_iter() {
        let it = fit_pi_iter_design(ds, method, q, v, base.clone(), &specs.outcome, specs.link, &opts.iwls)?;
        let [mut p0, mut p1] = it.propensity;
        if let Some(l) = opts.truncate {
            p0.fitted = truncate_propensity(&p0.fitted, l);
            p1.fitted = truncate_propensity(&p1.fitted, l);
        }
        ([p0, p1], it.outcome)
    } else {
        let out = fit_m_design(ds, v, &specs.outcome, Some(&base.fitted), method, specs.link, &opts.iwls)?;
        ([base.clone(), base.clone()], out)
    };
    let mu0 = mu_bdr(ds, outcome.m(0), &propensity[0].fitted, 0)?;
    let mu1 = mu_bdr(ds, outcome.m(1), &propensity[1].fitted, 1)?;
    Ok(BdrFit { method, mu: [mu0, mu1], tau: mu1 - mu0, base, propensity, outcome })
}

/// `tau_B-DR = mu_1 - mu_0` with the plug-in variance for `tau_pop`.
pub fn tau_bdr(ds: &Dataset, method: Method, specs: &ModelSpecs, opts: &EstimateOptions) -> Result<EstimateReport> {
    let fit = fit_bdr(ds, method, specs, opts)?;
    Ok(bdr_report(ds, &fit, opts))
}

pub fn bdr_report(ds: &Dataset, fit: &BdrFit, opts: &EstimateOptions) -> EstimateReport {
    let gamma: Vec<f64> = (0..ds.n()).map(|i| fit.outcome.m(1)[i] - fit.outcome.m(0)[i]).collect();
    let sigma2 = opts.sigma2.unwrap_or_else(|| fit.outcome.sigma2_pooled(ds));
    let v = variance::var_bdr(&gamma, &fit.base.fitted, sigma2);
    EstimateReport::new(format!("bdr-{}", fit.method.name().to_ascii_lowercase()), fit.tau, v.pop)
        .with_diagnostics(OverlapSummary::compute(ds, &fit.base.fitted, opts.overlap_eps))
        .with_warnings(fit.warnings())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingKind {
    Ipw,
    Ht,
}

/// IPW or HT ATE with an influence-function variance that treats the
/// propensity as known.
pub fn weighting_ate(ds: &Dataset, pi: &FittedPropensity, kind: WeightingKind, opts: &EstimateOptions) -> Result<EstimateReport> {
    let pi1 = match opts.truncate {
        Some(l) => truncate_propensity(&pi.fitted, l),
        None => pi.fitted.clone(),
    };
    let n = ds.n();
    let mut infl = vec![0.0; n];
    let mut mus = [0.0; 2];
    for arm in 0..2u8 {
        let mu = match kind {
            WeightingKind::Ipw => mu_ipw(ds, &pi1, arm)?,
            WeightingKind::Ht => mu_ht(ds, &pi1, arm)?,
        };
        mus[arm as usize] = mu;
        let sign = if arm == 1 { 1.0 } else { -1.0 };
        let norm = match kind {
            WeightingKind::Ipw => ipw_sums(ds, &pi1, arm, None).1 / n as f64,
            WeightingKind::Ht => 1.0,
        };
        for i in 0..n {
            let w = if ds.t()[i] == arm { 1.0 / pi_arm(pi1[i], arm) } else { 0.0 };
            let phi = match kind {
                WeightingKind::Ipw => w * (ds.y()[i] - mu) / norm,
                WeightingKind::Ht => w * ds.y()[i] - mu,
            };
            infl[i] += sign * phi;
        }
    }
    let var = compensated_sum(infl.iter().map(|v| v * v)) / (n as f64 * n as f64);
    let tag = match kind {
        WeightingKind::Ipw => "ipw",
        WeightingKind::Ht => "ht",
    };
    Ok(EstimateReport::new(tag, mus[1] - mus[0], var)
        .with_diagnostics(OverlapSummary::compute(ds, &pi1, opts.overlap_eps))
        .with_warnings(pi.warnings.iter().map(|w| format!("propensity: {w}"))))
}
