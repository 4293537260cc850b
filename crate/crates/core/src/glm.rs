//! IWLS solvers: logistic maximum likelihood for propensities and
//! identity/logit outcome regressions with per-unit weights.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrError, Result};
use crate::linalg::{self, expit, log1pexp};

/// Fitted probabilities outside `(SEPARATION_EPS, 1 - SEPARATION_EPS)` are
/// taken as a sign of (quasi-)separation.
pub const SEPARATION_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IwlsConfig {
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute coefficient change.
    pub tol: f64,
    /// Diagonal ridge used only if the normal equations are singular; zero
    /// selects `1e-8 * trace / s`.
    pub ridge: f64,
}

impl Default for IwlsConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-10, ridge: 0.0 }
    }
}

impl IwlsConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.max_iter == 0 {
            errs.push("max_iter must be at least 1".to_string());
        }
        if !(self.tol > 0.0) {
            errs.push("tol must be positive".to_string());
        }
        if !(self.ridge >= 0.0) {
            errs.push("ridge must be nonnegative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DrError::Config(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    /// Inverse link `Phi^{-1}`.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logit => "logit",
        }
    }
}

impl std::str::FromStr for Link {
    type Err = DrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            other => Err(DrError::Config(vec![format!("unknown link `{other}`")])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    Separation { min_prob: f64, max_prob: f64 },
    RidgeApplied { ridge: f64 },
    NotConverged { iterations: usize, gradient_norm: f64 },
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitWarning::Separation { min_prob, max_prob } => write!(
                f,
                "possible separation: fitted probabilities reached [{min_prob:e}, {max_prob:e}]"
            ),
            FitWarning::RidgeApplied { ridge } => {
                write!(f, "singular normal equations, ridge {ridge:e} applied")
            }
            FitWarning::NotConverged { iterations, gradient_norm } => write!(
                f,
                "not converged after {iterations} iterations (gradient norm {gradient_norm:e})"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Deviance after each accepted step (logit link only).
    pub deviance_trace: Vec<f64>,
    pub warnings: Vec<FitWarning>,
}

impl GlmFit {
    pub fn separated(&self) -> bool {
        self.warnings.iter().any(|w| matches!(w, FitWarning::Separation { .. }))
    }
}

/// Logistic ML of `t` on `design`.
///
/// Converges when the largest coefficient change or the sup-norm of the mean
/// score drops below `cfg.tol`. On non-convergence the fit is still returned
/// (with warnings) if separation was observed, otherwise an error is raised.
pub fn fit_logistic_ml(design: &DMatrix<f64>, t: &[f64], cfg: &IwlsConfig) -> Result<GlmFit> {
    let n = design.nrows();
    if t.len() != n {
        return Err(DrError::InvalidData(format!("design has {n} rows but t has {}", t.len())));
    }
    let ones = t.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(DrError::InvalidData(
            "logistic fit needs both classes present".into(),
        ));
    }
    iwls_logit(design, t, &vec![1.0; n], cfg, "logistic ML")
}

/// Weighted outcome regression solving `P_n[w (y - Phi^{-1}(v'b)) v] = 0`.
pub fn fit_outcome(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    link: Link,
    cfg: &IwlsConfig,
) -> Result<GlmFit> {
    let n = design.nrows();
    if y.len() != n || weights.len() != n {
        return Err(DrError::InvalidData(format!(
            "design has {n} rows, y {} and weights {}",
            y.len(),
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(DrError::InvalidData(format!(
            "weight at row {} is {} (must be finite and nonnegative)",
            i + 1,
            weights[i]
        )));
    }
    match link {
        Link::Identity => {
            let sol = linalg::wls(design, y, weights, cfg.ridge, "outcome WLS")?;
            let mut warnings = Vec::new();
            if sol.ridge > 0.0 {
                warnings.push(FitWarning::RidgeApplied { ridge: sol.ridge });
            }
            Ok(GlmFit {
                coef: sol.x,
                iterations: 1,
                converged: true,
                deviance_trace: Vec::new(),
                warnings,
            })
        }
        Link::Logit => {
            if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(DrError::InvalidData(format!(
                    "logit outcome at row {} is {} (must lie in [0, 1])",
                    i + 1,
                    y[i]
                )));
            }
            iwls_logit(design, y, weights, cfg, "outcome logit IWLS")
        }
    }
}

fn deviance(eta: &DVector<f64>, y: &[f64], w: &[f64]) -> f64 {
    // -2 loglik up to the saturated constant
    2.0 * linalg::compensated_sum(
        eta.iter()
            .zip(y)
            .zip(w)
            .filter(|(_, &wi)| wi > 0.0)
            .map(|((&e, &yi), &wi)| wi * (log1pexp(e) - yi * e)),
    )
}

fn iwls_logit(
    design: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    cfg: &IwlsConfig,
    context: &str,
) -> Result<GlmFit> {
    cfg.validate()?;
    let n = design.nrows();
    let s = design.ncols();
    let mut beta = DVector::zeros(s);
    let mut eta = DVector::zeros(n);
    let mut dev = deviance(&eta, y, w);
    let mut trace = vec![dev];
    let mut warnings: Vec<FitWarning> = Vec::new();
    let mut ridge_used = 0.0f64;
    let (mut pmin, mut pmax) = (0.5f64, 0.5f64);
    let mut grad_norm = f64::INFINITY;
    let wsum: f64 = w.iter().sum();

    for iter in 1..=cfg.max_iter {
        let mut info_w = vec![0.0; n];
        let mut resid = vec![0.0; n];
        for i in 0..n {
            let p = expit(eta[i]);
            info_w[i] = w[i] * p * (1.0 - p);
            resid[i] = w[i] * (y[i] - p);
        }
        let score = design.tr_mul(&DVector::from_vec(resid));
        grad_norm = score.amax() / wsum;
        let info = linalg::weighted_gram(design, &info_w);
        let step = linalg::solve_spd(&info, &score, cfg.ridge, context)?;
        ridge_used = ridge_used.max(step.ridge);

        let mut scale = 1.0;
        let mut accepted = false;
        let mut new_beta = beta.clone();
        let mut new_eta = eta.clone();
        let mut new_dev = dev;
        for _ in 0..40 {
            new_beta = &beta + &step.x * scale;
            new_eta = design * &new_beta;
            new_dev = deviance(&new_eta, y, w);
            if new_dev.is_finite() && new_dev <= dev + 1e-12 * dev.abs().max(1.0) {
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // no descent possible along the Newton direction; at the optimum
            // up to rounding
            break;
        }
        let change = (&new_beta - &beta).amax();
        beta = new_beta;
        eta = new_eta;
        dev = new_dev;
        trace.push(dev);
        for i in 0..n {
            if w[i] > 0.0 {
                let p = expit(eta[i]);
                pmin = pmin.min(p);
                pmax = pmax.max(p);
            }
        }
        if change <= cfg.tol || grad_norm <= cfg.tol {
            return Ok(finish(beta, iter, true, trace, warnings, ridge_used, pmin, pmax));
        }
    }

    let g = mean_score(design, y, w, &eta);
    if g <= cfg.tol * 10.0 {
        return Ok(finish(beta, trace.len() - 1, true, trace, warnings, ridge_used, pmin, pmax));
    }
    let separated = pmin < SEPARATION_EPS || pmax > 1.0 - SEPARATION_EPS;
    if separated {
        warnings.push(FitWarning::NotConverged { iterations: cfg.max_iter, gradient_norm: g });
        return Ok(finish(beta, cfg.max_iter, false, trace, warnings, ridge_used, pmin, pmax));
    }
    Err(DrError::NonConvergence { iterations: cfg.max_iter, gradient_norm: g.min(grad_norm) })
}

fn mean_score(design: &DMatrix<f64>, y: &[f64], w: &[f64], eta: &DVector<f64>) -> f64 {
    let r = DVector::from_iterator(y.len(), (0..y.len()).map(|i| w[i] * (y[i] - expit(eta[i]))));
    let wsum: f64 = w.iter().sum();
    design.tr_mul(&r).amax() / wsum
}

#[allow(clippy::too_many_arguments)]
fn finish(
    coef: DVector<f64>,
    iterations: usize,
    converged: bool,
    deviance_trace: Vec<f64>,
    mut warnings: Vec<FitWarning>,
    ridge: f64,
    pmin: f64,
    pmax: f64,
) -> GlmFit {
    if pmin < SEPARATION_EPS || pmax > 1.0 - SEPARATION_EPS {
        warnings.insert(0, FitWarning::Separation { min_prob: pmin, max_prob: pmax });
    }
    if ridge > 0.0 {
        warnings.push(FitWarning::RidgeApplied { ridge });
    }
    GlmFit { coef, iterations, converged, deviance_trace, warnings }
}
