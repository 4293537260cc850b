//! Named estimators evaluated together on one dataset, sharing the
//! propensity fit and design matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSpec};
use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::estimators::{
    bdr_report, fit_bdr_designs, fit_propensity_design, weighting_ate, EstimateOptions, Method, ModelSpecs,
    WeightingKind,
};
use crate::glm::Link;
use crate::report::EstimateReport;
use crate::semipar::{fit_semipar_designs, tau_from_semipar, CTag, PropensityModel, SemiparFit, TauWeight};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorTag {
    Ipw,
    Ht,
    Bdr(Method),
    /// `P_n(beta'V)` with `c = 1`.
    Semipar,
    /// `P_{n,omega_hat}(beta'V)` with `c = 1`.
    SemiparOmega,
    /// `P_n(beta'V)` with `c = 1/omega_hat`.
    SemiparCInv,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 10] = [
        EstimatorTag::Ipw,
        EstimatorTag::Ht,
        EstimatorTag::Bdr(Method::Reg),
        EstimatorTag::Bdr(Method::Wls),
        EstimatorTag::Bdr(Method::Nr),
        EstimatorTag::Bdr(Method::IterWls),
        EstimatorTag::Bdr(Method::IterReg),
        EstimatorTag::Semipar,
        EstimatorTag::SemiparOmega,
        EstimatorTag::SemiparCInv,
    ];

    pub fn is_double_robust(self) -> bool {
        !matches!(self, EstimatorTag::Ipw | EstimatorTag::Ht)
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorTag::Ipw => f.write_str("ipw"),
            EstimatorTag::Ht => f.write_str("ht"),
            EstimatorTag::Bdr(m) => write!(f, "bdr-{}", m.name().to_ascii_lowercase()),
            EstimatorTag::Semipar => f.write_str("semipar"),
            EstimatorTag::SemiparOmega => f.write_str("semipar-omega"),
            EstimatorTag::SemiparCInv => f.write_str("semipar-c-inv"),
        }
    }
}

impl FromStr for EstimatorTag {
    type Err = DrError;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        EstimatorTag::ALL
            .into_iter()
            .find(|t| t.to_string() == key)
            .ok_or_else(|| DrError::Config(vec![format!("unknown estimator `{s}`")]))
    }
}

impl Serialize for EstimatorTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EstimatorTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Working models for a suite: propensity `q(x)`, outcome `v^k(x)`, and the
/// effect-modification basis `v^d(x)` used by the semiparametric estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpecs {
    pub propensity: BasisSpec,
    pub outcome: BasisSpec,
    pub gamma: BasisSpec,
    pub link: Link,
}

impl SuiteSpecs {
    pub fn new(propensity: BasisSpec, outcome: BasisSpec) -> Self {
        Self { propensity, outcome, gamma: BasisSpec::intercept(), link: Link::Identity }
    }

    pub fn model_specs(&self) -> ModelSpecs {
        ModelSpecs { propensity: self.propensity.clone(), outcome: self.outcome.clone(), link: self.link }
    }

    /// `v^k` for the semiparametric fit: the outcome basis extended by any
    /// terms of `v^d` it lacks.
    pub fn h_basis(&self) -> BasisSpec {
        self.gamma.union(&self.outcome)
    }
}

pub fn evaluate(ds: &Dataset, tag: EstimatorTag, specs: &SuiteSpecs, opts: &EstimateOptions) -> Result<EstimateReport> {
    evaluate_suite(ds, &[tag], specs, opts).pop().expect("one result per tag")
}

/// One result per tag, in order. A failed propensity fit fails every entry.
pub fn evaluate_suite(
    ds: &Dataset,
    tags: &[EstimatorTag],
    specs: &SuiteSpecs,
    opts: &EstimateOptions,
) -> Vec<Result<EstimateReport>> {
    let shared = (|| -> Result<_> {
        ds.require_both_arms()?;
        let q = design_matrix(ds, &specs.propensity)?;
        let v = design_matrix(ds, &specs.outcome)?;
        let base = fit_propensity_design(ds, &q, &specs.propensity, &opts.iwls)?;
        Ok((q, v, base))
    })();
    let (q, v, base) = match shared {
        Ok(s) => s,
        Err(e) => return tags.iter().map(|_| Err(e.clone())).collect(),
    };
    let ms = specs.model_specs();
    let mut semi: [Option<Result<SemiparFit>>; 2] = [None, None];
    let mut semi_fit = |c_tag: CTag| -> Result<SemiparFit> {
        let slot = if c_tag == CTag::Identity { 0 } else { 1 };
        semi[slot]
            .get_or_insert_with(|| {
                let vd = design_matrix(ds, &specs.gamma)?;
                let h = specs.h_basis();
                let vdag = design_matrix(ds, &h)?;
                fit_semipar_designs(
                    ds,
                    vd,
                    vdag,
                    &specs.gamma,
                    &h,
                    base.clone(),
                    PropensityModel::Logistic { q: q.clone() },
                    c_tag,
                )
            })
            .clone()
    };
    tags.iter()
        .map(|&tag| match tag {
            EstimatorTag::Ipw => weighting_ate(ds, &base, WeightingKind::Ipw, opts),
            EstimatorTag::Ht => weighting_ate(ds, &base, WeightingKind::Ht, opts),
            EstimatorTag::Bdr(m) => {
                fit_bdr_designs(ds, m, &q, &v, base.clone(), &ms, opts).map(|f| bdr_report(ds, &f, opts))
            }
            EstimatorTag::Semipar => tau_from_semipar(ds, &semi_fit(CTag::Identity)?, &TauWeight::Unit),
            EstimatorTag::SemiparOmega => tau_from_semipar(ds, &semi_fit(CTag::Identity)?, &TauWeight::OmegaHat),
            EstimatorTag::SemiparCInv => tau_from_semipar(ds, &semi_fit(CTag::InverseOmega)?, &TauWeight::Unit),
        })
        .collect()
}
