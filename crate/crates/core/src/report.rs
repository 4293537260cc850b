//! Estimate reports and overlap diagnostics.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;

/// Default overlap threshold `eps`: propensities outside `[eps, 1 - eps]` are
/// counted, never clamped.
pub const DEFAULT_OVERLAP_EPS: f64 = 0.01;

/// `z_{0.975}`.
pub fn z975() -> f64 {
    Normal::standard().inverse_cdf(0.975)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub eps: f64,
    /// `[min, max]` of the fitted P(T=1|x) among control units.
    pub arm0_range: [f64; 2],
    /// `[min, max]` of the fitted P(T=1|x) among treated units.
    pub arm1_range: [f64; 2],
    pub outside_count: usize,
    /// Largest inverse-probability weight `1 / pi_T(x_i)` over the sample.
    pub max_weight: f64,
}

impl OverlapSummary {
    pub fn compute(ds: &Dataset, pi1: &[f64], eps: f64) -> Self {
        let mut r0 = [f64::INFINITY, f64::NEG_INFINITY];
        let mut r1 = [f64::INFINITY, f64::NEG_INFINITY];
        let mut outside = 0;
        let mut max_weight = 0.0f64;
        for (i, &p) in pi1.iter().enumerate() {
            let (r, pt) = if ds.t()[i] == 1 { (&mut r1, p) } else { (&mut r0, 1.0 - p) };
            r[0] = r[0].min(p);
            r[1] = r[1].max(p);
            if p < eps || p > 1.0 - eps {
                outside += 1;
            }
            max_weight = max_weight.max(1.0 / pt);
        }
        let fix = |r: [f64; 2]| if r[0] > r[1] { [f64::NAN, f64::NAN] } else { r };
        Self {
            eps,
            arm0_range: fix(r0),
            arm1_range: fix(r1),
            outside_count: outside,
            max_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub tag: String,
    pub estimate: f64,
    /// Variance on the estimate scale (asymptotic variance divided by n).
    pub variance: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<OverlapSummary>,
    /// Set when unknown population quantities were replaced by estimates.
    pub plug_in: bool,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn new(tag: impl Into<String>, estimate: f64, variance: f64) -> Self {
        let half = z975() * variance.max(0.0).sqrt();
        Self {
            tag: tag.into(),
            estimate,
            variance,
            ci_lower: estimate - half,
            ci_upper: estimate + half,
            diagnostics: None,
            plug_in: false,
            warnings: Vec::new(),
        }
    }

    pub fn with_diagnostics(mut self, d: OverlapSummary) -> Self {
        self.diagnostics = Some(d);
        self
    }

    pub fn with_warnings(mut self, w: impl IntoIterator<Item = String>) -> Self {
        self.warnings.extend(w);
        self
    }

    pub fn plug_in(mut self) -> Self {
        self.plug_in = true;
        self
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lower <= truth && truth <= self.ci_upper
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn ci_is_symmetric() {
        let r = EstimateReport::new("x", 1.0, 0.04);
        assert!((r.ci_upper - 1.0 - z975() * 0.2).abs() < 1e-15);
        assert!((1.0 - r.ci_lower - z975() * 0.2).abs() < 1e-15);
        assert!((z975() - 1.959963984540054).abs() < 1e-12);
    }

    #[test]
    fn overlap_counts() {
        let ds = Dataset::new(vec![0.0; 3], vec![0, 1, 1], DMatrix::zeros(3, 1), None).unwrap();
        let o = OverlapSummary::compute(&ds, &[0.5, 0.005, 0.9], 0.01);
        assert_eq!(o.outside_count, 1);
        assert_eq!(o.arm1_range, [0.005, 0.9]);
        assert!((o.max_weight - 200.0).abs() < 1e-9);
    }
}
