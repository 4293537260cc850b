//! The Kang-Schafer benchmark: latent `Z ~ N(0, I_4)`, logistic treatment,
//! linear outcome, and the nonlinear covariate map `x = b(z)`. Also a
//! replication harness summarising estimator behaviour over seeded draws.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::estimators::EstimateOptions;
use crate::linalg::{compensated_sum, expit};
use crate::suite::{evaluate_suite, EstimatorTag, SuiteSpecs};

/// `|z1|` below this makes the `z3` recovery ill-conditioned; such rows are
/// flagged as singular for the inverse map.
pub const SINGULAR_Z1: f64 = 1e-3;

/// Treatment-effect function `gamma(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaFn {
    Null,
    /// `c0 + c1 z1 + ... + c4 z4`.
    Linear([f64; 5]),
}

impl GammaFn {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            GammaFn::Null => 0.0,
            GammaFn::Linear(c) => c[0] + c[1] * z[0] + c[2] * z[1] + c[3] * z[2] + c[4] * z[3],
        }
    }

    /// `E gamma(Z)`.
    pub fn tau_pop(&self) -> f64 {
        match self {
            GammaFn::Null => 0.0,
            GammaFn::Linear(c) => c[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub seed: u64,
    pub gamma: GammaFn,
    pub noise_sd: f64,
}

impl DgpConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, gamma: GammaFn::Null, noise_sd: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n < 2 {
            errs.push(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.noise_sd > 0.0) || !self.noise_sd.is_finite() {
            errs.push(format!("noise_sd must be positive, got {}", self.noise_sd));
        }
        if let GammaFn::Linear(c) = &self.gamma {
            if c.iter().any(|v| !v.is_finite()) {
                errs.push("gamma coefficients must be finite".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DrError::Config(errs))
        }
    }
}

/// `P(T = 1 | z) = expit(-z1 + 0.5 z2 - 0.25 z3 - 0.1 z4)`.
pub fn true_propensity(z: &[f64]) -> f64 {
    expit(-z[0] + 0.5 * z[1] - 0.25 * z[2] - 0.1 * z[3])
}

/// `E(Y | T = 0, z)`.
pub fn baseline_mean(z: &[f64]) -> f64 {
    210.0 + 27.4 * z[0] + 13.7 * (z[1] + z[2] + z[3])
}

pub fn transform_b(z: &[f64]) -> [f64; 4] {
    [
        (z[0] / 2.0).exp(),
        10.0 + z[1] / (1.0 + z[0].exp()),
        (z[0] * z[2] / 25.0 + 0.6).powi(3),
        (z[1] + z[3] + 20.0).powi(2),
    ]
}

/// Inverse of [`transform_b`], taking the nonnegative root of `x4`.
pub fn inverse_b(x: &[f64]) -> Result<[f64; 4]> {
    if x.len() < 4 {
        return Err(DrError::InvalidData(format!("inverse needs 4 covariates, got {}", x.len())));
    }
    if !(x[0] > 0.0) {
        return Err(DrError::InvalidData(format!("x1 must be positive, got {}", x[0])));
    }
    if !(x[3] >= 0.0) {
        return Err(DrError::InvalidData(format!("x4 must be nonnegative, got {}", x[3])));
    }
    let z1 = 2.0 * x[0].ln();
    if z1 == 0.0 {
        return Err(DrError::InvalidData("z1 = 0 (x1 = 1): z3 is not identified".into()));
    }
    let z2 = (x[1] - 10.0) * (1.0 + x[0] * x[0]);
    let z3 = 25.0 * (x[2].cbrt() - 0.6) / z1;
    let z4 = x[3].sqrt() - z2 - 20.0;
    Ok([z1, z2, z3, z4])
}

/// Component `k` (0-based) of `inverse_b(row)`, NaN where undefined.
pub fn inverse_b_component(row: &[f64], k: usize) -> f64 {
    inverse_b(row).map(|z| z[k]).unwrap_or(f64::NAN)
}

/// Whether `x = b(z)` cannot be inverted accurately: `z2 + z4 + 20 < 0`
/// (wrong root) or `|z1|` below [`SINGULAR_Z1`].
pub fn is_singular_row(z: &[f64]) -> bool {
    z[1] + z[3] + 20.0 < 0.0 || z[0].abs() < SINGULAR_Z1
}

/// Generator stream for replication `rep`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep + 1);
    rng
}

/// A draw with `z` and `x` populated, plus the rows flagged singular for
/// the inverse map.
pub fn gen_dataset_flagged(cfg: &DgpConfig) -> Result<(Dataset, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    gen_with_rng(cfg, &mut rng)
}

pub fn gen_dataset(cfg: &DgpConfig) -> Result<Dataset> {
    gen_dataset_flagged(cfg).map(|(ds, _)| ds)
}

pub fn gen_with_rng<R: Rng>(cfg: &DgpConfig, rng: &mut R) -> Result<(Dataset, Vec<usize>)> {
    let n = cfg.n;
    let mut z = DMatrix::zeros(n, 4);
    let mut x = DMatrix::zeros(n, 4);
    let mut y = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    for i in 0..n {
        let zi: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let eps: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let ti = u8::from(u < true_propensity(&zi));
        y.push(cfg.gamma.eval(&zi) * ti as f64 + baseline_mean(&zi) + cfg.noise_sd * eps);
        t.push(ti);
        let xi = transform_b(&zi);
        for k in 0..4 {
            z[(i, k)] = zi[k];
            x[(i, k)] = xi[k];
        }
        if is_singular_row(&zi) {
            flagged.push(i);
        }
    }
    Ok((Dataset::new(y, t, x, Some(z))?, flagged))
}

/// Evaluate `f` on `r` independent draws. Results are in replication order
/// whatever the scheduling.
pub fn map_replications<T, F>(cfg: &DgpConfig, r: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &Dataset) -> T + Sync,
{
    cfg.validate()?;
    (0..r)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(cfg.seed, rep as u64);
            let (ds, _) = gen_with_rng(cfg, &mut rng)?;
            Ok(f(rep, &ds))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub estimator: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Variance over replications with denominator R, so that
    /// `mse = bias^2 + variance`.
    pub variance: f64,
    pub mse: f64,
    /// Mean of the reported variances.
    pub mean_reported_variance: f64,
    pub coverage: f64,
    /// Replications attempted, `successes + failures`.
    pub replications: usize,
    pub successes: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failure_messages: Vec<String>,
}

impl McRow {
    /// Summarise `(estimate, reported variance, covered)` triples.
    pub fn from_values(name: &str, truth: f64, vals: &[(f64, f64, bool)], failures: Vec<String>) -> Self {
        let r = vals.len();
        let rf = r as f64;
        let mean = compensated_sum(vals.iter().map(|v| v.0)) / rf;
        let variance = compensated_sum(vals.iter().map(|v| (v.0 - mean).powi(2))) / rf;
        let bias = mean - truth;
        let mut messages = failures;
        let failures = messages.len();
        messages.truncate(5);
        Self {
            estimator: name.to_string(),
            truth,
            mean,
            bias,
            variance,
            mse: bias * bias + variance,
            mean_reported_variance: compensated_sum(vals.iter().map(|v| v.1)) / rf,
            coverage: vals.iter().filter(|v| v.2).count() as f64 / rf,
            replications: r + failures,
            successes: r,
            failures,
            failure_messages: messages,
        }
    }

    /// Monte Carlo standard error of `mean`.
    pub fn mc_se(&self) -> f64 {
        (self.variance / (self.successes as f64 - 1.0).max(1.0)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub n: usize,
    pub seed: u64,
    pub replications: usize,
    pub rows: Vec<McRow>,
}

impl McSummary {
    pub fn row(&self, estimator: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(
            "estimator,truth,mean,bias,variance,mse,mean_reported_variance,coverage,replications,successes,failures\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.estimator,
                fmt_num(r.truth),
                fmt_num(r.mean),
                fmt_num(r.bias),
                fmt_num(r.variance),
                fmt_num(r.mse),
                fmt_num(r.mean_reported_variance),
                fmt_num(r.coverage),
                r.replications,
                r.successes,
                r.failures
            ));
        }
        s
    }
}

/// Seventeen significant digits, `NaN` spelled out.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "NaN".into()
    }
}

/// Run the estimator suite on `r` seeded draws and summarise each estimator
/// against `cfg.gamma.tau_pop()`. Failures are counted per estimator.
pub fn run_replications(
    cfg: &DgpConfig,
    r: usize,
    suite: &[EstimatorTag],
    specs: &SuiteSpecs,
    opts: &EstimateOptions,
) -> Result<McSummary> {
    if r < 2 {
        return Err(DrError::Config(vec![format!("replication count must be at least 2, got {r}")]));
    }
    let per_rep = map_replications(cfg, r, |_, ds| evaluate_suite(ds, suite, specs, opts))?;
    let truth = cfg.gamma.tau_pop();
    let rows = suite
        .iter()
        .enumerate()
        .map(|(k, tag)| {
            let mut vals = Vec::with_capacity(r);
            let mut fails = Vec::new();
            for (rep, res) in per_rep.iter().enumerate() {
                match &res[k] {
                    Ok(rep_) if rep_.estimate.is_finite() => {
                        vals.push((rep_.estimate, rep_.variance, rep_.covers(truth)))
                    }
                    Ok(_) => fails.push(format!("replication {rep}: non-finite estimate")),
                    Err(e) => fails.push(format!("replication {rep}: {e}")),
                }
            }
            McRow::from_values(&tag.to_string(), truth, &vals, fails)
        })
        .collect();
    Ok(McSummary { n: cfg.n, seed: cfg.seed, replications: r, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transform_at_origin() {
        assert_eq!(transform_b(&[0.0; 4]), [1.0, 10.0, 0.6f64.powi(3), 400.0]);
        let e = std::f64::consts::E;
        let x = transform_b(&[2.0, 1.0, 1.0, 1.0]);
        assert_relative_eq!(x[0], e, epsilon = 1e-15);
        assert_relative_eq!(x[1], 10.0 + 1.0 / (1.0 + e * e), epsilon = 1e-15);
        assert_relative_eq!(x[2], (2.0f64 / 25.0 + 0.6).powi(3), epsilon = 1e-15);
        assert_relative_eq!(x[3], 484.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_rejects_bad_rows() {
        assert!(inverse_b(&[1.0, 10.0, 0.2, 400.0]).is_err());
        assert!(inverse_b(&[2.0, 10.0, 0.2, -1.0]).is_err());
        assert!(inverse_b(&[-2.0, 10.0, 0.2, 1.0]).is_err());
        assert!(inverse_b_component(&[1.0, 10.0, 0.2, 400.0], 0).is_nan());
    }

    #[test]
    fn zero_noise_line() {
        let cfg = DgpConfig { noise_sd: 1e-300, ..DgpConfig::new(50, 3) };
        let ds = gen_dataset(&cfg).unwrap();
        let z = ds.z().unwrap();
        for i in 0..50 {
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            assert_relative_eq!(ds.y()[i], baseline_mean(&zi), epsilon = 1e-12);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = DgpConfig::new(30, 9);
        assert_eq!(gen_dataset(&cfg).unwrap(), gen_dataset(&cfg).unwrap());
        let other = gen_dataset(&DgpConfig::new(30, 10)).unwrap();
        assert_ne!(gen_dataset(&cfg).unwrap(), other);
    }

    #[test]
    fn replication_streams_differ() {
        use rand::RngCore;
        let a = replication_rng(1, 0).next_u64();
        let b = replication_rng(1, 1).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn mse_decomposes() {
        let row = McRow::from_values("x", 1.0, &[(0.5, 0.1, true), (2.0, 0.1, false)], vec!["e".into()]);
        assert_relative_eq!(row.mse, row.bias * row.bias + row.variance, epsilon = 1e-15);
        assert_eq!(row.coverage, 0.5);
        assert_eq!(row.failures, 1);
    }

    #[test]
    fn config_rejects_bad_values() {
        let cfg = DgpConfig { n: 1, noise_sd: 0.0, ..DgpConfig::new(1, 0) };
        match cfg.validate() {
            Err(DrError::Config(e)) => assert_eq!(e.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
