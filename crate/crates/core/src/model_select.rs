//! DR-grid model selection. Every pair of candidate propensity and outcome
//! specifications gives a B-DR estimate `tau_ij`; when either model in a pair
//! is right the cell is consistent, so rows (columns) whose cells agree point
//! at a good propensity (outcome) model.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::basis::{design_matrix, BasisSpec, Source};
use crate::data::Dataset;
use crate::error::{DrError, Result};
use crate::estimators::{fit_bdr_designs, fit_propensity_design, EstimateOptions, Method, ModelSpecs};
use crate::glm::{self, Link};
use crate::linalg::{self, log1pexp, sample_variance};
use crate::simulate::replication_rng;

/// Six propensity candidates over `x`: `{1,x1}`, `{1,x1,x2}`, `{1,x1..x3}`,
/// `{1,x1..x4}`, then `x1..x4` with squares and with pairwise products.
pub fn default_propensity_specs() -> Vec<BasisSpec> {
    vec![
        BasisSpec::linear(Source::X, 1),
        BasisSpec::linear(Source::X, 2),
        BasisSpec::linear(Source::X, 3),
        BasisSpec::linear(Source::X, 4),
        BasisSpec::linear_with_squares(Source::X, 4),
        BasisSpec::linear_with_interactions(Source::X, 4),
    ]
}

/// Four outcome candidates over `x`: `{1,x1}`, `{1,x1,x2}`, `{1,x1..x4}` and
/// `x1..x4` with squares.
pub fn default_outcome_specs() -> Vec<BasisSpec> {
    vec![
        BasisSpec::linear(Source::X, 1),
        BasisSpec::linear(Source::X, 2),
        BasisSpec::linear(Source::X, 4),
        BasisSpec::linear_with_squares(Source::X, 4),
    ]
}

/// Bootstrap covariance of the flattened (row-major) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCov {
    pub replicates: usize,
    pub seed: u64,
    /// Replicates dropped because some cell failed on the resample.
    pub failed_replicates: usize,
    pub cov: Vec<Vec<f64>>,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub prop_specs: Vec<BasisSpec>,
    pub out_specs: Vec<BasisSpec>,
    pub method: Method,
    pub link: Link,
    /// `None` where the cell failed.
    pub tau: Vec<Vec<Option<f64>>>,
    pub failures: Vec<Vec<bool>>,
    pub failure_reasons: Vec<Vec<Option<String>>>,
    pub row_sd: Vec<Option<f64>>,
    pub row_range: Vec<Option<f64>>,
    pub row_mean: Vec<Option<f64>>,
    pub col_sd: Vec<Option<f64>>,
    pub col_range: Vec<Option<f64>>,
    pub col_mean: Vec<Option<f64>>,
    pub bootstrap: Option<BootstrapCov>,
}

fn dispersion(vals: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if vals.is_empty() {
        return (None, None, None);
    }
    let mean = linalg::mean(vals);
    if vals.len() < 2 {
        return (None, None, Some(mean));
    }
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(sample_variance(vals).sqrt()), Some(hi - lo), Some(mean))
}

impl SelectionGrid {
    pub fn from_cells(
        prop_specs: Vec<BasisSpec>,
        out_specs: Vec<BasisSpec>,
        method: Method,
        link: Link,
        cells: Vec<Vec<std::result::Result<f64, String>>>,
    ) -> Self {
        let (ni, nj) = (prop_specs.len(), out_specs.len());
        let tau: Vec<Vec<Option<f64>>> =
            cells.iter().map(|r| r.iter().map(|c| c.as_ref().ok().copied()).collect()).collect();
        let failure_reasons: Vec<Vec<Option<String>>> =
            cells.iter().map(|r| r.iter().map(|c| c.as_ref().err().cloned()).collect()).collect();
        let failures = tau.iter().map(|r| r.iter().map(Option::is_none).collect()).collect();
        let mut row = (Vec::new(), Vec::new(), Vec::new());
        for r in &tau {
            let v: Vec<f64> = r.iter().flatten().copied().collect();
            let (s, g, m) = dispersion(&v);
            row.0.push(s);
            row.1.push(g);
            row.2.push(m);
        }
        let mut col = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..nj {
            let v: Vec<f64> = (0..ni).filter_map(|i| tau[i][j]).collect();
            let (s, g, m) = dispersion(&v);
            col.0.push(s);
            col.1.push(g);
            col.2.push(m);
        }
        Self {
            prop_specs,
            out_specs,
            method,
            link,
            tau,
            failures,
            failure_reasons,
            row_sd: row.0,
            row_range: row.1,
            row_mean: row.2,
            col_sd: col.0,
            col_range: col.1,
            col_mean: col.2,
            bootstrap: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.prop_specs.len(), self.out_specs.len())
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<f64> {
        self.tau[i][j]
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.tau
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter_map(move |(j, c)| c.map(|t| (i, j, t))))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DrError::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DrError::Serde(e.to_string()))
    }
}

/// Design matrices for every candidate, computed once and row-subset for
/// bootstrap resamples.
struct GridDesigns {
    q: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl GridDesigns {
    fn new(ds: &Dataset, prop_specs: &[BasisSpec], out_specs: &[BasisSpec]) -> Result<Self> {
        Ok(Self {
            q: prop_specs.iter().map(|s| design_matrix(ds, s)).collect::<Result<_>>()?,
            v: out_specs.iter().map(|s| design_matrix(ds, s)).collect::<Result<_>>()?,
        })
    }

    fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            q: self.q.iter().map(|m| m.select_rows(idx)).collect(),
            v: self.v.iter().map(|m| m.select_rows(idx)).collect(),
        }
    }
}

/// Grid cells on `ds`; the propensity fit is shared along each row.
fn grid_cells(
    ds: &Dataset,
    designs: &GridDesigns,
    prop_specs: &[BasisSpec],
    out_specs: &[BasisSpec],
    method: Method,
    link: Link,
    opts: &EstimateOptions,
) -> Vec<Vec<std::result::Result<f64, String>>> {
    (0..prop_specs.len())
        .map(|i| {
            let base = match fit_propensity_design(ds, &designs.q[i], &prop_specs[i], &opts.iwls) {
                Ok(b) => b,
                Err(e) => return vec![Err(format!("propensity {}: {e}", i + 1)); out_specs.len()],
            };
            (0..out_specs.len())
                .map(|j| {
                    let specs = ModelSpecs { propensity: prop_specs[i].clone(), outcome: out_specs[j].clone(), link };
                    fit_bdr_designs(ds, method, &designs.q[i], &designs.v[j], base.clone(), &specs, opts)
                        .map_err(|e| format!("cell ({}, {}): {e}", i + 1, j + 1))
                        .and_then(|f| {
                            if f.tau.is_finite() {
                                Ok(f.tau)
                            } else {
                                Err(format!("cell ({}, {}): non-finite estimate", i + 1, j + 1))
                            }
                        })
                })
                .collect()
        })
        .collect()
}

/// `tau_ij` for every propensity `i` and outcome `j`.
pub fn build_grid(
    ds: &Dataset,
    prop_specs: &[BasisSpec],
    out_specs: &[BasisSpec],
    method: Method,
    link: Link,
    opts: &EstimateOptions,
) -> Result<SelectionGrid> {
    if prop_specs.len() < 2 || out_specs.len() < 2 {
        return Err(DrError::Config(vec![format!(
            "a selection grid needs at least 2 propensity and 2 outcome specs, got {} x {}",
            prop_specs.len(),
            out_specs.len()
        )]));
    }
    let designs = GridDesigns::new(ds, prop_specs, out_specs)?;
    let cells = grid_cells(ds, &designs, prop_specs, out_specs, method, link, opts);
    let grid = SelectionGrid::from_cells(prop_specs.to_vec(), out_specs.to_vec(), method, link, cells);
    if grid.valid_cells().next().is_none() {
        let first = grid.failure_reasons[0][0].clone().unwrap_or_default();
        return Err(DrError::NoValidCell(format!("every grid cell failed; first: {first}")));
    }
    Ok(grid)
}

/// Paired nonparametric bootstrap of the whole grid. Replicate `b` resamples
/// with generator stream `b` of `seed`. Replicates on which a cell that is
/// valid in `grid` fails are dropped and counted.
pub fn bootstrap_covariance(
    ds: &Dataset,
    grid: &SelectionGrid,
    replicates: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<BootstrapCov> {
    if replicates < 2 {
        return Err(DrError::Config(vec![format!("bootstrap needs at least 2 replicates, got {replicates}")]));
    }
    let (ni, nj) = grid.shape();
    let designs = GridDesigns::new(ds, &grid.prop_specs, &grid.out_specs)?;
    let n = ds.n();
    let draws: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = replication_rng(seed, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let bds = ds.select_rows(&idx);
            let bdes = designs.select_rows(&idx);
            let cells = grid_cells(&bds, &bdes, &grid.prop_specs, &grid.out_specs, grid.method, grid.link, opts);
            let mut flat = Vec::with_capacity(ni * nj);
            for i in 0..ni {
                for j in 0..nj {
                    match (&cells[i][j], grid.tau[i][j]) {
                        (Ok(t), Some(_)) => flat.push(*t),
                        (_, None) => flat.push(0.0),
                        (Err(_), Some(_)) => return None,
                    }
                }
            }
            Some(flat)
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    if ok.len() < 2 {
        return Err(DrError::NoValidCell(format!(
            "only {} of {replicates} bootstrap replicates succeeded",
            ok.len()
        )));
    }
    let m = DMatrix::from_fn(ok.len(), ni * nj, |r, c| ok[r][c]);
    let cov = linalg::sample_covariance(&m);
    let min_eigenvalue = cov.clone().symmetric_eigen().eigenvalues.min();
    Ok(BootstrapCov {
        replicates,
        seed,
        failed_replicates: replicates - ok.len(),
        cov: (0..ni * nj).map(|r| cov.row(r).iter().copied().collect()).collect(),
        min_eigenvalue,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub rule: String,
    /// 0-based `(i*, j*)`.
    pub row: usize,
    pub col: usize,
    pub estimate: f64,
    pub row_scores: Vec<Option<f64>>,
    pub col_scores: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Smallest score, ties to the smallest index; `None` scores are skipped.
fn argmin(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((k, s));
            }
        }
    }
    best.map(|(k, _)| k)
}

/// Cell minimising `row_score + col_score + c |row_mean - col_mean|` over
/// valid cells. Ties go to the smaller row score, then the smaller column
/// score, then row-major order, so `c = 0` reproduces separate selection
/// whenever that cell is valid.
fn joint_argmin(grid: &SelectionGrid, rs: &[Option<f64>], cs: &[Option<f64>], c: f64) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), [f64; 3])> = None;
    for (i, j, _) in grid.valid_cells() {
        let (Some(r), Some(s)) = (rs[i], cs[j]) else { continue };
        let gap = match (grid.row_mean[i], grid.col_mean[j]) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => continue,
        };
        let penalty = if c == 0.0 { 0.0 } else { c * gap };
        let key = [r + s + penalty, r, s];
        let better = match &best {
            None => true,
            Some((_, b)) => key.partial_cmp(b) == Some(std::cmp::Ordering::Less),
        };
        if better {
            best = Some(((i, j), key));
        }
    }
    best.map(|(ij, _)| ij)
}

fn separate(grid: &SelectionGrid, rule: &str, rs: Vec<Option<f64>>, cs: Vec<Option<f64>>) -> Result<SelectionOutcome> {
    let i = argmin(&rs);
    let j = argmin(&cs);
    let mut notes = Vec::new();
    let (row, col) = match (i, j) {
        (Some(i), Some(j)) if grid.tau[i][j].is_some() => (i, j),
        _ => {
            notes.push("separately chosen cell failed or undefined; used joint criterion".into());
            joint_argmin(grid, &rs, &cs, 0.0)
                .ok_or_else(|| DrError::NoValidCell(format!("{rule}: no cell has defined row and column scores")))?
        }
    };
    Ok(SelectionOutcome {
        rule: rule.into(),
        row,
        col,
        estimate: grid.tau[row][col].expect("valid cell"),
        row_scores: rs,
        col_scores: cs,
        notes,
    })
}

/// Row with the least SD of its cells, column likewise.
pub fn select_sd(grid: &SelectionGrid) -> Result<SelectionOutcome> {
    separate(grid, "sd", grid.row_sd.clone(), grid.col_sd.clone())
}

pub fn select_range(grid: &SelectionGrid) -> Result<SelectionOutcome> {
    separate(grid, "range", grid.row_range.clone(), grid.col_range.clone())
}

/// Minimise `row SD + column SD + c |row mean - column mean|`.
pub fn select_joint(grid: &SelectionGrid, c: f64) -> Result<SelectionOutcome> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(DrError::Config(vec![format!("joint penalty c must be finite and nonnegative, got {c}")]));
    }
    let rule = format!("joint(c={c})");
    let (row, col) = joint_argmin(grid, &grid.row_sd, &grid.col_sd, c)
        .ok_or_else(|| DrError::NoValidCell(format!("{rule}: no cell has defined row and column SDs")))?;
    Ok(SelectionOutcome {
        rule,
        row,
        col,
        estimate: grid.tau[row][col].expect("valid cell"),
        row_scores: grid.row_sd.clone(),
        col_scores: grid.col_sd.clone(),
        notes: Vec::new(),
    })
}

/// Wald homogeneity statistic and p-value for the contrasts
/// `tau_{k0} - tau_k` over `cells` (flat indices), using a pseudo-inverse.
fn wald(cells: &[usize], tau: &[f64], cov: &DMatrix<f64>) -> Option<(f64, f64, usize)> {
    if cells.len() < 2 {
        return None;
    }
    let m = cells.len() - 1;
    let d = nalgebra::DVector::from_fn(m, |r, _| tau[cells[0]] - tau[cells[r + 1]]);
    let s = DMatrix::from_fn(m, m, |a, b| {
        let (p0, pa, pb) = (cells[0], cells[a + 1], cells[b + 1]);
        cov[(p0, p0)] - cov[(p0, pb)] - cov[(pa, p0)] + cov[(pa, pb)]
    });
    let (pinv, rank) = linalg::symmetric_pinv(&s);
    if rank == 0 {
        return Some((0.0, 1.0, 0));
    }
    let stat = (d.transpose() * pinv * &d)[(0, 0)].max(0.0);
    let p = ChiSquared::new(rank as f64).map(|c| c.sf(stat)).unwrap_or(f64::NAN);
    Some((stat, p, rank))
}

/// Row whose cells are most compatible with equality (largest Wald p-value,
/// ties to the smaller statistic, then index), column likewise.
pub fn select_wald(grid: &SelectionGrid) -> Result<SelectionOutcome> {
    let boot = grid
        .bootstrap
        .as_ref()
        .ok_or_else(|| DrError::Config(vec!["wald rule needs a bootstrap covariance".into()]))?;
    let (ni, nj) = grid.shape();
    let cov = DMatrix::from_fn(ni * nj, ni * nj, |r, c| boot.cov[r][c]);
    let flat: Vec<f64> = grid.tau.iter().flat_map(|r| r.iter().map(|c| c.unwrap_or(0.0))).collect();
    let mut notes = Vec::new();
    let mut score = |cells: Vec<usize>, label: String| -> Option<(f64, f64)> {
        let (stat, p, rank) = wald(&cells, &flat, &cov)?;
        if rank + 1 < cells.len() {
            notes.push(format!("{label}: contrast covariance has rank {rank} < {}", cells.len() - 1));
        }
        Some((p, stat))
    };
    let rows: Vec<Option<(f64, f64)>> = (0..ni)
        .map(|i| score((0..nj).filter(|&j| grid.tau[i][j].is_some()).map(|j| i * nj + j).collect(), format!("row {}", i + 1)))
        .collect();
    let cols: Vec<Option<(f64, f64)>> = (0..nj)
        .map(|j| score((0..ni).filter(|&i| grid.tau[i][j].is_some()).map(|i| i * nj + j).collect(), format!("column {}", j + 1)))
        .collect();
    let pick = |s: &[Option<(f64, f64)>]| -> Option<usize> {
        let mut best: Option<(usize, (f64, f64))> = None;
        for (k, v) in s.iter().enumerate() {
            let Some((p, stat)) = *v else { continue };
            let better = match best {
                None => true,
                Some((_, (bp, bs))) => p > bp || (p == bp && stat < bs),
            };
            if better {
                best = Some((k, (p, stat)));
            }
        }
        best.map(|(k, _)| k)
    };
    let row_scores: Vec<Option<f64>> = rows.iter().map(|v| v.map(|(p, _)| p)).collect();
    let col_scores: Vec<Option<f64>> = cols.iter().map(|v| v.map(|(p, _)| p)).collect();
    let (row, col) = match (pick(&rows), pick(&cols)) {
        (Some(i), Some(j)) if grid.tau[i][j].is_some() => (i, j),
        _ => {
            notes.push("separately chosen cell failed or undefined; maximised the p-value sum".into());
            let mut best: Option<((usize, usize), f64)> = None;
            for (i, j, _) in grid.valid_cells() {
                if let (Some(a), Some(b)) = (row_scores[i], col_scores[j]) {
                    if best.is_none_or(|(_, s)| a + b > s) {
                        best = Some(((i, j), a + b));
                    }
                }
            }
            best.map(|(ij, _)| ij).ok_or_else(|| DrError::NoValidCell("wald: no testable row and column".into()))?
        }
    };
    Ok(SelectionOutcome {
        rule: "wald".into(),
        row,
        col,
        estimate: grid.tau[row][col].expect("valid cell"),
        row_scores,
        col_scores,
        notes,
    })
}

/// Cell closest to the true effect (simulation benchmark only).
pub fn oracle(grid: &SelectionGrid, tau_true: f64) -> Result<SelectionOutcome> {
    let mut best: Option<((usize, usize), f64)> = None;
    for (i, j, t) in grid.valid_cells() {
        let e = (t - tau_true).abs();
        if best.is_none_or(|(_, b)| e < b) {
            best = Some(((i, j), e));
        }
    }
    let ((row, col), _) = best.ok_or_else(|| DrError::NoValidCell("oracle: every cell failed".into()))?;
    Ok(SelectionOutcome {
        rule: "oracle".into(),
        row,
        col,
        estimate: grid.tau[row][col].expect("valid cell"),
        row_scores: Vec::new(),
        col_scores: Vec::new(),
        notes: Vec::new(),
    })
}

/// Fold labels stratified by arm: each arm is permuted with the seeded
/// generator and dealt round-robin.
pub fn stratified_folds(ds: &Dataset, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = vec![0; ds.n()];
    let mut offset = 0;
    for arm in 0..2u8 {
        let mut idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.t()[i] == arm).collect();
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            label[i] = (k + offset) % folds;
        }
        offset += idx.len();
    }
    label
}

/// Cross-validated losses: minus log-likelihood of `T` for each propensity
/// spec and pooled per-arm squared error of `Y` (arms fitted separately by
/// unweighted regression) for each outcome spec.
pub fn cv_losses(
    ds: &Dataset,
    prop_specs: &[BasisSpec],
    out_specs: &[BasisSpec],
    folds: usize,
    seed: u64,
    link: Link,
    opts: &EstimateOptions,
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    let n = ds.n();
    if folds < 2 || folds > n {
        return Err(DrError::Config(vec![format!("folds must be in [2, n = {n}], got {folds}")]));
    }
    let designs = GridDesigns::new(ds, prop_specs, out_specs)?;
    let mut labels = stratified_folds(ds, folds, seed);
    let arms_ok = |labels: &[usize]| {
        (0..folds).all(|f| {
            (0..2u8).all(|arm| (0..n).filter(|&i| labels[i] != f && ds.t()[i] == arm).count() >= 1)
        })
    };
    if !arms_ok(&labels) {
        labels = stratified_folds(ds, folds, seed.wrapping_add(1));
        if !arms_ok(&labels) {
            return Err(DrError::InvalidData("a training fold has an empty treatment arm".into()));
        }
    }
    let t = ds.t_f64();
    let y = ds.y();
    let split = |f: usize| -> (Vec<usize>, Vec<usize>) { (0..n).partition(|&i| labels[i] != f) };

    let prop_loss = designs
        .q
        .iter()
        .map(|q| {
            let mut loss = 0.0;
            for f in 0..folds {
                let (train, test) = split(f);
                let tt: Vec<f64> = train.iter().map(|&i| t[i]).collect();
                let fit = glm::fit_logistic_ml(&q.select_rows(&train), &tt, &opts.iwls).ok()?;
                for &i in &test {
                    let eta = q.row(i).dot(&fit.coef.transpose());
                    loss += log1pexp(eta) - t[i] * eta;
                }
            }
            loss.is_finite().then_some(loss / n as f64)
        })
        .collect();
    let out_loss = designs
        .v
        .iter()
        .map(|v| {
            let mut loss = 0.0;
            for f in 0..folds {
                let (train, test) = split(f);
                for arm in 0..2u8 {
                    let rows: Vec<usize> = train.iter().copied().filter(|&i| ds.t()[i] == arm).collect();
                    let ya: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                    let fit = glm::fit_outcome(&v.select_rows(&rows), &ya, &vec![1.0; rows.len()], link, &opts.iwls).ok()?;
                    for &i in test.iter().filter(|&&i| ds.t()[i] == arm) {
                        let m = link.mean(v.row(i).dot(&fit.coef.transpose()));
                        loss += (y[i] - m).powi(2);
                    }
                }
            }
            loss.is_finite().then_some(loss / n as f64)
        })
        .collect();
    Ok((prop_loss, out_loss))
}

/// K-fold cross-validation baseline: best propensity by held-out
/// likelihood, best outcome by held-out squared error, reported through the
/// matching grid cell.
pub fn select_cv(
    ds: &Dataset,
    grid: &SelectionGrid,
    folds: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<SelectionOutcome> {
    let (rs, cs) = cv_losses(ds, &grid.prop_specs, &grid.out_specs, folds, seed, grid.link, opts)?;
    let mut out = separate(grid, "cv", rs, cs)?;
    out.rule = format!("cv({folds})");
    Ok(out)
}

/// The grid as CSV: one row per propensity spec with its SD and range, then
/// column SD and range rows. Failed cells read `FAILED`.
pub fn sensitivity_csv(grid: &SelectionGrid) -> String {
    let num = |v: Option<f64>| v.map(crate::simulate::fmt_num).unwrap_or_else(|| "FAILED".into());
    let dis = |v: Option<f64>| v.map(crate::simulate::fmt_num).unwrap_or_else(|| "NA".into());
    let quote = |s: &BasisSpec| format!("\"{s}\"");
    let mut out = String::from("propensity");
    for s in &grid.out_specs {
        out.push(',');
        out.push_str(&quote(s));
    }
    out.push_str(",row_sd,row_range\n");
    for (i, p) in grid.prop_specs.iter().enumerate() {
        out.push_str(&quote(p));
        for c in &grid.tau[i] {
            out.push(',');
            out.push_str(&num(*c));
        }
        out.push_str(&format!(",{},{}\n", dis(grid.row_sd[i]), dis(grid.row_range[i])));
    }
    for (label, vals) in [("col_sd", &grid.col_sd), ("col_range", &grid.col_range)] {
        out.push_str(label);
        for v in vals {
            out.push(',');
            out.push_str(&dis(*v));
        }
        out.push_str(",,\n");
    }
    out
}

/// Fixed-width text rendering of the grid for terminals.
pub fn sensitivity_text(grid: &SelectionGrid) -> String {
    let (ni, nj) = grid.shape();
    let cell = |v: Option<f64>, fail: &str| v.map(|x| format!("{x:>11.4}")).unwrap_or_else(|| format!("{fail:>11}"));
    let mut s = format!("{:>6}", "");
    for j in 0..nj {
        s.push_str(&format!("{:>11}", format!("out{}", j + 1)));
    }
    s.push_str(&format!("{:>11}{:>11}\n", "sd", "range"));
    for i in 0..ni {
        s.push_str(&format!("{:>6}", format!("ps{}", i + 1)));
        for j in 0..nj {
            s.push_str(&cell(grid.tau[i][j], "FAILED"));
        }
        s.push_str(&format!("{}{}\n", cell(grid.row_sd[i], "-"), cell(grid.row_range[i], "-")));
    }
    for (label, vals) in [("sd", &grid.col_sd), ("range", &grid.col_range)] {
        s.push_str(&format!("{label:>6}"));
        for v in vals {
            s.push_str(&cell(*v, "-"));
        }
        s.push('\n');
    }
    for (k, p) in grid.prop_specs.iter().enumerate() {
        s.push_str(&format!("ps{}: {p}\n", k + 1));
    }
    for (k, p) in grid.out_specs.iter().enumerate() {
        s.push_str(&format!("out{}: {p}\n", k + 1));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(k: usize) -> Vec<BasisSpec> {
        (1..=k).map(|p| BasisSpec::linear(Source::X, p.min(1))).collect()
    }

    fn grid(cells: Vec<Vec<Option<f64>>>) -> SelectionGrid {
        let (ni, nj) = (cells.len(), cells[0].len());
        let cells = cells
            .into_iter()
            .map(|r| r.into_iter().map(|c| c.ok_or_else(|| "failed".to_string())).collect())
            .collect();
        SelectionGrid::from_cells(specs(ni), specs(nj), Method::Wls, Link::Identity, cells)
    }

    #[test]
    fn constant_row_wins() {
        let g = grid(vec![
            vec![Some(1.0), Some(2.0), Some(0.0)],
            vec![Some(1.0), Some(1.0), Some(1.0)],
            vec![Some(3.0), Some(1.0), Some(2.0)],
        ]);
        assert_eq!(select_sd(&g).unwrap().row, 1);
        assert_eq!(select_range(&g).unwrap().row, 1);
    }

    #[test]
    fn all_equal_picks_first() {
        let g = grid(vec![vec![Some(2.0); 3]; 2]);
        let s = select_sd(&g).unwrap();
        assert_eq!((s.row, s.col), (0, 0));
        let j = select_joint(&g, 0.0).unwrap();
        assert_eq!((j.row, j.col), (0, 0));
    }

    #[test]
    fn failed_cells_are_excluded() {
        let g = grid(vec![vec![Some(1.0), None, Some(1.0)], vec![Some(0.0), Some(5.0), Some(9.0)]]);
        assert!(g.failures[0][1]);
        assert_eq!(g.row_sd[0], Some(0.0));
        let s = select_sd(&g).unwrap();
        assert!(g.tau[s.row][s.col].is_some());
        assert!(sensitivity_csv(&g).contains("FAILED"));
    }

    #[test]
    fn joint_with_large_c_matches_means() {
        let g = grid(vec![
            vec![Some(0.0), Some(10.0)],
            vec![Some(4.0), Some(6.0)],
        ]);
        // row means 5, 5; column means 2, 8
        let j = select_joint(&g, 1e6).unwrap();
        let gap = |i: usize, k: usize| (g.row_mean[i].unwrap() - g.col_mean[k].unwrap()).abs();
        let best = (0..2).flat_map(|i| (0..2).map(move |k| (i, k))).map(|(i, k)| gap(i, k)).fold(f64::INFINITY, f64::min);
        assert_eq!(gap(j.row, j.col), best);
    }

    #[test]
    fn oracle_exact_cell() {
        let g = grid(vec![vec![Some(0.3), Some(-1.0)], vec![Some(0.7), Some(2.0)]]);
        let o = oracle(&g, 0.7).unwrap();
        assert_eq!((o.row, o.col), (1, 0));
    }

    #[test]
    fn wald_prefers_homogeneous_row() {
        let mut g = grid(vec![vec![Some(1.0), Some(1.0)], vec![Some(0.0), Some(3.0)]]);
        let cov = DMatrix::<f64>::identity(4, 4) * 0.1;
        g.bootstrap = Some(BootstrapCov {
            replicates: 10,
            seed: 0,
            failed_replicates: 0,
            cov: (0..4).map(|r| cov.row(r).iter().copied().collect()).collect(),
            min_eigenvalue: 0.1,
        });
        let w = select_wald(&g).unwrap();
        assert_eq!(w.row, 0);
        assert_eq!(w.row_scores[0], Some(1.0));
    }

    #[test]
    fn json_round_trip() {
        let g = grid(vec![vec![Some(0.1), None], vec![Some(1.0 / 3.0), Some(2.5e-17)]]);
        let back = SelectionGrid::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
