//! Observed data `(Y, T, X)` plus optional simulation-only latent covariates.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{DrError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<u8>,
    x: DMatrix<f64>,
    z: Option<DMatrix<f64>>,
}

impl Dataset {
    /// Shape and treatment-coding checks only; finiteness is reported by
    /// [`Dataset::validate`].
    pub fn new(y: Vec<f64>, t: Vec<u8>, x: DMatrix<f64>, z: Option<DMatrix<f64>>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(DrError::InvalidData("dataset has no rows".into()));
        }
        if t.len() != n || x.nrows() != n {
            return Err(DrError::InvalidData(format!(
                "length mismatch: y={}, t={}, rows(x)={}",
                n,
                t.len(),
                x.nrows()
            )));
        }
        if let Some(z) = &z {
            if z.nrows() != n {
                return Err(DrError::InvalidData(format!(
                    "length mismatch: y={}, rows(z)={}",
                    n,
                    z.nrows()
                )));
            }
        }
        if let Some(i) = t.iter().position(|&v| v > 1) {
            return Err(DrError::InvalidData(format!(
                "treatment at row {} is {}, expected 0 or 1",
                i + 1,
                t[i]
            )));
        }
        Ok(Self { y, t, x, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[u8] {
        &self.t
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> Option<&DMatrix<f64>> {
        self.z.as_ref()
    }

    pub fn arm_count(&self, arm: u8) -> usize {
        self.t.iter().filter(|&&v| v == arm).count()
    }

    /// `I(T = arm)` as floats.
    pub fn indicator(&self, arm: u8) -> Vec<f64> {
        self.t.iter().map(|&v| if v == arm { 1.0 } else { 0.0 }).collect()
    }

    pub fn t_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&v| v as f64).collect()
    }

    pub fn require_arm(&self, arm: u8) -> Result<()> {
        if self.arm_count(arm) == 0 {
            Err(DrError::EmptyArm(arm))
        } else {
            Ok(())
        }
    }

    pub fn require_both_arms(&self) -> Result<()> {
        self.require_arm(0)?;
        self.require_arm(1)
    }

    /// Same data with the treatment labels swapped.
    pub fn with_swapped_arms(&self) -> Self {
        let t = self.t.iter().map(|&v| 1 - v).collect();
        Self { t, ..self.clone() }
    }

    /// Same data with a different outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(y, self.t.clone(), self.x.clone(), self.z.clone())
    }

    /// Rows `idx` (with repetition) as a new dataset.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            x: self.x.select_rows(idx),
            z: self.z.as_ref().map(|z| z.select_rows(idx)),
        }
    }

    pub fn validate(&self) -> ValidationReport {
        ValidationReport::build(self)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| DrError::io(path.as_ref(), e))?;
        Self::from_csv_str(&text)
    }

    /// Parses the `y,t,x1,...,xp[,z1,...,zq]` layout.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| DrError::InvalidData("empty CSV".into()))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        if names.len() < 3 || names[0] != "y" || names[1] != "t" {
            return Err(DrError::InvalidData(format!(
                "header must start with `y,t,x1`, got `{header}`"
            )));
        }
        let mut p = 0;
        let mut q = 0;
        for (k, name) in names[2..].iter().enumerate() {
            let expect_x = format!("x{}", p + 1);
            let expect_z = format!("z{}", q + 1);
            if q == 0 && *name == expect_x {
                p += 1;
            } else if *name == expect_z && p > 0 {
                q += 1;
            } else {
                return Err(DrError::InvalidData(format!(
                    "unexpected column `{name}` at position {}",
                    k + 3
                )));
            }
        }
        if p == 0 {
            return Err(DrError::InvalidData("no x columns".into()));
        }
        let mut y = Vec::new();
        let mut t = Vec::new();
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != names.len() {
                return Err(DrError::InvalidData(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    cells.len(),
                    names.len()
                )));
            }
            let num = |k: usize| -> Result<f64> {
                cells[k].parse::<f64>().map_err(|_| {
                    DrError::InvalidData(format!("row {}: `{}` is not a number", row + 1, cells[k]))
                })
            };
            y.push(num(0)?);
            t.push(match cells[1] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(DrError::InvalidData(format!(
                        "row {}: treatment `{other}` is not 0/1",
                        row + 1
                    )))
                }
            });
            for k in 0..p {
                xs.push(num(2 + k)?);
            }
            for k in 0..q {
                zs.push(num(2 + p + k)?);
            }
        }
        let n = y.len();
        let x = DMatrix::from_row_slice(n, p, &xs);
        let z = (q > 0).then(|| DMatrix::from_row_slice(n, q, &zs));
        Self::new(y, t, x, z)
    }

    pub fn to_csv_string(&self) -> String {
        let p = self.x.ncols();
        let q = self.z.as_ref().map_or(0, |z| z.ncols());
        let mut out = String::from("y,t");
        for k in 1..=p {
            let _ = write!(out, ",x{k}");
        }
        for k in 1..=q {
            let _ = write!(out, ",z{k}");
        }
        out.push('\n');
        for i in 0..self.n() {
            let _ = write!(out, "{:?},{}", self.y[i], self.t[i]);
            for k in 0..p {
                let _ = write!(out, ",{:?}", self.x[(i, k)]);
            }
            if let Some(z) = &self.z {
                for k in 0..q {
                    let _ = write!(out, ",{:?}", z[(i, k)]);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Result of [`Dataset::validate`]. Never mutates the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub arm_counts: (usize, usize),
    pub finite: bool,
    /// Problems that make the data unusable.
    pub fatal: Vec<String>,
    /// Non-fatal observations (empty arm, constant outcome, rank hints).
    pub flags: Vec<String>,
}

impl ValidationReport {
    fn build(ds: &Dataset) -> Self {
        let mut fatal = Vec::new();
        let mut flags = Vec::new();
        let n = ds.n();
        if n == 0 {
            fatal.push("no rows".into());
        }
        if let Some(i) = ds.y.iter().position(|v| !v.is_finite()) {
            fatal.push(format!("non-finite outcome at row {}", i + 1));
        }
        for (name, m) in [("x", Some(&ds.x)), ("z", ds.z.as_ref())] {
            let Some(m) = m else { continue };
            'rows: for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if !m[(i, j)].is_finite() {
                        fatal.push(format!("non-finite {name}{} at row {}", j + 1, i + 1));
                        break 'rows;
                    }
                }
            }
        }
        let counts = (ds.arm_count(0), ds.arm_count(1));
        if counts.0 == 0 {
            flags.push("arm 0 empty".into());
        }
        if counts.1 == 0 {
            flags.push("arm 1 empty".into());
        }
        if n > 1 && ds.y.iter().all(|&v| v == ds.y[0]) {
            flags.push("constant outcome".into());
        }
        if fatal.is_empty() && n > ds.x.ncols() {
            let mut design = DMatrix::from_element(n, ds.x.ncols() + 1, 1.0);
            design.columns_mut(1, ds.x.ncols()).copy_from(&ds.x);
            let sv = design.singular_values();
            let top = sv.max();
            let bottom = sv.min();
            if !(bottom > top * 1e-10) {
                flags.push("x (with intercept) may be rank deficient".into());
            }
        } else if fatal.is_empty() {
            flags.push("fewer rows than covariates; x (with intercept) is rank deficient".into());
        }
        ValidationReport {
            n,
            arm_counts: counts,
            finite: fatal.is_empty(),
            fatal,
            flags,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.fatal.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = t.len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        Dataset::new(y, t, x, None).unwrap()
    }

    #[test]
    fn balanced_toy_is_ok() {
        let ds = toy(vec![0, 1, 0, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let r = ds.validate();
        assert!(r.is_ok());
        assert_eq!(r.arm_counts, (2, 2));
        assert!(r.flags.is_empty(), "{:?}", r.flags);
    }

    #[test]
    fn all_treated_flags_empty_control_arm() {
        let ds = toy(vec![1, 1, 1], vec![1.0, 2.0, 3.0]);
        let r = ds.validate();
        assert!(r.is_ok());
        assert!(r.flags.iter().any(|f| f == "arm 0 empty"));
    }

    #[test]
    fn non_finite_outcome_is_fatal() {
        let ds = toy(vec![0, 1, 0], vec![1.0, f64::NAN, 3.0]);
        let r = ds.validate();
        assert!(!r.is_ok());
        assert_eq!(r.fatal[0], "non-finite outcome at row 2");
    }

    #[test]
    fn rejects_bad_shapes_and_codes() {
        assert!(Dataset::new(vec![], vec![], DMatrix::zeros(0, 1), None).is_err());
        assert!(Dataset::new(vec![1.0], vec![2], DMatrix::zeros(1, 1), None).is_err());
        assert!(Dataset::new(vec![1.0, 2.0], vec![0], DMatrix::zeros(2, 1), None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 2.0, 1e-300, -3.5]);
        let z = DMatrix::from_row_slice(2, 1, &[0.5, -0.25]);
        let ds = Dataset::new(vec![1.0 / 3.0, 2.0], vec![0, 1], x, Some(z)).unwrap();
        let text = ds.to_csv_string();
        assert!(text.starts_with("y,t,x1,x2,z1\n"));
        let back = Dataset::from_csv_str(&text).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_rejects_bad_treatment() {
        let err = Dataset::from_csv_str("y,t,x1\n1.0,2,0.5\n").unwrap_err();
        assert!(err.to_string().contains("not 0/1"));
        assert!(Dataset::from_csv_str("y,t,x1\n1.0,1.0,0.5\n").is_err());
    }
}
