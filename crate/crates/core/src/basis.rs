//! Basis expansions `v(x) = (1, v_2(x), ..., v_d(x))` and design matrices.
//!
//! A [`BasisSpec`] is an ordered list of [`Term`]s whose first entry is the
//! constant. Specs have a small textual grammar used by the CLI and by the
//! JSON outputs:
//!
//! ```text
//! 1 + x1 + x1^2 + x1*x2 + binv3(x)
//! ```
//!
//! Terms are separated by `+` or `,`. `xJ`/`zJ` are 1-based columns of the
//! observed or latent covariates, `^E` a positive integer power, `a*b` an
//! interaction, and `tag(x)` a registered custom transform of the whole row.

use std::collections::HashMap;
use std::fmt;
use std::sync::{OnceLock, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    X,
    Z,
}

impl Source {
    fn letter(self) -> char {
        match self {
            Source::X => 'x',
            Source::Z => 'z',
        }
    }
}

/// A covariate column; `index` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Column {
    pub source: Source,
    pub index: usize,
}

impl Column {
    pub fn x(index: usize) -> Self {
        Self { source: Source::X, index }
    }

    pub fn z(index: usize) -> Self {
        Self { source: Source::Z, index }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.source.letter(), self.index + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Constant,
    Raw(Column),
    Power(Column, u32),
    Interaction(Column, Column),
    Custom { tag: String, source: Source },
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Constant => write!(f, "1"),
            Term::Raw(c) => write!(f, "{c}"),
            Term::Power(c, e) => write!(f, "{c}^{e}"),
            Term::Interaction(a, b) => write!(f, "{a}*{b}"),
            Term::Custom { tag, source } => write!(f, "{tag}({})", source.letter()),
        }
    }
}

/// Pure row transform usable through [`Term::Custom`].
pub type TransformFn = fn(&[f64]) -> f64;

fn registry() -> &'static RwLock<HashMap<String, TransformFn>> {
    static REG: OnceLock<RwLock<HashMap<String, TransformFn>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m: HashMap<String, TransformFn> = HashMap::new();
        m.insert("binv1".into(), |r| crate::simulate::inverse_b_component(r, 0));
        m.insert("binv2".into(), |r| crate::simulate::inverse_b_component(r, 1));
        m.insert("binv3".into(), |r| crate::simulate::inverse_b_component(r, 2));
        m.insert("binv4".into(), |r| crate::simulate::inverse_b_component(r, 3));
        RwLock::new(m)
    })
}

/// Register a custom transform under `tag`. Re-registering replaces it.
pub fn register_transform(tag: &str, f: TransformFn) {
    registry().write().expect("transform registry poisoned").insert(tag.to_string(), f);
}

fn lookup_transform(tag: &str) -> Option<TransformFn> {
    registry().read().expect("transform registry poisoned").get(tag).copied()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BasisSpec {
    terms: Vec<Term>,
}

impl BasisSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        match terms.first() {
            Some(Term::Constant) => {}
            _ => return Err(DrError::Basis("first term must be the constant 1".into())),
        }
        for term in &terms[1..] {
            match term {
                Term::Constant => {
                    return Err(DrError::Basis("constant may only appear first".into()))
                }
                Term::Power(_, 0) => {
                    return Err(DrError::Basis("power exponent must be a positive integer".into()))
                }
                Term::Custom { tag, .. } if lookup_transform(tag).is_none() => {
                    return Err(DrError::Basis(format!("unknown custom transform `{tag}`")))
                }
                _ => {}
            }
        }
        Ok(Self { terms })
    }

    /// `{1}`.
    pub fn intercept() -> Self {
        Self { terms: vec![Term::Constant] }
    }

    /// `{1, s1, ..., sp}`.
    pub fn linear(source: Source, p: usize) -> Self {
        let mut terms = vec![Term::Constant];
        terms.extend((0..p).map(|k| Term::Raw(Column { source, index: k })));
        Self { terms }
    }

    /// `{1, s1..sp, s1^2..sp^2}`.
    pub fn linear_with_squares(source: Source, p: usize) -> Self {
        let mut spec = Self::linear(source, p);
        spec.terms
            .extend((0..p).map(|k| Term::Power(Column { source, index: k }, 2)));
        spec
    }

    /// `{1, s1..sp, all pairwise products}`.
    pub fn linear_with_interactions(source: Source, p: usize) -> Self {
        let mut spec = Self::linear(source, p);
        for a in 0..p {
            for b in a + 1..p {
                spec.terms.push(Term::Interaction(
                    Column { source, index: a },
                    Column { source, index: b },
                ));
            }
        }
        spec
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn dimension(&self) -> usize {
        self.terms.len()
    }

    pub fn uses_source(&self, source: Source) -> bool {
        self.terms.iter().any(|t| match t {
            Term::Constant => false,
            Term::Raw(c) | Term::Power(c, _) => c.source == source,
            Term::Interaction(a, b) => a.source == source || b.source == source,
            Term::Custom { source: s, .. } => *s == source,
        })
    }

    /// Position of every term of `self` inside `other`, if all are present.
    pub fn positions_in(&self, other: &BasisSpec) -> Option<Vec<usize>> {
        self.terms
            .iter()
            .map(|t| other.terms.iter().position(|o| o == t))
            .collect()
    }

    pub fn is_subset_of(&self, other: &BasisSpec) -> bool {
        self.positions_in(other).is_some()
    }

    /// `self` followed by the terms of `other` not already present.
    pub fn union(&self, other: &BasisSpec) -> BasisSpec {
        let mut terms = self.terms.clone();
        for t in &other.terms {
            if !terms.contains(t) {
                terms.push(t.clone());
            }
        }
        BasisSpec { terms }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in text.split(['+', ',']) {
            let tok: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
            if tok.is_empty() {
                return Err(DrError::Basis(format!("empty term in `{text}`")));
            }
            terms.push(parse_term(&tok)?);
        }
        Self::new(terms)
    }

    /// Evaluate the basis on one unit.
    pub fn eval_row(&self, x_row: &[f64], z_row: Option<&[f64]>) -> Result<Vec<f64>> {
        let get = |c: &Column| -> Result<f64> {
            let row = match c.source {
                Source::X => x_row,
                Source::Z => z_row.ok_or_else(|| DrError::Basis("latent covariates z are not available".into()))?,
            };
            row.get(c.index)
                .copied()
                .ok_or_else(|| DrError::Basis(format!("column {c} out of range (width {})", row.len())))
        };
        let mut out = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let v = match term {
                Term::Constant => 1.0,
                Term::Raw(c) => get(c)?,
                Term::Power(c, e) => get(c)?.powi(*e as i32),
                Term::Interaction(a, b) => get(a)? * get(b)?,
                Term::Custom { tag, source } => {
                    let f = lookup_transform(tag)
                        .ok_or_else(|| DrError::Basis(format!("unknown custom transform `{tag}`")))?;
                    let row = match source {
                        Source::X => x_row,
                        Source::Z => z_row.ok_or_else(|| DrError::Basis("latent covariates z are not available".into()))?,
                    };
                    f(row)
                }
            };
            if !v.is_finite() {
                return Err(DrError::Basis(format!("term `{term}` is not finite")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn check_columns(&self, ds: &Dataset) -> Result<()> {
        let width = |s: Source| -> Result<usize> {
            match s {
                Source::X => Ok(ds.x().ncols()),
                Source::Z => ds
                    .z()
                    .map(|z| z.ncols())
                    .ok_or_else(|| DrError::Basis("latent covariates z are not available".into())),
            }
        };
        for term in &self.terms {
            let cols: Vec<&Column> = match term {
                Term::Raw(c) | Term::Power(c, _) => vec![c],
                Term::Interaction(a, b) => vec![a, b],
                Term::Custom { source, .. } => {
                    width(*source)?;
                    vec![]
                }
                Term::Constant => vec![],
            };
            for c in cols {
                let w = width(c.source)?;
                if c.index >= w {
                    return Err(DrError::Basis(format!("column {c} out of range (width {w})")));
                }
            }
        }
        Ok(())
    }
}

fn parse_column(tok: &str) -> Result<Column> {
    let source = match tok.chars().next() {
        Some('x') => Source::X,
        Some('z') => Source::Z,
        _ => return Err(DrError::Basis(format!("malformed term `{tok}`"))),
    };
    let idx: usize = tok[1..]
        .parse()
        .map_err(|_| DrError::Basis(format!("malformed term `{tok}`")))?;
    if idx == 0 {
        return Err(DrError::Basis(format!("columns are 1-based, got `{tok}`")));
    }
    Ok(Column { source, index: idx - 1 })
}

fn parse_term(tok: &str) -> Result<Term> {
    if tok == "1" {
        return Ok(Term::Constant);
    }
    if let Some(open) = tok.find('(') {
        let tag = &tok[..open];
        let source = match &tok[open..] {
            "(x)" => Source::X,
            "(z)" => Source::Z,
            _ => return Err(DrError::Basis(format!("malformed term `{tok}`"))),
        };
        if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(DrError::Basis(format!("malformed term `{tok}`")));
        }
        return Ok(Term::Custom { tag: tag.to_string(), source });
    }
    if let Some((a, b)) = tok.split_once('*') {
        return Ok(Term::Interaction(parse_column(a)?, parse_column(b)?));
    }
    if let Some((c, e)) = tok.split_once('^') {
        let e: u32 = e.parse().map_err(|_| {
            DrError::Basis(format!("exponent in `{tok}` must be a positive integer"))
        })?;
        if e == 0 {
            return Err(DrError::Basis(format!("exponent in `{tok}` must be a positive integer")));
        }
        return Ok(Term::Power(parse_column(c)?, e));
    }
    Ok(Term::Raw(parse_column(tok)?))
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl From<BasisSpec> for String {
    fn from(s: BasisSpec) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for BasisSpec {
    type Error = DrError;
    fn try_from(s: String) -> Result<Self> {
        BasisSpec::parse(&s)
    }
}

impl std::str::FromStr for BasisSpec {
    type Err = DrError;
    fn from_str(s: &str) -> Result<Self> {
        BasisSpec::parse(s)
    }
}

/// The `n x d` matrix whose row `i` is `v(row_i)`; column 0 is all ones.
pub fn design_matrix(ds: &Dataset, spec: &BasisSpec) -> Result<DMatrix<f64>> {
    spec.check_columns(ds)?;
    let n = ds.n();
    let mut out = DMatrix::zeros(n, spec.dimension());
    let col = |c: &Column| -> nalgebra::DVectorView<'_, f64> {
        match c.source {
            Source::X => ds.x().column(c.index),
            Source::Z => ds.z().expect("checked").column(c.index),
        }
    };
    for (k, term) in spec.terms.iter().enumerate() {
        match term {
            Term::Constant => out.column_mut(k).fill(1.0),
            Term::Raw(c) => out.column_mut(k).copy_from(&col(c)),
            Term::Power(c, e) => {
                let src = col(c);
                for i in 0..n {
                    out[(i, k)] = src[i].powi(*e as i32);
                }
            }
            Term::Interaction(a, b) => {
                let (sa, sb) = (col(a), col(b));
                for i in 0..n {
                    out[(i, k)] = sa[i] * sb[i];
                }
            }
            Term::Custom { tag, source } => {
                let f = lookup_transform(tag)
                    .ok_or_else(|| DrError::Basis(format!("unknown custom transform `{tag}`")))?;
                let m = match source {
                    Source::X => ds.x(),
                    Source::Z => ds.z().expect("checked"),
                };
                let mut row = vec![0.0; m.ncols()];
                for i in 0..n {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = m[(i, j)];
                    }
                    out[(i, k)] = f(&row);
                }
            }
        }
    }
    if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
        let (i, k) = (pos % n, pos / n);
        return Err(DrError::Basis(format!(
            "term `{}` is not finite at row {}",
            spec.terms[k],
            i + 1
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds_x(rows: &[f64], p: usize) -> Dataset {
        let n = rows.len() / p;
        Dataset::new(vec![0.0; n], vec![0; n], DMatrix::from_row_slice(n, p, rows), None).unwrap()
    }

    #[test]
    fn constant_basis_is_ones() {
        let ds = ds_x(&[2.0, 3.0, 5.0], 1);
        let m = design_matrix(&ds, &BasisSpec::intercept()).unwrap();
        assert_eq!(m, DMatrix::from_element(3, 1, 1.0));
    }

    #[test]
    fn identity_embedding() {
        let ds = ds_x(&[2.0, 3.0], 1);
        let m = design_matrix(&ds, &BasisSpec::parse("1 + x1").unwrap()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 3.0]));
    }

    #[test]
    fn power_term() {
        let ds = ds_x(&[2.0], 1);
        let m = design_matrix(&ds, &BasisSpec::parse("1, x1, x1^2").unwrap()).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn grammar_case_has_four_terms() {
        let s = BasisSpec::parse("1 + x1 + x1^2 + x1*x2").unwrap();
        assert_eq!(s.dimension(), 4);
        assert_eq!(s.to_string(), "1 + x1 + x1^2 + x1*x2");
        assert_eq!(BasisSpec::parse(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn grammar_rejections() {
        assert!(BasisSpec::parse("x1 + 1").is_err());
        assert!(BasisSpec::parse("1 + x0").is_err());
        assert!(BasisSpec::parse("1 + x1^0.5").is_err());
        assert!(BasisSpec::parse("1 + x1^0").is_err());
        assert!(BasisSpec::parse("1 + w1").is_err());
        assert!(BasisSpec::parse("1 + + x1").is_err());
        assert!(BasisSpec::parse("1 + nosuch(x)").is_err());
    }

    #[test]
    fn out_of_range_and_missing_source() {
        let ds = ds_x(&[2.0, 3.0], 1);
        assert!(design_matrix(&ds, &BasisSpec::parse("1 + x2").unwrap()).is_err());
        assert!(design_matrix(&ds, &BasisSpec::parse("1 + z1").unwrap()).is_err());
    }

    #[test]
    fn eval_row_matches_design_matrix() {
        let ds = ds_x(&[1.5, -2.0, 0.5, 4.0], 2);
        let s = BasisSpec::parse("1 + x1 + x2^3 + x1*x2").unwrap();
        let m = design_matrix(&ds, &s).unwrap();
        for i in 0..2 {
            let row: Vec<f64> = ds.x().row(i).iter().copied().collect();
            let v = s.eval_row(&row, None).unwrap();
            assert_eq!(v, m.row(i).iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn custom_transform_registration() {
        register_transform("double_first", |r| 2.0 * r[0]);
        let ds = ds_x(&[1.5, 3.0], 1);
        let s = BasisSpec::parse("1 + double_first(x)").unwrap();
        let m = design_matrix(&ds, &s).unwrap();
        assert_eq!(m[(1, 1)], 6.0);
    }

    #[test]
    fn serde_uses_grammar() {
        let s = BasisSpec::linear_with_squares(Source::Z, 2);
        let js = serde_json::to_string(&s).unwrap();
        assert_eq!(js, "\"1 + z1 + z2 + z1^2 + z2^2\"");
        let back: BasisSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn subset_positions() {
        let small = BasisSpec::parse("1 + x2").unwrap();
        let big = BasisSpec::parse("1 + x1 + x2").unwrap();
        assert_eq!(small.positions_in(&big), Some(vec![0, 2]));
        assert!(!big.is_subset_of(&small));
    }
}
