//! Double-robust estimation of the effect of a binary treatment.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`] and [`basis`]: datasets, CSV I/O and basis (feature) expansions.
//! - [`glm`]: IWLS solvers for logistic ML and identity/logit outcome fits.
//! - [`estimators`]: IPW, HT and bounded double-robust (B-DR) arm means and
//!   ATE estimators with REG / WLS / NR / ITER-WLS / ITER-REG outcome fits.
//! - [`semipar`]: the semiparametric effect-modification regression
//!   `gamma(x) = beta' v(x)` fitted by closed-form double-robust estimating
//!   equations.
//! - [`variance`]: plug-in variance of the B-DR estimator, the stacked
//!   sandwich for the semiparametric fit and the homoscedastic closed forms.
//! - [`simulate`]: the Kang–Schafer data-generating process and a replication
//!   harness.
//! - [`model_select`]: the DR-grid sensitivity matrix and its selection rules.
//! - [`cli`]: configuration parsing and the batch front end used by the
//!   `drkit` binary.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod linalg;
pub mod model_select;
pub mod report;
pub mod semipar;
pub mod simulate;
pub mod suite;
pub mod variance;

pub use basis::{BasisSpec, Column, Source, Term};
pub use data::{Dataset, ValidationReport};
pub use error::{DrError, Result};
pub use estimators::{FittedOutcome, FittedPropensity, Method};
pub use glm::{IwlsConfig, Link};
pub use report::{EstimateReport, OverlapSummary};
pub use semipar::{CTag, SemiparFit};
