//! Small Monte Carlo study under the null effect, both models correct.
use drkit::basis::{BasisSpec, Source};
use drkit::estimators::{EstimateOptions, Method};
use drkit::simulate::{run_replications, DgpConfig};
use drkit::suite::{EstimatorTag, SuiteSpecs};

fn main() -> drkit::Result<()> {
    let specs = SuiteSpecs::new(BasisSpec::linear(Source::Z, 4), BasisSpec::linear(Source::Z, 4));
    let tags = [EstimatorTag::Ipw, EstimatorTag::Bdr(Method::Wls), EstimatorTag::Bdr(Method::IterWls), EstimatorTag::Semipar];
    let s = run_replications(&DgpConfig::new(500, 3), 100, &tags, &specs, &EstimateOptions::default())?;
    print!("{}", s.to_csv_string());
    Ok(())
}
