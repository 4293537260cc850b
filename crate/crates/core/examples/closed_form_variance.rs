//! Homoscedastic closed-form variances on a large reference sample, and
//! their plug-in versions on one fitted sample.
use drkit::basis::{BasisSpec, Source};
use drkit::semipar::{fit_semipar, CTag};
use drkit::simulate::{gen_dataset, true_propensity, DgpConfig};
use drkit::variance::{theorem1_closed_forms, theorem1_plug_in, PopulationInputs};
use drkit::IwlsConfig;
use nalgebra::DMatrix;

fn main() -> drkit::Result<()> {
    let big = gen_dataset(&DgpConfig::new(200_000, 1))?;
    let z = big.z().expect("simulated data carry z");
    let pi: Vec<f64> = z.row_iter().map(|r| true_propensity(&r.iter().copied().collect::<Vec<_>>())).collect();
    let pop = theorem1_closed_forms(&PopulationInputs {
        v: DMatrix::from_element(big.n(), 1, 1.0),
        pi,
        gamma: vec![0.0; big.n()],
        sigma2: 1.0,
    })?;
    println!("population: Lambda = {:.4}, Lambda_omega = {:.4}, B-DR = {:.4}, gap = {:.4}",
        pop.lambda, pop.lambda_omega, pop.bdr_pop, pop.efficiency_gap);

    let ds = gen_dataset(&DgpConfig::new(2000, 2))?;
    let zs = BasisSpec::linear(Source::Z, 4);
    let fit = fit_semipar(&ds, &BasisSpec::intercept(), &zs, &zs, CTag::Identity, &IwlsConfig::default())?;
    let plug = theorem1_plug_in(&ds, &fit)?;
    println!("plug-in (n = {}): Lambda = {:.4}, Lambda_omega = {:.4}", ds.n(), plug.lambda, plug.lambda_omega);
    Ok(())
}
