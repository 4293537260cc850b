//! Fit gamma(x) = beta'v(x) and report sandwich intervals for beta.
use drkit::basis::{BasisSpec, Source};
use drkit::semipar::{fit_semipar, tau_from_semipar, CTag, TauWeight};
use drkit::simulate::{gen_dataset, DgpConfig, GammaFn};
use drkit::variance::sandwich;
use drkit::IwlsConfig;

fn main() -> drkit::Result<()> {
    // true effect 1 + 2 z1
    let cfg = DgpConfig { gamma: GammaFn::Linear([1.0, 2.0, 0.0, 0.0, 0.0]), ..DgpConfig::new(3000, 11) };
    let ds = gen_dataset(&cfg)?;
    let v = BasisSpec::parse("1 + z1")?;
    let z = BasisSpec::linear(Source::Z, 4);
    for c in [CTag::Identity, CTag::InverseOmega] {
        let fit = fit_semipar(&ds, &v, &z, &z, c, &IwlsConfig::default())?;
        let pieces = sandwich(&ds, &fit)?;
        println!("c = {c:?}");
        for j in 0..fit.beta.len() {
            let (lo, hi) = pieces.beta_ci(&fit, j);
            println!("  beta[{j}] = {:.4}  [{lo:.4}, {hi:.4}]", fit.beta[j]);
        }
        let tau = tau_from_semipar(&ds, &fit, &TauWeight::Unit)?;
        println!("  P_n(beta'V) = {:.4} (se {:.4})", tau.estimate, tau.variance.sqrt());
    }
    Ok(())
}
