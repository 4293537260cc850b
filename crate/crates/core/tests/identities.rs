use approx::assert_abs_diff_eq;
use drkit::basis::{BasisSpec, Source};
use drkit::estimators::{fit_bdr, fit_propensity, mu_aipw, mu_bdr, mu_ipw, EstimateOptions, Method, ModelSpecs};
use drkit::semipar::{fit_semipar, CTag};
use drkit::simulate::{gen_dataset, DgpConfig, GammaFn};
use drkit::variance::sandwich;
use drkit::{IwlsConfig, Link};

fn data(n: usize, seed: u64) -> drkit::Dataset {
    let cfg = DgpConfig { gamma: GammaFn::Linear([2.0, 1.0, 0.0, -0.5, 0.0]), ..DgpConfig::new(n, seed) };
    gen_dataset(&cfg).unwrap()
}

#[test]
fn ipw_is_bdr_with_zero_regression() {
    let ds = data(400, 3);
    let pi = fit_propensity(&ds, &BasisSpec::linear(Source::X, 4), &IwlsConfig::default()).unwrap();
    let zero = vec![0.0; ds.n()];
    for arm in 0..2 {
        let a = mu_ipw(&ds, &pi.fitted, arm).unwrap();
        let b = mu_bdr(&ds, &zero, &pi.fitted, arm).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn bdr_and_aipw_agree_when_weights_average_to_one() {
    // pi equal to the treated share makes P_n[I(T=t) / pi_t] exactly one
    let ds = data(300, 4);
    let share = ds.arm_count(1) as f64 / ds.n() as f64;
    let pi = vec![share; ds.n()];
    let m: Vec<f64> = ds.x().column(0).iter().map(|v| 0.1 * v).collect();
    for arm in 0..2 {
        let a = mu_bdr(&ds, &m, &pi, arm).unwrap();
        let b = mu_aipw(&ds, &m, &pi, arm).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-10);
    }
}

#[test]
fn swapping_arms_negates_the_effect() {
    let ds = data(500, 5);
    let specs = ModelSpecs {
        propensity: BasisSpec::linear(Source::X, 4),
        outcome: BasisSpec::linear(Source::X, 4),
        link: Link::Identity,
    };
    let opts = EstimateOptions::default();
    for method in [Method::Reg, Method::Wls, Method::Nr] {
        let a = fit_bdr(&ds, method, &specs, &opts).unwrap().tau;
        let b = fit_bdr(&ds.with_swapped_arms(), method, &specs, &opts).unwrap().tau;
        assert_abs_diff_eq!(a, -b, epsilon = 1e-8);
    }
}

#[test]
fn semipar_solves_its_estimating_equations() {
    let ds = data(800, 6);
    let v = BasisSpec::parse("1 + z1").unwrap();
    let vd = BasisSpec::linear(Source::Z, 4);
    for c in [CTag::Identity, CTag::InverseOmega] {
        let fit = fit_semipar(&ds, &v, &vd, &vd, c, &IwlsConfig::default()).unwrap();
        let (s1, s2) = fit.equation_residuals(&ds);
        assert!(s1 < 1e-10 && s2 < 1e-10, "{c:?}: {s1:e} {s2:e}");
    }
}

#[test]
fn correct_models_recover_effect_modification() {
    let ds = data(20_000, 7);
    let v = BasisSpec::parse("1 + z1 + z3").unwrap();
    let fit = fit_semipar(&ds, &v, &BasisSpec::linear(Source::Z, 4), &BasisSpec::linear(Source::Z, 4), CTag::Identity, &IwlsConfig::default())
        .unwrap();
    let truth = [2.0, 1.0, -0.5];
    for (b, t) in fit.beta.iter().zip(truth) {
        assert!((b - t).abs() < 0.1, "beta {b} vs {t}");
    }
}

#[test]
fn simplified_influence_matches_when_models_hold() {
    let ds = data(20_000, 8);
    let v = BasisSpec::parse("1 + z1").unwrap();
    let z = BasisSpec::linear(Source::Z, 4);
    let fit = fit_semipar(&ds, &v, &z, &z, CTag::Identity, &IwlsConfig::default()).unwrap();
    let pieces = sandwich(&ds, &fit).unwrap();
    let simple = pieces.psi_simplified(&fit).unwrap();
    let n = ds.n() as f64;
    for j in 0..2 {
        let full: f64 = pieces.psi.column(j).iter().map(|x| x * x).sum::<f64>() / n;
        let short: f64 = simple.column(j).iter().map(|x| x * x).sum::<f64>() / n;
        assert!((full - short).abs() / full < 0.1, "column {j}: {full} vs {short}");
    }
}
