use drkit::simulate::{gen_dataset, map_replications, run_replications, true_propensity, DgpConfig, GammaFn};
use drkit::estimators::EstimateOptions;
use drkit::suite::{EstimatorTag, SuiteSpecs};
use drkit::basis::{BasisSpec, Source};

#[test]
fn outcome_mean_matches_baseline() {
    // E[Y] = 210 + 0.5 * tau under the null with P(T=1) = 1/2
    let ds = gen_dataset(&DgpConfig::new(50_000, 4)).unwrap();
    let y = ds.y();
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!((m - 210.0).abs() < 4.0 * sd / (y.len() as f64).sqrt(), "mean {m}");
}

#[test]
fn linear_effect_shifts_treated_arm() {
    // same seed, same noise draws: outcomes differ by gamma on treated units
    let cfg = DgpConfig { gamma: GammaFn::Linear([3.0, 0.0, 0.0, 0.0, 0.0]), ..DgpConfig::new(2000, 9) };
    let null = DgpConfig { gamma: GammaFn::Null, ..cfg.clone() };
    let a = gen_dataset(&cfg).unwrap();
    let b = gen_dataset(&null).unwrap();
    for i in 0..a.n() {
        assert_eq!(a.t()[i], b.t()[i]);
        let shift = a.y()[i] - b.y()[i];
        assert!((shift - 3.0 * a.t()[i] as f64).abs() < 1e-9);
    }
    assert_eq!(cfg.gamma.tau_pop(), 3.0);
}

#[test]
fn propensity_is_symmetric_in_z() {
    let z = [0.3, -1.2, 0.7, 2.0];
    let neg = z.map(|v| -v);
    assert!((true_propensity(&z) + true_propensity(&neg) - 1.0).abs() < 1e-15);
}

#[test]
fn replications_are_order_independent() {
    let cfg = DgpConfig::new(100, 12);
    let a = map_replications(&cfg, 16, |r, ds| (r, ds.y()[0])).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| map_replications(&cfg, 16, |r, ds| (r, ds.y()[0])).unwrap());
    assert_eq!(a, b);
}

#[test]
fn summary_counts_and_csv() {
    let specs = SuiteSpecs::new(BasisSpec::linear(Source::Z, 4), BasisSpec::linear(Source::Z, 4));
    let tags = [EstimatorTag::Ipw, EstimatorTag::Semipar];
    let s = run_replications(&DgpConfig::new(300, 2), 8, &tags, &specs, &EstimateOptions::default()).unwrap();
    assert_eq!(s.rows.len(), 2);
    for r in &s.rows {
        assert_eq!(r.replications, 8);
        assert_eq!(r.successes + r.failures, 8);
        assert!((r.mse - (r.bias * r.bias + r.variance)).abs() < 1e-9 * r.mse.max(1.0));
    }
    assert_eq!(s.to_csv_string().lines().count(), 3);
}
