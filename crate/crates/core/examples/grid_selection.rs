//! Build the 6 x 4 sensitivity grid and apply the selection rules.
use drkit::estimators::{EstimateOptions, Method};
use drkit::model_select::{self as ms, build_grid};
use drkit::simulate::{gen_dataset, DgpConfig};
use drkit::Link;

fn main() -> drkit::Result<()> {
    let ds = gen_dataset(&DgpConfig::new(1000, 5))?;
    let opts = EstimateOptions::default();
    let mut grid = build_grid(&ds, &ms::default_propensity_specs(), &ms::default_outcome_specs(), Method::Wls, Link::Identity, &opts)?;
    grid.bootstrap = Some(ms::bootstrap_covariance(&ds, &grid, 100, 5, &opts)?);
    print!("{}", ms::sensitivity_text(&grid));
    let picks = [
        ms::select_sd(&grid),
        ms::select_range(&grid),
        ms::select_joint(&grid, 2.0),
        ms::select_wald(&grid),
        ms::select_cv(&ds, &grid, 5, 5, &opts),
        ms::oracle(&grid, 0.0),
    ];
    for p in picks {
        match p {
            Ok(o) => println!("{:<12} row {} col {}  tau = {:.4}", o.rule, o.row + 1, o.col + 1, o.estimate),
            Err(e) => println!("rule failed: {e}"),
        }
    }
    Ok(())
}
