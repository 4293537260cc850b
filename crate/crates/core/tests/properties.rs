use drkit::estimators::{EstimateOptions, Method};
use drkit::model_select::{self, bootstrap_covariance, build_grid, SelectionGrid};
use drkit::simulate::{gen_dataset, DgpConfig};
use drkit::{BasisSpec, Link};
use proptest::prelude::*;

const TOKENS: [&str; 12] = ["x1", "x2", "x3", "x4", "z1", "z4", "x1^2", "x3^3", "z2^2", "x1*x2", "z1*x4", "x2*x4"];

fn spec_text() -> impl Strategy<Value = String> {
    prop::collection::vec(0..TOKENS.len(), 0..6).prop_map(|idx| {
        let mut s = String::from("1");
        for k in idx {
            s.push_str(" + ");
            s.push_str(TOKENS[k]);
        }
        s
    })
}

fn cells(ni: usize, nj: usize) -> impl Strategy<Value = Vec<Vec<Result<f64, String>>>> {
    let cell = prop_oneof![
        6 => (-50.0f64..50.0).prop_map(Ok),
        1 => Just(Err("singular system".to_string())),
    ];
    prop::collection::vec(prop::collection::vec(cell, nj), ni)
}

fn grid_strategy() -> impl Strategy<Value = SelectionGrid> {
    (2usize..6, 2usize..5).prop_flat_map(|(ni, nj)| {
        cells(ni, nj).prop_map(move |c| {
            let props = (1..=ni).map(|p| BasisSpec::parse(&format!("1 + x1^{p}")).unwrap()).collect();
            let outs = (1..=nj).map(|p| BasisSpec::parse(&format!("1 + x2^{p}")).unwrap()).collect();
            SelectionGrid::from_cells(props, outs, Method::Wls, Link::Identity, c)
        })
    })
}

proptest! {
    #[test]
    fn basis_display_parses_back(text in spec_text()) {
        let spec = BasisSpec::parse(&text).unwrap();
        prop_assert_eq!(spec.to_string(), text.clone());
        prop_assert_eq!(BasisSpec::parse(&spec.to_string()).unwrap(), spec);
    }

    #[test]
    fn grid_json_round_trip(grid in grid_strategy()) {
        let back = SelectionGrid::from_json(&grid.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn selected_cell_is_valid(grid in grid_strategy(), c in 0.0f64..5.0) {
        let scored = grid
            .valid_cells()
            .any(|(i, j, _)| grid.row_sd[i].is_some() && grid.col_sd[j].is_some());
        let rules = [
            (model_select::select_sd(&grid), scored),
            (model_select::select_range(&grid), scored),
            (model_select::select_joint(&grid, c), scored),
            (model_select::oracle(&grid, 0.0), grid.valid_cells().next().is_some()),
        ];
        for (r, selectable) in rules {
            match r {
                Ok(o) => prop_assert_eq!(grid.cell(o.row, o.col), Some(o.estimate)),
                Err(_) => prop_assert!(!selectable),
            }
        }
    }

    #[test]
    fn joint_at_zero_is_separate_sd(grid in grid_strategy()) {
        let a = model_select::select_joint(&grid, 0.0).map(|o| (o.row, o.col)).ok();
        let b = model_select::select_sd(&grid).map(|o| (o.row, o.col)).ok();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bootstrap_covariance_is_psd(seed in 0u64..10_000) {
        let ds = gen_dataset(&DgpConfig::new(300, seed)).unwrap();
        let props = model_select::default_propensity_specs()[..3].to_vec();
        let outs = model_select::default_outcome_specs()[..2].to_vec();
        let opts = EstimateOptions::default();
        let grid = build_grid(&ds, &props, &outs, Method::Wls, Link::Identity, &opts).unwrap();
        let b = bootstrap_covariance(&ds, &grid, 30, seed, &opts).unwrap();
        let scale = b.cov.iter().enumerate().map(|(k, r)| r[k]).fold(0.0f64, f64::max);
        prop_assert!(b.min_eigenvalue >= -1e-10 * scale.max(1.0));
        for (i, row) in b.cov.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                prop_assert!((v - b.cov[j][i]).abs() <= 1e-12 * scale.max(1.0));
            }
        }
    }
}
