//! End-to-end checks of the public API: a consumer crate wiring models,
//! simulation, exponent ledgers, residual reports, and experiments together
//! without access to any crate internals.

use pathindep::characterize::{evaluate_on_domain, EvaluationDomain, ResidualOp};
use pathindep::girsanov::exponent_continuous;
use pathindep::model::{builtin, BuiltinParams};
use pathindep::simulate::{simulate_diffusion, TimeGrid};
use pathindep::verify::{
    convergence_study, identity_experiment, martingale_experiment, ExperimentConfig,
};

fn defaults() -> BuiltinParams {
    BuiltinParams::default()
}

#[test]
fn heat_kernel_identity_holds_for_a_hand_assembled_path() {
    let model = builtin("heat_kernel", &defaults()).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let x0 = model.default_x0().to_vec();
    let path = simulate_diffusion(&model, &x0, &grid, 7, 0).unwrap();
    let ledger = exponent_continuous(&path, &model).unwrap();

    let v = model.reference_field().unwrap();
    let rhs = v.value(grid.t_final, path.state(grid.steps)).unwrap() - v.value(0.0, &x0).unwrap();
    assert!(
        (ledger.y_final() - rhs).abs() <= 1e-12,
        "identity error {} for a linear field",
        (ledger.y_final() - rhs).abs()
    );
    // Z is the exponential of -Y at every node, by construction.
    assert!((ledger.z_final() - (-ledger.y_final()).exp()).abs() <= 1e-15);
}

#[test]
fn pure_jump_identity_is_exact_at_an_odd_step_count() {
    let model = builtin("pure_jump", &defaults()).unwrap();
    let grid = TimeGrid::new(2.0, 13).unwrap();
    let cfg = ExperimentConfig::new(model, grid, 200, 3).unwrap();
    let res = identity_experiment(&cfg).unwrap();
    let stats = res.stats.expect("stats");
    assert_eq!(res.excluded, 0);
    assert!(stats.max <= 1e-10, "max error {}", stats.max);
}

#[test]
fn degenerate_exp_identity_error_shrinks_under_nested_refinement() {
    let model = builtin("degenerate_exp", &defaults()).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let cfg = ExperimentConfig::new(model, grid, 64, 11).unwrap();
    let study = convergence_study(&cfg, &[64, 256]).unwrap();
    let coarse = study.rows[0].median_error;
    let fine = study.rows[1].median_error;
    assert!(
        fine < coarse,
        "median did not shrink: {} at 64 steps, {} at 256",
        coarse,
        fine
    );
}

#[test]
fn jump_density_has_unit_mean_within_monte_carlo_error() {
    let model = builtin("manufactured_jump", &defaults()).unwrap();
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let cfg = ExperimentConfig::new(model, grid, 2000, 5).unwrap();
    let res = martingale_experiment(&cfg).unwrap();
    let m = res.martingale.expect("estimate");
    assert!(
        (m.mean_z - 1.0).abs() <= 3.0 * m.stderr,
        "mean Z_T = {} with stderr {}",
        m.mean_z,
        m.stderr
    );
}

#[test]
fn residual_reports_split_consistent_from_obstructed_models() {
    let times = [0.25, 0.5, 1.0];
    let points: Vec<(f64, Vec<f64>)> = times
        .iter()
        .flat_map(|&t| {
            [[0.1, 0.2], [-0.3, 0.4], [0.5, -0.5]]
                .iter()
                .map(move |x| (t, x.to_vec()))
                .collect::<Vec<_>>()
        })
        .collect();
    let domain = EvaluationDomain::new(points).unwrap();

    let consistent = builtin("heat_kernel", &defaults()).unwrap();
    let v = consistent.reference_field().unwrap().clone();
    let report = evaluate_on_domain(&ResidualOp::Hjb, &v, &consistent, &domain, 1e-10).unwrap();
    assert!(report.pass, "heat kernel reference field must satisfy its own system");

    // Borrow a smooth field for the model whose kernel admits no potential.
    let obstructed = builtin("gruschin", &defaults()).unwrap();
    let donor = builtin("two_exponential", &defaults()).unwrap();
    let borrowed = donor.reference_field().unwrap().clone();
    let report =
        evaluate_on_domain(&ResidualOp::Gamma, &borrowed, &obstructed, &domain, 1e-10).unwrap();
    assert!(!report.pass, "the gradient condition cannot hold for the obstructed kernel");
}

#[test]
fn experiments_are_bitwise_reproducible() {
    let run = || {
        let model = builtin("two_exponential", &defaults()).unwrap();
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let cfg = ExperimentConfig::new(model, grid, 50, 9).unwrap();
        let res = identity_experiment(&cfg).unwrap();
        let mut csv = Vec::new();
        res.write_paths_csv(&mut csv).unwrap();
        (res.stats.expect("stats"), csv)
    };
    let (a_stats, a_csv) = run();
    let (b_stats, b_csv) = run();
    assert_eq!(a_stats.max.to_bits(), b_stats.max.to_bits());
    assert_eq!(a_stats.median.to_bits(), b_stats.median.to_bits());
    assert_eq!(a_csv, b_csv, "per-path CSV must be byte-identical across runs");
}
