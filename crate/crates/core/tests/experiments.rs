use meta_risk_lab::experiments::{self, ExperimentPlan, RunOptions};
use serde_json::json;

fn options() -> RunOptions<'static> {
    RunOptions {
        base_dir: std::env::temp_dir(),
        log: None,
    }
}

fn sandwich_plan(battery: serde_json::Value, allow_unstable: bool) -> ExperimentPlan {
    ExperimentPlan::from_value(json!({
        "schema": 1,
        "kind": "bound_sandwich",
        "seed": 3,
        "replications": 10,
        "allow_unstable": allow_unstable,
        "checkpoints": { "explicit": [] },
        "sweep": { "battery": battery }
    }))
    .unwrap()
}

#[test]
fn sandwich_at_the_optimum_has_no_bias_term() {
    let plan = sandwich_plan(
        json!({ "configs": 6, "d_max": 20, "t_values": [40], "omega0_at_theta_star": true }),
        false,
    );
    let report = experiments::run_plan(&plan, &options()).unwrap();
    assert_eq!(report.sandwich.len(), 6);
    for row in &report.sandwich {
        assert_eq!(row.passed, Some(true), "{row:?}");
    }
    for b in report.bounds.iter().filter_map(|r| r.breakdown.as_ref()) {
        assert_eq!(b.bias, 0.0);
        assert_eq!(b.lower_bias, Some(0.0));
        assert_eq!(b.remainder, 0.0);
    }
}

#[test]
fn unstable_battery_still_simulates_but_reports_bound_errors() {
    let battery = json!({ "configs": 4, "d_max": 10, "t_values": [30], "alpha_fraction": 1.2 });
    let err =
        experiments::run_plan(&sandwich_plan(battery.clone(), false), &options()).unwrap_err();
    assert!(err.is_config_error(), "{err}");

    let report = experiments::run_plan(&sandwich_plan(battery, true), &options()).unwrap();
    assert_eq!(report.sandwich.len(), 4);
    for row in &report.sandwich {
        assert!(row.mean_risk.is_finite());
        assert_eq!(row.passed, None);
        assert!(row.upper.is_none() && row.lower.is_none());
        assert!(row
            .error
            .as_deref()
            .unwrap()
            .contains("α < 1/(c(βtr,Σ)·tr(Σ))"));
    }
}

#[test]
fn common_random_numbers_across_series() {
    let plan = ExperimentPlan::from_value(json!({
        "schema": 1,
        "kind": "lr_tradeoff",
        "seed": 5,
        "replications": 3,
        "base": {
            "d": 6, "T": 40,
            "alpha": { "threshold_fraction": 0.5 },
            "data_spectrum": { "poly": { "q": 2.0 } },
            "task_spectrum": { "isotropic": { "eta_sq": 0.1 } }
        },
        "sweep": { "beta_tr": [0.0, 0.0] }
    }))
    .unwrap();
    let report = experiments::run_plan(&plan, &options()).unwrap();
    let (a, b) = (&report.series[0], &report.series[1]);
    assert_eq!(a.per_rep_risk, b.per_rep_risk);
    assert_ne!(a.per_rep_risk[0], a.per_rep_risk[1]);
}

#[test]
fn plan_errors_surface_before_simulation() {
    let bad = json!({
        "schema": 1,
        "kind": "rate_check",
        "base": {
            "d": 6, "T": 40,
            "alpha": 0.01,
            "data_spectrum": "exp",
            "task_spectrum": "zero"
        },
        "sweep": {}
    });
    let err = ExperimentPlan::from_value(bad).unwrap_err();
    assert!(err.to_string().contains("t_grid"), "{err}");
}
