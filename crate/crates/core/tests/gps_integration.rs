use gps_core::env::SimParams;
use gps_core::gps::{mean_std, run_gps, GpsConfig, GpsRunner};
use gps_core::Error;

fn small() -> GpsConfig {
    let mut cfg = GpsConfig {
        trajectories: 3,
        horizon: 12,
        history: 2,
        inner_iters: 3,
        max_outer_iters: 2,
        convergence_threshold: 0.0,
        ..GpsConfig::default()
    };
    cfg.dynamics.gmm_components = 2;
    cfg.dynamics.em_max_iters = 10;
    cfg.policy.samples_per_step = 3;
    cfg.policy.fit.epochs = 10;
    cfg
}

#[test]
fn inner_loop_shape_and_monotone_passes() {
    let cfg = small();
    let mut runner = GpsRunner::new(cfg.clone(), SimParams::default()).unwrap();
    let out = runner.step().unwrap();
    let report = out.report;
    assert_eq!(report.inner.len(), cfg.inner_iters);
    for it in &report.inner {
        assert_eq!(it.passes.len(), cfg.trajectories);
        assert!(it.policy_mse.is_finite());
        for p in &it.passes {
            assert!(p.cost_after <= p.cost_before, "{p:?}");
            assert_eq!(p.improved, p.cost_after < p.cost_before);
        }
    }
    assert_eq!(out.models.len(), cfg.trajectories);
    assert_eq!(out.rollouts.len(), cfg.trajectories);
    for r in &out.rollouts {
        assert_eq!(r.trajectory.horizon(), cfg.horizon);
        assert_eq!(r.trace.len(), cfg.horizon + 1);
    }
}

#[test]
fn zero_threshold_runs_to_the_limit() {
    let cfg = small();
    let reports = run_gps(cfg.clone(), SimParams::default()).unwrap();
    assert_eq!(reports.len(), cfg.max_outer_iters);
    for (i, r) in reports.iter().enumerate() {
        assert_eq!(r.iteration, i + 1);
        assert_eq!(r.lambda, cfg.lambda_at(i + 1));
    }
}

#[test]
fn infinite_threshold_stops_after_one_iteration() {
    let cfg = GpsConfig {
        convergence_threshold: f64::INFINITY,
        max_outer_iters: 5,
        ..small()
    };
    let reports = run_gps(cfg, SimParams::default()).unwrap();
    assert_eq!(reports.len(), 1);
}

#[test]
fn datasets_grow_by_one_rollout_per_iteration() {
    let cfg = small();
    let mut runner = GpsRunner::new(cfg.clone(), SimParams::default()).unwrap();
    assert!(runner.state().datasets.iter().all(|d| d.len() == 1));
    for i in 1..=cfg.max_outer_iters {
        let out = runner.step().unwrap();
        for (d, r) in runner.state().datasets.iter().zip(&out.rollouts) {
            assert_eq!(d.len(), i + 1);
            assert_eq!(d.last().unwrap(), &r.trajectory);
        }
    }
    assert!(runner.finished());
}

#[test]
fn report_statistics_are_recomputable() {
    let reports = run_gps(small(), SimParams::default()).unwrap();
    for r in &reports {
        let n = r.errors.len() as f64;
        let mean = r.errors.iter().sum::<f64>() / n;
        let std = (r.errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
        assert!((r.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        assert!((r.stddev - std).abs() <= 1e-12 * (1.0 + std));
        assert_eq!(mean_std(&r.errors), (r.mean, r.stddev));
        let worst = r.errors.iter().map(|e| e.abs()).fold(0.0, f64::max);
        assert_eq!(r.max_abs_error(), worst);
    }
}

#[test]
fn same_seed_same_reports() {
    let a = run_gps(small(), SimParams::default()).unwrap();
    let b = run_gps(small(), SimParams::default()).unwrap();
    assert_eq!(a, b);
    let c = run_gps(GpsConfig { seed: 7, ..small() }, SimParams::default()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let cfg = small();
    let straight = run_gps(cfg.clone(), SimParams::default()).unwrap();
    let mut first = GpsRunner::new(cfg.clone(), SimParams::default()).unwrap();
    first.step().unwrap();
    let mut second = GpsRunner::resume(cfg, SimParams::default(), first.state().clone()).unwrap();
    second.step().unwrap();
    assert_eq!(second.state().reports, straight);
}

#[test]
fn invalid_configs_are_rejected_by_field() {
    let cases: Vec<(GpsConfig, &str)> = vec![
        (GpsConfig { horizon: 0, ..small() }, "gps.horizon"),
        (GpsConfig { trajectories: 0, ..small() }, "gps.trajectories"),
        (GpsConfig { history: 0, ..small() }, "gps.history"),
        (GpsConfig { inner_iters: 0, ..small() }, "gps.inner_iters"),
        (GpsConfig { fill_min: 50.0, ..small() }, "gps.fill_min"),
        (GpsConfig { lambda_growth: 0.5, ..small() }, "gps.lambda_init"),
    ];
    for (cfg, field) in cases {
        match GpsRunner::new(cfg, SimParams::default()) {
            Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
            Err(other) => panic!("{field}: unexpected error {other}"),
            Ok(_) => panic!("{field}: accepted"),
        }
    }
}

#[test]
fn resume_rejects_a_mismatched_state() {
    let cfg = small();
    let runner = GpsRunner::new(cfg.clone(), SimParams::default()).unwrap();
    let state = runner.state().clone();
    let more = GpsConfig { trajectories: 4, ..cfg.clone() };
    assert!(GpsRunner::resume(more, SimParams::default(), state.clone()).is_err());
    let longer = GpsConfig { history: 3, ..cfg };
    assert!(GpsRunner::resume(longer, SimParams::default(), state).is_err());
}
