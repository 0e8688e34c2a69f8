use sdreplica::linear_exact::{
    e0_e1_large_lambda, growth_factor, infinite_stage_error, large_lambda_trajectory, q_ratio_fixed_point,
};
use sdreplica::replica::{solve, SolverSettings};
use sdreplica::{gauss_tail, Error, HyperSchedule, LossFamily, ProblemConfig};

fn linear(alpha: f64, delta: f64, theta: f64) -> ProblemConfig {
    ProblemConfig::new(alpha, delta, 0.5, theta, LossFamily::Linear).unwrap()
}

#[test]
fn pure_noise_labels_give_chance_error() {
    for (a, d) in [(1.0, 1.0), (5.0, 0.3), (0.2, 2.0)] {
        let (e0, e1) = e0_e1_large_lambda(&linear(a, d, 0.5)).unwrap();
        assert_eq!(e0, 0.5);
        assert_eq!(e1, 0.5);
    }
}

#[test]
fn first_two_stages_match_the_replica_solver() {
    let cfg = linear(1.0, 1.0, 0.0);
    let (e0, e1) = e0_e1_large_lambda(&cfg).unwrap();
    assert!((e0 - 0.23975).abs() < 1e-5);
    assert!((e0 - gauss_tail(std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);

    let hyper = HyperSchedule::unit_betas(vec![1e6, 1e6]);
    let rep = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
    assert!((rep.stages[0].gen_error - e0).abs() < 1e-3);
    assert!((rep.stages[1].gen_error - e1).abs() < 1e-3, "{} vs {e1}", rep.stages[1].gen_error);
    assert!(e1 <= 0.5);
}

#[test]
fn infinite_stage_examples() {
    assert_eq!(infinite_stage_error(&linear(1.0, 2.0, 0.3)).unwrap(), 0.5);
    assert_eq!(infinite_stage_error(&linear(4.0, 2.0, 0.1)).unwrap(), 0.5);
    let e = infinite_stage_error(&linear(2.0, 1.0, 0.0)).unwrap();
    assert!((e - gauss_tail((1.0f64 / 3.0).sqrt())).abs() < 1e-15);
    assert!((e - 0.28185).abs() < 1e-5);
}

#[test]
fn infinite_stage_error_is_monotone_in_the_learning_phase() {
    let mut prev_d = 0.0;
    for i in 0..50 {
        let d = 0.05 + 0.03 * i as f64;
        let e = infinite_stage_error(&linear(4.0, d, 0.2)).unwrap();
        assert!(e >= prev_d);
        prev_d = e;
    }
    let mut prev_a = 0.5;
    for i in 0..50 {
        let a = 1.0 + 0.2 * i as f64;
        let e = infinite_stage_error(&linear(a, 1.0, 0.2)).unwrap();
        assert!(e <= prev_a);
        prev_a = e;
    }
}

#[test]
fn unbalanced_or_logistic_inputs_are_unsupported() {
    let unbalanced = ProblemConfig::new(2.0, 1.0, 0.4, 0.1, LossFamily::Linear).unwrap();
    let logistic = ProblemConfig::new(2.0, 1.0, 0.5, 0.1, LossFamily::Logistic).unwrap();
    for cfg in [unbalanced, logistic] {
        assert!(matches!(e0_e1_large_lambda(&cfg), Err(Error::Unsupported(_))));
        assert!(matches!(infinite_stage_error(&cfg), Err(Error::Unsupported(_))));
        assert!(matches!(large_lambda_trajectory(&cfg, 5), Err(Error::Unsupported(_))));
    }
    assert!(large_lambda_trajectory(&linear(2.0, 1.0, 0.1), 0).is_err());
}

#[test]
fn trajectory_invariants_hold_exactly() {
    let cfg = linear(2.0, 0.7, 0.25);
    let r = large_lambda_trajectory(&cfg, 12).unwrap();
    let k = cfg.delta * cfg.alpha / 2.0;
    assert_eq!(r.horizon(), 12);
    for t in 0..=12 {
        assert!((r.qhat[(t, t)] - k).abs() < 1e-12 * k);
    }
    assert!((r.m[0] / r.m[0].abs() - 1.0).abs() < 1e-15);
    assert!((r.gen_error[0] - e0_e1_large_lambda(&cfg).unwrap().0).abs() < 1e-12);
    assert!((r.gen_error[1] - e0_e1_large_lambda(&cfg).unwrap().1).abs() < 1e-9);
    for (t, st) in r.stages().iter().enumerate() {
        assert_eq!(st.b, 0.0);
        assert!((st.gen_error - r.gen_error[t]).abs() < 1e-15);
    }
}

#[test]
fn learning_phase_converges_to_the_fixed_point() {
    let cfg = linear(2.0, 1.0, 0.3);
    let r = large_lambda_trajectory(&cfg, 50).unwrap();
    let target = infinite_stage_error(&cfg).unwrap();
    assert!((r.gen_error[50] - target).abs() < 1e-2, "{} vs {target}", r.gen_error[50]);
}

#[test]
fn growth_rate_approaches_the_outlier_eigenvalue() {
    for (a, d) in [(2.0, 1.0), (3.0, 0.5), (6.0, 0.8)] {
        let cfg = linear(a, d, 0.1);
        let r = large_lambda_trajectory(&cfg, 600).unwrap();
        let g = r.growth_rate(600);
        let want = growth_factor(&cfg);
        assert!((g - want).abs() < 1e-6 * want, "({a}, {d}): {g} vs {want}");
    }
}

#[test]
fn q_ratio_reaches_its_fixed_point_well_inside_the_learning_phase() {
    for (d, factor) in [(1.0, 1.5), (0.5, 2.0), (0.8, 4.0)] {
        let a = factor * d * d;
        let cfg = linear(a, d, 0.2);
        let fixed = q_ratio_fixed_point(&cfg).unwrap();
        let r = large_lambda_trajectory(&cfg, 600).unwrap();
        let q = r.q_ratio(600);
        assert!((q - fixed).abs() < 1e-4 * fixed, "({a}, {d}): {q} vs {fixed}");
    }
    assert!(q_ratio_fixed_point(&linear(0.5, 1.0, 0.2)).is_none());
}

#[test]
fn long_horizons_stay_finite() {
    let r = large_lambda_trajectory(&linear(8.0, 1.5, 0.1), 1000).unwrap();
    assert!(r.gen_error.iter().all(|e| e.is_finite() && (0.0..=0.5).contains(e)));
    assert!(r.log_scale.iter().all(|s| s.is_finite()));
}
