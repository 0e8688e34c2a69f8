use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sdreplica::linear_exact::e0_e1_large_lambda;
use sdreplica::loss::proximal_z;
use sdreplica::replica::{
    forward_path, solve, solve_stage, weight_statistics, Expectation, OrderParameterState, SolveReport, Solver,
    SolverSettings,
};
use sdreplica::{gauss_tail, Error, HyperSchedule, LossFamily, ProblemConfig};

fn appendix_config(family: LossFamily) -> (ProblemConfig, HyperSchedule) {
    let cfg = ProblemConfig::new(3.0, 0.6, 0.4, 0.2, family).unwrap();
    let hyper = HyperSchedule::new(vec![1.5, 0.5, 2.0, 1.0], vec![0.8, 1.2, 1.0]);
    (cfg, hyper)
}

#[test]
fn residuals_are_below_tolerance() {
    for family in [LossFamily::Linear, LossFamily::Logistic] {
        let (cfg, hyper) = appendix_config(family);
        let settings = SolverSettings::default();
        let rep = solve(&cfg, &hyper, &settings).unwrap();
        assert_eq!(rep.stages.len(), 4);
        for t in 0..4 {
            assert!(rep.state.residual[t] <= settings.tol, "{family} stage {t}: {}", rep.state.residual[t]);
            assert!(rep.state.q[(t, t)] > 0.0 && rep.state.chi[(t, t)] > 0.0);
            assert!((0.0..=1.0).contains(&rep.stages[t].gen_error));
        }
        let q = &rep.state.q;
        assert!((q - q.transpose()).amax() < 1e-12);
        let ch = &rep.state.chihat;
        assert!((ch - ch.transpose()).amax() < 1e-12);
    }
}

#[test]
fn balanced_classes_give_zero_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in [LossFamily::Linear, LossFamily::Logistic] {
        for _ in 0..3 {
            let cfg = ProblemConfig::new(
                rng.random_range(0.5..4.0),
                rng.random_range(0.3..1.5),
                0.5,
                rng.random_range(0.0..0.4),
                family,
            )
            .unwrap();
            let hyper = HyperSchedule::new(
                vec![rng.random_range(0.1..3.0), rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)],
                vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
            );
            let rep = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
            for (t, s) in rep.stages.iter().enumerate() {
                assert!(s.b.abs() <= 1e-6, "{family} {cfg:?} stage {t}: b = {}", s.b);
            }
        }
    }
}

#[test]
fn huge_ridge_reproduces_closed_form_errors() {
    let settings = SolverSettings::default();
    for (alpha, theta) in [(1.0, 0.0), (2.0, 0.2), (6.0, 0.35)] {
        let cfg = ProblemConfig::new(alpha, 1.0, 0.5, theta, LossFamily::Linear).unwrap();
        let rep = solve(&cfg, &HyperSchedule::unit_betas(vec![1e6, 1e6]), &settings).unwrap();
        let (e0, e1) = e0_e1_large_lambda(&cfg).unwrap();
        assert!((rep.stages[0].gen_error - e0).abs() < 1e-3);
        assert!((rep.stages[1].gen_error - e1).abs() < 1e-3);
    }
    let cfg = ProblemConfig::new(1.0, 1.0, 0.5, 0.0, LossFamily::Linear).unwrap();
    let rep = solve(&cfg, &HyperSchedule::unit_betas(vec![1e6]), &settings).unwrap();
    assert!((rep.stages[0].gen_error - 0.23975).abs() < 1e-3);
    assert!((gauss_tail(std::f64::consts::FRAC_1_SQRT_2) - 0.23975).abs() < 1e-5);
}

#[test]
fn proximal_step_examples() {
    let lin = ProblemConfig::new(1.0, 1.0, 0.5, 0.0, LossFamily::Linear).unwrap();
    // Δχ = 2.
    assert_eq!(proximal_z(1.0, 1.0, 2.0, &lin).unwrap(), 0.0);
    let z = proximal_z(0.0, 0.3, 0.7, &lin).unwrap();
    assert!((z - 0.7 / 2.7 * (-1.0 - 0.3)).abs() < 1e-14);

    let log = ProblemConfig::new(1.0, 1.0, 0.5, 0.0, LossFamily::Logistic).unwrap();
    for chi in [0.1, 1.0, 30.0] {
        assert!(proximal_z(0.5, 0.0, chi, &log).unwrap().abs() < 1e-14);
    }
    // Bisection oracle for z + σ(z) − 1 = 0.
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + 1.0 / (1.0 + (-mid).exp()) - 1.0 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let z = proximal_z(1.0, 0.0, 1.0, &log).unwrap();
    assert!((z - lo).abs() < 1e-12, "z = {z}, oracle {lo}");
    assert!((z - 0.401058).abs() < 1e-6);
    assert!(proximal_z(1.0, 0.0, 0.0, &log).is_err());
}

/// Fields drawn with the solved covariance `ΔQ`.
fn draw_fields(rng: &mut ChaCha8Rng, state: &OrderParameterState, delta: f64, n: usize) -> Vec<f64> {
    let c = nalgebra::DMatrix::from_fn(n, n, |i, j| delta * state.q[(i, j)]);
    let l = c.cholesky().unwrap().l();
    let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n).map(|i| (0..=i).map(|j| l[(i, j)] * g[j]).sum()).collect()
}

#[test]
fn derivative_table_matches_finite_differences() {
    let cfg = ProblemConfig::new(2.0, 0.8, 0.4, 0.2, LossFamily::Logistic).unwrap();
    let hyper = HyperSchedule::new(vec![1.0, 0.6, 1.4], vec![1.3, 0.7]);
    let rep = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let eps = 1e-6;
    for k in 0..20 {
        let xi = draw_fields(&mut rng, &rep.state, cfg.delta, 3);
        let (y, yt) = ((k % 2) as u8, ((k / 2) % 2) as u8);
        let p = forward_path(&cfg, &hyper, &rep.state, &xi, y, yt).unwrap();
        for s in 0..3 {
            let mut up = xi.clone();
            up[s] += eps;
            let mut dn = xi.clone();
            dn[s] -= eps;
            let pu = forward_path(&cfg, &hyper, &rep.state, &up, y, yt).unwrap();
            let pd = forward_path(&cfg, &hyper, &rep.state, &dn, y, yt).unwrap();
            for r in s..3 {
                let fd = (pu.zstar[r] - pd.zstar[r]) / (2.0 * eps);
                let g = p.g[(s, r)];
                assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "G[{s},{r}] = {g}, fd = {fd}");
            }
            assert!(p.g[(s, s)] < 0.0);
        }
    }
}

#[test]
fn linear_paths_follow_the_closed_form() {
    let (cfg, hyper) = appendix_config(LossFamily::Linear);
    let rep = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..10 {
        let xi = draw_fields(&mut rng, &rep.state, cfg.delta, 4);
        let p = forward_path(&cfg, &hyper, &rep.state, &xi, (k % 2) as u8, 1).unwrap();
        for t in 0..4 {
            let dc = cfg.delta * rep.state.chi[(t, t)];
            let z = dc / (2.0 + dc) * (2.0 * p.y_chain[t] - p.h[t] - 1.0);
            assert!((p.zstar[t] - z).abs() < 1e-12);
            assert!((p.g[(t, t)] + dc / (2.0 + dc)).abs() < 1e-12);
        }
    }
}

#[test]
fn weight_law_is_consistent_with_order_parameters() {
    let (cfg, hyper) = appendix_config(LossFamily::Logistic);
    let rep = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
    let st = &rep.state;
    let law = weight_statistics(st, &hyper, 3).unwrap();
    let a0 = hyper.lambdas[0] + st.qhat[(0, 0)];
    assert!((law.mean[0] - st.mhat[0] / a0).abs() < 1e-12);
    assert!((law.cov[(0, 0)] - st.chihat[(0, 0)] / (a0 * a0)).abs() < 1e-12);
    for t in 0..4 {
        assert!((law.mean[t] - st.m[t]).abs() < 1e-6 * st.m[t].abs().max(1.0), "mean at {t}");
        let q = st.q[(t, t)];
        assert!((law.second_moment(t) - q).abs() < 1e-6 * q.max(1.0), "second moment at {t}");
    }
    assert!(weight_statistics(st, &hyper, 4).is_err());
}

#[test]
fn stagewise_solve_matches_full_solve() {
    let (cfg, hyper) = appendix_config(LossFamily::Logistic);
    let settings = SolverSettings::default();
    let full = solve(&cfg, &hyper, &settings).unwrap();
    let mut st = OrderParameterState::new(hyper.stages());
    for t in 0..hyper.stages() {
        st = solve_stage(&cfg, &hyper, &st, t, &settings).unwrap();
    }
    for t in 0..hyper.stages() {
        assert!((st.m[t] - full.state.m[t]).abs() < 1e-9);
        assert!((st.q[(t, t)] - full.state.q[(t, t)]).abs() < 1e-9);
        assert!((st.b[t] - full.state.b[t]).abs() < 1e-9);
    }
    // A stage cannot be solved before its predecessors.
    let empty = OrderParameterState::new(hyper.stages());
    assert!(matches!(solve_stage(&cfg, &hyper, &empty, 2, &settings), Err(Error::Domain(_))));
}

#[test]
fn solver_advances_one_stage_at_a_time() {
    let (cfg, hyper) = appendix_config(LossFamily::Linear);
    let mut s = Solver::new(&cfg, &hyper, &SolverSettings::default()).unwrap();
    assert_eq!(s.solved(), 0);
    let first = s.solve_next(None).unwrap();
    assert_eq!(s.solved(), 1);
    let full = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
    assert!((first.gen_error - full.stages[0].gen_error).abs() < 1e-12);
}

#[test]
fn halving_tolerance_moves_the_solution_less_than_the_old_tolerance() {
    let (cfg, hyper) = appendix_config(LossFamily::Logistic);
    let coarse = SolverSettings::default().with_tol(1e-6);
    let fine = coarse.with_tol(5e-7);
    let a = solve(&cfg, &hyper, &coarse).unwrap();
    let b = solve(&cfg, &hyper, &fine).unwrap();
    for t in 0..4 {
        let (x, y) = (a.stages[t], b.stages[t]);
        assert!((x.m - y.m).abs() <= 1e-6 && (x.q - y.q).abs() <= 1e-6 && (x.b - y.b).abs() <= 1e-6);
    }
}

#[test]
fn engines_agree_on_stage_zero_conjugates() {
    let cfg = ProblemConfig::new(3.0, 0.6, 0.4, 0.2, LossFamily::Logistic).unwrap();
    let hyper = HyperSchedule::new(vec![1.5], vec![]);
    let gh = solve(&cfg, &hyper, &SolverSettings::default().with_expectation(Expectation::GaussHermite { nodes: 61 }))
        .unwrap();
    let mut settings = SolverSettings::default().with_expectation(Expectation::MonteCarlo {
        samples: 200_000,
        seed: 9,
    });
    settings.max_paths = 1_000_000;
    let mc = solve(&cfg, &hyper, &settings).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    assert!(rel(mc.state.qhat[(0, 0)], gh.state.qhat[(0, 0)]) < 1e-2);
    assert!(rel(mc.state.mhat[0], gh.state.mhat[0]) < 1e-2);
    assert!(rel(mc.state.chihat[(0, 0)], gh.state.chihat[(0, 0)]) < 1e-2);

    let mut small = settings;
    small.max_paths = 1000;
    assert!(matches!(solve(&cfg, &hyper, &small), Err(Error::Resource(_))));
}

#[test]
fn hard_labels_are_the_large_temperature_limit() {
    let cfg = ProblemConfig::new(3.0, 1.0, 0.4, 0.3, LossFamily::Logistic).unwrap();
    let lambdas = vec![0.8, 0.3];
    let hard = solve(&cfg, &HyperSchedule::new(lambdas.clone(), vec![]).hard(), &SolverSettings::default()).unwrap();
    let soft = solve(&cfg, &HyperSchedule::new(lambdas, vec![1e4]), &SolverSettings::default()).unwrap();
    assert!((hard.stages[1].gen_error - soft.stages[1].gen_error).abs() < 1e-3);
}

#[test]
fn unsolvable_inputs_are_reported() {
    let (cfg, _) = appendix_config(LossFamily::Logistic);
    let missing_beta = HyperSchedule::new(vec![1.0, 1.0], vec![]);
    match solve(&cfg, &missing_beta, &SolverSettings::default()) {
        Err(Error::Domain(msg)) => assert!(msg.contains("stage 1"), "{msg}"),
        other => panic!("expected a domain error, got {other:?}"),
    }
    let negative = HyperSchedule::new(vec![-1.0], vec![]);
    assert!(matches!(solve(&cfg, &negative, &SolverSettings::default()), Err(Error::Domain(_))));
    let starved = SolverSettings {
        max_iters: 2,
        ..SolverSettings::default()
    };
    let hyper = HyperSchedule::new(vec![0.1, 0.1], vec![2.0]);
    assert!(matches!(
        solve(&cfg, &hyper, &starved),
        Err(Error::Convergence { .. }) | Err(Error::AtStage { .. })
    ));
}

#[test]
fn reports_round_trip_through_json() {
    let (cfg, hyper) = appendix_config(LossFamily::Logistic);
    let rep = solve(&cfg, &hyper, &SolverSettings::default()).unwrap();
    let text = rep.to_json().unwrap();
    assert!(text.contains("\"Q\""));
    let back = SolveReport::from_json(&text).unwrap();
    assert_eq!(back, rep);
}
