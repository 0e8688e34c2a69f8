use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdreplica::{gauss_density, gauss_tail, generalization_error, label_joint, LossFamily, ProblemConfig};

/// Composite Simpson integral of the normal density over `[x, 12]`.
fn tail_by_quadrature(x: f64) -> f64 {
    let (a, b) = (x, 12.0);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut s = gauss_density(a) + gauss_density(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * gauss_density(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gauss_tail_matches_quadrature() {
    let mut x = -8.0;
    while x <= 8.0 {
        let q = tail_by_quadrature(x);
        assert!((gauss_tail(x) - q).abs() < 1e-10, "x = {x}: {} vs {q}", gauss_tail(x));
        x += 0.25;
    }
}

#[test]
fn gauss_tail_is_symmetric_and_decreasing() {
    let mut prev = 1.0;
    for i in -400..=400 {
        let x = i as f64 * 0.02;
        let h = gauss_tail(x);
        assert!(h < prev);
        assert!((h + gauss_tail(-x) - 1.0).abs() < 1e-15);
        prev = h;
    }
    assert!(gauss_tail(40.0) < 1e-300);
}

#[test]
fn label_joint_reproduces_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let rho = rng.random_range(1e-6..=0.5);
        let theta = rng.random_range(0.0..=0.5);
        let j = label_joint(rho, theta).unwrap();
        assert!((j.total() - 1.0).abs() < 1e-12);
        let true_pos = j.prob(0, 1) + j.prob(1, 1);
        let flipped = j.prob(1, 0) + j.prob(0, 1);
        assert!((true_pos - rho).abs() < 1e-12);
        assert!((flipped - theta).abs() < 1e-12);
    }
}

#[test]
fn generalization_error_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let cfg = ProblemConfig::new(
            rng.random_range(0.1..5.0),
            rng.random_range(0.1..2.0),
            rng.random_range(0.05..=0.5),
            rng.random_range(0.0..0.5),
            LossFamily::Logistic,
        )
        .unwrap();
        let (m, q, b) = (rng.random_range(-1.0..1.0), rng.random_range(0.01..3.0), rng.random_range(-1.0..1.0));
        let c: f64 = rng.random_range(0.01..100.0);
        let e1 = generalization_error(m, q, b, &cfg).unwrap();
        let e2 = generalization_error(c * m, c * c * q, c * b, &cfg).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&e1));
    }
}

#[test]
fn balanced_unbiased_error_is_a_single_tail() {
    let cfg = ProblemConfig::new(1.0, 0.7, 0.5, 0.1, LossFamily::Linear).unwrap();
    for (m, q) in [(0.3, 0.5), (1.2, 2.0), (-0.4, 0.1)] {
        let e = generalization_error(m, q, 0.0, &cfg).unwrap();
        assert_eq!(e, gauss_tail(m / (cfg.delta * q).sqrt()));
    }
}

#[test]
fn degenerate_norm_is_rejected() {
    let cfg = ProblemConfig::new(1.0, 1.0, 0.5, 0.0, LossFamily::Linear).unwrap();
    assert!(generalization_error(0.1, 0.0, 0.0, &cfg).is_err());
    assert!(generalization_error(0.1, -1.0, 0.0, &cfg).is_err());
}
