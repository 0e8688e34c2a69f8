//! One-dimensional rules for expectations over a standard normal coordinate.

use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};

use crate::model::gauss_density;

/// Beyond this many standard deviations the normal density is below 1e-17.
pub(crate) const GAUSS_CUTOFF: f64 = 9.0;

/// Nodes and weights of a rule for `E[f(g)]`, `g ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub(crate) struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn hermite(n: usize) -> Self {
        let rule = GaussHermite::new(NonZeroUsize::new(n.max(1)).unwrap());
        let scale = std::f64::consts::PI.sqrt().recip();
        let (nodes, weights) = rule
            .iter()
            .map(|&(x, w)| (std::f64::consts::SQRT_2 * x, w * scale))
            .unzip();
        NormalRule { nodes, weights }
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

/// Gauss–Legendre reference rule used to integrate the normal density on
/// either side of a discontinuity.
#[derive(Debug, Clone)]
pub(crate) struct SplitRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl SplitRule {
    pub fn new(n: usize) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
        let (nodes, weights) = rule.iter().map(|&(x, w)| (x, w)).unzip();
        SplitRule { nodes, weights }
    }

    /// Rule for `E[f(g)]` when `f` jumps at `cut`. Falls back to `plain`
    /// when the jump sits in the negligible tails.
    pub fn around(&self, cut: f64, plain: &NormalRule, out: &mut NormalRule) {
        out.nodes.clear();
        out.weights.clear();
        if !(cut.abs() < GAUSS_CUTOFF) {
            out.nodes.extend_from_slice(&plain.nodes);
            out.weights.extend_from_slice(&plain.weights);
            return;
        }
        for (a, b) in [(-GAUSS_CUTOFF, cut), (cut, GAUSS_CUTOFF)] {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&x, &w) in self.nodes.iter().zip(&self.weights) {
                let g = mid + half * x;
                out.nodes.push(g);
                out.weights.push(half * w * gauss_density(g));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let r = NormalRule::hermite(20);
        let m = |k: i32| -> f64 { r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k)).sum() };
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
    }

    #[test]
    fn split_rule_integrates_step() {
        let plain = NormalRule::hermite(10);
        let split = SplitRule::new(30);
        let mut r = NormalRule { nodes: vec![], weights: vec![] };
        for cut in [-2.0, -0.3, 0.0, 1.7] {
            split.around(cut, &plain, &mut r);
            let above: f64 = r
                .nodes
                .iter()
                .zip(&r.weights)
                .filter(|(x, _)| **x > cut)
                .map(|(_, w)| w)
                .sum();
            assert!((above - crate::model::gauss_tail(cut)).abs() < 1e-12, "cut {cut}");
            let total: f64 = r.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
