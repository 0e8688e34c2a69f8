//! Single sample paths of the effective chain, their derivative tables,
//! and the Gaussian law of a weight coordinate.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::state::OrderParameterState;
use crate::error::{Error, Result};
use crate::loss::{loss_curv, prox, teacher_label};
use crate::model::{HyperSchedule, ProblemConfig};

/// One realization of the effective single-coordinate chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    /// Correlated Gaussian fields with covariance `ΔQ`.
    pub xi: Vec<f64>,
    /// Effective pre-activations before the proximal step, bias included.
    pub h: Vec<f64>,
    pub zstar: Vec<f64>,
    /// Target of each stage: the observed label, then teacher outputs.
    pub y_chain: Vec<f64>,
    pub y_true: u8,
    /// `G[s][r] = dz^r/dh^s`.
    pub g: DMatrix<f64>,
    /// `Hd[s][r] = dh^r/dh^s`.
    pub hd: DMatrix<f64>,
}

impl SamplePath {
    pub fn stages(&self) -> usize {
        self.xi.len()
    }

    /// Pre-activation `h^t + z^t`.
    pub fn preactivation(&self, t: usize) -> f64 {
        self.h[t] + self.zstar[t]
    }
}

fn chi_diag(state: &OrderParameterState, r: usize) -> Result<f64> {
    let d = state.chi[(r, r)];
    if !(d > 0.0) {
        return Err(Error::Degenerate {
            stage: r,
            what: "chi^rr",
            value: d,
        });
    }
    Ok(d)
}

/// Run the chain forward on given fields `xi` (one per stage) and labels.
/// Fills the derivative tables as it goes.
pub fn forward_path(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    state: &OrderParameterState,
    xi: &[f64],
    y: u8,
    y_true: u8,
) -> Result<SamplePath> {
    let n = xi.len();
    if n == 0 || n > state.solved {
        return Err(Error::domain(format!(
            "path over {n} stages needs that many solved stages, have {}",
            state.solved
        )));
    }
    let mut path = SamplePath {
        xi: xi.to_vec(),
        h: vec![0.0; n],
        zstar: vec![0.0; n],
        y_chain: vec![0.0; n],
        y_true,
        g: DMatrix::zeros(n, n),
        hd: DMatrix::zeros(n, n),
    };
    let sy = 2.0 * y_true as f64 - 1.0;
    for t in 0..n {
        path.y_chain[t] = if t == 0 {
            y as f64
        } else {
            teacher_label(cfg.loss_family, hyper.beta(t), path.preactivation(t - 1), hyper.hard_labels).0
        };
        let mut h = xi[t] + sy * state.m[t] + state.b[t];
        for r in 0..t {
            h += state.chi[(r, t)] / chi_diag(state, r)? * path.zstar[r];
        }
        path.h[t] = h;
        let chi_tt = chi_diag(state, t)?;
        path.zstar[t] = prox(cfg.loss_family, path.y_chain[t], h, cfg.delta * chi_tt, 0.0)?.0;
        derivative_column(cfg, hyper, state, &mut path, t)?;
    }
    Ok(path)
}

/// Fill column t of the derivative tables from columns `0..t`.
///
/// `z^t` responds to a perturbation of `h^s` through its own field (with
/// coefficient `a^t`) and through its target, which is a function of `u^{t−1}`.
pub fn derivative_column(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    state: &OrderParameterState,
    path: &mut SamplePath,
    t: usize,
) -> Result<()> {
    let chi_tt = chi_diag(state, t)?;
    let c = cfg.delta * chi_tt;
    let l2 = loss_curv(cfg.loss_family, path.preactivation(t));
    let den = l2 + 1.0 / c;
    let a = -l2 / den;
    let bc = if t == 0 {
        0.0
    } else {
        teacher_label(cfg.loss_family, hyper.beta(t), path.preactivation(t - 1), hyper.hard_labels).1 / den
    };
    for s in 0..t {
        let mut hd = 0.0;
        for r in s..t {
            hd += state.chi[(r, t)] / chi_diag(state, r)? * path.g[(s, r)];
        }
        path.hd[(s, t)] = hd;
        path.g[(s, t)] = a * hd + bc * (path.hd[(s, t - 1)] + path.g[(s, t - 1)]);
    }
    path.hd[(t, t)] = 1.0;
    path.g[(t, t)] = a;
    Ok(())
}

/// Lower Cholesky factor of `ΔQ` on stages `0..=t` with relative diagonal jitter.
pub(crate) fn field_factor(state: &OrderParameterState, delta: f64, t: usize, jitter: f64) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::from_fn(t + 1, t + 1, |i, j| delta * state.q[(i, j)]);
    for i in 0..=t {
        c[(i, i)] *= 1.0 + jitter;
    }
    c.clone()
        .cholesky()
        .map(|ch| ch.l())
        .ok_or(Error::IllConditioned {
            stage: t,
            pivot: c.symmetric_eigenvalues().min(),
        })
}

/// Independent draws of the pre-activation `h^t + z^t` of the effective chain.
pub fn sample_preactivations(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    state: &OrderParameterState,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let l = field_factor(state, cfg.delta, t, 1e-12)?;
    let joint = cfg.label_joint();
    let cases = joint.cases();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![0.0; t + 1];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r: f64 = rng.random();
        let mut case = cases[3];
        for c in cases {
            if r < c.2 {
                case = c;
                break;
            }
            r -= c.2;
        }
        for v in g.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let xi: Vec<f64> = (0..=t).map(|i| (0..=i).map(|j| l[(i, j)] * g[j]).sum()).collect();
        let p = forward_path(cfg, hyper, state, &xi, case.0, case.1)?;
        out.push(p.preactivation(t));
    }
    Ok(out)
}

/// Joint Gaussian law of one weight coordinate across stages `0..=t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLaw {
    pub mean: Vec<f64>,
    #[serde(with = "super::state::rows")]
    pub cov: DMatrix<f64>,
}

impl WeightLaw {
    /// Mean and standard deviation of the stage-t coordinate.
    pub fn marginal(&self, t: usize) -> (f64, f64) {
        (self.mean[t], self.cov[(t, t)].max(0.0).sqrt())
    }

    pub fn second_moment(&self, t: usize) -> f64 {
        self.mean[t] * self.mean[t] + self.cov[(t, t)]
    }
}

/// Law of `ŵ^s` for `s = 0..=t`, from `(λ^s + Q̂^{ss}) ŵ^s = m̂^s + ξ̂^s − Σ_{r<s} Q̂^{rs} ŵ^r`
/// with `ξ̂ ~ N(0, χ̂)`.
pub fn weight_statistics(state: &OrderParameterState, hyper: &HyperSchedule, t: usize) -> Result<WeightLaw> {
    if t >= state.solved {
        return Err(Error::domain(format!("stage {t} has not been solved")));
    }
    let n = t + 1;
    let a = DMatrix::from_fn(n, n, |s, r| {
        if r == s {
            hyper.lambdas[s] + state.qhat[(s, s)]
        } else if r < s {
            state.qhat[(r, s)]
        } else {
            0.0
        }
    });
    let chihat = DMatrix::from_fn(n, n, |i, j| state.chihat[(i, j)]);
    let mut jittered = chihat.clone();
    for i in 0..n {
        jittered[(i, i)] += 1e-12 * chihat[(i, i)].abs() + f64::MIN_POSITIVE;
    }
    if jittered.clone().cholesky().is_none() {
        return Err(Error::IllConditioned {
            stage: t,
            pivot: jittered.symmetric_eigenvalues().min(),
        });
    }
    let inv = a
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular weight recursion".into()))?;
    let mhat = nalgebra::DVector::from_fn(n, |i, _| state.mhat[i]);
    let mean = &inv * mhat;
    let cov = &inv * chihat * inv.transpose();
    Ok(WeightLaw {
        mean: mean.iter().copied().collect(),
        cov,
    })
}
