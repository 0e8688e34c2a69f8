//! Stage losses as functions of the pre-activation `u = w·x/√N + B`, the
//! teacher label map, and the scalar proximal problem of the replica
//! equations.

use crate::error::{Error, Result};
use crate::model::{LossFamily, ProblemConfig};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss of a single sample with target `y` in [0, 1] at pre-activation `u`.
pub fn loss(family: LossFamily, u: f64, y: f64) -> f64 {
    match family {
        LossFamily::Logistic => softplus(u) - y * u,
        LossFamily::Linear => {
            let r = y - 0.5 * (u + 1.0);
            r * r
        }
    }
}

/// First derivative of the loss with respect to the pre-activation.
pub fn loss_grad(family: LossFamily, u: f64, y: f64) -> f64 {
    match family {
        LossFamily::Logistic => sigmoid(u) - y,
        LossFamily::Linear => 0.5 * (u + 1.0) - y,
    }
}

/// Second derivative of the loss with respect to the pre-activation.
pub fn loss_curv(family: LossFamily, u: f64) -> f64 {
    match family {
        LossFamily::Logistic => {
            let s = sigmoid(u);
            s * (1.0 - s)
        }
        LossFamily::Linear => 0.5,
    }
}

/// Teacher output used as the next stage's target, and its derivative in `u`.
///
/// Hard labels are the indicator of `u > 0`; the jump is not represented in
/// the returned derivative.
pub fn teacher_label(family: LossFamily, beta: f64, u: f64, hard: bool) -> (f64, f64) {
    if hard {
        return (if u > 0.0 { 1.0 } else { 0.0 }, 0.0);
    }
    match family {
        LossFamily::Logistic => {
            let s = sigmoid(beta * u);
            (s, beta * s * (1.0 - s))
        }
        LossFamily::Linear => (0.5 * (beta * u + 1.0), 0.5 * beta),
    }
}

const NEWTON_CAP: usize = 30;

/// Minimizer of `z²/(2c) + ℓ(y, σ(h + z))` with `c = Δχ`, together with the
/// loss curvature at the solution.
///
/// `guess` seeds the Newton iteration; pass 0 when nothing better is known.
pub(crate) fn prox(family: LossFamily, y: f64, h: f64, c: f64, guess: f64) -> Result<(f64, f64)> {
    match family {
        LossFamily::Linear => Ok((c / (2.0 + c) * (2.0 * y - h - 1.0), 0.5)),
        LossFamily::Logistic => prox_logistic(y, h, c, guess),
    }
}

fn prox_logistic(y: f64, h: f64, c: f64, guess: f64) -> Result<(f64, f64)> {
    // The optimality condition f(z) = z/c + σ(h+z) − y is increasing and,
    // because σ − y lies in (−1, 1), its root lies in (−c, c).
    let f = |z: f64| z / c + sigmoid(h + z) - y;
    let mut lo = -c;
    let mut hi = c;
    let mut expansions = 0;
    while f(lo) > 0.0 {
        lo *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Numerical(format!("proximal bracket failed below (y={y}, h={h}, c={c})")));
        }
    }
    while f(hi) < 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Numerical(format!("proximal bracket failed above (y={y}, h={h}, c={c})")));
        }
    }

    let mut z = guess.clamp(lo, hi);
    for _ in 0..NEWTON_CAP {
        let s = sigmoid(h + z);
        let fz = z / c + s - y;
        if fz == 0.0 {
            return Ok((z, s * (1.0 - s)));
        }
        if fz > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let d = 1.0 / c + s * (1.0 - s);
        let mut next = z - fz / d;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= 1e-15 * (1.0 + z.abs()) {
            let s = sigmoid(h + next);
            return Ok((next, s * (1.0 - s)));
        }
        z = next;
    }

    // Newton stalled; finish by bisection on the maintained bracket.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    let s = sigmoid(h + z);
    Ok((z, s * (1.0 - s)))
}

/// Scalar proximal step of the replica equations for target `y_prev`,
/// effective field `h` and response `chi_tt`.
pub fn proximal_z(y_prev: f64, h: f64, chi_tt: f64, cfg: &ProblemConfig) -> Result<f64> {
    if !(chi_tt > 0.0) {
        return Err(Error::domain(format!("response chi must be positive, got {chi_tt}")));
    }
    prox(cfg.loss_family, y_prev, h, cfg.delta * chi_tt, 0.0).map(|(z, _)| z)
}
