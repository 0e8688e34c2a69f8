//! Interface between the fixed-point solver and the expectation engines.

use nalgebra::DMatrix;

use crate::error::Result;

/// How the stage bias is determined during an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BiasMode {
    Fixed(f64),
    /// Root of `E[z^t] = 0`, searched from `guess`.
    Solve { guess: f64 },
}

/// Current iterate of the stage-t parameters as seen by an engine.
#[derive(Debug, Clone)]
pub(crate) struct Trial {
    pub t: usize,
    /// Lower Cholesky factor of `ΔQ` on stages `0..=t`; `ξ = L g`.
    pub chol: DMatrix<f64>,
    /// `χ^{rt} / χ^{rr}` for `r < t`.
    pub coupling: Vec<f64>,
    pub chi_tt: f64,
    pub m: f64,
    pub bias: BiasMode,
}

/// Raw expectations feeding the conjugate update of stage t.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments {
    /// `E[∂z^t/∂ξ^s]` for `s = 0..=t`.
    pub dz: Vec<f64>,
    /// `E[(2 y_true − 1) z^t]`.
    pub signed_z: f64,
    /// `E[z^s z^t]` for `s = 0..=t`.
    pub zz: Vec<f64>,
    pub bias: f64,
    /// Standard errors of `dz`, `signed_z`, `zz`, for sampling engines.
    pub std_err: Option<(Vec<f64>, f64, Vec<f64>)>,
}

pub(crate) trait StageEngine: Send {
    /// Prepare the nodes or samples for stage `t`; stages `0..t` must be committed.
    fn begin_stage(&mut self, t: usize) -> Result<()>;

    /// Expectations at the trial point. With `Solve` bias mode the returned
    /// bias is the root of `E[z^t] = 0`.
    fn evaluate(&mut self, trial: &Trial, with_errors: bool) -> Result<Moments>;

    /// Freeze stage `t` at converged parameters (bias must be `Fixed`).
    fn commit(&mut self, trial: &Trial) -> Result<()>;

    /// Number of sample paths or quadrature nodes currently held.
    fn size(&self) -> usize;
}

/// Safeguarded Newton search for the root of a decreasing function.
///
/// `eval(b)` returns `(F(b), F'(b))`; the root is accepted once
/// `|F| <= tol`. Every evaluation made before both signs are seen counts as
/// a bracket expansion.
pub(crate) fn decreasing_root<E>(
    mut eval: E,
    guess: f64,
    tol: f64,
    max_expansions: usize,
) -> std::result::Result<f64, usize>
where
    E: FnMut(f64) -> (f64, f64),
{
    let mut b = guess;
    let (mut f, mut d) = eval(b);
    // `lo` has F > 0 (root above), `hi` has F < 0 (root below).
    let mut lo: Option<f64> = None;
    let mut hi: Option<f64> = None;
    let mut expansions = 0;
    let mut grow = f64::NAN;
    for _ in 0..400 {
        if !f.is_finite() {
            return Err(expansions);
        }
        if f.abs() <= tol {
            return Ok(b);
        }
        if f > 0.0 {
            lo = Some(b);
        } else {
            hi = Some(b);
        }
        let newton = if d < 0.0 && d.is_finite() { b - f / d } else { f64::NAN };
        let next = match (lo, hi) {
            (Some(l), Some(h)) => {
                if h - l <= 4.0 * f64::EPSILON * (1.0 + l.abs().max(h.abs())) {
                    return Ok(if f.abs() <= tol { b } else { 0.5 * (l + h) });
                }
                if newton > l && newton < h {
                    newton
                } else {
                    0.5 * (l + h)
                }
            }
            (Some(l), None) | (None, Some(l)) => {
                expansions += 1;
                if expansions > max_expansions {
                    return Err(expansions);
                }
                let dir = if f > 0.0 { 1.0 } else { -1.0 };
                let newton_ok = (newton - l) * dir > 0.0;
                if grow.is_nan() {
                    grow = if newton_ok { (newton - l).abs() } else { f.abs().max(1e-3) };
                } else {
                    grow *= 2.0;
                }
                if newton_ok && expansions < 4 {
                    newton
                } else {
                    l + dir * grow
                }
            }
            (None, None) => unreachable!(),
        };
        b = next;
        (f, d) = eval(b);
    }
    Err(expansions)
}
