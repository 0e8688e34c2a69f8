//! Closed-form results for the linear family with balanced classes and
//! very strong regularization.
//!
//! As `λ → ∞` the weights shrink like `1/λ` but the generalization error
//! only depends on the direction, so every stage can be rescaled to unit
//! size. What remains is an exactly solvable affine recurrence.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gauss_tail, LossFamily, ProblemConfig, StageSolution};

fn require_balanced_linear(cfg: &ProblemConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.loss_family != LossFamily::Linear {
        return Err(Error::Unsupported(
            "closed forms exist only for the linear family".into(),
        ));
    }
    if (cfg.rho - 0.5).abs() > 1e-12 {
        return Err(Error::Unsupported(format!(
            "closed forms need balanced classes (rho = 0.5), got rho = {}",
            cfg.rho
        )));
    }
    Ok(())
}

/// Errors of the teacher and the first student in the `λ⁰, λ¹ → ∞` limit.
pub fn e0_e1_large_lambda(cfg: &ProblemConfig) -> Result<(f64, f64)> {
    require_balanced_linear(cfg)?;
    let (a, d) = (cfg.alpha, cfg.delta);
    let s = 1.0 - 2.0 * cfg.theta;
    let e0 = gauss_tail(a.sqrt() * s / (d * (d + a * s * s)).sqrt());
    let num = a * (d + a + d * a) * s;
    let inner = (a * a + 3.0 * a + 1.0) * d.powi(3) * a
        + a * a * (d * d * (a * a + 5.0 * a + 3.0) + d * (2.0 * a + 3.0) * a + a * a) * s * s;
    let e1 = gauss_tail(num / (d * inner).sqrt());
    Ok((e0, e1))
}

/// Limit of the stage-t error as `t → ∞` with every `λ^t → ∞`.
///
/// Exactly 0.5 in the collapse phase `α < Δ²`.
pub fn infinite_stage_error(cfg: &ProblemConfig) -> Result<f64> {
    require_balanced_linear(cfg)?;
    let (a, d) = (cfg.alpha, cfg.delta);
    if a < d * d {
        return Ok(0.5);
    }
    Ok(gauss_tail(((a - d * d) / (d * (a + d))).sqrt()))
}

/// Asymptotic per-stage growth factor of `m^t` (in units where `χ^{tt} = 1`).
pub fn growth_factor(cfg: &ProblemConfig) -> f64 {
    0.5 * (1.0 + cfg.delta) * (cfg.alpha + cfg.delta)
}

/// Limit of `(1+Δ)² Q^{tt}/(m^t)²` in the learning phase, `None` when `α ≤ Δ²`.
pub fn q_ratio_fixed_point(cfg: &ProblemConfig) -> Option<f64> {
    let (a, d) = (cfg.alpha, cfg.delta);
    (a > d * d).then(|| (1.0 + d).powi(2) * (a + d) / (a - d * d))
}

/// Order parameters of the rescaled `λ → ∞` chain.
///
/// Every stage is renormalized so its output has unit second moment;
/// `log_scale[t]` records the factor removed, so the unnormalized overlap
/// is `m[t]·exp(log_scale[t])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeLambdaRecursion {
    pub config: ProblemConfig,
    pub m: Vec<f64>,
    pub mhat: Vec<f64>,
    #[serde(with = "crate::replica::matrix_rows", rename = "Q")]
    pub q: DMatrix<f64>,
    #[serde(with = "crate::replica::matrix_rows", rename = "R")]
    pub r: DMatrix<f64>,
    #[serde(with = "crate::replica::matrix_rows")]
    pub chi: DMatrix<f64>,
    #[serde(with = "crate::replica::matrix_rows")]
    pub chihat: DMatrix<f64>,
    #[serde(with = "crate::replica::matrix_rows")]
    pub qhat: DMatrix<f64>,
    pub log_scale: Vec<f64>,
    pub gen_error: Vec<f64>,
}

impl LargeLambdaRecursion {
    pub fn horizon(&self) -> usize {
        self.m.len() - 1
    }

    /// `m^t/m^{t−1}` in unnormalized units.
    pub fn growth_rate(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.horizon());
        (self.m[t] / self.m[t - 1]) * (self.log_scale[t] - self.log_scale[t - 1]).exp()
    }

    /// `(1+Δ)² Q^{tt}/(m^t)²`; scale free.
    pub fn q_ratio(&self, t: usize) -> f64 {
        (1.0 + self.config.delta).powi(2) * self.q[(t, t)] / (self.m[t] * self.m[t])
    }

    /// Per-stage solutions in unnormalized units. Bias is zero by symmetry.
    /// Entries overflow to infinity on very long horizons.
    pub fn stages(&self) -> Vec<StageSolution> {
        (0..self.m.len())
            .map(|t| {
                let s = self.log_scale[t].exp();
                StageSolution {
                    m: self.m[t] * s,
                    q: self.q[(t, t)] * s * s,
                    b: 0.0,
                    gen_error: self.gen_error[t],
                }
            })
            .collect()
    }
}

/// Iterate the rescaled `λ → ∞` recurrences for stages `0..=horizon`.
///
/// Each stage output is an affine function of the Gaussian fields `ξ^0..ξ^{t−1}`
/// (coefficients `c`) plus a label-dependent offset (`d`, one per label case).
pub fn large_lambda_trajectory(cfg: &ProblemConfig, horizon: usize) -> Result<LargeLambdaRecursion> {
    require_balanced_linear(cfg)?;
    if horizon < 1 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    let (a, d) = (cfg.alpha, cfg.delta);
    let cases = cfg.label_joint().cases();
    let p: [f64; 4] = std::array::from_fn(|i| cases[i].2);
    let sy: [f64; 4] = std::array::from_fn(|i| 2.0 * cases[i].1 as f64 - 1.0);
    let n = horizon + 1;
    let mut chi = DMatrix::zeros(n, n);
    let mut qhat = DMatrix::zeros(n, n);
    let mut chihat = DMatrix::zeros(n, n);
    let mut q = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, n);
    let mut m = vec![0.0; n];
    let mut mhat = vec![0.0; n];
    let mut log_scale = vec![0.0; n];
    let mut gen_error = vec![0.0; n];
    // z^t = c_t·ξ + d_t[case] and h^t = hc_t·ξ + hd_t[case].
    let mut zc: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut zd: Vec<[f64; 4]> = Vec::with_capacity(n);
    let mut hc: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut hd: Vec<[f64; 4]> = Vec::with_capacity(n);

    for t in 0..n {
        let mut c = vec![0.0; t];
        let mut dz = [0.0; 4];
        if t == 0 {
            for (k, case) in cases.iter().enumerate() {
                dz[k] = 0.5 * d * (2.0 * case.0 as f64 - 1.0);
            }
        } else {
            for (j, v) in c.iter_mut().enumerate() {
                *v = 0.5 * d * (hc[t - 1][j] + zc[t - 1].get(j).copied().unwrap_or(0.0));
            }
            for k in 0..4 {
                dz[k] = 0.5 * d * (hd[t - 1][k] + zd[t - 1][k]);
            }
            let mut var: f64 = (0..4).map(|k| p[k] * dz[k] * dz[k]).sum();
            for i in 0..t {
                for j in 0..t {
                    var += c[i] * d * q[(i, j)] * c[j];
                }
            }
            if !(var > 0.0 && var.is_finite()) {
                return Err(Error::Numerical(format!("stage {t} output has degenerate variance {var}")));
            }
            let g = var.sqrt().recip();
            c.iter_mut().for_each(|v| *v *= g);
            dz.iter_mut().for_each(|v| *v *= g);
            log_scale[t] = log_scale[t - 1] - g.ln();
        }

        qhat[(t, t)] = 0.5 * d * a;
        for s in 0..t {
            qhat[(s, t)] = -a * c[s];
        }
        chi[(t, t)] = 1.0;
        for s in 0..t {
            let mut acc = 0.0;
            for l in s..t {
                acc += qhat[(l, t)] * chi[(s, l)];
            }
            chi[(s, t)] = -acc;
        }
        mhat[t] = a / d * (0..4).map(|k| p[k] * sy[k] * dz[k]).sum::<f64>();
        m[t] = mhat[t] - (0..t).map(|s| qhat[(s, t)] * m[s]).sum::<f64>();

        // χ̂^{st} = (α/Δ)(c_s·ΔQ·c_t + E[d_s d_t]).
        let qc: Vec<f64> = (0..t).map(|i| (0..t).map(|j| d * q[(i, j)] * c[j]).sum()).collect();
        for s in 0..=t {
            let cs = if s < t { &zc[s] } else { &c };
            let quad: f64 = cs.iter().zip(&qc).map(|(x, y)| x * y).sum();
            let ds = if s < t { zd[s] } else { dz };
            let val = a / d * (quad + (0..4).map(|k| p[k] * ds[k] * dz[k]).sum::<f64>());
            chihat[(s, t)] = val;
            chihat[(t, s)] = val;
        }
        for l in 0..t {
            let acc: f64 = (0..l).map(|k| qhat[(k, l)] * r[(t, k)]).sum();
            r[(t, l)] = chihat[(t, l)] - acc;
        }
        for s in 0..=t {
            let acc: f64 = (0..t).map(|l| qhat[(l, t)] * r[(s, l)]).sum();
            r[(s, t)] = chihat[(s, t)] - acc;
        }
        for s in 0..=t {
            let acc: f64 = (0..s).map(|l| qhat[(l, s)] * q[(l, t)]).sum();
            let val = mhat[s] * m[t] + r[(s, t)] - acc;
            q[(s, t)] = val;
            q[(t, s)] = val;
        }

        let mut hct = vec![0.0; t + 1];
        hct[t] = 1.0;
        let mut hdt = [0.0; 4];
        for k in 0..4 {
            hdt[k] = sy[k] * m[t];
        }
        for rr in 0..t {
            let w = chi[(rr, t)];
            for (j, v) in zc[rr].iter().enumerate() {
                hct[j] += w * v;
            }
            for k in 0..4 {
                hdt[k] += w * zd[rr][k];
            }
        }
        zc.push(c);
        zd.push(dz);
        hc.push(hct);
        hd.push(hdt);

        let qtt = q[(t, t)];
        if !(qtt > 0.0 && qtt.is_finite() && m[t].is_finite()) {
            return Err(Error::Numerical(format!("stage {t} produced Q = {qtt}, m = {}", m[t])));
        }
        gen_error[t] = gauss_tail(m[t] / (d * qtt).sqrt());
    }

    Ok(LargeLambdaRecursion {
        config: *cfg,
        m,
        mhat,
        q,
        r,
        chi,
        chihat,
        qhat,
        log_scale,
        gen_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha: f64, delta: f64, theta: f64) -> ProblemConfig {
        ProblemConfig::new(alpha, delta, 0.5, theta, LossFamily::Linear).unwrap()
    }

    #[test]
    fn rejects_unbalanced_classes() {
        let c = ProblemConfig::new(1.0, 1.0, 0.4, 0.1, LossFamily::Linear).unwrap();
        assert!(matches!(e0_e1_large_lambda(&c), Err(Error::Unsupported(_))));
        assert!(matches!(large_lambda_trajectory(&c, 3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn stage_zero_matches_closed_form() {
        let c = cfg(2.0, 0.7, 0.15);
        let tr = large_lambda_trajectory(&c, 2).unwrap();
        let (e0, _) = e0_e1_large_lambda(&c).unwrap();
        assert!((tr.gen_error[0] - e0).abs() < 1e-14);
    }
}
