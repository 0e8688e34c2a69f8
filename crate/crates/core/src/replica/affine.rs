//! Exact expectations for the linear family with soft labels.
//!
//! Every quantity of the effective chain is affine in the Gaussian fields
//! `ξ`, with an offset depending only on the label case, so all moments
//! follow from the field covariance `ΔQ` in closed form.

use super::engine::{BiasMode, Moments, StageEngine, Trial};
use crate::error::{Error, Result};
use crate::model::{HyperSchedule, LabelJoint, ProblemConfig};

/// An affine function `coef · ξ + off[case]`.
#[derive(Debug, Clone)]
struct Affine {
    coef: Vec<f64>,
    off: [f64; 4],
}

pub(crate) struct AffineEngine {
    delta: f64,
    joint: LabelJoint,
    betas: Vec<f64>,
    stride: usize,
    z: Vec<Affine>,
    u: Vec<Affine>,
    prepared: Option<usize>,
}

impl AffineEngine {
    pub fn new(cfg: &ProblemConfig, hyper: &HyperSchedule) -> Self {
        let stride = hyper.stages();
        let betas = (0..stride).map(|t| if t == 0 { 1.0 } else { hyper.beta(t) }).collect();
        AffineEngine {
            delta: cfg.delta,
            joint: cfg.label_joint(),
            betas,
            stride,
            z: Vec::new(),
            u: Vec::new(),
            prepared: None,
        }
    }

    /// Field `h^t` without bias, and the stage-t target, as affine maps.
    fn field_and_target(&self, trial: &Trial) -> (Affine, Affine) {
        let t = trial.t;
        let cases = self.joint.cases();
        let mut h = Affine { coef: vec![0.0; self.stride], off: [0.0; 4] };
        h.coef[t] = 1.0;
        for (k, &(_, yt, _)) in cases.iter().enumerate() {
            h.off[k] = trial.m * (2.0 * yt as f64 - 1.0);
        }
        for r in 0..t {
            let c = trial.coupling[r];
            for s in 0..=r {
                h.coef[s] += c * self.z[r].coef[s];
            }
            for k in 0..4 {
                h.off[k] += c * self.z[r].off[k];
            }
        }
        let target = if t == 0 {
            let mut y = Affine { coef: vec![0.0; self.stride], off: [0.0; 4] };
            for (k, &(yo, _, _)) in cases.iter().enumerate() {
                y.off[k] = yo as f64;
            }
            y
        } else {
            // Linear teacher output (β u + 1)/2.
            let beta = self.betas[t];
            let prev = &self.u[t - 1];
            Affine {
                coef: prev.coef.iter().map(|c| 0.5 * beta * c).collect(),
                off: prev.off.map(|o| 0.5 * (beta * o + 1.0)),
            }
        };
        (h, target)
    }

    /// `z^t = k (2y − h − b − 1)` with `k = Δχ/(2 + Δχ)`; returns `(z, b)`.
    fn proximal(&self, trial: &Trial) -> (Affine, f64) {
        let (h, y) = self.field_and_target(trial);
        let c = self.delta * trial.chi_tt;
        let k = c / (2.0 + c);
        let coef: Vec<f64> = (0..self.stride).map(|s| k * (2.0 * y.coef[s] - h.coef[s])).collect();
        let free: [f64; 4] = std::array::from_fn(|j| 2.0 * y.off[j] - h.off[j] - 1.0);
        let b = match trial.bias {
            BiasMode::Fixed(b) => b,
            BiasMode::Solve { .. } => {
                let cases = self.joint.cases();
                let total: f64 = cases.iter().map(|c| c.2).sum();
                cases.iter().zip(&free).map(|(c, f)| c.2 * f).sum::<f64>() / total
            }
        };
        let off = free.map(|f| k * (f - b));
        (Affine { coef, off }, b)
    }
}

impl StageEngine for AffineEngine {
    fn begin_stage(&mut self, t: usize) -> Result<()> {
        if t != self.z.len() {
            return Err(Error::domain(format!(
                "stage {t} requested but {} stages are committed",
                self.z.len()
            )));
        }
        self.prepared = Some(t);
        Ok(())
    }

    fn evaluate(&mut self, trial: &Trial, _with_errors: bool) -> Result<Moments> {
        let t = trial.t;
        if self.prepared != Some(t) {
            return Err(Error::domain(format!("stage {t} was not prepared")));
        }
        let (z, b) = self.proximal(trial);
        let cases = self.joint.cases();
        // Covariance of ξ on stages 0..=t from its Cholesky factor.
        let l = &trial.chol;
        let cov = |a: &[f64], c: &[f64]| -> f64 {
            let mut acc = 0.0;
            for r in 0..=t {
                // (Lᵀa)_r (Lᵀc)_r
                let mut la = 0.0;
                let mut lc = 0.0;
                for s in r..=t {
                    la += l[(s, r)] * a[s];
                    lc += l[(s, r)] * c[s];
                }
                acc += la * lc;
            }
            acc
        };
        let second = |a: &Affine, c: &Affine| -> f64 {
            cov(&a.coef, &c.coef) + cases.iter().enumerate().map(|(k, cs)| cs.2 * a.off[k] * c.off[k]).sum::<f64>()
        };
        let mut zz: Vec<f64> = self.z.iter().map(|zs| second(zs, &z)).collect();
        zz.push(second(&z, &z));
        let signed_z = cases
            .iter()
            .enumerate()
            .map(|(k, &(_, yt, p))| p * (2.0 * yt as f64 - 1.0) * z.off[k])
            .sum();
        let moments = Moments {
            dz: z.coef[..=t].to_vec(),
            signed_z,
            zz,
            bias: b,
            std_err: None,
        };
        Ok(moments)
    }

    fn commit(&mut self, trial: &Trial) -> Result<()> {
        let t = trial.t;
        let BiasMode::Fixed(b) = trial.bias else {
            return Err(Error::domain("commit needs a fixed bias"));
        };
        if self.prepared != Some(t) {
            return Err(Error::domain(format!("stage {t} was not prepared")));
        }
        let (h, _) = self.field_and_target(trial);
        let (z, _) = self.proximal(trial);
        let u = Affine {
            coef: h.coef.iter().zip(&z.coef).map(|(a, c)| a + c).collect(),
            off: std::array::from_fn(|k| h.off[k] + b + z.off[k]),
        };
        self.z.push(z);
        self.u.push(u);
        self.prepared = None;
        Ok(())
    }

    fn size(&self) -> usize {
        1
    }
}
