//! Problem definition shared by every solver: the data law, the
//! distillation schedule, the label joint distribution and the
//! generalization-error functional.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss/activation pair used at every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    /// Cross-entropy loss with the logistic sigmoid.
    Logistic,
    /// Squared loss with the affine activation `(x + 1) / 2`.
    Linear,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Logistic => "logistic",
            LossFamily::Linear => "linear",
        }
    }
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(LossFamily::Logistic),
            "linear" => Ok(LossFamily::Linear),
            other => Err(Error::domain(format!("unknown loss family `{other}`"))),
        }
    }
}

/// Data-generating law of the noisy two-cluster Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Sample-to-dimension ratio M/N.
    pub alpha: f64,
    /// Cluster variance.
    pub delta: f64,
    /// Prior probability of the positive class, in (0, 1/2].
    pub rho: f64,
    /// Label-flip probability, in [0, 1/2].
    pub theta: f64,
    pub loss_family: LossFamily,
}

impl ProblemConfig {
    pub fn new(alpha: f64, delta: f64, rho: f64, theta: f64, loss_family: LossFamily) -> Result<Self> {
        let cfg = ProblemConfig {
            alpha,
            delta,
            rho,
            theta,
            loss_family,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::domain(format!("delta must be positive, got {}", self.delta)));
        }
        check_rho_theta(self.rho, self.theta)
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn label_joint(&self) -> LabelJoint {
        LabelJoint::from_valid(self.rho, self.theta)
    }
}

fn check_rho_theta(rho: f64, theta: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 0.5) {
        return Err(Error::domain(format!("rho must lie in (0, 0.5], got {rho}")));
    }
    if !(0.0..=0.5).contains(&theta) {
        return Err(Error::domain(format!("theta must lie in [0, 0.5], got {theta}")));
    }
    Ok(())
}

/// Per-stage regularization and teacher temperatures.
///
/// Stage `t` is trained with `lambdas[t]`; for `t >= 1` its targets are the
/// previous stage's outputs at inverse temperature `betas[t - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSchedule {
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub betas: Vec<f64>,
    /// Replace the soft teacher output by its indicator (the infinite-temperature limit).
    #[serde(default)]
    pub hard_labels: bool,
    /// Freeze the bias from this stage onward.
    #[serde(default)]
    pub fix_bias_after: Option<usize>,
    /// Value of the frozen bias. When absent the bias learned at stage
    /// `fix_bias_after - 1` is carried forward.
    #[serde(default)]
    pub pinned_bias: Option<f64>,
}

impl HyperSchedule {
    pub fn new(lambdas: Vec<f64>, betas: Vec<f64>) -> Self {
        HyperSchedule {
            lambdas,
            betas,
            hard_labels: false,
            fix_bias_after: None,
            pinned_bias: None,
        }
    }

    /// Schedule with unit temperatures, the natural choice for the scale-invariant linear family.
    pub fn unit_betas(lambdas: Vec<f64>) -> Self {
        let t = lambdas.len().saturating_sub(1);
        HyperSchedule::new(lambdas, vec![1.0; t])
    }

    pub fn hard(mut self) -> Self {
        self.hard_labels = true;
        self
    }

    pub fn with_pinned_bias(mut self, from_stage: usize, value: Option<f64>) -> Self {
        self.fix_bias_after = Some(from_stage);
        self.pinned_bias = value;
        self
    }

    /// Final stage index T.
    pub fn horizon(&self) -> usize {
        self.lambdas.len().saturating_sub(1)
    }

    pub fn stages(&self) -> usize {
        self.lambdas.len()
    }

    /// Inverse temperature producing the targets of stage `t >= 1`.
    /// Missing entries default to 1, which is exact for the linear family.
    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.betas.get(t - 1).copied().unwrap_or(1.0)
    }

    /// Whether the bias of stage `t` is frozen rather than fitted.
    pub fn bias_pinned_at(&self, t: usize) -> bool {
        matches!(self.fix_bias_after, Some(k) if t >= k)
    }

    /// Truncate to stages `0..=t`.
    pub fn prefix(&self, t: usize) -> HyperSchedule {
        let mut h = self.clone();
        h.lambdas.truncate(t + 1);
        h.betas.truncate(t.min(h.betas.len()));
        h
    }

    pub fn validate(&self, family: LossFamily) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::domain("schedule needs at least one stage"));
        }
        for (t, &l) in self.lambdas.iter().enumerate() {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::domain(format!(
                    "lambda at stage {t} is {l}, but the ridge penalty (λ/2)‖w‖² requires λ ≥ 0"
                )));
            }
        }
        let t_max = self.horizon();
        if family == LossFamily::Logistic && !self.hard_labels && self.betas.len() != t_max {
            return Err(Error::domain(format!(
                "logistic schedule with {} stages needs {} betas, got {} (first missing: stage {})",
                t_max + 1,
                t_max,
                self.betas.len(),
                self.betas.len() + 1
            )));
        }
        if self.betas.len() > t_max {
            return Err(Error::domain(format!(
                "{} betas given for a schedule with only {} distillation stages",
                self.betas.len(),
                t_max
            )));
        }
        for (k, &b) in self.betas.iter().enumerate() {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::domain(format!(
                    "beta for stage {} must be positive, got {b}",
                    k + 1
                )));
            }
        }
        if let Some(k) = self.fix_bias_after {
            if k > t_max {
                return Err(Error::domain(format!(
                    "fix_bias_after = {k} exceeds the last stage {t_max}"
                )));
            }
            if k == 0 && self.pinned_bias.is_none() {
                return Err(Error::domain(
                    "fix_bias_after = 0 requires an explicit pinned_bias value",
                ));
            }
        }
        if let Some(b) = self.pinned_bias {
            if !b.is_finite() {
                return Err(Error::domain("pinned_bias must be finite"));
            }
        }
        Ok(())
    }
}

/// Joint law of the observed label `y` and the true label `y_true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelJoint {
    /// `p[y][y_true]`.
    pub p: [[f64; 2]; 2],
}

impl LabelJoint {
    fn from_valid(rho: f64, theta: f64) -> Self {
        LabelJoint {
            p: [
                [(1.0 - rho) * (1.0 - theta), rho * theta],
                [(1.0 - rho) * theta, rho * (1.0 - theta)],
            ],
        }
    }

    pub fn prob(&self, y: usize, y_true: usize) -> f64 {
        self.p[y][y_true]
    }

    /// The four `(y, y_true, p)` cases in a fixed order, including zero-mass ones.
    pub fn cases(&self) -> [(u8, u8, f64); 4] {
        [
            (0, 0, self.p[0][0]),
            (1, 0, self.p[1][0]),
            (0, 1, self.p[0][1]),
            (1, 1, self.p[1][1]),
        ]
    }

    pub fn total(&self) -> f64 {
        self.p[0][0] + self.p[0][1] + self.p[1][0] + self.p[1][1]
    }
}

/// Joint distribution of observed and true labels for class prior `rho` and flip rate `theta`.
pub fn label_joint(rho: f64, theta: f64) -> Result<LabelJoint> {
    check_rho_theta(rho, theta)?;
    Ok(LabelJoint::from_valid(rho, theta))
}

/// Standard normal upper tail `H(x) = P(g > x)`.
pub fn gauss_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn gauss_density(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Asymptotic test error of the classifier with overlap `m`, self-overlap `q` and bias `b`.
pub fn generalization_error(m: f64, q: f64, b: f64, cfg: &ProblemConfig) -> Result<f64> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::domain(format!(
            "self-overlap must be positive for a nondegenerate classifier, got {q}"
        )));
    }
    let s = (cfg.delta * q).sqrt();
    let e = cfg.rho * gauss_tail((m + b) / s) + (1.0 - cfg.rho) * gauss_tail((m - b) / s);
    Ok(clamp_probability(e))
}

pub(crate) fn clamp_probability(e: f64) -> f64 {
    if !(-1e-12..=1.0 + 1e-12).contains(&e) {
        log::warn!("error probability {e} left [0, 1] by more than 1e-12 before clamping");
    }
    e.clamp(0.0, 1.0)
}

/// Per-stage summary of a solved chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSolution {
    pub m: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    pub b: f64,
    pub gen_error: f64,
}

impl StageSolution {
    /// Cosine between the weight vector and the signal direction.
    pub fn alignment(&self) -> f64 {
        self.m / self.q.sqrt()
    }

    pub fn rescaled_bias(&self) -> f64 {
        self.b / self.q.sqrt()
    }
}
