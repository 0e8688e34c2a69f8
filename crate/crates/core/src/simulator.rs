//! Finite-size simulation of multi-stage self-distillation: draw a
//! Gaussian-mixture training set, train every stage for real, and measure
//! the quantities the asymptotic theory predicts.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{sigmoid, softplus, teacher_label};
use crate::model::{gauss_tail, generalization_error, HyperSchedule, LossFamily, ProblemConfig};
use crate::replica::{sample_preactivations, weight_statistics, OrderParameterState};

/// Largest feature matrix [`generate`] will allocate.
pub const MAX_FEATURE_BYTES: usize = 8 << 30;

/// Gradient sup-norm at which logistic training stops.
pub const LOGISTIC_GRAD_TOL: f64 = 1e-9;

/// Default size of the fresh test set.
pub const DEFAULT_TEST_SIZE: usize = 200_000;

/// Training set drawn from the noisy two-cluster mixture with signal
/// direction `v = (1, …, 1)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: ProblemConfig,
    /// `N × M`, one column per sample.
    pub features: DMatrix<f64>,
    pub y_true: Vec<u8>,
    pub y_obs: Vec<u8>,
    pub seed: u64,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn samples(&self) -> usize {
        self.features.ncols()
    }

    /// `X̃ᵀ w` with `X̃ = X/√N`.
    fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        self.features.tr_mul(w) / (self.dim() as f64).sqrt()
    }

    /// `X̃ c`.
    fn combine(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.features * c / (self.dim() as f64).sqrt()
    }

    /// Pre-activations `w·x/√N + B` of the training samples.
    pub fn preactivations(&self, w: &DVector<f64>, b: f64) -> DVector<f64> {
        self.project(w).add_scalar(b)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw `M = round(αN)` samples in dimension `N`.
pub fn generate(cfg: &ProblemConfig, dim: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if dim < 2 {
        return Err(Error::domain(format!("dimension must be at least 2, got {dim}")));
    }
    let m = (cfg.alpha * dim as f64).round() as usize;
    if m < 1 {
        return Err(Error::domain("alpha * N rounds to zero samples"));
    }
    let bytes = dim.saturating_mul(m).saturating_mul(8);
    if bytes > MAX_FEATURE_BYTES {
        return Err(Error::Resource(format!(
            "feature matrix of {dim} x {m} needs {bytes} bytes, limit is {MAX_FEATURE_BYTES}"
        )));
    }
    let mut rng = rng_for(seed, 0);
    let mut y_true = Vec::with_capacity(m);
    let mut y_obs = Vec::with_capacity(m);
    for _ in 0..m {
        let yt = u8::from(rng.random::<f64>() < cfg.rho);
        let flip = rng.random::<f64>() < cfg.theta;
        y_true.push(yt);
        y_obs.push(if flip { 1 - yt } else { yt });
    }
    let shift = 1.0 / (dim as f64).sqrt();
    let sd = cfg.delta.sqrt();
    let mut features = DMatrix::zeros(dim, m);
    for (mu, mut col) in features.column_iter_mut().enumerate() {
        let s = if y_true[mu] == 1 { shift } else { -shift };
        for x in col.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x = s + sd * g;
        }
    }
    Ok(Dataset {
        config: *cfg,
        features,
        y_true,
        y_obs,
        seed,
    })
}

/// Weights and bias of one trained stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStage {
    pub w: DVector<f64>,
    pub b: f64,
    /// Set when the solution is the minimal-norm choice among many minimizers.
    pub flagged: bool,
    /// Final gradient sup-norm (logistic) or normal-equation residual (linear).
    pub residual: f64,
}

/// Train one stage with the bias fitted. Logistic targets must lie in
/// [0, 1]; linear targets may be any finite value.
pub fn train_stage(data: &Dataset, labels: &[f64], lambda: f64, family: LossFamily) -> Result<TrainedStage> {
    train_stage_with_bias(data, labels, lambda, family, None)
}

/// Train one stage, optionally holding the bias fixed.
pub fn train_stage_with_bias(
    data: &Dataset,
    labels: &[f64],
    lambda: f64,
    family: LossFamily,
    fixed_bias: Option<f64>,
) -> Result<TrainedStage> {
    if labels.len() != data.samples() {
        return Err(Error::domain("one label per sample is required"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    // Linear teachers emit affine targets that may leave [0, 1]; the squared
    // loss is defined for any real target.
    let in_range = match family {
        LossFamily::Logistic => labels.iter().all(|y| (0.0..=1.0).contains(y)),
        LossFamily::Linear => labels.iter().all(|y| y.is_finite()),
    };
    if !in_range {
        return Err(Error::domain(match family {
            LossFamily::Logistic => "logistic targets must lie in [0, 1]",
            LossFamily::Linear => "linear targets must be finite",
        }));
    }
    match family {
        LossFamily::Linear => train_linear(data, labels, lambda, fixed_bias),
        LossFamily::Logistic => train_logistic(data, labels, lambda, fixed_bias),
    }
}

/// Conjugate gradients for a symmetric positive definite operator.
fn conjugate_gradient<A>(apply: A, rhs: &DVector<f64>, x0: DVector<f64>, rel_tol: f64, max_iter: usize) -> DVector<f64>
where
    A: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0;
    let mut r = rhs - apply(&x);
    let target = rel_tol * rhs.norm().max(f64::MIN_POSITIVE);
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    for _ in 0..max_iter {
        if rr.sqrt() <= target {
            break;
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rr / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rr_new = r.norm_squared();
        p = &r + (rr_new / rr) * &p;
        rr = rr_new;
    }
    x
}

/// Ridge regression of `t = 2y − 1` on `u = w·x/√N + B`, which minimizes the
/// stage loss `Σ (y − (u + 1)/2)² + λ‖w‖²/2`.
fn train_linear(data: &Dataset, labels: &[f64], lambda: f64, fixed_bias: Option<f64>) -> Result<TrainedStage> {
    let m = data.samples();
    let t = DVector::from_iterator(m, labels.iter().map(|y| 2.0 * y - 1.0));
    let center = |v: DVector<f64>| -> DVector<f64> {
        match fixed_bias {
            Some(_) => v,
            None => {
                let mean = v.mean();
                v.add_scalar(-mean)
            }
        }
    };
    let target = match fixed_bias {
        Some(b) => t.add_scalar(-b),
        None => center(t.clone()),
    };
    let rhs = data.combine(&target);
    let (w, flagged) = if lambda > 0.0 {
        let apply = |v: &DVector<f64>| data.combine(&center(data.project(v))) + 2.0 * lambda * v;
        let w = conjugate_gradient(apply, &rhs, DVector::zeros(data.dim()), 1e-14, 10 * data.dim() + 100);
        (w, false)
    } else {
        // Minimal-norm least squares on the (centered) design.
        let n = data.dim();
        let scale = 1.0 / (n as f64).sqrt();
        let mut design = data.features.transpose() * scale;
        if fixed_bias.is_none() {
            for j in 0..n {
                let mean = design.column(j).mean();
                design.column_mut(j).add_scalar_mut(-mean);
            }
        }
        let svd = design.svd(true, true);
        let w = svd
            .solve(&target, 1e-12 * svd.singular_values.max())
            .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
        (w, m < n + usize::from(fixed_bias.is_none()))
    };
    let u = data.project(&w);
    let b = match fixed_bias {
        Some(b) => b,
        None => (&t - &u).mean(),
    };
    let grad = data.combine(&(u.add_scalar(b) - &t)) * 0.5 + lambda * &w;
    Ok(TrainedStage {
        residual: grad.amax(),
        w,
        b,
        flagged,
    })
}

/// Regularized cross-entropy by Newton–CG with Armijo backtracking.
fn train_logistic(data: &Dataset, labels: &[f64], lambda: f64, fixed_bias: Option<f64>) -> Result<TrainedStage> {
    let n = data.dim();
    let y = DVector::from_column_slice(labels);
    let fit_bias = fixed_bias.is_none();
    let mut w = DVector::zeros(n);
    let mut b = fixed_bias.unwrap_or(0.0);

    let objective = |w: &DVector<f64>, b: f64| -> f64 {
        let u = data.preactivations(w, b);
        u.iter().zip(y.iter()).map(|(u, y)| softplus(*u) - y * u).sum::<f64>() + 0.5 * lambda * w.norm_squared()
    };

    let mut f = objective(&w, b);
    for _ in 0..200 {
        let u = data.preactivations(&w, b);
        let s = u.map(sigmoid);
        let r = &s - &y;
        let gw = data.combine(&r) + lambda * &w;
        let gb = if fit_bias { r.sum() } else { 0.0 };
        let gmax = gw.amax().max(gb.abs());
        if gmax <= LOGISTIC_GRAD_TOL {
            return Ok(TrainedStage {
                w,
                b,
                flagged: false,
                residual: gmax,
            });
        }
        let curv = s.map(|v| v * (1.0 - v));
        // Hessian-vector product on the stacked vector (w, b).
        let apply = |d: &DVector<f64>| -> DVector<f64> {
            let dw = d.rows(0, n).into_owned();
            let db = if fit_bias { d[n] } else { 0.0 };
            let du = data.project(&dw).add_scalar(db).component_mul(&curv);
            let mut out = DVector::zeros(d.len());
            out.rows_mut(0, n).copy_from(&(data.combine(&du) + lambda * &dw));
            if fit_bias {
                out[n] = du.sum();
            }
            out
        };
        let dim = if fit_bias { n + 1 } else { n };
        let mut g = DVector::zeros(dim);
        g.rows_mut(0, n).copy_from(&gw);
        if fit_bias {
            g[n] = gb;
        }
        let gnorm = g.norm();
        let forcing = gnorm.sqrt().min(0.1);
        // Tiny ridge on the bias direction keeps CG well posed when the data separate.
        let shifted = |d: &DVector<f64>| -> DVector<f64> { apply(d) + 1e-12 * d };
        let p = conjugate_gradient(shifted, &(-&g), DVector::zeros(dim), forcing, 4 * dim + 50);
        let slope = g.dot(&p);
        if !(slope < 0.0) {
            return Err(Error::Optimization("Newton direction is not a descent direction".into()));
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let wn = &w + step * p.rows(0, n);
            let bn = if fit_bias { b + step * p[n] } else { b };
            let fn_ = objective(&wn, bn);
            if fn_ <= f + 1e-4 * step * slope || (fn_ - f).abs() <= 1e-15 * f.abs().max(1.0) {
                w = wn;
                b = bn;
                f = fn_;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::Optimization("line search failed in logistic training".into()));
        }
    }
    Err(Error::Optimization(
        "logistic training did not reach the gradient tolerance in 200 Newton steps".into(),
    ))
}

/// Measurements of one simulated distillation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRun {
    pub seed: u64,
    pub dim: usize,
    pub samples: usize,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    /// `Q̄^{st} = ŵ^s·ŵ^t/N`.
    #[serde(with = "crate::replica::matrix_rows", rename = "Q")]
    pub q: DMatrix<f64>,
    /// `m̄^t = ŵ^t·v/N`.
    pub m: Vec<f64>,
    /// Error on a fresh test set and its binomial standard error.
    pub test_error: Vec<f64>,
    pub test_error_se: Vec<f64>,
    pub test_size: usize,
    /// Asymptotic error formula evaluated at the empirical `(m̄, Q̄, B̂)`.
    pub plugin_error: Vec<f64>,
    /// Training-sample pre-activations per stage.
    pub preactivations: Vec<Vec<f64>>,
    pub flagged: Vec<bool>,
}

impl EmpiricalRun {
    pub fn stages(&self) -> usize {
        self.biases.len()
    }
}

/// Train the full chain described by `hyper` on `data`.
pub fn run_sd_chain(data: &Dataset, hyper: &HyperSchedule, family: LossFamily, test_size: usize) -> Result<EmpiricalRun> {
    hyper.validate(family)?;
    let stages = hyper.stages();
    let n = data.dim();
    let mut labels: Vec<f64> = data.y_obs.iter().map(|&y| y as f64).collect();
    let mut trained: Vec<TrainedStage> = Vec::with_capacity(stages);
    let mut preacts = Vec::with_capacity(stages);
    for t in 0..stages {
        let fixed = if hyper.bias_pinned_at(t) {
            let k = hyper.fix_bias_after.unwrap_or(0);
            Some(hyper.pinned_bias.unwrap_or_else(|| trained[k.saturating_sub(1)].b))
        } else {
            None
        };
        let st = train_stage_with_bias(data, &labels, hyper.lambdas[t], family, fixed)
            .map_err(|e| e.at_stage(t))?;
        let u = data.preactivations(&st.w, st.b);
        if t + 1 < stages {
            let beta = hyper.beta(t + 1);
            labels = u.iter().map(|&u| teacher_label(family, beta, u, hyper.hard_labels).0).collect();
        }
        preacts.push(u.iter().copied().collect::<Vec<f64>>());
        trained.push(st);
    }

    let nf = n as f64;
    let q = DMatrix::from_fn(stages, stages, |s, t| trained[s].w.dot(&trained[t].w) / nf);
    let m: Vec<f64> = trained.iter().map(|st| st.w.sum() / nf).collect();
    let biases: Vec<f64> = trained.iter().map(|st| st.b).collect();
    let plugin_error = (0..stages)
        .map(|t| generalization_error(m[t], q[(t, t)], biases[t], &data.config).unwrap_or(f64::NAN))
        .collect();
    let test_error = test_errors(data, &trained, test_size);
    let test_error_se = test_error
        .iter()
        .map(|e| (e * (1.0 - e) / test_size.max(1) as f64).sqrt())
        .collect();
    Ok(EmpiricalRun {
        seed: data.seed,
        dim: n,
        samples: data.samples(),
        weights: trained.iter().map(|st| st.w.iter().copied().collect()).collect(),
        biases,
        q,
        m,
        test_error,
        test_error_se,
        test_size,
        plugin_error,
        preactivations: preacts,
        flagged: trained.iter().map(|st| st.flagged).collect(),
    })
}

/// Misclassification rate of every stage on one fresh test set.
fn test_errors(data: &Dataset, trained: &[TrainedStage], test_size: usize) -> Vec<f64> {
    let cfg = &data.config;
    let n = data.dim();
    let stages = trained.len();
    if test_size == 0 {
        return vec![f64::NAN; stages];
    }
    let weights = DMatrix::from_fn(stages, n, |t, i| trained[t].w[i]);
    let mut rng = rng_for(data.seed, 1);
    let shift = 1.0 / (n as f64).sqrt();
    let sd = cfg.delta.sqrt();
    let scale = 1.0 / (n as f64).sqrt();
    let chunk = 2048;
    let mut wrong = vec![0usize; stages];
    let mut done = 0;
    while done < test_size {
        let k = chunk.min(test_size - done);
        let mut x = DMatrix::zeros(n, k);
        let mut yt = Vec::with_capacity(k);
        for mut col in x.column_iter_mut() {
            let y = u8::from(rng.random::<f64>() < cfg.rho);
            let s = if y == 1 { shift } else { -shift };
            for v in col.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = s + sd * g;
            }
            yt.push(y);
        }
        let u = &weights * &x * scale;
        for t in 0..stages {
            for (j, &y) in yt.iter().enumerate() {
                let pred = u8::from(u[(t, j)] + trained[t].b > 0.0);
                if pred != y {
                    wrong[t] += 1;
                }
            }
        }
        done += k;
    }
    wrong.iter().map(|&w| w as f64 / test_size as f64).collect()
}

/// Seed of trial `k` derived from a base seed.
pub fn trial_seed(base: u64, k: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = base ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent trials of the full chain, in trial order.
pub fn run_trials(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    dim: usize,
    trials: usize,
    seed: u64,
    test_size: usize,
) -> Result<Vec<EmpiricalRun>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let data = generate(cfg, dim, trial_seed(seed, k))?;
            run_sd_chain(&data, hyper, cfg.loss_family, test_size)
        })
        .collect()
}

/// Mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 1% critical value of the KS statistic for effective size `n`.
pub fn ks_critical_1pct(n_eff: f64) -> f64 {
    1.628 / n_eff.sqrt()
}

/// Empirical mean against theory for one quantity of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub mean: f64,
    pub sem: f64,
    pub theory: f64,
    /// `(mean − theory)/sem`.
    pub z: f64,
}

impl Agreement {
    fn new(values: &[f64], theory: f64) -> Self {
        let (mean, sem) = mean_sem(values);
        let z = if sem > 0.0 {
            (mean - theory) / sem
        } else if mean == theory {
            0.0
        } else {
            f64::INFINITY
        };
        Agreement { mean, sem, theory, z }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAgreement {
    pub stage: usize,
    pub m: Agreement,
    #[serde(rename = "Q")]
    pub q: Agreement,
    pub b: Agreement,
    pub test_error: Agreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub stage: usize,
    pub statistic: f64,
    pub critical_1pct: f64,
}

impl KsResult {
    pub fn passes(&self) -> bool {
        self.statistic < self.critical_1pct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub trials: usize,
    pub stages: Vec<StageAgreement>,
    /// First run's weight coordinates against the Gaussian weight law.
    pub ks_weights: Vec<KsResult>,
    /// First run's training pre-activations against draws of the effective
    /// chain, after moving the run's bias onto the predicted one. The fitted
    /// bias fluctuates by `O(M^{-1/2})` from run to run, which alone is enough
    /// to fail a KS test at this sample size.
    pub ks_preactivations: Vec<KsResult>,
}

impl AgreementReport {
    pub fn max_abs_z(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| [s.m.z, s.q.z, s.b.z, s.test_error.z])
            .map(f64::abs)
            .fold(0.0, f64::max)
    }
}

/// Compare an ensemble of runs with the solved theory.
pub fn compare_to_theory(
    runs: &[EmpiricalRun],
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    state: &OrderParameterState,
    seed: u64,
) -> Result<AgreementReport> {
    if runs.len() < 2 {
        return Err(Error::domain("at least two runs are needed for standard errors"));
    }
    let stages = runs[0].stages();
    if runs.iter().any(|r| r.stages() != stages || r.dim != runs[0].dim || r.samples != runs[0].samples) {
        return Err(Error::domain("runs were produced with different settings"));
    }
    if stages != hyper.stages() || state.solved < stages {
        return Err(Error::domain("runs and theory cover different numbers of stages"));
    }
    let expected_samples = (cfg.alpha * runs[0].dim as f64).round() as usize;
    if expected_samples != runs[0].samples {
        return Err(Error::domain("runs were generated under a different sample ratio"));
    }
    let mut out = Vec::with_capacity(stages);
    for t in 0..stages {
        let th = state.stage(t, cfg)?;
        let col = |f: &dyn Fn(&EmpiricalRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        out.push(StageAgreement {
            stage: t,
            m: Agreement::new(&col(&|r| r.m[t]), th.m),
            q: Agreement::new(&col(&|r| r.q[(t, t)]), th.q),
            b: Agreement::new(&col(&|r| r.biases[t]), th.b),
            test_error: Agreement::new(&col(&|r| r.test_error[t]), th.gen_error),
        });
    }
    let first = &runs[0];
    let mut ks_w = Vec::with_capacity(stages);
    let mut ks_u = Vec::with_capacity(stages);
    for t in 0..stages {
        let law = weight_statistics(state, hyper, t)?;
        let (mu, sd) = law.marginal(t);
        let d = ks_one_sample(&first.weights[t], |x| 1.0 - gauss_tail((x - mu) / sd));
        ks_w.push(KsResult {
            stage: t,
            statistic: d,
            critical_1pct: ks_critical_1pct(first.weights[t].len() as f64),
        });
        let shift = first.biases[t] - state.b[t];
        let emp: Vec<f64> = first.preactivations[t].iter().map(|u| u - shift).collect();
        let theory = sample_preactivations(cfg, hyper, state, t, emp.len(), trial_seed(seed, t as u64))?;
        let d = ks_two_sample(&emp, &theory);
        let (na, nb) = (emp.len() as f64, theory.len() as f64);
        ks_u.push(KsResult {
            stage: t,
            statistic: d,
            critical_1pct: ks_critical_1pct(na * nb / (na + nb)),
        });
    }
    Ok(AgreementReport {
        trials: runs.len(),
        stages: out,
        ks_weights: ks_w,
        ks_preactivations: ks_u,
    })
}

/// One CSV row per trial per stage.
pub fn write_runs_csv<W: Write>(out: W, runs: &[EmpiricalRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "seed",
        "stage",
        "m",
        "Q",
        "B",
        "test_error",
        "test_error_se",
        "plugin_error",
        "flagged",
    ])?;
    for (k, r) in runs.iter().enumerate() {
        for t in 0..r.stages() {
            w.write_record([
                k.to_string(),
                r.seed.to_string(),
                t.to_string(),
                format!("{:.12e}", r.m[t]),
                format!("{:.12e}", r.q[(t, t)]),
                format!("{:.12e}", r.biases[t]),
                format!("{:.12e}", r.test_error[t]),
                format!("{:.12e}", r.test_error_se[t]),
                format!("{:.12e}", r.plugin_error[t]),
                r.flagged[t].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ensemble means and standard errors per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub trials: usize,
    pub dim: usize,
    pub samples: usize,
    pub test_size: usize,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub m_mean: f64,
    pub m_sem: f64,
    #[serde(rename = "Q_mean")]
    pub q_mean: f64,
    #[serde(rename = "Q_sem")]
    pub q_sem: f64,
    #[serde(rename = "B_mean")]
    pub b_mean: f64,
    #[serde(rename = "B_sem")]
    pub b_sem: f64,
    pub test_error_mean: f64,
    pub test_error_sem: f64,
}

pub fn summarize(runs: &[EmpiricalRun]) -> Result<EnsembleSummary> {
    let first = runs.first().ok_or_else(|| Error::domain("no runs to summarize"))?;
    let stages = (0..first.stages())
        .map(|t| {
            let (m_mean, m_sem) = mean_sem(&runs.iter().map(|r| r.m[t]).collect::<Vec<_>>());
            let (q_mean, q_sem) = mean_sem(&runs.iter().map(|r| r.q[(t, t)]).collect::<Vec<_>>());
            let (b_mean, b_sem) = mean_sem(&runs.iter().map(|r| r.biases[t]).collect::<Vec<_>>());
            let (e_mean, e_sem) = mean_sem(&runs.iter().map(|r| r.test_error[t]).collect::<Vec<_>>());
            StageSummary {
                stage: t,
                m_mean,
                m_sem,
                q_mean,
                q_sem,
                b_mean,
                b_sem,
                test_error_mean: e_mean,
                test_error_sem: e_sem,
            }
        })
        .collect();
    Ok(EnsembleSummary {
        trials: runs.len(),
        dim: first.dim,
        samples: first.samples,
        test_size: first.test_size,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_two_sample_of_identical_sets_is_zero() {
        let a = [0.3, -1.0, 2.0, 0.1];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }

    #[test]
    fn trial_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|k| trial_seed(7, k)).collect();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), s.len());
    }
}
