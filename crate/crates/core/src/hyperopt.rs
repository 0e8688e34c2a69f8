//! Search over regularization strengths and teacher temperatures for the
//! schedule that minimizes the predicted error of the final stage.
//!
//! Parameters live in log10 space inside a box. Each restart runs a
//! bounded Nelder–Mead from a scrambled Halton point; evaluations that fail
//! to solve score `+∞`.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HyperSchedule, LossFamily, ProblemConfig};
use crate::replica::{solve_with_guess, OrderParameterState, SolveReport, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchMode {
    /// Soft teacher labels; temperatures are searched along with `λ`.
    Soft,
    /// Indicator labels; only `λ` is searched.
    Hard,
    /// Soft labels with the bias of stages `stage..` held at a fixed value.
    BiasFixed {
        stage: usize,
        #[serde(default)]
        source: BiasSource,
    },
}

/// Where a pinned bias comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSource {
    /// The chain's own bias at stage `stage − 1`, so the tuned teacher
    /// hands its bias down to every student.
    #[default]
    Chain,
    /// The bias of a separately tuned single-stage model.
    TunedSingleStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadSettings {
    /// Edge length of the starting simplex in log10 units.
    pub initial_scale: f64,
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Stop once the simplex fits in a box of this width (log10 units)...
    pub x_tol: f64,
    /// ...and the objective spread across vertices is below this.
    pub f_tol: f64,
    /// Evaluation budget per restart; at least 200 per searched parameter.
    pub max_evals: usize,
}

impl Default for NelderMeadSettings {
    fn default() -> Self {
        NelderMeadSettings {
            initial_scale: 0.5,
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            x_tol: 1e-4,
            f_tol: 1e-9,
            max_evals: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    /// Stage whose error is minimized.
    pub target: usize,
    pub mode: SearchMode,
    #[serde(default = "default_lambda_bounds")]
    pub lambda_bounds: (f64, f64),
    #[serde(default = "default_beta_bounds")]
    pub beta_bounds: (f64, f64),
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub nelder_mead: NelderMeadSettings,
    #[serde(default)]
    pub seed: u64,
    /// Extra starting points (full parameter vectors in natural units,
    /// `λ⁰..λᵀ`, then `β¹..βᵀ` when temperatures are searched), tried
    /// before the Halton points.
    #[serde(default)]
    pub starts: Vec<Vec<f64>>,
}

fn default_lambda_bounds() -> (f64, f64) {
    (1e-4, 1e6)
}

fn default_beta_bounds() -> (f64, f64) {
    (1e-2, 1e2)
}

fn default_restarts() -> usize {
    8
}

impl SearchSpec {
    pub fn new(target: usize, mode: SearchMode) -> Self {
        SearchSpec {
            target,
            mode,
            lambda_bounds: default_lambda_bounds(),
            beta_bounds: default_beta_bounds(),
            restarts: default_restarts(),
            nelder_mead: NelderMeadSettings::default(),
            seed: 0,
            starts: Vec::new(),
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, family: LossFamily) -> Result<()> {
        let ok = |b: (f64, f64)| b.0 > 0.0 && b.1 > b.0 && b.1.is_finite();
        if !ok(self.lambda_bounds) || !ok(self.beta_bounds) {
            return Err(Error::domain("search bounds must be positive and increasing"));
        }
        if self.restarts == 0 {
            return Err(Error::domain("at least one restart is required"));
        }
        if let SearchMode::BiasFixed { stage, .. } = self.mode {
            if stage == 0 || stage > self.target {
                return Err(Error::domain(format!(
                    "bias can be pinned from stage 1..={}, got {stage}",
                    self.target
                )));
            }
        }
        let nm = &self.nelder_mead;
        if !(nm.initial_scale > 0.0
            && nm.reflection > 0.0
            && nm.expansion > 1.0
            && nm.contraction > 0.0
            && nm.contraction < 1.0
            && nm.shrink > 0.0
            && nm.shrink < 1.0
            && nm.max_evals > 0)
        {
            return Err(Error::domain("invalid Nelder-Mead coefficients"));
        }
        let dim = self.dimension(family);
        if self.starts.iter().any(|s| s.len() != dim) {
            return Err(Error::domain(format!("starting points must have {dim} entries")));
        }
        Ok(())
    }

    /// Temperatures are searched only for soft logistic labels: the linear
    /// family is scale invariant, so its `β` has no effect.
    fn searches_beta(&self, family: LossFamily) -> bool {
        family == LossFamily::Logistic && !matches!(self.mode, SearchMode::Hard)
    }

    /// Number of searched parameters.
    pub fn dimension(&self, family: LossFamily) -> usize {
        self.target + 1 + if self.searches_beta(family) { self.target } else { 0 }
    }

    fn bounds(&self, family: LossFamily) -> Vec<(f64, f64)> {
        let l = (self.lambda_bounds.0.log10(), self.lambda_bounds.1.log10());
        let b = (self.beta_bounds.0.log10(), self.beta_bounds.1.log10());
        let mut out = vec![l; self.target + 1];
        if self.searches_beta(family) {
            out.extend(std::iter::repeat_n(b, self.target));
        }
        out
    }

    fn schedule(&self, x: &[f64], pinned: Option<f64>, family: LossFamily) -> HyperSchedule {
        let t = self.target;
        let lambdas: Vec<f64> = x[..=t].iter().map(|v| 10f64.powf(*v)).collect();
        let betas: Vec<f64> = if self.searches_beta(family) {
            x[t + 1..].iter().map(|v| 10f64.powf(*v)).collect()
        } else {
            vec![1.0; t]
        };
        let hyper = HyperSchedule::new(lambdas, betas);
        match self.mode {
            SearchMode::Soft => hyper,
            SearchMode::Hard => hyper.hard(),
            SearchMode::BiasFixed { stage, .. } => hyper.with_pinned_bias(stage, pinned),
        }
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub restart: usize,
    pub index: usize,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Final-stage error, `+∞` when the inner solve failed.
    pub objective: f64,
    pub residual: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub hyper: HyperSchedule,
    pub error: f64,
    pub report: SolveReport,
    pub trace: Vec<TraceEntry>,
    /// Externally supplied pinned bias, if any.
    pub pinned_bias: Option<f64>,
    /// Restart that produced the optimum.
    pub best_restart: usize,
    /// Best hard-label error found by the companion search of a logistic soft run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_error: Option<f64>,
}

/// Scrambled Halton point `index` in `[0, 1)^dim`.
fn halton(index: u64, dim: usize, perms: &[Vec<u64>]) -> Vec<f64> {
    const PRIMES: [u64; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    (0..dim)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()];
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index + 1;
            while i > 0 {
                f /= base as f64;
                r += f * perms[d][(i % base) as usize] as f64;
                i /= base;
            }
            r
        })
        .collect()
}

fn digit_permutations(dim: usize, seed: u64) -> Vec<Vec<u64>> {
    const PRIMES: [u64; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()];
            // Keep 0 fixed so no coordinate collapses onto the box edge.
            let mut p: Vec<u64> = (0..base).collect();
            for i in (2..base as usize).rev() {
                let j = rng.random_range(1..=i);
                p.swap(i, j);
            }
            p
        })
        .collect()
}

struct Objective<'a> {
    cfg: &'a ProblemConfig,
    spec: &'a SearchSpec,
    settings: &'a SolverSettings,
    pinned: Option<f64>,
    restart: usize,
    trace: Vec<TraceEntry>,
    warm: Option<OrderParameterState>,
    best: Option<(f64, Vec<f64>, SolveReport)>,
}

impl Objective<'_> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        let hyper = self.spec.schedule(x, self.pinned, self.cfg.loss_family);
        let start = Instant::now();
        let outcome = solve_with_guess(self.cfg, &hyper, self.settings, self.warm.as_ref())
            .or_else(|e| match self.warm {
                Some(_) => solve_with_guess(self.cfg, &hyper, self.settings, None),
                None => Err(e),
            });
        let (objective, residual, failure) = match outcome {
            Ok(report) => {
                let e = report.final_stage().gen_error;
                let r = report.max_residual;
                if e.is_finite() {
                    self.warm = Some(report.state.clone());
                    if self.best.as_ref().is_none_or(|b| e < b.0) {
                        self.best = Some((e, x.to_vec(), report));
                    }
                    (e, r, None)
                } else {
                    (f64::INFINITY, r, Some("non-finite error".to_string()))
                }
            }
            Err(err) => match single_class_fraction(&err) {
                // Every later student sees one class and predicts it everywhere.
                Some(frac) => (if frac < 0.5 { self.cfg.rho } else { 1.0 - self.cfg.rho }, 0.0, None),
                None => {
                    log::debug!("evaluation failed at {:?}: {err}", hyper.lambdas);
                    (f64::INFINITY, f64::NAN, Some(err.to_string()))
                }
            },
        };
        self.trace.push(TraceEntry {
            restart: self.restart,
            index: self.trace.len(),
            lambdas: hyper.lambdas.clone(),
            betas: if self.spec.searches_beta(self.cfg.loss_family) {
                hyper.betas.clone()
            } else {
                Vec::new()
            },
            objective,
            residual,
            wall_seconds: start.elapsed().as_secs_f64(),
            failure,
        });
        objective
    }
}

/// Positive-label fraction when a hard-label stage received a single class.
fn single_class_fraction(err: &Error) -> Option<f64> {
    match err {
        Error::AtStage { source, .. } => single_class_fraction(source),
        Error::Degenerate {
            what: "fraction of positive hard labels",
            value,
            ..
        } => Some(*value),
        _ => None,
    }
}

fn clip(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, b) in x.iter_mut().zip(bounds) {
        *v = v.clamp(b.0, b.1);
    }
}

/// Bounded Nelder–Mead minimization from `x0`.
fn nelder_mead(obj: &mut Objective<'_>, x0: &[f64], bounds: &[(f64, f64)], nm: &NelderMeadSettings) {
    let n = x0.len();
    let mut evals = 0;
    let mut f = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        obj.eval(x)
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clip(&mut start, bounds);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        // Step inward when the start sits on the upper bound.
        v[i] += if v[i] + nm.initial_scale <= bounds[i].1 { nm.initial_scale } else { -nm.initial_scale };
        clip(&mut v, bounds);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v, &mut evals)).collect();

    let point = |a: &[f64], b: &[f64], coef: f64| -> Vec<f64> {
        let mut p: Vec<f64> = a.iter().zip(b).map(|(a, b)| a + coef * (a - b)).collect();
        clip(&mut p, bounds);
        p
    };

    let budget = nm.max_evals.max(200 * n);
    while evals < budget {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let flat = spread.is_finite() && spread <= 1e-3 * nm.f_tol;
        if (spread <= nm.f_tol && diameter <= nm.x_tol) || flat {
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let xr = point(&centroid, &simplex[n], nm.reflection);
        let fr = f(&xr, &mut evals);
        if fr < values[0] {
            let xe = point(&centroid, &simplex[n], nm.reflection * nm.expansion);
            let fe = f(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = point(&centroid, &simplex[n], nm.reflection * nm.contraction);
            let fc = f(&xc, &mut evals);
            (xc, if fc <= fr { fc } else { f64::INFINITY })
        } else {
            let xc = point(&centroid, &simplex[n], -nm.contraction);
            let fc = f(&xc, &mut evals);
            (xc, if fc < values[n] { fc } else { f64::INFINITY })
        };
        if fc.is_finite() {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        for i in 1..=n {
            let mut v: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + nm.shrink * (x - b))
                .collect();
            clip(&mut v, bounds);
            values[i] = f(&v, &mut evals);
            simplex[i] = v;
        }
    }
}

/// Tuned bias of the single-stage problem, used by [`BiasSource::TunedSingleStage`].
pub fn optimal_single_stage_bias(cfg: &ProblemConfig, spec: &SearchSpec, settings: &SolverSettings) -> Result<f64> {
    let mut base = spec.clone();
    base.target = 0;
    base.mode = SearchMode::Soft;
    base.starts = base.starts.iter().map(|s| s[..1].to_vec()).collect();
    let r = optimize(cfg, &base, settings)?;
    Ok(r.report.final_stage().b)
}

/// Minimize the predicted error of stage `spec.target`.
///
/// For logistic [`SearchMode::Soft`] the hard-label search is run as well
/// and the better of the two is returned, since indicator labels are the
/// `β → ∞` limit that the bounded temperature range cannot reach. Linear
/// teacher outputs never approach indicators, so there soft means soft.
pub fn optimize(cfg: &ProblemConfig, spec: &SearchSpec, settings: &SolverSettings) -> Result<OptimizationResult> {
    cfg.validate()?;
    spec.validate(cfg.loss_family)?;
    settings.validate()?;
    let pinned = match spec.mode {
        SearchMode::BiasFixed {
            source: BiasSource::TunedSingleStage,
            ..
        } => Some(optimal_single_stage_bias(cfg, spec, settings)?),
        _ => None,
    };
    let mut best = search(cfg, spec, settings, pinned)?;
    if spec.mode == SearchMode::Soft && spec.target > 0 && cfg.loss_family == LossFamily::Logistic {
        let mut hard = spec.clone();
        hard.mode = SearchMode::Hard;
        hard.starts = spec.starts.iter().map(|s| s[..=spec.target].to_vec()).collect();
        match search(cfg, &hard, settings, None) {
            Ok(h) => {
                let hard_error = h.error;
                let offset = best.trace.len();
                let mut trace = std::mem::take(&mut best.trace);
                trace.extend(h.trace.iter().cloned().map(|mut e| {
                    e.index += offset;
                    e.restart += spec.restarts + spec.starts.len();
                    e
                }));
                if h.error < best.error {
                    best = OptimizationResult {
                        best_restart: h.best_restart + spec.restarts + spec.starts.len(),
                        ..h
                    };
                }
                best.trace = trace;
                best.hard_error = Some(hard_error);
            }
            Err(e) => log::warn!("hard-label search failed: {e}"),
        }
    }
    Ok(best)
}

fn search(cfg: &ProblemConfig, spec: &SearchSpec, settings: &SolverSettings, pinned: Option<f64>) -> Result<OptimizationResult> {
    let bounds = spec.bounds(cfg.loss_family);
    let dim = bounds.len();
    let perms = digit_permutations(dim, spec.seed);
    let mut starts: Vec<Vec<f64>> = spec
        .starts
        .iter()
        .map(|s| {
            let mut x: Vec<f64> = s.iter().map(|v| v.max(f64::MIN_POSITIVE).log10()).collect();
            clip(&mut x, &bounds);
            x
        })
        .collect();
    starts.extend((0..spec.restarts as u64).map(|k| {
        halton(k, dim, &perms)
            .iter()
            .zip(&bounds)
            .map(|(u, b)| b.0 + u * (b.1 - b.0))
            .collect()
    }));

    let runs: Vec<_> = starts
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let mut obj = Objective {
                cfg,
                spec,
                settings,
                pinned,
                restart: k,
                trace: Vec::new(),
                warm: None,
                best: None,
            };
            nelder_mead(&mut obj, x0, &bounds, &spec.nelder_mead);
            (obj.trace, obj.best)
        })
        .collect();

    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<f64>, SolveReport, usize)> = None;
    for (k, (t, b)) in runs.into_iter().enumerate() {
        let offset = trace.len();
        trace.extend(t.into_iter().map(|mut e| {
            e.index += offset;
            e
        }));
        if let Some((e, x, r)) = b {
            if best.as_ref().is_none_or(|b| e < b.0) {
                best = Some((e, x, r, k));
            }
        }
    }
    let Some((error, x, report, restart)) = best else {
        let reasons: Vec<&str> = trace.iter().filter_map(|e| e.failure.as_deref()).take(3).collect();
        return Err(Error::Optimization(format!(
            "all {} evaluations failed; first failures: {}",
            trace.len(),
            reasons.join("; ")
        )));
    };
    Ok(OptimizationResult {
        hyper: spec.schedule(&x, pinned, cfg.loss_family),
        error,
        report,
        trace,
        pinned_bias: pinned,
        best_restart: restart,
        hard_error: None,
    })
}

/// Optimal error per stage and the single-stage baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCurve {
    pub errors: Vec<f64>,
    pub hypers: Vec<HyperSchedule>,
    /// Tuned single-stage error with the given label noise.
    pub baseline_noisy: f64,
    /// Tuned single-stage error without label noise.
    pub baseline_clean: f64,
    /// Stage with the lowest tuned error, the early-stopping point.
    pub best_stage: usize,
}

impl StageCurve {
    pub fn best_error(&self) -> f64 {
        self.errors[self.best_stage]
    }

    /// `E*⁰ − min_t E*ᵗ`.
    pub fn improvement(&self) -> f64 {
        self.errors[0] - self.best_error()
    }
}

/// Tuned error for every stage `0..=t_max`. Each stage also starts from the
/// previous stage's optimum extended by one weakly regularized stage.
pub fn multi_stage_curve(cfg: &ProblemConfig, t_max: usize, spec: &SearchSpec, settings: &SolverSettings) -> Result<StageCurve> {
    if t_max < 1 {
        return Err(Error::domain("the curve needs at least two stages"));
    }
    let mut errors = Vec::with_capacity(t_max + 1);
    let mut hypers: Vec<HyperSchedule> = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let mut s = spec.clone();
        s.target = t;
        if let SearchMode::BiasFixed { stage, .. } = s.mode {
            if t < stage {
                s.mode = SearchMode::Soft;
            }
        }
        s.starts = match hypers.last() {
            Some(prev) => {
                // A nearly unregularized student copies its teacher, so this
                // start already scores the previous stage's optimum.
                let mut lam = prev.lambdas.clone();
                lam.push(s.lambda_bounds.0);
                let mut x = lam;
                if s.searches_beta(cfg.loss_family) {
                    let mut betas = if prev.hard_labels { vec![s.beta_bounds.1; t - 1] } else { prev.betas.clone() };
                    betas.push(1.0);
                    x.extend(betas);
                }
                vec![x]
            }
            None => Vec::new(),
        };
        let r = optimize(cfg, &s, settings).map_err(|e| e.at_stage(t))?;
        errors.push(r.error);
        hypers.push(r.hyper);
    }
    let baseline_noisy = errors[0];
    let mut s0 = spec.clone();
    s0.target = 0;
    s0.mode = SearchMode::Soft;
    s0.starts.clear();
    let baseline_clean = optimize(&cfg.with_theta(0.0), &s0, settings)?.error;
    let best_stage = errors
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(StageCurve {
        errors,
        hypers,
        baseline_noisy,
        baseline_clean,
        best_stage,
    })
}

/// Trace as CSV: one row per evaluation, parameters in natural units.
/// The search settings precede the header as `#` comment lines.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceEntry], spec: &SearchSpec) -> Result<()> {
    let nm = &spec.nelder_mead;
    writeln!(
        out,
        "# nelder_mead initial_scale={} reflection={} expansion={} contraction={} shrink={} x_tol={} f_tol={} max_evals={}",
        nm.initial_scale, nm.reflection, nm.expansion, nm.contraction, nm.shrink, nm.x_tol, nm.f_tol, nm.max_evals
    )?;
    writeln!(
        out,
        "# restarts={} seed={} lambda_bounds={:?} beta_bounds={:?}",
        spec.restarts, spec.seed, spec.lambda_bounds, spec.beta_bounds
    )?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["index".to_string(), "restart".to_string()];
    header.extend((0..=spec.target).map(|t| format!("lambda{t}")));
    let with_beta = trace.iter().any(|e| !e.betas.is_empty());
    if with_beta {
        header.extend((1..=spec.target).map(|t| format!("beta{t}")));
    }
    header.extend(["objective", "residual"].map(String::from));
    w.write_record(&header)?;
    for e in trace {
        let mut row = vec![e.index.to_string(), e.restart.to_string()];
        row.extend(e.lambdas.iter().map(|v| format!("{v:.12e}")));
        if with_beta {
            let mut b: Vec<String> = e.betas.iter().map(|v| format!("{v:.12e}")).collect();
            b.resize(spec.target, String::new());
            row.extend(b);
        }
        row.push(format!("{:.12e}", e.objective));
        row.push(format!("{:.6e}", e.residual));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Wall time of every evaluation, kept apart from the deterministic trace.
pub fn write_timing_csv<W: Write>(out: W, trace: &[TraceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "restart", "wall_seconds"])?;
    for e in trace {
        w.write_record([e.index.to_string(), e.restart.to_string(), format!("{:.6}", e.wall_seconds)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_points_fill_the_cube() {
        let perms = digit_permutations(3, 1);
        for k in 0..50 {
            let p = halton(k, 3, &perms);
            assert!(p.iter().all(|v| (0.0..1.0).contains(v)));
        }
        assert_ne!(halton(0, 3, &perms), halton(1, 3, &perms));
    }
}
