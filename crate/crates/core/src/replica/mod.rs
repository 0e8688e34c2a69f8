//! Stage-by-stage solution of the replica saddle-point equations of
//! multi-stage self-distillation.
//!
//! Stage t is solved only after stages `0..t` have converged. Within a
//! stage the unknowns are column t of `Q` and `χ` plus `m^t`; the conjugates
//! are expectations over the effective single-coordinate chain, computed by
//! an expectation engine, and the order parameters follow from them in
//! closed form.

mod affine;
mod engine;
mod mixing;
mod paths;
mod quad;
mod sample;
mod state;

pub(crate) use state::rows as matrix_rows;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HyperSchedule, LossFamily, ProblemConfig, StageSolution};
use affine::AffineEngine;
use engine::{BiasMode, Moments, StageEngine, Trial};
use mixing::Mixer;
use paths::{PathEngine, PathOptions};

pub use sample::{
    derivative_column, forward_path, sample_preactivations, weight_statistics, SamplePath, WeightLaw,
};
pub use state::OrderParameterState;

/// How expectations over the Gaussian fields are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    /// Closed form for the linear family with soft labels, Gauss–Hermite
    /// with a node count fitted to `max_paths` otherwise.
    Auto,
    /// Antithetic draws with common random numbers across iterations.
    MonteCarlo { samples: usize, seed: u64 },
    /// Tensor Gauss–Hermite rule with `nodes` points per stage.
    GaussHermite { nodes: usize },
    /// Closed form; linear family with soft labels only.
    AffineExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSolverSettings {
    /// Accepted `|E[z^t]|` relative to `Δχ^{tt}`.
    pub tolerance: f64,
    pub max_expansions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub damping: f64,
    /// Sup-norm of the fixed-point residual, each entry measured on its natural scale.
    pub tol: f64,
    pub max_iters: usize,
    pub expectation: Expectation,
    pub bias_solver: BiasSolverSettings,
    /// Relative jitter added to the diagonal of `ΔQ` before factorization.
    pub jitter: f64,
    /// Depth of the Anderson mixing history; 0 gives plain damped iteration.
    pub anderson: usize,
    /// Upper bound on sample paths or quadrature nodes held at once.
    pub max_paths: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            damping: 0.5,
            tol: 1e-8,
            max_iters: 2000,
            expectation: Expectation::Auto,
            bias_solver: BiasSolverSettings {
                tolerance: 1e-12,
                max_expansions: 60,
            },
            jitter: 1e-12,
            anderson: 5,
            max_paths: 400_000,
        }
    }
}

impl SolverSettings {
    pub fn with_expectation(mut self, e: Expectation) -> Self {
        self.expectation = e;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::domain(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::domain(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::domain("max_iters must be at least 1"));
        }
        if !(self.bias_solver.tolerance > 0.0) {
            return Err(Error::domain("bias tolerance must be positive"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::domain("jitter must be nonnegative"));
        }
        match self.expectation {
            Expectation::MonteCarlo { samples, .. } if samples < 2 => {
                Err(Error::domain("Monte Carlo needs at least 2 samples"))
            }
            Expectation::GaussHermite { nodes } if nodes == 0 => {
                Err(Error::domain("Gauss-Hermite needs at least 1 node"))
            }
            _ => Ok(()),
        }
    }

    /// Engine actually used for this problem.
    pub fn resolved_expectation(&self, cfg: &ProblemConfig, hyper: &HyperSchedule) -> Expectation {
        match self.expectation {
            Expectation::Auto => {
                if cfg.loss_family == LossFamily::Linear && !hyper.hard_labels {
                    return Expectation::AffineExact;
                }
                let stages = hyper.stages() as i32;
                let split = if hyper.hard_labels { 2f64.powi(stages - 1) } else { 1.0 };
                let fits = |n: usize| 4.0 * (n as f64).powi(stages) * split <= self.max_paths as f64;
                match (6..=48).rev().find(|&n| fits(n)) {
                    Some(nodes) => Expectation::GaussHermite { nodes },
                    None => Expectation::MonteCarlo {
                        samples: self.max_paths / 8,
                        seed: 0,
                    },
                }
            }
            e => e,
        }
    }
}

/// Conjugate parameters of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conjugates {
    /// `Q̂^{st}` for `s = 0..=t`.
    pub qhat: Vec<f64>,
    pub mhat: f64,
    /// `χ̂^{st}` for `s = 0..=t`.
    pub chihat: Vec<f64>,
    /// Bias at which the expectations were taken.
    pub bias: f64,
    /// Monte Carlo standard errors of `(qhat, mhat, chihat)`.
    pub std_err: Option<(Vec<f64>, f64, Vec<f64>)>,
}

/// New column of the order parameters produced from the conjugates.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderColumn {
    /// `Q^{st}` for `s = 0..=t`.
    pub q: Vec<f64>,
    pub m: f64,
    /// `χ^{st}` for `s = 0..=t`.
    pub chi: Vec<f64>,
    /// `R^{tl}` for `l < t`.
    pub r_row: Vec<f64>,
    /// `R^{st}` for `s = 0..=t`.
    pub r_col: Vec<f64>,
}

fn conjugates_from(cfg: &ProblemConfig, state: &OrderParameterState, chi_tt: f64, mo: &Moments) -> Conjugates {
    let t = mo.dz.len() - 1;
    let a = cfg.alpha;
    let chi_ss = |s: usize| if s == t { chi_tt } else { state.chi[(s, s)] };
    let fq = -a / chi_tt;
    let fm = a / (cfg.delta * chi_tt);
    let fc = |s: usize| a / (cfg.delta * chi_ss(s) * chi_tt);
    Conjugates {
        qhat: mo.dz.iter().map(|v| fq * v).collect(),
        mhat: fm * mo.signed_z,
        chihat: mo.zz.iter().enumerate().map(|(s, v)| fc(s) * v).collect(),
        bias: mo.bias,
        std_err: mo.std_err.as_ref().map(|(dz, sz, zz)| {
            (
                dz.iter().map(|v| fq.abs() * v).collect(),
                fm.abs() * sz,
                zz.iter().enumerate().map(|(s, v)| fc(s).abs() * v).collect(),
            )
        }),
    }
}

/// Closed-form order parameters of stage t given its conjugates and the
/// converged stages `0..t` in `state`.
pub fn order_update(state: &OrderParameterState, conj: &Conjugates, lambda: f64, t: usize) -> Result<OrderColumn> {
    if conj.qhat.len() != t + 1 || conj.chihat.len() != t + 1 {
        return Err(Error::domain(format!("conjugate column for stage {t} has the wrong length")));
    }
    if state.solved < t {
        return Err(Error::domain(format!("stages before {t} are not solved")));
    }
    let qh = |l: usize, s: usize| if s == t { conj.qhat[l] } else { state.qhat[(l, s)] };
    let den = lambda + conj.qhat[t];
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Degenerate {
            stage: t,
            what: "lambda + Qhat^tt",
            value: den,
        });
    }
    let chi_tt = 1.0 / den;
    let mut chi = vec![0.0; t + 1];
    chi[t] = chi_tt;
    for s in 0..t {
        let mut acc = 0.0;
        for l in s..t {
            acc += qh(l, t) * state.chi[(s, l)];
        }
        chi[s] = -chi_tt * acc;
    }

    let mut m = conj.mhat;
    for s in 0..t {
        m -= qh(s, t) * state.m[s];
    }
    m *= chi_tt;

    // New row R^{tl} first; the column below needs it.
    let mut r_row = vec![0.0; t];
    for l in 0..t {
        let mut acc = conj.chihat[l];
        for k in 0..l {
            acc -= state.qhat[(k, l)] * r_row[k];
        }
        r_row[l] = state.chi[(l, l)] * acc;
    }
    let r_of = |s: usize, l: usize| if s == t { r_row[l] } else { state.r[(s, l)] };
    let mut r_col = vec![0.0; t + 1];
    for (s, rc) in r_col.iter_mut().enumerate() {
        let mut acc = conj.chihat[s];
        for l in 0..t {
            acc -= qh(l, t) * r_of(s, l);
        }
        *rc = chi_tt * acc;
    }

    let mut q = vec![0.0; t + 1];
    for s in 0..=t {
        let (chi_ss, mhat_s) = if s == t { (chi_tt, conj.mhat) } else { (state.chi[(s, s)], state.mhat[s]) };
        let mut acc = mhat_s * m + r_col[s];
        for l in 0..s {
            acc -= qh(l, s) * q[l];
        }
        q[s] = chi_ss * acc;
    }
    Ok(OrderColumn { q, m, chi, r_row, r_col })
}

/// Iterations allowed without halving the best residual.
const STALL_WINDOW: usize = 200;

/// Stateful solver holding the expectation engine across stages.
pub struct Solver {
    cfg: ProblemConfig,
    hyper: HyperSchedule,
    settings: SolverSettings,
    engine: Box<dyn StageEngine>,
    state: OrderParameterState,
    /// Cholesky factor of `ΔQ` over the solved stages.
    chol: DMatrix<f64>,
}

fn build_engine(cfg: &ProblemConfig, hyper: &HyperSchedule, settings: &SolverSettings) -> Result<Box<dyn StageEngine>> {
    let opts = PathOptions {
        bias_tol: settings.bias_solver.tolerance,
        max_expansions: settings.bias_solver.max_expansions,
        max_paths: settings.max_paths,
    };
    Ok(match settings.resolved_expectation(cfg, hyper) {
        Expectation::AffineExact => {
            if cfg.loss_family != LossFamily::Linear || hyper.hard_labels {
                return Err(Error::Unsupported(
                    "the affine closed form needs the linear family with soft labels".into(),
                ));
            }
            Box::new(AffineEngine::new(cfg, hyper))
        }
        Expectation::GaussHermite { nodes } => Box::new(PathEngine::quadrature(cfg, hyper, nodes, &opts)),
        Expectation::MonteCarlo { samples, seed } => {
            Box::new(PathEngine::monte_carlo(cfg, hyper, samples, seed, &opts)?)
        }
        Expectation::Auto => unreachable!("resolved above"),
    })
}

/// Cholesky row t of `ΔQ` given the factor of rows `0..t`.
fn cholesky_row(chol: &DMatrix<f64>, q_col: &[f64], delta: f64, jitter: f64, t: usize) -> Result<Vec<f64>> {
    let mut row = vec![0.0; t + 1];
    for r in 0..t {
        let mut v = delta * q_col[r];
        for k in 0..r {
            v -= row[k] * chol[(r, k)];
        }
        row[r] = v / chol[(r, r)];
    }
    let mut d = delta * q_col[t] * (1.0 + jitter);
    for v in &row[..t] {
        d -= v * v;
    }
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::IllConditioned { stage: t, pivot: d });
    }
    row[t] = d.sqrt();
    Ok(row)
}

impl Solver {
    pub fn new(cfg: &ProblemConfig, hyper: &HyperSchedule, settings: &SolverSettings) -> Result<Self> {
        cfg.validate()?;
        hyper.validate(cfg.loss_family)?;
        settings.validate()?;
        let n = hyper.stages();
        Ok(Solver {
            cfg: *cfg,
            hyper: hyper.clone(),
            settings: *settings,
            engine: build_engine(cfg, hyper, settings)?,
            state: OrderParameterState::new(n),
            chol: DMatrix::zeros(n, n),
        })
    }

    /// Solver positioned after the solved stages of `state`, which are
    /// replayed through the engine without iterating.
    pub fn resume(
        cfg: &ProblemConfig,
        hyper: &HyperSchedule,
        settings: &SolverSettings,
        state: &OrderParameterState,
    ) -> Result<Self> {
        let mut s = Solver::new(cfg, hyper, settings)?;
        s.state = state.resized(hyper.stages());
        for t in 0..s.state.solved {
            s.engine.begin_stage(t)?;
            let q_col: Vec<f64> = (0..=t).map(|r| s.state.q[(r, t)]).collect();
            let row = cholesky_row(&s.chol, &q_col, cfg.delta, settings.jitter, t)?;
            for (r, v) in row.into_iter().enumerate() {
                s.chol[(t, r)] = v;
            }
            let trial = s.trial_from_state(t, BiasMode::Fixed(s.state.b[t]))?;
            s.engine.commit(&trial)?;
        }
        Ok(s)
    }

    pub fn state(&self) -> &OrderParameterState {
        &self.state
    }

    pub fn into_state(self) -> OrderParameterState {
        self.state
    }

    pub fn solved(&self) -> usize {
        self.state.solved
    }

    /// Sample paths or quadrature nodes held by the expectation engine.
    pub fn engine_size(&self) -> usize {
        self.engine.size()
    }

    fn coupling(&self, t: usize, chi_col: &[f64]) -> Result<Vec<f64>> {
        (0..t)
            .map(|r| {
                let d = self.state.chi[(r, r)];
                if !(d > 0.0) {
                    return Err(Error::Degenerate {
                        stage: r,
                        what: "chi^rr",
                        value: d,
                    });
                }
                Ok(chi_col[r] / d)
            })
            .collect()
    }

    fn trial(&self, t: usize, q_col: &[f64], m: f64, chi_col: &[f64], bias: BiasMode) -> Result<Trial> {
        if !(chi_col[t] > 0.0) {
            return Err(Error::Degenerate {
                stage: t,
                what: "chi^tt",
                value: chi_col[t],
            });
        }
        let row = cholesky_row(&self.chol, q_col, self.cfg.delta, self.settings.jitter, t)?;
        let mut chol = DMatrix::zeros(t + 1, t + 1);
        for s in 0..t {
            for r in 0..=s {
                chol[(s, r)] = self.chol[(s, r)];
            }
        }
        for (r, v) in row.into_iter().enumerate() {
            chol[(t, r)] = v;
        }
        Ok(Trial {
            t,
            chol,
            coupling: self.coupling(t, chi_col)?,
            chi_tt: chi_col[t],
            m,
            bias,
        })
    }

    fn trial_from_state(&self, t: usize, bias: BiasMode) -> Result<Trial> {
        let q: Vec<f64> = (0..=t).map(|s| self.state.q[(s, t)]).collect();
        let chi: Vec<f64> = (0..=t).map(|s| self.state.chi[(s, t)]).collect();
        self.trial(t, &q, self.state.m[t], &chi, bias)
    }

    fn pinned_bias(&self, t: usize) -> Option<f64> {
        if !self.hyper.bias_pinned_at(t) {
            return None;
        }
        let k = self.hyper.fix_bias_after.unwrap_or(0);
        Some(self.hyper.pinned_bias.unwrap_or_else(|| self.state.b[k.saturating_sub(1)]))
    }

    /// Starting point `(x, b)` for stage t.
    fn initial_guess(&self, t: usize, guess: Option<&OrderParameterState>) -> (Vec<f64>, f64) {
        let n = 2 * t + 3;
        let mut x = vec![0.0; n];
        if let Some(g) = guess.filter(|g| g.solved > t && g.capacity() > t) {
            for s in 0..=t {
                x[s] = g.q[(s, t)];
                x[t + 2 + s] = g.chi[(s, t)];
            }
            x[t + 1] = g.m[t];
            return (x, g.b[t]);
        }
        let lambda = self.hyper.lambdas[t];
        let (a, d) = (self.cfg.alpha, self.cfg.delta);
        if t == 0 {
            let mut chi = 1.0 / (lambda + 1.0);
            for _ in 0..50 {
                chi = 1.0 / (lambda + d * a / (2.0 + d * chi));
            }
            let k = 2.0 + d * chi;
            let m = chi * a * (1.0 - 2.0 * self.cfg.theta).max(0.05) / k;
            x[0] = m * m + chi * chi * a * d / (k * k);
            x[1] = m;
            x[2] = chi;
            return (x, 0.0);
        }
        let p = t - 1;
        let chi_prev = self.state.chi[(p, p)];
        let qhat_prev = self.state.qhat[(p, p)];
        let chi = 1.0 / (lambda + qhat_prev.max(0.0));
        let ratio = chi / chi_prev;
        for s in 0..t {
            x[s] = 0.5 * self.state.q[(s, p)] * ratio;
        }
        x[t] = self.state.q[(p, p)] * ratio * ratio;
        x[t + 1] = self.state.m[p] * ratio;
        x[2 * t + 2] = chi;
        (x, self.state.b[p])
    }

    /// Solve the next unsolved stage, optionally starting from another solution.
    pub fn solve_next(&mut self, guess: Option<&OrderParameterState>) -> Result<StageSolution> {
        let t = self.state.solved;
        if t >= self.hyper.stages() {
            return Err(Error::domain(format!("all {t} stages are already solved")));
        }
        self.solve_stage_inner(t, guess).map_err(|e| match e {
            Error::Convergence { .. }
            | Error::IllConditioned { .. }
            | Error::BiasSolve { .. }
            | Error::Degenerate { .. }
            | Error::AtStage { .. } => e,
            other => other.at_stage(t),
        })?;
        self.state.stage(t, &self.cfg)
    }

    /// Solve every remaining stage.
    pub fn solve_all(&mut self, guess: Option<&OrderParameterState>) -> Result<()> {
        while self.state.solved < self.hyper.stages() {
            self.solve_next(guess)?;
        }
        Ok(())
    }

    fn solve_stage_inner(&mut self, t: usize, guess: Option<&OrderParameterState>) -> Result<()> {
        self.engine.begin_stage(t)?;
        let lambda = self.hyper.lambdas[t];
        let pinned = self.pinned_bias(t);
        let (mut x, mut b) = self.initial_guess(t, guess);
        if let Some(p) = pinned {
            b = p;
        }
        let tol = self.settings.tol;
        let mut mixer = Mixer::new(self.settings.anderson, self.settings.damping);
        let mut scale: Option<Vec<f64>> = None;
        let mut prev_res = f64::INFINITY;
        let mut last_good: Option<Vec<f64>> = None;
        let mut res = f64::INFINITY;
        let mut backtracks = 0;
        // Best residual and the iteration at which the stall window opened.
        let mut best = f64::INFINITY;
        let mut window_start = 0;

        for it in 1..=self.settings.max_iters {
            let bias = match pinned {
                Some(p) => BiasMode::Fixed(p),
                None => BiasMode::Solve { guess: b },
            };
            let trial = match self.trial(t, &x[..=t], x[t + 1], &x[t + 2..], bias) {
                Ok(tr) => tr,
                Err(e @ (Error::IllConditioned { .. } | Error::Degenerate { .. })) => {
                    // The mixed iterate left the feasible set; step back toward the last good point.
                    match &last_good {
                        Some(g) if backtracks < 60 => {
                            backtracks += 1;
                            for (xi, gi) in x.iter_mut().zip(g) {
                                *xi = 0.5 * (*xi + gi);
                            }
                            mixer.reset();
                            continue;
                        }
                        _ => return Err(e),
                    }
                }
                Err(e) => return Err(e),
            };
            let mo = self.engine.evaluate(&trial, false)?;
            b = mo.bias;
            let conj = conjugates_from(&self.cfg, &self.state, trial.chi_tt, &mo);
            let col = order_update(&self.state, &conj, lambda, t)?;
            let mut y = col.q.clone();
            y.push(col.m);
            y.extend_from_slice(&col.chi);

            res = self.residual(t, &x, &y);
            if !res.is_finite() {
                return Err(Error::Numerical(format!("non-finite fixed-point residual at iteration {it}")));
            }
            if res <= tol {
                self.finalize(t, &col, &conj, b, res, it)?;
                return Ok(());
            }
            if res < 0.5 * best {
                best = res;
                window_start = it;
            } else if it - window_start > STALL_WINDOW {
                return Err(Error::Convergence {
                    stage: t,
                    iterations: it,
                    residual: res,
                });
            }
            let sc = scale.get_or_insert_with(|| self.scales(t, &y));
            if res > 1.5 * prev_res {
                mixer.slow_down();
            } else {
                mixer.speed_up();
            }
            prev_res = res;
            last_good = Some(x.clone());
            backtracks = 0;
            x = mixer.step(&x, &y, sc);
        }
        Err(Error::Convergence {
            stage: t,
            iterations: self.settings.max_iters,
            residual: res,
        })
    }

    /// Natural scale of each unknown, fixed for the duration of a stage.
    fn scales(&self, t: usize, y: &[f64]) -> Vec<f64> {
        let qtt = y[t].abs().max(f64::MIN_POSITIVE);
        let ctt = y[2 * t + 2].abs().max(f64::MIN_POSITIVE);
        let mut s = vec![0.0; 2 * t + 3];
        for r in 0..t {
            s[r] = (self.state.q[(r, r)] * qtt).sqrt();
            s[t + 2 + r] = (self.state.chi[(r, r)] * ctt).sqrt();
        }
        s[t] = qtt;
        s[t + 1] = qtt.sqrt();
        s[2 * t + 2] = ctt;
        s
    }

    fn residual(&self, t: usize, x: &[f64], y: &[f64]) -> f64 {
        let qtt = x[t].abs().max(y[t].abs()).max(f64::MIN_POSITIVE);
        let ctt = x[2 * t + 2].abs().max(y[2 * t + 2].abs()).max(f64::MIN_POSITIVE);
        let mut r: f64 = 0.0;
        for s in 0..=t {
            let (qs, cs) = if s == t { (qtt, ctt) } else { (self.state.q[(s, s)], self.state.chi[(s, s)]) };
            r = r.max((x[s] - y[s]).abs() / (qs * qtt).sqrt());
            r = r.max((x[t + 2 + s] - y[t + 2 + s]).abs() / (cs * ctt).sqrt());
        }
        r = r.max((x[t + 1] - y[t + 1]).abs() / qtt.sqrt());
        if r.is_nan() {
            f64::INFINITY
        } else {
            r
        }
    }

    fn finalize(&mut self, t: usize, col: &OrderColumn, conj: &Conjugates, b: f64, res: f64, iters: usize) -> Result<()> {
        let st = &mut self.state;
        for s in 0..=t {
            st.q[(s, t)] = col.q[s];
            st.q[(t, s)] = col.q[s];
            st.chi[(s, t)] = col.chi[s];
            st.chi[(t, s)] = col.chi[s];
            st.qhat[(s, t)] = conj.qhat[s];
            st.qhat[(t, s)] = conj.qhat[s];
            st.chihat[(s, t)] = conj.chihat[s];
            st.chihat[(t, s)] = conj.chihat[s];
            st.r[(s, t)] = col.r_col[s];
        }
        for l in 0..t {
            st.r[(t, l)] = col.r_row[l];
        }
        st.m[t] = col.m;
        st.mhat[t] = conj.mhat;
        st.b[t] = b;
        st.residual.push(res);
        st.iterations.push(iters);
        st.solved = t + 1;

        let q_col: Vec<f64> = (0..=t).map(|s| self.state.q[(s, t)]).collect();
        let row = cholesky_row(&self.chol, &q_col, self.cfg.delta, self.settings.jitter, t)?;
        for (r, v) in row.into_iter().enumerate() {
            self.chol[(t, r)] = v;
        }
        let trial = self.trial_from_state(t, BiasMode::Fixed(b))?;
        self.engine.commit(&trial)
    }

    /// Conjugates of stage t re-evaluated at the stored solution, with
    /// standard errors for sampling engines. Stage t must be the next one
    /// prepared, i.e. `t == solved - 1` after a replay of `0..t`.
    fn conjugates_at(&mut self, t: usize) -> Result<Conjugates> {
        self.engine.begin_stage(t)?;
        let trial = self.trial_from_state(t, BiasMode::Fixed(self.state.b[t]))?;
        let mo = self.engine.evaluate(&trial, true)?;
        Ok(conjugates_from(&self.cfg, &self.state, trial.chi_tt, &mo))
    }
}

/// Conjugates of stage t evaluated at the solution stored in `state`, using
/// the expectation engine of `settings`.
pub fn conjugate_update(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    state: &OrderParameterState,
    t: usize,
    settings: &SolverSettings,
) -> Result<Conjugates> {
    if t >= state.solved {
        return Err(Error::domain(format!("stage {t} has not been solved")));
    }
    let mut head = state.clone();
    head.truncate(t);
    let mut solver = Solver::resume(cfg, hyper, settings, &head)?;
    solver.state = state.resized(hyper.stages());
    solver.conjugates_at(t)
}

/// Full result of a chain solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub config: ProblemConfig,
    pub hyper: HyperSchedule,
    pub settings: SolverSettings,
    pub state: OrderParameterState,
    pub stages: Vec<StageSolution>,
    pub max_residual: f64,
    pub total_iterations: usize,
}

impl SolveReport {
    fn new(cfg: &ProblemConfig, hyper: &HyperSchedule, settings: &SolverSettings, state: OrderParameterState) -> Result<Self> {
        Ok(SolveReport {
            config: *cfg,
            hyper: hyper.clone(),
            settings: *settings,
            stages: state.stages(cfg)?,
            max_residual: state.residual.iter().copied().fold(0.0, f64::max),
            total_iterations: state.iterations.iter().sum(),
            state,
        })
    }

    pub fn final_stage(&self) -> &StageSolution {
        self.stages.last().expect("a solved chain has at least one stage")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Solve all stages of the chain.
pub fn solve(cfg: &ProblemConfig, hyper: &HyperSchedule, settings: &SolverSettings) -> Result<SolveReport> {
    solve_with_guess(cfg, hyper, settings, None)
}

/// Solve all stages, starting each stage from `guess` when it covers it.
pub fn solve_with_guess(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    settings: &SolverSettings,
    guess: Option<&OrderParameterState>,
) -> Result<SolveReport> {
    let mut solver = Solver::new(cfg, hyper, settings)?;
    solver.solve_all(guess)?;
    SolveReport::new(cfg, hyper, settings, solver.into_state())
}

/// Solve stage t given a state whose stages `0..t` are converged. Later
/// stages present in `state` are discarded.
pub fn solve_stage(
    cfg: &ProblemConfig,
    hyper: &HyperSchedule,
    state: &OrderParameterState,
    t: usize,
    settings: &SolverSettings,
) -> Result<OrderParameterState> {
    if t >= hyper.stages() {
        return Err(Error::domain(format!("stage {t} is beyond the schedule")));
    }
    if state.solved < t {
        return Err(Error::domain(format!(
            "stages 0..{t} must be solved first; only {} are",
            state.solved
        )));
    }
    let mut head = state.clone();
    head.truncate(t);
    let mut solver = Solver::resume(cfg, hyper, settings, &head)?;
    solver.solve_next(None)?;
    Ok(solver.into_state())
}
