//! Evaluation of a single configuration for each task, flattened into CSV
//! rows (one per stage) plus a few scalar summaries for heatmaps.

use serde::Serialize;

use sdreplica::hyperopt::{self, BiasSource, SearchMode, SearchSpec};
use sdreplica::linear_exact;
use sdreplica::replica::{self, Expectation};
use sdreplica::simulator;
use sdreplica::HyperSchedule;

use crate::config::{RunConfig, SweepSettings, Task};
use crate::error::CliError;

/// Outcome of one configuration.
#[derive(Debug, Clone, Default)]
pub struct Evaluated {
    /// Task-specific fields, one vector per stage.
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<(String, Option<f64>)>,
    /// Extra files written by single-point commands.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

pub const COMMON_COLUMNS: &[(&str, &str)] = &[
    ("index", "grid index, first axis varying slowest"),
    ("alpha", "sample ratio M/N"),
    ("delta", "cluster variance"),
    ("rho", "positive-class prior"),
    ("theta", "label-flip probability"),
    ("loss_family", "logistic or linear"),
    ("seed", "global seed"),
];

const SCHEDULE_COLUMNS: &[(&str, &str)] = &[
    ("lambdas", "ridge strengths of stages 0..T, `;`-separated"),
    ("betas", "inverse temperatures of stages 1..T, `;`-separated"),
    ("hard_labels", "indicator teacher labels"),
];

/// Task-specific columns with their descriptions.
pub fn task_columns(task: Task) -> Vec<(&'static str, &'static str)> {
    let mut cols: Vec<(&str, &str)> = Vec::new();
    match task {
        Task::Solve => {
            cols.extend_from_slice(SCHEDULE_COLUMNS);
            cols.extend_from_slice(&[
                ("fix_bias_after", "first stage with a frozen bias, empty if none"),
                ("pinned_bias", "explicit frozen bias value, empty if carried forward"),
                ("engine", "expectation engine used for the conjugates"),
                ("stage", "stage index t"),
                ("m", "overlap with the cluster direction"),
                ("Q", "squared weight norm per dimension"),
                ("b", "bias"),
                ("gen_error", "asymptotic generalization error"),
                ("alignment", "m / sqrt(Q)"),
                ("rescaled_bias", "b / sqrt(Q)"),
                ("residual", "final fixed-point residual of the stage"),
                ("iterations", "fixed-point iterations of the stage"),
            ]);
        }
        Task::Optimize => cols.extend_from_slice(&[
            ("mode", "search mode"),
            ("target", "stage whose error is minimized"),
            ("restarts", "quasi-random restarts"),
            ("search_seed", "seed of the restart sequence"),
            ("stage", "stage index of the optimal chain"),
            ("lambdas", "optimal ridge strengths, `;`-separated"),
            ("betas", "optimal inverse temperatures, `;`-separated"),
            ("hard_labels", "whether the optimum uses indicator labels"),
            ("pinned_bias", "frozen bias value, empty if carried forward or free"),
            ("m", "overlap at the optimum"),
            ("Q", "squared norm at the optimum"),
            ("b", "bias at the optimum"),
            ("gen_error", "generalization error at the optimum"),
            ("residual", "fixed-point residual of the stage"),
            ("objective", "optimal error of the target stage"),
            ("evaluations", "objective evaluations over all restarts"),
            ("e_star_0", "tuned single-stage error (baseline runs only)"),
            ("e_star_hard", "tuned hard-label error (logistic soft searches only)"),
            ("gain", "e_star_0 - objective"),
            ("gain_hard", "e_star_0 - e_star_hard"),
            ("ratio", "gain_hard / gain"),
        ]),
        Task::MultiStageCurve => cols.extend_from_slice(&[
            ("mode", "search mode"),
            ("t_max", "last stage of the curve"),
            ("stage", "stage index t"),
            ("tuned_error", "optimal error of a t-stage chain"),
            ("lambdas", "optimal ridge strengths, `;`-separated"),
            ("betas", "optimal inverse temperatures, `;`-separated"),
            ("hard_labels", "whether the optimum uses indicator labels"),
            ("baseline_noisy", "tuned single-stage error"),
            ("baseline_clean", "tuned single-stage error without label noise"),
            ("best_stage", "stage with the lowest tuned error"),
            ("improvement", "tuned stage-0 error minus the best tuned error"),
        ]),
        Task::Agreement => {
            cols.extend_from_slice(SCHEDULE_COLUMNS);
            cols.extend_from_slice(&[
                ("dim", "input dimension N"),
                ("samples", "training samples M"),
                ("trials", "independent datasets"),
                ("test_size", "fresh test samples per trial"),
                ("stage", "stage index t"),
                ("theory_error", "asymptotic generalization error"),
                ("sim_error", "mean test error over trials"),
                ("sim_error_sem", "standard error of sim_error"),
                ("z_error", "(sim_error - theory_error) / sim_error_sem"),
                ("theory_m", "asymptotic overlap"),
                ("sim_m", "mean empirical overlap"),
                ("sim_m_sem", "standard error of sim_m"),
                ("z_m", "standardized deviation of m"),
                ("theory_Q", "asymptotic squared norm"),
                ("sim_Q", "mean empirical squared norm"),
                ("sim_Q_sem", "standard error of sim_Q"),
                ("z_Q", "standardized deviation of Q"),
                ("theory_b", "asymptotic bias"),
                ("sim_b", "mean fitted bias"),
                ("sim_b_sem", "standard error of sim_b"),
                ("z_b", "standardized deviation of b"),
                ("ks_weights", "KS statistic of the first trial's weights"),
                ("ks_weights_critical", "1% critical value for ks_weights"),
                ("ks_preactivations", "two-sample KS statistic of training pre-activations"),
                ("ks_preactivations_critical", "1% critical value for ks_preactivations"),
                ("flagged_runs", "trials whose stage fit was ill-posed"),
            ]);
        }
        Task::LargeLambdaTrajectory => cols.extend_from_slice(&[
            ("horizon", "last stage computed"),
            ("stage", "stage index t"),
            ("gen_error", "generalization error with every lambda taken to infinity"),
            ("m_normalized", "overlap of the renormalized stage"),
            ("Q_normalized", "squared norm of the renormalized stage"),
            ("log_scale", "log of the factor removed by renormalization"),
            ("growth_rate", "m^t / m^(t-1) in unnormalized units"),
            ("q_ratio", "(1 + delta)^2 Q / m^2"),
            ("infinite_stage_error", "limit of gen_error as t grows"),
        ]),
    }
    cols
}

pub fn summary_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Solve => &["final_error"],
        Task::Optimize => &["error", "e_star_0", "e_star_hard", "gain", "gain_hard", "ratio"],
        Task::MultiStageCurve => &["improvement", "best_error", "best_stage", "baseline_clean"],
        Task::Agreement => &["max_abs_z_error", "max_abs_z"],
        Task::LargeLambdaTrajectory => &["final_error", "infinite_stage_error", "final_gap"],
    }
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e6).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";")
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn engine_name(e: Expectation) -> String {
    match e {
        Expectation::Auto => "auto".into(),
        Expectation::AffineExact => "affine_exact".into(),
        Expectation::GaussHermite { nodes } => format!("gauss_hermite({nodes})"),
        Expectation::MonteCarlo { samples, seed } => format!("monte_carlo({samples},{seed})"),
    }
}

fn mode_name(m: SearchMode) -> String {
    match m {
        SearchMode::Soft => "soft".into(),
        SearchMode::Hard => "hard".into(),
        SearchMode::BiasFixed { stage, source } => {
            let s = match source {
                BiasSource::Chain => "chain",
                BiasSource::TunedSingleStage => "tuned_single_stage",
            };
            format!("bias_fixed({stage},{s})")
        }
    }
}

fn schedule_fields(h: &HyperSchedule) -> [String; 3] {
    [list(&h.lambdas), list(&h.betas), h.hard_labels.to_string()]
}

/// Run `task` on a fully specified configuration.
pub fn evaluate(cfg: &RunConfig, task: Task, sweep: &SweepSettings, detailed: bool) -> Result<Evaluated, CliError> {
    match task {
        Task::Solve => solve(cfg, detailed),
        Task::Optimize => optimize(cfg, sweep.baseline, detailed),
        Task::MultiStageCurve => curve(cfg, detailed),
        Task::Agreement => agreement(cfg, detailed),
        Task::LargeLambdaTrajectory => trajectory(cfg, detailed),
    }
}

fn missing(what: &str) -> CliError {
    CliError::Io(format!("internal: configuration lost its [{what}] table after validation"))
}

fn solve(cfg: &RunConfig, detailed: bool) -> Result<Evaluated, CliError> {
    let hyper = cfg.schedule.as_ref().ok_or_else(|| missing("schedule"))?;
    let report = replica::solve(&cfg.problem, hyper, &cfg.solver)?;
    let engine = engine_name(cfg.solver.resolved_expectation(&cfg.problem, hyper));
    let rows = report
        .stages
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut r = schedule_fields(hyper).to_vec();
            r.extend([
                hyper.fix_bias_after.map(|k| k.to_string()).unwrap_or_default(),
                opt(hyper.pinned_bias),
                engine.clone(),
                t.to_string(),
                num(s.m),
                num(s.q),
                num(s.b),
                num(s.gen_error),
                num(s.alignment()),
                num(s.rescaled_bias()),
                num(report.state.residual[t]),
                report.state.iterations[t].to_string(),
            ]);
            r
        })
        .collect();
    let mut out = Evaluated {
        rows,
        summary: vec![("final_error".into(), Some(report.final_stage().gen_error))],
        artifacts: Vec::new(),
    };
    if detailed {
        out.artifacts.push(("report.json".into(), json(&report)?));
    }
    Ok(out)
}

fn optimize(cfg: &RunConfig, baseline: bool, detailed: bool) -> Result<Evaluated, CliError> {
    let spec = cfg.search.as_ref().ok_or_else(|| missing("search"))?;
    let result = hyperopt::optimize(&cfg.problem, spec, &cfg.solver)?;
    let e0 = if !baseline {
        None
    } else if spec.target == 0 && spec.mode == SearchMode::Soft {
        Some(result.error)
    } else {
        let mut s0: SearchSpec = spec.clone();
        s0.target = 0;
        s0.mode = SearchMode::Soft;
        s0.starts = s0.starts.iter().map(|x| x[..1].to_vec()).collect();
        Some(hyperopt::optimize(&cfg.problem, &s0, &cfg.solver)?.error)
    };
    let gain = e0.map(|e| e - result.error);
    let gain_hard = e0.zip(result.hard_error).map(|(e, h)| e - h);
    let ratio = gain.zip(gain_hard).map(|(g, h)| h / g);
    let h = &result.hyper;
    let rows = result
        .report
        .stages
        .iter()
        .enumerate()
        .map(|(t, s)| {
            vec![
                mode_name(spec.mode),
                spec.target.to_string(),
                spec.restarts.to_string(),
                spec.seed.to_string(),
                t.to_string(),
                list(&h.lambdas),
                list(&h.betas),
                h.hard_labels.to_string(),
                opt(h.pinned_bias),
                num(s.m),
                num(s.q),
                num(s.b),
                num(s.gen_error),
                num(result.report.state.residual[t]),
                num(result.error),
                result.trace.len().to_string(),
                opt(e0),
                opt(result.hard_error),
                opt(gain),
                opt(gain_hard),
                opt(ratio),
            ]
        })
        .collect();
    let mut out = Evaluated {
        rows,
        summary: vec![
            ("error".into(), Some(result.error)),
            ("e_star_0".into(), e0),
            ("e_star_hard".into(), result.hard_error),
            ("gain".into(), gain),
            ("gain_hard".into(), gain_hard),
            ("ratio".into(), ratio),
        ],
        artifacts: Vec::new(),
    };
    if detailed {
        let mut trace = Vec::new();
        hyperopt::write_trace_csv(&mut trace, &result.trace, spec)?;
        let mut timing = Vec::new();
        hyperopt::write_timing_csv(&mut timing, &result.trace)?;
        out.artifacts.push(("result.json".into(), json(&result)?));
        out.artifacts.push(("trace.csv".into(), trace));
        out.artifacts.push(("trace_timing.csv".into(), timing));
    }
    Ok(out)
}

fn curve(cfg: &RunConfig, detailed: bool) -> Result<Evaluated, CliError> {
    let spec = cfg.search.as_ref().ok_or_else(|| missing("search"))?;
    let t_max = cfg.curve.ok_or_else(|| missing("curve"))?.t_max;
    let c = hyperopt::multi_stage_curve(&cfg.problem, t_max, spec, &cfg.solver)?;
    let rows = c
        .errors
        .iter()
        .zip(&c.hypers)
        .enumerate()
        .map(|(t, (e, h))| {
            let mut r = vec![mode_name(spec.mode), t_max.to_string(), t.to_string(), num(*e)];
            r.extend(schedule_fields(h));
            r.extend([
                num(c.baseline_noisy),
                num(c.baseline_clean),
                c.best_stage.to_string(),
                num(c.improvement()),
            ]);
            r
        })
        .collect();
    let mut out = Evaluated {
        rows,
        summary: vec![
            ("improvement".into(), Some(c.improvement())),
            ("best_error".into(), Some(c.best_error())),
            ("best_stage".into(), Some(c.best_stage as f64)),
            ("baseline_clean".into(), Some(c.baseline_clean)),
        ],
        artifacts: Vec::new(),
    };
    if detailed {
        out.artifacts.push(("curve.json".into(), json(&c)?));
    }
    Ok(out)
}

fn agreement(cfg: &RunConfig, detailed: bool) -> Result<Evaluated, CliError> {
    let hyper = cfg.schedule.as_ref().ok_or_else(|| missing("schedule"))?;
    let sim = cfg.simulation.ok_or_else(|| missing("simulation"))?;
    let theory = replica::solve(&cfg.problem, hyper, &cfg.solver)?;
    let runs = simulator::run_trials(&cfg.problem, hyper, sim.dim, sim.trials, cfg.seed, sim.test_size)?;
    let rep = simulator::compare_to_theory(&runs, &cfg.problem, hyper, &theory.state, cfg.seed)?;
    let samples = runs[0].samples;
    let rows = rep
        .stages
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut r = schedule_fields(hyper).to_vec();
            r.extend([
                sim.dim.to_string(),
                samples.to_string(),
                sim.trials.to_string(),
                sim.test_size.to_string(),
                t.to_string(),
            ]);
            for a in [s.test_error, s.m, s.q, s.b] {
                r.extend([num(a.theory), num(a.mean), num(a.sem), num(a.z)]);
            }
            r.extend([
                num(rep.ks_weights[t].statistic),
                num(rep.ks_weights[t].critical_1pct),
                num(rep.ks_preactivations[t].statistic),
                num(rep.ks_preactivations[t].critical_1pct),
                runs.iter().filter(|x| x.flagged[t]).count().to_string(),
            ]);
            r
        })
        .collect();
    let max_z_err = rep.stages.iter().map(|s| s.test_error.z.abs()).fold(0.0, f64::max);
    let mut out = Evaluated {
        rows,
        summary: vec![
            ("max_abs_z_error".into(), Some(max_z_err)),
            ("max_abs_z".into(), Some(rep.max_abs_z())),
        ],
        artifacts: Vec::new(),
    };
    if detailed {
        let mut csv = Vec::new();
        simulator::write_runs_csv(&mut csv, &runs)?;
        out.artifacts.push(("runs.csv".into(), csv));
        out.artifacts.push(("agreement.json".into(), json(&rep)?));
        out.artifacts.push(("ensemble.json".into(), json(&simulator::summarize(&runs)?)?));
        out.artifacts.push(("theory.json".into(), json(&theory)?));
    }
    Ok(out)
}

fn trajectory(cfg: &RunConfig, detailed: bool) -> Result<Evaluated, CliError> {
    let horizon = cfg.horizon();
    let tr = linear_exact::large_lambda_trajectory(&cfg.problem, horizon)?;
    let limit = linear_exact::infinite_stage_error(&cfg.problem)?;
    let rows = (0..=horizon)
        .map(|t| {
            vec![
                horizon.to_string(),
                t.to_string(),
                num(tr.gen_error[t]),
                num(tr.m[t]),
                num(tr.q[(t, t)]),
                num(tr.log_scale[t]),
                if t == 0 { String::new() } else { num(tr.growth_rate(t)) },
                num(tr.q_ratio(t)),
                num(limit),
            ]
        })
        .collect();
    let last = tr.gen_error[horizon];
    let mut out = Evaluated {
        rows,
        summary: vec![
            ("final_error".into(), Some(last)),
            ("infinite_stage_error".into(), Some(limit)),
            ("final_gap".into(), Some((last - limit).abs())),
        ],
        artifacts: Vec::new(),
    };
    if detailed {
        out.artifacts.push(("trajectory.json".into(), json(&tr)?));
    }
    Ok(out)
}
