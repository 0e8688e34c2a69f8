//! On-disk run configuration (TOML) and its validation.
//!
//! A file holds one fixed problem plus whichever task sections the
//! subcommand needs. Sweeps add a `[sweep]` table naming the axes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sdreplica::hyperopt::SearchSpec;
use sdreplica::replica::SolverSettings;
use sdreplica::simulator::DEFAULT_TEST_SIZE;
use sdreplica::{HyperSchedule, LossFamily, ProblemConfig};

use crate::error::{CliError, Diagnostic};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Global seed: simulation trials and the search restarts derive from it.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<HyperSchedule>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<CurveSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSettings {
    /// Last stage of the tuned curve.
    pub t_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    /// Input dimension N; the sample count is round(alpha * N).
    pub dim: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_trials() -> usize {
    20
}

fn default_test_size() -> usize {
    DEFAULT_TEST_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySettings {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    50
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        TrajectorySettings {
            horizon: default_horizon(),
        }
    }
}

/// What every grid point computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Solve,
    Optimize,
    MultiStageCurve,
    Agreement,
    LargeLambdaTrajectory,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Solve => "solve",
            Task::Optimize => "optimize",
            Task::MultiStageCurve => "multi_stage_curve",
            Task::Agreement => "agreement",
            Task::LargeLambdaTrajectory => "large_lambda_trajectory",
        }
    }

    pub const ALL: [Task; 5] = [
        Task::Solve,
        Task::Optimize,
        Task::MultiStageCurve,
        Task::Agreement,
        Task::LargeLambdaTrajectory,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    #[serde(default)]
    pub scale: Scale,
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let n = (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                let u = i as f64 / n;
                match self.scale {
                    Scale::Linear => self.min + u * (self.max - self.min),
                    Scale::Log => (self.min.ln() + u * (self.max.ln() - self.min.ln())).exp(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub task: Task,
    /// Slowest-varying axis first. No axes means a single point.
    #[serde(default)]
    pub axes: Vec<Axis>,
    /// Largest tolerated fraction of failed grid points.
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
    /// Worker threads; the `--jobs` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// For `optimize`: also tune the single-stage model and report the gains.
    #[serde(default)]
    pub baseline: bool,
}

fn default_failure_threshold() -> f64 {
    0.02
}

/// Parameter that a sweep axis may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Alpha,
    Delta,
    Rho,
    Theta,
    Lambda(usize),
    Beta(usize),
    PinnedBias,
    Target,
    TMax,
    Horizon,
    Dim,
}

impl Param {
    pub fn parse(name: &str) -> Option<Param> {
        let indexed = |prefix: &str| name.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok());
        Some(match name {
            "alpha" => Param::Alpha,
            "delta" => Param::Delta,
            "rho" => Param::Rho,
            "theta" => Param::Theta,
            "pinned_bias" => Param::PinnedBias,
            "target" => Param::Target,
            "t_max" => Param::TMax,
            "horizon" => Param::Horizon,
            "dim" => Param::Dim,
            _ => {
                if let Some(t) = indexed("lambda") {
                    Param::Lambda(t)
                } else {
                    let t = indexed("beta").filter(|&t| t >= 1)?;
                    Param::Beta(t)
                }
            }
        })
    }

    fn integral(self) -> bool {
        matches!(self, Param::Target | Param::TMax | Param::Horizon | Param::Dim)
    }
}

pub const PARAM_NAMES: &str =
    "alpha, delta, rho, theta, lambda<t>, beta<t> (t >= 1), pinned_bias, target, t_max, horizon, dim";

impl RunConfig {
    pub fn from_toml(src: &str) -> Result<RunConfig, CliError> {
        toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of(src, s.start));
            CliError::Config(vec![Diagnostic {
                line,
                message: e.message().to_string(),
            }])
        })
    }

    pub fn load(path: &Path) -> Result<(RunConfig, String), CliError> {
        let src = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig::from_toml(&src)?;
        Ok((cfg, src))
    }

    /// Fully defaulted TOML rendering.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Io(format!("cannot render config: {e}")))
    }

    /// Apply `--seed`: the global seed and the search seed both follow it.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = self.search.as_mut() {
            s.seed = seed;
        }
    }

    pub fn horizon(&self) -> usize {
        self.trajectory.unwrap_or_default().horizon
    }

    /// Copy with one swept parameter replaced.
    pub fn with_param(&self, p: Param, v: f64) -> Result<RunConfig, String> {
        let mut c = self.clone();
        if p.integral() && (v < 0.0 || v.fract() != 0.0) {
            return Err(format!("{p:?} must be a nonnegative integer, got {v}"));
        }
        let need_schedule = |c: &mut RunConfig| -> Result<(), String> {
            if c.schedule.is_none() {
                return Err("sweeping a schedule entry needs a [schedule] table".into());
            }
            Ok(())
        };
        match p {
            Param::Alpha => c.problem.alpha = v,
            Param::Delta => c.problem.delta = v,
            Param::Rho => c.problem.rho = v,
            Param::Theta => c.problem.theta = v,
            Param::Lambda(t) => {
                need_schedule(&mut c)?;
                let s = c.schedule.as_mut().unwrap();
                match s.lambdas.get_mut(t) {
                    Some(l) => *l = v,
                    None => return Err(format!("lambda{t} is beyond the schedule")),
                }
            }
            Param::Beta(t) => {
                need_schedule(&mut c)?;
                let s = c.schedule.as_mut().unwrap();
                match s.betas.get_mut(t - 1) {
                    Some(b) => *b = v,
                    None => return Err(format!("beta{t} is beyond the schedule")),
                }
            }
            Param::PinnedBias => {
                need_schedule(&mut c)?;
                c.schedule.as_mut().unwrap().pinned_bias = Some(v);
            }
            Param::Target => match c.search.as_mut() {
                Some(s) => s.target = v as usize,
                None => return Err("sweeping target needs a [search] table".into()),
            },
            Param::TMax => match c.curve.as_mut() {
                Some(s) => s.t_max = v as usize,
                None => return Err("sweeping t_max needs a [curve] table".into()),
            },
            Param::Horizon => {
                let mut t = c.trajectory.unwrap_or_default();
                t.horizon = v as usize;
                c.trajectory = Some(t);
            }
            Param::Dim => match c.simulation.as_mut() {
                Some(s) => s.dim = v as usize,
                None => return Err("sweeping dim needs a [simulation] table".into()),
            },
        }
        Ok(c)
    }

    /// Check everything `task` will read. Diagnostics point at the offending
    /// table or key in `src` when it is available.
    pub fn validate(&self, task: Task, src: Option<&str>) -> Result<(), CliError> {
        let mut diags = Vec::new();
        let mut push = |table: &str, key: Option<&str>, message: String| {
            let line = src.and_then(|s| locate(s, table, key));
            diags.push(Diagnostic { line, message });
        };
        if self.schema_version != SCHEMA_VERSION {
            push(
                "",
                Some("schema_version"),
                format!(
                    "schema_version {} is not supported; this build reads version {SCHEMA_VERSION}",
                    self.schema_version
                ),
            );
        }
        if let Err(e) = self.problem.validate() {
            let key = ["alpha", "delta", "rho", "theta"].into_iter().find(|k| e.to_string().contains(k));
            push("problem", key, e.to_string());
        }
        if let Err(e) = self.solver.validate() {
            push("solver", None, e.to_string());
        }
        let family = self.problem.loss_family;
        let schedule = |push: &mut dyn FnMut(&str, Option<&str>, String)| match &self.schedule {
            None => push("", None, format!("task `{}` needs a [schedule] table", task.name())),
            Some(h) => {
                if let Err(e) = h.validate(family) {
                    let msg = e.to_string();
                    let key = ["fix_bias_after", "pinned_bias", "lambda", "beta"]
                        .into_iter()
                        .find(|k| msg.contains(k))
                        .map(|k| match k {
                            "lambda" => "lambdas",
                            "beta" => "betas",
                            k => k,
                        });
                    push("schedule", key, msg);
                }
            }
        };
        let search = |push: &mut dyn FnMut(&str, Option<&str>, String)| match &self.search {
            None => push("", None, format!("task `{}` needs a [search] table", task.name())),
            Some(s) => {
                if let Err(e) = s.validate(family) {
                    push("search", None, e.to_string());
                }
            }
        };
        match task {
            Task::Solve => schedule(&mut push),
            Task::Optimize => search(&mut push),
            Task::MultiStageCurve => {
                search(&mut push);
                match self.curve {
                    None => push("", None, "task `multi_stage_curve` needs a [curve] table".into()),
                    Some(c) if c.t_max < 1 => push("curve", Some("t_max"), "t_max must be at least 1".into()),
                    Some(_) => {}
                }
            }
            Task::Agreement => {
                schedule(&mut push);
                match self.simulation {
                    None => push("", None, "task `agreement` needs a [simulation] table".into()),
                    Some(s) => {
                        if s.dim == 0 {
                            push("simulation", Some("dim"), "dim must be positive".into());
                        }
                        if s.trials < 2 {
                            push("simulation", Some("trials"), "at least 2 trials are needed for error bars".into());
                        }
                        if s.test_size == 0 {
                            push("simulation", Some("test_size"), "test_size must be positive".into());
                        }
                    }
                }
            }
            Task::LargeLambdaTrajectory => {
                if family != LossFamily::Linear || (self.problem.rho - 0.5).abs() > 1e-12 {
                    push(
                        "problem",
                        None,
                        "large_lambda_trajectory needs loss_family = \"linear\" and rho = 0.5".into(),
                    );
                }
                if self.horizon() < 1 {
                    push("trajectory", Some("horizon"), "horizon must be at least 1".into());
                }
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(diags))
        }
    }

    /// Validate the `[sweep]` table and every grid point it spans.
    pub fn validate_sweep(&self, src: Option<&str>) -> Result<&SweepSettings, CliError> {
        let Some(sw) = &self.sweep else {
            return Err(CliError::Config(vec![Diagnostic {
                line: None,
                message: "the sweep command needs a [sweep] table".into(),
            }]));
        };
        let mut diags = Vec::new();
        let line = src.and_then(|s| locate(s, "sweep", None));
        for (k, ax) in sw.axes.iter().enumerate() {
            let at = src.and_then(|s| locate_nth(s, "[[sweep.axes]]", k)).or(line);
            if Param::parse(&ax.name).is_none() {
                diags.push(Diagnostic {
                    line: at,
                    message: format!("unknown sweep parameter `{}`; expected one of {PARAM_NAMES}", ax.name),
                });
            }
            if ax.points == 0 {
                diags.push(Diagnostic {
                    line: at,
                    message: format!("axis `{}` needs at least one point", ax.name),
                });
            }
            if !(ax.min.is_finite() && ax.max.is_finite()) || (ax.scale == Scale::Log && !(ax.min > 0.0 && ax.max > 0.0)) {
                diags.push(Diagnostic {
                    line: at,
                    message: format!("axis `{}` has an invalid range [{}, {}]", ax.name, ax.min, ax.max),
                });
            }
        }
        if !(0.0..=1.0).contains(&sw.failure_threshold) {
            diags.push(Diagnostic {
                line,
                message: "failure_threshold must lie in [0, 1]".into(),
            });
        }
        if sw.jobs == Some(0) {
            diags.push(Diagnostic {
                line,
                message: "jobs must be at least 1".into(),
            });
        }
        if !diags.is_empty() {
            return Err(CliError::Config(diags));
        }
        self.validate(sw.task, src)?;
        for (index, point) in crate::sweep::grid(sw).iter().enumerate() {
            let cfg = self.at_point(sw, point).map_err(|m| {
                CliError::Config(vec![Diagnostic {
                    line,
                    message: format!("grid point {index}: {m}"),
                }])
            })?;
            cfg.validate(sw.task, None).map_err(|e| match e {
                CliError::Config(d) => CliError::Config(
                    d.into_iter()
                        .map(|x| Diagnostic {
                            line: x.line.or(line),
                            message: format!("grid point {index}: {}", x.message),
                        })
                        .collect(),
                ),
                e => e,
            })?;
        }
        Ok(sw)
    }

    /// Configuration of one grid point.
    pub fn at_point(&self, sw: &SweepSettings, values: &[f64]) -> Result<RunConfig, String> {
        let mut c = self.clone();
        for (ax, &v) in sw.axes.iter().zip(values) {
            let p = Param::parse(&ax.name).ok_or_else(|| format!("unknown parameter `{}`", ax.name))?;
            c = c.with_param(p, v)?;
        }
        Ok(c)
    }
}

/// One-based line of byte offset `pos`.
fn line_of(src: &str, pos: usize) -> usize {
    src[..pos.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of `key` inside `[table]` (the root table when empty), falling back
/// to the table header.
fn locate(src: &str, table: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table {
                header = Some(i + 1);
            }
            continue;
        }
        if current == table {
            if let Some(k) = key {
                let name = line.split('=').next().unwrap_or("").trim();
                if name == k {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

fn locate_nth(src: &str, header: &str, n: usize) -> Option<usize> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| l.trim() == header)
        .nth(n)
        .map(|(i, _)| i + 1)
}
