//! Grid runner. Points are evaluated concurrently; every output file is
//! written in grid-index order so reruns are byte-identical. Finished points
//! are appended to a journal so an interrupted sweep can resume.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Axis, RunConfig, SweepSettings, Task};
use crate::error::CliError;
use crate::tasks::{self, num, Evaluated, COMMON_COLUMNS};

pub const RESULTS_FILE: &str = "results.csv";
pub const SCHEMA_FILE: &str = "results.schema.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const TIMING_FILE: &str = "timing.csv";

/// Everything needed to run a grid.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub config: RunConfig,
    /// Original TOML text, used to attach line numbers to diagnostics.
    pub source: Option<String>,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub points: usize,
    pub failed: usize,
    /// Points skipped because the journal already held them.
    pub resumed: usize,
    pub files: Vec<PathBuf>,
}

/// Provenance record written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub library_version: String,
    pub task: Task,
    /// SHA-256 of the normalized configuration in `config.toml`.
    pub config_sha256: String,
    pub seed: u64,
    pub axes: Vec<Axis>,
    pub grid_points: usize,
    pub failed_points: usize,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalHeader {
    config_sha256: String,
    task: Task,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PointRecord {
    index: usize,
    rows: Vec<Vec<String>>,
    summary: Vec<(String, Option<f64>)>,
    error: Option<String>,
    wall_seconds: f64,
}

/// Cartesian product of the axis values, first axis slowest.
pub fn grid(sw: &SweepSettings) -> Vec<Vec<f64>> {
    let mut points = vec![Vec::new()];
    for ax in &sw.axes {
        let vals = ax.values();
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    points
}

pub fn config_hash(normalized: &str) -> String {
    let digest = Sha256::digest(normalized.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run the `[sweep]` table of the configuration.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome, CliError> {
    let sw = spec.config.validate_sweep(spec.source.as_deref())?.clone();
    run_grid(spec, &sw, false)
}

/// Run `task` once on the fixed configuration and keep its detailed artifacts.
pub fn run_single(spec: &SweepSpec, task: Task) -> Result<SweepOutcome, CliError> {
    spec.config.validate(task, spec.source.as_deref())?;
    let sw = SweepSettings {
        task,
        axes: Vec::new(),
        failure_threshold: 0.0,
        jobs: None,
        baseline: spec.config.sweep.as_ref().is_some_and(|s| s.baseline),
    };
    run_grid(spec, &sw, true)
}

fn run_grid(spec: &SweepSpec, sw: &SweepSettings, detailed: bool) -> Result<SweepOutcome, CliError> {
    let task = sw.task;
    let mut normalized_cfg = spec.config.clone();
    if let Some(s) = normalized_cfg.sweep.as_mut() {
        // Parallelism does not change any output.
        s.jobs = None;
    }
    let normalized = normalized_cfg.to_toml()?;
    let hash = config_hash(&format!("task = \"{}\"\n{normalized}", task.name()));
    let points = grid(sw);
    fs::create_dir_all(&spec.out).map_err(|e| CliError::Io(format!("{}: {e}", spec.out.display())))?;
    probe_writable(&spec.out)?;

    let journal_path = spec.out.join(JOURNAL_FILE);
    let mut done: BTreeMap<usize, PointRecord> = BTreeMap::new();
    if spec.resume && journal_path.exists() {
        done = read_journal(&journal_path, &hash, task)?;
        log::info!("resuming: {} of {} points already done", done.len(), points.len());
    } else {
        let mut f = File::create(&journal_path)?;
        let header = JournalHeader {
            config_sha256: hash.clone(),
            task,
        };
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
    }
    let resumed = done.len();

    let journal = Mutex::new(OpenOptions::new().append(true).open(&journal_path)?);
    let pending: Vec<usize> = (0..points.len()).filter(|i| !done.contains_key(i)).collect();
    let jobs = spec
        .jobs
        .or(sw.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Io(format!("cannot start worker pool: {e}")))?;
    let total = points.len();
    let fresh: Vec<(PointRecord, Vec<(String, Vec<u8>)>)> = pool.install(|| {
        pending
            .par_iter()
            .map(|&index| {
                let start = Instant::now();
                let (mut rec, artifacts) = evaluate_point(&spec.config, sw, index, &points[index], detailed);
                rec.wall_seconds = start.elapsed().as_secs_f64();
                match &rec.error {
                    Some(e) => log::warn!("point {index}/{total} failed: {e}"),
                    None => log::info!("point {index}/{total} done in {:.2}s", rec.wall_seconds),
                }
                if let Ok(line) = serde_json::to_string(&rec) {
                    let mut j = journal.lock().unwrap_or_else(|p| p.into_inner());
                    if let Err(e) = writeln!(j, "{line}").and_then(|_| j.flush()) {
                        log::warn!("cannot append to the journal: {e}");
                    }
                }
                (rec, artifacts)
            })
            .collect()
    });

    let mut artifacts = Vec::new();
    for (rec, a) in fresh {
        artifacts.extend(a);
        done.insert(rec.index, rec);
    }
    let records: Vec<&PointRecord> = done.values().collect();
    let failed = records.iter().filter(|r| r.error.is_some()).count();

    let mut files = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| put(&spec.out, &mut files, name, bytes);
    write(CONFIG_FILE, normalized.as_bytes())?;
    write(RESULTS_FILE, &results_csv(sw, &spec.config, &points, &records)?)?;
    write(SCHEMA_FILE, &schema_json(task)?)?;
    write(TIMING_FILE, &timing_csv(&records)?)?;
    if sw.axes.len() == 2 {
        for name in tasks::summary_names(task) {
            if records.iter().any(|r| lookup(r, name).is_some()) {
                write(&format!("matrix_{name}.csv"), &matrix_csv(sw, &records, name)?)?;
            }
        }
    }
    for (name, bytes) in &artifacts {
        write(name, bytes)?;
    }
    drop(write);
    let mut outputs: Vec<String> = files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    outputs.push(MANIFEST_FILE.into());
    let manifest = Manifest {
        tool: "sdreplica".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        library_version: sdreplica::VERSION.into(),
        task,
        config_sha256: hash,
        seed: spec.config.seed,
        axes: sw.axes.clone(),
        grid_points: total,
        failed_points: failed,
        outputs,
    };
    let mut m = serde_json::to_vec_pretty(&manifest)?;
    m.push(b'\n');
    put(&spec.out, &mut files, MANIFEST_FILE, &m)?;

    let outcome = SweepOutcome {
        points: total,
        failed,
        resumed,
        files,
    };
    let threshold = sw.failure_threshold;
    if failed > 0 && failed as f64 > threshold * total as f64 {
        return Err(CliError::TooManyFailures { failed, total, threshold });
    }
    Ok(outcome)
}

fn put(dir: &Path, files: &mut Vec<PathBuf>, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    files.push(p);
    Ok(())
}

fn probe_writable(dir: &Path) -> Result<(), CliError> {
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| CliError::Io(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn evaluate_point(
    base: &RunConfig,
    sw: &SweepSettings,
    index: usize,
    values: &[f64],
    detailed: bool,
) -> (PointRecord, Vec<(String, Vec<u8>)>) {
    let result = base
        .at_point(sw, values)
        .map_err(CliError::Io)
        .and_then(|cfg| tasks::evaluate(&cfg, sw.task, sw, detailed));
    let (ev, error) = match result {
        Ok(ev) => (ev, None),
        Err(e) => (Evaluated::default(), Some(e.to_string())),
    };
    let rec = PointRecord {
        index,
        rows: ev.rows,
        summary: ev.summary,
        error,
        wall_seconds: 0.0,
    };
    (rec, ev.artifacts)
}

fn read_journal(path: &Path, hash: &str, task: Task) -> Result<BTreeMap<usize, PointRecord>, CliError> {
    let f = BufReader::new(File::open(path)?);
    let mut lines = f.lines();
    let header: JournalHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Ok(BTreeMap::new()),
    };
    if header.config_sha256 != hash || header.task != task {
        return Err(CliError::Io(format!(
            "{} was written for a different configuration; rerun without --resume",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for line in lines {
        let line = line?;
        // A crash can leave a truncated last line; that point is simply redone.
        match serde_json::from_str::<PointRecord>(&line) {
            Ok(r) => {
                out.insert(r.index, r);
            }
            Err(e) => log::warn!("ignoring unreadable journal line: {e}"),
        }
    }
    Ok(out)
}

fn input_fields(cfg: &RunConfig, index: usize) -> Vec<String> {
    let p = &cfg.problem;
    vec![
        index.to_string(),
        num(p.alpha),
        num(p.delta),
        num(p.rho),
        num(p.theta),
        p.loss_family.to_string(),
        cfg.seed.to_string(),
    ]
}

fn results_csv(sw: &SweepSettings, base: &RunConfig, points: &[Vec<f64>], records: &[&PointRecord]) -> Result<Vec<u8>, CliError> {
    let task_cols = tasks::task_columns(sw.task);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = COMMON_COLUMNS
        .iter()
        .chain(task_cols.iter())
        .map(|c| c.0)
        .chain(["error"])
        .collect();
    w.write_record(&header)?;
    for r in records {
        let cfg = base.at_point(sw, &points[r.index]).unwrap_or_else(|_| base.clone());
        let inputs = input_fields(&cfg, r.index);
        if r.rows.is_empty() {
            let mut row = inputs.clone();
            row.extend(std::iter::repeat_n(String::new(), task_cols.len()));
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
        for fields in &r.rows {
            let mut row = inputs.clone();
            row.extend(fields.iter().cloned());
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn timing_csv(records: &[&PointRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "wall_seconds"])?;
    for r in records {
        w.write_record([r.index.to_string(), format!("{:.6}", r.wall_seconds)])?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn lookup(r: &PointRecord, name: &str) -> Option<f64> {
    r.summary.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
}

/// Summary value on the grid of a two-axis sweep: rows follow the first
/// axis, columns the second.
fn matrix_csv(sw: &SweepSettings, records: &[&PointRecord], name: &str) -> Result<Vec<u8>, CliError> {
    let rows = sw.axes[0].values();
    let cols = sw.axes[1].values();
    let by_index: BTreeMap<usize, &PointRecord> = records.iter().map(|r| (r.index, *r)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![format!("{}\\{}", sw.axes[0].name, sw.axes[1].name)];
    header.extend(cols.iter().map(|v| num(*v)));
    w.write_record(&header)?;
    for (i, rv) in rows.iter().enumerate() {
        let mut row = vec![num(*rv)];
        for j in 0..cols.len() {
            let v = by_index.get(&(i * cols.len() + j)).and_then(|r| lookup(r, name));
            row.push(v.map(num).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Serialize)]
struct Column {
    name: &'static str,
    description: &'static str,
}

#[derive(Serialize)]
struct Schema {
    task: Task,
    file: &'static str,
    columns: Vec<Column>,
    matrices: Vec<String>,
    timing_file: &'static str,
}

pub fn schema_json(task: Task) -> Result<Vec<u8>, CliError> {
    let columns = COMMON_COLUMNS
        .iter()
        .copied()
        .chain(tasks::task_columns(task))
        .chain([("error", "failure message, empty on success")])
        .map(|(name, description)| Column { name, description })
        .collect();
    let schema = Schema {
        task,
        file: RESULTS_FILE,
        columns,
        matrices: tasks::summary_names(task).iter().map(|n| format!("matrix_{n}.csv")).collect(),
        timing_file: TIMING_FILE,
    };
    let mut s = serde_json::to_vec_pretty(&schema)?;
    s.push(b'\n');
    Ok(s)
}
