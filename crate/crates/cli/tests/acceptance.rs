//! Acceptance run: one PASS/FAIL line per criterion. The process exits with
//! a nonzero status when any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use sdreplica::hyperopt::{multi_stage_curve, optimize, SearchMode, SearchSpec};
use sdreplica::linear_exact::{e0_e1_large_lambda, infinite_stage_error, large_lambda_trajectory};
use sdreplica::replica::{forward_path, solve, OrderParameterState, SolverSettings};
use sdreplica::simulator::{compare_to_theory, run_trials, DEFAULT_TEST_SIZE};
use sdreplica::{HyperSchedule, LossFamily, ProblemConfig};
use sdreplica_cli::{run_sweep, RunConfig, SweepSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Result<Outcome, String>;

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome, String> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sdreplica-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn sweep_config(name: &str, out: &Path) -> Result<SweepSpec, String> {
    let (config, src) = RunConfig::load(&root().join("configs").join(name)).map_err(err)?;
    Ok(SweepSpec {
        config,
        source: Some(src),
        out: out.to_path_buf(),
        jobs: None,
        resume: false,
    })
}

/// Axis values and summary matrix written by a two-axis sweep.
fn read_matrix(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<Option<f64>>>), String> {
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    let cols: Vec<f64> = rdr.headers().map_err(err)?.iter().skip(1).map(|v| v.parse().unwrap()).collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(err)?;
        rows.push(rec[0].parse().map_err(err)?);
        cells.push(rec.iter().skip(1).map(|v| v.parse().ok()).collect());
    }
    Ok((rows, cols, cells))
}

fn appendix_schedule() -> HyperSchedule {
    HyperSchedule::new(vec![1.5, 0.5, 2.0, 1.0], vec![0.8, 1.2, 1.0])
}

fn c1_agreement() -> Result<Outcome, String> {
    let hyper = appendix_schedule();
    let mut pass = true;
    let mut parts = Vec::new();
    for family in [LossFamily::Linear, LossFamily::Logistic] {
        let cfg = ProblemConfig::new(3.0, 0.6, 0.4, 0.2, family).map_err(err)?;
        let theory = solve(&cfg, &hyper, &SolverSettings::default()).map_err(err)?;
        let runs = run_trials(&cfg, &hyper, 1000, 20, 7, DEFAULT_TEST_SIZE).map_err(err)?;
        let rep = compare_to_theory(&runs, &cfg, &hyper, &theory.state, 7).map_err(err)?;
        let zs: Vec<f64> = rep.stages.iter().map(|s| s.test_error.z).collect();
        let worst = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
        pass &= worst <= 3.0;
        parts.push(format!(
            "{family}: z = [{}]",
            zs.iter().map(|z| format!("{z:+.2}")).collect::<Vec<_>>().join(", ")
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c2_closed_form() -> Result<Outcome, String> {
    let hyper = HyperSchedule::unit_betas(vec![1e6, 1e6]);
    let mut worst: f64 = 0.0;
    for alpha in [0.5, 1.0, 2.0, 4.0, 8.0] {
        for theta in [0.0, 0.1, 0.2, 0.3, 0.4] {
            let cfg = ProblemConfig::new(alpha, 1.0, 0.5, theta, LossFamily::Linear).map_err(err)?;
            let (e0, e1) = e0_e1_large_lambda(&cfg).map_err(err)?;
            let rep = solve(&cfg, &hyper, &SolverSettings::default()).map_err(err)?;
            worst = worst.max((rep.stages[0].gen_error - e0).abs());
            worst = worst.max((rep.stages[1].gen_error - e1).abs());
        }
    }
    outcome(worst <= 1e-3, format!("max |solver - closed form| = {worst:.2e} over 25 points (tol 1e-3)"))
}

fn c3_phase_transition() -> Result<Outcome, String> {
    let mut pass = true;
    let mut parts = Vec::new();
    let points = [
        (0.5, 1.0, "collapse"),
        (1.0, 2.0, "collapse"),
        (0.1, 1.0, "collapse"),
        (2.0, 1.0, "learning"),
        (4.0, 1.0, "learning"),
        (2.0, 0.5, "learning"),
    ];
    for (alpha, delta, phase) in points {
        let cfg = ProblemConfig::new(alpha, delta, 0.5, 0.3, LossFamily::Linear).map_err(err)?;
        let traj = large_lambda_trajectory(&cfg, 50).map_err(err)?;
        let want = infinite_stage_error(&cfg).map_err(err)?;
        let got = traj.gen_error[50];
        let ok = (got - want).abs() <= 0.01;
        pass &= ok;
        parts.push(format!("{phase} ({alpha}, {delta}): E50 = {got:.4} vs {want:.4}{}", if ok { "" } else { " x" }));
    }

    let out = scratch("phase");
    run_sweep(&sweep_config("phase_diagram.toml", &out)?).map_err(err)?;
    let (deltas, alphas, cells) = read_matrix(&out.join("matrix_infinite_stage_error.csv"))?;
    let step = alphas[1] - alphas[0];
    let mut misplaced = 0;
    let mut checked = 0;
    for (i, d) in deltas.iter().enumerate() {
        let edge = d * d;
        if edge <= alphas[0] || edge >= alphas[alphas.len() - 1] {
            continue;
        }
        checked += 1;
        let first_learning = cells[i].iter().position(|v| v.is_some_and(|v| v < 0.5 - 1e-6));
        match first_learning {
            Some(j) if (alphas[j] - edge).abs() <= step => {}
            _ => misplaced += 1,
        }
    }
    let _ = fs::remove_dir_all(&out);
    pass &= misplaced == 0 && checked > 0;
    parts.push(format!("40x40 boundary: {misplaced} of {checked} rows off by more than one cell"));
    outcome(pass, parts.join("; "))
}

fn random_config(rng: &mut ChaCha8Rng, rho: f64, family: LossFamily) -> ProblemConfig {
    let alpha = 10f64.powf(rng.random_range(-0.5..0.7));
    let delta = rng.random_range(0.2..1.5);
    let theta = rng.random_range(0.0..0.4);
    ProblemConfig::new(alpha, delta, rho, theta, family).unwrap()
}

fn c4_balanced_bias() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for family in [LossFamily::Linear, LossFamily::Logistic] {
        for _ in 0..10 {
            let cfg = random_config(&mut rng, 0.5, family);
            let lambdas: Vec<f64> = (0..3).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
            let betas: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..2.0)).collect();
            let rep = solve(&cfg, &HyperSchedule::new(lambdas, betas), &SolverSettings::default()).map_err(err)?;
            worst = rep.stages.iter().fold(worst, |w, s| w.max(s.b.abs()));
        }
    }
    outcome(worst <= 1e-6, format!("max |b^t| = {worst:.2e} over 20 three-stage chains (tol 1e-6)"))
}

fn draw_fields(rng: &mut ChaCha8Rng, state: &OrderParameterState, delta: f64, n: usize) -> Vec<f64> {
    let c = nalgebra::DMatrix::from_fn(n, n, |i, j| delta * state.q[(i, j)]);
    let l = c.cholesky().expect("field covariance is positive definite").l();
    let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n).map(|i| (0..=i).map(|j| l[(i, j)] * g[j]).sum()).collect()
}

fn c5_derivative_table() -> Result<Outcome, String> {
    let cfg = ProblemConfig::new(3.0, 0.6, 0.4, 0.2, LossFamily::Logistic).map_err(err)?;
    let hyper = HyperSchedule::new(vec![1.5, 0.5, 2.0, 1.0, 0.8], vec![0.8, 1.2, 1.0, 1.1]);
    let rep = solve(&cfg, &hyper, &SolverSettings::default()).map_err(err)?;
    let joint = cfg.label_joint();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-6;
    let n = hyper.stages();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let xi = draw_fields(&mut rng, &rep.state, cfg.delta, n);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let (mut y, mut yt) = (1u8, 1u8);
        for (cy, cyt, p) in joint.cases() {
            acc += p;
            if u < acc {
                (y, yt) = (cy, cyt);
                break;
            }
        }
        let p = forward_path(&cfg, &hyper, &rep.state, &xi, y, yt).map_err(err)?;
        for s in 0..n {
            let mut up = xi.clone();
            up[s] += eps;
            let mut dn = xi.clone();
            dn[s] -= eps;
            let pu = forward_path(&cfg, &hyper, &rep.state, &up, y, yt).map_err(err)?;
            let pd = forward_path(&cfg, &hyper, &rep.state, &dn, y, yt).map_err(err)?;
            for r in s..n {
                let fd = (pu.zstar[r] - pd.zstar[r]) / (2.0 * eps);
                let g = p.g[(s, r)];
                worst = worst.max((fd - g).abs() / g.abs().max(1e-8));
            }
        }
    }
    outcome(worst <= 1e-4, format!("max relative |G - finite difference| = {worst:.2e} on 100 paths, T = 4 (tol 1e-4)"))
}

fn c6_soft_hard_and_noiseless() -> Result<Outcome, String> {
    let mut parts = Vec::new();
    let soft_hard = scratch("soft-hard");
    run_sweep(&sweep_config("soft_vs_hard.toml", &soft_hard)?).map_err(err)?;
    let (_, _, gain) = read_matrix(&soft_hard.join("matrix_gain.csv"))?;
    let (_, _, gain_hard) = read_matrix(&soft_hard.join("matrix_gain_hard.csv"))?;
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut counted = 0;
    let mut missing = 0;
    for (gr, hr) in gain.iter().zip(&gain_hard) {
        for (g, h) in gr.iter().zip(hr) {
            match (g, h) {
                (Some(g), Some(h)) if *g > 1e-5 => {
                    counted += 1;
                    worst_ratio = worst_ratio.max(h / g);
                }
                (Some(_), Some(_)) => {}
                _ => missing += 1,
            }
        }
    }
    let soft_hard_ok = missing == 0 && (counted == 0 || worst_ratio <= 1.0 + 1e-5);
    parts.push(format!(
        "soft-vs-hard grid: max ratio {worst_ratio:.6} over {counted} cells with gain > 1e-5, {missing} failed cells"
    ));

    let noiseless = scratch("noiseless");
    run_sweep(&sweep_config("noiseless_linear.toml", &noiseless)?).map_err(err)?;
    let (_, _, gain) = read_matrix(&noiseless.join("matrix_gain.csv"))?;
    let values: Vec<f64> = gain.iter().flatten().flatten().copied().collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let noiseless_ok = values.len() == 36 && lo >= -1e-5 && hi <= 0.004;
    parts.push(format!("noiseless linear grid: gain in [{lo:.2e}, {hi:.2e}] over {} cells", values.len()));
    let _ = fs::remove_dir_all(&noiseless);
    let _ = fs::remove_dir_all(&soft_hard);
    outcome(soft_hard_ok && noiseless_ok, parts.join("; "))
}

fn c7_non_monotone_alpha() -> Result<Outcome, String> {
    let spec = SearchSpec::new(0, SearchMode::Soft);
    let settings = SolverSettings::default();
    let curves: Vec<_> = [0.1, 1.0, 30.0]
        .par_iter()
        .map(|&alpha| {
            let cfg = ProblemConfig::new(alpha, 0.5, 0.5, 0.4, LossFamily::Linear).map_err(err)?;
            multi_stage_curve(&cfg, 10, &spec, &settings).map_err(err)
        })
        .collect::<Result<_, String>>()?;
    let imp: Vec<f64> = curves.iter().map(|c| c.improvement()).collect();
    let gap = (curves[2].best_error() - curves[2].baseline_clean).abs();
    let pass = imp[1] > imp[0] && imp[1] > imp[2] && gap <= 5e-3;
    outcome(
        pass,
        format!(
            "improvement at alpha = 0.1, 1, 30: {:.5}, {:.5}, {:.5}; alpha = 30 gap to noiseless {gap:.2e} (tol 5e-3)",
            imp[0], imp[1], imp[2]
        ),
    )
}

fn c8_bias_fixing() -> Result<Outcome, String> {
    let (config, _) = RunConfig::load(&root().join("configs/bias_fixed.toml")).map_err(err)?;
    let cfg = config.problem;
    let fixed_spec = config.search.clone().ok_or("bias_fixed.toml has no [search] table")?;
    let free_spec = SearchSpec {
        mode: SearchMode::Soft,
        ..fixed_spec.clone()
    };
    let settings = SolverSettings::default();
    let (fixed, free) = rayon::join(|| optimize(&cfg, &fixed_spec, &settings), || optimize(&cfg, &free_spec, &settings));
    let (fixed, free) = (fixed.map_err(err)?, free.map_err(err)?);
    let t = fixed_spec.target;
    let (sf, sv) = (fixed.report.stages[t], free.report.stages[t]);
    let pass = sf.gen_error < sv.gen_error && sf.rescaled_bias().abs() < sv.rescaled_bias().abs();
    outcome(
        pass,
        format!(
            "stage {t}: error fixed {:.6} vs free {:.6}; |b/sqrt(Q)| fixed {:.4} vs free {:.4}",
            sf.gen_error,
            sv.gen_error,
            sf.rescaled_bias().abs(),
            sv.rescaled_bias().abs()
        ),
    )
}

/// Minimum of the target-stage error over a log grid, refined once around
/// the best coarse cell.
fn grid_oracle(cfg: &ProblemConfig, target: usize) -> f64 {
    let settings = SolverSettings::default();
    let eval = |x: &[f64]| {
        let hyper = HyperSchedule::unit_betas(x.iter().map(|v| 10f64.powf(*v)).collect());
        solve(cfg, &hyper, &settings).map(|r| r.final_stage().gen_error).unwrap_or(f64::INFINITY)
    };
    let axis = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect() };
    let scan = |ranges: &[(f64, f64)], n: usize| -> (f64, Vec<f64>) {
        let axes: Vec<Vec<f64>> = ranges.iter().map(|r| axis(r.0, r.1, n)).collect();
        let mut points = vec![Vec::new()];
        for a in &axes {
            points = points
                .into_iter()
                .flat_map(|p| a.iter().map(move |v| [p.clone(), vec![*v]].concat()))
                .collect();
        }
        points
            .into_par_iter()
            .map(|p| (eval(&p), p))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
    };
    let (n_coarse, n_fine) = if target == 0 { (200, 200) } else { (41, 41) };
    let full = vec![(-4.0, 6.0); target + 1];
    let (coarse, at) = scan(&full, n_coarse);
    let cell = 10.0 / (n_coarse - 1) as f64;
    let local: Vec<(f64, f64)> = at.iter().map(|c| ((c - 2.0 * cell).max(-4.0), (c + 2.0 * cell).min(6.0))).collect();
    let (fine, _) = scan(&local, n_fine);
    coarse.min(fine)
}

fn c9_determinism_and_search() -> Result<Outcome, String> {
    let exe = env!("CARGO_BIN_EXE_sdreplica");
    let config = root().join("configs/phase_diagram.toml");
    let dirs = [scratch("det-a"), scratch("det-b")];
    for (dir, jobs) in dirs.iter().zip(["1", "4"]) {
        let status = Command::new(exe)
            .args(["sweep", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir)
            .args(["--jobs", jobs])
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(err)?;
        if !status.success() {
            return outcome(false, "sweep binary failed");
        }
    }
    let mut identical = true;
    for name in ["results.csv", "manifest.json", "config.toml", "matrix_final_error.csv"] {
        identical &= fs::read(dirs[0].join(name)).map_err(err)? == fs::read(dirs[1].join(name)).map_err(err)?;
    }
    for d in &dirs {
        let _ = fs::remove_dir_all(d);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let family = if k % 2 == 0 { LossFamily::Linear } else { LossFamily::Logistic };
        let rho = rng.random_range(0.3..=0.5);
        let cfg0 = random_config(&mut rng, rho, family);
        let cfg1 = ProblemConfig { loss_family: LossFamily::Linear, ..cfg0 };
        for (cfg, target) in [(cfg0, 0), (cfg1, 1)] {
            let nm = optimize(&cfg, &SearchSpec::new(target, SearchMode::Soft), &settings).map_err(err)?;
            let grid = grid_oracle(&cfg, target);
            worst = worst.max((nm.error - grid).abs());
        }
    }
    outcome(
        identical && worst <= 2e-4,
        format!(
            "repeat sweeps byte-identical: {identical}; max |NM - grid| = {worst:.2e} over 10 configs at T = 0 and T = 1 (tol 2e-4)"
        ),
    )
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("theory-simulation agreement", c1_agreement),
        ("closed-form oracle for E0 and E1", c2_closed_form),
        ("phase transition at alpha = delta^2", c3_phase_transition),
        ("balanced classes give zero bias", c4_balanced_bias),
        ("derivative table vs finite differences", c5_derivative_table),
        ("soft/hard dominance and noiseless marginality", c6_soft_hard_and_noiseless),
        ("non-monotone benefit in alpha", c7_non_monotone_alpha),
        ("bias-fixing heuristic", c8_bias_fixing),
        ("determinism and search sanity", c9_determinism_and_search),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} [{name}]: {} ({detail}; {secs:.1} s)",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
