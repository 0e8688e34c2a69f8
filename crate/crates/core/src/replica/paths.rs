//! Expectation engine over explicit sample paths of the effective
//! single-coordinate chain: either a Gauss–Hermite tensor tree that grows
//! by one dimension per stage, or a fixed set of Monte Carlo draws.
//!
//! Every path carries one of the four `(y, y_true)` label cases with its
//! probability folded into the weight, so the label average is exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::engine::{decreasing_root, BiasMode, Moments, StageEngine, Trial};
use super::quad::{NormalRule, SplitRule};
use crate::error::{Error, Result};
use crate::loss::{prox, teacher_label};
use crate::model::{HyperSchedule, LossFamily, ProblemConfig};

/// Hard-label stages need at least this much mass in each class.
const HARD_MASS_FLOOR: f64 = 1e-9;

/// Children lighter than this fraction of the heaviest possible child are dropped.
const PRUNE: f64 = 1e-15;

#[derive(Debug, Clone, Default)]
struct PathSet {
    n: usize,
    w: Vec<f64>,
    /// `2 y_true − 1`.
    sy: Vec<f64>,
    /// Monte Carlo draw each path belongs to; empty for quadrature.
    unit: Vec<u32>,
    /// Whitened Gaussian coordinates, `n × stride`.
    g: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
    /// Target of stage r and its derivative in `u^{r−1}`.
    y: Vec<f64>,
    yd: Vec<f64>,
    /// `G[s][r]` at `(i·stride + s)·stride + r`; soft labels only.
    gm: Vec<f64>,
    /// `Hd[s][r]` for the last committed r; soft labels only.
    hd: Vec<f64>,
}

impl PathSet {
    fn with_capacity(n: usize, stride: usize, derivs: bool) -> Self {
        PathSet {
            n: 0,
            w: Vec::with_capacity(n),
            sy: Vec::with_capacity(n),
            unit: Vec::new(),
            g: Vec::with_capacity(n * stride),
            z: Vec::with_capacity(n * stride),
            u: Vec::with_capacity(n * stride),
            y: Vec::with_capacity(n * stride),
            yd: Vec::with_capacity(n * stride),
            gm: if derivs { Vec::with_capacity(n * stride * stride) } else { Vec::new() },
            hd: if derivs { Vec::with_capacity(n * stride) } else { Vec::new() },
        }
    }

    /// Append a copy of path `i` of `src` with coordinate `t` set to `g_t`.
    fn push_child(&mut self, src: &PathSet, i: usize, stride: usize, t: usize, g_t: f64, w: f64) {
        let row = i * stride..(i + 1) * stride;
        self.w.push(w);
        self.sy.push(src.sy[i]);
        let base = self.g.len();
        self.g.extend_from_slice(&src.g[row.clone()]);
        self.g[base + t] = g_t;
        self.z.extend_from_slice(&src.z[row.clone()]);
        self.u.extend_from_slice(&src.u[row.clone()]);
        self.y.extend_from_slice(&src.y[row.clone()]);
        self.yd.extend_from_slice(&src.yd[row.clone()]);
        if !src.gm.is_empty() {
            self.gm.extend_from_slice(&src.gm[i * stride * stride..(i + 1) * stride * stride]);
            self.hd.extend_from_slice(&src.hd[row]);
        }
        self.n += 1;
    }
}

enum Kind {
    Quadrature { rule: NormalRule, split: SplitRule },
    MonteCarlo { units: usize },
}

pub(crate) struct PathEngine {
    family: LossFamily,
    delta: f64,
    hard: bool,
    /// `betas[t]` produces the targets of stage t.
    betas: Vec<f64>,
    stride: usize,
    kind: Kind,
    bias_tol: f64,
    max_expansions: usize,
    max_paths: usize,
    set: PathSet,
    parents: Option<PathSet>,
    prepared: Option<usize>,
    committed: usize,
    // Scratch for the stage being solved.
    h0: Vec<f64>,
    zc: Vec<f64>,
    curv: Vec<f64>,
}

pub(crate) struct PathOptions {
    pub bias_tol: f64,
    pub max_expansions: usize,
    pub max_paths: usize,
}

impl PathEngine {
    fn base(cfg: &ProblemConfig, hyper: &HyperSchedule, kind: Kind, opts: &PathOptions) -> Self {
        let stride = hyper.stages();
        let mut betas = vec![1.0; stride];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            *b = hyper.beta(t);
        }
        PathEngine {
            family: cfg.loss_family,
            delta: cfg.delta,
            hard: hyper.hard_labels,
            betas,
            stride,
            kind,
            bias_tol: opts.bias_tol,
            max_expansions: opts.max_expansions,
            max_paths: opts.max_paths,
            set: PathSet::default(),
            parents: None,
            prepared: None,
            committed: 0,
            h0: Vec::new(),
            zc: Vec::new(),
            curv: Vec::new(),
        }
    }

    fn derivs(&self) -> bool {
        !self.hard
    }

    pub fn quadrature(cfg: &ProblemConfig, hyper: &HyperSchedule, nodes: usize, opts: &PathOptions) -> Self {
        let kind = Kind::Quadrature {
            rule: NormalRule::hermite(nodes),
            split: SplitRule::new(nodes),
        };
        let mut e = PathEngine::base(cfg, hyper, kind, opts);
        let stride = e.stride;
        let mut set = PathSet::with_capacity(4, stride, e.derivs());
        for (y, yt, p) in cfg.label_joint().cases() {
            if p > 0.0 {
                e.push_root(&mut set, y, yt, p, &vec![0.0; stride]);
            }
        }
        e.set = set;
        e
    }

    pub fn monte_carlo(
        cfg: &ProblemConfig,
        hyper: &HyperSchedule,
        samples: usize,
        seed: u64,
        opts: &PathOptions,
    ) -> Result<Self> {
        let units = samples.div_ceil(2).max(1);
        let mut e = PathEngine::base(cfg, hyper, Kind::MonteCarlo { units }, opts);
        let stride = e.stride;
        let cases: Vec<_> = cfg.label_joint().cases().into_iter().filter(|c| c.2 > 0.0).collect();
        let n = 2 * units * cases.len();
        if n > e.max_paths {
            return Err(Error::Resource(format!(
                "{n} Monte Carlo paths exceed the limit of {}",
                e.max_paths
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = PathSet::with_capacity(n, stride, e.derivs());
        let mut g = vec![0.0; stride];
        let scale = 1.0 / (2 * units) as f64;
        for k in 0..units {
            for gi in g.iter_mut() {
                *gi = StandardNormal.sample(&mut rng);
            }
            for sign in [1.0, -1.0] {
                let gs: Vec<f64> = g.iter().map(|v| sign * v).collect();
                for &(y, yt, p) in &cases {
                    e.push_root(&mut set, y, yt, p * scale, &gs);
                    set.unit.push(k as u32);
                }
            }
        }
        e.set = set;
        Ok(e)
    }

    fn push_root(&self, set: &mut PathSet, y: u8, yt: u8, w: f64, g: &[f64]) {
        let stride = self.stride;
        set.w.push(w);
        set.sy.push(2.0 * yt as f64 - 1.0);
        set.g.extend_from_slice(g);
        set.z.extend(std::iter::repeat_n(0.0, stride));
        set.u.extend(std::iter::repeat_n(0.0, stride));
        let base = set.y.len();
        set.y.extend(std::iter::repeat_n(0.0, stride));
        set.y[base] = y as f64;
        set.yd.extend(std::iter::repeat_n(0.0, stride));
        if self.derivs() {
            set.gm.extend(std::iter::repeat_n(0.0, stride * stride));
            set.hd.extend(std::iter::repeat_n(0.0, stride));
        }
        set.n += 1;
    }

    /// Tensor children of `parents` in coordinate `t`, using `rule_for(i)` per parent.
    fn expand<F>(&self, parents: &PathSet, t: usize, mut rule_for: F, max_node_w: f64) -> Result<PathSet>
    where
        F: FnMut(usize) -> NormalRule,
    {
        let wmax = parents.w.iter().copied().fold(0.0, f64::max);
        let cutoff = PRUNE * wmax * max_node_w;
        let mut out = PathSet::with_capacity(parents.n * 8, self.stride, self.derivs());
        for i in 0..parents.n {
            let rule = rule_for(i);
            for (&x, &wx) in rule.nodes.iter().zip(&rule.weights) {
                let w = parents.w[i] * wx;
                if w >= cutoff && w > 0.0 {
                    out.push_child(parents, i, self.stride, t, x, w);
                }
            }
            if out.n > self.max_paths {
                return Err(Error::Resource(format!(
                    "quadrature tree for stage {t} exceeds {} paths; use fewer nodes or Monte Carlo",
                    self.max_paths
                )));
            }
        }
        Ok(out)
    }

    /// Field of stage t without the bias, for parent rows (coordinate t excluded)
    /// or full rows.
    fn field(set: &PathSet, stride: usize, trial: &Trial, i: usize, include_t: bool) -> f64 {
        let t = trial.t;
        let row = i * stride;
        let mut h = trial.m * set.sy[i];
        let upto = if include_t { t + 1 } else { t };
        for r in 0..upto {
            h += trial.chol[(t, r)] * set.g[row + r];
        }
        for r in 0..t {
            h += trial.coupling[r] * set.z[row + r];
        }
        h
    }

    /// Proximal pass at bias `b`; returns `(E[z], dE[z]/db)`.
    fn pass(&mut self, t: usize, c: f64, b: f64) -> Result<(f64, f64)> {
        let stride = self.stride;
        let mut f = 0.0;
        let mut d = 0.0;
        for i in 0..self.set.n {
            let y = self.set.y[i * stride + t];
            let (z, l2) = prox(self.family, y, self.h0[i] + b, c, self.zc[i])?;
            self.zc[i] = z;
            self.curv[i] = l2;
            let w = self.set.w[i];
            f += w * z;
            d -= w * l2 / (l2 + 1.0 / c);
        }
        Ok((f, d))
    }

    /// Evaluate fields and the proximal step, solving or fixing the bias.
    fn solve_paths(&mut self, trial: &Trial) -> Result<f64> {
        let t = trial.t;
        let stride = self.stride;
        let n = self.set.n;
        self.h0.resize(n, 0.0);
        self.zc.resize(n, 0.0);
        self.curv.resize(n, 0.0);
        for i in 0..n {
            self.h0[i] = Self::field(&self.set, stride, trial, i, true);
        }
        let c = self.delta * trial.chi_tt;
        match trial.bias {
            BiasMode::Fixed(b) => {
                self.pass(t, c, b)?;
                Ok(b)
            }
            BiasMode::Solve { guess } => {
                let tol = self.bias_tol * c;
                let max_expansions = self.max_expansions;
                let mut failure = None;
                let mut last = f64::NAN;
                let root = decreasing_root(
                    |b| {
                        last = b;
                        match self.pass(t, c, b) {
                            Ok(v) => v,
                            Err(e) => {
                                failure = Some(e);
                                (f64::NAN, f64::NAN)
                            }
                        }
                    },
                    guess,
                    tol,
                    max_expansions,
                );
                if let Some(e) = failure {
                    return Err(e);
                }
                let b = root.map_err(|expansions| Error::BiasSolve { stage: t, expansions })?;
                if b != last {
                    self.pass(t, c, b)?;
                }
                Ok(b)
            }
        }
    }

    /// Column t of the derivative table on path i, written into `col[0..=t]`,
    /// plus the new `Hd[s][t]` entries in `hd_new[0..t]`.
    fn derivative_column(&self, trial: &Trial, c: f64, i: usize, col: &mut [f64], hd_new: &mut [f64]) {
        let t = trial.t;
        let stride = self.stride;
        let l2 = self.curv[i];
        let den = l2 + 1.0 / c;
        let a = -l2 / den;
        let bc = self.set.yd[i * stride + t] / den;
        let gm = &self.set.gm[i * stride * stride..(i + 1) * stride * stride];
        let hd = &self.set.hd[i * stride..(i + 1) * stride];
        for s in 0..t {
            let mut h = 0.0;
            for r in s..t {
                h += trial.coupling[r] * gm[s * stride + r];
            }
            hd_new[s] = h;
            col[s] = a * h + bc * (hd[s] + gm[s * stride + t - 1]);
        }
        col[t] = a;
    }
}

impl StageEngine for PathEngine {
    fn begin_stage(&mut self, t: usize) -> Result<()> {
        if self.prepared == Some(t) {
            return Ok(());
        }
        if t != self.committed {
            return Err(Error::domain(format!(
                "stage {t} requested but {} stages are committed",
                self.committed
            )));
        }
        if let Kind::Quadrature { rule, .. } = &self.kind {
            let parents = std::mem::take(&mut self.set);
            let max_w = rule.max_weight();
            self.set = self.expand(&parents, t, |_| rule.clone(), max_w)?;
            self.parents = Some(parents);
        }
        self.h0.clear();
        self.zc.clear();
        self.curv.clear();
        self.prepared = Some(t);
        Ok(())
    }

    fn evaluate(&mut self, trial: &Trial, with_errors: bool) -> Result<Moments> {
        let t = trial.t;
        if self.prepared != Some(t) {
            return Err(Error::domain(format!("stage {t} was not prepared")));
        }
        let stride = self.stride;
        let c = self.delta * trial.chi_tt;
        let bias = self.solve_paths(trial)?;

        let dim = 2 * t + 3;
        let units = match self.kind {
            Kind::MonteCarlo { units } if with_errors => units,
            _ => 0,
        };
        let mut total = vec![0.0; dim];
        let mut per_unit = vec![0.0; units * dim];
        let mut col = vec![0.0; t + 1];
        let mut hd_new = vec![0.0; t + 1];
        let mut acc = vec![0.0; dim];
        for i in 0..self.set.n {
            let w = self.set.w[i];
            let z = self.zc[i];
            let row = i * stride;
            // Layout: [dz or Stein moments (t+1) | signed_z | zz (t+1)].
            if self.hard {
                for r in 0..=t {
                    acc[r] = w * self.set.g[row + r] * z;
                }
            } else {
                self.derivative_column(trial, c, i, &mut col, &mut hd_new);
                for s in 0..=t {
                    acc[s] = w * col[s];
                }
            }
            acc[t + 1] = w * self.set.sy[i] * z;
            for s in 0..t {
                acc[t + 2 + s] = w * self.set.z[row + s] * z;
            }
            acc[2 * t + 2] = w * z * z;
            for k in 0..dim {
                total[k] += acc[k];
            }
            if units > 0 {
                let u = self.set.unit[i] as usize;
                for k in 0..dim {
                    per_unit[u * dim + k] += acc[k];
                }
            }
        }

        // Hard labels: E[∂z/∂ξ] = L^{-T} E[g z] by Gaussian integration by parts.
        let stein = |v: &mut [f64]| {
            for s in (0..=t).rev() {
                let mut x = v[s];
                for r in s + 1..=t {
                    x -= trial.chol[(r, s)] * v[r];
                }
                v[s] = x / trial.chol[(s, s)];
            }
        };
        if self.hard {
            stein(&mut total[..=t]);
        }
        let std_err = if units > 0 {
            let mut mean = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            for u in 0..units {
                let v = &mut per_unit[u * dim..(u + 1) * dim];
                if self.hard {
                    stein(&mut v[..=t]);
                }
                for k in 0..dim {
                    let x = v[k] * units as f64;
                    mean[k] += x;
                    sq[k] += x * x;
                }
            }
            let nu = units as f64;
            let se: Vec<f64> = (0..dim)
                .map(|k| {
                    let m = mean[k] / nu;
                    ((sq[k] / nu - m * m).max(0.0) / (nu - 1.0).max(1.0)).sqrt()
                })
                .collect();
            Some((se[..=t].to_vec(), se[t + 1], se[t + 2..].to_vec()))
        } else {
            None
        };
        Ok(Moments {
            dz: total[..=t].to_vec(),
            signed_z: total[t + 1],
            zz: total[t + 2..].to_vec(),
            bias,
            std_err,
        })
    }

    fn commit(&mut self, trial: &Trial) -> Result<()> {
        let t = trial.t;
        let BiasMode::Fixed(b) = trial.bias else {
            return Err(Error::domain("commit needs a fixed bias"));
        };
        if self.prepared != Some(t) {
            return Err(Error::domain(format!("stage {t} was not prepared")));
        }
        let stride = self.stride;
        let c = self.delta * trial.chi_tt;

        // Hard labels jump where u^t = 0; rebuild coordinate t with rules split there.
        if self.hard && t + 1 < stride {
            if let (Kind::Quadrature { rule, split }, Some(parents)) = (&self.kind, &self.parents) {
                let ltt = trial.chol[(t, t)];
                let mut r = NormalRule { nodes: Vec::new(), weights: Vec::new() };
                let rebuilt = self.expand(
                    parents,
                    t,
                    |i| {
                        let rest = Self::field(parents, stride, trial, i, false);
                        // u = 0 exactly when h = c (1/2 − y) for either loss family.
                        let y = parents.y[i * stride + t];
                        let cut = (c * (0.5 - y) - b - rest) / ltt;
                        split.around(cut, rule, &mut r);
                        r.clone()
                    },
                    rule.max_weight(),
                )?;
                self.set = rebuilt;
                self.zc.clear();
            }
        }

        self.solve_paths(trial)?;
        let mut col = vec![0.0; t + 1];
        let mut hd_new = vec![0.0; t + 1];
        let beta_next = self.betas.get(t + 1).copied().unwrap_or(1.0);
        for i in 0..self.set.n {
            let row = i * stride;
            let z = self.zc[i];
            let u = self.h0[i] + b + z;
            if self.derivs() {
                self.derivative_column(trial, c, i, &mut col, &mut hd_new);
                let gm = &mut self.set.gm[i * stride * stride..(i + 1) * stride * stride];
                for s in 0..=t {
                    gm[s * stride + t] = col[s];
                }
                let hd = &mut self.set.hd[row..row + stride];
                hd[..t].copy_from_slice(&hd_new[..t]);
                hd[t] = 1.0;
            }
            self.set.z[row + t] = z;
            self.set.u[row + t] = u;
            if t + 1 < stride {
                let (y, yd) = teacher_label(self.family, beta_next, u, self.hard);
                self.set.y[row + t + 1] = y;
                self.set.yd[row + t + 1] = yd;
            }
        }
        self.parents = None;
        self.prepared = None;
        self.committed = t + 1;
        if self.hard && t + 1 < stride {
            // A student fed a single class learns nothing and its stage has no fixed point.
            let total: f64 = self.set.w.iter().sum();
            let pos: f64 = (0..self.set.n).map(|i| self.set.w[i] * self.set.y[i * stride + t + 1]).sum();
            let frac = pos / total;
            if !(frac > HARD_MASS_FLOOR && frac < 1.0 - HARD_MASS_FLOOR) {
                return Err(Error::Degenerate {
                    stage: t + 1,
                    what: "fraction of positive hard labels",
                    value: frac,
                });
            }
        }
        Ok(())
    }

    fn size(&self) -> usize {
        self.set.n
    }
}
