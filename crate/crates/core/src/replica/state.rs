use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generalization_error, ProblemConfig, StageSolution};

/// All order parameters and conjugates of a chain, stored for stages `0..=T`.
///
/// Only the leading `solved x solved` blocks are meaningful; the conjugate
/// `Qhat` is mirrored into its lower triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParameterState {
    pub solved: usize,
    #[serde(with = "rows", rename = "Q")]
    pub q: DMatrix<f64>,
    #[serde(with = "rows")]
    pub chi: DMatrix<f64>,
    pub m: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(with = "rows")]
    pub qhat: DMatrix<f64>,
    #[serde(with = "rows")]
    pub chihat: DMatrix<f64>,
    pub mhat: Vec<f64>,
    /// `R[s][t] = E[ξ̂^s ŵ^t]`, not symmetric.
    #[serde(with = "rows", rename = "R")]
    pub r: DMatrix<f64>,
    /// Final fixed-point residual per solved stage.
    pub residual: Vec<f64>,
    /// Fixed-point iterations used per solved stage.
    pub iterations: Vec<usize>,
}

impl OrderParameterState {
    pub fn new(stages: usize) -> Self {
        OrderParameterState {
            solved: 0,
            q: DMatrix::zeros(stages, stages),
            chi: DMatrix::zeros(stages, stages),
            m: vec![0.0; stages],
            b: vec![0.0; stages],
            qhat: DMatrix::zeros(stages, stages),
            chihat: DMatrix::zeros(stages, stages),
            mhat: vec![0.0; stages],
            r: DMatrix::zeros(stages, stages),
            residual: Vec::new(),
            iterations: Vec::new(),
        }
    }

    /// Number of stages the state has room for.
    pub fn capacity(&self) -> usize {
        self.m.len()
    }

    pub fn stage(&self, t: usize, cfg: &ProblemConfig) -> Result<StageSolution> {
        if t >= self.solved {
            return Err(Error::domain(format!("stage {t} has not been solved")));
        }
        let q = self.q[(t, t)];
        Ok(StageSolution {
            m: self.m[t],
            q,
            b: self.b[t],
            gen_error: generalization_error(self.m[t], q, self.b[t], cfg)?,
        })
    }

    pub fn stages(&self, cfg: &ProblemConfig) -> Result<Vec<StageSolution>> {
        (0..self.solved).map(|t| self.stage(t, cfg)).collect()
    }

    /// Copy of the state with room for `stages` stages, keeping what is solved.
    pub fn resized(&self, stages: usize) -> Self {
        let keep = self.solved.min(stages);
        let mut out = OrderParameterState::new(stages);
        out.solved = keep;
        for s in 0..keep {
            out.m[s] = self.m[s];
            out.b[s] = self.b[s];
            out.mhat[s] = self.mhat[s];
            for t in 0..keep {
                out.q[(s, t)] = self.q[(s, t)];
                out.chi[(s, t)] = self.chi[(s, t)];
                out.qhat[(s, t)] = self.qhat[(s, t)];
                out.chihat[(s, t)] = self.chihat[(s, t)];
                out.r[(s, t)] = self.r[(s, t)];
            }
        }
        out.residual = self.residual[..keep].to_vec();
        out.iterations = self.iterations[..keep].to_vec();
        out
    }

    /// Drop every stage from `t` on.
    pub fn truncate(&mut self, t: usize) {
        if t < self.solved {
            self.solved = t;
            self.residual.truncate(t);
            self.iterations.truncate(t);
        }
    }
}

/// Serialize a matrix as a list of rows.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
    }
}
