//! Damped fixed-point updates with optional Anderson acceleration.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Mixer {
    depth: usize,
    damping: f64,
    max_damping: f64,
    /// History of scaled iterates and residuals `F(x) − x`.
    xs: Vec<Vec<f64>>,
    fs: Vec<Vec<f64>>,
}

impl Mixer {
    pub fn new(depth: usize, damping: f64) -> Self {
        Mixer {
            depth,
            damping,
            max_damping: damping,
            xs: Vec::new(),
            fs: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.xs.clear();
        self.fs.clear();
    }

    /// The residual grew: forget the history and damp harder.
    pub fn slow_down(&mut self) {
        self.reset();
        self.damping = (0.5 * self.damping).max(1e-3);
    }

    pub fn speed_up(&mut self) {
        self.damping = (1.1 * self.damping).min(self.max_damping);
    }

    /// Next iterate from `x` and its image `y = F(x)`, mixing in coordinates
    /// divided by `scale`.
    pub fn step(&mut self, x: &[f64], y: &[f64], scale: &[f64]) -> Vec<f64> {
        let n = x.len();
        let xs: Vec<f64> = (0..n).map(|i| x[i] / scale[i]).collect();
        let fs: Vec<f64> = (0..n).map(|i| (y[i] - x[i]) / scale[i]).collect();
        let beta = self.damping;
        let mut next: Vec<f64> = (0..n).map(|i| xs[i] + beta * fs[i]).collect();

        if self.depth > 0 {
            self.xs.push(xs.clone());
            self.fs.push(fs.clone());
            if self.xs.len() > self.depth + 1 {
                self.xs.remove(0);
                self.fs.remove(0);
            }
            let k = self.xs.len() - 1;
            if k > 0 {
                let df = DMatrix::from_fn(n, k, |i, j| self.fs[j + 1][i] - self.fs[j][i]);
                let dx = DMatrix::from_fn(n, k, |i, j| self.xs[j + 1][i] - self.xs[j][i]);
                let f = DVector::from_vec(fs.clone());
                let mut gram = df.transpose() * &df;
                let reg = 1e-12 * gram.trace().max(f64::MIN_POSITIVE);
                for j in 0..k {
                    gram[(j, j)] += reg;
                }
                let rhs = df.transpose() * &f;
                if let Some(gamma) = gram.lu().solve(&rhs) {
                    if gamma.iter().all(|v| v.is_finite()) {
                        let corr = (&dx + beta * &df) * gamma;
                        for i in 0..n {
                            next[i] -= corr[i];
                        }
                    }
                }
            }
        }
        (0..n).map(|i| next[i] * scale[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anderson_solves_linear_map_quickly() {
        // F(x) = A x + c with a slowly contracting A.
        let a = [[0.95, 0.02], [0.01, 0.9]];
        let c = [1.0, -2.0];
        let f = |x: &[f64]| vec![a[0][0] * x[0] + a[0][1] * x[1] + c[0], a[1][0] * x[0] + a[1][1] * x[1] + c[1]];
        let mut mixer = Mixer::new(5, 1.0);
        let mut x = vec![0.0, 0.0];
        let mut iters = 0;
        loop {
            let y = f(&x);
            let r = (y[0] - x[0]).abs().max((y[1] - x[1]).abs());
            if r < 1e-12 {
                break;
            }
            x = mixer.step(&x, &y, &[1.0, 1.0]);
            iters += 1;
            assert!(iters < 50);
        }
    }
}
