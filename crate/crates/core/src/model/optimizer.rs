//! Moment-based first-order optimizer with bias correction, used for the
//! network weights (the graphical-model parameters take natural-gradient
//! steps instead).

use crate::linalg::Mat;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one descent step to `params` along `grads` (same order each
    /// call; state is allocated lazily on the first call).
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Mat::zeros(g.nrows(), g.ncols()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let gij = g[(i, j)];
                    m[(i, j)] = self.beta1 * m[(i, j)] + (1.0 - self.beta1) * gij;
                    v[(i, j)] = self.beta2 * v[(i, j)] + (1.0 - self.beta2) * gij * gij;
                    let mhat = m[(i, j)] / bc1;
                    let vhat = v[(i, j)] / bc2;
                    p[(i, j)] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}
