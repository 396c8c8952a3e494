use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{Mode, Scalar};

/// Per-channel batch normalization.
///
/// Operates on `[rows, channels]` views; callers flatten NHWC batches to
/// `[B*H*W, C]` first. Train mode normalizes with batch statistics and
/// returns them as [`BnStats`] for the owner to commit into the running
/// buffers; eval mode normalizes with the running statistics. `forward`
/// itself never mutates, which keeps repeated forwards (finite differences,
/// multi-batch steps) side-effect free.
#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnStats<F: Scalar> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

pub struct BnCache<F: Scalar> {
    x_hat: Array2<F>,
    istd: Array1<F>,
    mode: Mode,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn zeros_like(&self) -> Self {
        BatchNorm {
            gamma: Array1::zeros(self.gamma.dim()),
            beta: Array1::zeros(self.beta.dim()),
            running_mean: Array1::zeros(self.running_mean.dim()),
            running_var: Array1::zeros(self.running_var.dim()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<F>,
        mode: Mode,
    ) -> (Array2<F>, BnCache<F>, Option<BnStats<F>>) {
        let n = F::from_f64(x.nrows() as f64);
        let eps = F::from_f64(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.sum_axis(Axis(0)).mapv(|s| s / n);
                let mut var = Array1::<F>::zeros(x.ncols());
                for row in x.axis_iter(Axis(0)) {
                    for (c, &v) in row.iter().enumerate() {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
                var.mapv_inplace(|s| s / n);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let istd = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut x_hat = x.to_owned();
        for mut row in x_hat.axis_iter_mut(Axis(0)) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[c]) * istd[c];
            }
        }
        let mut y = x_hat.clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.gamma[c] + self.beta[c];
            }
        }
        let stats = match mode {
            Mode::Train => Some(BnStats { mean, var }),
            Mode::Eval => None,
        };
        (y, BnCache { x_hat, istd, mode }, stats)
    }

    /// Fold train-mode batch statistics into the running buffers.
    pub fn commit(&mut self, stats: &BnStats<F>) {
        let m = F::from_f64(self.momentum);
        let one_m = F::one() - m;
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = m * self.running_mean[c] + one_m * stats.mean[c];
            self.running_var[c] = m * self.running_var[c] + one_m * stats.var[c];
        }
    }

    pub fn backward(
        &self,
        cache: &BnCache<F>,
        dout: &Array2<F>,
        grads: Option<&mut Self>,
    ) -> Array2<F> {
        let (rows, cols) = dout.dim();
        let n = F::from_f64(rows as f64);
        // d gamma / d beta
        let mut dgamma = Array1::<F>::zeros(cols);
        let mut dbeta = Array1::<F>::zeros(cols);
        for (drow, xrow) in dout.axis_iter(Axis(0)).zip(cache.x_hat.axis_iter(Axis(0))) {
            for c in 0..cols {
                dgamma[c] += drow[c] * xrow[c];
                dbeta[c] += drow[c];
            }
        }
        let dx = match cache.mode {
            Mode::Train => {
                // dx = istd/N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)),
                // with dxhat = dout * gamma.
                let mut sum_dxhat = Array1::<F>::zeros(cols);
                let mut sum_dxhat_xhat = Array1::<F>::zeros(cols);
                for (drow, xrow) in dout.axis_iter(Axis(0)).zip(cache.x_hat.axis_iter(Axis(0))) {
                    for c in 0..cols {
                        let dxh = drow[c] * self.gamma[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * xrow[c];
                    }
                }
                let mut dx = Array2::<F>::zeros((rows, cols));
                for ((mut orow, drow), xrow) in dx
                    .axis_iter_mut(Axis(0))
                    .zip(dout.axis_iter(Axis(0)))
                    .zip(cache.x_hat.axis_iter(Axis(0)))
                {
                    for c in 0..cols {
                        let dxh = drow[c] * self.gamma[c];
                        orow[c] = cache.istd[c] / n
                            * (n * dxh - sum_dxhat[c] - xrow[c] * sum_dxhat_xhat[c]);
                    }
                }
                dx
            }
            Mode::Eval => {
                let mut dx = dout.clone();
                for mut row in dx.axis_iter_mut(Axis(0)) {
                    for c in 0..cols {
                        row[c] = row[c] * self.gamma[c] * cache.istd[c];
                    }
                }
                dx
            }
        };
        if let Some(gr) = grads {
            gr.gamma += &dgamma;
            gr.beta += &dbeta;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_channels() {
        let bn = BatchNorm::<f64>::new(2);
        let x = Array::from_shape_vec((4, 2), vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0])
            .unwrap();
        let (y, _, stats) = bn.forward(x.view(), Mode::Train);
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        for c in 0..2 {
            let mean: f64 = y.column(c).sum() / 4.0;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn batch_of_one_is_finite() {
        let bn = BatchNorm::<f64>::new(3);
        let x = Array::from_shape_vec((1, 3), vec![5.0, -3.0, 7.0]).unwrap();
        let (y, _, _) = bn.forward(x.view(), Mode::Train);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_grads_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma = Array::from_shape_fn(3, |_| 0.5 + r.random::<f64>());
        bn.beta = Array::from_shape_fn(3, |_| r.random::<f64>() - 0.5);
        let x = Array::from_shape_fn((5, 3), |_| r.random::<f64>() * 2.0 - 1.0);
        let coef = Array::from_shape_fn((5, 3), |_| r.random::<f64>() - 0.5);
        let loss = |bn: &BatchNorm<f64>, x: &Array2<f64>| {
            (&bn.forward(x.view(), Mode::Train).0 * &coef).sum()
        };

        let (_, cache, _) = bn.forward(x.view(), Mode::Train);
        let mut grads = bn.zeros_like();
        let dx = bn.backward(&cache, &coef, Some(&mut grads));

        let eps = 1e-6;
        for idx in [(0, 0), (3, 2), (4, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&bn, &xp);
            xp[idx] -= 2.0 * eps;
            let dn = loss(&bn, &xp);
            let num = (up - dn) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-7, "dx mismatch at {idx:?}");
        }
        for c in 0..3 {
            let orig = bn.gamma[c];
            bn.gamma[c] = orig + eps;
            let up = loss(&bn, &x);
            bn.gamma[c] = orig - eps;
            let dn = loss(&bn, &x);
            bn.gamma[c] = orig;
            assert!(((up - dn) / (2.0 * eps) - grads.gamma[c]).abs() < 1e-7);
            let origb = bn.beta[c];
            bn.beta[c] = origb + eps;
            let up = loss(&bn, &x);
            bn.beta[c] = origb - eps;
            let dn = loss(&bn, &x);
            bn.beta[c] = origb;
            assert!(((up - dn) / (2.0 * eps) - grads.beta[c]).abs() < 1e-7);
        }
    }
}
