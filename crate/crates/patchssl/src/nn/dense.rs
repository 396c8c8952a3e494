use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{wn_rows_backward, wn_rows_effective};
use super::Scalar;

fn gaussian<F: Scalar>(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let dist = Normal::new(0.0, sigma).expect("sigma must be positive");
    (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
}

/// Plain fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

pub struct DenseCache<F: Scalar> {
    x: Array2<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn init(in_dim: usize, out_dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: Array2::from_shape_vec((out_dim, in_dim), gaussian(out_dim * in_dim, sigma, rng))
                .unwrap(),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.dim()),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, DenseCache<F>) {
        let mut out = x.dot(&self.w.t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        (out, DenseCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &DenseCache<F>,
        dout: &Array2<F>,
        grads: Option<&mut Self>,
    ) -> Array2<F> {
        if let Some(gr) = grads {
            gr.w += &dout.t().dot(&cache.x);
            gr.b += &dout.sum_axis(Axis(0));
        }
        dout.dot(&self.w)
    }
}

/// Weight-normalized fully connected layer.
#[derive(Debug, Clone)]
pub struct WnDense<F: Scalar> {
    pub v: Array2<F>,
    pub g: Array1<F>,
    pub b: Array1<F>,
}

pub struct WnDenseCache<F: Scalar> {
    x: Array2<F>,
}

impl<F: Scalar> WnDense<F> {
    pub fn init(in_dim: usize, out_dim: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        WnDense {
            v: Array2::from_shape_vec((out_dim, in_dim), gaussian(out_dim * in_dim, sigma, rng))
                .unwrap(),
            g: Array1::ones(out_dim),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        WnDense {
            v: Array2::zeros(self.v.dim()),
            g: Array1::zeros(self.g.dim()),
            b: Array1::zeros(self.b.dim()),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, WnDenseCache<F>) {
        let w = wn_rows_effective(&self.v, &self.g);
        let mut out = x.dot(&w.t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        (out, WnDenseCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &WnDenseCache<F>,
        dout: &Array2<F>,
        grads: Option<&mut Self>,
    ) -> Array2<F> {
        if let Some(gr) = grads {
            let dw = dout.t().dot(&cache.x);
            wn_rows_backward(&self.v, &self.g, &dw, &mut gr.v, &mut gr.g);
            gr.b += &dout.sum_axis(Axis(0));
        }
        let w = wn_rows_effective(&self.v, &self.g);
        dout.dot(&w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn wn_dense_grads_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut layer = WnDense::<f64>::init(5, 4, 0.3, &mut r);
        let x = Array::from_shape_fn((3, 5), |_| r.random::<f64>() - 0.5);
        let (out, cache) = layer.forward(&x);
        let coef = Array::from_shape_fn(out.dim(), |_| r.random::<f64>() - 0.5);
        let loss = |l: &WnDense<f64>, x: &Array2<f64>| (&l.forward(x).0 * &coef).sum();

        let mut grads = layer.zeros_like();
        let dx = layer.backward(&cache, &coef, Some(&mut grads));
        let eps = 1e-6;
        for (i, j) in [(0, 0), (3, 4), (2, 2)] {
            let orig = layer.v[(i, j)];
            layer.v[(i, j)] = orig + eps;
            let up = loss(&layer, &x);
            layer.v[(i, j)] = orig - eps;
            let dn = loss(&layer, &x);
            layer.v[(i, j)] = orig;
            assert!(((up - dn) / (2.0 * eps) - grads.v[(i, j)]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        xp[(1, 2)] += eps;
        let up = loss(&layer, &xp);
        xp[(1, 2)] -= 2.0 * eps;
        let dn = loss(&layer, &xp);
        assert!(((up - dn) / (2.0 * eps) - dx[(1, 2)]).abs() < 1e-7);
    }
}
