use ndarray::{Array2, Array4, ArrayD, Axis, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

/// Leaky ReLU. The returned mask holds the local slope (1 or `slope`) per
/// element and is the backward cache.
pub fn leaky_relu<F: Scalar, D: Dimension>(
    x: &ndarray::Array<F, D>,
    slope: f64,
) -> (ndarray::Array<F, D>, ndarray::Array<F, D>) {
    let s = F::from_f64(slope);
    let mask = x.mapv(|v| if v > F::zero() { F::one() } else { s });
    let y = x * &mask;
    (y, mask)
}

pub fn leaky_relu_backward<F: Scalar, D: Dimension>(
    mask: &ndarray::Array<F, D>,
    dout: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    dout * mask
}

pub fn tanh_forward<F: Scalar, D: Dimension>(
    x: &ndarray::Array<F, D>,
) -> (ndarray::Array<F, D>, ndarray::Array<F, D>) {
    let y = x.mapv(|v| v.tanh());
    (y.clone(), y)
}

pub fn tanh_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    dout: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dout.clone();
    dx.zip_mut_with(y, |d, &yv| *d = *d * (F::one() - yv * yv));
    dx
}

/// Inverted dropout: kept elements are scaled by `1/(1-rate)` so eval mode
/// is the identity. Returns `(y, mask_with_scale)`.
pub fn dropout_forward<F: Scalar, D: Dimension>(
    x: &ndarray::Array<F, D>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (ndarray::Array<F, D>, ndarray::Array<F, D>) {
    if rate <= 0.0 {
        return (x.clone(), ndarray::Array::ones(x.raw_dim()));
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    let mask = ndarray::Array::from_shape_simple_fn(x.raw_dim(), || {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    });
    (x * &mask, mask)
}

pub fn dropout_backward<F: Scalar, D: Dimension>(
    mask: &ndarray::Array<F, D>,
    dout: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    dout * mask
}

/// Mean over the spatial axes of an NHWC batch.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (_, h, w, _) = x.dim();
    let scale = F::one() / F::from_f64((h * w) as f64);
    x.sum_axis(Axis(1)).sum_axis(Axis(1)).mapv(|v| v * scale)
}

pub fn global_avg_pool_backward<F: Scalar>(
    dout: &Array2<F>,
    shape: (usize, usize, usize, usize),
) -> Array4<F> {
    let (b, h, w, c) = shape;
    let scale = F::one() / F::from_f64((h * w) as f64);
    let mut dx = Array4::<F>::zeros((b, h, w, c));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    dx[(bi, hi, wi, ci)] = dout[(bi, ci)] * scale;
                }
            }
        }
    }
    dx
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<F: Scalar>(x: F) -> F {
    let zero = F::zero();
    let pos = if x > zero { x } else { zero };
    pos + (F::one() + (-x.abs()).exp()).ln()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[allow(dead_code)]
pub fn flatten<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ArrayD<F> {
    x.clone().into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for x in [-5.0f64, -0.3, 0.0, 0.7, 12.0] {
            assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
        }
        assert!(softplus(1e4f64).is_finite());
        assert!(softplus(-1e4f64) >= 0.0);
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid(1e4f64) <= 1.0);
        assert!(sigmoid(-1e4f64) >= 0.0);
    }

    #[test]
    fn pool_backward_distributes_evenly() {
        let x = array![[[[1.0f64, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]];
        let y = global_avg_pool(&x);
        assert_eq!(y, array![[4.0, 5.0]]);
        let dx = global_avg_pool_backward(&array![[1.0f64, 2.0]], x.dim());
        assert!((dx[(0, 0, 0, 0)] - 0.25).abs() < 1e-15);
        assert!((dx[(0, 1, 1, 1)] - 0.5).abs() < 1e-15);
    }
}
