//! The three training losses.
//!
//! The discriminator emits K logits over the real classes; the generated
//! class is implicit with `p(fake | x) = 1 / (1 + Z(x))` where
//! `Z(x) = sum_k exp(l_k)`. All terms reduce to stable softplus /
//! log-sum-exp forms:
//!
//! - supervised: mean cross-entropy of the K-way softmax on labeled patches
//! - unsupervised: `mean softplus(-LSE)` on real plus `mean softplus(LSE)`
//!   on generated patches
//! - generator (feature matching): `||E[h(x)] - E[h(g(z))]||_1` between
//!   batch-mean intermediate discriminator features

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::ops::{sigmoid, softplus};
use crate::nn::Scalar;

/// Scalar values of one training step, converted to `f64` for reporting.
/// `l_d` is defined as `l_supervised + l_unsupervised`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l_supervised: f64,
    pub l_unsupervised: f64,
    pub l_d: f64,
    pub l_g: f64,
}

impl LossBundle {
    pub fn new(l_supervised: f64, l_unsupervised: f64, l_g: f64) -> Self {
        LossBundle {
            l_supervised,
            l_unsupervised,
            l_d: l_supervised + l_unsupervised,
            l_g,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_supervised.is_finite()
            && self.l_unsupervised.is_finite()
            && self.l_d.is_finite()
            && self.l_g.is_finite()
    }
}

fn log_sum_exp<F: Scalar>(row: ndarray::ArrayView1<F>) -> F {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return max;
    }
    let sum = row.iter().map(|&l| (l - max).exp()).fold(F::zero(), |a, b| a + b);
    max + sum.ln()
}

fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Mean negative log-likelihood of the correct class under the K-way
/// softmax (the "given real" conditional).
pub fn loss_supervised<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<F> {
    Ok(loss_supervised_with_grad(logits, labels)?.0)
}

pub fn loss_supervised_with_grad<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let inv_b = F::one() / F::from_f64(b as f64);
    let mut grad = softmax_rows(logits);
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let lse = log_sum_exp(logits.row(i));
        loss += lse - logits[(i, y)];
        grad[(i, y)] -= F::one();
    }
    grad.mapv_inplace(|v| v * inv_b);
    Ok((loss * inv_b, grad))
}

/// The vanilla-GAN term under the implicit K+1 head:
/// `-E_real log(Z/(1+Z)) - E_fake log(1/(1+Z))`.
pub fn loss_unsupervised<F: Scalar>(
    logits_real: &Array2<F>,
    logits_fake: &Array2<F>,
) -> Result<F> {
    Ok(loss_unsupervised_with_grad(logits_real, logits_fake)?.0)
}

/// Split real/fake terms, mostly for unit oracles.
pub fn unsupervised_terms<F: Scalar>(
    logits_real: &Array2<F>,
    logits_fake: &Array2<F>,
) -> Result<(F, F)> {
    if logits_real.nrows() == 0 || logits_fake.nrows() == 0 {
        return Err(Error::InvalidArgument("empty real or fake batch".into()));
    }
    let real = logits_real
        .axis_iter(Axis(0))
        .map(|row| softplus(-log_sum_exp(row)))
        .fold(F::zero(), |a, b| a + b)
        / F::from_f64(logits_real.nrows() as f64);
    let fake = logits_fake
        .axis_iter(Axis(0))
        .map(|row| softplus(log_sum_exp(row)))
        .fold(F::zero(), |a, b| a + b)
        / F::from_f64(logits_fake.nrows() as f64);
    Ok((real, fake))
}

pub fn loss_unsupervised_with_grad<F: Scalar>(
    logits_real: &Array2<F>,
    logits_fake: &Array2<F>,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let (real_term, fake_term) = unsupervised_terms(logits_real, logits_fake)?;
    // d/dl_k softplus(±LSE) = ±sigmoid(±LSE) * softmax_k
    let inv_br = F::one() / F::from_f64(logits_real.nrows() as f64);
    let mut dreal = softmax_rows(logits_real);
    for (i, mut row) in dreal.axis_iter_mut(Axis(0)).enumerate() {
        let lse = log_sum_exp(logits_real.row(i));
        let coef = (sigmoid(lse) - F::one()) * inv_br;
        row.mapv_inplace(|v| v * coef);
    }
    let inv_bf = F::one() / F::from_f64(logits_fake.nrows() as f64);
    let mut dfake = softmax_rows(logits_fake);
    for (i, mut row) in dfake.axis_iter_mut(Axis(0)).enumerate() {
        let lse = log_sum_exp(logits_fake.row(i));
        let coef = sigmoid(lse) * inv_bf;
        row.mapv_inplace(|v| v * coef);
    }
    Ok((real_term + fake_term, dreal, dfake))
}

/// L1 gap between batch-mean features of real and generated patches.
pub fn loss_feature_matching<F: Scalar>(
    feat_real: &Array2<F>,
    feat_fake: &Array2<F>,
) -> Result<F> {
    Ok(loss_feature_matching_with_grad(feat_real, feat_fake)?.0)
}

/// Returns the loss and the gradient with respect to the *fake* features
/// (the only side the generator update needs; the real branch is a
/// constant there).
pub fn loss_feature_matching_with_grad<F: Scalar>(
    feat_real: &Array2<F>,
    feat_fake: &Array2<F>,
) -> Result<(F, Array2<F>)> {
    if feat_real.ncols() != feat_fake.ncols() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            feat_real.ncols(),
            feat_fake.ncols()
        )));
    }
    if feat_real.nrows() == 0 || feat_fake.nrows() == 0 {
        return Err(Error::InvalidArgument("empty feature batch".into()));
    }
    let mean = |f: &Array2<F>| -> Array1<F> {
        let n = F::from_f64(f.nrows() as f64);
        f.sum_axis(Axis(0)).mapv(|v| v / n)
    };
    let diff = mean(feat_real) - mean(feat_fake);
    let loss = diff.iter().map(|v| v.abs()).fold(F::zero(), |a, b| a + b);
    let inv_bf = F::one() / F::from_f64(feat_fake.nrows() as f64);
    let sign = diff.mapv(|v| {
        if v > F::zero() {
            F::one()
        } else if v < F::zero() {
            -F::one()
        } else {
            F::zero()
        }
    });
    let mut dfake = Array2::<F>::zeros(feat_fake.dim());
    for mut row in dfake.axis_iter_mut(Axis(0)) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = -sign[c] * inv_bf;
        }
    }
    Ok((loss, dfake))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn supervised_uniform_logits() {
        let logits = array![[0.0f64, 0.0]];
        let (l, g) = loss_supervised_with_grad(&logits, &[1]).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        assert!((g[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((g[(0, 1)] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn supervised_known_value() {
        // logits (ln 3, 0), label 0: softmax p0 = 3/4, loss = ln(4/3)
        let logits = array![[3.0f64.ln(), 0.0]];
        let l = loss_supervised(&logits, &[0]).unwrap();
        assert!((l - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_saturates_to_zero() {
        let logits = array![[50.0f64, 0.0]];
        let l = loss_supervised(&logits, &[0]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn supervised_rejects_bad_labels() {
        let logits = array![[0.0f64, 0.0]];
        assert!(matches!(
            loss_supervised(&logits, &[2]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn supervised_is_shift_invariant() {
        let logits = array![[0.3f64, -1.2], [2.0, 0.1]];
        let shifted = logits.mapv(|v| v + 7.5);
        let a = loss_supervised(&logits, &[0, 1]).unwrap();
        let b = loss_supervised(&shifted, &[0, 1]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn unsupervised_hand_values() {
        // Z = 2 for (0,0) logits: real term ln(3/2), fake term ln 3.
        let zeros = array![[0.0f64, 0.0]];
        let (real, fake) = unsupervised_terms(&zeros, &zeros).unwrap();
        assert!((real - 1.5f64.ln()).abs() < 1e-12);
        assert!((fake - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_confident_real_vanishes() {
        let real = array![[80.0f64, 0.0]];
        let fake = array![[0.0f64, 0.0]];
        let (rt, _) = unsupervised_terms(&real, &fake).unwrap();
        assert!(rt < 1e-12);
    }

    #[test]
    fn unsupervised_is_not_shift_invariant() {
        let logits = array![[0.1f64, -0.4]];
        let shifted = logits.mapv(|v| v + 1.0);
        let a = loss_unsupervised(&logits, &logits).unwrap();
        let b = loss_unsupervised(&shifted, &shifted).unwrap();
        assert!((a - b).abs() > 1e-3, "Z scales with e^c");
    }

    #[test]
    fn unsupervised_stays_finite_at_1e4() {
        let big = array![[1e4f64, -1e4]];
        let l = loss_unsupervised(&big, &big).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn feature_matching_identical_batches_is_zero() {
        let f = array![[1.0f64, 2.0], [3.0, -1.0]];
        assert_eq!(loss_feature_matching(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn feature_matching_l1_of_means() {
        let real = array![[1.0f64, 2.0]];
        let fake = array![[0.0f64, 0.0]];
        assert!((loss_feature_matching(&real, &fake).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn feature_matching_matches_two_pass_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let real = Array::from_shape_fn((7, 5), |_| r.random::<f64>() - 0.5);
        let fake = Array::from_shape_fn((4, 5), |_| r.random::<f64>() - 0.5);
        // independent two-pass mean-then-L1
        let mut want = 0.0;
        for c in 0..5 {
            let mr: f64 = (0..7).map(|i| real[(i, c)]).sum::<f64>() / 7.0;
            let mf: f64 = (0..4).map(|i| fake[(i, c)]).sum::<f64>() / 4.0;
            want += (mr - mf).abs();
        }
        let got = loss_feature_matching(&real, &fake).unwrap();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut r = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let real = Array::from_shape_fn((3, 2), |_| (r.random::<f64>() - 0.5) * 20.0);
            let fake = Array::from_shape_fn((3, 2), |_| (r.random::<f64>() - 0.5) * 20.0);
            assert!(loss_supervised(&real, &[0, 1, 0]).unwrap() >= 0.0);
            assert!(loss_unsupervised(&real, &fake).unwrap() >= 0.0);
            assert!(loss_feature_matching(&real, &fake).unwrap() >= 0.0);
        }
    }

    #[test]
    fn bundle_additivity_is_exact() {
        let b = LossBundle::new(0.1 + 0.2, 0.3, 0.0);
        assert_eq!(b.l_d, b.l_supervised + b.l_unsupervised);
    }
}
