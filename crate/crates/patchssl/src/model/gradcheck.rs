//! Finite-difference verification of the loss gradients.
//!
//! Builds tiny 64-bit networks, runs the analytic backward pass, and
//! compares every parameter coordinate against a central difference of the
//! scalar loss. Dropout is exercised with a fixed per-evaluation RNG seed
//! so repeated forwards see identical masks.

use ndarray::{Array, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Mode, Parameterized};

use super::arch::{DiscArch, GenArch};
use super::disc::Discriminator;
use super::gen::Generator;
use super::losses;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Supervised,
    Unsupervised,
    FeatureMatching,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Fraction of coordinates with relative error below 1e-4.
    pub frac_within: f64,
    pub n_coords: usize,
    pub worst_param: String,
}

/// Relative error with a floor so near-zero coordinate pairs do not blow up.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn set_flat<P: Parameterized<f64>>(params: &mut P, flat_ix: usize, value: f64) -> f64 {
    let mut offset = 0usize;
    let mut old = f64::NAN;
    params.visit_params_mut(&mut |_, _, data| {
        if flat_ix >= offset && flat_ix < offset + data.len() {
            old = data[flat_ix - offset];
            data[flat_ix - offset] = value;
        }
        offset += data.len();
    });
    old
}

fn compare<P: Parameterized<f64>>(
    params: &mut P,
    grads: &P,
    mut loss_fn: impl FnMut(&P) -> f64,
    epsilon: f64,
) -> GradCheckReport {
    let flat: Vec<(String, f64)> = {
        let mut v = Vec::new();
        grads.visit_params(&mut |name, _, data| {
            for (i, &g) in data.iter().enumerate() {
                v.push((format!("{name}[{i}]"), g));
            }
        });
        v
    };
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut ok = 0usize;
    for (ix, (name, analytic)) in flat.iter().enumerate() {
        let orig = set_flat(params, ix, 0.0);
        set_flat(params, ix, orig + epsilon);
        let up = loss_fn(params);
        set_flat(params, ix, orig - epsilon);
        let dn = loss_fn(params);
        set_flat(params, ix, orig);
        let numeric = (up - dn) / (2.0 * epsilon);
        let e = rel_err(*analytic, numeric);
        if e > max_rel {
            max_rel = e;
            worst = name.clone();
        }
        if e < 1e-4 {
            ok += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        frac_within: ok as f64 / flat.len().max(1) as f64,
        n_coords: flat.len(),
        worst_param: worst,
    }
}

fn tiny_disc(input: usize, seed: u64) -> Result<Discriminator<f64>> {
    let arch = DiscArch {
        input,
        in_ch: 3,
        blocks: vec![
            super::arch::DiscLayerSpec::Dropout { rate: 0.2 },
            super::arch::DiscLayerSpec::Conv { out: 4, kernel: 3, stride: 1, pad: 1 },
            super::arch::DiscLayerSpec::Conv { out: 5, kernel: 3, stride: 2, pad: 1 },
        ],
        nin: vec![5],
        classes: 2,
        lrelu_slope: 0.2,
        feature_after_pool: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Discriminator::init(&arch, 0.1, &mut rng)
}

fn batch(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_fn(shape, |_| r.random::<f64>() * 2.0 - 1.0)
}

/// Check one loss's analytic gradients against central finite differences
/// on tiny networks. `seed` fixes the networks, inputs, and dropout masks.
pub fn grad_check(kind: LossKind, seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    match kind {
        LossKind::Supervised => {
            let mut d = tiny_disc(8, seed)?;
            let x = batch((4, 8, 8, 3), seed ^ 1);
            let labels = vec![0usize, 1, 1, 0];
            let dropout_seed = seed ^ 2;
            let loss_fn = |d: &Discriminator<f64>| {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let (out, _) = d.forward(&x, Mode::Train, Some(&mut rng)).unwrap();
                losses::loss_supervised(&out.logits, &labels).unwrap()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let (out, cache) = d.forward(&x, Mode::Train, Some(&mut rng))?;
            let (_, dlogits) = losses::loss_supervised_with_grad(&out.logits, &labels)?;
            let mut grads = d.zeros_like();
            d.backward(&cache, Some(&dlogits), None, Some(&mut grads));
            Ok(compare(&mut d, &grads, loss_fn, epsilon))
        }
        LossKind::Unsupervised => {
            let mut d = tiny_disc(8, seed)?;
            let x_real = batch((3, 8, 8, 3), seed ^ 3);
            let x_fake = batch((3, 8, 8, 3), seed ^ 4);
            let s_real = seed ^ 5;
            let s_fake = seed ^ 6;
            let loss_fn = |d: &Discriminator<f64>| {
                let mut r1 = ChaCha8Rng::seed_from_u64(s_real);
                let mut r2 = ChaCha8Rng::seed_from_u64(s_fake);
                let (real, _) = d.forward(&x_real, Mode::Train, Some(&mut r1)).unwrap();
                let (fake, _) = d.forward(&x_fake, Mode::Train, Some(&mut r2)).unwrap();
                losses::loss_unsupervised(&real.logits, &fake.logits).unwrap()
            };
            let mut r1 = ChaCha8Rng::seed_from_u64(s_real);
            let mut r2 = ChaCha8Rng::seed_from_u64(s_fake);
            let (real, cache_r) = d.forward(&x_real, Mode::Train, Some(&mut r1))?;
            let (fake, cache_f) = d.forward(&x_fake, Mode::Train, Some(&mut r2))?;
            let (_, dreal, dfake) =
                losses::loss_unsupervised_with_grad(&real.logits, &fake.logits)?;
            let mut grads = d.zeros_like();
            d.backward(&cache_r, Some(&dreal), None, Some(&mut grads));
            d.backward(&cache_f, Some(&dfake), None, Some(&mut grads));
            Ok(compare(&mut d, &grads, loss_fn, epsilon))
        }
        LossKind::FeatureMatching => {
            // Loss flows through the generator stack into the discriminator
            // feature tap; we check the generator parameters.
            let d = tiny_disc(8, seed)?;
            let arch = GenArch::tiny(6, 8, 8)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let mut g = Generator::<f64>::init(&arch, 0.1, &mut rng);
            let x_real = batch((3, 8, 8, 3), seed ^ 8);
            let mut zr = ChaCha8Rng::seed_from_u64(seed ^ 9);
            let z = Array::from_shape_fn((3, 6), |_| zr.random::<f64>() * 2.0 - 1.0);
            let s_real = seed ^ 10;
            let s_fake = seed ^ 11;
            let loss_fn = |g: &Generator<f64>| {
                let (imgs, _, _) = g.forward(&z, Mode::Train).unwrap();
                let mut r1 = ChaCha8Rng::seed_from_u64(s_real);
                let mut r2 = ChaCha8Rng::seed_from_u64(s_fake);
                let (real, _) = d.forward(&x_real, Mode::Train, Some(&mut r1)).unwrap();
                let (fake, _) = d.forward(&imgs, Mode::Train, Some(&mut r2)).unwrap();
                losses::loss_feature_matching(&real.features, &fake.features).unwrap()
            };
            let (imgs, gcache, _) = g.forward(&z, Mode::Train)?;
            let mut r1 = ChaCha8Rng::seed_from_u64(s_real);
            let mut r2 = ChaCha8Rng::seed_from_u64(s_fake);
            let (real, _) = d.forward(&x_real, Mode::Train, Some(&mut r1))?;
            let (fake, dcache) = d.forward(&imgs, Mode::Train, Some(&mut r2))?;
            let (_, dfeat) =
                losses::loss_feature_matching_with_grad(&real.features, &fake.features)?;
            let dimgs = d.backward(&dcache, None, Some(&dfeat), None);
            let mut ggrads = g.zeros_like();
            g.backward(&gcache, &dimgs, Some(&mut ggrads));
            Ok(compare(&mut g, &ggrads, loss_fn, epsilon))
        }
    }
}

/// Zero-weight symmetry: with all-zero head directions and a symmetric
/// pair of inputs, the supervised gradient on the head bias is symmetric
/// under class swap. Used by tests.
pub fn symmetric_bias_grad(seed: u64) -> Result<(f64, f64)> {
    let mut d = tiny_disc(8, seed)?;
    d.head.v.fill(0.0);
    d.head.b.fill(0.0);
    let x = batch((2, 8, 8, 3), seed);
    let (out, cache) = d.forward(&x, Mode::Eval, None)?;
    let (_, dlogits) = losses::loss_supervised_with_grad(&out.logits, &[0, 1])?;
    let mut grads = d.zeros_like();
    d.backward(&cache, Some(&dlogits), None, Some(&mut grads));
    Ok((grads.head.b[0], grads.head.b[1]))
}
