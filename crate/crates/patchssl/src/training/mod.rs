//! Training loops: alternating ADAM updates for the semi-supervised GAN,
//! the supervised ConvNet baseline, EMA shadow weights, the linear-decay
//! learning-rate schedule, and crop/flip augmentation.

mod run;
mod state;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiscArch, GenArch};
use crate::nn::{Parameterized, Scalar};

pub use run::{train_baseline, train_ssl, train_step_ssl, EpochLosses, TrainRun};
pub use state::{load_eval_discriminator, BaselineState, SslState};

/// Crop/flip augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Reflect-pad margin and maximum translation jitter, in pixels.
    pub translate: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, translate: 2, hflip: true, vflip: true }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        !self.enabled || (self.translate == 0 && !self.hflip && !self.vflip)
    }
}

/// All training hyperparameters plus the network architectures. Defaults
/// are the full-scale values; [`TrainConfig::desk`] builds a tiny
/// configuration for synthetic desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lrelu_slope: f64,
    pub ema_decay: f64,
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Constant learning rate before this epoch, linear to zero at `epochs`.
    pub lr_decay_start_epoch: usize,
    pub weight_init_sigma: f64,
    pub latent_dim: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Checkpoint cadence in epochs (plus a final checkpoint).
    pub checkpoint_every: usize,
    pub disc: DiscArch,
    pub gen: GenArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1200,
            batch_size: 100,
            lrelu_slope: 0.2,
            ema_decay: 0.999,
            adam_alpha: 3e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_start_epoch: 1000,
            weight_init_sigma: 0.05,
            latent_dim: 100,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 100,
            disc: DiscArch::paper(32, 2).expect("paper arch is valid"),
            gen: GenArch::paper(100),
        }
    }
}

impl TrainConfig {
    /// Tiny networks and a short schedule for `patch_size`-pixel inputs.
    pub fn desk(patch_size: usize, seed: u64) -> Result<Self> {
        let latent = 16;
        Ok(TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr_decay_start_epoch: 150,
            latent_dim: latent,
            seed,
            checkpoint_every: 100,
            disc: DiscArch::tiny(patch_size, 2, (12, 24), 0.2)?,
            gen: GenArch::tiny(latent, patch_size, 16)?,
            ..TrainConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument("epochs, batch_size, latent_dim must be positive".into()));
        }
        if self.adam_alpha <= 0.0 || self.ema_decay < 0.0 || self.ema_decay >= 1.0 {
            return Err(Error::InvalidArgument("bad optimizer or EMA constants".into()));
        }
        if self.lr_decay_start_epoch > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "lr_decay_start_epoch {} > epochs {}",
                self.lr_decay_start_epoch, self.epochs
            )));
        }
        if self.gen.latent != self.latent_dim {
            return Err(Error::InvalidArgument("generator arch latent differs from latent_dim".into()));
        }
        if self.gen.output_size() != self.disc.input {
            return Err(Error::Geometry(format!(
                "generator emits {} but discriminator expects {}",
                self.gen.output_size(),
                self.disc.input
            )));
        }
        self.disc.validate()
    }
}

/// Seed for the labeled-subset draw of one experiment cell, derived from
/// the master seed so every "random sampling" is reproducible.
pub fn sample_subset_seed(master: u64, labeled_count: usize, repeat: usize) -> u64 {
    crate::seeds::derive(master, "subset", &[labeled_count as u64, repeat as u64])
}

/// Learning rate at `epoch`: constant before the decay start, then linear
/// to zero at `epochs`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..={}",
            config.epochs
        )));
    }
    let start = config.lr_decay_start_epoch;
    if epoch < start {
        Ok(config.adam_alpha)
    } else if config.epochs == start {
        Ok(if epoch == config.epochs { 0.0 } else { config.adam_alpha })
    } else {
        Ok(config.adam_alpha * (config.epochs - epoch) as f64 / (config.epochs - start) as f64)
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    // Symmetric reflection: -1 -> 0, -2 -> 1, n -> n-1.
    let n = n as isize;
    let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
    j.clamp(0, n - 1) as usize
}

/// Per sample: reflect-pad by `translate`, take a random crop of the
/// original size, then independent horizontal/vertical flips. Identity
/// when everything is disabled.
pub fn augment_batch(
    batch: &Array4<f32>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Array4<f32> {
    if cfg.is_identity() {
        return batch.clone();
    }
    let (b, h, w, c) = batch.dim();
    let t = cfg.translate;
    let mut out = Array4::<f32>::zeros((b, h, w, c));
    for bi in 0..b {
        let (dy, dx) = if t > 0 {
            (rng.random_range(0..=2 * t), rng.random_range(0..=2 * t))
        } else {
            (t, t)
        };
        let fh = cfg.hflip && rng.random::<f64>() < 0.5;
        let fv = cfg.vflip && rng.random::<f64>() < 0.5;
        for y in 0..h {
            let sy = reflect_index(y as isize + dy as isize - t as isize, h);
            let oy = if fv { h - 1 - y } else { y };
            for x in 0..w {
                let sx = reflect_index(x as isize + dx as isize - t as isize, w);
                let ox = if fh { w - 1 - x } else { x };
                for ch in 0..c {
                    out[(bi, oy, ox, ch)] = batch[(bi, sy, sx, ch)];
                }
            }
        }
    }
    out
}

/// EMA shadow of a parameter set, started at zero:
/// `shadow <- decay * shadow + (1 - decay) * params`.
///
/// `update_count` tracks the zero-start bias; inference weights divide by
/// `1 - decay^count` (see [`EmaState::write_debiased_to`]).
#[derive(Debug, Clone)]
pub struct EmaState<F: Scalar> {
    pub decay: f64,
    pub update_count: u64,
    shadow: Vec<(String, Vec<F>)>,
}

impl<F: Scalar> EmaState<F> {
    pub fn zeros_from<P: Parameterized<F>>(params: &P, decay: f64) -> Self {
        let shadow = params
            .collect_params()
            .into_iter()
            .map(|(name, _, data)| (name, vec![F::zero(); data.len()]))
            .collect();
        EmaState { decay, update_count: 0, shadow }
    }

    pub fn update<P: Parameterized<F>>(&mut self, params: &P) -> Result<()> {
        let d = F::from_f64(self.decay);
        let one_d = F::one() - d;
        let mut ix = 0;
        let mut err = None;
        params.visit_params(&mut |name, _, data| {
            if err.is_some() {
                return;
            }
            let (sname, shadow) = &mut self.shadow[ix];
            ix += 1;
            if sname != name || shadow.len() != data.len() {
                err = Some(Error::Shape(format!(
                    "EMA shadow mismatch at {name}: expected {sname} with {} values",
                    shadow.len()
                )));
                return;
            }
            for (s, &p) in shadow.iter_mut().zip(data) {
                *s = d * *s + one_d * p;
            }
        });
        match err {
            Some(e) => Err(e),
            None => {
                self.update_count += 1;
                Ok(())
            }
        }
    }

    /// Copy the raw shadow values into `target`.
    pub fn write_raw_to<P: Parameterized<F>>(&self, target: &mut P) {
        let mut ix = 0;
        target.visit_params_mut(&mut |name, _, data| {
            let (sname, shadow) = &self.shadow[ix];
            ix += 1;
            assert_eq!(sname, name, "EMA shadow order mismatch");
            data.copy_from_slice(shadow);
        });
    }

    /// Copy zero-start-debiased weights `shadow / (1 - decay^count)` into
    /// `target`. With no updates yet the target is left untouched.
    pub fn write_debiased_to<P: Parameterized<F>>(&self, target: &mut P) {
        if self.update_count == 0 {
            return;
        }
        let correction = 1.0 - self.decay.powi(self.update_count as i32);
        let scale = F::from_f64(1.0 / correction);
        let mut ix = 0;
        target.visit_params_mut(&mut |name, _, data| {
            let (sname, shadow) = &self.shadow[ix];
            ix += 1;
            assert_eq!(sname, name, "EMA shadow order mismatch");
            for (d, &s) in data.iter_mut().zip(shadow) {
                *d = s * scale;
            }
        });
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<F>)> {
        self.shadow
            .iter()
            .map(|(name, data)| (format!("{prefix}{name}"), vec![data.len()], data.clone()))
            .collect()
    }

    pub fn restore(&mut self, name: &str, data: Vec<F>) -> Result<()> {
        for (sname, shadow) in &mut self.shadow {
            if sname == name {
                if shadow.len() != data.len() {
                    return Err(Error::Shape(format!("EMA tensor {name} length mismatch")));
                }
                *shadow = data;
                return Ok(());
            }
        }
        Err(Error::Shape(format!("unknown EMA tensor {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand_chacha::rand_core::SeedableRng;

    fn desk_config() -> TrainConfig {
        TrainConfig::desk(16, 0).unwrap()
    }

    #[test]
    fn schedule_matches_table_defaults() {
        let config = TrainConfig::default();
        assert_eq!(lr_at(0, &config).unwrap(), 3e-4);
        assert_eq!(lr_at(500, &config).unwrap(), 3e-4);
        assert_eq!(lr_at(999, &config).unwrap(), 3e-4);
        assert_eq!(lr_at(1000, &config).unwrap(), 3e-4);
        assert_eq!(lr_at(1100, &config).unwrap(), 1.5e-4);
        assert_eq!(lr_at(1200, &config).unwrap(), 0.0);
        assert!(lr_at(1201, &config).is_err());
    }

    #[test]
    fn schedule_is_nonincreasing_and_continuous() {
        let config = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for e in 0..=config.epochs {
            let lr = lr_at(e, &config).unwrap();
            assert!(lr <= prev + 1e-15, "epoch {e}");
            prev = lr;
        }
        let at_start = lr_at(config.lr_decay_start_epoch, &config).unwrap();
        assert!((at_start - config.adam_alpha).abs() < 1e-18);
    }

    #[test]
    fn augment_disabled_is_identity() {
        let cfg = AugmentConfig { enabled: false, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Array::from_shape_fn((2, 8, 8, 3), |(b, y, x, c)| (b + y + x + c) as f32);
        assert_eq!(augment_batch(&batch, &cfg, &mut rng), batch);
        let cfg = AugmentConfig { enabled: true, translate: 0, hflip: false, vflip: false };
        assert_eq!(augment_batch(&batch, &cfg, &mut rng), batch);
    }

    #[test]
    fn augment_preserves_shape_and_value_set() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Array::from_shape_fn((4, 8, 8, 3), |(b, y, x, c)| {
            (b * 1000 + y * 100 + x * 10 + c) as f32
        });
        let out = augment_batch(&batch, &cfg, &mut rng);
        assert_eq!(out.dim(), batch.dim());
        for bi in 0..4 {
            let sample: std::collections::BTreeSet<u64> = batch
                .index_axis(ndarray::Axis(0), bi)
                .iter()
                .map(|v| v.to_bits() as u64)
                .collect();
            for v in out.index_axis(ndarray::Axis(0), bi).iter() {
                assert!(
                    sample.contains(&(v.to_bits() as u64)),
                    "crop/flip must permute existing values"
                );
            }
        }
    }

    #[test]
    fn augment_replays_under_fixed_seed() {
        let cfg = AugmentConfig::default();
        let batch = Array::from_shape_fn((3, 8, 8, 3), |(b, y, x, c)| (b + y * x + c) as f32);
        let a = augment_batch(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment_batch(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    struct Flat(Vec<f64>);
    impl Parameterized<f64> for Flat {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            f("w", &[self.0.len()], &self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            let n = self.0.len();
            f("w", &[n], &mut self.0);
        }
    }

    #[test]
    fn ema_single_step_definition() {
        let params = Flat(vec![1.0]);
        let mut ema = EmaState::zeros_from(&params, 0.999);
        ema.update(&params).unwrap();
        assert!((ema.shadow[0].1[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ema_decay_zero_copies_params() {
        let params = Flat(vec![0.3, -0.7]);
        let mut ema = EmaState::zeros_from(&params, 0.0);
        ema.update(&params).unwrap();
        let mut target = Flat(vec![0.0, 0.0]);
        ema.write_raw_to(&mut target);
        assert_eq!(target.0, vec![0.3, -0.7]);
    }

    #[test]
    fn ema_closed_form_for_constant_params() {
        let theta = 0.73;
        let params = Flat(vec![theta]);
        let mut ema = EmaState::zeros_from(&params, 0.999);
        for _ in 0..1000 {
            ema.update(&params).unwrap();
        }
        let want = theta * (1.0 - 0.999f64.powi(1000));
        assert!((ema.shadow[0].1[0] - want).abs() < 1e-10);
        // Debiasing recovers theta for constant params.
        let mut target = Flat(vec![0.0]);
        ema.write_debiased_to(&mut target);
        assert!((target.0[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let params = Flat(vec![1.0, 2.0]);
        let mut ema = EmaState::zeros_from(&params, 0.5);
        let grown = Flat(vec![1.0, 2.0, 3.0]);
        assert!(matches!(ema.update(&grown), Err(Error::Shape(_))));
    }

    #[test]
    fn desk_config_validates() {
        desk_config().validate().unwrap();
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn mismatched_gen_disc_sizes_rejected() {
        let mut config = desk_config();
        config.gen = GenArch::tiny(16, 32, 16).unwrap();
        assert!(config.validate().is_err());
    }
}
