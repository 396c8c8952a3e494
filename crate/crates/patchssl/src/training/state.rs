//! Mutable training state (networks, optimizers, EMA) and its bit-exact
//! checkpoint round trip.

use std::path::Path;

use crate::checkpoint::{TensorFile, TensorWriter};
use crate::error::{Error, Result};
use crate::model::{Discriminator, Generator};
use crate::nn::{Adam, Parameterized};
use crate::seeds;

use super::{EmaState, TrainConfig};

/// Everything the SSL-GAN loop mutates.
pub struct SslState {
    pub disc: Discriminator<f32>,
    pub gen: Generator<f32>,
    pub opt_d: Adam<f32>,
    pub opt_g: Adam<f32>,
    pub ema: EmaState<f32>,
    /// Last completed epoch, if any.
    pub epoch: Option<usize>,
}

/// Everything the supervised baseline loop mutates.
pub struct BaselineState {
    pub disc: Discriminator<f32>,
    pub opt_d: Adam<f32>,
    pub ema: EmaState<f32>,
    pub epoch: Option<usize>,
}

fn add_params<P: Parameterized<f32>>(
    w: &mut TensorWriter,
    prefix: &str,
    params: &P,
) -> Result<()> {
    let mut entries = Vec::new();
    params.visit_params(&mut |name, shape, data| {
        entries.push((format!("{prefix}{name}"), shape.to_vec(), data.to_vec()));
    });
    params.visit_state(&mut |name, shape, data| {
        entries.push((format!("{prefix}{name}"), shape.to_vec(), data.to_vec()));
    });
    for (name, shape, data) in entries {
        w.add(&name, &shape, &data)?;
    }
    Ok(())
}

fn load_params<P: Parameterized<f32>>(
    file: &TensorFile,
    prefix: &str,
    params: &mut P,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut fill = |name: &str, data: &mut [f32]| {
        let full = format!("{prefix}{name}");
        match file.get(&full) {
            Some((_, values)) if values.len() == data.len() => data.copy_from_slice(values),
            Some(_) => missing.push(format!("{full} (length mismatch)")),
            None => missing.push(full),
        }
    };
    params.visit_params_mut(&mut |name, _, data| fill(name, data));
    params.visit_state_mut(&mut |name, _, data| fill(name, data));
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint {
            path: file.path.clone(),
            msg: format!("missing tensors: {}", missing.join(", ")),
        })
    }
}

fn add_named(w: &mut TensorWriter, tensors: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<()> {
    for (name, shape, data) in tensors {
        w.add(&name, &shape, &data)?;
    }
    Ok(())
}

impl SslState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng_d = seeds::rng(config.seed, "init-d", &[]);
        let mut rng_g = seeds::rng(config.seed, "init-g", &[]);
        let disc = Discriminator::init(&config.disc, config.weight_init_sigma, &mut rng_d)?;
        let gen = Generator::init(&config.gen, config.weight_init_sigma, &mut rng_g);
        let ema = EmaState::zeros_from(&disc, config.ema_decay);
        Ok(SslState {
            disc,
            gen,
            opt_d: Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps),
            opt_g: Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps),
            ema,
            epoch: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = TensorWriter::new();
        add_params(&mut w, "d.", &self.disc)?;
        add_params(&mut w, "g.", &self.gen)?;
        add_named(&mut w, self.ema.tensors("ema."))?;
        add_named(&mut w, self.opt_d.state_tensors("opt_d."))?;
        add_named(&mut w, self.opt_g.state_tensors("opt_g."))?;
        w.set_meta("method", serde_json::json!("ssl"));
        w.set_meta("epoch", serde_json::json!(self.epoch));
        w.set_meta("ema_update_count", serde_json::json!(self.ema.update_count));
        w.set_meta("ema_decay", serde_json::json!(self.ema.decay));
        w.set_meta("opt_d_t", serde_json::json!(self.opt_d.t));
        w.set_meta("opt_g_t", serde_json::json!(self.opt_g.t));
        w.write(path)
    }

    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        let mut state = SslState::init(config)?;
        let file = TensorFile::read(path)?;
        load_params(&file, "d.", &mut state.disc)?;
        load_params(&file, "g.", &mut state.gen)?;
        for name in file.names().map(str::to_string).collect::<Vec<_>>() {
            if let Some(rest) = name.strip_prefix("ema.") {
                let (_, data) = file.get(&name).unwrap();
                state.ema.restore(rest, data.to_vec())?;
            } else if let Some(rest) = name.strip_prefix("opt_d.") {
                let (_, data) = file.get(&name).unwrap();
                state.opt_d.restore_state(rest, data.to_vec());
            } else if let Some(rest) = name.strip_prefix("opt_g.") {
                let (_, data) = file.get(&name).unwrap();
                state.opt_g.restore_state(rest, data.to_vec());
            }
        }
        state.ema.update_count = file.meta_u64("ema_update_count").unwrap_or(0);
        state.opt_d.t = file.meta_u64("opt_d_t").unwrap_or(0);
        state.opt_g.t = file.meta_u64("opt_g_t").unwrap_or(0);
        state.epoch = file.meta.get("epoch").and_then(|v| v.as_u64()).map(|v| v as usize);
        Ok(state)
    }
}

impl BaselineState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng_d = seeds::rng(config.seed, "init-d", &[]);
        let disc = Discriminator::init(&config.disc, config.weight_init_sigma, &mut rng_d)?;
        let ema = EmaState::zeros_from(&disc, config.ema_decay);
        Ok(BaselineState {
            disc,
            opt_d: Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps),
            ema,
            epoch: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = TensorWriter::new();
        add_params(&mut w, "d.", &self.disc)?;
        add_named(&mut w, self.ema.tensors("ema."))?;
        add_named(&mut w, self.opt_d.state_tensors("opt_d."))?;
        w.set_meta("method", serde_json::json!("convnet"));
        w.set_meta("epoch", serde_json::json!(self.epoch));
        w.set_meta("ema_update_count", serde_json::json!(self.ema.update_count));
        w.set_meta("ema_decay", serde_json::json!(self.ema.decay));
        w.set_meta("opt_d_t", serde_json::json!(self.opt_d.t));
        w.write(path)
    }

    pub fn load(path: &Path, config: &TrainConfig) -> Result<Self> {
        let mut state = BaselineState::init(config)?;
        let file = TensorFile::read(path)?;
        load_params(&file, "d.", &mut state.disc)?;
        for name in file.names().map(str::to_string).collect::<Vec<_>>() {
            if let Some(rest) = name.strip_prefix("ema.") {
                let (_, data) = file.get(&name).unwrap();
                state.ema.restore(rest, data.to_vec())?;
            } else if let Some(rest) = name.strip_prefix("opt_d.") {
                let (_, data) = file.get(&name).unwrap();
                state.opt_d.restore_state(rest, data.to_vec());
            }
        }
        state.ema.update_count = file.meta_u64("ema_update_count").unwrap_or(0);
        state.opt_d.t = file.meta_u64("opt_d_t").unwrap_or(0);
        state.epoch = file.meta.get("epoch").and_then(|v| v.as_u64()).map(|v| v as usize);
        Ok(state)
    }
}

/// Rebuild the discriminator from a checkpoint with debiased EMA weights
/// for inference. Falls back to the raw parameters when the EMA has never
/// been updated.
pub fn load_eval_discriminator(path: &Path, config: &TrainConfig) -> Result<Discriminator<f32>> {
    let file = TensorFile::read(path)?;
    let mut rng = seeds::rng(config.seed, "init-d", &[]);
    let mut disc = Discriminator::init(&config.disc, config.weight_init_sigma, &mut rng)?;
    load_params(&file, "d.", &mut disc)?;
    let count = file.meta_u64("ema_update_count").unwrap_or(0);
    if count > 0 {
        let mut ema = EmaState::zeros_from(&disc, file.meta.get("ema_decay").and_then(|v| v.as_f64()).unwrap_or(0.999));
        for name in file.names().map(str::to_string).collect::<Vec<_>>() {
            if let Some(rest) = name.strip_prefix("ema.") {
                let (_, data) = file.get(&name).unwrap();
                ema.restore(rest, data.to_vec())?;
            }
        }
        ema.update_count = count;
        ema.write_debiased_to(&mut disc);
    }
    Ok(disc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits<P: Parameterized<f32>>(p: &P) -> Vec<u32> {
        let mut out = Vec::new();
        p.visit_params(&mut |_, _, data| out.extend(data.iter().map(|v| v.to_bits())));
        p.visit_state(&mut |_, _, data| out.extend(data.iter().map(|v| v.to_bits())));
        out
    }

    #[test]
    fn ssl_state_round_trips_bit_exactly() {
        let config = TrainConfig::desk(16, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");

        let mut state = SslState::init(&config).unwrap();
        // Give the optimizer and EMA some non-trivial state.
        let grads = state.disc.zeros_like();
        state.opt_d.step(&mut state.disc, &grads, 1e-3);
        state.ema.update(&state.disc).unwrap();
        state.epoch = Some(4);
        state.save(&path).unwrap();

        let loaded = SslState::load(&path, &config).unwrap();
        assert_eq!(bits(&state.disc), bits(&loaded.disc));
        assert_eq!(bits(&state.gen), bits(&loaded.gen));
        assert_eq!(loaded.epoch, Some(4));
        assert_eq!(loaded.ema.update_count, 1);
        assert_eq!(loaded.opt_d.t, 1);
        // EMA arrays round-trip bit-exactly too.
        let mut a = state.disc.clone();
        let mut b = loaded.disc.clone();
        state.ema.write_raw_to(&mut a);
        loaded.ema.write_raw_to(&mut b);
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn eval_discriminator_uses_debiased_ema() {
        let config = TrainConfig::desk(16, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");

        let mut state = SslState::init(&config).unwrap();
        state.ema.update(&state.disc).unwrap();
        state.save(&path).unwrap();

        // After one update the debiased EMA of constant params equals them.
        let eval = load_eval_discriminator(&path, &config).unwrap();
        assert_eq!(bits(&state.disc)[..100], bits(&eval)[..100]);
    }
}
