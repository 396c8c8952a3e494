//! Epoch loops for the SSL-GAN and ConvNet baseline, with run-directory
//! persistence (`config.json`, `losses.csv`, `checkpoints/`, `final.ckpt`)
//! and bit-exact resume from a checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Geometry, LabeledSubset, LoadedDataset, PatchLabel, PatchRecord};
use crate::error::{Error, Result};
use crate::model::{
    loss_feature_matching_with_grad, loss_supervised_with_grad, loss_unsupervised_with_grad,
    LossBundle,
};
use crate::nn::Mode;
use crate::seeds;

use super::state::{BaselineState, SslState};
use super::{augment_batch, lr_at, TrainConfig};

/// Diseased-class index in the K=2 head (healthy = 0).
pub const DISEASED_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_supervised: f64,
    pub l_unsupervised: f64,
    pub l_g: f64,
    pub lr: f64,
}

/// Outcome of a training run; the parameters live in `final.ckpt`.
#[derive(Debug)]
pub struct TrainRun {
    pub run_dir: PathBuf,
    pub method: String,
    pub config: TrainConfig,
    pub losses: Vec<EpochLosses>,
    /// Labeled patch pool smaller than one batch (drawn with replacement).
    pub low_data: bool,
    pub final_checkpoint: PathBuf,
}

/// `config.json` snapshot at the run root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: String,
    pub geometry: Geometry,
    pub subset: LabeledSubset,
    pub config: TrainConfig,
}

fn gather<'a>(pool: &[&'a PatchRecord], idxs: &[usize]) -> Array4<f32> {
    let (p, _, c) = pool[idxs[0]].pixels.dim();
    let mut out = Array4::<f32>::zeros((idxs.len(), p, p, c));
    for (bi, &ix) in idxs.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), bi).assign(&pool[ix].pixels);
    }
    out
}

fn draw_latents(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn((n, dim), || (rng.random::<f64>() * 2.0 - 1.0) as f32)
}

/// Class-balanced labeled batch, drawn with replacement: half diseased and
/// half healthy whenever both pools are non-empty.
fn draw_balanced<'a>(
    healthy: &[&'a PatchRecord],
    diseased: &[&'a PatchRecord],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(Array4<f32>, Vec<usize>)> {
    let mut picks: Vec<&PatchRecord> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    match (healthy.is_empty(), diseased.is_empty()) {
        (true, true) => return None,
        (false, true) => {
            for _ in 0..n {
                picks.push(healthy[rng.random_range(0..healthy.len())]);
                labels.push(0);
            }
        }
        (true, false) => {
            for _ in 0..n {
                picks.push(diseased[rng.random_range(0..diseased.len())]);
                labels.push(DISEASED_CLASS);
            }
        }
        (false, false) => {
            let n_d = n / 2;
            for _ in 0..n_d {
                picks.push(diseased[rng.random_range(0..diseased.len())]);
                labels.push(DISEASED_CLASS);
            }
            for _ in 0..n - n_d {
                picks.push(healthy[rng.random_range(0..healthy.len())]);
                labels.push(0);
            }
        }
    }
    let (p, _, c) = picks[0].pixels.dim();
    let mut out = Array4::<f32>::zeros((n, p, p, c));
    for (bi, rec) in picks.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), bi).assign(&rec.pixels);
    }
    Some((out, labels))
}

/// One alternating update: ADAM step on the discriminator minimizing
/// `L_D = L_supervised + L_unsupervised`, EMA update, then an ADAM step on
/// the generator minimizing the feature-matching loss with statistics
/// recomputed against the just-updated discriminator.
///
/// An absent labeled batch degrades to the unsupervised-only loss.
pub fn train_step_ssl(
    state: &mut SslState,
    labeled: Option<(&Array4<f32>, &[usize])>,
    unlabeled: &Array4<f32>,
    z: &Array2<f32>,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBundle> {
    let mut d_grads = state.disc.zeros_like();

    // Discriminator step.
    let l_sup = match labeled {
        Some((batch, labels)) if !labels.is_empty() => {
            let (out, cache) = state.disc.forward(batch, Mode::Train, Some(rng))?;
            let (loss, dlogits) = loss_supervised_with_grad(&out.logits, labels)?;
            state.disc.backward(&cache, Some(&dlogits), None, Some(&mut d_grads));
            loss as f64
        }
        _ => 0.0,
    };
    let (real_out, real_cache) = state.disc.forward(unlabeled, Mode::Train, Some(rng))?;
    let (fakes, _, stats) = state.gen.forward(z, Mode::Train)?;
    state.gen.commit_bn_stats(&stats);
    let (fake_out, fake_cache) = state.disc.forward(&fakes, Mode::Train, Some(rng))?;
    let (l_unsup, dreal, dfake) =
        loss_unsupervised_with_grad(&real_out.logits, &fake_out.logits)?;
    state.disc.backward(&real_cache, Some(&dreal), None, Some(&mut d_grads));
    state.disc.backward(&fake_cache, Some(&dfake), None, Some(&mut d_grads));
    state.opt_d.step(&mut state.disc, &d_grads, lr);
    state.ema.update(&state.disc)?;

    // Generator step against the updated discriminator.
    let (fakes, g_cache, stats) = state.gen.forward(z, Mode::Train)?;
    state.gen.commit_bn_stats(&stats);
    let (real_out, _) = state.disc.forward(unlabeled, Mode::Train, Some(rng))?;
    let (fake_out, fake_cache) = state.disc.forward(&fakes, Mode::Train, Some(rng))?;
    let (l_g, dfeat) =
        loss_feature_matching_with_grad(&real_out.features, &fake_out.features)?;
    let dimgs = state.disc.backward(&fake_cache, None, Some(&dfeat), None);
    let mut g_grads = state.gen.zeros_like();
    state.gen.backward(&g_cache, &dimgs, Some(&mut g_grads));
    state.opt_g.step(&mut state.gen, &g_grads, lr);

    Ok(LossBundle::new(l_sup, l_unsup as f64, l_g as f64))
}

struct Pools<'a> {
    all_train: Vec<&'a PatchRecord>,
    labeled_healthy: Vec<&'a PatchRecord>,
    labeled_diseased: Vec<&'a PatchRecord>,
}

fn build_pools<'a>(dataset: &'a LoadedDataset, subset: &LabeledSubset) -> Result<Pools<'a>> {
    let mut all_train = Vec::new();
    for id in &dataset.manifest.split.train {
        let patches = dataset
            .patches
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("train id {id} not in dataset")))?;
        all_train.extend(patches.iter());
    }
    if all_train.is_empty() {
        return Err(Error::InvalidArgument("training split has no patches".into()));
    }
    let mut labeled_healthy = Vec::new();
    let mut labeled_diseased = Vec::new();
    for id in &subset.labeled {
        let patches = dataset
            .patches
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("labeled id {id} not in dataset")))?;
        for rec in patches {
            match rec.label {
                PatchLabel::Healthy => labeled_healthy.push(rec),
                PatchLabel::Diseased => labeled_diseased.push(rec),
                PatchLabel::Unlabeled => {}
            }
        }
    }
    Ok(Pools { all_train, labeled_healthy, labeled_diseased })
}

fn prepare_run_dir(
    run_dir: &Path,
    meta: &RunMeta,
    resume: bool,
) -> Result<()> {
    let config_path = run_dir.join("config.json");
    if config_path.exists() {
        if !resume {
            return Err(Error::RunDirCollision(run_dir.to_path_buf()));
        }
        let existing: RunMeta = serde_json::from_slice(
            &fs::read(&config_path).map_err(|e| Error::io(&config_path, e))?,
        )
        .map_err(|e| Error::Json { path: config_path.clone(), source: e })?;
        if existing.config != meta.config || existing.method != meta.method {
            return Err(Error::InvalidArgument(
                "resume requested but run configuration differs".into(),
            ));
        }
        return Ok(());
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let bytes = serde_json::to_vec_pretty(meta)
        .map_err(|e| Error::Json { path: config_path.clone(), source: e })?;
    fs::write(&config_path, bytes).map_err(|e| Error::io(&config_path, e))?;
    Ok(())
}

const LOSSES_HEADER: &str = "epoch,l_supervised,l_unsupervised,l_g,lr";

fn read_losses(path: &Path) -> Result<Vec<EpochLosses>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            continue;
        }
        out.push(EpochLosses {
            epoch: fields[0].parse().unwrap_or(0),
            l_supervised: fields[1].parse().unwrap_or(f64::NAN),
            l_unsupervised: fields[2].parse().unwrap_or(f64::NAN),
            l_g: fields[3].parse().unwrap_or(f64::NAN),
            lr: fields[4].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

fn write_losses(path: &Path, losses: &[EpochLosses]) -> Result<()> {
    let mut text = String::from(LOSSES_HEADER);
    text.push('\n');
    for l in losses {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            l.epoch, l.l_supervised, l.l_unsupervised, l.l_g, l.lr
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn latest_checkpoint(run_dir: &Path) -> Option<(PathBuf, usize)> {
    let final_path = run_dir.join("final.ckpt");
    if final_path.exists() {
        if let Ok(file) = crate::checkpoint::TensorFile::read(&final_path) {
            if let Some(e) = file.meta.get("epoch").and_then(|v| v.as_u64()) {
                return Some((final_path, e as usize));
            }
        }
    }
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(PathBuf, usize)> = None;
    if let Ok(entries) = fs::read_dir(&dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
                if let Ok(e) = num.parse::<usize>() {
                    if best.as_ref().map_or(true, |(_, b)| e > *b) {
                        best = Some((entry.path(), e));
                    }
                }
            }
        }
    }
    best
}

/// Train the semi-supervised GAN. Each epoch iterates the full training
/// patch pool (labeled and unlabeled images both feed the unsupervised real
/// term) in shuffled batches; every step also draws a class-balanced
/// labeled batch (with replacement) and a fresh latent batch.
pub fn train_ssl(
    config: &TrainConfig,
    dataset: &LoadedDataset,
    subset: &LabeledSubset,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainRun> {
    config.validate()?;
    let pools = build_pools(dataset, subset)?;
    if pools.labeled_healthy.is_empty() && pools.labeled_diseased.is_empty() {
        log::warn!("labeled pool is empty: supervised loss term disabled");
    }
    let low_data =
        pools.labeled_healthy.len() + pools.labeled_diseased.len() < config.batch_size;
    let meta = RunMeta {
        method: "ssl".into(),
        geometry: dataset.geometry,
        subset: subset.clone(),
        config: config.clone(),
    };
    prepare_run_dir(run_dir, &meta, resume)?;

    let losses_path = run_dir.join("losses.csv");
    let mut state = SslState::init(config)?;
    let mut losses: Vec<EpochLosses> = Vec::new();
    let mut start_epoch = 0usize;
    if resume {
        if let Some((ckpt, epoch)) = latest_checkpoint(run_dir) {
            state = SslState::load(&ckpt, config)?;
            start_epoch = epoch + 1;
            losses = read_losses(&losses_path)?;
            losses.retain(|l| l.epoch <= epoch);
            log::info!("resuming from {} after epoch {epoch}", ckpt.display());
        }
    }

    for epoch in start_epoch..config.epochs {
        let mut rng = seeds::rng(config.seed, "epoch", &[epoch as u64]);
        let lr = lr_at(epoch, config)?;
        let mut order: Vec<usize> = (0..pools.all_train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let unlabeled = gather(&pools.all_train, chunk);
            let unlabeled = augment_batch(&unlabeled, &config.augment, &mut rng);
            let labeled = draw_balanced(
                &pools.labeled_healthy,
                &pools.labeled_diseased,
                config.batch_size,
                &mut rng,
            );
            let labeled = labeled
                .map(|(batch, labels)| (augment_batch(&batch, &config.augment, &mut rng), labels));
            let z = draw_latents(config.batch_size, config.latent_dim, &mut rng);
            let bundle = train_step_ssl(
                &mut state,
                labeled.as_ref().map(|(b, l)| (b, l.as_slice())),
                &unlabeled,
                &z,
                lr,
                &mut rng,
            )?;
            sums.0 += bundle.l_supervised;
            sums.1 += bundle.l_unsupervised;
            sums.2 += bundle.l_g;
            steps += 1;
        }
        let n = steps as f64;
        losses.push(EpochLosses {
            epoch,
            l_supervised: sums.0 / n,
            l_unsupervised: sums.1 / n,
            l_g: sums.2 / n,
            lr,
        });
        write_losses(&losses_path, &losses)?;
        state.epoch = Some(epoch);
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            state.save(&run_dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt")))?;
        }
    }
    let final_path = run_dir.join("final.ckpt");
    state.save(&final_path)?;
    Ok(TrainRun {
        run_dir: run_dir.to_path_buf(),
        method: "ssl".into(),
        config: config.clone(),
        losses,
        low_data,
        final_checkpoint: final_path,
    })
}

/// Train the supervised ConvNet baseline (the discriminator architecture
/// with the supervised loss only) on the labeled patches, with the same
/// augmentation, EMA, and schedule machinery.
pub fn train_baseline(
    config: &TrainConfig,
    dataset: &LoadedDataset,
    subset: &LabeledSubset,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainRun> {
    config.validate()?;
    let mut labeled: Vec<&PatchRecord> = Vec::new();
    for id in &subset.labeled {
        let patches = dataset
            .patches
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("labeled id {id} not in dataset")))?;
        labeled.extend(patches.iter().filter(|r| r.label != PatchLabel::Unlabeled));
    }
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("baseline needs labeled patches".into()));
    }
    let low_data = labeled.len() < config.batch_size;
    if low_data {
        log::warn!(
            "labeled pool ({} patches) smaller than one batch; drawing with replacement",
            labeled.len()
        );
    }
    let meta = RunMeta {
        method: "convnet".into(),
        geometry: dataset.geometry,
        subset: subset.clone(),
        config: config.clone(),
    };
    prepare_run_dir(run_dir, &meta, resume)?;

    let losses_path = run_dir.join("losses.csv");
    let mut state = BaselineState::init(config)?;
    let mut losses: Vec<EpochLosses> = Vec::new();
    let mut start_epoch = 0usize;
    if resume {
        if let Some((ckpt, epoch)) = latest_checkpoint(run_dir) {
            state = BaselineState::load(&ckpt, config)?;
            start_epoch = epoch + 1;
            losses = read_losses(&losses_path)?;
            losses.retain(|l| l.epoch <= epoch);
        }
    }

    for epoch in start_epoch..config.epochs {
        let mut rng = seeds::rng(config.seed, "epoch", &[epoch as u64]);
        let lr = lr_at(epoch, config)?;
        let batches: Vec<Vec<usize>> = if low_data {
            vec![(0..config.batch_size)
                .map(|_| rng.random_range(0..labeled.len()))
                .collect()]
        } else {
            let mut order: Vec<usize> = (0..labeled.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(config.batch_size).map(|c| c.to_vec()).collect()
        };
        let mut sum = 0.0f64;
        let mut steps = 0usize;
        for idxs in batches {
            let batch = gather(&labeled, &idxs);
            let batch = augment_batch(&batch, &config.augment, &mut rng);
            let labels: Vec<usize> = idxs
                .iter()
                .map(|&ix| usize::from(labeled[ix].label == PatchLabel::Diseased))
                .collect();
            let (out, cache) = state.disc.forward(&batch, Mode::Train, Some(&mut rng))?;
            let (loss, dlogits) = loss_supervised_with_grad(&out.logits, &labels)?;
            let mut grads = state.disc.zeros_like();
            state.disc.backward(&cache, Some(&dlogits), None, Some(&mut grads));
            state.opt_d.step(&mut state.disc, &grads, lr);
            state.ema.update(&state.disc)?;
            sum += loss as f64;
            steps += 1;
        }
        losses.push(EpochLosses {
            epoch,
            l_supervised: sum / steps as f64,
            l_unsupervised: 0.0,
            l_g: 0.0,
            lr,
        });
        write_losses(&losses_path, &losses)?;
        state.epoch = Some(epoch);
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            state.save(&run_dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt")))?;
        }
    }
    let final_path = run_dir.join("final.ckpt");
    state.save(&final_path)?;
    Ok(TrainRun {
        run_dir: run_dir.to_path_buf(),
        method: "convnet".into(),
        config: config.clone(),
        losses,
        low_data,
        final_checkpoint: final_path,
    })
}
