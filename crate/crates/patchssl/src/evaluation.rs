//! Patch- and image-level evaluation: diseased logits, sigmoid-sum image
//! scores, tie-aware ROC-AUC, Youden-J threshold selection, and the
//! labeled-count x repeats experiment harness.

use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageClass, LoadedDataset, PatchLabel, SplitManifest};
use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::nn::Mode;
use crate::seeds;
use crate::training::{
    load_eval_discriminator, sample_subset_seed, train_baseline, train_ssl, TrainConfig, TrainRun,
};

/// Per-image evaluation record: the diseased-class logit of every patch
/// (row-major grid order) and the aggregated sigmoid-sum score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub patch_logits: Vec<f64>,
    pub score: f64,
    pub true_label: ImageClass,
}

impl ImageScore {
    pub fn recompute_score(&self) -> f64 {
        aggregate_image_score(&self.patch_logits).expect("non-empty patch logits")
    }
}

/// ROC summary. `threshold` (and the operating point) is validation-chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocReport {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub threshold: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Binary log-odds of diseased vs healthy among the real classes.
pub fn patch_diseased_logit(logits: &[f64]) -> Result<f64> {
    if logits.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "binary task expects 2 logits, got {}",
            logits.len()
        )));
    }
    Ok(logits[1] - logits[0])
}

/// Image abnormality score: the sum of logistic sigmoids of the per-patch
/// diseased logits.
pub fn aggregate_image_score(patch_logits: &[f64]) -> Result<f64> {
    if patch_logits.is_empty() {
        return Err(Error::InvalidArgument("no patch logits to aggregate".into()));
    }
    Ok(patch_logits.iter().map(|&l| sigmoid(l)).sum())
}

/// Tie-aware Mann-Whitney AUC: the probability that a random positive
/// outscores a random negative, ties counted half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average rank within exact-tie groups (1-indexed ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &ix in &order[i..j] {
            if labels[ix] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn sens_spec_at(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s > threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    (
        tp as f64 / (tp + fn_).max(1) as f64,
        tn as f64 / (tn + fp).max(1) as f64,
    )
}

/// Threshold maximizing Youden's J (sensitivity + specificity - 1) with the
/// decision rule `score > threshold`. Candidates are the midpoints between
/// adjacent distinct scores; J ties resolve to the smallest candidate.
pub fn choose_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if !labels.iter().any(|&l| l) || !labels.iter().any(|&l| !l) {
        return Err(Error::UndefinedAuc("threshold needs both classes".into()));
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(distinct[0]);
    }
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for pair in distinct.windows(2) {
        let t = (pair[0] + pair[1]) / 2.0;
        let (sens, spec) = sens_spec_at(scores, labels, t);
        let j = sens + spec - 1.0;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Val,
    Test,
}

impl SplitKind {
    fn ids<'a>(&self, split: &'a SplitManifest) -> &'a [String] {
        match self {
            SplitKind::Val => &split.val,
            SplitKind::Test => &split.test,
        }
    }
}

/// Full evaluation of one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub patch: RocReport,
    pub image: RocReport,
    pub n_images: usize,
    pub n_patches: usize,
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    /// `report.json` schema.
    pub fn save_report_json(&self, path: &Path) -> Result<()> {
        let value = serde_json::json!({
            "patch_auc": self.patch.auc,
            "image_auc": self.image.auc,
            "n_images": self.n_images,
            "n_patches": self.n_patches,
            "threshold": self.image.threshold,
            "sensitivity": self.image.sensitivity,
            "specificity": self.image.specificity,
        });
        let bytes = serde_json::to_vec_pretty(&value)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Score every patch of the given image ids with an eval-mode forward pass.
fn score_images(
    disc: &crate::model::Discriminator<f32>,
    dataset: &LoadedDataset,
    ids: &[String],
) -> Result<(Vec<ImageScore>, Vec<f64>, Vec<bool>)> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut images = Vec::with_capacity(sorted.len());
    let mut patch_scores = Vec::new();
    let mut patch_labels = Vec::new();
    for id in sorted {
        let records = dataset
            .patches
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("image {id} not in dataset")))?;
        let (p, _, c) = records[0].pixels.dim();
        let mut batch = Array4::<f32>::zeros((records.len(), p, p, c));
        for (i, rec) in records.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), i).assign(&rec.pixels);
        }
        let (out, _) = disc.forward(&batch, Mode::Eval, None)?;
        let mut logits = Vec::with_capacity(records.len());
        let mut any_diseased = false;
        for (i, rec) in records.iter().enumerate() {
            let pair = [out.logits[(i, 0)] as f64, out.logits[(i, 1)] as f64];
            let l = patch_diseased_logit(&pair)?;
            logits.push(l);
            patch_scores.push(l);
            patch_labels.push(rec.label == PatchLabel::Diseased);
            any_diseased |= rec.label == PatchLabel::Diseased;
        }
        let score = aggregate_image_score(&logits)?;
        images.push(ImageScore {
            image_id: id.clone(),
            patch_logits: logits,
            score,
            true_label: if any_diseased { ImageClass::Diseased } else { ImageClass::Healthy },
        });
    }
    Ok((images, patch_scores, patch_labels))
}

/// Evaluate a trained run on the validation or test split with debiased
/// EMA weights. Patch AUC pools all patches of the split; image AUC uses
/// the sigmoid-sum scores. The operating threshold always comes from the
/// validation split.
pub fn evaluate_run(
    run: &TrainRun,
    split: SplitKind,
    dataset: &LoadedDataset,
) -> Result<EvalReport> {
    evaluate_checkpoint(&run.final_checkpoint, &run.config, split, dataset)
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    config: &TrainConfig,
    split: SplitKind,
    dataset: &LoadedDataset,
) -> Result<EvalReport> {
    let disc = load_eval_discriminator(checkpoint, config)?;
    let ids = split.ids(&dataset.manifest.split);
    let (images, patch_scores, patch_labels) = score_images(&disc, dataset, ids)?;

    let image_scores: Vec<f64> = images.iter().map(|s| s.score).collect();
    let image_labels: Vec<bool> =
        images.iter().map(|s| s.true_label == ImageClass::Diseased).collect();

    // Threshold from validation scores, applied to the target split.
    let threshold = if split == SplitKind::Val {
        choose_threshold(&image_scores, &image_labels).ok()
    } else {
        let (val_images, _, _) = score_images(&disc, dataset, &dataset.manifest.split.val)?;
        let val_scores: Vec<f64> = val_images.iter().map(|s| s.score).collect();
        let val_labels: Vec<bool> =
            val_images.iter().map(|s| s.true_label == ImageClass::Diseased).collect();
        choose_threshold(&val_scores, &val_labels).ok()
    };
    let (sens, spec) = match threshold {
        Some(t) => {
            let (se, sp) = sens_spec_at(&image_scores, &image_labels, t);
            (Some(se), Some(sp))
        }
        None => (None, None),
    };

    let patch = RocReport {
        auc: roc_auc(&patch_scores, &patch_labels)?,
        n_pos: patch_labels.iter().filter(|&&l| l).count(),
        n_neg: patch_labels.iter().filter(|&&l| !l).count(),
        threshold: None,
        sensitivity: None,
        specificity: None,
    };
    let image = RocReport {
        auc: roc_auc(&image_scores, &image_labels)?,
        n_pos: image_labels.iter().filter(|&&l| l).count(),
        n_neg: image_labels.iter().filter(|&&l| !l).count(),
        threshold,
        sensitivity: sens,
        specificity: spec,
    };
    Ok(EvalReport {
        patch,
        image,
        n_images: images.len(),
        n_patches: patch_labels.len(),
        images,
    })
}

/// One (method, labeled-count, repeat) result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub method: String,
    pub labeled_count: usize,
    pub repeat: usize,
    pub seed: u64,
    pub patch_auc: f64,
    pub image_auc: f64,
}

/// Mean and standard deviation over the repeats of one grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummaryRow {
    pub method: String,
    pub labeled_count: usize,
    pub repeats: usize,
    pub patch_mean: f64,
    pub patch_std: f64,
    pub image_mean: f64,
    pub image_std: f64,
    /// A single repeat: std reported as 0.
    pub degenerate_std: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<ExperimentCell>,
    pub summary: Vec<ExperimentSummaryRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0, true);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt(), false)
}

pub fn summarize_cells(cells: &[ExperimentCell]) -> Vec<ExperimentSummaryRow> {
    let mut keys: Vec<(String, usize)> = cells
        .iter()
        .map(|c| (c.method.clone(), c.labeled_count))
        .collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|(method, count)| {
            let patch: Vec<f64> = cells
                .iter()
                .filter(|c| &c.method == method && c.labeled_count == *count)
                .map(|c| c.patch_auc)
                .collect();
            let image: Vec<f64> = cells
                .iter()
                .filter(|c| &c.method == method && c.labeled_count == *count)
                .map(|c| c.image_auc)
                .collect();
            let (pm, ps, degen) = mean_std(&patch);
            let (im, is, _) = mean_std(&image);
            ExperimentSummaryRow {
                method: method.clone(),
                labeled_count: *count,
                repeats: patch.len(),
                patch_mean: pm,
                patch_std: ps,
                image_mean: im,
                image_std: is,
                degenerate_std: degen,
            }
        })
        .collect()
}

pub const EXPERIMENT_CSV_HEADER: &str = "method,labeled_count,repeat,seed,patch_auc,image_auc";

pub fn experiment_csv(cells: &[ExperimentCell]) -> String {
    let mut text = String::from(EXPERIMENT_CSV_HEADER);
    text.push('\n');
    for c in cells {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.method, c.labeled_count, c.repeat, c.seed, c.patch_auc, c.image_auc
        ));
    }
    text
}

pub fn parse_experiment_csv(text: &str) -> Vec<ExperimentCell> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            Some(ExperimentCell {
                method: f[0].to_string(),
                labeled_count: f[1].parse().ok()?,
                repeat: f[2].parse().ok()?,
                seed: f[3].parse().ok()?,
                patch_auc: f[4].parse().ok()?,
                image_auc: f[5].parse().ok()?,
            })
        })
        .collect()
}

/// Human-readable mean +/- std table, one row per (method, labeled count).
pub fn summary_table(summary: &[ExperimentSummaryRow]) -> String {
    let mut out = String::from("method   labeled  patch AUC          image AUC\n");
    for row in summary {
        out.push_str(&format!(
            "{:<8} {:>7}  {:.3} +/- {:.3}    {:.3} +/- {:.3}{}\n",
            row.method,
            row.labeled_count,
            row.patch_mean,
            row.patch_std,
            row.image_mean,
            row.image_std,
            if row.degenerate_std { "  (single repeat)" } else { "" }
        ));
    }
    out
}

/// Run the labeled-count x repeats grid: per cell, sample a labeled subset
/// with a repeat-specific derived seed, train both the SSL-GAN and the
/// ConvNet baseline, and evaluate on the test split. Cells are independent
/// and seeded, so they fan out across threads with results identical to a
/// serial run; rows are sorted before writing `experiment.csv`.
pub fn run_experiment(
    grid: &[usize],
    repeats: usize,
    base_config: &TrainConfig,
    dataset: &LoadedDataset,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    use rayon::prelude::*;
    if grid.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("empty experiment grid".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_entries = dataset.split_entries(&dataset.manifest.split.train);

    let mut jobs = Vec::new();
    for &count in grid {
        for repeat in 0..repeats {
            jobs.push((count, repeat));
        }
    }
    let cells: Vec<ExperimentCell> = jobs
        .par_iter()
        .map(|&(count, repeat)| -> Result<Vec<ExperimentCell>> {
            let subset_seed = sample_subset_seed(base_config.seed, count, repeat);
            let subset =
                crate::dataset::sample_labeled_subset(&train_entries, count, subset_seed)?;
            let mut out = Vec::new();
            for method in ["ssl", "convnet"] {
                let mut config = base_config.clone();
                config.seed = seeds::derive(
                    base_config.seed,
                    "train",
                    &[count as u64, repeat as u64, u64::from(method == "convnet")],
                );
                let run_dir = out_dir
                    .join("runs")
                    .join(format!("{method}-l{count}-r{repeat}"));
                let run = match method {
                    "ssl" => train_ssl(&config, dataset, &subset, &run_dir, false)?,
                    _ => train_baseline(&config, dataset, &subset, &run_dir, false)?,
                };
                let report = evaluate_run(&run, SplitKind::Test, dataset)?;
                out.push(ExperimentCell {
                    method: method.to_string(),
                    labeled_count: count,
                    repeat,
                    seed: config.seed,
                    patch_auc: report.patch.auc,
                    image_auc: report.image.auc,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut cells = cells;
    cells.sort_by(|a, b| {
        (&a.method, a.labeled_count, a.repeat).cmp(&(&b.method, b.labeled_count, b.repeat))
    });
    let csv_path = out_dir.join("experiment.csv");
    fs::write(&csv_path, experiment_csv(&cells)).map_err(|e| Error::io(&csv_path, e))?;
    let summary = summarize_cells(&cells);
    Ok(ExperimentReport { cells, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) pairwise brute force with half-credit ties.
    fn auc_brute_force(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_perfect_separation() {
        let auc = roc_auc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_known_interleaving() {
        let auc = roc_auc(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let auc = roc_auc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[1.0, 2.0], &[true, true]),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn auc_matches_brute_force_on_random_instances() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for case in 0..200 {
            let n = rng.random_range(2..=100);
            // Coarse quantization forces plenty of exact ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random::<f64>() * 8.0).floor() / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            labels[0] = true;
            labels[n - 1] = false;
            let got = roc_auc(&scores, &labels).unwrap();
            let want = auc_brute_force(&scores, &labels);
            assert_eq!(got, want, "case {case}");
        }
    }

    #[test]
    fn auc_complement_under_label_swap() {
        let scores = [0.1, 0.5, 0.2, 0.9, 0.4];
        let labels = [false, true, false, true, false];
        let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        let b = roc_auc(&scores, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = [0.1, 0.5, 0.2, 0.9, 0.4, 0.4];
        let labels = [false, true, false, true, false, true];
        let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(3.0 * s + 1.0)).collect();
        assert_eq!(
            roc_auc(&scores, &labels).unwrap(),
            roc_auc(&squashed, &labels).unwrap()
        );
    }

    #[test]
    fn diseased_logit_and_sigma_identity() {
        assert_eq!(patch_diseased_logit(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(patch_diseased_logit(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(patch_diseased_logit(&[1.0, 2.0, 3.0]).is_err());
        // sigma(l) equals the 2-class softmax probability of diseased.
        for (h, d) in [(0.3, -1.2), (2.0, 2.0), (-5.0, 4.0)] {
            let l = patch_diseased_logit(&[h, d]).unwrap();
            let softmax_d = (d as f64).exp() / ((d as f64).exp() + (h as f64).exp());
            assert!((sigmoid(l) - softmax_d).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_oracle_values() {
        let score = aggregate_image_score(&vec![0.0; 64]).unwrap();
        assert_eq!(score, 32.0);
        let tiny = aggregate_image_score(&[-100.0, -90.0]).unwrap();
        assert!(tiny < 1e-30);
        let s = aggregate_image_score(&[-2.0, 0.0, 2.0, 5.0]).unwrap();
        let want = sigmoid(-2.0f64) + 0.5 + sigmoid(2.0f64) + sigmoid(5.0f64);
        assert!((s - want).abs() < 1e-12);
        assert!((s - 2.4933).abs() < 1e-4);
        assert!(aggregate_image_score(&[]).is_err());
    }

    #[test]
    fn score_is_monotone_in_every_logit() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let base = aggregate_image_score(&logits).unwrap();
            let ix = rng.random_range(0..logits.len());
            let mut bumped = logits.clone();
            bumped[ix] += 0.25;
            assert!(aggregate_image_score(&bumped).unwrap() > base);
        }
    }

    #[test]
    fn threshold_midpoint_rule() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [false, false, true, true];
        let t = choose_threshold(&scores, &labels).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        let (sens, spec) = sens_spec_at(&scores, &labels, t);
        assert_eq!((sens, spec), (1.0, 1.0));
    }

    #[test]
    fn threshold_matches_exhaustive_scan_on_interleaved_scores() {
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let labels = [false, true, false, true, false, true, true, true];
        let t = choose_threshold(&scores, &labels).unwrap();
        // Brute force over a fine grid of candidate cuts.
        let mut best = (f64::NEG_INFINITY, f64::NAN);
        for k in 0..1000 {
            let cand = k as f64 / 1000.0;
            let (sens, spec) = sens_spec_at(&scores, &labels, cand);
            let j = sens + spec - 1.0;
            if j > best.0 {
                best = (j, cand);
            }
        }
        let (sens, spec) = sens_spec_at(&scores, &labels, t);
        assert!((sens + spec - 1.0 - best.0).abs() < 1e-12, "same optimal J");
    }

    #[test]
    fn threshold_needs_both_classes() {
        assert!(choose_threshold(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn summary_recomputes_from_csv() {
        let cells = vec![
            ExperimentCell {
                method: "ssl".into(),
                labeled_count: 4,
                repeat: 0,
                seed: 1,
                patch_auc: 0.8,
                image_auc: 0.9,
            },
            ExperimentCell {
                method: "ssl".into(),
                labeled_count: 4,
                repeat: 1,
                seed: 2,
                patch_auc: 0.9,
                image_auc: 0.7,
            },
        ];
        let text = experiment_csv(&cells);
        let parsed = parse_experiment_csv(&text);
        assert_eq!(parsed.len(), 2);
        let summary = summarize_cells(&parsed);
        assert_eq!(summary.len(), 1);
        assert!((summary[0].patch_mean - 0.85).abs() < 1e-12);
        let want_std = ((0.05f64 * 0.05 + 0.05 * 0.05) / 1.0).sqrt();
        assert!((summary[0].patch_std - want_std).abs() < 1e-12);
    }

    #[test]
    fn single_repeat_flags_degenerate_std() {
        let cells = vec![ExperimentCell {
            method: "convnet".into(),
            labeled_count: 8,
            repeat: 0,
            seed: 3,
            patch_auc: 0.75,
            image_auc: 0.8,
        }];
        let summary = summarize_cells(&cells);
        assert!(summary[0].degenerate_std);
        assert_eq!(summary[0].patch_std, 0.0);
    }
}
