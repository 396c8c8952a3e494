//! Image ingestion, tiling, patch labeling, splits, and subset sampling.
//!
//! The on-disk layout is `images/<id>.png`, `masks/<id>.png` (or a
//! `masks/<id>/` directory of per-abnormality masks that get OR-ed), and a
//! `manifest.json` with ids, class labels, and the split assignment.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    bilinear_resize, load_and_normalize, load_mask_combined, nearest_resize_mask, save_mask_png,
    save_rgb_png,
};
pub use synth::{render_example, synth_generate, SynthConfig};

/// A normalized square image: `canvas x canvas x 3` in `[0, 1]`, scaled by
/// the per-image maximum intensity.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub image_id: String,
    pub pixels: Array3<f32>,
    pub source_path: String,
    /// Set when the source was all-zero (normalization skipped).
    pub all_zero: bool,
}

/// Combined binary abnormality mask (1 = abnormal pixel).
#[derive(Debug, Clone)]
pub struct SegMask {
    pub image_id: String,
    pub mask: Array2<u8>,
}

impl SegMask {
    pub fn positive_pixels(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageClass {
    Healthy,
    Diseased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Healthy,
    Diseased,
    Unlabeled,
}

/// One grid cell of an image, ready for the networks: pixels downsampled
/// and shifted into `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub pixels: Array3<f32>,
    pub label: PatchLabel,
    pub overlap_pixels: u32,
}

/// Pipeline geometry: `grid * patch == canvas`, `patch % downsample == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub canvas: usize,
    pub grid: usize,
    pub patch: usize,
    pub downsample: usize,
}

impl Geometry {
    /// 1024-pixel canvas on a uniform 8x8 grid of 128-pixel patches,
    /// downsampled to 32x32.
    pub fn paper() -> Self {
        Geometry { canvas: 1024, grid: 8, patch: 128, downsample: 32 }
    }

    /// Desk-scale geometry: 64-pixel canvas, 4x4 grid, 16-pixel patches,
    /// no downsampling.
    pub fn desk() -> Self {
        Geometry { canvas: 64, grid: 4, patch: 16, downsample: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid * self.patch != self.canvas {
            return Err(Error::Geometry(format!(
                "grid {} * patch {} != canvas {}",
                self.grid, self.patch, self.canvas
            )));
        }
        if self.downsample == 0 || self.patch % self.downsample != 0 {
            return Err(Error::Geometry(format!(
                "patch {} not divisible by downsample {}",
                self.patch, self.downsample
            )));
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        self.grid * self.grid
    }
}

/// A raw (not yet downsampled) tile block in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RawBlock {
    pub row: usize,
    pub col: usize,
    pub pixels: Array3<f32>,
}

/// Cut the image into `grid x grid` non-overlapping `patch`-pixel blocks in
/// row-major order. Block `(r, c)` covers rows `[r*patch, (r+1)*patch)`.
pub fn tile(image: &RawImage, grid: usize, patch: usize) -> Result<Vec<RawBlock>> {
    let (h, w, _) = image.pixels.dim();
    if grid * patch != h || h != w {
        return Err(Error::Geometry(format!(
            "grid {grid} * patch {patch} does not tile a {h}x{w} image"
        )));
    }
    let mut blocks = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let block = image
                .pixels
                .slice(ndarray::s![
                    row * patch..(row + 1) * patch,
                    col * patch..(col + 1) * patch,
                    ..
                ])
                .to_owned();
            blocks.push(RawBlock { row, col, pixels: block });
        }
    }
    Ok(blocks)
}

/// Count mask pixels inside block `(row, col)` and derive its label:
/// diseased if at least one abnormal pixel overlaps, healthy otherwise.
pub fn label_patch(
    mask: &SegMask,
    row: usize,
    col: usize,
    grid: usize,
    patch: usize,
) -> Result<(PatchLabel, u32)> {
    let (h, w) = mask.mask.dim();
    if grid * patch != h || h != w {
        return Err(Error::Geometry(format!(
            "mask {h}x{w} inconsistent with grid {grid} x patch {patch}"
        )));
    }
    if row >= grid || col >= grid {
        return Err(Error::Geometry(format!("patch ({row},{col}) outside {grid}x{grid} grid")));
    }
    let overlap: u32 = mask
        .mask
        .slice(ndarray::s![
            row * patch..(row + 1) * patch,
            col * patch..(col + 1) * patch
        ])
        .iter()
        .map(|&v| v as u32)
        .sum();
    let label = if overlap >= 1 { PatchLabel::Diseased } else { PatchLabel::Healthy };
    Ok((label, overlap))
}

/// Average-pool a `P x P x 3` block down to `target x target x 3`, then map
/// `[0,1]` onto `[-1,1]` so real patches share the generator's tanh range.
pub fn downsample_patch(block: &Array3<f32>, target: usize) -> Result<Array3<f32>> {
    let (p, w, c) = block.dim();
    if p != w {
        return Err(Error::Geometry(format!("block {p}x{w} is not square")));
    }
    if target == 0 || p % target != 0 {
        return Err(Error::Geometry(format!("patch {p} not divisible by target {target}")));
    }
    let factor = p / target;
    let norm = 1.0f32 / (factor * factor) as f32;
    let mut out = Array3::<f32>::zeros((target, target, c));
    for oy in 0..target {
        for ox in 0..target {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += block[(oy * factor + dy, ox * factor + dx, ch)];
                    }
                }
                out[(oy, ox, ch)] = 2.0 * (acc * norm) - 1.0;
            }
        }
    }
    Ok(out)
}

/// Tile, label, and downsample a (image, mask) pair into patch records.
pub fn patchify(image: &RawImage, mask: &SegMask, geo: &Geometry) -> Result<Vec<PatchRecord>> {
    geo.validate()?;
    let blocks = tile(image, geo.grid, geo.patch)?;
    let mut records = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (label, overlap) = label_patch(mask, block.row, block.col, geo.grid, geo.patch)?;
        let pixels = downsample_patch(&block.pixels, geo.downsample)?;
        records.push(PatchRecord {
            image_id: image.image_id.clone(),
            row: block.row,
            col: block.col,
            pixels,
            label,
            overlap_pixels: overlap,
        });
    }
    Ok(records)
}

/// Disjoint train/val/test assignment. JSON schema:
/// `{"train": [...], "val": [...], "test": [...], "seed": N}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Deterministic seeded shuffle, then assign the first `counts.0` ids to
/// train, the next `counts.1` to val, and the rest to test.
pub fn make_split(
    image_ids: &[String],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<SplitManifest> {
    let (n_train, n_val, n_test) = counts;
    if n_train + n_val + n_test != image_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "split counts {counts:?} do not sum to {} ids",
            image_ids.len()
        )));
    }
    let mut ids = image_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitManifest { train: ids, val, test, seed })
}

/// [`make_split`] retried (with derived seeds) until every non-empty split
/// of size >= 2 contains both classes, when both classes exist at all.
/// Keeps desk-scale validation/test AUCs defined.
pub fn make_split_stratified(
    entries: &[(String, ImageClass)],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<SplitManifest> {
    let ids: Vec<String> = entries.iter().map(|(id, _)| id.clone()).collect();
    let class: BTreeMap<&str, ImageClass> =
        entries.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    let both_exist = entries.iter().any(|(_, c)| *c == ImageClass::Healthy)
        && entries.iter().any(|(_, c)| *c == ImageClass::Diseased);
    let mixed = |ids: &[String]| -> bool {
        ids.len() < 2
            || (ids.iter().any(|i| class[i.as_str()] == ImageClass::Healthy)
                && ids.iter().any(|i| class[i.as_str()] == ImageClass::Diseased))
    };
    for attempt in 0..1000 {
        let split = make_split(&ids, counts, crate::seeds::derive(seed, "split", &[attempt]))?;
        if !both_exist
            || ((split.train.is_empty() || mixed(&split.train))
                && (split.val.is_empty() || mixed(&split.val))
                && (split.test.is_empty() || mixed(&split.test)))
        {
            return Ok(SplitManifest { seed, ..split });
        }
    }
    Err(Error::InvalidArgument(
        "could not find a class-mixed split in 1000 attempts".into(),
    ))
}

/// Labeled/unlabeled partition of the training ids. JSON schema:
/// `{"labeled": [...], "unlabeled": [...], "seed": N}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSubset {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub seed: u64,
}

/// Sample `n_labeled` training images. Stratified: when both classes exist
/// and `n_labeled >= 2`, at least one image of each class is drawn, with
/// counts proportional to the class mix; a single-image request falls back
/// to a uniform draw.
pub fn sample_labeled_subset(
    train: &[(String, ImageClass)],
    n_labeled: usize,
    seed: u64,
) -> Result<LabeledSubset> {
    if n_labeled < 1 || n_labeled > train.len() {
        return Err(Error::InvalidArgument(format!(
            "n_labeled {n_labeled} out of range 1..={}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut healthy: Vec<&String> = train
        .iter()
        .filter(|(_, c)| *c == ImageClass::Healthy)
        .map(|(id, _)| id)
        .collect();
    let mut diseased: Vec<&String> = train
        .iter()
        .filter(|(_, c)| *c == ImageClass::Diseased)
        .map(|(id, _)| id)
        .collect();
    healthy.shuffle(&mut rng);
    diseased.shuffle(&mut rng);

    let labeled: Vec<String> = if healthy.is_empty() || diseased.is_empty() || n_labeled < 2 {
        let mut all: Vec<&String> = train.iter().map(|(id, _)| id).collect();
        all.shuffle(&mut rng);
        all.into_iter().take(n_labeled).cloned().collect()
    } else {
        let frac_d = diseased.len() as f64 / train.len() as f64;
        let n_d = ((n_labeled as f64 * frac_d).round() as usize)
            .clamp(1, n_labeled - 1)
            .min(diseased.len())
            .max(n_labeled.saturating_sub(healthy.len()));
        let n_h = n_labeled - n_d;
        diseased
            .iter()
            .take(n_d)
            .chain(healthy.iter().take(n_h))
            .map(|s| (*s).clone())
            .collect()
    };
    let unlabeled: Vec<String> = train
        .iter()
        .map(|(id, _)| id.clone())
        .filter(|id| !labeled.contains(id))
        .collect();
    Ok(LabeledSubset { labeled, unlabeled, seed })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub class: ImageClass,
}

/// `manifest.json`: ids, class labels, and the split assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub canvas: usize,
    pub images: Vec<ImageEntry>,
    pub split: SplitManifest,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn class_of(&self, id: &str) -> Option<ImageClass> {
        self.images.iter().find(|e| e.id == id).map(|e| e.class)
    }
}

/// A dataset directory ingested into patch records, keyed by image id.
#[derive(Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub geometry: Geometry,
    pub patches: BTreeMap<String, Vec<PatchRecord>>,
    pub masks: BTreeMap<String, SegMask>,
}

impl LoadedDataset {
    /// Ingest every image of the manifest: load, normalize, tile, label,
    /// and downsample. Images are independent, so this fans out across
    /// threads; results are keyed by image id, which keeps the outcome
    /// order-independent.
    pub fn load(root: &Path, geometry: &Geometry) -> Result<Self> {
        use rayon::prelude::*;
        geometry.validate()?;
        let manifest = DatasetManifest::load(&root.join("manifest.json"))?;
        let per_image: Vec<(String, (Vec<PatchRecord>, SegMask))> = manifest
            .images
            .par_iter()
            .map(|entry| -> Result<(String, (Vec<PatchRecord>, SegMask))> {
                let image = load_one_image(root, &entry.id, geometry.canvas)?;
                let mask = load_one_mask(root, &entry.id, geometry.canvas)?;
                let records = patchify(&image, &mask, geometry)?;
                Ok((entry.id.clone(), (records, mask)))
            })
            .collect::<Result<_>>()?;
        let mut patches = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for (id, (records, mask)) in per_image {
            patches.insert(id.clone(), records);
            masks.insert(id, mask);
        }
        Ok(LoadedDataset {
            root: root.to_path_buf(),
            manifest,
            geometry: *geometry,
            patches,
            masks,
        })
    }

    pub fn class_of(&self, id: &str) -> ImageClass {
        self.manifest.class_of(id).expect("id from this manifest")
    }

    /// Image ids of one split with their classes, in manifest order.
    pub fn split_entries(&self, ids: &[String]) -> Vec<(String, ImageClass)> {
        ids.iter().map(|id| (id.clone(), self.class_of(id))).collect()
    }
}

pub fn load_one_image(root: &Path, id: &str, canvas: usize) -> Result<RawImage> {
    let path = root.join("images").join(format!("{id}.png"));
    let mut img = load_and_normalize(&path, canvas)?;
    img.image_id = id.to_string();
    Ok(img)
}

/// `masks/<id>.png`, or every PNG under `masks/<id>/` OR-ed together.
pub fn load_one_mask(root: &Path, id: &str, canvas: usize) -> Result<SegMask> {
    let single = root.join("masks").join(format!("{id}.png"));
    if single.is_file() {
        return load_mask_combined(id, &[&single], canvas);
    }
    let dir = root.join("masks").join(id);
    if dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("png"))
            .collect();
        paths.sort();
        let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
        return load_mask_combined(id, &refs, canvas);
    }
    Err(Error::io(
        &single,
        std::io::Error::new(std::io::ErrorKind::NotFound, "mask not found"),
    ))
}
