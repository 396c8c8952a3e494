//! Synthetic sparse-lesion dataset generator.
//!
//! Healthy images are a dark circular fundus-like field with smooth
//! low-frequency texture and an empty mask; diseased images add a handful
//! of small bright blobs whose pixels are exactly the mask. Everything is
//! deterministic under the seed.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

use super::io::{save_mask_png, save_rgb_png};
use super::{make_split_stratified, DatasetManifest, ImageClass, ImageEntry, SegMask};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub canvas: usize,
    pub healthy: usize,
    pub diseased: usize,
    /// Lesions per diseased image, drawn uniformly from this inclusive range.
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Lesion radius range in pixels (>= 1 so every lesion marks a pixel).
    pub radius_min: f64,
    pub radius_max: f64,
    /// Brightness lift of lesion pixels over the local background.
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Train/val/test counts; `None` assigns roughly 60/20/20.
    pub split: Option<(usize, usize, usize)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 1024,
            healthy: 168,
            diseased: 81,
            lesions_min: 1,
            lesions_max: 3,
            radius_min: 1.5,
            radius_max: 4.0,
            intensity_min: 0.35,
            intensity_max: 0.6,
            split: None,
        }
    }
}

impl SynthConfig {
    pub fn total(&self) -> usize {
        self.healthy + self.diseased
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < 32 {
            return Err(Error::InvalidArgument("canvas must be at least 32".into()));
        }
        if self.total() == 0 {
            return Err(Error::InvalidArgument("empty dataset requested".into()));
        }
        if self.diseased > 0 && self.lesions_min < 1 {
            return Err(Error::InvalidArgument(
                "diseased images require at least 1 lesion".into(),
            ));
        }
        if self.lesions_max < self.lesions_min {
            return Err(Error::InvalidArgument("lesions_max < lesions_min".into()));
        }
        if self.radius_min < 1.0 || self.radius_max < self.radius_min {
            return Err(Error::InvalidArgument(
                "lesion radius range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.radius_max > self.canvas as f64 / 8.0 {
            return Err(Error::InvalidArgument(
                "radius_max too large for the canvas (lesions must stay sparse)".into(),
            ));
        }
        if self.intensity_min <= 0.0 || self.intensity_max < self.intensity_min {
            return Err(Error::InvalidArgument("bad intensity range".into()));
        }
        if let Some((tr, va, te)) = self.split {
            if tr + va + te != self.total() {
                return Err(Error::InvalidArgument(format!(
                    "split counts {:?} do not sum to {}",
                    (tr, va, te),
                    self.total()
                )));
            }
        }
        Ok(())
    }

    fn split_counts(&self) -> (usize, usize, usize) {
        self.split.unwrap_or_else(|| {
            let n = self.total();
            let val = n / 5;
            let test = n / 5;
            (n - val - test, val, test)
        })
    }
}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64)>, // (fx, fy, phase, amplitude)
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        // Reddish fundus-like palette with a little per-image variation.
        let base = [
            0.55 + 0.1 * rng.random::<f64>(),
            0.26 + 0.06 * rng.random::<f64>(),
            0.10 + 0.04 * rng.random::<f64>(),
        ];
        let waves = (0..3)
            .map(|_| {
                (
                    1.0 + 3.0 * rng.random::<f64>(),
                    1.0 + 3.0 * rng.random::<f64>(),
                    std::f64::consts::TAU * rng.random::<f64>(),
                    0.04 + 0.04 * rng.random::<f64>(),
                )
            })
            .collect();
        Background { base, waves }
    }

    fn at(&self, x: f64, y: f64, canvas: f64, field_r: f64) -> [f64; 3] {
        let cx = canvas / 2.0;
        let r2 = ((x - cx).powi(2) + (y - cx).powi(2)) / (field_r * field_r);
        if r2 >= 1.0 {
            return [0.0; 3];
        }
        let vignette = (1.0 - r2).sqrt();
        let mut tex = 0.0;
        for (fx, fy, phase, amp) in &self.waves {
            tex += amp * (std::f64::consts::TAU * (fx * x + fy * y) / canvas + phase).sin();
        }
        let shade = (vignette * (1.0 + tex)).clamp(0.0, 1.0);
        [
            (self.base[0] * shade).clamp(0.0, 0.85),
            (self.base[1] * shade).clamp(0.0, 0.85),
            (self.base[2] * shade).clamp(0.0, 0.85),
        ]
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    radius: f64,
    lift: f64,
}

/// Render one image and its mask. Lesion pixels satisfy the *strict*
/// disk criterion `d^2 < r^2`, which keeps the pixel count of each lesion
/// below `pi * r^2` and guarantees at least one pixel for `r >= 1`.
fn render(
    config: &SynthConfig,
    class: ImageClass,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array2<u8>) {
    let canvas = config.canvas;
    let cf = canvas as f64;
    let field_r = 0.47 * cf;
    let bg = Background::sample(rng);
    let mut pixels = Array3::<f32>::zeros((canvas, canvas, 3));
    for y in 0..canvas {
        for x in 0..canvas {
            let px = bg.at(x as f64 + 0.5, y as f64 + 0.5, cf, field_r);
            for c in 0..3 {
                pixels[(y, x, c)] = px[c] as f32;
            }
        }
    }
    let mut mask = Array2::<u8>::zeros((canvas, canvas));
    if class == ImageClass::Diseased {
        let count = rng.random_range(config.lesions_min..=config.lesions_max);
        let lesions: Vec<Lesion> = (0..count)
            .map(|_| {
                let radius =
                    config.radius_min + (config.radius_max - config.radius_min) * rng.random::<f64>();
                // Keep the whole blob inside the field with a margin.
                let max_r = 0.8 * field_r - radius;
                let angle = std::f64::consts::TAU * rng.random::<f64>();
                let dist = max_r * rng.random::<f64>().sqrt();
                Lesion {
                    cx: cf / 2.0 + dist * angle.cos(),
                    cy: cf / 2.0 + dist * angle.sin(),
                    radius,
                    lift: config.intensity_min
                        + (config.intensity_max - config.intensity_min) * rng.random::<f64>(),
                }
            })
            .collect();
        for lesion in &lesions {
            let r = lesion.radius;
            let y0 = (lesion.cy - r).floor().max(0.0) as usize;
            let y1 = ((lesion.cy + r).ceil() as usize).min(canvas - 1);
            let x0 = (lesion.cx - r).floor().max(0.0) as usize;
            let x1 = ((lesion.cx + r).ceil() as usize).min(canvas - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (x as f64 + 0.5 - lesion.cx).powi(2)
                        + (y as f64 + 0.5 - lesion.cy).powi(2);
                    if d2 < r * r {
                        mask[(y, x)] = 1;
                        // Bright yellowish blob, hard-edged against the field.
                        let lift = lesion.lift as f32;
                        pixels[(y, x, 0)] = (pixels[(y, x, 0)] + lift).clamp(0.0, 1.0);
                        pixels[(y, x, 1)] = (pixels[(y, x, 1)] + lift * 0.9).clamp(0.0, 1.0);
                        pixels[(y, x, 2)] = (pixels[(y, x, 2)] + lift * 0.5).clamp(0.0, 1.0);
                    }
                }
            }
        }
        debug_assert!(mask.iter().any(|&v| v == 1));
    }
    (pixels, mask)
}

/// Generate the dataset on disk: `images/<id>.png`, `masks/<id>.png`, and
/// `manifest.json`. Byte-identical for identical `(config, seed)`.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut images = Vec::with_capacity(config.total());
    for ix in 0..config.total() {
        let class = if ix < config.healthy { ImageClass::Healthy } else { ImageClass::Diseased };
        let id = format!("img{ix:04}");
        let mut rng = seeds::rng(seed, "synth-image", &[ix as u64]);
        let (pixels, mask) = render(config, class, &mut rng);
        save_rgb_png(&out_dir.join("images").join(format!("{id}.png")), &pixels)?;
        save_mask_png(&out_dir.join("masks").join(format!("{id}.png")), &mask)?;
        images.push(ImageEntry { id, class });
    }

    let entries: Vec<(String, ImageClass)> =
        images.iter().map(|e| (e.id.clone(), e.class)).collect();
    let split = make_split_stratified(&entries, config.split_counts(), seed)?;
    let manifest = DatasetManifest { seed, canvas: config.canvas, images, split };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Render a single synthetic (image, mask) pair in memory. Used by tests
/// that do not need the on-disk layout.
pub fn render_example(
    config: &SynthConfig,
    class: ImageClass,
    seed: u64,
) -> (Array3<f32>, SegMask) {
    let mut rng = seeds::rng(seed, "synth-image", &[0]);
    let (pixels, mask) = render(config, class, &mut rng);
    (pixels, SegMask { image_id: "synthetic".into(), mask })
}
