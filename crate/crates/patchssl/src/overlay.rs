//! Abnormality heatmaps: patch scores reassembled onto the image grid,
//! Gaussian smoothing, alpha-blended rendering, and pixel-level
//! localization AUC against ground-truth masks.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::dataset::{RawImage, SegMask};
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;

/// Per-pixel abnormality scores in `[0, 1]` on the source canvas.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub image_id: String,
    pub map: Array2<f64>,
}

/// Fill each `patch x patch` block of the canvas with the corresponding
/// patch score (row-major grid order). Piecewise constant; block
/// boundaries coincide with the tiling boundaries.
pub fn score_map(image_id: &str, patch_scores: &Array2<f64>, canvas: usize) -> Result<ScoreMap> {
    let (g, g2) = patch_scores.dim();
    if g != g2 || g == 0 || canvas % g != 0 {
        return Err(Error::Geometry(format!(
            "cannot spread {g}x{g2} patch scores over a {canvas}-pixel canvas"
        )));
    }
    if patch_scores.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("patch scores must lie in [0,1]".into()));
    }
    let patch = canvas / g;
    let mut map = Array2::<f64>::zeros((canvas, canvas));
    for r in 0..g {
        for c in 0..g {
            map.slice_mut(ndarray::s![r * patch..(r + 1) * patch, c * patch..(c + 1) * patch])
                .fill(patch_scores[(r, c)]);
        }
    }
    Ok(ScoreMap { image_id: image_id.to_string(), map })
}

/// Mean of each block of the map; inverse of [`score_map`] for piecewise
/// constant maps.
pub fn block_means(map: &ScoreMap, grid: usize) -> Result<Array2<f64>> {
    let (h, w) = map.map.dim();
    if h != w || grid == 0 || h % grid != 0 {
        return Err(Error::Geometry(format!("grid {grid} does not tile {h}x{w} map")));
    }
    let patch = h / grid;
    let norm = 1.0 / (patch * patch) as f64;
    Ok(Array2::from_shape_fn((grid, grid), |(r, c)| {
        map.map
            .slice(ndarray::s![r * patch..(r + 1) * patch, c * patch..(c + 1) * patch])
            .sum()
            * norm
    }))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

fn reflect(i: isize, n: usize) -> usize {
    // Symmetric reflection: -1 -> 0, n -> n-1.
    let n = n as isize;
    let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
    j.clamp(0, n - 1) as usize
}

/// Separable Gaussian blur, kernel truncated at 3 sigma and normalized,
/// symmetric-reflect boundary; the result is clipped to `[0, 1]`.
pub fn gaussian_blur(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = map.map.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w);
                acc += kv * map.map[(y, sx)];
            }
            tmp[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h);
                acc += kv * tmp[(sy, x)];
            }
            out[(y, x)] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(ScoreMap { image_id: map.image_id.clone(), map: out })
}

/// Normalized center weight of the truncated Gaussian kernel (the response
/// of a unit impulse). Exposed for oracle tests.
pub fn kernel_center_weight(sigma: f64) -> f64 {
    let k = gaussian_kernel(sigma);
    let c = k[k.len() / 2];
    c * c
}

/// Perceptually ordered heat ramp: black, red, orange, yellow, white.
pub fn heat_color(v: f64) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.0, 0.0, 0.0],
        [0.55, 0.0, 0.0],
        [0.9, 0.35, 0.0],
        [1.0, 0.8, 0.0],
        [1.0, 1.0, 1.0],
    ];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let t = (v - i as f64) as f32;
    [
        STOPS[i][0] + t * (STOPS[i + 1][0] - STOPS[i][0]),
        STOPS[i][1] + t * (STOPS[i + 1][1] - STOPS[i][1]),
        STOPS[i][2] + t * (STOPS[i + 1][2] - STOPS[i][2]),
    ]
}

/// Alpha-blend the heat-colored map onto the grayscale-converted source
/// and write it as a PNG.
pub fn render_overlay(
    image: &RawImage,
    map: &ScoreMap,
    alpha: f64,
    out_path: &Path,
) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0,1], got {alpha}")));
    }
    let (h, w, _) = image.pixels.dim();
    if map.map.dim() != (h, w) {
        return Err(Error::Geometry(format!(
            "score map {:?} does not match image {h}x{w}",
            map.map.dim()
        )));
    }
    let a = alpha as f32;
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            // Rec. 601 luma of the source.
            let gray = 0.299 * image.pixels[(y, x, 0)]
                + 0.587 * image.pixels[(y, x, 1)]
                + 0.114 * image.pixels[(y, x, 2)];
            let heat = heat_color(map.map[(y, x)]);
            for c in 0..3 {
                out[(y, x, c)] = (1.0 - a) * gray + a * heat[c];
            }
        }
    }
    crate::dataset::save_rgb_png(out_path, &out)?;
    Ok(out)
}

/// Dump the raw score map in the tensor container format.
pub fn save_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    let (h, w) = map.map.dim();
    let data: Vec<f32> = map.map.iter().map(|&v| v as f32).collect();
    let mut writer = crate::checkpoint::TensorWriter::new();
    writer.add("score_map", &[h, w], &data)?;
    writer.set_meta("image_id", serde_json::json!(map.image_id));
    writer.write(path)
}

/// Pixel-level ROC-AUC of the map against the ground-truth mask.
pub fn localization_auc(map: &ScoreMap, mask: &SegMask) -> Result<f64> {
    if map.map.dim() != mask.mask.dim() {
        return Err(Error::Geometry(format!(
            "map {:?} vs mask {:?}",
            map.map.dim(),
            mask.mask.dim()
        )));
    }
    let scores: Vec<f64> = map.map.iter().cloned().collect();
    let labels: Vec<bool> = mask.mask.iter().map(|&v| v != 0).collect();
    roc_auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn constant_map(v: f64, n: usize) -> ScoreMap {
        ScoreMap { image_id: "t".into(), map: Array2::from_elem((n, n), v) }
    }

    #[test]
    fn score_map_fills_blocks() {
        let scores = array![[0.1, 0.2], [0.3, 0.4]];
        let sm = score_map("t", &scores, 4).unwrap();
        assert_eq!(sm.map[(0, 0)], 0.1);
        assert_eq!(sm.map[(1, 3)], 0.2);
        assert_eq!(sm.map[(3, 0)], 0.3);
        assert_eq!(sm.map[(2, 3)], 0.4);
    }

    #[test]
    fn score_map_block_boundaries_match_tiling() {
        let scores = array![[0.0, 1.0], [1.0, 0.0]];
        let sm = score_map("t", &scores, 8).unwrap();
        // Pixel (y, x) belongs to patch (y/4, x/4).
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(sm.map[(y, x)], scores[(y / 4, x / 4)]);
            }
        }
    }

    #[test]
    fn block_means_invert_score_map() {
        let scores = array![[0.12, 0.5], [0.9, 0.0]];
        let sm = score_map("t", &scores, 16).unwrap();
        let back = block_means(&sm, 2).unwrap();
        for (a, b) in back.iter().zip(scores.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let sm = constant_map(0.37, 32);
        let out = gaussian_blur(&sm, 3.0).unwrap();
        for &v in out.map.iter() {
            assert!((v - 0.37).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_impulse_center_equals_kernel_weight() {
        let mut sm = constant_map(0.0, 33);
        sm.map[(16, 16)] = 1.0;
        let sigma = 1.5;
        let out = gaussian_blur(&sm, sigma).unwrap();
        let want = kernel_center_weight(sigma);
        assert!((out.map[(16, 16)] - want).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_mass_for_interior_inputs() {
        let mut sm = constant_map(0.0, 64);
        sm.map[(30, 32)] = 0.8;
        sm.map[(33, 31)] = 0.4;
        let out = gaussian_blur(&sm, 2.0).unwrap();
        let before: f64 = sm.map.sum();
        let after: f64 = out.map.sum();
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        assert!(gaussian_blur(&constant_map(0.0, 8), 0.0).is_err());
        assert!(gaussian_blur(&constant_map(0.0, 8), -1.0).is_err());
    }

    #[test]
    fn blur_stays_within_input_range() {
        let mut sm = constant_map(0.2, 16);
        sm.map[(8, 8)] = 0.9;
        let out = gaussian_blur(&sm, 1.0).unwrap();
        for &v in out.map.iter() {
            assert!((0.2..=0.9).contains(&v));
        }
    }

    #[test]
    fn localization_perfect_and_tied() {
        let mut mask_arr = Array2::<u8>::zeros((8, 8));
        mask_arr[(2, 3)] = 1;
        mask_arr[(5, 5)] = 1;
        let mask = SegMask { image_id: "t".into(), mask: mask_arr.clone() };
        let map = ScoreMap {
            image_id: "t".into(),
            map: mask_arr.mapv(|v| v as f64),
        };
        assert_eq!(localization_auc(&map, &mask).unwrap(), 1.0);
        assert_eq!(localization_auc(&constant_map(0.5, 8), &mask).unwrap(), 0.5);
    }

    #[test]
    fn localization_invariant_under_increasing_rescale() {
        let mut mask_arr = Array2::<u8>::zeros((8, 8));
        mask_arr[(1, 1)] = 1;
        mask_arr[(6, 2)] = 1;
        let mask = SegMask { image_id: "t".into(), mask: mask_arr };
        let map = ScoreMap {
            image_id: "t".into(),
            map: Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) as f64) / 64.0),
        };
        let rescaled = ScoreMap {
            image_id: "t".into(),
            map: map.map.mapv(|v| (0.2 + 0.8 * v).powi(3)),
        };
        assert_eq!(
            localization_auc(&map, &mask).unwrap(),
            localization_auc(&rescaled, &mask).unwrap()
        );
    }

    #[test]
    fn overlay_blend_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let image = RawImage {
            image_id: "t".into(),
            pixels: Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
                ((y + x + c) as f32 / 20.0).min(1.0)
            }),
            source_path: String::new(),
            all_zero: false,
        };
        // alpha = 0: grayscale source
        let out =
            render_overlay(&image, &constant_map(1.0, 8), 0.0, &dir.path().join("a.png")).unwrap();
        let gray00 = 0.299 * image.pixels[(0, 0, 0)]
            + 0.587 * image.pixels[(0, 0, 1)]
            + 0.114 * image.pixels[(0, 0, 2)];
        assert!((out[(0, 0, 0)] - gray00).abs() < 1e-6);
        assert_eq!(out[(0, 0, 0)], out[(0, 0, 1)]);
        // alpha = 1, map = 1: hottest color everywhere
        let out =
            render_overlay(&image, &constant_map(1.0, 8), 1.0, &dir.path().join("b.png")).unwrap();
        let hottest = heat_color(1.0);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(out[(y, x, c)], hottest[c]);
                }
            }
        }
        // PNG exists with the right dimensions
        let png = image::open(dir.path().join("b.png")).unwrap();
        assert_eq!((png.width(), png.height()), (8, 8));
    }
}
