use std::path::Path;

use image::{DynamicImage, ImageReader};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

use super::{RawImage, SegMask};

/// Bilinear resample with pixel-center alignment and edge clamping.
pub fn bilinear_resize(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let top = src[(y0, x0, ch)] * (1.0 - tx) + src[(y0, x1, ch)] * tx;
                let bot = src[(y1, x0, ch)] * (1.0 - tx) + src[(y1, x1, ch)] * tx;
                out[(oy, ox, ch)] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Nearest-neighbor resample for binary masks.
pub fn nearest_resize_mask(src: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let y = (((oy as f32 + 0.5) * sy) as usize).min(h - 1);
        let x = (((ox as f32 + 0.5) * sx) as usize).min(w - 1);
        src[(y, x)]
    })
}

fn decode(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Load an 8- or 16-bit RGB raster image, resize it to `canvas x canvas`
/// (bilinear), and normalize by the per-image maximum intensity over all
/// channels. An all-zero source comes back as zeros with `all_zero` set.
pub fn load_and_normalize(path: &Path, canvas: usize) -> Result<RawImage> {
    if canvas < 32 {
        return Err(Error::InvalidArgument(format!(
            "canvas must be at least 32, got {canvas}"
        )));
    }
    let img = decode(path)?;
    let pixels: Array3<f32> = match img {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                buf.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            })
        }
        DynamicImage::ImageRgb16(buf) => {
            let (w, h) = buf.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                buf.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0
            })
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected 8- or 16-bit RGB, got {:?}", other.color()),
            });
        }
    };
    let resized = bilinear_resize(&pixels, canvas, canvas);
    let max = resized.iter().cloned().fold(0.0f32, f32::max);
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if max <= 0.0 {
        log::warn!("{}: all-zero image, skipping normalization", path.display());
        return Ok(RawImage {
            image_id,
            pixels: resized,
            source_path: path.display().to_string(),
            all_zero: true,
        });
    }
    let pixels = resized.mapv(|v| v / max);
    Ok(RawImage {
        image_id,
        pixels,
        source_path: path.display().to_string(),
        all_zero: false,
    })
}

fn mask_from_image(img: DynamicImage) -> Array2<u8> {
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32)[0] != 0)
    })
}

/// Load one or more abnormality masks (any nonzero pixel counts), OR them
/// together, and resize to the canvas with nearest-neighbor sampling.
pub fn load_mask_combined(image_id: &str, paths: &[&Path], canvas: usize) -> Result<SegMask> {
    let mut combined: Option<Array2<u8>> = None;
    for path in paths {
        let mask = mask_from_image(decode(path)?);
        combined = Some(match combined {
            None => mask,
            Some(mut acc) => {
                if acc.dim() != mask.dim() {
                    return Err(Error::Shape(format!(
                        "mask {} disagrees on dimensions", path.display()
                    )));
                }
                acc.zip_mut_with(&mask, |a, &b| *a |= b);
                acc
            }
        });
    }
    let combined = combined
        .ok_or_else(|| Error::InvalidArgument(format!("no mask files for {image_id}")))?;
    Ok(SegMask {
        image_id: image_id.to_string(),
        mask: nearest_resize_mask(&combined, canvas, canvas),
    })
}

/// Write an `[0,1]` float HWC image as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    assert_eq!(c, 3, "save_rgb_png expects 3 channels");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (pixels[(y, x, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[(y, x, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels[(y, x, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write a binary mask as an 8-bit grayscale PNG (abnormal = 255).
pub fn save_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask[(y, x)] * 255]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn resize_identity_when_sizes_match() {
        let src = Array::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 8 + x + c) as f32);
        assert_eq!(bilinear_resize(&src, 8, 8), src);
    }

    #[test]
    fn resize_preserves_constants() {
        let src = Array3::from_elem((10, 10, 3), 0.4f32);
        let out = bilinear_resize(&src, 7, 13);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn downscale_of_linear_ramp_stays_linear() {
        // A ramp along x resampled 2x down keeps pixel-center values.
        let src = Array::from_shape_fn((4, 8, 1), |(_, x, _)| x as f32);
        let out = bilinear_resize(&src, 2, 4);
        for ox in 0..4 {
            let want = (ox as f32 + 0.5) * 2.0 - 0.5;
            assert!((out[(0, ox, 0)] - want).abs() < 1e-5, "ox={ox}");
        }
    }

    #[test]
    fn load_rejects_non_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::GrayImage::new(40, 40).save(&path).unwrap();
        assert!(matches!(
            load_and_normalize(&path, 32),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn load_normalizes_to_unit_max() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut buf = image::RgbImage::new(64, 64);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            *px = image::Rgb([((x + y) % 128) as u8, 10, 5]);
        }
        buf.save(&path).unwrap();
        let img = load_and_normalize(&path, 64).unwrap();
        let max = img.pixels.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
        assert!(!img.all_zero);
    }

    #[test]
    fn constant_image_becomes_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        image::RgbImage::from_pixel(48, 48, image::Rgb([127, 127, 127]))
            .save(&path)
            .unwrap();
        let img = load_and_normalize(&path, 48).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_zero_image_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.png");
        image::RgbImage::new(32, 32).save(&path).unwrap();
        let img = load_and_normalize(&path, 32).unwrap();
        assert!(img.all_zero);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combined_masks_are_ored() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.png");
        let p2 = dir.path().join("m2.png");
        let mut m1 = image::GrayImage::new(8, 8);
        m1.put_pixel(1, 1, image::Luma([255]));
        m1.save(&p1).unwrap();
        let mut m2 = image::GrayImage::new(8, 8);
        m2.put_pixel(6, 2, image::Luma([40]));
        m2.save(&p2).unwrap();
        let mask = load_mask_combined("x", &[&p1, &p2], 8).unwrap();
        assert_eq!(mask.mask[(1, 1)], 1);
        assert_eq!(mask.mask[(2, 6)], 1);
        assert_eq!(mask.mask.iter().map(|&v| v as usize).sum::<usize>(), 2);
    }
}
