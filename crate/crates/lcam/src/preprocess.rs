//! Image loading and preprocessing.
//!
//! The canonical pipeline matches what the backbones were trained with:
//! decode to RGB, bilinearly resize the *shorter* side to a fixed length,
//! crop a square window (random during training, centred at evaluation), and
//! normalise each channel to zero mean / unit variance with the backbone's
//! channel statistics.

use std::path::Path;

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::bilinear_resize;
use crate::error::{Error, Result};

/// Per-channel normalisation statistics (RGB order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// The statistics the ImageNet-trained zoo backbones expect.
pub const IMAGENET_STATS: ChannelStats = ChannelStats {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

/// Geometry and statistics of a backbone's expected input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    /// Side length of the square crop fed to the network.
    pub size: usize,
    /// The shorter image side is scaled to this length before cropping.
    pub resize_shorter: usize,
    /// Channel normalisation applied after cropping.
    pub stats: ChannelStats,
}

/// A preprocessed network input: normalised RGB pixels in `[3, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    /// Wraps an already-normalised pixel array. The layout is `[3, H, W]`.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape("Image::new", "[3, H>0, W>0]", pixels.dim()));
        }
        Ok(Image { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// `(height, width)` of the pixel grid.
    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.pixels.dim();
        (h, w)
    }
}

/// Decodes an image file to RGB floats in `[0,1]`, `[3,H,W]` layout.
/// Greyscale inputs are replicated across channels; alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let decoded = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Target dimensions when scaling the shorter side to `target`: the longer
/// side is scaled proportionally and rounded to the nearest pixel.
pub fn resize_shorter_dims(h: usize, w: usize, target: usize) -> (usize, usize) {
    let scale = target as f64;
    if h <= w {
        (target, ((w as f64 * scale / h as f64).round() as usize).max(1))
    } else {
        (((h as f64 * scale / w as f64).round() as usize).max(1), target)
    }
}

/// Bilinearly resizes so the shorter side equals `target`.
pub fn resize_shorter(x: &Array3<f64>, target: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (nh, nw) = resize_shorter_dims(h, w, target);
    if (nh, nw) == (h, w) {
        return x.clone();
    }
    let mut out = Array3::<f64>::zeros((c, nh, nw));
    for ci in 0..c {
        let plane = bilinear_resize(&x.index_axis(Axis(0), ci), nh, nw);
        out.index_axis_mut(Axis(0), ci).assign(&plane);
    }
    out
}

/// Top-left corner of the centred `size`×`size` window (floor division, the
/// convention shared with the common training frameworks).
pub fn center_offsets(h: usize, w: usize, size: usize) -> (usize, usize) {
    ((h - size) / 2, (w - size) / 2)
}

/// Extracts a square crop at the given offsets.
pub fn crop(x: &Array3<f64>, top: usize, left: usize, size: usize) -> Array3<f64> {
    x.slice(ndarray::s![.., top..top + size, left..left + size])
        .to_owned()
}

/// Normalises channels in place: `(v - mean[c]) / std[c]`.
pub fn normalize(x: &mut Array3<f64>, stats: &ChannelStats) {
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        x.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - m) / s);
    }
}

fn prepared_crop(
    path: &Path,
    spec: &InputSpec,
    offsets: impl FnOnce(usize, usize) -> (usize, usize),
) -> Result<Array3<f64>> {
    let raw = load_rgb(path)?;
    let (_, h, w) = raw.dim();
    if h.min(w) == 0 {
        return Err(Error::ImageDecode {
            path: path.to_path_buf(),
            detail: "empty image".into(),
        });
    }
    let resized = resize_shorter(&raw, spec.resize_shorter);
    let (_, rh, rw) = resized.dim();
    if rh < spec.size || rw < spec.size {
        return Err(Error::InvalidArgument {
            context: "preprocess",
            detail: format!(
                "resized image {rh}x{rw} is smaller than the {0}x{0} crop",
                spec.size
            ),
        });
    }
    let (top, left) = offsets(rh, rw);
    Ok(crop(&resized, top, left, spec.size))
}

/// Evaluation preprocessing: resize, *centre* crop, normalise.
pub fn preprocess_eval(path: &Path, spec: &InputSpec) -> Result<Image> {
    let mut x = prepared_crop(path, spec, |h, w| center_offsets(h, w, spec.size))?;
    normalize(&mut x, &spec.stats);
    Image::new(x)
}

/// Training preprocessing: resize, *random* crop, normalise. The crop
/// offsets are drawn from `rng`, so a seeded generator reproduces the run.
pub fn preprocess_train(path: &Path, spec: &InputSpec, rng: &mut impl Rng) -> Result<Image> {
    let size = spec.size;
    let mut x = prepared_crop(path, spec, |h, w| {
        (
            rng.random_range(0..=h - size),
            rng.random_range(0..=w - size),
        )
    })?;
    normalize(&mut x, &spec.stats);
    Image::new(x)
}

/// The *unnormalised* centre crop as an 8-bit RGB image — the photographic
/// layer under saliency overlays.
pub fn eval_crop_rgb8(path: &Path, spec: &InputSpec) -> Result<image::RgbImage> {
    let x = prepared_crop(path, spec, |h, w| center_offsets(h, w, spec.size))?;
    let (_, h, w) = x.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                (x[(0, i, j)] * 255.0).round().clamp(0.0, 255.0) as u8,
                (x[(1, i, j)] * 255.0).round().clamp(0.0, 255.0) as u8,
                (x[(2, i, j)] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn imagenet_spec() -> InputSpec {
        InputSpec {
            size: 224,
            resize_shorter: 256,
            stats: IMAGENET_STATS,
        }
    }

    #[test]
    fn resize_dims_scale_the_longer_side_proportionally() {
        // 512x341 landscape: shorter side 341 -> 256, longer 512 -> 384.
        assert_eq!(resize_shorter_dims(341, 512, 256), (256, 384));
        // Portrait orientation mirrors it.
        assert_eq!(resize_shorter_dims(512, 341, 256), (384, 256));
        // Already at target: identity.
        assert_eq!(resize_shorter_dims(256, 256, 256), (256, 256));
        assert_eq!(resize_shorter_dims(224, 224, 224), (224, 224));
    }

    #[test]
    fn center_offsets_match_hand_computation() {
        assert_eq!(center_offsets(256, 256, 224), (16, 16));
        assert_eq!(center_offsets(256, 384, 224), (16, 80));
        assert_eq!(center_offsets(224, 224, 224), (0, 0));
    }

    #[test]
    fn normalize_is_exact_per_channel() {
        let mut x = Array3::<f64>::from_elem((3, 2, 2), 0.5);
        normalize(&mut x, &IMAGENET_STATS);
        for c in 0..3 {
            let want = (0.5 - IMAGENET_STATS.mean[c]) / IMAGENET_STATS.std[c];
            assert!((x[(c, 0, 0)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_pipeline_is_deterministic_and_train_crops_vary() {
        // Paint a gradient PNG, run both pipelines.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grad.png");
        let mut img = image::RgbImage::new(320, 280);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = image::Rgb([(x % 256) as u8, (y % 256) as u8, 128]);
        }
        img.save(&path).unwrap();

        let spec = imagenet_spec();
        let a = preprocess_eval(&path, &spec).unwrap();
        let b = preprocess_eval(&path, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hw(), (224, 224));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t1 = preprocess_train(&path, &spec, &mut rng).unwrap();
        let t2 = preprocess_train(&path, &spec, &mut rng).unwrap();
        assert_eq!(t1.hw(), (224, 224));
        // Two draws from the same stream almost surely pick different crops.
        assert_ne!(t1, t2);

        // Same seed, same crop.
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let t1_again = preprocess_train(&path, &spec, &mut rng2).unwrap();
        assert_eq!(t1, t1_again);
    }

    #[test]
    fn greyscale_images_replicate_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grey.png");
        let img = image::GrayImage::from_pixel(40, 40, image::Luma([100]));
        img.save(&path).unwrap();
        let rgb = load_rgb(&path).unwrap();
        assert_eq!(rgb.dim(), (3, 40, 40));
        for c in 0..3 {
            assert!((rgb[(c, 7, 9)] - 100.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupt_files_yield_decode_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(matches!(
            preprocess_eval(&path, &imagenet_spec()),
            Err(Error::ImageDecode { .. })
        ));
    }

    #[test]
    fn crops_smaller_than_the_window_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.png");
        image::RgbImage::new(8, 8).save(&path).unwrap();
        // resize_shorter=10 < size=16: the resized image cannot host the crop.
        let spec = InputSpec {
            size: 16,
            resize_shorter: 10,
            stats: IMAGENET_STATS,
        };
        assert!(matches!(
            preprocess_eval(&path, &spec),
            Err(Error::InvalidArgument { .. })
        ));
    }
}
