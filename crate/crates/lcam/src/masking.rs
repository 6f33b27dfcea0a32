//! Applying normalised activation maps as masks.
//!
//! Two masking modes define the two method variants:
//!
//! * **feature-map masking** (`Fm`): the `P`×`Q` map scales the feature maps
//!   channel-by-channel before the classifier head consumes them;
//! * **image masking** (`Img`): the map is bilinearly upscaled to the input
//!   resolution and multiplies the (normalised) input image, which then makes
//!   a second pass through the network.
//!
//! Masking always happens in the network's input domain — i.e. on
//! *normalised* pixel values, exactly what the backbone consumes. A mask
//! value of 1 therefore leaves the classifier input untouched and a value of
//! 0 erases the pixel's evidence entirely.

use ndarray::{Array3, Axis};

use crate::attention::NormalizedCam;
use crate::autodiff::kernels::bilinear_resize;
use crate::error::{Error, Result};
use crate::preprocess::Image;

/// A mask upscaled to image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct UpscaledMask {
    pub values: ndarray::Array2<f64>,
    pub class_index: usize,
}

/// Scales every feature channel by the map: `A'[k,p,q] = A[k,p,q] * S[p,q]`.
pub fn mask_feature_maps(features: &Array3<f64>, s: &NormalizedCam) -> Result<Array3<f64>> {
    let (_, p, q) = features.dim();
    if s.values.dim() != (p, q) {
        return Err(Error::shape(
            "mask_feature_maps",
            format!("[{p}, {q}] map matching the feature grid"),
            s.values.dim(),
        ));
    }
    let mut out = features.clone();
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane *= &s.values;
    }
    Ok(out)
}

/// Bilinearly upscales a normalised map to `(h, w)` (half-pixel centres,
/// edge clamp). Upscaling only: the target must be at least as large as the
/// map in both dimensions.
pub fn upscale(s: &NormalizedCam, h: usize, w: usize) -> Result<UpscaledMask> {
    let (p, q) = s.values.dim();
    if h < p || w < q {
        return Err(Error::InvalidArgument {
            context: "upscale",
            detail: format!("target {h}x{w} is smaller than the {p}x{q} map"),
        });
    }
    Ok(UpscaledMask {
        values: bilinear_resize(&s.values.view(), h, w),
        class_index: s.class_index,
    })
}

/// Multiplies a preprocessed (normalised) image by the mask, broadcasting
/// over channels.
pub fn mask_image(image: &Image, mask: &UpscaledMask) -> Result<Image> {
    let (h, w) = image.hw();
    if mask.values.dim() != (h, w) {
        return Err(Error::shape(
            "mask_image",
            format!("[{h}, {w}] mask matching the image"),
            mask.values.dim(),
        ));
    }
    let mut pixels = image.pixels().clone();
    for mut plane in pixels.axis_iter_mut(Axis(0)) {
        plane *= &mask.values;
    }
    Image::new(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};

    fn map(values: Array2<f64>) -> NormalizedCam {
        NormalizedCam {
            values,
            class_index: 0,
        }
    }

    #[test]
    fn feature_masking_scales_every_channel() {
        let features = Array3::from_shape_fn((3, 2, 2), |(k, i, j)| (k * 4 + i * 2 + j) as f64);
        let s = map(arr2(&[[0.5, 1.0], [0.0, 0.25]]));
        let masked = mask_feature_maps(&features, &s).unwrap();
        for k in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(
                        masked[(k, i, j)],
                        features[(k, i, j)] * s.values[(i, j)],
                        epsilon = 1e-15
                    );
                }
            }
        }
    }

    #[test]
    fn all_ones_mask_is_the_identity_for_images() {
        let pixels = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| {
            (c as f64 - 1.0) * 0.3 + (i * 4 + j) as f64 * 0.01
        });
        let image = Image::new(pixels.clone()).unwrap();
        let mask = UpscaledMask {
            values: Array2::ones((4, 4)),
            class_index: 0,
        };
        let masked = mask_image(&image, &mask).unwrap();
        assert_eq!(masked.pixels(), &pixels);

        // And the zero mask erases everything, including negative
        // (normalised) values.
        let zero = UpscaledMask {
            values: Array2::zeros((4, 4)),
            class_index: 0,
        };
        let blank = mask_image(&image, &zero).unwrap();
        assert!(blank.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upscale_interpolates_with_half_pixel_centres() {
        let s = map(arr2(&[[0.0, 1.0], [0.0, 1.0]]));
        let up = upscale(&s, 4, 4).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(up.values[(i, 0)], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(up.values[(i, 1)], 0.25, epsilon = 1e-15);
            assert_abs_diff_eq!(up.values[(i, 2)], 0.75, epsilon = 1e-15);
            assert_abs_diff_eq!(up.values[(i, 3)], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn upscale_preserves_the_unit_interval() {
        // Interpolation is a convex combination: values cannot escape the
        // range of the source map.
        let s = map(Array2::from_shape_fn((3, 5), |(i, j)| {
            ((i * 5 + j) as f64 * 0.631).sin() * 0.5 + 0.5
        }));
        let up = upscale(&s, 17, 23).unwrap();
        let (lo, hi) = s
            .values
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(up.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn downscaling_and_shape_mismatches_are_rejected() {
        let s = map(Array2::zeros((4, 4)));
        assert!(matches!(
            upscale(&s, 3, 8),
            Err(Error::InvalidArgument { .. })
        ));

        let features = Array3::<f64>::zeros((2, 4, 4));
        let wrong = map(Array2::zeros((3, 3)));
        assert!(mask_feature_maps(&features, &wrong).is_err());

        let image = Image::new(Array3::zeros((3, 8, 8))).unwrap();
        let small = UpscaledMask {
            values: Array2::zeros((4, 4)),
            class_index: 0,
        };
        assert!(mask_image(&image, &small).is_err());
    }

    #[test]
    fn masked_output_gradients_reach_attention_params() {
        // Central-difference check through the masking path: a scalar probe
        // of the masked feature maps (mean pooled, summed, cross-entropy'd
        // against a 2-logit readout, plus the area regulariser) is
        // differentiated w.r.t. the attention parameters and compared to
        // finite differences at relative 1e-3.
        use crate::attention::{AttentionParams, InitScheme};
        use crate::autodiff::{Tape, TensorD};
        use std::sync::Arc;

        let features = Array3::from_shape_fn((4, 3, 3), |(k, i, j)| {
            ((k * 9 + i * 3 + j) as f64 * 0.37).cos()
        });
        let readout = Array2::from_shape_fn((2, 4), |(o, k)| 0.4 * (o as f64 + 1.0) - 0.2 * k as f64);
        let params = AttentionParams::init(2, 4, InitScheme::default(), 3);

        let probe = |w: &TensorD, b: &TensorD| -> (f64, Option<(TensorD, TensorD)>) {
            let mut tape = Tape::new();
            let a = tape.constant(
                features
                    .clone()
                    .into_shape_with_order((1, 4, 3, 3))
                    .unwrap()
                    .into_dyn(),
            );
            let wv = tape.leaf(Arc::new(w.clone()), true);
            let bv = tape.leaf(Arc::new(b.clone()), true);
            let cam = tape.attention_cam(a, wv, bv, Arc::new(vec![1])).unwrap();
            let s = tape.sigmoid(cam);
            let masked = tape.spatial_mul(a, s).unwrap();
            let pooled = tape.global_avg_pool(masked).unwrap(); // [1,4]
            let wl = tape.constant(readout.clone().into_dyn());
            let bl = tape.constant(ndarray::Array1::<f64>::zeros(2).into_dyn());
            let logits = tape.linear(pooled, wl, bl).unwrap(); // [1,2]
            let ce = tape.cross_entropy(logits, Arc::new(vec![1])).unwrap();
            let reg = tape.av_loss(s, 0.3).unwrap();
            let total = tape.add(ce, reg).unwrap();
            let value = tape.scalar(total);
            tape.backward(total).unwrap();
            let grads = tape
                .grad(wv)
                .map(|gw| (gw.clone(), tape.grad(bv).unwrap().clone()));
            (value, grads)
        };

        let w0 = params.weights().to_owned().into_dyn();
        let b0 = params.bias().to_owned().into_dyn();
        let (_, grads) = probe(&w0, &b0);
        let (gw, gb) = grads.unwrap();

        let eps = 1e-5;
        let rel_check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() <= 1e-3,
                "{what} grad mismatch: analytic {analytic}, finite-diff {fd}"
            );
        };
        for (idx, _) in w0.indexed_iter() {
            let mut p = w0.clone();
            p[&idx] += eps;
            let mut m = w0.clone();
            m[&idx] -= eps;
            rel_check(gw[&idx], (probe(&p, &b0).0 - probe(&m, &b0).0) / (2.0 * eps), "weight");
        }
        for (idx, _) in b0.indexed_iter() {
            let mut p = b0.clone();
            p[&idx] += eps;
            let mut m = b0.clone();
            m[&idx] -= eps;
            rel_check(gb[&idx], (probe(&w0, &p).0 - probe(&w0, &m).0) / (2.0 * eps), "bias");
        }
    }
}
