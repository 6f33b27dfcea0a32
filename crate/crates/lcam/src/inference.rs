//! One-forward-pass explanation and overlay export.
//!
//! At explanation time the trained head is used differently than during
//! training: the raw activation map is *min-max* normalised (no sigmoid)
//! and then bilinearly upscaled to the input size. A single
//! feature-extraction pass yields both the model-truth label (when no class
//! is requested) and the feature maps the saliency map is computed from —
//! this is the efficiency point of the whole construction.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis, Ix2, Ix4};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use crate::attention::{compute_cam, AttentionParams, Cam};
use crate::autodiff::{kernels, Tape};
use crate::backbone::ClassifierSplit;
use crate::error::{Error, Result};
use crate::preprocess::Image;

/// What produced a saliency map: the trained head, or one of the synthetic
/// baselines used to anchor the faithfulness metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    /// The trained attention head.
    Lcam,
    /// Uniform random noise, re-seeded per image.
    BaselineRandom,
    /// A centred Gaussian bump, identical for every image.
    BaselineCenter,
}

impl fmt::Display for SaliencySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencySource::Lcam => "lcam",
            SaliencySource::BaselineRandom => "baseline_random",
            SaliencySource::BaselineCenter => "baseline_center",
        })
    }
}

impl FromStr for SaliencySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcam" => Ok(SaliencySource::Lcam),
            "baseline_random" => Ok(SaliencySource::BaselineRandom),
            "baseline_center" => Ok(SaliencySource::BaselineCenter),
            other => Err(Error::InvalidArgument {
                context: "saliency source",
                detail: format!(
                    "unknown source `{other}` (expected `lcam`, `baseline_random` or `baseline_center`)"
                ),
            }),
        }
    }
}

/// A class-conditional saliency map at input resolution, every entry in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Array2<f64>,
    class_index: usize,
    source: SaliencySource,
}

impl SaliencyMap {
    /// Wraps a map, rejecting entries outside `[0, 1]`.
    pub fn new(values: Array2<f64>, class_index: usize, source: SaliencySource) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument {
                context: "saliency map",
                detail: "entries must lie in [0, 1]".into(),
            });
        }
        Ok(SaliencyMap {
            values,
            class_index,
            source,
        })
    }

    /// The map itself, `[H, W]`.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// The class this map explains.
    pub fn class_index(&self) -> usize {
        self.class_index
    }

    /// What produced the map.
    pub fn source(&self) -> SaliencySource {
        self.source
    }
}

/// Affinely rescales a raw activation map to `[0, 1]`; a constant map
/// (which carries no localisation signal) becomes all zeros.
pub fn minmax_normalize(cam: &Cam) -> Array2<f64> {
    let min = cam.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = cam.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Array2::zeros(cam.values.raw_dim());
    }
    let span = max - min;
    cam.values.mapv(|v| (v - min) / span)
}

/// Explains `image`: computes the activation map for `class` (or for the
/// model-truth label when `class` is `None`), min-max normalises it, and
/// upscales it to input resolution. Exactly one feature-extraction pass.
pub fn explain(
    split: &ClassifierSplit,
    params: &AttentionParams,
    image: &Image,
    class: Option<usize>,
) -> Result<SaliencyMap> {
    let shape = split.feature_shape();
    if params.num_classes() != split.num_classes() || params.channels() != shape.k {
        return Err(Error::shape(
            "explain",
            format!("attention params [{}, {}]", split.num_classes(), shape.k),
            (params.num_classes(), params.channels()),
        ));
    }
    if let Some(c) = class {
        if c >= split.num_classes() {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes: split.num_classes(),
            });
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(split.stack_batch(std::slice::from_ref(image))?);
    let a = split.features(&mut tape, x)?;
    let feature_maps = tape
        .value(a)
        .view()
        .into_dimensionality::<Ix4>()
        .expect("feature maps are [n,K,P,Q]")
        .index_axis(Axis(0), 0)
        .to_owned();
    let class = match class {
        Some(c) => c,
        None => {
            // The label comes from the head of the same pass, so asking for
            // "the model's class" costs nothing extra.
            let logits_var = split.head(&mut tape, a)?;
            let logits = tape
                .value(logits_var)
                .view()
                .into_dimensionality::<Ix2>()
                .expect("head output is a matrix");
            logits
                .row(0)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        }
    };
    drop(tape);
    let cam = compute_cam(params, &feature_maps, class)?;
    let normalized = minmax_normalize(&cam);
    let (h, w) = image.hw();
    let values = kernels::bilinear_resize(&normalized.view(), h, w);
    SaliencyMap::new(values, class, SaliencySource::Lcam)
}

/// The compact jet-like colormap used for overlays: blue through green to
/// red as `v` runs from 0 to 1.
fn heat_color(v: f64) -> [f64; 3] {
    let band = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

/// Writes the qualitative artifacts for one explanation: a PNG blending the
/// photographic crop with the heatmap at equal weight, and a sidecar `.npy`
/// array of the raw map values for quantitative reuse.
pub fn export_overlay(
    photo: &image::RgbImage,
    map: &SaliencyMap,
    png_path: &Path,
    npy_path: &Path,
) -> Result<()> {
    let (h, w) = map.values.dim();
    if (photo.height() as usize, photo.width() as usize) != (h, w) {
        return Err(Error::shape(
            "export_overlay",
            format!("a {w}x{h} photo matching the map"),
            (photo.width(), photo.height()),
        ));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let heat = heat_color(map.values[(i, j)]);
            let base = photo.get_pixel(j as u32, i as u32).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let blended = 0.5 * f64::from(base[c]) / 255.0 + 0.5 * heat[c];
                px[c] = (blended * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    out.save(png_path).map_err(|e| Error::FileFormat {
        path: png_path.to_path_buf(),
        detail: format!("cannot encode the overlay: {e}"),
    })?;
    let file = File::create(npy_path).map_err(|e| Error::io(npy_path, e))?;
    map.values
        .write_npy(BufWriter::new(file))
        .map_err(|e| Error::FileFormat {
            path: npy_path.to_path_buf(),
            detail: format!("cannot write the array: {e}"),
        })
}

/// Reads a sidecar `.npy` map back into memory.
pub fn read_map_array(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Array2::<f64>::read_npy(file).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        detail: format!("cannot read the array: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::InitScheme;
    use crate::backbone::zoo::tiny_cnn_def;
    use crate::backbone::{split_classifier, SplitPoint};
    use crate::dataset::{ingest_dataset, DatasetLayout};
    use crate::preprocess::{eval_crop_rgb8, preprocess_eval};
    use crate::synth;
    use ndarray::array;

    fn fixture() -> (ClassifierSplit, AttentionParams, Image, image::RgbImage) {
        let dir = tempfile::tempdir().unwrap();
        synth::generate_dataset(dir.path(), 3, 1, 13).unwrap();
        let manifest = ingest_dataset(dir.path(), DatasetLayout::ClassDirs, None).unwrap();
        let split = split_classifier(tiny_cnn_def(3, 4), SplitPoint::LastConv).unwrap();
        let params = AttentionParams::init(3, 16, InitScheme::default(), 6);
        let image = preprocess_eval(&manifest.entries[0].path, split.input_spec()).unwrap();
        let photo = eval_crop_rgb8(&manifest.entries[0].path, split.input_spec()).unwrap();
        (split, params, image, photo)
    }

    #[test]
    fn minmax_matches_the_affine_oracle_and_zeroes_constants() {
        let cam = Cam {
            values: array![[1.0, 3.0], [3.0, 5.0]],
            class_index: 0,
        };
        assert_eq!(minmax_normalize(&cam), array![[0.0, 0.5], [0.5, 1.0]]);

        let flat = Cam {
            values: Array2::from_elem((3, 3), 2.5),
            class_index: 0,
        };
        assert_eq!(minmax_normalize(&flat), Array2::<f64>::zeros((3, 3)));

        // A map already spanning [0, 1] is a fixed point.
        let unit = Cam {
            values: array![[0.0, 0.25], [0.75, 1.0]],
            class_index: 0,
        };
        assert_eq!(minmax_normalize(&unit), unit.values);
    }

    #[test]
    fn explain_costs_one_pass_and_is_pure() {
        let (split, params, image, _) = fixture();
        let before = split.feature_pass_count();
        let map = explain(&split, &params, &image, None).unwrap();
        assert_eq!(split.feature_pass_count() - before, 1);
        assert_eq!(map.values().dim(), (32, 32));
        assert_eq!(map.source(), SaliencySource::Lcam);
        assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));

        let again = explain(&split, &params, &image, None).unwrap();
        assert_eq!(map, again);

        // Asking explicitly for the model-truth class changes nothing.
        let label = split.model_truth_label(&image).unwrap();
        assert_eq!(map.class_index(), label);
        let explicit = explain(&split, &params, &image, Some(label)).unwrap();
        assert_eq!(map, explicit);
    }

    #[test]
    fn maps_are_class_specific() {
        let (split, params, image, _) = fixture();
        let a = explain(&split, &params, &image, Some(0)).unwrap();
        let b = explain(&split, &params, &image, Some(1)).unwrap();
        let max_diff = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0, "class 0 and 1 maps are identical");
    }

    #[test]
    fn normalisation_happens_before_upscaling() {
        // On this fixture the two orders disagree: upscaling first blends
        // the lone peak below its neighbours' reach, so normalising after
        // stretches a smaller span back to [0, 1].
        let m = array![[0.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 0.0]];
        let cam = Cam {
            values: m.clone(),
            class_index: 0,
        };
        let normalize_then_up = kernels::bilinear_resize(&minmax_normalize(&cam).view(), 4, 4);
        let up = kernels::bilinear_resize(&m.view(), 4, 4);
        let up_then_normalize = minmax_normalize(&Cam {
            values: up,
            class_index: 0,
        });
        let max_diff = normalize_then_up
            .iter()
            .zip(up_then_normalize.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.1, "orders agree on the fixture: {max_diff}");
    }

    #[test]
    fn positive_rescaling_of_the_class_row_leaves_the_map_unchanged() {
        let (split, params, image, _) = fixture();
        let y = 1;
        let base = explain(&split, &params, &image, Some(y)).unwrap();

        let alpha = 37.5;
        let mut weights = params.weights().to_owned();
        let mut bias = params.bias().to_owned();
        weights.row_mut(y).mapv_inplace(|v| v * alpha);
        bias[y] *= alpha;
        let scaled_params = AttentionParams::from_arrays(weights, bias).unwrap();
        let scaled = explain(&split, &scaled_params, &image, Some(y)).unwrap();

        for (a, b) in base.values().iter().zip(scaled.values().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let (split, params, image, _) = fixture();
        assert!(matches!(
            explain(&split, &params, &image, Some(3)),
            Err(Error::ClassOutOfRange { class: 3, .. })
        ));
        let wrong = AttentionParams::init(5, 16, InitScheme::default(), 0);
        assert!(matches!(
            explain(&split, &wrong, &image, None),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(
            SaliencyMap::new(array![[0.5, 1.2]], 0, SaliencySource::Lcam).is_err(),
            "out-of-range entries must be refused"
        );
    }

    #[test]
    fn overlays_blend_the_documented_colormap_and_round_trip_the_sidecar() {
        let (split, params, image, photo) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let map = explain(&split, &params, &image, None).unwrap();
        let png = dir.path().join("sm.png");
        let npy = dir.path().join("sm.npy");
        export_overlay(&photo, &map, &png, &npy).unwrap();

        // The sidecar reloads bit-identically.
        assert_eq!(&read_map_array(&npy).unwrap(), map.values());

        // Overlay dims match the crop, and a zero map blends every pixel
        // with the colormap's zero colour (dark blue: heat (0, 0, 0.5)).
        let overlay = image::open(&png).unwrap().to_rgb8();
        assert_eq!((overlay.width(), overlay.height()), (32, 32));
        let zeros =
            SaliencyMap::new(Array2::zeros((32, 32)), 0, SaliencySource::Lcam).unwrap();
        let png0 = dir.path().join("zero.png");
        export_overlay(&photo, &zeros, &png0, &dir.path().join("zero.npy")).unwrap();
        let blended = image::open(&png0).unwrap().to_rgb8();
        for (x, y, px) in blended.enumerate_pixels() {
            let base = photo.get_pixel(x, y).0;
            let expect = |c: usize, heat: f64| {
                ((0.5 * f64::from(base[c]) / 255.0 + 0.5 * heat) * 255.0).round() as u8
            };
            assert_eq!(px.0, [expect(0, 0.0), expect(1, 0.0), expect(2, 0.5)], "at ({x},{y})");
        }

        // Size mismatches are refused.
        let small = SaliencyMap::new(Array2::zeros((8, 8)), 0, SaliencySource::Lcam).unwrap();
        assert!(export_overlay(&photo, &small, &png, &npy).is_err());
    }

    #[test]
    fn heat_color_hits_the_classic_anchors() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(heat_color(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(heat_color(1.0), [0.5, 0.0, 0.0]);
        for v in [0.0, 0.1, 0.35, 0.6, 0.85, 1.0] {
            assert!(heat_color(v).iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
