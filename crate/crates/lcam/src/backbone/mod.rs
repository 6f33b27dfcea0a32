//! Frozen classifier backbones, split for explanation.
//!
//! A [`ClassifierSplit`] is a pretrained classifier cut in two at a chosen
//! [`SplitPoint`]: everything up to (and including) the last convolutional
//! stage becomes the *feature extractor*, the remainder becomes the *head*.
//! Composing the halves reproduces the original network output exactly —
//! splitting is pure bookkeeping, no layer is altered.
//!
//! Both halves are frozen: training never accumulates gradients for their
//! parameters (gradients still flow *through* them to reach the attention
//! head). The struct carries a SHA-256 digest of all parameters taken at
//! construction so that checkpoints can prove which backbone they were
//! trained against, and an atomic counter of feature-extractor forward
//! passes, the currency in which explanation cost is measured.

pub mod zoo;

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels::softmax_rows, Tape, TensorD, Var};
use crate::error::{Error, Result};
use crate::nn::{hex_string, Network};
use crate::preprocess::{Image, InputSpec};

/// Where to cut the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPoint {
    /// After the activation of the last convolutional layer.
    LastConv,
    /// After the max-pooling layer that follows the last convolution
    /// (only defined for architectures that have one, e.g. VGG-16).
    AfterLastMaxpool,
}

impl std::fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitPoint::LastConv => "last_conv",
            SplitPoint::AfterLastMaxpool => "after_last_maxpool",
        })
    }
}

impl FromStr for SplitPoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_conv" => Ok(SplitPoint::LastConv),
            "after_last_maxpool" => Ok(SplitPoint::AfterLastMaxpool),
            other => Err(Error::InvalidConfig {
                detail: format!(
                    "unknown split point '{other}' (expected 'last_conv' or 'after_last_maxpool')"
                ),
            }),
        }
    }
}

/// Shape of the extracted feature maps: `K` channels of `P`×`Q` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub k: usize,
    pub p: usize,
    pub q: usize,
}

/// Softmax scores over the classifier's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    probs: Vec<f64>,
}

impl ClassScores {
    /// Wraps a probability vector, checking it is a distribution
    /// (non-negative, sums to 1 within 1e-5).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(Error::InvalidArgument {
                context: "ClassScores::new",
                detail: "probabilities must lie in [0,1]".into(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument {
                context: "ClassScores::new",
                detail: format!("probabilities sum to {sum}, not 1"),
            });
        }
        Ok(ClassScores { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Probability of one class.
    pub fn prob(&self, class: usize) -> Result<f64> {
        self.probs
            .get(class)
            .copied()
            .ok_or(Error::ClassOutOfRange {
                class,
                num_classes: self.probs.len(),
            })
    }

    /// Index of the highest-scoring class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// A full classifier definition before splitting: the network plus the
/// bookkeeping needed to cut it at either split point.
pub struct BackboneDef {
    pub model_id: String,
    pub network: Network,
    pub num_classes: usize,
    pub input: InputSpec,
    /// Layer index of the first *head* layer under [`SplitPoint::LastConv`].
    pub last_conv_split: usize,
    pub last_conv_shape: FeatureShape,
    /// Same for [`SplitPoint::AfterLastMaxpool`], where defined.
    pub post_pool_split: Option<usize>,
    pub post_pool_shape: Option<FeatureShape>,
}

/// A classifier split into a frozen feature extractor and a frozen head.
///
/// The `Debug` form is a compact summary (id, split, digest prefix) rather
/// than a dump of megabytes of weights.
pub struct ClassifierSplit {
    model_id: String,
    split_point: SplitPoint,
    features: Network,
    head: Network,
    num_classes: usize,
    feature_shape: FeatureShape,
    input: InputSpec,
    frozen_digest: String,
    passes: AtomicU64,
}

/// Cuts a classifier at the requested split point.
pub fn split_classifier(def: BackboneDef, split: SplitPoint) -> Result<ClassifierSplit> {
    let (idx, shape) = match split {
        SplitPoint::LastConv => (def.last_conv_split, def.last_conv_shape),
        SplitPoint::AfterLastMaxpool => match (def.post_pool_split, def.post_pool_shape) {
            (Some(i), Some(s)) => (i, s),
            _ => {
                return Err(Error::UnsupportedSplit {
                    model: def.model_id,
                    split: split.to_string(),
                })
            }
        },
    };
    let mut layers = def.network.layers;
    if idx > layers.len() {
        return Err(Error::InvalidArgument {
            context: "split_classifier",
            detail: format!("split index {idx} exceeds {} layers", layers.len()),
        });
    }
    let head_layers = layers.split_off(idx);
    let features = Network::new(layers);
    let head = Network::new(head_layers);
    let frozen_digest = combined_digest(&features, &head);
    Ok(ClassifierSplit {
        model_id: def.model_id,
        split_point: split,
        features,
        head,
        num_classes: def.num_classes,
        feature_shape: shape,
        input: def.input,
        frozen_digest,
        passes: AtomicU64::new(0),
    })
}

fn combined_digest(features: &Network, head: &Network) -> String {
    let mut hasher = Sha256::new();
    hasher.update(features.digest().as_bytes());
    hasher.update(head.digest().as_bytes());
    hex_string(&hasher.finalize())
}

impl std::fmt::Debug for ClassifierSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierSplit")
            .field("model_id", &self.model_id)
            .field("split_point", &self.split_point)
            .field("num_classes", &self.num_classes)
            .field("feature_shape", &self.feature_shape)
            .field("frozen_digest", &&self.frozen_digest[..12.min(self.frozen_digest.len())])
            .finish_non_exhaustive()
    }
}

impl ClassifierSplit {
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn split_point(&self) -> SplitPoint {
        self.split_point
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape `(K, P, Q)` of the extracted feature maps.
    pub fn feature_shape(&self) -> FeatureShape {
        self.feature_shape
    }

    /// Input geometry and normalisation the backbone expects.
    pub fn input_spec(&self) -> &InputSpec {
        &self.input
    }

    /// Digest of all frozen parameters, taken when the split was built.
    pub fn frozen_digest(&self) -> &str {
        &self.frozen_digest
    }

    /// Recomputes the parameter digest right now. Equal to
    /// [`frozen_digest`](Self::frozen_digest) unless something mutated the
    /// backbone — which nothing in this crate does.
    pub fn digest_now(&self) -> String {
        combined_digest(&self.features, &self.head)
    }

    /// Number of forward passes through the feature extractor so far,
    /// counted per sample.
    pub fn feature_pass_count(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    /// Runs the feature extractor on a `[n,3,H,W]` batch node, counting one
    /// forward pass per sample.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let size = self.input.size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::shape(
                "ClassifierSplit::features",
                format!("[n, 3, {size}, {size}]"),
                shape,
            ));
        }
        let out = self.features.apply(tape, x)?;
        self.passes.fetch_add(shape[0] as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Runs the head on a `[n,K,P,Q]` feature node, producing logits `[n,R]`.
    pub fn head(&self, tape: &mut Tape, a: Var) -> Result<Var> {
        let shape = tape.value(a).shape().to_vec();
        let FeatureShape { k, p, q } = self.feature_shape;
        if shape.len() != 4 || shape[1] != k || shape[2] != p || shape[3] != q {
            return Err(Error::shape(
                "ClassifierSplit::head",
                format!("[n, {k}, {p}, {q}]"),
                shape,
            ));
        }
        self.head.apply(tape, a)
    }

    /// Full classifier forward pass on one preprocessed image (one feature
    /// pass). Returns softmax scores over all classes.
    pub fn classify(&self, image: &Image) -> Result<ClassScores> {
        let (h, w) = image.hw();
        let x = image
            .pixels()
            .clone()
            .into_shape_with_order((1, 3, h, w))
            .expect("image is contiguous");
        let mut tape = Tape::new();
        let xv = tape.constant(x.into_dyn());
        let a = self.features(&mut tape, xv)?;
        let logits = self.head(&mut tape, a)?;
        let lv = tape
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::shape("classify", "[1, R] logits", tape.value(logits).shape()))?;
        let probs = softmax_rows(&lv);
        ClassScores::new(probs.row(0).to_vec())
    }

    /// The *model-truth* label: the class the frozen classifier itself
    /// assigns to this image. Attention training and faithfulness evaluation
    /// both condition on this label, not on any dataset annotation.
    pub fn model_truth_label(&self, image: &Image) -> Result<usize> {
        Ok(self.classify(image)?.argmax())
    }

    /// Batch of images stacked into a `[n,3,H,W]` tensor (training helper).
    pub fn stack_batch(&self, images: &[Image]) -> Result<TensorD> {
        let size = self.input.size;
        let n = images.len();
        if n == 0 {
            return Err(Error::InvalidArgument {
                context: "stack_batch",
                detail: "empty batch".into(),
            });
        }
        let mut out = Array4::<f64>::zeros((n, 3, size, size));
        for (i, img) in images.iter().enumerate() {
            if img.hw() != (size, size) {
                return Err(Error::shape(
                    "stack_batch",
                    format!("[3, {size}, {size}] image"),
                    img.hw(),
                ));
            }
            out.index_axis_mut(ndarray::Axis(0), i).assign(img.pixels());
        }
        Ok(out.into_dyn())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::zoo;

    fn tiny_split() -> ClassifierSplit {
        split_classifier(zoo::tiny_cnn_def(10, 42), SplitPoint::LastConv).unwrap()
    }

    #[test]
    fn class_scores_validate_and_break_ties_low() {
        assert!(ClassScores::new(vec![0.5, 0.4]).is_err()); // sums to 0.9
        assert!(ClassScores::new(vec![1.2, -0.2]).is_err()); // out of range
        let s = ClassScores::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(s.argmax(), 0); // four-way tie -> lowest index
        let s = ClassScores::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(s.argmax(), 1);
        assert!(s.prob(3).is_err());
    }

    #[test]
    fn split_produces_documented_feature_shape_and_digest() {
        let split = tiny_split();
        let FeatureShape { k, p, q } = split.feature_shape();
        assert_eq!((k, p, q), (16, 8, 8));
        assert_eq!(split.frozen_digest().len(), 64);
        assert_eq!(split.digest_now(), split.frozen_digest());
        assert_eq!(split.feature_pass_count(), 0);
    }

    #[test]
    fn composition_identity_head_of_features_equals_full_network() {
        // The split must be pure bookkeeping: head(features(x)) reproduces
        // the unsplit network bit for bit.
        let full = zoo::tiny_cnn_def(10, 42);
        let split = tiny_split();

        let x = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, i, j)| {
            (((n + 1) * (c + 2) * (i + 3) * (j + 5)) as f64 * 0.017).sin()
        })
        .into_dyn();

        let mut t_full = Tape::new();
        let xv = t_full.constant(x.clone());
        let y_full = full.network.apply(&mut t_full, xv).unwrap();

        let mut t_split = Tape::new();
        let xv = t_split.constant(x);
        let a = split.features(&mut t_split, xv).unwrap();
        let y_split = split.head(&mut t_split, a).unwrap();

        assert_eq!(t_full.value(y_full), t_split.value(y_split));
        assert_eq!(split.feature_pass_count(), 2); // one per sample
    }

    #[test]
    fn pass_counter_tracks_classify_calls() {
        let split = tiny_split();
        let img = Image::new(ndarray::Array3::from_elem((3, 32, 32), 0.1)).unwrap();
        let scores = split.classify(&img).unwrap();
        assert_eq!(scores.num_classes(), 10);
        let _ = split.model_truth_label(&img).unwrap();
        assert_eq!(split.feature_pass_count(), 2);
    }

    #[test]
    fn unsupported_split_point_is_reported() {
        let def = zoo::tiny_cnn_def(4, 1);
        let err = split_classifier(def, SplitPoint::AfterLastMaxpool).unwrap_err();
        assert!(matches!(err, Error::UnsupportedSplit { .. }));
    }

    #[test]
    fn feature_input_shape_is_validated() {
        let split = tiny_split();
        let mut tape = Tape::new();
        let bad = tape.constant(Array4::<f64>::zeros((1, 3, 16, 16)).into_dyn());
        assert!(split.features(&mut tape, bad).is_err());
        // A rejected call must not count as a pass.
        assert_eq!(split.feature_pass_count(), 0);
    }
}
