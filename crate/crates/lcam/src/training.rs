//! Optimisation of the attention head against a frozen classifier.
//!
//! Two regimes share one loss and one loop, differing only in what the
//! normalised activation map multiplies. In the *feature-map* regime
//! ([`Variant::Fm`]) it gates the feature maps right before the classifier
//! head, costing a single feature-extraction pass per batch. In the *image*
//! regime ([`Variant::Img`]) it is bilinearly upscaled to the input size
//! and gates the normalised image, which is then re-fed through the feature
//! extractor: two passes per batch, but the mask is judged at full image
//! resolution.
//!
//! No annotations are needed: each crop's target is the frozen model's own
//! prediction on that same (unmasked) crop, so the head learns to explain
//! what the classifier actually does, right or wrong.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Ix2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionParams, InitScheme, NormalizedCam};
use crate::autodiff::{kernels, Tape, TensorD, Var};
use crate::backbone::{ClassScores, ClassifierSplit, SplitPoint};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::preprocess::{preprocess_train, Image};

/// Which tensor the normalised activation map multiplies during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Gate the feature maps before the head (one feature pass per batch).
    Fm,
    /// Upscale the map and gate the input image, then re-extract features
    /// (two feature passes per batch).
    Img,
}

impl Variant {
    /// Feature-extraction passes one training batch costs.
    pub fn feature_passes_per_batch(self) -> u64 {
        match self {
            Variant::Fm => 1,
            Variant::Img => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fm => "fm",
            Variant::Img => "img",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Variant::Fm),
            "img" => Ok(Variant::Img),
            other => Err(Error::InvalidArgument {
                context: "variant",
                detail: format!("unknown variant `{other}` (expected `fm` or `img`)"),
            }),
        }
    }
}

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Which masking regime to train.
    pub variant: Variant,
    /// Images per optimisation step.
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch, so the
    /// rate at epoch `e` is exactly `lr · decay^e`.
    pub lr_decay_per_epoch: f64,
    /// Full passes over the dataset.
    pub epochs: usize,
    /// Weights of the composite objective.
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Seed for initialisation, shuffling and crop placement.
    pub seed: u64,
    /// Where the backbone must be split.
    pub split_point: SplitPoint,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // The VGG-16 schedule; see `preset`.
        TrainConfig {
            variant: Variant::Img,
            batch_size: 64,
            lr: 1e-4,
            lr_decay_per_epoch: 0.75,
            epochs: 7,
            loss_weights: LossWeights::default(),
            seed: 0,
            split_point: SplitPoint::LastConv,
        }
    }
}

impl TrainConfig {
    /// The reference schedules, tuned per backbone: `vgg16` decays the rate
    /// by 0.75 over 7 epochs, `resnet50` by 0.95 over 25. Everything else
    /// (batch 64, rate 1e-4, loss weights) is shared.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vgg16" => Ok(TrainConfig::default()),
            "resnet50" => Ok(TrainConfig {
                lr_decay_per_epoch: 0.95,
                epochs: 25,
                ..TrainConfig::default()
            }),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown preset `{other}` (expected `vgg16` or `resnet50`)"),
            }),
        }
    }

    /// Rejects configurations the loop cannot run.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig {
                detail: "batch_size must be at least 1".into(),
            });
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig {
                detail: format!("lr must be positive and finite, got {}", self.lr),
            });
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "lr_decay_per_epoch must lie in (0, 1], got {}",
                    self.lr_decay_per_epoch
                ),
            });
        }
        self.loss_weights.validate()
    }

    /// Learning rate in effect at (zero-based) `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Global optimisation step, counted from 0.
    pub step: u64,
    /// Zero-based epoch the step belongs to.
    pub epoch: usize,
    /// Loss terms measured on the step's batch, before the update.
    pub losses: LossBreakdown,
    /// Learning rate the update used.
    pub lr: f64,
}

/// The per-step loss history of a run, serialisable as CSV with columns
/// `step,epoch,tv,av,ce,total,lr`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    rows: Vec<LogRow>,
}

impl TrainLog {
    /// All rows in step order.
    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    /// Mean total loss over the rows of one epoch, if it ran.
    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        let totals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.losses.total)
            .collect();
        if totals.is_empty() {
            None
        } else {
            Some(totals.iter().sum::<f64>() / totals.len() as f64)
        }
    }

    /// The log as CSV text. Floats use the shortest round-trip form, so the
    /// same run always produces byte-identical text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,tv,av,ce,total,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.losses.tv, r.losses.av, r.losses.ce, r.losses.total, r.lr
            ));
        }
        out
    }

    /// Hex SHA-256 of the CSV text; stored in checkpoints so a log file can
    /// be matched to the snapshot it produced.
    pub fn digest(&self) -> String {
        crate::nn::hex_string(&Sha256::digest(self.to_csv().as_bytes()))
    }

    /// Writes the CSV to `path`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Optional files refreshed after every epoch (atomically for the
/// checkpoint), so an interrupted run leaves usable artifacts behind.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOutputs<'a> {
    /// Where to write the checkpoint.
    pub checkpoint: Option<&'a Path>,
    /// Where to write the CSV training log.
    pub log: Option<&'a Path>,
}

/// What [`train`] returns: the final parameters bundled as a checkpoint,
/// plus the full loss history.
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Snapshot after the last epoch.
    pub checkpoint: Checkpoint,
    /// Every step's losses.
    pub log: TrainLog,
}

/// The differentiable graph of one training batch.
struct BatchGraph {
    weights: Var,
    bias: Var,
    /// Sigmoid-normalised maps `[n,P,Q]`.
    s: Var,
    /// Class scores of the masked pass `[n,R]`.
    logits: Var,
    labels: Arc<Vec<usize>>,
    tv: Var,
    av: Var,
    ce: Var,
    total: Var,
}

/// Row-wise argmax with ties to the lowest index.
fn argmax_rows(t: &TensorD) -> Result<Vec<usize>> {
    let m = t
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape("argmax_rows", "a matrix", t.shape().to_vec()))?;
    Ok(m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

/// Builds the full forward graph for one batch `x` (`[n,3,H,W]`, already
/// normalised): unmasked pass for model-truth labels, activation maps for
/// those labels, masking per `variant`, and the three loss terms.
fn build_batch_graph(
    split: &ClassifierSplit,
    params: &AttentionParams,
    tape: &mut Tape,
    x: Var,
    weights: &LossWeights,
    variant: Variant,
) -> Result<BatchGraph> {
    let (wv, bv) = params.bind(tape, true);
    let a = split.features(tape, x)?;
    // The unmasked head fixes the targets; nothing differentiates through
    // this branch, it exists only to read the frozen model's predictions.
    let unmasked = split.head(tape, a)?;
    let labels = Arc::new(argmax_rows(tape.value(unmasked))?);
    let cam = tape.attention_cam(a, wv, bv, labels.clone())?;
    let s = tape.sigmoid(cam);
    let logits = match variant {
        Variant::Fm => {
            let masked = tape.spatial_mul(a, s)?;
            split.head(tape, masked)?
        }
        Variant::Img => {
            let size = split.input_spec().size;
            let mask = tape.bilinear_up(s, size, size)?;
            let masked = tape.spatial_mul(x, mask)?;
            let a2 = split.features(tape, masked)?;
            split.head(tape, a2)?
        }
    };
    let tv = tape.tv_loss(s)?;
    let av = tape.av_loss(s, weights.av_exponent)?;
    let ce = tape.cross_entropy(logits, labels.clone())?;
    let weighted_tv = tape.scale(tv, weights.lambda_tv);
    let weighted_av = tape.scale(av, weights.lambda_av);
    let weighted_ce = tape.scale(ce, weights.lambda_ce);
    let partial = tape.add(weighted_tv, weighted_av)?;
    let total = tape.add(partial, weighted_ce)?;
    Ok(BatchGraph {
        weights: wv,
        bias: bv,
        s,
        logits,
        labels,
        tv,
        av,
        ce,
        total,
    })
}

/// Runs one preprocessed image through the chosen training pipeline and
/// returns what the optimiser would see: the masked-pass class scores, the
/// normalised map, and the model-truth label.
fn forward_single(
    split: &ClassifierSplit,
    params: &AttentionParams,
    image: &Image,
    variant: Variant,
) -> Result<(ClassScores, NormalizedCam, usize)> {
    let batch = split.stack_batch(std::slice::from_ref(image))?;
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let g = build_batch_graph(
        split,
        params,
        &mut tape,
        x,
        &LossWeights::default(),
        variant,
    )?;
    let logits = tape
        .value(g.logits)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("head output is a matrix");
    let probs = kernels::softmax_rows(&logits);
    let scores = ClassScores::new(probs.row(0).to_vec())?;
    let maps = tape
        .value(g.s)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("normalised maps are [n,P,Q]");
    let cam = NormalizedCam {
        values: maps.index_axis(ndarray::Axis(0), 0).to_owned(),
        class_index: g.labels[0],
    };
    Ok((scores, cam, g.labels[0]))
}

/// Feature-map regime forward for a single image: the map gates the feature
/// maps before the head. Costs exactly one feature-extraction pass.
pub fn forward_train_fm(
    split: &ClassifierSplit,
    params: &AttentionParams,
    image: &Image,
) -> Result<(ClassScores, NormalizedCam, usize)> {
    forward_single(split, params, image, Variant::Fm)
}

/// Image regime forward for a single image: the upscaled map gates the
/// input, which is re-fed through the feature extractor. Costs exactly two
/// feature-extraction passes.
pub fn forward_train_img(
    split: &ClassifierSplit,
    params: &AttentionParams,
    image: &Image,
) -> Result<(ClassScores, NormalizedCam, usize)> {
    forward_single(split, params, image, Variant::Img)
}

/// Aborts the run when the objective has left the reals.
fn check_finite(step: u64, total: f64) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// Trains a fresh attention head for `split` on the images of `dataset`.
///
/// The head is initialised from `cfg.seed`, which also drives epoch
/// shuffling and crop placement, so identical inputs reproduce identical
/// parameters bit for bit. Labels come from the frozen model itself; any
/// image folder works, labelled or not. The backbone is untouched — the
/// run aborts if its weight digest were ever to change.
pub fn train(
    split: &ClassifierSplit,
    dataset: &DatasetManifest,
    cfg: &TrainConfig,
    outputs: TrainOutputs<'_>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.split_point != split.split_point() {
        return Err(Error::InvalidConfig {
            detail: format!(
                "config asks for split point `{}` but the backbone is split at `{}`",
                cfg.split_point,
                split.split_point()
            ),
        });
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset {
            root: dataset.root.clone(),
        });
    }

    let digest_before = split.digest_now();
    let mut params = AttentionParams::init(
        split.num_classes(),
        split.feature_shape().k,
        InitScheme::default(),
        cfg.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    let spec = split.input_spec().clone();

    let snapshot = |params: &AttentionParams, epochs_done: usize, log: &TrainLog| Checkpoint {
        params: params.clone(),
        config: cfg.clone(),
        epoch: epochs_done,
        model_id: split.model_id().to_string(),
        frozen_digest: split.frozen_digest().to_string(),
        log_digest: log.digest(),
    };
    let write_artifacts = |ckpt: &Checkpoint, log: &TrainLog| -> Result<()> {
        if let Some(path) = outputs.checkpoint {
            save_checkpoint(path, ckpt)?;
        }
        if let Some(path) = outputs.log {
            log.write_csv(path)?;
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                images.push(preprocess_train(&dataset.entries[idx].path, &spec, &mut rng)?);
            }
            let batch = split.stack_batch(&images)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let g = build_batch_graph(split, &params, &mut tape, x, &cfg.loss_weights, cfg.variant)?;
            let losses = LossBreakdown {
                tv: tape.scalar(g.tv),
                av: tape.scalar(g.av),
                ce: tape.scalar(g.ce),
                total: tape.scalar(g.total),
            };
            check_finite(step, losses.total)?;
            tape.backward(g.total)?;
            let grad_w = tape.grad(g.weights).cloned();
            let grad_b = tape.grad(g.bias).cloned();
            // Release the tape's handles on the parameter arrays so the
            // update happens in place.
            drop(tape);
            if let (Some(gw), Some(gb)) = (grad_w, grad_b) {
                params.sgd_step(&gw, &gb, lr);
            }
            log.rows.push(LogRow {
                step,
                epoch,
                losses,
                lr,
            });
            step += 1;
        }
        write_artifacts(&snapshot(&params, epoch + 1, &log), &log)?;
    }
    if cfg.epochs == 0 {
        write_artifacts(&snapshot(&params, 0, &log), &log)?;
    }

    let digest_after = split.digest_now();
    if digest_after != digest_before {
        return Err(Error::DigestMismatch {
            expected: digest_before,
            actual: digest_after,
        });
    }
    Ok(TrainRun {
        checkpoint: snapshot(&params, cfg.epochs, &log),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{compute_cam, sigmoid_normalize};
    use crate::backbone::split_classifier;
    use crate::backbone::zoo::tiny_cnn_def;
    use crate::checkpoint::load_checkpoint;
    use crate::dataset::{ingest_dataset, DatasetLayout};
    use crate::masking::{mask_feature_maps, mask_image, upscale};
    use crate::preprocess::preprocess_eval;
    use crate::synth;
    use ndarray::{Array1, Array2, Array3, Axis};

    fn tiny_split(classes: usize, seed: u64) -> ClassifierSplit {
        split_classifier(tiny_cnn_def(classes, seed), SplitPoint::LastConv).unwrap()
    }

    fn sample_corpus(dir: &Path, classes: usize, per_class: usize, seed: u64) -> DatasetManifest {
        synth::generate_dataset(dir, classes, per_class, seed).unwrap();
        ingest_dataset(dir, DatasetLayout::ClassDirs, None).unwrap()
    }

    fn eval_image(split: &ClassifierSplit, manifest: &DatasetManifest, idx: usize) -> Image {
        preprocess_eval(&manifest.entries[idx].path, split.input_spec()).unwrap()
    }

    fn assert_rows_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol * e.abs().max(1.0),
                "row {i}: {a} vs {e}"
            );
        }
    }

    fn constant_bias_params(classes: usize, channels: usize, bias: f64) -> AttentionParams {
        AttentionParams::from_arrays(
            Array2::zeros((classes, channels)),
            Array1::from_elem(classes, bias),
        )
        .unwrap()
    }

    #[test]
    fn presets_carry_the_reference_schedules() {
        let vgg = TrainConfig::preset("vgg16").unwrap();
        assert_eq!(
            (vgg.batch_size, vgg.lr, vgg.lr_decay_per_epoch, vgg.epochs),
            (64, 1e-4, 0.75, 7)
        );
        let resnet = TrainConfig::preset("resnet50").unwrap();
        assert_eq!(
            (resnet.batch_size, resnet.lr, resnet.lr_decay_per_epoch, resnet.epochs),
            (64, 1e-4, 0.95, 25)
        );
        assert!(TrainConfig::preset("alexnet").is_err());
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let cases = [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { lr: f64::NAN, ..ok.clone() },
            TrainConfig { lr_decay_per_epoch: 0.0, ..ok.clone() },
            TrainConfig { lr_decay_per_epoch: 1.5, ..ok.clone() },
        ];
        for bad in cases {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig { .. })));
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Fm, Variant::Img] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(serde_json::to_string(&Variant::Img).unwrap(), "\"img\"");
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn saturated_masks_reproduce_the_unmasked_and_annihilated_scores() {
        let dir = tempfile::tempdir().unwrap();
        let split = tiny_split(3, 0);
        let manifest = sample_corpus(dir.path(), 3, 1, 7);
        let image = eval_image(&split, &manifest, 0);
        let unmasked = split.classify(&image).unwrap();

        // A huge bias saturates the sigmoid at 1: masking is a no-op and
        // both regimes reproduce the frozen model's scores and label.
        let ones = constant_bias_params(3, 16, 40.0);
        for forward in [forward_train_fm, forward_train_img] {
            let (scores, cam, label) = forward(&split, &ones, &image).unwrap();
            assert_rows_close(scores.probs(), unmasked.probs(), 1e-9);
            assert_eq!(label, unmasked.argmax());
            assert!(cam.values.iter().all(|&s| s > 1.0 - 1e-12));
        }

        // A hugely negative bias drives the map to 0. Feature-map regime:
        // the head sees zeroed maps.
        let zeros = constant_bias_params(3, 16, -40.0);
        let (scores, cam, _) = forward_train_fm(&split, &zeros, &image).unwrap();
        assert!(cam.values.iter().all(|&s| s < 1e-12));
        let mut tape = Tape::new();
        let shape = split.feature_shape();
        let blank = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[
            1, shape.k, shape.p, shape.q,
        ])));
        let head = split.head(&mut tape, blank).unwrap();
        let logits = tape.value(head).view().into_dimensionality::<Ix2>().unwrap();
        let expected = kernels::softmax_rows(&logits);
        assert_rows_close(scores.probs(), &expected.row(0).to_vec(), 1e-9);

        // Image regime: the classifier sees a black (all-zero) input.
        let (scores, _, _) = forward_train_img(&split, &zeros, &image).unwrap();
        let black = Image::new(Array3::zeros((3, 32, 32))).unwrap();
        let expected = split.classify(&black).unwrap();
        assert_rows_close(scores.probs(), expected.probs(), 1e-9);
    }

    #[test]
    fn forward_ops_match_the_hand_composed_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let split = tiny_split(3, 1);
        let params = AttentionParams::init(3, 16, InitScheme::default(), 5);
        let manifest = sample_corpus(dir.path(), 3, 1, 9);
        let image = eval_image(&split, &manifest, 0);

        // Hand-composed reference: classify for the label, single-image CAM,
        // explicit masking, then the head (or the full classifier) again.
        let label = split.model_truth_label(&image).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(split.stack_batch(std::slice::from_ref(&image)).unwrap());
        let a = split.features(&mut tape, x).unwrap();
        let feature_maps = tape
            .value(a)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .to_owned();
        drop(tape);
        let cam = sigmoid_normalize(&compute_cam(&params, &feature_maps, label).unwrap());

        let masked_maps = mask_feature_maps(&feature_maps, &cam).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(masked_maps.insert_axis(Axis(0)).into_dyn());
        let head = split.head(&mut tape, m).unwrap();
        let logits = tape.value(head).view().into_dimensionality::<Ix2>().unwrap();
        let expected_fm = kernels::softmax_rows(&logits).row(0).to_vec();

        let (scores, s, y) = forward_train_fm(&split, &params, &image).unwrap();
        assert_eq!(y, label);
        assert_rows_close(scores.probs(), &expected_fm, 1e-12);
        assert_rows_close(
            s.values.as_slice().unwrap(),
            cam.values.as_slice().unwrap(),
            1e-12,
        );

        let up = upscale(&cam, 32, 32).unwrap();
        let masked_image = mask_image(&image, &up).unwrap();
        let expected_img = split.classify(&masked_image).unwrap();
        let (scores, _, y) = forward_train_img(&split, &params, &image).unwrap();
        assert_eq!(y, label);
        assert_rows_close(scores.probs(), expected_img.probs(), 1e-12);
    }

    #[test]
    fn feature_pass_accounting_matches_the_regime() {
        let dir = tempfile::tempdir().unwrap();
        let split = tiny_split(3, 0);
        let manifest = sample_corpus(dir.path(), 3, 1, 3);
        let image = eval_image(&split, &manifest, 0);
        let params = AttentionParams::init(3, 16, InitScheme::default(), 0);

        let before = split.feature_pass_count();
        forward_train_fm(&split, &params, &image).unwrap();
        assert_eq!(split.feature_pass_count() - before, 1);

        let before = split.feature_pass_count();
        forward_train_img(&split, &params, &image).unwrap();
        assert_eq!(split.feature_pass_count() - before, 2);
    }

    #[test]
    fn training_reduces_the_loss_and_keeps_the_backbone_frozen() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = sample_corpus(data.path(), 4, 12, 11);
        let mut def = tiny_cnn_def(4, 3);
        synth::pretrain_classifier(&mut def, &manifest, &synth::PretrainOptions::default())
            .unwrap();
        let split = split_classifier(def, SplitPoint::LastConv).unwrap();

        let cfg = TrainConfig {
            variant: Variant::Img,
            batch_size: 8,
            lr: 0.05,
            lr_decay_per_epoch: 0.9,
            epochs: 5,
            loss_weights: LossWeights::default(),
            seed: 0,
            split_point: SplitPoint::LastConv,
        };
        let ckpt_path = out.path().join("head.safetensors");
        let log_path = out.path().join("train.csv");
        let run = train(
            &split,
            &manifest,
            &cfg,
            TrainOutputs {
                checkpoint: Some(&ckpt_path),
                log: Some(&log_path),
            },
        )
        .unwrap();

        // The composite objective drops over the run.
        let first = run.log.epoch_mean_total(0).unwrap();
        let last = run.log.epoch_mean_total(4).unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");

        // The backbone is untouched and the schedule is exactly geometric.
        assert_eq!(split.digest_now(), split.frozen_digest());
        for row in run.log.rows() {
            assert_eq!(row.lr, cfg.lr * cfg.lr_decay_per_epoch.powi(row.epoch as i32));
        }

        // The written artifacts match the returned ones.
        let loaded = load_checkpoint(&ckpt_path).unwrap();
        assert_eq!(loaded.params.weights(), run.checkpoint.params.weights());
        assert_eq!(loaded.params.bias(), run.checkpoint.params.bias());
        assert_eq!(loaded.epoch, 5);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.log_digest, run.log.digest());
        loaded.bind(&split).unwrap();
        assert_eq!(std::fs::read_to_string(&log_path).unwrap(), run.log.to_csv());
    }

    #[test]
    fn zero_epoch_runs_return_the_initialisation() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let manifest = sample_corpus(data.path(), 3, 2, 2);
        let split = tiny_split(3, 0);
        let cfg = TrainConfig {
            variant: Variant::Fm,
            batch_size: 4,
            lr: 1e-3,
            lr_decay_per_epoch: 1.0,
            epochs: 0,
            loss_weights: LossWeights::default(),
            seed: 9,
            split_point: SplitPoint::LastConv,
        };
        let ckpt_path = out.path().join("head.safetensors");
        let run = train(
            &split,
            &manifest,
            &cfg,
            TrainOutputs {
                checkpoint: Some(&ckpt_path),
                log: None,
            },
        )
        .unwrap();
        let init = AttentionParams::init(3, 16, InitScheme::default(), 9);
        assert_eq!(run.checkpoint.params.weights(), init.weights());
        assert_eq!(run.checkpoint.params.bias(), init.bias());
        assert_eq!(run.log.to_csv(), "step,epoch,tv,av,ce,total,lr\n");
        assert_eq!(load_checkpoint(&ckpt_path).unwrap().epoch, 0);
    }

    #[test]
    fn identical_seeds_reproduce_runs_bitwise() {
        let data = tempfile::tempdir().unwrap();
        let manifest = sample_corpus(data.path(), 3, 4, 21);
        let split = tiny_split(3, 2);
        let cfg = TrainConfig {
            variant: Variant::Fm,
            batch_size: 4,
            lr: 0.02,
            lr_decay_per_epoch: 0.5,
            epochs: 2,
            loss_weights: LossWeights::default(),
            seed: 33,
            split_point: SplitPoint::LastConv,
        };
        let a = train(&split, &manifest, &cfg, TrainOutputs::default()).unwrap();
        let b = train(&split, &manifest, &cfg, TrainOutputs::default()).unwrap();
        assert_eq!(a.checkpoint.params.weights(), b.checkpoint.params.weights());
        assert_eq!(a.checkpoint.params.bias(), b.checkpoint.params.bias());
        assert_eq!(a.log.digest(), b.log.digest());

        let other = train(
            &split,
            &manifest,
            &TrainConfig { seed: 34, ..cfg },
            TrainOutputs::default(),
        )
        .unwrap();
        assert_ne!(a.checkpoint.params.weights(), other.checkpoint.params.weights());
    }

    #[test]
    fn one_step_updates_exactly_the_selected_weight_rows() {
        let data = tempfile::tempdir().unwrap();
        let manifest = sample_corpus(data.path(), 2, 2, 5);
        let split = tiny_split(4, 8);
        let cfg = TrainConfig {
            variant: Variant::Fm,
            batch_size: 4,
            lr: 0.1,
            lr_decay_per_epoch: 1.0,
            epochs: 1,
            loss_weights: LossWeights::default(),
            seed: 1,
            split_point: SplitPoint::LastConv,
        };

        // Replay the loop's RNG stream to learn which model-truth labels the
        // single batch used.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..manifest.len()).collect();
        order.shuffle(&mut rng);
        let mut selected: Vec<usize> = order
            .iter()
            .map(|&idx| {
                let crop =
                    preprocess_train(&manifest.entries[idx].path, split.input_spec(), &mut rng)
                        .unwrap();
                split.model_truth_label(&crop).unwrap()
            })
            .collect();
        selected.sort_unstable();
        selected.dedup();

        let run = train(&split, &manifest, &cfg, TrainOutputs::default()).unwrap();
        let init = AttentionParams::init(4, 16, InitScheme::default(), 1);
        let trained = run.checkpoint.params;
        let changed: Vec<usize> = (0..4)
            .filter(|&r| trained.weights().row(r) != init.weights().row(r))
            .collect();
        assert_eq!(changed, selected);
        for r in 0..4 {
            let row_changed = changed.contains(&r);
            assert_eq!(trained.bias()[r] != init.bias()[r], row_changed);
        }
    }

    #[test]
    fn divergence_aborts_with_the_offending_step() {
        check_finite(41, 1.5).unwrap();
        for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(matches!(
                check_finite(41, bad),
                Err(Error::Divergence { step: 41 })
            ));
        }
    }

    #[test]
    fn mismatched_split_points_and_empty_datasets_are_refused() {
        let data = tempfile::tempdir().unwrap();
        let mut manifest = sample_corpus(data.path(), 3, 1, 1);
        let split = tiny_split(3, 0);
        let cfg = TrainConfig {
            split_point: SplitPoint::AfterLastMaxpool,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&split, &manifest, &cfg, TrainOutputs::default()),
            Err(Error::InvalidConfig { .. })
        ));

        manifest.entries.clear();
        let cfg = TrainConfig {
            split_point: SplitPoint::LastConv,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&split, &manifest, &cfg, TrainOutputs::default()),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn log_text_and_digest_are_stable() {
        let mut log = TrainLog::default();
        log.rows.push(LogRow {
            step: 0,
            epoch: 0,
            losses: LossBreakdown { tv: 0.5, av: 0.25, ce: 2.0, total: 4.005 },
            lr: 1e-4,
        });
        log.rows.push(LogRow {
            step: 1,
            epoch: 1,
            losses: LossBreakdown { tv: 0.125, av: 0.2, ce: 1.0, total: 1.90125 },
            lr: 7.5e-5,
        });
        let expected = "step,epoch,tv,av,ce,total,lr\n\
                        0,0,0.5,0.25,2,4.005,0.0001\n\
                        1,1,0.125,0.2,1,1.90125,0.000075\n";
        assert_eq!(log.to_csv(), expected);
        assert_eq!(log.digest().len(), 64);
        assert_eq!(log.digest(), log.digest());
        assert_eq!(log.epoch_mean_total(1), Some(1.90125));
        assert_eq!(log.epoch_mean_total(7), None);
    }
}
