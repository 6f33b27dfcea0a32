//! Faithfulness measurement: how much of the classifier's confidence
//! survives when only the allegedly important pixels remain?
//!
//! For each image the evaluation takes the model-truth class and its
//! softmax score, produces a saliency map, keeps only the top-ν% pixels
//! ([`threshold_top_nu`]), multiplies the preprocessed input by that
//! thresholded map, and re-classifies. Aggregated over the set this yields
//! *Average Drop* (mean relative confidence loss, clamped at zero) and
//! *Increase in Confidence* (how often the masked image scores strictly
//! higher). Lower AD and higher IC mean the map found what the classifier
//! uses. Synthetic baselines (seeded noise, a fixed centre bump) give the
//! floor any trained explainer has to beat.

use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::backbone::ClassifierSplit;
use crate::dataset::{DatasetManifest, SubsetSpec};
use crate::error::{Error, Result};
use crate::inference::{explain, SaliencyMap, SaliencySource};
use crate::masking::{mask_image, UpscaledMask};
use crate::preprocess::preprocess_eval;

/// Evaluation protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Percentages of pixels to keep, each in `(0, 100]`.
    pub nu_list: Vec<f64>,
    /// Evaluate at most this many images, selected by a seeded shuffle;
    /// `None` evaluates the whole manifest.
    pub sample_count: Option<usize>,
    /// Seed for subset selection and for the random baseline.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nu_list: vec![100.0, 50.0, 15.0],
            sample_count: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Rejects protocols the loop cannot run.
    pub fn validate(&self) -> Result<()> {
        if self.nu_list.is_empty() {
            return Err(Error::InvalidConfig {
                detail: "nu_list must name at least one percentage".into(),
            });
        }
        if let Some(&bad) = self
            .nu_list
            .iter()
            .find(|v| !(v.is_finite() && **v > 0.0 && **v <= 100.0))
        {
            return Err(Error::InvalidConfig {
                detail: format!("nu values must lie in (0, 100], got {bad}"),
            });
        }
        if self.sample_count == Some(0) {
            return Err(Error::InvalidConfig {
                detail: "sample_count must be positive".into(),
            });
        }
        Ok(())
    }
}

/// What produces the saliency map for each image.
#[derive(Debug, Clone, Copy)]
pub enum Explainer<'a> {
    /// The trained attention head.
    Lcam(&'a AttentionParams),
    /// Per-image seeded uniform noise.
    BaselineRandom,
    /// A fixed centred Gaussian bump.
    BaselineCenter,
}

impl Explainer<'_> {
    /// The method identifier recorded in reports.
    pub fn source(&self) -> SaliencySource {
        match self {
            Explainer::Lcam(_) => SaliencySource::Lcam,
            Explainer::BaselineRandom => SaliencySource::BaselineRandom,
            Explainer::BaselineCenter => SaliencySource::BaselineCenter,
        }
    }
}

/// One image's scores under one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    /// Model-truth-class softmax score of the unmasked image.
    pub original: f64,
    /// Same class's score after masking.
    pub masked: f64,
}

/// Outcome of one threshold level on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuOutcome {
    pub nu: f64,
    pub masked_score: f64,
    /// `max(0, original − masked) / original`.
    pub drop_ratio: f64,
    /// Whether the masked score strictly exceeded the original.
    pub increased: bool,
}

/// Everything measured on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// The model-truth class every score refers to.
    pub class_index: usize,
    pub original_score: f64,
    /// One outcome per entry of `nu_list`, in order.
    pub per_nu: Vec<NuOutcome>,
}

/// Aggregate metrics at one threshold level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuAggregate {
    pub nu: f64,
    pub average_drop: f64,
    pub increase_confidence: f64,
}

/// The full result of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Which explainer produced the maps.
    pub method: SaliencySource,
    pub nu_list: Vec<f64>,
    pub records: Vec<ImageRecord>,
    /// One aggregate per entry of `nu_list`; always recomputable from the
    /// records via [`recompute_aggregates`].
    pub aggregates: Vec<NuAggregate>,
    /// Feature-extraction passes the whole run cost.
    pub feature_passes: u64,
    /// Images excluded because their original score was not positive.
    pub skipped_zero_score: usize,
}

impl EvalReport {
    /// A single summary row as CSV: the method, AD and IC per threshold,
    /// and the total pass count. Floats use the shortest round-trip form,
    /// so identical runs produce byte-identical text.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("method");
        let mut row = self.method.to_string();
        for agg in &self.aggregates {
            header.push_str(&format!(",ad_{0},ic_{0}", agg.nu));
            row.push_str(&format!(",{},{}", agg.average_drop, agg.increase_confidence));
        }
        header.push_str(",feature_passes");
        row.push_str(&format!(",{}", self.feature_passes));
        format!("{header}\n{row}\n")
    }
}

/// Keeps the `⌈ν·W·H/100⌉` highest-valued pixels of `map` at their original
/// values and zeroes the rest. Ties at the cutoff are broken by row-major
/// pixel order (lower index kept first), so selections nest as ν grows.
pub fn threshold_top_nu(map: &Array2<f64>, nu: f64) -> Result<Array2<f64>> {
    if !(nu.is_finite() && nu > 0.0 && nu <= 100.0) {
        return Err(Error::InvalidArgument {
            context: "threshold_top_nu",
            detail: format!("nu must lie in (0, 100], got {nu}"),
        });
    }
    let total = map.len();
    let keep = ((nu * total as f64) / 100.0).ceil() as usize;
    let keep = keep.min(total);
    let mut ranked: Vec<(usize, f64)> = map.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Array2::zeros(map.raw_dim());
    let flat = out.as_slice_mut().expect("freshly built map is contiguous");
    for &(idx, v) in &ranked[..keep] {
        flat[idx] = v;
    }
    Ok(out)
}

/// Average Drop over score pairs, in percent:
/// `(100/N) · Σ max(0, original − masked) / original`. Callers must have
/// excluded non-positive originals already; an empty slice yields 0.
pub fn average_drop(pairs: &[ScorePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| (p.original - p.masked).max(0.0) / p.original)
        .sum();
    100.0 * sum / pairs.len() as f64
}

/// Increase in Confidence over score pairs, in percent: how often the
/// masked score *strictly* exceeds the original. Empty slice yields 0.
pub fn increase_confidence(pairs: &[ScorePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|p| p.masked > p.original).count();
    100.0 * hits as f64 / pairs.len() as f64
}

/// Rebuilds the per-threshold aggregates from per-image records; the report
/// assembly uses this same function, so the two can never drift.
pub fn recompute_aggregates(records: &[ImageRecord], nu_list: &[f64]) -> Vec<NuAggregate> {
    nu_list
        .iter()
        .enumerate()
        .map(|(i, &nu)| {
            let pairs: Vec<ScorePair> = records
                .iter()
                .map(|r| ScorePair {
                    original: r.original_score,
                    masked: r.per_nu[i].masked_score,
                })
                .collect();
            NuAggregate {
                nu,
                average_drop: average_drop(&pairs),
                increase_confidence: increase_confidence(&pairs),
            }
        })
        .collect()
}

/// The seed driving one image's random-baseline map: a fixed mix of the run
/// seed and the image's position, so maps are independent of each other but
/// fully reproducible.
fn per_image_seed(seed: u64, index: u64) -> u64 {
    seed ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn random_map(hw: (usize, usize), class: usize, seed: u64) -> Result<SaliencyMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_simple_fn(hw, || rng.random::<f64>());
    SaliencyMap::new(values, class, SaliencySource::BaselineRandom)
}

fn center_map(hw: (usize, usize), class: usize) -> Result<SaliencyMap> {
    let (h, w) = hw;
    let (ch, cw) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Spread chosen so the bump covers roughly the centre quarter.
    let sigma = h.max(w) as f64 / 4.0;
    let values = Array2::from_shape_fn(hw, |(i, j)| {
        let d2 = (i as f64 - ch).powi(2) + (j as f64 - cw).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });
    SaliencyMap::new(values, class, SaliencySource::BaselineCenter)
}

/// Runs the full protocol: per image one unmasked classification, one
/// saliency map, and one masked classification per threshold, everything
/// scored at the model-truth class. With `sample_count` set, a seeded
/// subset of the manifest is evaluated.
pub fn evaluate(
    split: &ClassifierSplit,
    explainer: Explainer<'_>,
    dataset: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset {
            root: dataset.root.clone(),
        });
    }
    let selected = match cfg.sample_count {
        Some(size) => dataset.subsample(SubsetSpec {
            seed: cfg.seed,
            size,
        })?,
        None => dataset.clone(),
    };

    let passes_before = split.feature_pass_count();
    let mut records = Vec::with_capacity(selected.len());
    let mut skipped_zero_score = 0;
    for (index, entry) in selected.entries.iter().enumerate() {
        let image = preprocess_eval(&entry.path, split.input_spec())?;
        let scores = split.classify(&image)?;
        let class = scores.argmax();
        let original = scores.prob(class)?;
        if original <= 0.0 {
            skipped_zero_score += 1;
            continue;
        }
        let map = match explainer {
            Explainer::Lcam(params) => explain(split, params, &image, Some(class))?,
            Explainer::BaselineRandom => {
                random_map(image.hw(), class, per_image_seed(cfg.seed, index as u64))?
            }
            Explainer::BaselineCenter => center_map(image.hw(), class)?,
        };
        let mut per_nu = Vec::with_capacity(cfg.nu_list.len());
        for &nu in &cfg.nu_list {
            let kept = threshold_top_nu(map.values(), nu)?;
            let masked = mask_image(
                &image,
                &UpscaledMask {
                    values: kept,
                    class_index: class,
                },
            )?;
            let masked_score = split.classify(&masked)?.prob(class)?;
            per_nu.push(NuOutcome {
                nu,
                masked_score,
                drop_ratio: (original - masked_score).max(0.0) / original,
                increased: masked_score > original,
            });
        }
        records.push(ImageRecord {
            path: entry.path.clone(),
            class_index: class,
            original_score: original,
            per_nu,
        });
    }
    let aggregates = recompute_aggregates(&records, &cfg.nu_list);
    Ok(EvalReport {
        method: explainer.source(),
        nu_list: cfg.nu_list.clone(),
        records,
        aggregates,
        feature_passes: split.feature_pass_count() - passes_before,
        skipped_zero_score,
    })
}
