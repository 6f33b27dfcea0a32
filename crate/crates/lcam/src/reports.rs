//! Qualitative error reports.
//!
//! When the frozen classifier disagrees with a dataset's directory labels,
//! looking at *two* explanations of the same image — one for the label the
//! dataset claims, one for the label the model chose — is the fastest way
//! to see whether the model keyed on a related class, a co-occurring
//! object, or a dataset bias. [`report_misclassifications`] walks a
//! labelled manifest, finds every disagreement, and writes that pair of
//! overlays plus a machine-readable JSON index. It judges nothing itself;
//! the output is raw material for a human.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attention::AttentionParams;
use crate::backbone::ClassifierSplit;
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::inference::{explain, export_overlay};
use crate::preprocess::{eval_crop_rgb8, preprocess_eval};

/// File name of the JSON index written next to the overlays.
pub const INDEX_FILE: &str = "index.json";

/// One image the model classified differently from its directory label.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorCase {
    /// Source image path.
    pub image: PathBuf,
    /// Class the dataset layout assigns.
    pub true_class: usize,
    /// Class the model actually predicted (its model-truth label).
    pub predicted_class: usize,
    /// Softmax probability of the predicted class.
    pub predicted_score: f64,
    /// Overlay explaining the dataset's class, relative to the report dir.
    pub ground_truth_overlay: String,
    /// Overlay explaining the model's class, relative to the report dir.
    pub predicted_overlay: String,
}

/// Everything `report_misclassifications` found, also persisted as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    /// Number of manifest entries examined.
    pub scanned: usize,
    /// The disagreements, in manifest order.
    pub cases: Vec<ErrorCase>,
}

/// Unique, filesystem-safe stem for an image: its path relative to the
/// manifest root, extension dropped, separators flattened to `-` (so
/// same-named files in different class directories cannot collide).
fn case_stem(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("-")
}

/// Explains every image whose model-truth label disagrees with its
/// directory label, once for each side of the disagreement.
///
/// For a disagreeing image `<img>` with dataset class `y1` and predicted
/// class `y2`, the report directory receives `<img>_gt<y1>.png` and
/// `<img>_pred<y2>.png` (each with a `.npy` sidecar of the raw map), and
/// `index.json` lists every pair. A model that agrees with every label
/// yields an index with no cases. The manifest must carry class labels.
pub fn report_misclassifications(
    split: &ClassifierSplit,
    params: &AttentionParams,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<ErrorReport> {
    manifest.require_labels()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cases = Vec::new();
    for entry in &manifest.entries {
        let true_class = entry.class_index.expect("labels checked above");
        let image = preprocess_eval(&entry.path, split.input_spec())?;
        let scores = split.classify(&image)?;
        let predicted_class = scores.argmax();
        if predicted_class == true_class {
            continue;
        }

        let stem = case_stem(&manifest.root, &entry.path);
        let photo = eval_crop_rgb8(&entry.path, split.input_spec())?;
        let mut overlay_names = Vec::with_capacity(2);
        for (tag, class) in [("gt", true_class), ("pred", predicted_class)] {
            let map = explain(split, params, &image, Some(class))?;
            let name = format!("{stem}_{tag}{class}");
            export_overlay(
                &photo,
                &map,
                &out_dir.join(format!("{name}.png")),
                &out_dir.join(format!("{name}.npy")),
            )?;
            overlay_names.push(format!("{name}.png"));
        }

        cases.push(ErrorCase {
            image: entry.path.clone(),
            true_class,
            predicted_class,
            predicted_score: scores.prob(predicted_class)?,
            ground_truth_overlay: overlay_names.remove(0),
            predicted_overlay: overlay_names.remove(0),
        });
    }

    let report = ErrorReport {
        scanned: manifest.len(),
        cases,
    };
    let index = out_dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    std::fs::write(&index, json + "\n").map_err(|e| Error::io(&index, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::InitScheme;
    use crate::backbone::zoo::tiny_cnn_def;
    use crate::backbone::{split_classifier, SplitPoint};
    use crate::dataset::{ingest_dataset, DatasetLayout};
    use crate::synth;

    /// A labelled corpus and a split whose predictions we can relabel
    /// against: setting every label to the model's own prediction makes the
    /// manifest all-correct; flipping single labels forges disagreements.
    fn fixture(dir: &Path) -> (ClassifierSplit, AttentionParams, DatasetManifest) {
        synth::generate_dataset(dir, 3, 2, 9).unwrap();
        let manifest = ingest_dataset(dir, DatasetLayout::ClassDirs, None).unwrap();
        let split = split_classifier(tiny_cnn_def(3, 4), SplitPoint::LastConv).unwrap();
        let params = AttentionParams::init(3, 16, InitScheme::default(), 7);
        (split, params, manifest)
    }

    fn relabel_to_predictions(
        split: &ClassifierSplit,
        manifest: &DatasetManifest,
    ) -> DatasetManifest {
        let mut agreed = manifest.clone();
        for entry in &mut agreed.entries {
            let image = preprocess_eval(&entry.path, split.input_spec()).unwrap();
            entry.class_index = Some(split.classify(&image).unwrap().argmax());
        }
        agreed
    }

    #[test]
    fn agreement_everywhere_yields_an_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let (split, params, manifest) = fixture(dir.path());
        let agreed = relabel_to_predictions(&split, &manifest);

        let out = dir.path().join("report");
        let report = report_misclassifications(&split, &params, &agreed, &out).unwrap();

        assert_eq!(report.scanned, 6);
        assert!(report.cases.is_empty());
        let index = std::fs::read_to_string(out.join(INDEX_FILE)).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&index).unwrap();
        assert_eq!(parsed["scanned"], 6);
        assert_eq!(parsed["cases"].as_array().unwrap().len(), 0);
        // Nothing but the index lives in an all-correct report.
        assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);
    }

    #[test]
    fn each_forced_disagreement_yields_one_named_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (split, params, manifest) = fixture(dir.path());
        let mut doctored = relabel_to_predictions(&split, &manifest);
        // Forge exactly one disagreement on the first entry.
        let predicted = doctored.entries[0].class_index.unwrap();
        let forged = (predicted + 1) % 3;
        doctored.entries[0].class_index = Some(forged);

        let out = dir.path().join("report");
        let report = report_misclassifications(&split, &params, &doctored, &out).unwrap();

        assert_eq!(report.cases.len(), 1);
        let case = &report.cases[0];
        assert_eq!(case.image, doctored.entries[0].path);
        assert_eq!((case.true_class, case.predicted_class), (forged, predicted));
        assert!(case.predicted_score > 0.0);
        // Naming contract: <img>_gt<y1>.png / <img>_pred<y2>.png, with the
        // class-directory part folded into the stem.
        assert_eq!(case.ground_truth_overlay, format!("class_00-img_000_gt{forged}.png"));
        assert_eq!(case.predicted_overlay, format!("class_00-img_000_pred{predicted}.png"));
        for name in [&case.ground_truth_overlay, &case.predicted_overlay] {
            assert!(out.join(name).exists(), "missing overlay {name}");
            assert!(out.join(name.replace(".png", ".npy")).exists());
        }
        // The two overlays explain different classes, so they differ.
        assert_ne!(
            std::fs::read(out.join(&case.ground_truth_overlay)).unwrap(),
            std::fs::read(out.join(&case.predicted_overlay)).unwrap()
        );

        // Same inputs, fresh directory: byte-identical index.
        let again = dir.path().join("report-again");
        report_misclassifications(&split, &params, &doctored, &again).unwrap();
        assert_eq!(
            std::fs::read(out.join(INDEX_FILE)).unwrap(),
            std::fs::read(again.join(INDEX_FILE)).unwrap()
        );
    }

    #[test]
    fn unlabelled_manifests_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (split, params, manifest) = fixture(dir.path());
        let mut unlabelled = manifest.clone();
        for entry in &mut unlabelled.entries {
            entry.class_index = None;
        }
        assert!(matches!(
            report_misclassifications(&split, &params, &unlabelled, dir.path()),
            Err(Error::MissingClassLabels)
        ));
    }
}
