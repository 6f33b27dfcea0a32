//! Compatibility of `tools/export_backbone.py` with the weight loader.
//!
//! These tests shell out to Python with torch, torchvision and safetensors
//! installed, so they are ignored by default. Run them explicitly:
//!
//! ```text
//! cargo test -p lcam --test export_compat -- --ignored
//! ```
//!
//! `--weights none` keeps the exports offline (random initialisation); the
//! checked property is purely structural — every tensor the loader expects
//! is present under the right name with the right shape.

use std::path::Path;
use std::process::Command;

use lcam::backbone::zoo::{def_from_file, ModelId};
use lcam::backbone::{split_classifier, SplitPoint};

fn export_and_load(model: &str, id: ModelId, split: SplitPoint) {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join(format!("{model}.safetensors"));

    let status = Command::new("python3")
        .arg(root.join("tools/export_backbone.py"))
        .args([model, "--weights", "none", "--out"])
        .arg(&out)
        .status()
        .expect("python3 is on PATH");
    assert!(status.success(), "the exporter failed for {model}");

    let def = def_from_file(id, &out).expect("the export loads");
    assert_eq!(def.model_id, model);
    assert_eq!(def.num_classes, 1000);
    let s = split_classifier(def, split).expect("the export splits");
    assert_eq!(s.feature_shape().k, if model == "vgg16" { 512 } else { 2048 });
}

#[test]
#[ignore = "needs python3 with torch, torchvision and safetensors"]
fn resnet50_export_loads_and_splits() {
    export_and_load("resnet50", ModelId::Resnet50, SplitPoint::LastConv);
}

#[test]
#[ignore = "needs python3 with torch, torchvision and safetensors"]
fn vgg16_export_loads_and_splits() {
    export_and_load("vgg16", ModelId::Vgg16, SplitPoint::AfterLastMaxpool);
}
