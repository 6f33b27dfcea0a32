//! The backbone zoo: builders for the supported classifier architectures.
//!
//! Parameter names follow the common Python export conventions
//! (`features.0.weight`, `layer2.1.conv3.weight`, `classifier.6.bias`, …), so
//! converting published pretrained weights is a dictionary rename plus, for
//! batch-norm layers, folding to inference form — see
//! `tools/export_backbone.py` in the repository root.
//!
//! Weight files are safetensors archives resolved as
//! `<model-dir>/<model-id>.safetensors`, where the model directory comes from
//! (in order) an explicit argument, the `LCAM_MODEL_DIR` environment
//! variable, or `./models`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{split_classifier, BackboneDef, ClassifierSplit, FeatureShape, SplitPoint};
use crate::autodiff::TensorD;
use crate::error::{Error, Result};
use crate::nn::{conv2d_init, linear_init, Layer, Network};
use crate::preprocess::{ChannelStats, InputSpec, IMAGENET_STATS};
use crate::tensorfile;

/// Environment variable naming the directory that holds backbone weights.
pub const MODEL_DIR_ENV: &str = "LCAM_MODEL_DIR";

/// Identifiers of the built-in architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    Vgg16,
    Resnet50,
    TinyCnn,
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelId::Vgg16 => "vgg16",
            ModelId::Resnet50 => "resnet50",
            ModelId::TinyCnn => "tiny-cnn",
        })
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(ModelId::Vgg16),
            "resnet50" => Ok(ModelId::Resnet50),
            "tiny-cnn" => Ok(ModelId::TinyCnn),
            other => Err(Error::UnknownModel { id: other.into() }),
        }
    }
}

/// Resolves the weights file for a model: explicit directory, then
/// `LCAM_MODEL_DIR`, then `./models`.
pub fn weights_path(id: ModelId, model_dir: Option<&Path>) -> PathBuf {
    let dir = model_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("models"));
    dir.join(format!("{id}.safetensors"))
}

/// Parses a model id, loads its weights and splits it — the one-call path
/// from CLI arguments to a ready [`ClassifierSplit`].
pub fn load_split(id: &str, split: SplitPoint, model_dir: Option<&Path>) -> Result<ClassifierSplit> {
    let id: ModelId = id.parse()?;
    let path = weights_path(id, model_dir);
    if !path.exists() {
        return Err(Error::MissingWeights {
            id: id.to_string(),
            path,
        });
    }
    split_classifier(def_from_file(id, &path)?, split)
}

/// Builds a definition with the weights from a safetensors archive. The
/// class count is inferred from the final classifier layer in the file.
pub fn def_from_file(id: ModelId, path: &Path) -> Result<BackboneDef> {
    let (tensors, _meta) = tensorfile::read_tensors(path)?;
    let final_fc = match id {
        ModelId::Vgg16 => "classifier.6.weight",
        ModelId::Resnet50 => "fc.weight",
        ModelId::TinyCnn => "fc.weight",
    };
    let num_classes = tensors
        .get(final_fc)
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("archive has no '{final_fc}' tensor; is this a {id} export?"),
        })?;
    let mut def = seeded_def(id, num_classes, 0);
    def.network.load_params(&tensors)?;
    Ok(def)
}

/// Builds a definition with seeded random weights (He-uniform convolutions
/// and linear layers, identity batch-norm folds). Used for fixtures and
/// shape tests; real explanations need pretrained weights.
pub fn seeded_def(id: ModelId, num_classes: usize, seed: u64) -> BackboneDef {
    match id {
        ModelId::Vgg16 => vgg16_def(num_classes, seed),
        ModelId::Resnet50 => resnet50_def(num_classes, seed),
        ModelId::TinyCnn => tiny_cnn_def(num_classes, seed),
    }
}

/// Saves a backbone's parameters (with identifying metadata) to a
/// safetensors archive loadable by [`def_from_file`].
pub fn save_backbone(path: &Path, def: &BackboneDef) -> Result<()> {
    let entries: Vec<(String, &TensorD)> = def
        .network
        .param_entries()
        .into_iter()
        .map(|(n, t)| (n, t.as_ref()))
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("model_id".to_string(), def.model_id.clone());
    meta.insert("num_classes".to_string(), def.num_classes.to_string());
    tensorfile::write_tensors(path, &entries, &meta)
}

/// VGG-16 (configuration D). Input 224×224; the feature stack ends in
/// 512×14×14 maps before the fifth max-pool, 512×7×7 after it — the two
/// supported split points.
pub fn vgg16_def(num_classes: usize, seed: u64) -> BackboneDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Channel plan per block; `0` marks a max-pool.
    const PLAN: &[usize] = &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut layers = Vec::new();
    let mut in_c = 3;
    let mut tv_idx = 0usize; // torchvision `features.<i>` numbering
    let mut last_conv_split = 0;
    let mut post_pool_split = 0;
    for &c in PLAN {
        if c == 0 {
            // The split *before* the final pool is the 14x14 feature stage.
            last_conv_split = layers.len();
            layers.push(Layer::MaxPool2d { kernel: 2, stride: 2, pad: 0 });
            post_pool_split = layers.len();
            tv_idx += 1;
        } else {
            layers.push(conv2d_init(format!("features.{tv_idx}"), in_c, c, 3, 1, 1, &mut rng));
            layers.push(Layer::Relu);
            tv_idx += 2;
            in_c = c;
        }
    }
    layers.push(Layer::Flatten);
    layers.push(linear_init("classifier.0", 512 * 7 * 7, 4096, &mut rng));
    layers.push(Layer::Relu);
    layers.push(linear_init("classifier.3", 4096, 4096, &mut rng));
    layers.push(Layer::Relu);
    layers.push(linear_init("classifier.6", 4096, num_classes, &mut rng));

    BackboneDef {
        model_id: "vgg16".into(),
        network: Network::new(layers),
        num_classes,
        input: InputSpec {
            size: 224,
            resize_shorter: 256,
            stats: IMAGENET_STATS,
        },
        last_conv_split,
        last_conv_shape: FeatureShape { k: 512, p: 14, q: 14 },
        post_pool_split: Some(post_pool_split),
        post_pool_shape: Some(FeatureShape { k: 512, p: 7, q: 7 }),
    }
}

/// ResNet-50. Input 224×224; the residual stack ends in 2048×7×7 maps.
/// There is no pooling layer after the last convolution stage (global
/// average pooling belongs to the head), so only
/// [`SplitPoint::LastConv`] is defined.
pub fn resnet50_def(num_classes: usize, seed: u64) -> BackboneDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![
        conv2d_init("conv1", 3, 64, 7, 2, 3, &mut rng),
        identity_affine("bn1", 64),
        Layer::Relu,
        Layer::MaxPool2d { kernel: 3, stride: 2, pad: 1 },
    ];
    // (blocks, mid channels, out channels, first-block stride)
    let stages: [(usize, usize, usize, usize); 4] = [
        (3, 64, 256, 1),
        (4, 128, 512, 2),
        (6, 256, 1024, 2),
        (3, 512, 2048, 2),
    ];
    let mut in_c = 64;
    for (stage, &(blocks, mid, out, stride)) in stages.iter().enumerate() {
        for b in 0..blocks {
            let s = if b == 0 { stride } else { 1 };
            layers.push(bottleneck(stage + 1, b, in_c, mid, out, s, &mut rng));
            in_c = out;
        }
    }
    let last_conv_split = layers.len();
    layers.push(Layer::GlobalAvgPool);
    layers.push(linear_init("fc", 2048, num_classes, &mut rng));

    BackboneDef {
        model_id: "resnet50".into(),
        network: Network::new(layers),
        num_classes,
        input: InputSpec {
            size: 224,
            resize_shorter: 256,
            stats: IMAGENET_STATS,
        },
        last_conv_split,
        last_conv_shape: FeatureShape { k: 2048, p: 7, q: 7 },
        post_pool_split: None,
        post_pool_shape: None,
    }
}

/// One ResNet bottleneck: 1×1 reduce, 3×3 (carries the stride), 1×1 expand,
/// with a projection shortcut when the geometry changes.
fn bottleneck(
    stage: usize,
    block: usize,
    in_c: usize,
    mid: usize,
    out: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Layer {
    let p = format!("layer{stage}.{block}");
    let main = vec![
        conv2d_init(format!("{p}.conv1"), in_c, mid, 1, 1, 0, rng),
        identity_affine(format!("{p}.bn1"), mid),
        Layer::Relu,
        conv2d_init(format!("{p}.conv2"), mid, mid, 3, stride, 1, rng),
        identity_affine(format!("{p}.bn2"), mid),
        Layer::Relu,
        conv2d_init(format!("{p}.conv3"), mid, out, 1, 1, 0, rng),
        identity_affine(format!("{p}.bn3"), out),
    ];
    let shortcut = if stride != 1 || in_c != out {
        vec![
            conv2d_init(format!("{p}.downsample.0"), in_c, out, 1, stride, 0, rng),
            identity_affine(format!("{p}.downsample.1"), out),
        ]
    } else {
        vec![]
    };
    Layer::Residual { main, shortcut }
}

/// Folded batch-norm initialised to the identity (scale 1, shift 0).
fn identity_affine(name: impl Into<String>, channels: usize) -> Layer {
    Layer::ChannelAffine {
        name: name.into(),
        scale: Arc::new(Array1::<f64>::ones(channels).into_dyn()),
        shift: Arc::new(Array1::<f64>::zeros(channels).into_dyn()),
    }
}

/// A three-convolution CNN for 32×32 inputs — the desk-scale fixture used
/// throughout the tests and the book. Features end in 16×8×8 maps; the head
/// is global average pooling plus one linear layer.
pub fn tiny_cnn_def(num_classes: usize, seed: u64) -> BackboneDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv2d_init("conv1", 3, 8, 3, 1, 1, &mut rng),
        Layer::Relu,
        Layer::MaxPool2d { kernel: 2, stride: 2, pad: 0 },
        conv2d_init("conv2", 8, 16, 3, 1, 1, &mut rng),
        Layer::Relu,
        Layer::MaxPool2d { kernel: 2, stride: 2, pad: 0 },
        conv2d_init("conv3", 16, 16, 3, 1, 1, &mut rng),
        Layer::Relu,
    ];
    let last_conv_split = layers.len();
    let mut layers = layers;
    layers.push(Layer::GlobalAvgPool);
    layers.push(linear_init("fc", 16, num_classes, &mut rng));

    BackboneDef {
        model_id: "tiny-cnn".into(),
        network: Network::new(layers),
        num_classes,
        input: InputSpec {
            size: 32,
            resize_shorter: 36,
            stats: ChannelStats {
                mean: [0.5; 3],
                std: [0.5; 3],
            },
        },
        last_conv_split,
        last_conv_shape: FeatureShape { k: 16, p: 8, q: 8 },
        post_pool_split: None,
        post_pool_shape: None,
    }
}
