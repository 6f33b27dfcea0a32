//! Durable snapshots of trained attention parameters.
//!
//! A checkpoint is a tensor archive holding the two attention arrays plus
//! string metadata: a format version, the identifier and weight digest of
//! the backbone the head was trained against, the number of completed
//! epochs, the training configuration as JSON, and a digest of the training
//! log. Loading verifies the format version; [`Checkpoint::bind`] verifies
//! that a checkpoint actually belongs to the classifier split it is about
//! to explain, so a head trained against one set of frozen weights can
//! never be silently applied to another.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Ix1, Ix2};

use crate::attention::AttentionParams;
use crate::backbone::ClassifierSplit;
use crate::error::{Error, Result};
use crate::tensorfile::{read_tensors, write_tensors};
use crate::training::TrainConfig;

/// The checkpoint format this build writes and the only one it reads.
pub const FORMAT_VERSION: u32 = 1;

const WEIGHTS_KEY: &str = "attention.weights";
const BIAS_KEY: &str = "attention.bias";

/// A trained attention head together with everything needed to verify and
/// reproduce it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// The attention weights and bias.
    pub params: AttentionParams,
    /// The configuration the run used.
    pub config: TrainConfig,
    /// How many epochs had completed when this snapshot was taken.
    pub epoch: usize,
    /// Identifier of the backbone architecture (e.g. `vgg16`).
    pub model_id: String,
    /// Digest of the frozen backbone weights at training time.
    pub frozen_digest: String,
    /// Digest of the CSV training log up to this snapshot.
    pub log_digest: String,
}

impl Checkpoint {
    /// Checks that this checkpoint belongs to `split`: identical frozen
    /// weights, the same split point, and attention arrays sized for the
    /// split's class count and channel count.
    pub fn bind(&self, split: &ClassifierSplit) -> Result<()> {
        if self.frozen_digest != split.frozen_digest() {
            return Err(Error::DigestMismatch {
                expected: self.frozen_digest.clone(),
                actual: split.frozen_digest().to_string(),
            });
        }
        if self.config.split_point != split.split_point() {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "checkpoint was trained at split point `{}` but the backbone is split at `{}`",
                    self.config.split_point,
                    split.split_point()
                ),
            });
        }
        let k = split.feature_shape().k;
        if self.params.num_classes() != split.num_classes() || self.params.channels() != k {
            return Err(Error::shape(
                "checkpoint attention weights",
                format!("[{}, {}]", split.num_classes(), k),
                (self.params.num_classes(), self.params.channels()),
            ));
        }
        Ok(())
    }
}

/// Writes `ckpt` to `path` as a tensor archive (atomic replace).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let config = serde_json::to_string(&ckpt.config).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        detail: format!("cannot serialise the training config: {e}"),
    })?;
    let mut meta = BTreeMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("model_id".to_string(), ckpt.model_id.clone());
    meta.insert("epoch".to_string(), ckpt.epoch.to_string());
    meta.insert("frozen_digest".to_string(), ckpt.frozen_digest.clone());
    meta.insert("log_digest".to_string(), ckpt.log_digest.clone());
    meta.insert("config".to_string(), config);
    let weights = ckpt.params.weights().to_owned().into_dyn();
    let bias = ckpt.params.bias().to_owned().into_dyn();
    write_tensors(
        path,
        &[
            (WEIGHTS_KEY.to_string(), &weights),
            (BIAS_KEY.to_string(), &bias),
        ],
        &meta,
    )
}

/// Reads a checkpoint back, verifying the format version and the presence
/// and shape of every field.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (mut tensors, meta) = read_tensors(path)?;
    let missing = |key: &str| Error::FileFormat {
        path: path.to_path_buf(),
        detail: format!("missing metadata key `{key}`"),
    };
    let version = meta.get("format_version").ok_or_else(|| missing("format_version"))?;
    if version != &FORMAT_VERSION.to_string() {
        return Err(Error::FormatVersion {
            path: path.to_path_buf(),
            found: version.clone(),
            supported: FORMAT_VERSION,
        });
    }
    let config: TrainConfig = serde_json::from_str(meta.get("config").ok_or_else(|| missing("config"))?)
        .map_err(|e| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("cannot parse the training config: {e}"),
        })?;
    let epoch: usize = meta
        .get("epoch")
        .ok_or_else(|| missing("epoch"))?
        .parse()
        .map_err(|e| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("cannot parse the epoch count: {e}"),
        })?;
    let take = |tensors: &mut std::collections::HashMap<String, crate::autodiff::TensorD>,
                key: &str| {
        tensors.remove(key).ok_or_else(|| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("missing tensor `{key}`"),
        })
    };
    let weights = take(&mut tensors, WEIGHTS_KEY)?
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("`{WEIGHTS_KEY}` is not a matrix"),
        })?;
    let bias = take(&mut tensors, BIAS_KEY)?
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("`{BIAS_KEY}` is not a vector"),
        })?;
    Ok(Checkpoint {
        params: AttentionParams::from_arrays(weights, bias)?,
        config,
        epoch,
        model_id: meta.get("model_id").ok_or_else(|| missing("model_id"))?.clone(),
        frozen_digest: meta
            .get("frozen_digest")
            .ok_or_else(|| missing("frozen_digest"))?
            .clone(),
        log_digest: meta
            .get("log_digest")
            .ok_or_else(|| missing("log_digest"))?
            .clone(),
    })
}
