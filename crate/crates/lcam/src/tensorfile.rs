//! Reading and writing named-tensor archives (safetensors container).
//!
//! Backbone weights and training checkpoints share this format: a flat
//! name → tensor map plus a string metadata header. Files written by the
//! usual Python exporters load directly; `F32` tensors are upcast to the
//! crate's working precision (`f64`) on read.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::IxDyn;
use safetensors::tensor::{serialize_to_file, Dtype, SafeTensors, TensorView};

use crate::autodiff::TensorD;
use crate::error::{Error, Result};

/// Writes tensors and metadata to `path` atomically (temp file + rename).
pub fn write_tensors(
    path: &Path,
    tensors: &[(String, &TensorD)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    // Byte buffers must outlive the views handed to the serializer.
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.len() * 8);
            for &v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            (name.clone(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views: Vec<(&str, TensorView<'_>)> = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F64, shape.clone(), bytes)
                .expect("shape and byte length are consistent by construction");
            (name.as_str(), view)
        })
        .collect();
    let meta: HashMap<String, String> = metadata
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let tmp = path.with_extension("tmp");
    serialize_to_file(views, &Some(meta), &tmp).map_err(|e| Error::FileFormat {
        path: tmp.clone(),
        detail: format!("cannot serialise tensors: {e}"),
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a named-tensor archive. Returns the tensors (upcast to `f64`) and
/// the metadata map (empty if the file carries none).
pub fn read_tensors(path: &Path) -> Result<(HashMap<String, TensorD>, HashMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        detail: format!("invalid tensor archive header: {e}"),
    })?;
    let metadata = header.metadata().clone().unwrap_or_default();

    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::FileFormat {
        path: path.to_path_buf(),
        detail: format!("invalid tensor archive: {e}"),
    })?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = IxDyn(view.shape());
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
            other => {
                return Err(Error::FileFormat {
                    path: path.to_path_buf(),
                    detail: format!("tensor '{name}' has unsupported dtype {other:?} (need F32 or F64)"),
                })
            }
        };
        let tensor = TensorD::from_shape_vec(shape, values).map_err(|e| Error::FileFormat {
            path: path.to_path_buf(),
            detail: format!("tensor '{name}' shape/data mismatch: {e}"),
        })?;
        out.insert(name, tensor);
    }
    Ok((out, metadata))
}
