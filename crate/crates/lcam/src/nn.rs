//! Sequential network container.
//!
//! A [`Network`] is an ordered list of layers with named parameters. Both
//! halves of a split classifier (feature extractor and classification head)
//! are `Network`s; so are the tiny fixture CNNs used in tests and the book.
//! Parameters live behind [`Arc`], so replaying a frozen network onto a tape
//! copies nothing.
//!
//! Parameter names follow the `<layer>.weight` / `<layer>.bias` convention of
//! the usual Python model exports, which keeps weight conversion scripts down
//! to a dictionary rename.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, Ix1};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, TensorD, Var};
use crate::error::{Error, Result};

/// One layer of a [`Network`].
pub enum Layer {
    /// 2-D convolution with weight `[out,in,kh,kw]` and bias `[out]`.
    Conv2d {
        name: String,
        weight: Arc<TensorD>,
        bias: Arc<TensorD>,
        stride: usize,
        pad: usize,
    },
    /// Elementwise `max(x, 0)`.
    Relu,
    /// Max pooling over square windows.
    MaxPool2d { kernel: usize, stride: usize, pad: usize },
    /// Per-channel affine `x * scale[c] + shift[c]`: a batch-norm layer
    /// folded to inference form. Always frozen.
    ChannelAffine {
        name: String,
        scale: Arc<TensorD>,
        shift: Arc<TensorD>,
    },
    /// Fully connected layer with weight `[out,in]` and bias `[out]`.
    Linear {
        name: String,
        weight: Arc<TensorD>,
        bias: Arc<TensorD>,
    },
    /// Collapse everything after the batch axis.
    Flatten,
    /// Spatial mean pooling `[n,c,h,w]` → `[n,c]`.
    GlobalAvgPool,
    /// Residual block: `relu(main(x) + shortcut(x))`. An empty shortcut is
    /// the identity.
    Residual { main: Vec<Layer>, shortcut: Vec<Layer> },
}

/// An ordered stack of layers.
#[derive(Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    /// Replays the network onto a tape with all parameters frozen. Gradients
    /// still *flow through* the computation to whatever upstream nodes need
    /// them; they are just never accumulated for the weights themselves.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        apply_layers(&self.layers, tape, x, None)
    }

    /// Replays the network with conv/linear parameters registered as
    /// trainable leaves. Returns the output and the `(name, var)` binding for
    /// every trainable parameter, in layer order, so the caller can read
    /// gradients after the backward sweep.
    pub fn apply_trainable(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<(String, Var)>)> {
        let mut bound = Vec::new();
        let out = apply_layers(&self.layers, tape, x, Some(&mut bound))?;
        Ok((out, bound))
    }

    /// All parameters (including folded batch-norm constants) in a stable
    /// layer-order walk: `(qualified name, tensor)`.
    pub fn param_entries(&self) -> Vec<(String, &Arc<TensorD>)> {
        let mut out = Vec::new();
        collect_params(&self.layers, &mut out);
        out
    }

    /// Applies one SGD step `p -= lr * grad` to the named trainable
    /// parameters. Unknown names are an error; parameters without an entry
    /// in `grads` are left untouched.
    pub fn sgd_step(&mut self, grads: &HashMap<String, TensorD>, lr: f64) -> Result<()> {
        let mut remaining = grads.len();
        update_params(&mut self.layers, grads, lr, &mut remaining);
        if remaining != 0 {
            return Err(Error::InvalidArgument {
                context: "sgd_step",
                detail: "gradient map names parameters this network does not have".into(),
            });
        }
        Ok(())
    }

    /// Replaces parameters from a name → tensor map (e.g. deserialised
    /// weights). Every network parameter must be present with the right
    /// shape; extra map entries are ignored, so one file can carry a whole
    /// model while the halves load their slices.
    pub fn load_params(&mut self, map: &HashMap<String, TensorD>) -> Result<()> {
        for (name, slot) in param_slots(&mut self.layers) {
            let tensor = map.get(&name).ok_or_else(|| Error::InvalidArgument {
                context: "load_params",
                detail: format!("missing parameter '{name}'"),
            })?;
            if tensor.shape() != slot.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("'{name}' with shape {:?}", slot.shape()),
                    tensor.shape(),
                ));
            }
            *slot = Arc::new(tensor.clone());
        }
        Ok(())
    }

    /// SHA-256 over every parameter's name, shape and little-endian bytes,
    /// in stable layer order. Two networks share a digest iff they are
    /// bitwise-identical parameter for parameter.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.param_entries() {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

/// Formats a digest as lowercase hex.
pub(crate) fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn apply_layers(
    layers: &[Layer],
    tape: &mut Tape,
    mut x: Var,
    mut bound: Option<&mut Vec<(String, Var)>>,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv2d {
                name,
                weight,
                bias,
                stride,
                pad,
            } => {
                let trainable = bound.is_some();
                let w = tape.leaf(Arc::clone(weight), trainable);
                let b = tape.leaf(Arc::clone(bias), trainable);
                if let Some(bound) = bound.as_deref_mut() {
                    bound.push((format!("{name}.weight"), w));
                    bound.push((format!("{name}.bias"), b));
                }
                tape.conv2d(x, w, b, *stride, *pad)?
            }
            Layer::Relu => tape.relu(x),
            Layer::MaxPool2d { kernel, stride, pad } => tape.maxpool2d(x, *kernel, *stride, *pad)?,
            Layer::ChannelAffine { scale, shift, .. } => {
                let scale1 = narrow1(scale, "channel_affine scale")?;
                let shift1 = narrow1(shift, "channel_affine shift")?;
                tape.channel_affine(x, Arc::new(scale1), &shift1)?
            }
            Layer::Linear { name, weight, bias } => {
                let trainable = bound.is_some();
                let w = tape.leaf(Arc::clone(weight), trainable);
                let b = tape.leaf(Arc::clone(bias), trainable);
                if let Some(bound) = bound.as_deref_mut() {
                    bound.push((format!("{name}.weight"), w));
                    bound.push((format!("{name}.bias"), b));
                }
                tape.linear(x, w, b)?
            }
            Layer::Flatten => tape.flatten(x),
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::Residual { main, shortcut } => {
                let main_out = apply_layers(main, tape, x, bound.as_deref_mut())?;
                let short_out = apply_layers(shortcut, tape, x, bound.as_deref_mut())?;
                let sum = tape.add(main_out, short_out)?;
                tape.relu(sum)
            }
        };
    }
    Ok(x)
}

fn narrow1(t: &TensorD, context: &'static str) -> Result<Array1<f64>> {
    t.view()
        .into_dimensionality::<Ix1>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::shape(context, "1-d array", t.shape()))
}

fn collect_params<'a>(layers: &'a [Layer], out: &mut Vec<(String, &'a Arc<TensorD>)>) {
    for layer in layers {
        match layer {
            Layer::Conv2d { name, weight, bias, .. } | Layer::Linear { name, weight, bias } => {
                out.push((format!("{name}.weight"), weight));
                out.push((format!("{name}.bias"), bias));
            }
            Layer::ChannelAffine { name, scale, shift } => {
                out.push((format!("{name}.scale"), scale));
                out.push((format!("{name}.shift"), shift));
            }
            Layer::Residual { main, shortcut } => {
                collect_params(main, out);
                collect_params(shortcut, out);
            }
            _ => {}
        }
    }
}

fn param_slots(layers: &mut [Layer]) -> Vec<(String, &mut Arc<TensorD>)> {
    let mut out = Vec::new();
    fn walk<'a>(layers: &'a mut [Layer], out: &mut Vec<(String, &'a mut Arc<TensorD>)>) {
        for layer in layers {
            match layer {
                Layer::Conv2d { name, weight, bias, .. }
                | Layer::Linear { name, weight, bias } => {
                    out.push((format!("{name}.weight"), weight));
                    out.push((format!("{name}.bias"), bias));
                }
                Layer::ChannelAffine { name, scale, shift } => {
                    out.push((format!("{name}.scale"), scale));
                    out.push((format!("{name}.shift"), shift));
                }
                Layer::Residual { main, shortcut } => {
                    walk(main, out);
                    walk(shortcut, out);
                }
                _ => {}
            }
        }
    }
    walk(layers, &mut out);
    out
}

fn update_params(
    layers: &mut [Layer],
    grads: &HashMap<String, TensorD>,
    lr: f64,
    remaining: &mut usize,
) {
    for (name, slot) in param_slots(layers) {
        if let Some(g) = grads.get(&name) {
            // After the tape is dropped the Arc is unique, so this updates
            // in place; otherwise it clones once.
            let p = Arc::make_mut(slot);
            p.scaled_add(-lr, g);
            *remaining -= 1;
        }
    }
}

/// He-uniform initialised convolution layer: weights drawn from
/// `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`, zero bias.
pub fn conv2d_init(
    name: impl Into<String>,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Layer {
    let fan_in = (in_c * kernel * kernel) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let weight = Array4::from_shape_fn((out_c, in_c, kernel, kernel), |_| {
        rng.random::<f64>() * 2.0 * bound - bound
    });
    Layer::Conv2d {
        name: name.into(),
        weight: Arc::new(weight.into_dyn()),
        bias: Arc::new(Array1::<f64>::zeros(out_c).into_dyn()),
        stride,
        pad,
    }
}

/// He-uniform initialised fully connected layer.
pub fn linear_init(
    name: impl Into<String>,
    in_d: usize,
    out_d: usize,
    rng: &mut impl Rng,
) -> Layer {
    let bound = (6.0 / in_d as f64).sqrt();
    let weight =
        Array2::from_shape_fn((out_d, in_d), |_| rng.random::<f64>() * 2.0 * bound - bound);
    Layer::Linear {
        name: name.into(),
        weight: Arc::new(weight.into_dyn()),
        bias: Arc::new(Array1::<f64>::zeros(out_d).into_dyn()),
    }
}
