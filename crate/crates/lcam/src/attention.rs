//! The trainable class-conditional attention head.
//!
//! This is the entire learnable machinery of the method: one weight row and
//! one bias per class. Given feature maps `A` (`K` channels of `P`×`Q`
//! cells) and a class `y`, the head produces a raw class activation map
//!
//! ```text
//! L[p,q] = Σ_k  w[y,k] · A[k,p,q]  +  b[y]
//! ```
//!
//! i.e. a learned weighting of the backbone's own feature maps. Training
//! squeezes that map through a sigmoid and asks the masked input to still be
//! classified as `y` while keeping the mask small and smooth; see
//! [`crate::losses`] and [`crate::training`].

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels::sigmoid, Tape, TensorD, Var};
use crate::error::{Error, Result};

/// Initialisation schemes for [`AttentionParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Weights uniform in `[-1/K, +1/K]`, bias all zeros. With K channels
    /// the initial map is a small-magnitude average of the feature maps —
    /// near the sigmoid's linear region, where gradients are healthy.
    #[default]
    UniformSymmetric,
}

/// Per-class weights `[R, K]` and bias `[R]` of the attention head.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    weights: Arc<TensorD>,
    bias: Arc<TensorD>,
}

impl AttentionParams {
    /// Seeded initialisation for `num_classes` classes over `channels`
    /// feature channels.
    pub fn init(num_classes: usize, channels: usize, scheme: InitScheme, seed: u64) -> Self {
        let InitScheme::UniformSymmetric = scheme;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / channels as f64;
        let weights = Array2::from_shape_fn((num_classes, channels), |_| {
            rng.random::<f64>() * 2.0 * bound - bound
        });
        AttentionParams {
            weights: Arc::new(weights.into_dyn()),
            bias: Arc::new(Array1::<f64>::zeros(num_classes).into_dyn()),
        }
    }

    /// Wraps explicit parameter arrays (checkpoint loading, tests).
    pub fn from_arrays(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() || weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::shape(
                "AttentionParams::from_arrays",
                "[R, K] weights with [R] bias, R,K > 0",
                (weights.dim(), bias.len()),
            ));
        }
        Ok(AttentionParams {
            weights: Arc::new(weights.into_dyn()),
            bias: Arc::new(bias.into_dyn()),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights
            .view()
            .into_dimensionality::<Ix2>()
            .expect("weights are [R,K] by construction")
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.bias
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias is [R] by construction")
    }

    /// Registers both parameters on a tape. Returns `(weights, bias)` vars.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        (
            tape.leaf(Arc::clone(&self.weights), trainable),
            tape.leaf(Arc::clone(&self.bias), trainable),
        )
    }

    /// Plain SGD update from gradients read off a swept tape.
    pub fn sgd_step(&mut self, grad_weights: &TensorD, grad_bias: &TensorD, lr: f64) {
        Arc::make_mut(&mut self.weights).scaled_add(-lr, grad_weights);
        Arc::make_mut(&mut self.bias).scaled_add(-lr, grad_bias);
    }

    /// True when every parameter is finite (divergence guard).
    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// A raw (pre-normalisation) class activation map for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub values: Array2<f64>,
    pub class_index: usize,
}

/// A sigmoid-normalised activation map; every entry lies in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCam {
    pub values: Array2<f64>,
    pub class_index: usize,
}

/// Computes the raw activation map for `class` from single-image feature
/// maps `[K, P, Q]`.
pub fn compute_cam(
    params: &AttentionParams,
    features: &Array3<f64>,
    class: usize,
) -> Result<Cam> {
    let (k, p, q) = features.dim();
    if k != params.channels() {
        return Err(Error::shape(
            "compute_cam",
            format!("[{}, P, Q] feature maps", params.channels()),
            features.dim(),
        ));
    }
    if class >= params.num_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: params.num_classes(),
        });
    }
    let w = params.weights();
    let mut values = Array2::<f64>::from_elem((p, q), params.bias()[class]);
    for ki in 0..k {
        let wk = w[(class, ki)];
        if wk != 0.0 {
            values.scaled_add(wk, &features.index_axis(Axis(0), ki));
        }
    }
    Ok(Cam {
        values,
        class_index: class,
    })
}

/// Squeezes a raw map through the logistic sigmoid.
pub fn sigmoid_normalize(cam: &Cam) -> NormalizedCam {
    NormalizedCam {
        values: cam.values.mapv(sigmoid),
        class_index: cam.class_index,
    }
}
