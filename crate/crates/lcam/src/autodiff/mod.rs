//! A small tape-based reverse-mode autodiff engine over `ndarray`.
//!
//! The crate needs exactly one thing from autodiff: gradients of a scalar
//! loss with respect to the attention-head parameters, where the loss is
//! computed *through* a frozen convolutional network (twice, for the
//! image-masking variant). The op set below is precisely the vocabulary of
//! that computation — nothing more.
//!
//! Design notes:
//!
//! * Values are `f64` and live behind [`Arc`], so putting a parameter on the
//!   tape never copies it.
//! * Each node records which inputs require gradients; the backward sweep
//!   skips every subgraph that leads only to frozen leaves. This is what
//!   makes the frozen-backbone training cheap: on the first feature pass no
//!   backbone gradient is ever materialised, while on the second (masked)
//!   pass only input gradients flow, never weight gradients.
//! * One tape = one forward + one backward. Training steps build a fresh
//!   tape; this keeps lifetimes trivial and memory bounded.

pub mod kernels;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use crate::error::{Error, Result};

/// Dynamic-rank `f64` tensor, the currency of the tape.
pub type TensorD = ArrayD<f64>;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        // The recorded argmax indices are all the backward pass needs; the
        // window geometry itself is not replayed.
        argmax: Arc<Vec<u32>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Flatten(Var),
    GlobalAvgPool(Var),
    ChannelAffine {
        x: Var,
        scale: Arc<Array1<f64>>,
    },
    AttentionCam {
        a: Var,
        w: Var,
        b: Var,
        classes: Arc<Vec<usize>>,
    },
    SpatialMul {
        x: Var,
        m: Var,
    },
    BilinearUp {
        m: Var,
    },
    AvLoss {
        s: Var,
        exponent: f64,
    },
    TvLoss(Var),
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
        probs: Arc<Array2<f64>>,
    },
}

struct Node {
    value: Arc<TensorD>,
    grad: Option<TensorD>,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation and replays it in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Creates an empty tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            swept: false,
        }
    }

    /// Number of recorded nodes (diagnostics only).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no nodes have been recorded yet.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorD, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &TensorD {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (0-dimensional) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.ndim(), 0, "scalar() called on non-scalar node");
        *val.iter().next().expect("scalar node has one element")
    }

    /// Gradient accumulated for `v` by [`Tape::backward`]. Present only for
    /// leaves that required gradients.
    pub fn grad(&self, v: Var) -> Option<&TensorD> {
        self.nodes[v.0].grad.as_ref()
    }

    // ---- graph construction -------------------------------------------------

    /// Registers an existing tensor as a graph input. `needs_grad` marks
    /// trainable parameters; frozen weights and raw inputs pass `false`.
    pub fn leaf(&mut self, value: Arc<TensorD>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a constant (gradient-free) tensor.
    pub fn constant(&mut self, value: TensorD) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?}", self.value(a).shape()),
                self.value(b).shape(),
            ));
        }
        let value = self.value(a) + self.value(b);
        let needs = self.wants(a) || self.wants(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    /// Multiplies a node by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let needs = self.wants(a);
        self.push(value, needs, Op::Scale(a, c))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let needs = self.wants(a);
        self.push(value, needs, Op::Relu(a))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(kernels::sigmoid);
        let needs = self.wants(a);
        self.push(value, needs, Op::Sigmoid(a))
    }

    /// 2-D convolution: `x [n,c,h,w]`, `w [o,c,kh,kw]`, `b [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = as4(self.value(x), "conv2d input")?;
        let wv = as4(self.value(w), "conv2d weight")?;
        let bv = as1(self.value(b), "conv2d bias")?;
        if xv.dim().1 != wv.dim().1 || bv.len() != wv.dim().0 {
            return Err(Error::shape(
                "conv2d",
                format!("x channels = {} and bias len = output channels", wv.dim().1),
                (xv.dim(), wv.dim(), bv.len()),
            ));
        }
        let y = kernels::conv2d(&xv, &wv, &bv.to_owned(), stride, pad);
        let needs = self.wants(x) || self.wants(w) || self.wants(b);
        Ok(self.push(y.into_dyn(), needs, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Max pooling over square windows.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = as4(self.value(x), "maxpool input")?;
        let (y, argmax) = kernels::maxpool2d(&xv, kernel, stride, pad);
        let needs = self.wants(x);
        Ok(self.push(
            y.into_dyn(),
            needs,
            Op::MaxPool2d {
                x,
                argmax: Arc::new(argmax),
            },
        ))
    }

    /// Fully connected layer: `x [n,d]`, `w [out,d]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = as2(self.value(x), "linear input")?;
        let wv = as2(self.value(w), "linear weight")?;
        let bv = as1(self.value(b), "linear bias")?;
        if xv.dim().1 != wv.dim().1 || bv.len() != wv.dim().0 {
            return Err(Error::shape(
                "linear",
                format!("[n,{}] input and [{}] bias", wv.dim().1, wv.dim().0),
                (xv.dim(), bv.len()),
            ));
        }
        let y = kernels::linear(&xv, &wv, &bv.to_owned());
        let needs = self.wants(x) || self.wants(w) || self.wants(b);
        Ok(self.push(y.into_dyn(), needs, Op::Linear { x, w, b }))
    }

    /// Collapses all axes after the batch axis: `[n, ...]` → `[n, prod]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let rest: usize = v.len() / n.max(1);
        let y = v
            .to_owned()
            .into_shape_with_order(IxDyn(&[n, rest]))
            .expect("flatten preserves element count");
        let needs = self.wants(x);
        self.push(y, needs, Op::Flatten(x))
    }

    /// Spatial mean pooling `[n,c,h,w]` → `[n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = as4(self.value(x), "global_avg_pool input")?;
        let y = kernels::global_avg_pool(&xv);
        let needs = self.wants(x);
        Ok(self.push(y.into_dyn(), needs, Op::GlobalAvgPool(x)))
    }

    /// Frozen per-channel affine `y = x * scale[c] + shift[c]` (batch-norm
    /// layers folded to inference form). The parameters are not nodes: they
    /// are permanently frozen, only input gradients flow.
    pub fn channel_affine(
        &mut self,
        x: Var,
        scale: Arc<Array1<f64>>,
        shift: &Array1<f64>,
    ) -> Result<Var> {
        let xv = as4(self.value(x), "channel_affine input")?;
        let (n, c, h, w) = xv.dim();
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(
                "channel_affine",
                format!("scale/shift of length {c}"),
                (scale.len(), shift.len()),
            ));
        }
        let mut y = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = y.index_axis_mut(Axis(0), ni);
                let mut plane = plane.index_axis_mut(Axis(0), ci);
                let (s, t) = (scale[ci], shift[ci]);
                plane.mapv_inplace(|v| v * s + t);
            }
        }
        debug_assert_eq!((h, w), (xv.dim().2, xv.dim().3));
        let needs = self.wants(x);
        Ok(self.push(y.into_dyn(), needs, Op::ChannelAffine { x, scale }))
    }

    /// Class-conditional attention map. For each sample `n` with target class
    /// `y_n`: `L[n,p,q] = Σ_k w[y_n,k] * a[n,k,p,q] + b[y_n]`.
    pub fn attention_cam(
        &mut self,
        a: Var,
        w: Var,
        b: Var,
        classes: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let av = as4(self.value(a), "attention feature maps")?;
        let wv = as2(self.value(w), "attention weights")?;
        let bv = as1(self.value(b), "attention bias")?;
        let (n, k, p, q) = av.dim();
        let (r, wk) = wv.dim();
        if wk != k || bv.len() != r {
            return Err(Error::shape(
                "attention_cam",
                format!("weights [R,{k}] and bias [R]"),
                (wv.dim(), bv.len()),
            ));
        }
        if classes.len() != n {
            return Err(Error::shape(
                "attention_cam",
                format!("{n} class indices"),
                classes.len(),
            ));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= r) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: r,
            });
        }
        let mut l = ndarray::Array3::<f64>::zeros((n, p, q));
        for (ni, &class) in classes.iter().enumerate() {
            let mut out = l.index_axis_mut(Axis(0), ni);
            out.fill(bv[class]);
            for ki in 0..k {
                let wk = wv[(class, ki)];
                if wk == 0.0 {
                    continue;
                }
                let fmap = av.index_axis(Axis(0), ni);
                out.scaled_add(wk, &fmap.index_axis(Axis(0), ki));
            }
        }
        let needs = self.wants(a) || self.wants(w) || self.wants(b);
        Ok(self.push(l.into_dyn(), needs, Op::AttentionCam { a, w, b, classes }))
    }

    /// Broadcast spatial product: `x [n,c,h,w] * m [n,h,w]` over channels.
    pub fn spatial_mul(&mut self, x: Var, m: Var) -> Result<Var> {
        let xv = as4(self.value(x), "spatial_mul input")?;
        let mv = as3(self.value(m), "spatial_mul mask")?;
        let (n, c, h, w) = xv.dim();
        if mv.dim() != (n, h, w) {
            return Err(Error::shape(
                "spatial_mul",
                format!("mask [{n},{h},{w}]"),
                mv.dim(),
            ));
        }
        let mut y = xv.to_owned();
        for ni in 0..n {
            let mask = mv.index_axis(Axis(0), ni);
            let mut sample = y.index_axis_mut(Axis(0), ni);
            for ci in 0..c {
                let mut plane = sample.index_axis_mut(Axis(0), ci);
                plane *= &mask;
            }
        }
        let needs = self.wants(x) || self.wants(m);
        Ok(self.push(y.into_dyn(), needs, Op::SpatialMul { x, m }))
    }

    /// Bilinear resampling of a stack of maps `[n,p,q]` → `[n,out_h,out_w]`
    /// (half-pixel centres, edge clamp).
    pub fn bilinear_up(&mut self, m: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument {
                context: "bilinear_up",
                detail: format!("target {out_h}x{out_w} must be non-empty"),
            });
        }
        let mv = as3(self.value(m), "bilinear_up input")?;
        let (n, _, _) = mv.dim();
        let mut y = ndarray::Array3::<f64>::zeros((n, out_h, out_w));
        for ni in 0..n {
            let up = kernels::bilinear_resize(&mv.index_axis(Axis(0), ni), out_h, out_w);
            y.index_axis_mut(Axis(0), ni).assign(&up);
        }
        let needs = self.wants(m);
        Ok(self.push(y.into_dyn(), needs, Op::BilinearUp { m }))
    }

    /// Area regulariser: batch mean of `(1/(P·Q)) Σ s^exponent`, with each
    /// entry clamped to at least `1e-6` inside the power so the fractional
    /// exponent's derivative stays finite. Entries must be non-negative.
    pub fn av_loss(&mut self, s: Var, exponent: f64) -> Result<Var> {
        let sv = as3(self.value(s), "av_loss input")?;
        if sv.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument {
                context: "av_loss",
                detail: "saliency entries must be non-negative".into(),
            });
        }
        let (n, p, q) = sv.dim();
        let inv = 1.0 / (n * p * q) as f64;
        let total: f64 = sv.iter().map(|&v| v.max(AV_CLAMP).powf(exponent)).sum();
        let value = ndarray::arr0(total * inv).into_dyn();
        let needs = self.wants(s);
        Ok(self.push(value, needs, Op::AvLoss { s, exponent }))
    }

    /// Smoothness regulariser: batch mean of the per-map total variation
    /// (sum of squared horizontal/vertical neighbour differences).
    pub fn tv_loss(&mut self, s: Var) -> Result<Var> {
        let sv = as3(self.value(s), "tv_loss input")?;
        let n = sv.dim().0;
        let total: f64 = (0..n)
            .map(|ni| kernels::total_variation(&sv.index_axis(Axis(0), ni)))
            .sum();
        let value = ndarray::arr0(total / n as f64).into_dyn();
        let needs = self.wants(s);
        Ok(self.push(value, needs, Op::TvLoss(s)))
    }

    /// Mean cross-entropy between `logits [n,r]` and integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        let lv = as2(self.value(logits), "cross_entropy logits")?;
        let (n, r) = lv.dim();
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} targets"),
                targets.len(),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= r) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: r,
            });
        }
        let probs = kernels::softmax_rows(&lv);
        let mut total = 0.0;
        for (ni, &t) in targets.iter().enumerate() {
            let row = lv.row(ni);
            let row = row.as_slice().expect("logit row is contiguous");
            total += kernels::log_sum_exp(row) - row[t];
        }
        let value = ndarray::arr0(total / n as f64).into_dyn();
        let needs = self.wants(logits);
        Ok(self.push(
            value,
            needs,
            Op::CrossEntropy {
                logits,
                targets,
                probs: Arc::new(probs),
            },
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Runs the reverse sweep from a scalar root. Gradients for leaves with
    /// `needs_grad` are afterwards available through [`Tape::grad`]. A tape
    /// records one forward computation and may only be swept once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.swept {
            return Err(Error::InvalidArgument {
                context: "backward",
                detail: "tape has already been swept".into(),
            });
        }
        if self.value(root).ndim() != 0 {
            return Err(Error::shape("backward root", "scalar (0-d)", self.value(root).shape()));
        }
        self.swept = true;
        self.nodes[root.0].grad = Some(ndarray::arr0(1.0).into_dyn());

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue; // not on any path to the root
            };
            let op = self.nodes[i].op.clone();
            let out_val = Arc::clone(&self.nodes[i].value);
            match op {
                Op::Leaf => {
                    // Keep leaf gradients for the caller.
                    self.nodes[i].grad = Some(gy);
                }
                Op::Add(a, b) => {
                    self.accum(a, gy.clone());
                    self.accum(b, gy);
                }
                Op::Scale(a, c) => self.accum(a, gy * c),
                Op::Relu(a) => {
                    let mut g = gy;
                    ndarray::Zip::from(&mut g)
                        .and(out_val.as_ref())
                        .for_each(|g, &y| {
                            if y <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    self.accum(a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = gy;
                    ndarray::Zip::from(&mut g)
                        .and(out_val.as_ref())
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    self.accum(a, g);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = Arc::clone(&self.nodes[x.0].value);
                    let wv = Arc::clone(&self.nodes[w.0].value);
                    let need_dx = self.wants(x);
                    let need_dw = self.wants(w) || self.wants(b);
                    let (dx, dwb) = kernels::conv2d_backward(
                        &xv.view().into_dimensionality::<Ix4>().expect("validated"),
                        &wv.view().into_dimensionality::<Ix4>().expect("validated"),
                        &gy.view().into_dimensionality::<Ix4>().expect("conv grad"),
                        stride,
                        pad,
                        need_dx,
                        need_dw,
                    );
                    if let Some(dx) = dx {
                        self.accum(x, dx.into_dyn());
                    }
                    if let Some((dw, db)) = dwb {
                        self.accum(w, dw.into_dyn());
                        self.accum(b, db.into_dyn());
                    }
                }
                Op::MaxPool2d { x, argmax, .. } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let dx = kernels::maxpool2d_backward(
                        &gy.view().into_dimensionality::<Ix4>().expect("pool grad"),
                        &argmax,
                        (shape[0], shape[1], shape[2], shape[3]),
                    );
                    self.accum(x, dx.into_dyn());
                }
                Op::Linear { x, w, b } => {
                    let xv = Arc::clone(&self.nodes[x.0].value);
                    let wv = Arc::clone(&self.nodes[w.0].value);
                    let need_dx = self.wants(x);
                    let need_dw = self.wants(w) || self.wants(b);
                    let (dx, dwb) = kernels::linear_backward(
                        &xv.view().into_dimensionality::<Ix2>().expect("validated"),
                        &wv.view().into_dimensionality::<Ix2>().expect("validated"),
                        &gy.view().into_dimensionality::<Ix2>().expect("linear grad"),
                        need_dx,
                        need_dw,
                    );
                    if let Some(dx) = dx {
                        self.accum(x, dx.into_dyn());
                    }
                    if let Some((dw, db)) = dwb {
                        self.accum(w, dw.into_dyn());
                        self.accum(b, db.into_dyn());
                    }
                }
                Op::Flatten(x) => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    let dx = gy.into_shape_with_order(shape).expect("flatten adjoint");
                    self.accum(x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let g2 = gy.into_dimensionality::<Ix2>().expect("gap grad");
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut plane = dx.index_axis_mut(Axis(0), ni);
                            plane.index_axis_mut(Axis(0), ci).fill(g2[(ni, ci)] * inv);
                        }
                    }
                    self.accum(x, dx.into_dyn());
                }
                Op::ChannelAffine { x, scale } => {
                    let mut dx = gy.into_dimensionality::<Ix4>().expect("affine grad");
                    let (n, c, _, _) = dx.dim();
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut plane = dx.index_axis_mut(Axis(0), ni);
                            let mut plane = plane.index_axis_mut(Axis(0), ci);
                            plane *= scale[ci];
                        }
                    }
                    self.accum(x, dx.into_dyn());
                }
                Op::AttentionCam { a, w, b, classes } => {
                    let av = Arc::clone(&self.nodes[a.0].value);
                    let wv = Arc::clone(&self.nodes[w.0].value);
                    let av = av.view().into_dimensionality::<Ix4>().expect("validated");
                    let wv = wv.view().into_dimensionality::<Ix2>().expect("validated");
                    let gl = gy.view().into_dimensionality::<Ix3>().expect("cam grad");
                    let (n, k, p, q) = av.dim();
                    let r = wv.dim().0;
                    if self.wants(a) {
                        let mut da = ndarray::Array4::<f64>::zeros((n, k, p, q));
                        for (ni, &class) in classes.iter().enumerate() {
                            let g = gl.index_axis(Axis(0), ni);
                            for ki in 0..k {
                                let mut plane = da.index_axis_mut(Axis(0), ni);
                                let mut plane = plane.index_axis_mut(Axis(0), ki);
                                plane.scaled_add(wv[(class, ki)], &g);
                            }
                        }
                        self.accum(a, da.into_dyn());
                    }
                    if self.wants(w) || self.wants(b) {
                        let mut dw = Array2::<f64>::zeros((r, k));
                        let mut db = Array1::<f64>::zeros(r);
                        for (ni, &class) in classes.iter().enumerate() {
                            let g = gl.index_axis(Axis(0), ni);
                            db[class] += g.sum();
                            for ki in 0..k {
                                let fmap = av.index_axis(Axis(0), ni);
                                dw[(class, ki)] += (&g * &fmap.index_axis(Axis(0), ki)).sum();
                            }
                        }
                        self.accum(w, dw.into_dyn());
                        self.accum(b, db.into_dyn());
                    }
                }
                Op::SpatialMul { x, m } => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().expect("mul grad");
                    let (n, c, _, _) = gy4.dim();
                    if self.wants(x) {
                        let mv = Arc::clone(&self.nodes[m.0].value);
                        let mv = mv.view().into_dimensionality::<Ix3>().expect("validated");
                        let mut dx = gy4.to_owned();
                        for ni in 0..n {
                            let mask = mv.index_axis(Axis(0), ni);
                            let mut sample = dx.index_axis_mut(Axis(0), ni);
                            for ci in 0..c {
                                let mut plane = sample.index_axis_mut(Axis(0), ci);
                                plane *= &mask;
                            }
                        }
                        self.accum(x, dx.into_dyn());
                    }
                    if self.wants(m) {
                        let xv = Arc::clone(&self.nodes[x.0].value);
                        let xv = xv.view().into_dimensionality::<Ix4>().expect("validated");
                        let (_, _, h, w) = xv.dim();
                        let mut dm = ndarray::Array3::<f64>::zeros((n, h, w));
                        for ni in 0..n {
                            let mut acc = dm.index_axis_mut(Axis(0), ni);
                            for ci in 0..c {
                                let gplane = gy4.index_axis(Axis(0), ni);
                                let xplane = xv.index_axis(Axis(0), ni);
                                acc += &(&gplane.index_axis(Axis(0), ci)
                                    * &xplane.index_axis(Axis(0), ci));
                            }
                        }
                        self.accum(m, dm.into_dyn());
                    }
                }
                Op::BilinearUp { m } => {
                    let shape = self.nodes[m.0].value.shape().to_vec();
                    let (n, p, q) = (shape[0], shape[1], shape[2]);
                    let g3 = gy.view().into_dimensionality::<Ix3>().expect("up grad");
                    let mut dm = ndarray::Array3::<f64>::zeros((n, p, q));
                    for ni in 0..n {
                        let back =
                            kernels::bilinear_resize_backward(&g3.index_axis(Axis(0), ni), p, q);
                        dm.index_axis_mut(Axis(0), ni).assign(&back);
                    }
                    self.accum(m, dm.into_dyn());
                }
                Op::AvLoss { s, exponent } => {
                    let g = gy.iter().next().copied().expect("scalar grad");
                    let sv = Arc::clone(&self.nodes[s.0].value);
                    let sv3 = sv.view().into_dimensionality::<Ix3>().expect("validated");
                    let (n, p, q) = sv3.dim();
                    let coeff = g / (n * p * q) as f64;
                    let ds = sv3.mapv(|v| {
                        if v >= AV_CLAMP {
                            coeff * exponent * v.powf(exponent - 1.0)
                        } else {
                            0.0 // inside the clamp the loss is locally constant
                        }
                    });
                    self.accum(s, ds.into_dyn());
                }
                Op::TvLoss(s) => {
                    let g = gy.iter().next().copied().expect("scalar grad");
                    let sv = Arc::clone(&self.nodes[s.0].value);
                    let sv3 = sv.view().into_dimensionality::<Ix3>().expect("validated");
                    let (n, p, q) = sv3.dim();
                    let mut ds = ndarray::Array3::<f64>::zeros((n, p, q));
                    for ni in 0..n {
                        kernels::total_variation_backward(
                            &sv3.index_axis(Axis(0), ni),
                            g / n as f64,
                            &mut ds.index_axis_mut(Axis(0), ni),
                        );
                    }
                    self.accum(s, ds.into_dyn());
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let g = gy.iter().next().copied().expect("scalar grad");
                    let n = targets.len();
                    let mut dl = probs.as_ref().clone();
                    for (ni, &t) in targets.iter().enumerate() {
                        dl[(ni, t)] -= 1.0;
                    }
                    dl *= g / n as f64;
                    self.accum(logits, dl.into_dyn());
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: TensorD) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta),
        }
    }
}

/// Clamp floor applied inside the area loss's fractional power.
pub const AV_CLAMP: f64 = 1e-6;

fn as1<'a>(v: &'a TensorD, context: &'static str) -> Result<ndarray::ArrayView1<'a, f64>> {
    v.view()
        .into_dimensionality()
        .map_err(|_| Error::shape(context, "1-d array", v.shape()))
}

fn as2<'a>(v: &'a TensorD, context: &'static str) -> Result<ndarray::ArrayView2<'a, f64>> {
    v.view()
        .into_dimensionality()
        .map_err(|_| Error::shape(context, "2-d array", v.shape()))
}

fn as3<'a>(v: &'a TensorD, context: &'static str) -> Result<ndarray::ArrayView3<'a, f64>> {
    v.view()
        .into_dimensionality()
        .map_err(|_| Error::shape(context, "3-d array", v.shape()))
}

fn as4<'a>(v: &'a TensorD, context: &'static str) -> Result<ndarray::ArrayView4<'a, f64>> {
    v.view()
        .into_dimensionality()
        .map_err(|_| Error::shape(context, "4-d array", v.shape()))
}
