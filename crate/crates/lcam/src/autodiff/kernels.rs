//! Dense numeric kernels shared by the autodiff tape and the plain
//! (non-differentiated) inference paths.
//!
//! Everything is `f64` and single-threaded on purpose: the crate promises
//! bitwise-reproducible training and evaluation runs, which is far easier to
//! uphold without nondeterministic reduction orders. Convolution is im2col +
//! matrix multiply; the backward kernels recompute the column buffer instead
//! of caching it, trading a little time for a much smaller peak footprint.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Output spatial extent of a convolution/pooling window sweep.
///
/// Standard formula: `(input + 2*pad - kernel) / stride + 1`. Panics on
/// configurations where the window does not fit at all; builders never
/// produce those.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = input + 2 * pad;
    assert!(
        padded >= kernel && stride > 0,
        "window {kernel} with stride {stride} does not fit in padded extent {padded}"
    );
    (padded - kernel) / stride + 1
}

/// Unrolls one sample `[c, h, w]` into a `[c*kh*kw, oh*ow]` column buffer.
///
/// Row `(ci*kh + ki)*kw + kj`, column `oi*ow + oj` holds
/// `x[ci, oi*stride + ki - pad, oj*stride + kj - pad]`, or zero where that
/// index falls into padding.
fn im2col(
    x: &ArrayView2<'_, f64>, // flattened [c, h*w] view is awkward; take [c,h,w] via raw dims below
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    let x_flat = x.as_slice().expect("im2col input must be contiguous");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                let out_slice = out_row.as_slice_mut().expect("row is contiguous");
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue; // whole row of this window position is padding
                    }
                    let base = ci * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_slice[oi * ow + oj] = x_flat[base + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatters a `[c*kh*kw, oh*ow]` column-gradient buffer back onto the input
/// plane, accumulating overlaps. Exact adjoint of [`im2col`].
fn col2im_accumulate(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64], // length c*h*w
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let drow = dcols.row(row);
                let drow = drow.as_slice().expect("row is contiguous");
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + ii as usize * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[base + jj as usize] += drow[oi * ow + oj];
                    }
                }
            }
        }
    }
}

fn sample_view<'a>(x: &ArrayView4<'a, f64>, n: usize) -> ArrayView2<'a, f64> {
    let (_, c, h, w) = x.dim();
    x.clone()
        .index_axis_move(Axis(0), n)
        .into_shape_with_order((c, h * w))
        .expect("sample is contiguous")
}

/// 2-D convolution. `x: [n,c,h,w]`, `w: [o,c,kh,kw]`, `b: [o]` → `[n,o,oh,ow]`.
pub fn conv2d(
    x: &ArrayView4<'_, f64>,
    weight: &ArrayView4<'_, f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (o, wc, kh, kw) = weight.dim();
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!(bias.len(), o, "conv2d bias length mismatch");
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);

    let w_mat = weight
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight is contiguous");
    let mut y = Array4::<f64>::zeros((n, o, oh, ow));
    for ni in 0..n {
        let cols = im2col(&sample_view(x, ni), c, h, w, kh, kw, stride, pad);
        let mut out = w_mat.dot(&cols); // [o, oh*ow]
        for (mut row, bo) in out.rows_mut().into_iter().zip(bias.iter()) {
            row += *bo;
        }
        y.index_axis_mut(Axis(0), ni)
            .into_shape_with_order((o, oh * ow))
            .expect("output is contiguous")
            .assign(&out);
    }
    y
}

/// Gradients of [`conv2d`]. Returns `(dx, dw, db)`; `dx` is `None` when
/// `need_dx` is false (saves the col2im scatter for graph leaves).
pub fn conv2d_backward(
    x: &ArrayView4<'_, f64>,
    weight: &ArrayView4<'_, f64>,
    dy: &ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<f64>>, Option<(Array4<f64>, Array1<f64>)>) {
    let (n, c, h, w) = x.dim();
    let (o, _, kh, kw) = weight.dim();
    let (dn, doo, oh, ow) = dy.dim();
    assert_eq!((dn, doo), (n, o), "conv2d_backward batch/channel mismatch");

    let w_mat = weight
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight is contiguous");
    let mut dw_mat = Array2::<f64>::zeros((o, c * kh * kw));
    let mut db = Array1::<f64>::zeros(o);
    let mut dx = need_dx.then(|| Array4::<f64>::zeros((n, c, h, w)));

    for ni in 0..n {
        let dy_mat = dy
            .index_axis(Axis(0), ni)
            .into_shape_with_order((o, oh * ow))
            .expect("grad is contiguous");
        if need_dw {
            let cols = im2col(&sample_view(x, ni), c, h, w, kh, kw, stride, pad);
            dw_mat += &dy_mat.dot(&cols.t());
            db += &dy_mat.sum_axis(Axis(1));
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = w_mat.t().dot(&dy_mat); // [c*kh*kw, oh*ow]
            let mut plane = dx.index_axis_mut(Axis(0), ni);
            let plane = plane.as_slice_mut().expect("dx is contiguous");
            col2im_accumulate(&dcols, c, h, w, kh, kw, stride, pad, plane);
        }
    }
    let dwb = need_dw.then(|| {
        (
            dw_mat
                .into_shape_with_order((o, c, kh, kw))
                .expect("dw reshape"),
            db,
        )
    });
    (dx, dwb)
}

/// Max pooling. Returns the pooled output and, per output element (in
/// standard `[n,c,oh,ow]` traversal order), the flat `h*w` index of the
/// winning input inside its `[c,h,w]` plane. Ties go to the first element in
/// window scan order. Padding (values treated as `-inf`) never wins because
/// every window overlaps the input for the `pad < kernel` configurations the
/// builders produce.
pub fn maxpool2d(
    x: &ArrayView4<'_, f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    assert!(pad < kernel, "maxpool window must overlap the input");
    let oh = conv_out_extent(h, kernel, stride, pad);
    let ow = conv_out_extent(w, kernel, stride, pad);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ki in 0..kernel {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let v = plane[(ii as usize, jj as usize)];
                            if v > best {
                                best = v;
                                best_idx = (ii as usize * w + jj as usize) as u32;
                            }
                        }
                    }
                    y[(ni, ci, oi, oj)] = best;
                    argmax.push(best_idx);
                }
            }
        }
    }
    (y, argmax)
}

/// Scatters pooled gradients back to the argmax positions.
pub fn maxpool2d_backward(
    dy: &ArrayView4<'_, f64>,
    argmax: &[u32],
    input_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = input_shape;
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let dy_flat = dy.as_slice().expect("grad is contiguous");
    {
        let dx_flat = dx.as_slice_mut().expect("dx is contiguous");
        for ni in 0..n {
            for ci in 0..c {
                let plane_base = (ni * c + ci) * h * w;
                let out_base = (ni * c + ci) * oh * ow;
                for k in 0..oh * ow {
                    let src = out_base + k;
                    dx_flat[plane_base + argmax[src] as usize] += dy_flat[src];
                }
            }
        }
    }
    dx
}

/// Fully connected layer. `x: [n,d]`, `w: [out,d]`, `b: [out]` → `[n,out]`.
pub fn linear(x: &ArrayView2<'_, f64>, weight: &ArrayView2<'_, f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    for (mut row, _) in y.rows_mut().into_iter().zip(0..) {
        row += &bias.view();
    }
    y
}

/// Gradients of [`linear`]: `(dx, dw, db)` with the same conditional layout
/// as [`conv2d_backward`].
pub fn linear_backward(
    x: &ArrayView2<'_, f64>,
    weight: &ArrayView2<'_, f64>,
    dy: &ArrayView2<'_, f64>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array2<f64>>, Option<(Array2<f64>, Array1<f64>)>) {
    let dx = need_dx.then(|| dy.dot(weight));
    let dwb = need_dw.then(|| (dy.t().dot(x), dy.sum_axis(Axis(0))));
    (dx, dwb)
}

/// Bilinear resampling of a single 2-D map with half-pixel centres and edge
/// clamping (the `align_corners=false` convention shared by the major deep
/// learning frameworks): a destination pixel `d` samples source coordinate
/// `(d + 0.5) * in/out - 0.5`, clamped into the valid range.
pub fn bilinear_resize(src: &ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    assert!(out_h > 0 && out_w > 0, "bilinear target must be non-empty");
    let (h, w) = src.dim();
    let (rows, cols) = (sample_grid(h, out_h), sample_grid(w, out_w));
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
        for (oj, &(j0, j1, fj)) in cols.iter().enumerate() {
            let top = src[(i0, j0)] * (1.0 - fj) + src[(i0, j1)] * fj;
            let bot = src[(i1, j0)] * (1.0 - fj) + src[(i1, j1)] * fj;
            out[(oi, oj)] = top * (1.0 - fi) + bot * fi;
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients onto the source.
pub fn bilinear_resize_backward(
    dy: &ArrayView2<'_, f64>,
    in_h: usize,
    in_w: usize,
) -> Array2<f64> {
    let (out_h, out_w) = dy.dim();
    let (rows, cols) = (sample_grid(in_h, out_h), sample_grid(in_w, out_w));
    let mut dx = Array2::<f64>::zeros((in_h, in_w));
    for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
        for (oj, &(j0, j1, fj)) in cols.iter().enumerate() {
            let g = dy[(oi, oj)];
            dx[(i0, j0)] += g * (1.0 - fi) * (1.0 - fj);
            dx[(i0, j1)] += g * (1.0 - fi) * fj;
            dx[(i1, j0)] += g * fi * (1.0 - fj);
            dx[(i1, j1)] += g * fi * fj;
        }
    }
    dx
}

/// Per-axis sampling table for bilinear interpolation: for each destination
/// index the two source indices and the interpolation fraction.
fn sample_grid(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Numerically stable softmax over the last axis of a `[n, r]` matrix.
pub fn softmax_rows(logits: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `log(sum(exp(row)))` computed stably for one logit row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logistic sigmoid, evaluated in a form that never overflows.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Total variation of one 2-D map: sum of squared horizontal and vertical
/// neighbour differences, with no wrap-around at the edges.
pub fn total_variation(s: &ArrayView2<'_, f64>) -> f64 {
    let (p, q) = s.dim();
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..q {
            let v = s[(i, j)];
            if j + 1 < q {
                let d = v - s[(i, j + 1)];
                acc += d * d;
            }
            if i + 1 < p {
                let d = v - s[(i + 1, j)];
                acc += d * d;
            }
        }
    }
    acc
}

/// Gradient of [`total_variation`], accumulated into `ds` (same shape as `s`)
/// scaled by `g`.
pub fn total_variation_backward(s: &ArrayView2<'_, f64>, g: f64, ds: &mut ndarray::ArrayViewMut2<'_, f64>) {
    let (p, q) = s.dim();
    for i in 0..p {
        for j in 0..q {
            if j + 1 < q {
                let d = 2.0 * g * (s[(i, j)] - s[(i, j + 1)]);
                ds[(i, j)] += d;
                ds[(i, j + 1)] -= d;
            }
            if i + 1 < p {
                let d = 2.0 * g * (s[(i, j)] - s[(i + 1, j)]);
                ds[(i, j)] += d;
                ds[(i + 1, j)] -= d;
            }
        }
    }
}

/// Mean pooling over the spatial axes: `[n,c,h,w]` → `[n,c]`.
pub fn global_avg_pool(x: &ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::<f64>::zeros((n, c));
    let inv = 1.0 / (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            y[(ni, ci)] = plane.index_axis(Axis(0), ci).sum() * inv;
        }
    }
    y
}
