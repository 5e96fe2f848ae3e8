//! Eager forward kernels and their analytic backward passes.
//!
//! The [`Graph`](super::Graph) records calls to these functions and replays
//! the matching `*_backward` in reverse order.

use super::gemm::{gemm, MatMut, MatRef};
use super::{Axis, Shape, Tensor};
use crate::error::{Error, Result};

/// Variance floor for layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

fn mismatch(op: &str, a: Shape, b: Shape) -> Error {
    Error::invalid(format!("{op}: shape mismatch {a} vs {b}"))
}

fn check_bias(op: &str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(bias) = bias {
        let want = Shape::new(1, channels, 1);
        if bias.shape() != want {
            return Err(mismatch(op, bias.shape(), want));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// linear

/// Per-frame channel map: `y[b, o, t] = sum_i w[o, i] x[b, i, t] + bias[o]`.
///
/// `w` has shape `(1, out, in)`, `bias` `(1, out, 1)`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.b != 1 || ws.t != xs.c {
        return Err(mismatch("linear", xs, ws));
    }
    check_bias("linear bias", bias, ws.c)?;
    let (cin, cout, t) = (xs.c, ws.c, xs.t);
    let mut y = Tensor::zeros(Shape::new(xs.b, cout, t));
    for b in 0..xs.b {
        let yb = y.batch_mut(b);
        if let Some(bias) = bias {
            for (o, row) in yb.chunks_mut(t.max(1)).enumerate().take(cout) {
                row.fill(bias.data()[o]);
            }
        }
        gemm(
            1.0,
            MatRef::rows(w.data(), cout, cin, cin),
            MatRef::rows(x.batch(b), cin, t, t),
            1.0,
            MatMut::rows(yb, cout, t, t),
        );
    }
    Ok(y)
}

/// Gradients of [`linear`]: `(dx, dw, dbias)`; `dx` only when requested.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let xs = x.shape();
    let (cin, cout, t) = (xs.c, w.shape().c, xs.t);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(Shape::new(1, cout, 1));
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    for b in 0..xs.b {
        let dyb = dy.batch(b);
        gemm(
            1.0,
            MatRef::rows(dyb, cout, t, t),
            MatRef::rows(x.batch(b), cin, t, t).t(),
            1.0,
            MatMut::rows(dw.data_mut(), cout, cin, cin),
        );
        for o in 0..cout {
            db.data_mut()[o] += dyb[o * t..(o + 1) * t].iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                1.0,
                MatRef::rows(w.data(), cout, cin, cin).t(),
                MatRef::rows(dyb, cout, t, t),
                1.0,
                MatMut::rows(dx.batch_mut(b), cin, t, t),
            );
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// conv1d

fn tap_offset(j: usize, k: usize, dilation: usize) -> isize {
    (j as isize - (k as isize - 1) / 2) * dilation as isize
}

/// Output positions `lo..hi` whose tap at `offset` lands inside `0..len`.
fn valid_range(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

fn check_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, dilation: usize, axis: Axis) -> Result<()> {
    let xs = x.shape();
    let ws = w.shape();
    if dilation < 1 {
        return Err(Error::invalid("conv1d: dilation must be >= 1"));
    }
    if ws.t % 2 == 0 {
        return Err(Error::invalid(format!("conv1d: kernel size {} must be odd", ws.t)));
    }
    match axis {
        Axis::Time => {
            if xs.t == 0 {
                return Err(Error::invalid("conv1d: time axis has length 0"));
            }
            if ws.c != xs.c {
                return Err(mismatch("conv1d", xs, ws));
            }
            check_bias("conv1d bias", bias, ws.b)
        }
        Axis::Channel => {
            if xs.c == 0 {
                return Err(Error::invalid("conv1d: channel axis has length 0"));
            }
            if ws.b != 1 || ws.c != 1 {
                return Err(Error::invalid(format!(
                    "conv1d: channel-axis kernel must have shape (1, 1, k), got {ws}"
                )));
            }
            check_bias("conv1d bias", bias, 1)
        }
    }
}

/// Dilated 1-D convolution with "same" zero padding.
///
/// Along [`Axis::Time`] the kernel has shape `(out, in, k)` and mixes
/// channels. Along [`Axis::Channel`] a single `(1, 1, k)` kernel slides over
/// the channel dimension, shared by every frame; the bias is `(1, 1, 1)`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
    axis: Axis,
) -> Result<Tensor> {
    check_conv(x, w, bias, dilation, axis)?;
    let xs = x.shape();
    let k = w.shape().t;
    match axis {
        Axis::Time => {
            let (cout, cin, t) = (w.shape().b, xs.c, xs.t);
            let mut y = Tensor::zeros(Shape::new(xs.b, cout, t));
            for b in 0..xs.b {
                let yb = y.batch_mut(b);
                if let Some(bias) = bias {
                    for (o, row) in yb.chunks_mut(t).enumerate() {
                        row.fill(bias.data()[o]);
                    }
                }
                for j in 0..k {
                    let off = tap_offset(j, k, dilation);
                    let (lo, hi) = valid_range(off, t);
                    if lo >= hi {
                        continue;
                    }
                    let src = (lo as isize + off) as usize;
                    gemm(
                        1.0,
                        MatRef {
                            data: &w.data()[j..],
                            rows: cout,
                            cols: cin,
                            rs: cin * k,
                            cs: k,
                        },
                        MatRef::rows(&x.batch(b)[src..], cin, hi - lo, t),
                        1.0,
                        MatMut::rows(&mut yb[lo..], cout, hi - lo, t),
                    );
                }
            }
            Ok(y)
        }
        Axis::Channel => {
            let (c, t) = (xs.c, xs.t);
            let b0 = bias.map_or(0.0, |b| b.data()[0]);
            let mut y = Tensor::full(xs, b0);
            for b in 0..xs.b {
                for j in 0..k {
                    let wj = w.data()[j];
                    let off = tap_offset(j, k, dilation);
                    let (lo, hi) = valid_range(off, c);
                    for ch in lo..hi {
                        let src = (ch as isize + off) as usize;
                        let xi = x.index(b, src, 0);
                        let yi = y.index(b, ch, 0);
                        let (xr, yr) = (&x.data()[xi..xi + t], &mut y.data_mut()[yi..yi + t]);
                        for (yv, xv) in yr.iter_mut().zip(xr) {
                            *yv += wj * xv;
                        }
                    }
                }
            }
            Ok(y)
        }
    }
}

/// Gradients of [`conv1d`]: `(dx, dw, dbias)`.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dilation: usize,
    axis: Axis,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let xs = x.shape();
    let k = w.shape().t;
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    match axis {
        Axis::Time => {
            let (cout, cin, t) = (w.shape().b, xs.c, xs.t);
            let mut db = Tensor::zeros(Shape::new(1, cout, 1));
            for b in 0..xs.b {
                let dyb = dy.batch(b);
                for o in 0..cout {
                    db.data_mut()[o] += dyb[o * t..(o + 1) * t].iter().sum::<f64>();
                }
                for j in 0..k {
                    let off = tap_offset(j, k, dilation);
                    let (lo, hi) = valid_range(off, t);
                    if lo >= hi {
                        continue;
                    }
                    let src = (lo as isize + off) as usize;
                    let n = hi - lo;
                    gemm(
                        1.0,
                        MatRef::rows(&dyb[lo..], cout, n, t),
                        MatRef::rows(&x.batch(b)[src..], cin, n, t).t(),
                        1.0,
                        MatMut {
                            data: &mut dw.data_mut()[j..],
                            rows: cout,
                            cols: cin,
                            rs: cin * k,
                            cs: k,
                        },
                    );
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            1.0,
                            MatRef {
                                data: &w.data()[j..],
                                rows: cout,
                                cols: cin,
                                rs: cin * k,
                                cs: k,
                            }
                            .t(),
                            MatRef::rows(&dyb[lo..], cout, n, t),
                            1.0,
                            MatMut::rows(&mut dx.batch_mut(b)[src..], cin, n, t),
                        );
                    }
                }
            }
            (dx, dw, db)
        }
        Axis::Channel => {
            let (c, t) = (xs.c, xs.t);
            let db = Tensor::scalar(dy.sum());
            for b in 0..xs.b {
                for j in 0..k {
                    let wj = w.data()[j];
                    let off = tap_offset(j, k, dilation);
                    let (lo, hi) = valid_range(off, c);
                    let mut acc = 0.0;
                    for ch in lo..hi {
                        let src = (ch as isize + off) as usize;
                        let dyr = dy.row(b, ch);
                        acc += dyr.iter().zip(x.row(b, src)).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(dx) = dx.as_mut() {
                            let di = dx.index(b, src, 0);
                            for (d, g) in dx.data_mut()[di..di + t].iter_mut().zip(dyr) {
                                *d += wj * g;
                            }
                        }
                    }
                    dw.data_mut()[j] += acc;
                }
            }
            (dx, dw, db)
        }
    }
}

// ---------------------------------------------------------------------------
// pointwise

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= s * (1.0 - s);
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// `s1 * a + s2 * b`.
pub fn add_scaled(a: &Tensor, b: &Tensor, s1: f64, s2: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("add_scaled", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| s1 * x + s2 * y)
        .collect();
    Tensor::new(a.shape(), data)
}

// ---------------------------------------------------------------------------
// softmax

pub fn softmax(x: &Tensor, axis: Axis) -> Tensor {
    let s = x.shape();
    let mut y = x.clone();
    match axis {
        Axis::Time => {
            for row in y.data_mut().chunks_mut(s.t.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        Axis::Channel => {
            for b in 0..s.b {
                for t in 0..s.t {
                    let idx = |c: usize| (b * s.c + c) * s.t + t;
                    let m = (0..s.c).map(|c| x.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for c in 0..s.c {
                        let e = (x.data()[idx(c)] - m).exp();
                        y.data_mut()[idx(c)] = e;
                        z += e;
                    }
                    for c in 0..s.c {
                        y.data_mut()[idx(c)] /= z;
                    }
                }
            }
        }
    }
    y
}

/// Backward of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: Axis) -> Tensor {
    let s = y.shape();
    let mut dx = Tensor::zeros(s);
    match axis {
        Axis::Time => {
            let t = s.t.max(1);
            for ((dxr, yr), dyr) in dx
                .data_mut()
                .chunks_mut(t)
                .zip(y.data().chunks(t))
                .zip(dy.data().chunks(t))
            {
                let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
                    *d = yv * (g - dot);
                }
            }
        }
        Axis::Channel => {
            for b in 0..s.b {
                for t in 0..s.t {
                    let idx = |c: usize| (b * s.c + c) * s.t + t;
                    let dot: f64 = (0..s.c).map(|c| y.data()[idx(c)] * dy.data()[idx(c)]).sum();
                    for c in 0..s.c {
                        dx.data_mut()[idx(c)] = y.data()[idx(c)] * (dy.data()[idx(c)] - dot);
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// layer norm

/// Cached statistics from a [`layer_norm`] forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per `(b, t)`.
    pub inv_std: Vec<f64>,
}

/// Normalise over the channel axis at every frame, then apply per-channel
/// `gain` and `shift` (both `(1, c, 1)`).
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let s = x.shape();
    check_bias("layer_norm gain", Some(gain), s.c)?;
    check_bias("layer_norm shift", Some(shift), s.c)?;
    if s.c == 0 {
        return Err(Error::invalid("layer_norm: zero channels"));
    }
    let n = s.c as f64;
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let mut inv_std = vec![0.0; s.b * s.t];
    for b in 0..s.b {
        let mut mean = vec![0.0; s.t];
        for c in 0..s.c {
            for (m, v) in mean.iter_mut().zip(x.row(b, c)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; s.t];
        for c in 0..s.c {
            for ((acc, v), m) in var.iter_mut().zip(x.row(b, c)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let istd = &mut inv_std[b * s.t..(b + 1) * s.t];
        for (i, v) in istd.iter_mut().zip(&var) {
            *i = 1.0 / (v / n + LAYER_NORM_EPS).sqrt();
        }
        for c in 0..s.c {
            let (g, sh) = (gain.data()[c], shift.data()[c]);
            let base = x.index(b, c, 0);
            for t in 0..s.t {
                let h = (x.data()[base + t] - mean[t]) * istd[t];
                xhat.data_mut()[base + t] = h;
                y.data_mut()[base + t] = h * g + sh;
            }
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Gradients of [`layer_norm`]: `(dx, dgain, dshift)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let s = dy.shape();
    let n = s.c as f64;
    let mut dx = Tensor::zeros(s);
    let mut dg = Tensor::zeros(gain.shape());
    let mut ds = Tensor::zeros(gain.shape());
    for b in 0..s.b {
        // dxhat = dy * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut m1 = vec![0.0; s.t];
        let mut m2 = vec![0.0; s.t];
        for c in 0..s.c {
            let g = gain.data()[c];
            let dyr = dy.row(b, c);
            let xr = cache.xhat.row(b, c);
            let mut sg = 0.0;
            let mut ss = 0.0;
            for t in 0..s.t {
                let d = dyr[t] * g;
                m1[t] += d;
                m2[t] += d * xr[t];
                sg += dyr[t] * xr[t];
                ss += dyr[t];
            }
            dg.data_mut()[c] += sg;
            ds.data_mut()[c] += ss;
        }
        let istd = &cache.inv_std[b * s.t..(b + 1) * s.t];
        for c in 0..s.c {
            let g = gain.data()[c];
            let base = dy.index(b, c, 0);
            for t in 0..s.t {
                let d = dy.data()[base + t] * g;
                let xh = cache.xhat.data()[base + t];
                dx.data_mut()[base + t] = istd[t] * (d - m1[t] / n - xh * m2[t] / n);
            }
        }
    }
    (dx, dg, ds)
}

// ---------------------------------------------------------------------------
// concat / slice

/// Concatenate along the channel axis.
pub fn concat(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat: no inputs"))?.shape();
    let mut c = 0;
    for x in xs {
        let s = x.shape();
        if s.b != first.b || s.t != first.t {
            return Err(mismatch("concat", first, s));
        }
        c += s.c;
    }
    let shape = Shape::new(first.b, c, first.t);
    let mut data = Vec::with_capacity(shape.len());
    for b in 0..first.b {
        for x in xs {
            data.extend_from_slice(x.batch(b));
        }
    }
    Tensor::new(shape, data)
}

/// Channels `start..start + len`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::invalid(format!(
            "slice_channels: {start}..{} out of range for {} channels",
            start + len,
            s.c
        )));
    }
    let shape = Shape::new(s.b, len, s.t);
    let mut data = Vec::with_capacity(shape.len());
    for b in 0..s.b {
        let lo = x.index(b, start, 0);
        data.extend_from_slice(&x.data()[lo..lo + len * s.t]);
    }
    Tensor::new(shape, data)
}

/// Inverse of [`concat`]: split channels into pieces of the given sizes.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if sizes.iter().sum::<usize>() != x.shape().c {
        return Err(Error::invalid("split_channels: sizes do not cover the channel axis"));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let out = slice_channels(x, start, n);
            start += n;
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// batched matmul

fn mat(x: &Tensor, b: usize, trans: bool) -> MatRef<'_> {
    let s = x.shape();
    let m = MatRef::rows(x.batch(b), s.c, s.t, s.t);
    if trans {
        m.t()
    } else {
        m
    }
}

fn op_dims(s: Shape, trans: bool) -> (usize, usize) {
    if trans {
        (s.t, s.c)
    } else {
        (s.c, s.t)
    }
}

/// Per-batch `scale * op(a) * op(b)`, treating each `(c, t)` block as a matrix.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool, scale: f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, ka) = op_dims(sa, trans_a);
    let (kb, n) = op_dims(sb, trans_b);
    if sa.b != sb.b || ka != kb {
        return Err(mismatch("matmul", sa, sb));
    }
    let mut y = Tensor::zeros(Shape::new(sa.b, m, n));
    for bi in 0..sa.b {
        gemm(
            scale,
            mat(a, bi, trans_a),
            mat(b, bi, trans_b),
            0.0,
            MatMut::rows(y.batch_mut(bi), m, n, n),
        );
    }
    Ok(y)
}

/// Gradients of [`matmul`]: `(da, db)`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    trans_a: bool,
    trans_b: bool,
    scale: f64,
    dy: &Tensor,
    need: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (sa, sb, sy) = (a.shape(), b.shape(), dy.shape());
    let dyv = |bi| MatRef::rows(dy.batch(bi), sy.c, sy.t, sy.t);
    let da = need.0.then(|| {
        let mut da = Tensor::zeros(sa);
        for bi in 0..sa.b {
            // d op(a) = scale * dy * op(b)^T
            let out = MatMut::rows(da.batch_mut(bi), sa.c, sa.t, sa.t);
            let out = if trans_a { out.t() } else { out };
            gemm(scale, dyv(bi), mat(b, bi, trans_b).t(), 0.0, out);
        }
        da
    });
    let db = need.1.then(|| {
        let mut db = Tensor::zeros(sb);
        for bi in 0..sb.b {
            // d op(b) = scale * op(a)^T * dy
            let out = MatMut::rows(db.batch_mut(bi), sb.c, sb.t, sb.t);
            let out = if trans_b { out.t() } else { out };
            gemm(scale, mat(a, bi, trans_a).t(), dyv(bi), 0.0, out);
        }
        db
    });
    (da, db)
}

// ---------------------------------------------------------------------------
// loss

fn check_loss_inputs(pred: &Tensor, target: &Tensor, weights: Option<&Tensor>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(mismatch("bce_loss", pred.shape(), target.shape()));
    }
    if let Some(w) = weights {
        if w.shape() != pred.shape() {
            return Err(mismatch("bce_loss weights", pred.shape(), w.shape()));
        }
    }
    Ok(())
}

fn loss_denominator(n: usize, weights: Option<&Tensor>) -> f64 {
    match weights {
        Some(w) => w.data().iter().filter(|&&v| v != 0.0).count().max(1) as f64,
        None => n.max(1) as f64,
    }
}

/// Mean binary cross-entropy over unmasked frames.
///
/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`. A zero weight masks
/// a frame out of both numerator and denominator.
pub fn bce_loss(pred: &Tensor, target: &Tensor, weights: Option<&Tensor>) -> Result<f64> {
    check_loss_inputs(pred, target, weights)?;
    let denom = loss_denominator(pred.len(), weights);
    let mut total = 0.0;
    for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        let w = weights.map_or(1.0, |w| w.data()[i]);
        if w == 0.0 {
            continue;
        }
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / denom)
}

/// Gradient of [`bce_loss`] with respect to `pred`, scaled by `upstream`.
pub fn bce_backward(pred: &Tensor, target: &Tensor, weights: Option<&Tensor>, upstream: f64) -> Tensor {
    let denom = loss_denominator(pred.len(), weights);
    let mut d = Tensor::zeros(pred.shape());
    for (i, (&p, &y)) in pred.data().iter().zip(target.data()).enumerate() {
        let w = weights.map_or(1.0, |w| w.data()[i]);
        if w == 0.0 || !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
            continue;
        }
        d.data_mut()[i] = upstream * w * (-y / p + (1.0 - y) / (1.0 - p)) / denom;
    }
    d
}
