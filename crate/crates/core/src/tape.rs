//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass
//! (define-by-run; the tape is rebuilt per pass). [`Tape::backward`] replays
//! the records in exact reverse order and accumulates vector-Jacobian
//! products into per-node gradients. All reductions run in a fixed order, so
//! outputs and gradients are bit-identical across runs and thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

// constants captured by some variants are kept for the op record even when
// their backward rule does not read them
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    Prelu { x: Var, slope: Var },
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    TConv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, out_pad: usize },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool(Var),
    ReduceMean(Var),
    ReduceSum(Var),
    SumLastDim(Var),
    Concat1(Var, Var),
    Reshape(Var),
    ChannelMul { x: Var, s: Var },
    ComplexScaleRows { x: Var, h: Var },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Trailing-dimension broadcast: shapes align from the right, each pair of
/// dims must be equal or one of them 1 (missing dims count as 1).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch(a.to_vec(), b.to_vec()));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Map a flat index in `out_shape` to the flat index of an operand of
/// `in_shape` under trailing broadcast.
fn broadcast_index(flat: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    let nd = out_shape.len();
    let off = nd - in_shape.len();
    let mut in_strides = vec![0usize; in_shape.len()];
    {
        let mut s = 1;
        for i in (0..in_shape.len()).rev() {
            in_strides[i] = s;
            s *= in_shape[i];
        }
    }
    let mut rem = flat;
    let mut idx = 0usize;
    for d in (0..nd).rev() {
        let c = rem % out_shape[d];
        rem /= out_shape[d];
        if d >= off {
            let id = d - off;
            let ci = if in_shape[id] == 1 { 0 } else { c };
            idx += ci * in_strides[id];
        }
    }
    idx
}

/// Sum `grad` (shaped `from`) down to `to` under trailing broadcast.
fn reduce_grad(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    for (flat, &g) in grad.iter().enumerate() {
        out[broadcast_index(flat, from, to)] += g;
    }
    out
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Geometry of a conv output dimension.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output-index range `lo..hi` with `0 <= o*stride + k - pad < limit`.
fn tap_range(count: usize, stride: usize, k: usize, pad: usize, limit: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_num = limit + pad;
    if max_num <= k {
        return (0, 0);
    }
    let hi = ((max_num - k - 1) / stride + 1).min(count);
    (lo.min(hi), hi)
}

/// `y[t] += a * x[t*stride]` for `t < y.len()`.
#[inline]
fn axpy_strided(y: &mut [f64], x: &[f64], a: f64, stride: usize) {
    if stride == 1 {
        for (yv, xv) in y.iter_mut().zip(x) {
            *yv += a * xv;
        }
    } else {
        for (t, yv) in y.iter_mut().enumerate() {
            *yv += a * x[t * stride];
        }
    }
}

/// `x[t*stride] += a * y[t]` for `t < y.len()`.
#[inline]
fn axpy_into_strided(x: &mut [f64], y: &[f64], a: f64, stride: usize) {
    if stride == 1 {
        for (xv, yv) in x.iter_mut().zip(y) {
            *xv += a * yv;
        }
    } else {
        for (t, yv) in y.iter().enumerate() {
            x[t * stride] += a * yv;
        }
    }
}

/// `sum_t y[t] * x[t*stride]` for `t < y.len()`.
#[inline]
fn dot_strided(y: &[f64], x: &[f64], stride: usize) -> f64 {
    let mut acc = 0.0;
    if stride == 1 {
        for (yv, xv) in y.iter().zip(x) {
            acc += yv * xv;
        }
    } else {
        for (t, yv) in y.iter().enumerate() {
            acc += yv * x[t * stride];
        }
    }
    acc
}

/// Geometry of a transpose-conv output dimension.
pub fn tconv_out_dim(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + k + out_pad - 2 * pad
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Drop every recorded node and saved intermediate.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Put a tensor on the tape as a differentiable leaf (if it asks for it).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data.clone(),
            t.shape.clone(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Put raw values on the tape as a constant (gradient never flows).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, Op::Const, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v], vec![1])
    }

    // ---- elementwise (broadcasting) -------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb)?;
        let numel: usize = out_shape.iter().product();
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let data = if *sa == out_shape && *sb == out_shape {
            da.iter().zip(db).map(|(&x, &y)| op(x, y)).collect()
        } else {
            let mut out = vec![0.0; numel];
            for (flat, o) in out.iter_mut().enumerate() {
                let x = da[broadcast_index(flat, &out_shape, sa)];
                let y = db[broadcast_index(flat, &out_shape, sb)];
                *o = op(x, y);
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, out_shape, rec, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::AddScalar(a, c), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::MulScalar(a, c), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| libm::sqrt(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Sqrt(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid_stable(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Sigmoid(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| softplus_stable(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Softplus(a), ng)
    }

    // ---- activations with parameters ------------------------------------

    /// PReLU with one slope per channel. The channel axis is dim 1 for
    /// tensors of rank >= 2, dim 0 for rank 1.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let c = if xs.len() >= 2 { xs[1] } else { xs[0] };
        if self.nodes[slope.0].data.len() != c {
            return Err(Error::ShapeMismatch(
                xs,
                self.nodes[slope.0].shape.clone(),
            ));
        }
        let inner: usize = if xs.len() >= 2 { xs[2..].iter().product() } else { 1 };
        let sl = &self.nodes[slope.0].data;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; xd.len()];
        for (i, (&v, o)) in xd.iter().zip(data.iter_mut()).enumerate() {
            let ch = (i / inner) % c;
            *o = if v >= 0.0 { v } else { sl[ch] * v };
        }
        let ng = self.needs(x) || self.needs(slope);
        Ok(self.push(data, xs, Op::Prelu { x, slope }, ng))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Fully connected layer: `x[N,I] @ w[O,I]^T + b[O] -> [N,O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(xs, ws));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if self.nodes[b.0].data.len() != o {
            return Err(Error::ShapeMismatch(ws, self.nodes[b.0].shape.clone()));
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = vec![0.0; n * o];
        for r in 0..n {
            let xr = &xd[r * i..(r + 1) * i];
            let out = &mut data[r * o..(r + 1) * o];
            for (oc, ov) in out.iter_mut().enumerate() {
                let wr = &wd[oc * i..(oc + 1) * i];
                let mut acc = bd[oc];
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += xv * wv;
                }
                *ov = acc;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(data, vec![n, o], Op::Dense { x, w, b }, ng))
    }

    /// 2-D cross-correlation, `x[N,C,H,W] * w[OC,C,KH,KW] + b[OC]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "conv2d wants 4-d input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d stride must be positive".into()));
        }
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(xs, ws));
        }
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd_ + 2 * pad < kw {
            return Err(Error::InvalidShape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{wd_} (pad {pad})"
            )));
        }
        if self.nodes[b.0].data.len() != oc {
            return Err(Error::ShapeMismatch(ws, self.nodes[b.0].shape.clone()));
        }
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wd_, kw, stride, pad);
        let xd = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let bv = &self.nodes[b.0].data;
        let mut data = vec![0.0; n * oc * oh * ow];
        data.par_chunks_mut(oc * oh * ow).enumerate().for_each(|(ni, out)| {
            let xn = &xd[ni * c * h * wd_..(ni + 1) * c * h * wd_];
            for (i, v) in out.iter_mut().enumerate() {
                *v = bv[i / (oh * ow)];
            }
            for o in 0..oc {
                for ci in 0..c {
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = tap_range(oh, stride, ky, pad, h);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = tap_range(ow, stride, kx, pad, wd_);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let weight = wv[((o * c + ci) * kh + ky) * kw + kx];
                            let xbase = ox_lo * stride + kx - pad;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let xrow = &xn[ci * h * wd_ + iy * wd_..][..wd_];
                                let yrow = &mut out[(o * oh + oy) * ow..][..ow];
                                axpy_strided(
                                    &mut yrow[ox_lo..ox_hi],
                                    &xrow[xbase..],
                                    weight,
                                    stride,
                                );
                            }
                        }
                    }
                }
            }
        });
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            data,
            vec![n, oc, oh, ow],
            Op::Conv2d { x, w, b, stride, pad },
            ng,
        ))
    }

    /// Transpose convolution, `x[N,C,H,W] * w[C,OC,KH,KW] + b[OC]`.
    /// Output dim is `(H-1)*stride - 2*pad + KH + out_pad`.
    pub fn tconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "tconv2d wants 4-d input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidShape("tconv2d stride must be positive".into()));
        }
        if xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(xs, ws));
        }
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
        if self.nodes[b.0].data.len() != oc {
            return Err(Error::ShapeMismatch(ws, self.nodes[b.0].shape.clone()));
        }
        if (h - 1) * stride + kh + out_pad < 2 * pad + 1 {
            return Err(Error::InvalidShape("tconv2d output would be empty".into()));
        }
        let oh = tconv_out_dim(h, kh, stride, pad, out_pad);
        let ow = tconv_out_dim(wd_, kw, stride, pad, out_pad);
        let xd = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let bv = &self.nodes[b.0].data;
        let mut data = vec![0.0; n * oc * oh * ow];
        data.par_chunks_mut(oc * oh * ow).enumerate().for_each(|(ni, out)| {
            let xn = &xd[ni * c * h * wd_..(ni + 1) * c * h * wd_];
            for (i, o) in out.iter_mut().enumerate() {
                *o = bv[i / (oh * ow)];
            }
            for ci in 0..c {
                for o in 0..oc {
                    for ky in 0..kh {
                        let (iy_lo, iy_hi) = tap_range(h, stride, ky, pad, oh);
                        for kx in 0..kw {
                            let (ix_lo, ix_hi) = tap_range(wd_, stride, kx, pad, ow);
                            if ix_lo >= ix_hi {
                                continue;
                            }
                            let weight = wv[((ci * oc + o) * kh + ky) * kw + kx];
                            let ybase = ix_lo * stride + kx - pad;
                            for iy in iy_lo..iy_hi {
                                let oy = iy * stride + ky - pad;
                                let xrow = &xn[ci * h * wd_ + iy * wd_..][..wd_];
                                let yrow = &mut out[(o * oh + oy) * ow..][..ow];
                                axpy_into_strided(
                                    &mut yrow[ybase..],
                                    &xrow[ix_lo..ix_hi],
                                    weight,
                                    stride,
                                );
                            }
                        }
                    }
                }
            }
        });
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            data,
            vec![n, oc, oh, ow],
            Op::TConv2d { x, w, b, stride, pad, out_pad },
            ng,
        ))
    }

    // ---- pooling and reductions ------------------------------------------

    /// Non-overlapping k x k average pooling; window must divide the dims.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!("avg_pool wants 4-d, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || k > h || k > w {
            return Err(Error::InvalidShape(format!(
                "pool window {k} exceeds spatial dims {h}x{w}"
            )));
        }
        if h % k != 0 || w % k != 0 {
            return Err(Error::InvalidShape(format!(
                "pool window {k} must divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let xd = &self.nodes[x.0].data;
        let inv = 1.0 / (k * k) as f64;
        let mut data = vec![0.0; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let obase = (ni * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            let row = base + (oy * k + dy) * w + ox * k;
                            for dx in 0..k {
                                acc += xd[row + dx];
                            }
                        }
                        data[obase + oy * ow + ox] = acc * inv;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![n, c, oh, ow], Op::AvgPool { x, k }, ng))
    }

    /// Mean over the spatial dims: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "global_avg_pool wants 4-d, got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = &self.nodes[x.0].data;
        let inv = 1.0 / hw as f64;
        let mut data = vec![0.0; n * c];
        for (i, o) in data.iter_mut().enumerate() {
            let base = i * hw;
            let mut acc = 0.0;
            for v in &xd[base..base + hw] {
                acc += v;
            }
            *o = acc * inv;
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![n, c], Op::GlobalAvgPool(x), ng))
    }

    /// Mean over every element, producing a scalar.
    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].data.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let mut acc = 0.0;
        for v in &self.nodes[x.0].data {
            acc += v;
        }
        let mean = acc / self.nodes[x.0].data.len() as f64;
        let ng = self.needs(x);
        Ok(self.push(vec![mean], vec![1], Op::ReduceMean(x), ng))
    }

    /// Sum over every element, producing a scalar.
    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].data.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let mut acc = 0.0;
        for v in &self.nodes[x.0].data {
            acc += v;
        }
        let ng = self.needs(x);
        Ok(self.push(vec![acc], vec![1], Op::ReduceSum(x), ng))
    }

    /// Sum along the last dim, keeping it as size 1: `[.., K] -> [.., 1]`.
    pub fn sum_last_dim(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let k = xs[xs.len() - 1];
        let rows = self.nodes[x.0].data.len() / k;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows];
        for (r, o) in data.iter_mut().enumerate() {
            let mut acc = 0.0;
            for v in &xd[r * k..(r + 1) * k] {
                acc += v;
            }
            *o = acc;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = 1;
        let ng = self.needs(x);
        Ok(self.push(data, out_shape, Op::SumLastDim(x), ng))
    }

    // ---- shape plumbing ----------------------------------------------------

    /// Concatenate two rank-2 tensors along dim 1.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch(sa, sb));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut data = vec![0.0; n * (ca + cb)];
        for r in 0..n {
            data[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&da[r * ca..(r + 1) * ca]);
            data[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![n, ca + cb], Op::Concat1(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} to {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Reshape(x), ng))
    }

    /// Scale each channel of `x[N,C,H,W]` by `s[N,C]`.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ss = self.nodes[s.0].shape.clone();
        if xs.len() != 4 || ss.len() != 2 || ss[0] != xs[0] || ss[1] != xs[1] {
            return Err(Error::ShapeMismatch(xs, ss));
        }
        let hw = xs[2] * xs[3];
        let xd = &self.nodes[x.0].data;
        let sd = &self.nodes[s.0].data;
        let mut data = vec![0.0; xd.len()];
        for (nc, chunk) in data.chunks_mut(hw).enumerate() {
            let g = sd[nc];
            for (o, &v) in chunk.iter_mut().zip(&xd[nc * hw..(nc + 1) * hw]) {
                *o = v * g;
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(data, xs, Op::ChannelMul { x, s }, ng))
    }

    /// Treat each row of `x[N,K]` (K even) as complex pairs and multiply by
    /// the per-row complex coefficient `h[N,2]`. Gradient flows only to `x`.
    pub fn complex_scale_rows(&mut self, x: Var, h: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let hs = self.nodes[h.0].shape.clone();
        if xs.len() != 2 || hs.len() != 2 || hs[0] != xs[0] || hs[1] != 2 {
            return Err(Error::ShapeMismatch(xs, hs));
        }
        let k = xs[1];
        if k % 2 != 0 {
            return Err(Error::OddLatent(k));
        }
        let xd = &self.nodes[x.0].data;
        let hd = &self.nodes[h.0].data;
        let mut data = vec![0.0; xd.len()];
        for r in 0..xs[0] {
            let (hr, hi) = (hd[r * 2], hd[r * 2 + 1]);
            for p in 0..k / 2 {
                let re = xd[r * k + 2 * p];
                let im = xd[r * k + 2 * p + 1];
                data[r * k + 2 * p] = hr * re - hi * im;
                data[r * k + 2 * p + 1] = hr * im + hi * re;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, xs, Op::ComplexScaleRows { x, h }, ng))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns per-node gradients for every
    /// node on a path from a `requires_grad` leaf to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(i, &g, &op, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, add: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(existing) => {
                for (e, a) in existing.iter_mut().zip(add) {
                    *e += a;
                }
            }
            None => *slot = Some(add.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], op: &Op, grads: &mut [Option<Vec<f64>>]) {
        let out_shape = &self.nodes[i].shape;
        match *op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = reduce_grad(g, out_shape, &self.nodes[a.0].shape);
                    self.accum(grads, a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = reduce_grad(g, out_shape, &self.nodes[b.0].shape);
                    self.accum(grads, b, &gb);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = reduce_grad(g, out_shape, &self.nodes[a.0].shape);
                    self.accum(grads, a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    let gb = reduce_grad(&neg, out_shape, &self.nodes[b.0].shape);
                    self.accum(grads, b, &gb);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let same = sa == out_shape && sb == out_shape;
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    let t: Vec<f64> = if same {
                        g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect()
                    } else {
                        (0..g.len())
                            .map(|flat| g[flat] * bd[broadcast_index(flat, out_shape, sb)])
                            .collect()
                    };
                    let ga = reduce_grad(&t, out_shape, sa);
                    self.accum(grads, a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    let t: Vec<f64> = if same {
                        g.iter().zip(ad).map(|(gv, av)| gv * av).collect()
                    } else {
                        (0..g.len())
                            .map(|flat| g[flat] * ad[broadcast_index(flat, out_shape, sa)])
                            .collect()
                    };
                    let gb = reduce_grad(&t, out_shape, sb);
                    self.accum(grads, b, &gb);
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let same = sa == out_shape && sb == out_shape;
                let bd = &self.nodes[b.0].data;
                if self.nodes[a.0].needs_grad {
                    let t: Vec<f64> = if same {
                        g.iter().zip(bd).map(|(gv, bv)| gv / bv).collect()
                    } else {
                        (0..g.len())
                            .map(|flat| g[flat] / bd[broadcast_index(flat, out_shape, sb)])
                            .collect()
                    };
                    let ga = reduce_grad(&t, out_shape, sa);
                    self.accum(grads, a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    let t: Vec<f64> = if same {
                        g.iter()
                            .zip(ad.iter().zip(bd))
                            .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                            .collect()
                    } else {
                        (0..g.len())
                            .map(|flat| {
                                let bv = bd[broadcast_index(flat, out_shape, sb)];
                                let av = ad[broadcast_index(flat, out_shape, sa)];
                                -g[flat] * av / (bv * bv)
                            })
                            .collect()
                    };
                    let gb = reduce_grad(&t, out_shape, sb);
                    self.accum(grads, b, &gb);
                }
            }
            Op::AddScalar(a, _) => self.accum(grads, a, g),
            Op::MulScalar(a, c) => {
                let t: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(grads, a, &t);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].data;
                let t: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv / (2.0 * yv)).collect();
                self.accum(grads, a, &t);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].data;
                let t: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accum(grads, a, &t);
            }
            Op::Softplus(a) => {
                let xd = &self.nodes[a.0].data;
                let t: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, xv)| gv * sigmoid_stable(*xv))
                    .collect();
                self.accum(grads, a, &t);
            }
            Op::Prelu { x, slope } => {
                let xs = &self.nodes[x.0].shape;
                let c = if xs.len() >= 2 { xs[1] } else { xs[0] };
                let inner: usize = if xs.len() >= 2 { xs[2..].iter().product() } else { 1 };
                let xd = &self.nodes[x.0].data;
                let sl = &self.nodes[slope.0].data;
                if self.nodes[x.0].needs_grad {
                    let mut t = vec![0.0; xd.len()];
                    for (idx, tv) in t.iter_mut().enumerate() {
                        let ch = (idx / inner) % c;
                        *tv = if xd[idx] >= 0.0 { g[idx] } else { g[idx] * sl[ch] };
                    }
                    self.accum(grads, x, &t);
                }
                if self.nodes[slope.0].needs_grad {
                    let mut t = vec![0.0; c];
                    for (idx, &xv) in xd.iter().enumerate() {
                        if xv < 0.0 {
                            t[(idx / inner) % c] += g[idx] * xv;
                        }
                    }
                    self.accum(grads, slope, &t);
                }
            }
            Op::Dense { x, w, b } => {
                let (n, icnt) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1])
                };
                let o = self.nodes[w.0].shape[0];
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                if self.nodes[x.0].needs_grad {
                    let mut t = vec![0.0; n * icnt];
                    for r in 0..n {
                        for ocn in 0..o {
                            let gv = g[r * o + ocn];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = &wd[ocn * icnt..(ocn + 1) * icnt];
                            let tr = &mut t[r * icnt..(r + 1) * icnt];
                            for (tv, wv) in tr.iter_mut().zip(wr) {
                                *tv += gv * wv;
                            }
                        }
                    }
                    self.accum(grads, x, &t);
                }
                if self.nodes[w.0].needs_grad {
                    let mut t = vec![0.0; o * icnt];
                    for r in 0..n {
                        let xr = &xd[r * icnt..(r + 1) * icnt];
                        for ocn in 0..o {
                            let gv = g[r * o + ocn];
                            if gv == 0.0 {
                                continue;
                            }
                            let tr = &mut t[ocn * icnt..(ocn + 1) * icnt];
                            for (tv, xv) in tr.iter_mut().zip(xr) {
                                *tv += gv * xv;
                            }
                        }
                    }
                    self.accum(grads, w, &t);
                }
                if self.nodes[b.0].needs_grad {
                    let mut t = vec![0.0; o];
                    for r in 0..n {
                        for (ocn, tv) in t.iter_mut().enumerate() {
                            *tv += g[r * o + ocn];
                        }
                    }
                    self.accum(grads, b, &t);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(i, g, x, w, b, stride, pad, grads);
            }
            Op::TConv2d { x, w, b, stride, pad, .. } => {
                self.tconv2d_backward(i, g, x, w, b, stride, pad, grads);
            }
            Op::AvgPool { x, k } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut t = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[nc * oh * ow + oy * ow + ox] * inv;
                            for dy in 0..k {
                                let row = nc * h * w + (oy * k + dy) * w + ox * k;
                                for dx in 0..k {
                                    t[row + dx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, x, &t);
            }
            Op::GlobalAvgPool(x) => {
                let xs = &self.nodes[x.0].shape;
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f64;
                let mut t = vec![0.0; self.nodes[x.0].data.len()];
                for (nc, chunk) in t.chunks_mut(hw).enumerate() {
                    let gv = g[nc] * inv;
                    for tv in chunk.iter_mut() {
                        *tv = gv;
                    }
                }
                self.accum(grads, x, &t);
            }
            Op::ReduceMean(x) => {
                let n = self.nodes[x.0].data.len();
                let gv = g[0] / n as f64;
                let t = vec![gv; n];
                self.accum(grads, x, &t);
            }
            Op::ReduceSum(x) => {
                let n = self.nodes[x.0].data.len();
                let t = vec![g[0]; n];
                self.accum(grads, x, &t);
            }
            Op::SumLastDim(x) => {
                let xs = &self.nodes[x.0].shape;
                let k = xs[xs.len() - 1];
                let rows = self.nodes[x.0].data.len() / k;
                let mut t = vec![0.0; rows * k];
                for r in 0..rows {
                    for c in 0..k {
                        t[r * k + c] = g[r];
                    }
                }
                self.accum(grads, x, &t);
            }
            Op::Concat1(a, b) => {
                let (n, ca) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let cb = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let mut t = vec![0.0; n * ca];
                    for r in 0..n {
                        t[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accum(grads, a, &t);
                }
                if self.nodes[b.0].needs_grad {
                    let mut t = vec![0.0; n * cb];
                    for r in 0..n {
                        t[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accum(grads, b, &t);
                }
            }
            Op::Reshape(x) => self.accum(grads, x, g),
            Op::ChannelMul { x, s } => {
                let xs = &self.nodes[x.0].shape;
                let hw = xs[2] * xs[3];
                let xd = &self.nodes[x.0].data;
                let sd = &self.nodes[s.0].data;
                if self.nodes[x.0].needs_grad {
                    let mut t = vec![0.0; xd.len()];
                    for (nc, chunk) in t.chunks_mut(hw).enumerate() {
                        let gv = sd[nc];
                        for (tv, gg) in chunk.iter_mut().zip(&g[nc * hw..(nc + 1) * hw]) {
                            *tv = gg * gv;
                        }
                    }
                    self.accum(grads, x, &t);
                }
                if self.nodes[s.0].needs_grad {
                    let mut t = vec![0.0; sd.len()];
                    for (nc, tv) in t.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (gg, xv) in g[nc * hw..(nc + 1) * hw]
                            .iter()
                            .zip(&xd[nc * hw..(nc + 1) * hw])
                        {
                            acc += gg * xv;
                        }
                        *tv = acc;
                    }
                    self.accum(grads, s, &t);
                }
            }
            Op::ComplexScaleRows { x, h } => {
                if self.nodes[x.0].needs_grad {
                    let (n, k) = {
                        let s = &self.nodes[x.0].shape;
                        (s[0], s[1])
                    };
                    let hd = &self.nodes[h.0].data;
                    let mut t = vec![0.0; n * k];
                    for r in 0..n {
                        let (hr, hi) = (hd[r * 2], hd[r * 2 + 1]);
                        for p in 0..k / 2 {
                            let gre = g[r * k + 2 * p];
                            let gim = g[r * k + 2 * p + 1];
                            // adjoint of multiplication by h is multiplication by conj(h)
                            t[r * k + 2 * p] = hr * gre + hi * gim;
                            t[r * k + 2 * p + 1] = hr * gim - hi * gre;
                        }
                    }
                    self.accum(grads, x, &t);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        out: usize,
        g: &[f64],
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let os = &self.nodes[out].shape;
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let wv = &self.nodes[w.0].data;
        let xd = &self.nodes[x.0].data;

        if self.nodes[x.0].needs_grad {
            let mut t = vec![0.0; n * c * h * wd_];
            t.par_chunks_mut(c * h * wd_).enumerate().for_each(|(ni, tx)| {
                let gn = &g[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
                for o in 0..oc {
                    for ci in 0..c {
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = tap_range(oh, stride, ky, pad, h);
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = tap_range(ow, stride, kx, pad, wd_);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let weight = wv[((o * c + ci) * kh + ky) * kw + kx];
                                let xbase = ox_lo * stride + kx - pad;
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gn[(o * oh + oy) * ow..][..ow];
                                    let xrow = &mut tx[ci * h * wd_ + iy * wd_..][..wd_];
                                    axpy_into_strided(
                                        &mut xrow[xbase..],
                                        &grow[ox_lo..ox_hi],
                                        weight,
                                        stride,
                                    );
                                }
                            }
                        }
                    }
                }
            });
            self.accum(grads, x, &t);
        }
        if self.nodes[w.0].needs_grad {
            let mut t = vec![0.0; oc * c * kh * kw];
            t.par_chunks_mut(c * kh * kw).enumerate().for_each(|(o, tw)| {
                for ni in 0..n {
                    let gn = &g[ni * oc * oh * ow..];
                    let xn = &xd[ni * c * h * wd_..];
                    for ci in 0..c {
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = tap_range(oh, stride, ky, pad, h);
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = tap_range(ow, stride, kx, pad, wd_);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let xbase = ox_lo * stride + kx - pad;
                                let mut acc = 0.0;
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gn[(o * oh + oy) * ow..][..ow];
                                    let xrow = &xn[ci * h * wd_ + iy * wd_..][..wd_];
                                    acc += dot_strided(
                                        &grow[ox_lo..ox_hi],
                                        &xrow[xbase..],
                                        stride,
                                    );
                                }
                                tw[(ci * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            });
            self.accum(grads, w, &t);
        }
        if self.nodes[b.0].needs_grad {
            let mut t = vec![0.0; oc];
            for ni in 0..n {
                for (o, tv) in t.iter_mut().enumerate() {
                    let base = (ni * oc + o) * oh * ow;
                    for gv in &g[base..base + oh * ow] {
                        *tv += gv;
                    }
                }
            }
            self.accum(grads, b, &t);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tconv2d_backward(
        &self,
        out: usize,
        g: &[f64],
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let os = &self.nodes[out].shape;
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let wv = &self.nodes[w.0].data;
        let xd = &self.nodes[x.0].data;

        if self.nodes[x.0].needs_grad {
            // gather: dx = conv-style correlation of g with w
            let mut t = vec![0.0; n * c * h * wd_];
            t.par_chunks_mut(c * h * wd_).enumerate().for_each(|(ni, tx)| {
                let gn = &g[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
                for ci in 0..c {
                    for o in 0..oc {
                        for ky in 0..kh {
                            let (iy_lo, iy_hi) = tap_range(h, stride, ky, pad, oh);
                            for kx in 0..kw {
                                let (ix_lo, ix_hi) = tap_range(wd_, stride, kx, pad, ow);
                                if ix_lo >= ix_hi {
                                    continue;
                                }
                                let weight = wv[((ci * oc + o) * kh + ky) * kw + kx];
                                let ybase = ix_lo * stride + kx - pad;
                                for iy in iy_lo..iy_hi {
                                    let oy = iy * stride + ky - pad;
                                    let grow = &gn[(o * oh + oy) * ow..][..ow];
                                    let xrow = &mut tx[ci * h * wd_ + iy * wd_..][..wd_];
                                    axpy_strided(
                                        &mut xrow[ix_lo..ix_hi],
                                        &grow[ybase..],
                                        weight,
                                        stride,
                                    );
                                }
                            }
                        }
                    }
                }
            });
            self.accum(grads, x, &t);
        }
        if self.nodes[w.0].needs_grad {
            let mut t = vec![0.0; c * oc * kh * kw];
            t.par_chunks_mut(oc * kh * kw).enumerate().for_each(|(ci, tw)| {
                for ni in 0..n {
                    let gn = &g[ni * oc * oh * ow..];
                    let xn = &xd[ni * c * h * wd_..];
                    for o in 0..oc {
                        for ky in 0..kh {
                            let (iy_lo, iy_hi) = tap_range(h, stride, ky, pad, oh);
                            for kx in 0..kw {
                                let (ix_lo, ix_hi) = tap_range(wd_, stride, kx, pad, ow);
                                if ix_lo >= ix_hi {
                                    continue;
                                }
                                let ybase = ix_lo * stride + kx - pad;
                                let mut acc = 0.0;
                                for iy in iy_lo..iy_hi {
                                    let oy = iy * stride + ky - pad;
                                    let grow = &gn[(o * oh + oy) * ow..][..ow];
                                    let xrow = &xn[ci * h * wd_ + iy * wd_..][..wd_];
                                    acc += dot_strided(
                                        &xrow[ix_lo..ix_hi],
                                        &grow[ybase..],
                                        stride,
                                    );
                                }
                                tw[(o * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            });
            self.accum(grads, w, &t);
        }
        if self.nodes[b.0].needs_grad {
            let mut t = vec![0.0; oc];
            for ni in 0..n {
                for (o, tv) in t.iter_mut().enumerate() {
                    let base = (ni * oc + o) * oh * ow;
                    for gv in &g[base..base + oh * ow] {
                        *tv += gv;
                    }
                }
            }
            self.accum(grads, b, &t);
        }
    }
}

/// Max relative error between analytic gradients and central differences:
/// `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
///
/// `f` must build a scalar loss from the leaf placed on the tape. The
/// numeric side re-runs the forward pass only, so it is independent of the
/// backward implementation it checks.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    probe.requires_grad = true;

    let mut tape = Tape::new();
    let leaf = tape.leaf(&probe);
    let loss = f(&mut tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; probe.numel()]);

    let mut worst = 0.0f64;
    for i in 0..probe.numel() {
        let orig = probe.data[i];

        probe.data[i] = orig + eps;
        let mut tp = Tape::new();
        let lp = {
            let leaf = tp.leaf(&probe);
            f(&mut tp, leaf)?
        };
        let fp = tp.value(lp);

        probe.data[i] = orig - eps;
        let mut tm = Tape::new();
        let lm = {
            let leaf = tm.leaf(&probe);
            f(&mut tm, leaf)?
        };
        let fm = tm.value(lm);

        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn param(shape: &[usize], rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        // keep values away from the prelu kink and division by small numbers
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                let v = rng.next_f64() * 1.5 + 0.05;
                if rng.next_f64() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap().with_grad()
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![2]);
        let b = t.constant(vec![3.0, 4.0], vec![2]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn mul_identity() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.5, -2.5, 0.0], vec![3]);
        let ones = t.constant(vec![1.0; 3], vec![3]);
        let c = t.mul(a, ones).unwrap();
        assert_eq!(t.data(c), t.data(a));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 8], vec![2, 4]);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn add_backward_passes_upstream_through() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let b = t.constant(vec![3.0, 4.0], vec![2]);
        let c = t.add(a, b).unwrap();
        let m = t.reduce_sum(c).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn mean_of_known_values() {
        let mut t = Tape::new();
        let a = t.constant(vec![2.0, 4.0], vec![2]);
        let m = t.reduce_mean(a).unwrap();
        assert_eq!(t.value(m), 3.0);

        let z = t.constant(vec![0.0; 5], vec![5]);
        let mz = t.reduce_mean(z).unwrap();
        assert_eq!(t.value(mz), 0.0);
    }

    #[test]
    fn mean_backward_distributes() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let m = t.reduce_mean(a).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn grad_of_mean_square() {
        // loss = mean(x^2), x = [1, -2] -> grad = 2x/n = [1, -2]
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad());
        let sq = t.mul(a, a).unwrap();
        let m = t.reduce_mean(sq).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_loss_has_no_grads() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let c = t.mul_scalar(a, 0.0);
        let m = t.reduce_sum(c).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(t.backward(a), Err(Error::NotScalar(_))));

        let mut t2 = Tape::new();
        let c = t2.constant(vec![5.0], vec![1]);
        assert!(matches!(t2.backward(c), Err(Error::DetachedLoss)));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // backward(a*L1 + b*L2) == a*backward(L1) + b*backward(L2)
        let mut rng = Rng::new(11);
        let x = param(&[6], &mut rng);
        let (alpha, beta) = (0.7, -1.3);

        let grad_of = |mode: u8| -> Vec<f64> {
            let mut t = Tape::new();
            let leaf = t.leaf(&x);
            let sq = t.mul(leaf, leaf).unwrap();
            let l1 = t.reduce_mean(sq).unwrap();
            let sig = t.sigmoid(leaf);
            let l2 = t.reduce_sum(sig).unwrap();
            let loss = match mode {
                0 => {
                    let a = t.mul_scalar(l1, alpha);
                    let b = t.mul_scalar(l2, beta);
                    t.add(a, b).unwrap()
                }
                1 => l1,
                _ => l2,
            };
            let g = t.backward(loss).unwrap();
            g.get(leaf).unwrap().to_vec()
        };

        let combined = grad_of(0);
        let g1 = grad_of(1);
        let g2 = grad_of(2);
        for i in 0..combined.len() {
            let expect = alpha * g1[i] + beta * g2[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_mean_square_is_tight() {
        let mut rng = Rng::new(3);
        let x = param(&[8], &mut rng);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.reduce_mean(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        let mut rng = Rng::new(4);
        let x = param(&[8], &mut rng);
        let err = grad_check(|t, v| t.reduce_sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    /// Run grad_check for a case over 10 seeds; `shape` is the probed leaf.
    fn check10<F>(name: &str, shape: &[usize], tol: f64, mut build: F)
    where
        F: FnMut(&mut Tape, Var, &mut Rng) -> Result<Var>,
    {
        for seed in 0..10u64 {
            let mut rng = Rng::new(1000 + seed);
            let x = param(shape, &mut rng);
            let aux_rng = Rng::new(2000 + seed);
            let err = grad_check(|t, v| build(t, v, &mut aux_rng.clone()), &x, 1e-5).unwrap();
            assert!(err < tol, "{name} seed {seed}: rel err {err}");
        }
    }

    fn aux(shape: &[usize], rng: &mut Rng) -> Vec<f64> {
        let numel: usize = shape.iter().product();
        (0..numel).map(|_| rng.next_f64() * 1.4 + 0.3).collect()
    }

    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        check10("add_bcast", &[2, 3, 4, 4], 1e-4, |t, v, r| {
            let row = t.constant(aux(&[4], r), vec![4]);
            let s = t.add(v, row)?;
            let sq = t.mul(s, s)?;
            t.reduce_mean(sq)
        });
        check10("sub_mul", &[3, 5], 1e-4, |t, v, r| {
            let other = t.constant(aux(&[3, 5], r), vec![3, 5]);
            let d = t.sub(v, other)?;
            let m = t.mul(d, v)?;
            t.reduce_mean(m)
        });
        check10("div_bcast", &[2, 3, 4, 4], 1e-4, |t, v, r| {
            let denom = t.constant(aux(&[4], r), vec![4]);
            let d = t.div(v, denom)?;
            t.reduce_mean(d)
        });
        check10("div_by_leaf", &[4, 4], 1e-4, |t, v, r| {
            let numer = t.constant(aux(&[4, 4], r), vec![4, 4]);
            let sp = t.softplus(v);
            let sp = t.add_scalar(sp, 0.2);
            let d = t.div(numer, sp)?;
            t.reduce_mean(d)
        });
    }

    #[test]
    fn gradcheck_activations() {
        check10("sigmoid", &[3, 7], 1e-4, |t, v, _| {
            let s = t.sigmoid(v);
            t.reduce_mean(s)
        });
        check10("softplus_sqrt", &[3, 7], 1e-4, |t, v, _| {
            let sp = t.softplus(v);
            let sp = t.add_scalar(sp, 0.1);
            let r = t.sqrt(sp);
            t.reduce_mean(r)
        });
        check10("prelu_x", &[2, 3, 4, 4], 1e-4, |t, v, r| {
            let slope = t.constant(aux(&[3], r), vec![3]);
            let p = t.prelu(v, slope)?;
            let sq = t.mul(p, p)?;
            t.reduce_mean(sq)
        });
        check10("prelu_slope", &[3], 1e-4, |t, v, r| {
            let x = t.constant(
                aux(&[2, 3, 4, 4], r).iter().map(|u| u - 1.0).collect(),
                vec![2, 3, 4, 4],
            );
            let p = t.prelu(x, v)?;
            let sq = t.mul(p, p)?;
            t.reduce_mean(sq)
        });
    }

    #[test]
    fn gradcheck_dense() {
        check10("dense_x", &[4, 6], 1e-4, |t, v, r| {
            let w = t.constant(aux(&[5, 6], r), vec![5, 6]);
            let b = t.constant(aux(&[5], r), vec![5]);
            let d = t.dense(v, w, b)?;
            let sq = t.mul(d, d)?;
            t.reduce_mean(sq)
        });
        check10("dense_w", &[5, 6], 1e-4, |t, v, r| {
            let x = t.constant(aux(&[4, 6], r), vec![4, 6]);
            let b = t.constant(aux(&[5], r), vec![5]);
            let d = t.dense(x, v, b)?;
            let sq = t.mul(d, d)?;
            t.reduce_mean(sq)
        });
        check10("dense_b", &[5], 1e-4, |t, v, r| {
            let x = t.constant(aux(&[4, 6], r), vec![4, 6]);
            let w = t.constant(aux(&[5, 6], r), vec![5, 6]);
            let d = t.dense(x, w, v)?;
            let sq = t.mul(d, d)?;
            t.reduce_mean(sq)
        });
    }

    #[test]
    fn gradcheck_conv_family() {
        check10("conv2d_x", &[2, 3, 5, 5], 1e-4, |t, v, r| {
            let w = t.constant(aux(&[2, 3, 3, 3], r), vec![2, 3, 3, 3]);
            let b = t.constant(aux(&[2], r), vec![2]);
            let c = t.conv2d(v, w, b, 2, 1)?;
            let sq = t.mul(c, c)?;
            t.reduce_mean(sq)
        });
        check10("conv2d_w", &[2, 3, 3, 3], 1e-4, |t, v, r| {
            let x = t.constant(aux(&[2, 3, 5, 5], r), vec![2, 3, 5, 5]);
            let b = t.constant(aux(&[2], r), vec![2]);
            let c = t.conv2d(x, v, b, 1, 1)?;
            let sq = t.mul(c, c)?;
            t.reduce_mean(sq)
        });
        check10("tconv2d_x", &[2, 3, 4, 4], 1e-4, |t, v, r| {
            let w = t.constant(aux(&[3, 2, 3, 3], r), vec![3, 2, 3, 3]);
            let b = t.constant(aux(&[2], r), vec![2]);
            let c = t.tconv2d(v, w, b, 2, 1, 1)?;
            let sq = t.mul(c, c)?;
            t.reduce_mean(sq)
        });
        check10("tconv2d_w", &[3, 2, 3, 3], 1e-4, |t, v, r| {
            let x = t.constant(aux(&[2, 3, 4, 4], r), vec![2, 3, 4, 4]);
            let b = t.constant(aux(&[2], r), vec![2]);
            let c = t.tconv2d(x, v, b, 2, 1, 1)?;
            let sq = t.mul(c, c)?;
            t.reduce_mean(sq)
        });
    }

    #[test]
    fn gradcheck_pool_reduce_shape_ops() {
        check10("avg_pool", &[2, 3, 4, 4], 1e-4, |t, v, _| {
            let p = t.avg_pool(v, 2)?;
            let sq = t.mul(p, p)?;
            t.reduce_mean(sq)
        });
        check10("global_avg_pool", &[2, 3, 4, 4], 1e-4, |t, v, _| {
            let p = t.global_avg_pool(v)?;
            let sq = t.mul(p, p)?;
            t.reduce_mean(sq)
        });
        check10("channel_mul_gates", &[2, 3, 4, 4], 1e-4, |t, v, _| {
            let p = t.global_avg_pool(v)?;
            let s = t.sigmoid(p);
            let y = t.channel_mul(v, s)?;
            let sq = t.mul(y, y)?;
            t.reduce_mean(sq)
        });
        check10("sum_last_concat", &[4, 6], 1e-4, |t, v, _| {
            let s = t.sum_last_dim(v)?;
            let c = t.concat_cols(v, s)?;
            let sq = t.mul(c, c)?;
            t.reduce_mean(sq)
        });
        check10("reshape", &[2, 3, 4, 4], 1e-4, |t, v, _| {
            let rs = t.reshape(v, vec![2, 48])?;
            let sq = t.mul(rs, rs)?;
            t.reduce_mean(sq)
        });
        check10("complex_scale", &[4, 6], 1e-4, |t, v, r| {
            let h = t.constant(
                aux(&[4, 2], r).iter().map(|u| u - 1.0).collect(),
                vec![4, 2],
            );
            let y = t.complex_scale_rows(v, h)?;
            let sq = t.mul(y, y)?;
            t.reduce_mean(sq)
        });
    }

    #[test]
    fn gradcheck_composite_conv_prelu_mean() {
        // composite conv -> prelu -> mean pipeline vs finite differences
        for seed in 0..10u64 {
            let mut rng = Rng::new(40 + seed);
            let x = param(&[1, 2, 6, 6], &mut rng);
            let w = param(&[3, 2, 3, 3], &mut rng);
            let b = param(&[3], &mut rng);
            let slope = param(&[3], &mut rng);

            // check gradient w.r.t. the input
            let err = grad_check(
                |t, v| {
                    let wv = t.leaf(&w);
                    let bv = t.leaf(&b);
                    let sl = t.leaf(&slope);
                    let c = t.conv2d(v, wv, bv, 1, 1)?;
                    let p = t.prelu(c, sl)?;
                    let sq = t.mul(p, p)?;
                    t.reduce_mean(sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");

            // and w.r.t. the kernel
            let err_w = grad_check(
                |t, v| {
                    let xv = t.leaf(&x);
                    let bv = t.leaf(&b);
                    let sl = t.leaf(&slope);
                    let c = t.conv2d(xv, v, bv, 1, 1)?;
                    let p = t.prelu(c, sl)?;
                    let sq = t.mul(p, p)?;
                    t.reduce_mean(sq)
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(err_w < 1e-4, "seed {seed}: kernel rel err {err_w}");
        }
    }

    #[test]
    fn determinism_same_ops_same_bits() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut rng = Rng::new(77);
            let x = param(&[2, 3, 4, 4], &mut rng);
            let w = param(&[2, 3, 3, 3], &mut rng);
            let b = param(&[2], &mut rng);
            let mut t = Tape::new();
            let xv = t.leaf(&x);
            let wv = t.leaf(&w);
            let bv = t.leaf(&b);
            let c = t.conv2d(xv, wv, bv, 1, 1).unwrap();
            let sq = t.mul(c, c).unwrap();
            let loss = t.reduce_mean(sq).unwrap();
            let g = t.backward(loss).unwrap();
            (t.data(c).to_vec(), g.get(wv).unwrap().to_vec())
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }
}
