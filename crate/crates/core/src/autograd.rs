//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! referenced from a [`ParamStore`] without copying; only parameters marked
//! trainable receive gradients, and subgraphs that depend on nothing
//! trainable are skipped entirely during the backward sweep.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BroadcastRows(Var),
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    Diag(Var),
    Reshape(Var),
    Im2Col { x: Var, geom: ConvGeom },
    Im2Col1d { x: Var, k: usize, stride: usize },
    Upsample { x: Var, h: usize, w: usize, ry: Tensor<T>, rx: Tensor<T> },
    BceWithLogits { z: Var, target: Tensor<T> },
}

/// Spatial geometry of a 2-D convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    trainable: &'p [bool],
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    per_node: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.per_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let val = half * x * (T::one() + t);
    let du = c * (T::one() + three * a * x * x);
    let der = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (val, der)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Bilinear interpolation matrix (`out x inp`) with half-pixel centres.
pub fn bilinear_matrix<T: Scalar>(inp: usize, out: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[out, inp]);
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        let cur = m.at(o, i0);
        m.set(o, i0, cur + lit::<T>(1.0 - f));
        let cur = m.at(o, i1);
        m.set(o, i1, cur + lit::<T>(f));
    }
    m
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph with no parameter store; useful for pure tensor functions.
    pub fn detached() -> Self {
        Self { params: None, trainable: &[], nodes: Vec::new() }
    }

    /// `trainable[i]` marks parameter `i` as receiving gradients.
    pub fn new(params: &'p ParamStore<T>, trainable: &'p [bool]) -> Self {
        Self { params: Some(params), trainable, nodes: Vec::with_capacity(512) }
    }

    /// Forward-only graph over a parameter store.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::new(params, &[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param graph").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf (never receives a gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf; its gradient is available via [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let rg = self.trainable.get(id.0).copied().unwrap_or(false);
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let out = va.matmul(vb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        assert_eq!(k, vb.cols(), "matmul_nt {:?} x {:?}ᵀ", va.shape(), vb.shape());
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(m, k, n, va.data(), false, vb.data(), true, out.data_mut(), false);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{what}: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "div");
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Div(a, b), rg)
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let n = va.cols();
        assert_eq!(vb.len(), n, "add_row bias length");
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddRow(a, b), rg)
    }

    /// `a[m,n] + b[m]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, n) = (va.rows(), va.cols());
        assert_eq!(vb.len(), m, "add_col bias length");
        let mut out = va.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let y = vb.data()[r];
            for x in row.iter_mut() {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddCol(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), n);
        let nt = lit::<T>(n as f64);
        let mut xhat = vx.clone();
        let mut out = vx.clone();
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.data_mut()[r * n + c] = h;
                out.data_mut()[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(n) {
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(nrm);
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        assert!(start < end && end <= n);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&va.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::from_vec(&[m, w], data).expect("slice");
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let n = va.cols();
        assert!(start < end && end <= va.rows());
        let data = va.data()[start * n..end * n].to_vec();
        let out = Tensor::from_vec(&[end - start, n], data).expect("slice");
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let vp = self.value(p);
                assert_eq!(vp.rows(), m, "concat_cols row mismatch");
                data.extend_from_slice(&vp.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[m, total], data).expect("concat");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), n, "concat_rows col mismatch");
            m += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::from_vec(&[m, n], data).expect("concat");
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Repeats a single row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let va = self.value(a);
        let n = va.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(va.data());
        }
        let out = Tensor::from_vec(&[m, n], data).expect("broadcast");
        let rg = self.rg(&[a]);
        self.push(out, Op::BroadcastRows(a), rg)
    }

    /// Column-wise mean: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(&[1, n]);
        for row in va.data().chunks(n) {
            for (o, &x) in out.data_mut().iter_mut().zip(row) {
                *o += x;
            }
        }
        out.scale_in_place(T::one() / lit::<T>(m as f64));
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let data: Vec<T> = va.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let m = data.len();
        let out = Tensor::from_vec(&[m, 1], data).expect("sum");
        let rg = self.rg(&[a]);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::full(&[1, 1], s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / lit::<T>(n as f64))
    }

    /// Diagonal of a square matrix as a `[1, n]` row.
    pub fn diag(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.rows();
        assert_eq!(n, va.cols(), "diag of non-square matrix");
        let out = Tensor::from_fn(&[1, n], |i| va.at(i, i));
        let rg = self.rg(&[a]);
        self.push(out, Op::Diag(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape).expect("reshape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Lowers a `[C, H*W]` feature map to `[C*k*k, OH*OW]` patch columns.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), geom.channels * geom.height * geom.width, "im2col input");
        let (oh, ow) = geom.out_hw();
        let k = geom.kernel;
        let mut out = Tensor::zeros(&[geom.channels * k * k, oh * ow]);
        let src = vx.data();
        let dst = out.data_mut();
        for c in 0..geom.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            dst[row * oh * ow + oy * ow + ox] = src
                                [c * geom.height * geom.width + iy as usize * geom.width + ix as usize];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Im2Col { x, geom }, rg)
    }

    /// Lowers a `[C, L]` signal to `[C*k, OL]` strided windows (no padding).
    pub fn im2col_1d(&mut self, x: Var, k: usize, stride: usize) -> Var {
        let vx = self.value(x);
        let (c, l) = (vx.rows(), vx.cols());
        assert!(l >= k, "signal shorter than kernel");
        let ol = (l - k) / stride + 1;
        let mut out = Tensor::zeros(&[c * k, ol]);
        let dst = out.data_mut();
        for ci in 0..c {
            for t in 0..k {
                let row = ci * k + t;
                for o in 0..ol {
                    dst[row * ol + o] = vx.data()[ci * l + o * stride + t];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Im2Col1d { x, k, stride }, rg)
    }

    /// Bilinear resize of a `[C, h*w]` map to `[C, oh*ow]`.
    pub fn upsample_bilinear(&mut self, x: Var, h: usize, w: usize, oh: usize, ow: usize) -> Var {
        let ry: Tensor<T> = bilinear_matrix(h, oh);
        let rx: Tensor<T> = bilinear_matrix(w, ow);
        let vx = self.value(x);
        let c = vx.rows();
        assert_eq!(vx.cols(), h * w, "upsample input");
        let mut out = Tensor::zeros(&[c, oh * ow]);
        let mut tmp = vec![T::zero(); oh * w];
        for ch in 0..c {
            let xs = &vx.data()[ch * h * w..(ch + 1) * h * w];
            gemm_into(oh, h, w, ry.data(), false, xs, false, &mut tmp, false);
            let os = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
            gemm_into(oh, w, ow, &tmp, false, rx.data(), true, os, false);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample { x, h, w, ry, rx }, rg)
    }

    /// Mean binary cross-entropy of logits `z` against a fixed 0/1 target.
    pub fn bce_with_logits(&mut self, z: Var, target: Tensor<T>) -> Var {
        let vz = self.value(z);
        assert_eq!(vz.len(), target.len());
        let mut s = T::zero();
        for (&x, &y) in vz.data().iter().zip(target.data()) {
            s += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        }
        let mean = s / lit::<T>(vz.len() as f64);
        let rg = self.rg(&[z]);
        self.push(Tensor::full(&[1, 1], mean), Op::BceWithLogits { z, target }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        let mut pgrads = ParamGrads::new(n_params);
        if !self.nodes[loss.0].requires_grad {
            return Gradients { per_node: grads, params: pgrads };
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        pgrads.accumulate(*id, &g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { per_node: grads, params: pgrads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g.reshape(self.value(v).shape()).expect("grad shape")),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm_into(m, n, k, g.data(), false, vb.data(), true, da.data_mut(), false);
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm_into(k, m, n, va.data(), true, g.data(), false, db.data_mut(), false);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm_into(m, n, k, g.data(), false, vb.data(), false, da.data_mut(), false);
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(&[n, k]);
                    gemm_into(n, m, k, g.data(), true, va.data(), false, db.data_mut(), false);
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y);
                    self.acc(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(vb, |x, y| x / y));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let t = g.zip_map(out, |x, o| -x * o);
                    self.acc(grads, *b, t.zip_map(vb, |x, y| x / y));
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let n = g.cols();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::from_vec(&shape, db).expect("bias grad"));
                }
            }
            Op::AddCol(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let n = g.cols();
                    let db: Vec<T> = g.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
                    let shape = self.value(*b).shape().to_vec();
                    self.acc(grads, *b, Tensor::from_vec(&shape, db).expect("bias grad"));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |x, v| x * gelu_parts(v).1);
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |x, y| x * y * (T::one() - y));
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in drow.iter_mut().zip(yrow) {
                        *x = y * (*x - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let s: T = drow.iter().copied().sum();
                    for (x, &y) in drow.iter_mut().zip(yrow) {
                        *x -= y.exp() * s;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = xhat.cols();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                            db[c] += grow[c];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    if self.wants(*gamma) {
                        self.acc(grads, *gamma, Tensor::from_vec(&gs, dg).expect("ln"));
                    }
                    if self.wants(*beta) {
                        self.acc(grads, *beta, Tensor::from_vec(&bs, db).expect("ln"));
                    }
                }
                if self.wants(*x) {
                    let nt = lit::<T>(n as f64);
                    let mut dx = Tensor::zeros(xhat.shape());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g.data()[r * n..(r + 1) * n];
                        let hrow = &xhat.data()[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            m1 += dh;
                            m2 += dh * hrow[c];
                        }
                        m1 /= nt;
                        m2 /= nt;
                        let drow = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            drow[c] = rs * (dh - m1 - hrow[c] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = out.cols();
                let mut d = g.clone();
                for ((drow, yrow), &nrm) in
                    d.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(norms)
                {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (v, &y) in drow.iter_mut().zip(yrow) {
                        *v = (*v - y * dot) / nrm;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let w = g.cols();
                let mut d = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    d.data_mut()[r * n + start..r * n + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut d = Tensor::zeros(&[va.rows(), n]);
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&[m, w], d).expect("concat grad"));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let d = g.data()[off * n..(off + rows) * n].to_vec();
                        self.acc(grads, p, Tensor::from_vec(&[rows, n], d).expect("concat grad"));
                    }
                    off += rows;
                }
            }
            Op::BroadcastRows(a) => {
                let n = g.cols();
                let mut d = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (x, &y) in d.iter_mut().zip(row) {
                        *x += y;
                    }
                }
                self.acc(grads, *a, Tensor::from_vec(&[1, n], d).expect("bcast grad"));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let inv = T::one() / lit::<T>(m as f64);
                let mut d = Tensor::zeros(&[m, n]);
                for row in d.data_mut().chunks_mut(n) {
                    for (x, &y) in row.iter_mut().zip(g.data()) {
                        *x = y * inv;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let d = Tensor::from_fn(&[m, n], |i| g.data()[i / n]);
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Tensor::full(self.value(*a).shape(), g.data()[0]);
                self.acc(grads, *a, d);
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut d = Tensor::zeros(&[n, n]);
                for k in 0..n {
                    d.set(k, k, g.data()[k]);
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => self.acc(grads, *a, g.clone()),
            Op::Im2Col { x, geom } => {
                let (oh, ow) = geom.out_hw();
                let k = geom.kernel;
                let mut d = Tensor::zeros(&[geom.channels, geom.height * geom.width]);
                let dst = d.data_mut();
                for c in 0..geom.channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = (c * k + ky) * k + kx;
                            for oy in 0..oh {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                if iy < 0 || iy >= geom.height as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if ix < 0 || ix >= geom.width as isize {
                                        continue;
                                    }
                                    dst[c * geom.height * geom.width
                                        + iy as usize * geom.width
                                        + ix as usize] += g.data()[row * oh * ow + oy * ow + ox];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Im2Col1d { x, k, stride } => {
                let vx = self.value(*x);
                let (c, l) = (vx.rows(), vx.cols());
                let ol = g.cols();
                let mut d = Tensor::zeros(&[c, l]);
                for ci in 0..c {
                    for t in 0..*k {
                        let row = ci * k + t;
                        for o in 0..ol {
                            d.data_mut()[ci * l + o * stride + t] += g.data()[row * ol + o];
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Upsample { x, h, w, ry, rx } => {
                let (h, w) = (*h, *w);
                let (oh, ow) = (ry.rows(), rx.rows());
                let c = g.rows();
                let mut d = Tensor::zeros(&[c, h * w]);
                let mut tmp = vec![T::zero(); h * ow];
                for ch in 0..c {
                    let gs = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                    // Ryᵀ · G · Rx
                    gemm_into(h, oh, ow, ry.data(), true, gs, false, &mut tmp, false);
                    let ds = &mut d.data_mut()[ch * h * w..(ch + 1) * h * w];
                    gemm_into(h, ow, w, &tmp, false, rx.data(), false, ds, false);
                }
                self.acc(grads, *x, d);
            }
            Op::BceWithLogits { z, target } => {
                let vz = self.value(*z);
                let s = g.data()[0] / lit::<T>(vz.len() as f64);
                let d = vz.zip_map(target, |x, y| (sigmoid(x) - y) * s);
                self.acc(grads, *z, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m: Tensor<f64> = bilinear_matrix(8, 64);
        for r in 0..64 {
            let s: f64 = m.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let m: Tensor<f64> = bilinear_matrix(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m.at(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn frozen_subgraph_gets_no_gradient() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(Tensor::ones(&[2, 2]));
        let b = g.input(Tensor::ones(&[2, 2]));
        let c = g.mul(a, b);
        let l = g.sum_all(c);
        let grads = g.backward(l);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn softmax_rows_normalised() {
        let mut g = Graph::<f64>::detached();
        let a = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3));
        let s = g.softmax_rows(a);
        for r in 0..3 {
            let t: f64 = g.value(s).row(r).iter().sum();
            assert!((t - 1.0).abs() < 1e-12);
        }
    }
}
