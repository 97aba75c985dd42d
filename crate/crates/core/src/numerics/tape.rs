//! Reverse-mode tape over a fixed set of operations.
//!
//! Each operation records the values its backward pass needs and has a
//! hand-written adjoint in [`Tape::backward`]. There is no general graph
//! machinery beyond the linear record of nodes.

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu6,
    Softplus,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu6 => x.max(T::zero()).min(T::of(6.0)),
            Activation::Softplus => {
                if x > T::of(20.0) {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu6 => {
                if x > T::zero() && x < T::of(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Unary(Var, Activation),
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Depthwise {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GaussianPriors {
        params: Var,
    },
    Blur {
        map: Var,
        log_sigma: Var,
        kernel: Vec<T>,
        dkernel: Vec<T>,
    },
    NormalizeSum {
        x: Var,
        total: T,
    },
    Kld {
        target: Vec<T>,
        pred: Var,
        eps: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalization).
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable input; gradients accumulate into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.binary(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.binary(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.binary(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(dim_err("add_const", self.shape(x), c.shape()));
        }
        let data = self.val(x).iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::AddConst(x), &[x]))
    }

    /// `x ⊙ c` for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(dim_err("mul_const", self.shape(x), c.shape()));
        }
        let data = self.val(x).iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::MulConst(x, c.data().to_vec()), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Activation) -> Var {
        let v = self.value(x).map(|a| f.apply(a));
        self.push(v, Op::Unary(x, f), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Tanh)
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Relu6)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Softplus)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let v = Tensor::new(&[c, r], kernels::transpose(self.val(x), r, c))?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.val(a), self.val(b), &mut out, m, k, n);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.val(a), self.val(b), &mut out, m, k, n);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `y[n,o] = Σ_d w[o,d]·x[n,d] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.matrix("linear", x)?;
        let (d_out, d_in2) = self.matrix("linear", w)?;
        if d_in != d_in2 {
            return Err(dim_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(dim_err("linear", self.shape(w), self.shape(b)));
            }
            let bias = self.val(b);
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_nt(self.val(x), self.val(w), &mut out, n, d_in, d_out);
        let v = Tensor::new(&[n, d_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &parents))
    }

    /// Cross-correlation of a `C×H×W` input with a `Cout×C×k×k` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        if ks[2] % 2 == 0 {
            return Err(Error::config(format!("conv2d kernel size {} is not odd", ks[2])));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[2], stride, pad).ok_or_else(|| {
            Error::config(format!(
                "conv2d produces an empty output for input {xs:?}, kernel {ks:?}, padding {pad}"
            ))
        })?;
        let c_out = ks[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err("conv2d", &ks, self.shape(b)));
            }
        }
        let p = geom.positions();
        let pointwise = geom.k == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            None
        } else {
            Some(kernels::im2col(self.val(x), &geom))
        };
        let mut out = vec![T::zero(); c_out * p];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(p).zip(self.val(b)) {
                row.fill(bv);
            }
        }
        {
            let src = cols.as_deref().unwrap_or_else(|| self.val(x));
            kernels::matmul(self.val(k), src, &mut out, c_out, geom.cols_rows(), p);
        }
        let v = Tensor::new(&[c_out, geom.oh, geom.ow], out)?;
        let mut parents = vec![x, k];
        parents.extend(b);
        let cols = if self.rg(k) { cols } else { None };
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cols,
            },
            &parents,
        ))
    }

    /// Per-channel cross-correlation with a `C×1×k×k` kernel, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] || ks[1] != 1 || ks[2] != ks[3] {
            return Err(dim_err("depthwise_conv2d", &xs, &ks));
        }
        if ks[2] % 2 == 0 {
            return Err(Error::config(format!("depthwise kernel size {} is not odd", ks[2])));
        }
        let geom = ConvGeom::new(1, xs[1], xs[2], ks[2], 1, pad)
            .ok_or_else(|| Error::config("depthwise_conv2d produces an empty output"))?;
        let c = xs[0];
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(dim_err("depthwise_conv2d", &ks, self.shape(b)));
            }
        }
        let (h, w, kk) = (xs[1], xs[2], geom.k);
        let (oh, ow) = (geom.oh, geom.ow);
        let xv = self.val(x);
        let kv = self.val(k);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let bias = b.map(|b| self.val(b)[ch]).unwrap_or(T::zero());
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ky in 0..kk {
                        let y = (oy + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kk {
                            let xx = (ox + kx) as isize - pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += kv[(ch * kk + ky) * kk + kx]
                                * xv[(ch * h + y as usize) * w + xx as usize];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let v = Tensor::new(&[c, oh, ow], out)?;
        let mut parents = vec![x, k];
        parents.extend(b);
        Ok(self.push(v, Op::Depthwise { x, k, b, geom }, &parents))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap_or(&1);
        let mut out = self.val(x).to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::new(&shape, out).expect("same shape");
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization of an `N×D` input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, d) = self.matrix("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.val(x);
        let (g, bt) = (self.val(gamma), self.val(beta));
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        let df = T::of(d as f64);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let v = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn nchw(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(dim_err(op, s, self.shape(gamma)));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Batch normalization of an `N×C×H×W` input using the batch's own
    /// per-channel statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.nchw("batch_norm", x, gamma, beta)?;
        let count = n * hw;
        let xv = self.val(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s / T::of(count as f64);
            let mut q = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q / T::of(count as f64);
        }
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let v = self.normalize_channels(x, gamma, beta, &mean, inv, true);
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _) = self.nchw("batch_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err("batch_norm", &[c], &[mean.len(), var.len()]));
        }
        let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        Ok(self.normalize_channels(x, gamma, beta, mean, inv, false))
    }

    fn normalize_channels(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let xv = self.val(x);
        let (g, bt) = (self.val(gamma), self.val(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + bt[ch];
                }
            }
        }
        let v = Tensor::new(&shape, out).expect("same shape");
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Nearest-neighbour upsampling of a `C×H×W` input.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::config("upsample factor must be at least 1"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err("upsample_nearest", &s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.val(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ch * oh + oy) * ow + ox] = xv[(ch * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let v = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.val(p)[o * block..(o + 1) * block]);
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err("slice", &s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut shape = s.clone();
        shape[axis] = len;
        let xv = self.val(x);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    /// Renders `P` anisotropic Gaussians from a `P×5` parameter table
    /// `(mu_x, mu_y, log_sigma_x, log_sigma_y, log_amplitude)` onto an `H×W` grid.
    pub fn gaussian_priors(&mut self, params: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(params).to_vec();
        if s.len() != 2 || s[1] != 5 {
            return Err(dim_err("gaussian_priors", &s, &[0, 5]));
        }
        let p = s[0];
        let pv = self.val(params);
        let mut out = vec![T::zero(); p * h * w];
        for k in 0..p {
            let g = PriorGeom::new(&pv[k * 5..k * 5 + 5]);
            for v in 0..h {
                for u in 0..w {
                    out[(k * h + v) * w + u] = g.eval(u, v, h, w).0;
                }
            }
        }
        let v = Tensor::new(&[p, h, w], out)?;
        Ok(self.push(v, Op::GaussianPriors { params }, &[params]))
    }

    /// Separable Gaussian blur of an `H×W` map with `σ = exp(log_sigma)`,
    /// reflective borders, kernel truncated at ±3σ and normalized.
    pub fn gaussian_blur(&mut self, map: Var, log_sigma: Var) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 2 || self.value(log_sigma).len() != 1 {
            return Err(dim_err("gaussian_blur", &s, self.shape(log_sigma)));
        }
        let sigma = self.val(log_sigma)[0].exp();
        let (kernel, dkernel) = gaussian_kernel(sigma);
        let (h, w) = (s[0], s[1]);
        let tmp = blur_pass(self.val(map), h, w, &kernel, Axis::Cols);
        let out = blur_pass(&tmp, h, w, &kernel, Axis::Rows);
        let v = Tensor::new(&s, out)?;
        Ok(self.push(
            v,
            Op::Blur {
                map,
                log_sigma,
                kernel,
                dkernel,
            },
            &[map, log_sigma],
        ))
    }

    /// `x / Σx`.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        if !(total.abs() > T::zero()) || !total.is_finite() {
            return Err(Error::NonFinite(format!("normalize_sum total {total}")));
        }
        let v = self.value(x).map(|a| a / total);
        Ok(self.push(v, Op::NormalizeSum { x, total }, &[x]))
    }

    /// `Σ S log(ε + S / (ε + Ŝ))` with `S` a constant target and `Ŝ = pred`.
    pub fn kld(&mut self, target: &Tensor<T>, pred: Var, eps: T) -> Result<Var> {
        if target.shape() != self.shape(pred) {
            return Err(dim_err("kld", target.shape(), self.shape(pred)));
        }
        let loss = target
            .data()
            .iter()
            .zip(self.val(pred))
            .map(|(&s, &p)| s * (eps + s / (eps + p)).ln())
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kld {
                target: target.data().to_vec(),
                pred,
                eps,
            },
            &[pred],
        ))
    }

    /// Runs the adjoint sweep from `root`, seeding its gradient with ones.
    /// Gradients from any previous sweep are discarded.
    pub fn backward(&mut self, root: Var) {
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(root) {
            return;
        }
        self.grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.adjoint(i, g.data());
            self.grads[i] = Some(g);
            for (v, d) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(&d) {
                            *a += b;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::new(self.nodes[v.0].value.shape(), d).expect("grad"))
                    }
                }
            }
        }
    }

    fn adjoint(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()));
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::MulConst(x, c) => out.push((*x, g.iter().zip(c).map(|(&g, &c)| g * c).collect())),
            Op::Scale(x, s) => out.push((*x, g.iter().map(|&g| g * *s).collect())),
            Op::Unary(x, f) => {
                let xv = self.val(*x);
                let d = g
                    .iter()
                    .zip(xv.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * f.derivative(x, y))
                    .collect();
                out.push((*x, d));
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; self.val(*x).len()])),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                out.push((*x, kernels::transpose(g, s[1], s[0])));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt(g, self.val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn(self.val(*a), g, &mut db, k, m, n);
                    out.push((*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul(g, self.val(*b), &mut da, m, n, k);
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::matmul_tn(g, self.val(*a), &mut db, n, m, k);
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    kernels::matmul(g, self.val(*w), &mut dx, n, d_out, d_in);
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    kernels::matmul_tn(g, self.val(*x), &mut dw, d_out, n, d_in);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    out.push((*b, column_sums(g, d_out)));
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                geom,
                cols,
            } => {
                let c_out = self.shape(*k)[0];
                let (rows, p) = (geom.cols_rows(), geom.positions());
                if self.rg(*k) {
                    let src = cols.as_deref().unwrap_or_else(|| self.val(*x));
                    let mut dk = vec![T::zero(); c_out * rows];
                    kernels::matmul_nt(g, src, &mut dk, c_out, p, rows);
                    out.push((*k, dk));
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * p];
                    kernels::matmul_tn(self.val(*k), g, &mut dcols, rows, c_out, p);
                    if cols.is_none() && geom.k == 1 && geom.stride == 1 && geom.pad == 0 {
                        out.push((*x, dcols));
                    } else {
                        let mut dx = vec![T::zero(); geom.c * geom.h * geom.w];
                        kernels::col2im(&dcols, geom, &mut dx);
                        out.push((*x, dx));
                    }
                }
                if let Some(b) = b {
                    out.push((*b, g.chunks(p).map(|r| r.iter().copied().sum()).collect()));
                }
            }
            Op::Depthwise { x, k, b, geom } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (kk, oh, ow, pad) = (geom.k, geom.oh, geom.ow, geom.pad);
                let (xv, kv) = (self.val(*x), self.val(*k));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(ch * oh + oy) * ow + ox];
                            for ky in 0..kk {
                                let yy = (oy + ky) as isize - pad as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kk {
                                    let xx = (ox + kx) as isize - pad as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + yy as usize) * w + xx as usize;
                                    let ki = (ch * kk + ky) * kk + kx;
                                    dx[xi] += go * kv[ki];
                                    dk[ki] += go * xv[xi];
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*k, dk));
                if let Some(b) = b {
                    out.push((*b, g.chunks(oh * ow).map(|r| r.iter().copied().sum()).collect()));
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(k).zip(y.chunks(k)).zip(dx.chunks_mut(k)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*x)[1];
                let gm = self.val(*gamma);
                let df = T::of(d as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); d];
                for (r, ((gr, xr), dr)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                        dg[j] += gr[j] * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        dr[j] = inv_std[r] / df * (df * dxh - s1 - xr[j] * s2);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, column_sums(g, d)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gm = self.val(*gamma);
                let m = T::of((n * hw) as f64);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dg[ch] += g[i] * xhat[i];
                            db[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                gm[ch] * inv_std[ch] / m * (m * g[i] - db[ch] - xhat[i] * dg[ch])
                            } else {
                                gm[ch] * inv_std[ch] * g[i]
                            };
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(ch * h + oy / factor) * w + ox / factor] +=
                                g[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let mut grads: Vec<Vec<T>> =
                    parts.iter().map(|p| Vec::with_capacity(self.val(*p).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let block = self.shape(*p)[*axis] * inner;
                        grads[pi].extend_from_slice(&g[off..off + block]);
                        off += block;
                    }
                }
                out.extend(parts.iter().copied().zip(grads));
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[*axis + 1..]);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::GaussianPriors { params } => {
                let s = node.value.shape();
                let (p, h, w) = (s[0], s[1], s[2]);
                let pv = self.val(*params);
                let mut dp = vec![T::zero(); p * 5];
                for k in 0..p {
                    let geom = PriorGeom::new(&pv[k * 5..k * 5 + 5]);
                    for v in 0..h {
                        for u in 0..w {
                            let (_, d) = geom.eval(u, v, h, w);
                            let go = g[(k * h + v) * w + u];
                            for (j, dj) in d.iter().enumerate() {
                                dp[k * 5 + j] += go * *dj;
                            }
                        }
                    }
                }
                out.push((*params, dp));
            }
            Op::Blur {
                map,
                log_sigma,
                kernel,
                dkernel,
            } => {
                let s = node.value.shape();
                let (h, w) = (s[0], s[1]);
                if self.rg(*map) {
                    let t = blur_pass_adjoint(g, h, w, kernel, Axis::Rows);
                    out.push((*map, blur_pass_adjoint(&t, h, w, kernel, Axis::Cols)));
                }
                if self.rg(*log_sigma) {
                    let m = self.val(*map);
                    let sigma = self.val(*log_sigma)[0].exp();
                    let h1 = blur_pass(m, h, w, kernel, Axis::Cols);
                    let dh1 = blur_pass(m, h, w, dkernel, Axis::Cols);
                    let a = blur_pass(&h1, h, w, dkernel, Axis::Rows);
                    let b = blur_pass(&dh1, h, w, kernel, Axis::Rows);
                    let dsig: T = g
                        .iter()
                        .zip(a.iter().zip(&b))
                        .map(|(&g, (&a, &b))| g * (a + b))
                        .sum();
                    out.push((*log_sigma, vec![dsig * sigma]));
                }
            }
            Op::NormalizeSum { x, total } => {
                let s = kernels::dot(g, y);
                out.push((*x, g.iter().map(|&gi| (gi - s) / *total).collect()));
            }
            Op::Kld { target, pred, eps } => {
                let pv = self.val(*pred);
                let d = target
                    .iter()
                    .zip(pv)
                    .map(|(&s, &p)| {
                        let q = *eps + p;
                        let inner = *eps + s / q;
                        g[0] * s * (-(s / (q * q))) / inner
                    })
                    .collect();
                out.push((*pred, d));
            }
        }
        out
    }
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

struct PriorGeom<T> {
    mu_x: T,
    mu_y: T,
    sx: T,
    sy: T,
    amp: T,
}

impl<T: Scalar> PriorGeom<T> {
    fn new(p: &[T]) -> Self {
        PriorGeom {
            mu_x: p[0],
            mu_y: p[1],
            sx: p[2].exp(),
            sy: p[3].exp(),
            amp: p[4].exp(),
        }
    }

    /// Value at column `u`, row `v`, and its derivative with respect to the
    /// five raw parameters.
    fn eval(&self, u: usize, v: usize, h: usize, w: usize) -> (T, [T; 5]) {
        let dx = T::of(u as f64 / w as f64) - self.mu_x;
        let dy = T::of(v as f64 / h as f64) - self.mu_y;
        let (sx2, sy2) = (self.sx * self.sx, self.sy * self.sy);
        let two = T::of(2.0);
        let val = self.amp * (-(dx * dx / (two * sx2) + dy * dy / (two * sy2))).exp();
        (
            val,
            [
                val * dx / sx2,
                val * dy / sy2,
                val * dx * dx / sx2,
                val * dy * dy / sy2,
                val,
            ],
        )
    }
}

/// Normalized, ±3σ-truncated Gaussian taps (odd length, at least 3) and
/// their derivative with respect to σ.
pub fn gaussian_kernel<T: Scalar>(sigma: T) -> (Vec<T>, Vec<T>) {
    let reach = T::of(3.0) * sigma;
    let radius = (reach.ceil().as_f64().max(1.0)).min(4096.0) as isize;
    let taps: Vec<T> = (-radius..=radius).map(|i| T::of(i as f64)).collect();
    // The outermost tap, between 3σ and 3σ + 1, fades in along a smoothstep
    // so the kernel stays differentiable in σ when 3σ crosses an integer.
    let window = |i: T| -> (T, T) {
        let t = reach + T::one() - i.abs();
        if t >= T::one() {
            (T::one(), T::zero())
        } else if t <= T::zero() {
            (T::zero(), T::zero())
        } else {
            let (three, two, six) = (T::of(3.0), T::of(2.0), T::of(6.0));
            (three * t * t - two * t * t * t, three * six * t * (T::one() - t))
        }
    };
    let mut g = Vec::with_capacity(taps.len());
    let mut dg = Vec::with_capacity(taps.len());
    for &i in &taps {
        let e = (-(i * i) / (T::of(2.0) * sigma * sigma)).exp();
        let (win, dwin) = window(i);
        g.push(e * win);
        dg.push(e * i * i / (sigma * sigma * sigma) * win + e * dwin);
    }
    let z: T = g.iter().copied().sum();
    let dz: T = dg.iter().copied().sum();
    let k: Vec<T> = g.iter().map(|&v| v / z).collect();
    let dk = dg
        .iter()
        .zip(&k)
        .map(|(&d, &kv)| (d - kv * dz) / z)
        .collect();
    (k, dk)
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

fn blur_pass<T: Scalar>(src: &[T], h: usize, w: usize, kernel: &[T], axis: Axis) -> Vec<T> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                let off = t as isize - r;
                let idx = match axis {
                    Axis::Cols => y * w + kernels::reflect(x as isize + off, w),
                    Axis::Rows => kernels::reflect(y as isize + off, h) * w + x,
                };
                acc += kv * src[idx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn blur_pass_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, kernel: &[T], axis: Axis) -> Vec<T> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let go = g[y * w + x];
            for (t, &kv) in kernel.iter().enumerate() {
                let off = t as isize - r;
                let idx = match axis {
                    Axis::Cols => y * w + kernels::reflect(x as isize + off, w),
                    Axis::Rows => kernels::reflect(y as isize + off, h) * w + x,
                };
                out[idx] += kv * go;
            }
        }
    }
    out
}
