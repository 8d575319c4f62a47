//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value that takes part in a training run. Its first
//! nodes are *persistent*: parameters and buffers (batch-norm running
//! statistics) registered before any computation. Everything recorded after
//! them is *transient* and is dropped by [`Graph::reset`], which starts a new
//! step while keeping parameter values and optimizer-visible gradients.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; [`Graph::backward`] walks it once in reverse and sums
//! gradient contributions when a value feeds several consumers.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2dOpts {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormOpts {
    /// Use batch statistics and update the running estimates.
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormOpts {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn train() -> Self {
        Self {
            training: true,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::train()
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        adj: ConvGeom,
    },
    Relu {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Reshape {
        x: Var,
    },
    Log {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Pick {
        x: Var,
        labels: Vec<usize>,
    },
    RowL2Normalize {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    decay: bool,
}

/// Computation tape plus the persistent tensors of one run.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    persistent: usize,
    backward_done: bool,
    recording: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], expected: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        expected: expected.into(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            persistent: 0,
            backward_done: false,
            recording: true,
        }
    }

    fn add_persistent(
        &mut self,
        mut value: Tensor<T>,
        requires_grad: bool,
        decay: bool,
    ) -> Result<Var> {
        if self.nodes.len() != self.persistent {
            return Err(TensorError::PersistentAfterTransient);
        }
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            decay,
        });
        self.persistent += 1;
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable tensor. `decay` marks it for weight decay.
    pub fn add_param(&mut self, value: Tensor<T>, decay: bool) -> Result<Var> {
        self.add_persistent(value, true, decay)
    }

    /// Registers a non-trainable persistent tensor (e.g. running statistics).
    pub fn add_buffer(&mut self, value: Tensor<T>) -> Result<Var> {
        self.add_persistent(value, false, false)
    }

    /// Transient leaf; keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        let mut value = value;
        value.set_requires_grad(requires_grad);
        self.push(value, Op::Leaf)
    }

    /// Transient leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Drops transient nodes and persistent gradients, starting a new step.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.persistent);
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn persistent_len(&self) -> usize {
        self.persistent
    }

    pub fn persistent_vars(&self) -> impl Iterator<Item = Var> {
        (0..self.persistent).map(Var)
    }

    pub fn is_persistent(&self, v: Var) -> bool {
        v.0 < self.persistent
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Mutable access to a persistent tensor (optimizer updates, loading).
    pub fn value_mut(&mut self, v: Var) -> Result<&mut Tensor<T>> {
        if !self.is_persistent(v) {
            return Err(TensorError::NotPersistent(v.0));
        }
        Ok(&mut self.nodes[v.0].value)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Freezes or unfreezes a persistent tensor.
    pub fn set_requires_grad(&mut self, v: Var, requires_grad: bool) -> Result<()> {
        self.value_mut(v)?.set_requires_grad(requires_grad);
        Ok(())
    }

    pub fn decays(&self, v: Var) -> bool {
        self.nodes[v.0].decay
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Toggles gradient recording; returns the previous setting.
    pub fn set_recording(&mut self, recording: bool) -> bool {
        std::mem::replace(&mut self.recording, recording)
    }

    /// Runs `f` without recording backward information.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.set_recording(false);
        let out = f(self);
        self.set_recording(prev);
        out
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            decay: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        let requires_grad = self.needs_grad(inputs);
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, op))
    }

    // ---------------------------------------------------------------- ops

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        self.push_op(vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid("transpose", s, "rank 2"));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_buf(self.data(x), m, n);
        self.push_op(vec![n, m], out, Op::Transpose { x }, &[x])
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op_name, sa, sb));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("add", a, b, |x, y| x + y)?;
        self.push_op(shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("sub", a, b, |x, y| x - y)?;
        self.push_op(shape, out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("mul", a, b, |x, y| x * y)?;
        self.push_op(shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Adds a per-channel bias `[c]` along axis 1 of `[n, c, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let shape = sx.to_vec();
        self.push_op(shape, out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Cross-correlation of `[n, c_in, h, w]` with weights `[c_out, c_in/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, opts: Conv2dOpts) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv2d", sx, sw));
        }
        let groups = opts.groups.max(1);
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, cig, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if opts.stride == 0
            || c_in % groups != 0
            || c_out % groups != 0
            || cig != c_in / groups
            || h + 2 * opts.pad < kh
            || wd + 2 * opts.pad < kw
        {
            return Err(mismatch("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.pad,
            groups,
            oh: (h + 2 * opts.pad - kh) / opts.stride + 1,
            ow: (wd + 2 * opts.pad - kw) / opts.stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let keep_cols = self.needs_grad(&[w]);
        let cols = if keep_cols { cols } else { Vec::new() };
        self.push_op(
            vec![n, c_out, geom.oh, geom.ow],
            out,
            Op::Conv2d { x, w, geom, cols },
            &[x, w],
        )
    }

    /// Transposed convolution of `[n, c_in, h, w]` with weights `[c_in, c_out, kh, kw]`;
    /// output side is `(h-1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, opts: ConvTranspose2dOpts) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || opts.stride == 0 {
            return Err(mismatch("conv_transpose2d", sx, sw));
        }
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = ((h as isize - 1) * opts.stride as isize - 2 * opts.pad as isize + kh as isize)
            .max(0) as usize;
        let ow = ((wd as isize - 1) * opts.stride as isize - 2 * opts.pad as isize + kw as isize)
            .max(0) as usize;
        if oh == 0 || ow == 0 || h == 0 || wd == 0 {
            return Err(mismatch("conv_transpose2d", sx, sw));
        }
        let adj = ConvGeom {
            n,
            c_in: c_out,
            h: oh,
            w: ow,
            c_out: c_in,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.pad,
            groups: 1,
            oh: h,
            ow: wd,
        };
        let out = kernels::conv_transpose2d_forward(self.data(x), self.data(w), &adj);
        self.push_op(
            vec![n, c_out, oh, ow],
            out,
            Op::ConvTranspose2d { x, w, adj },
            &[x, w],
        )
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Relu { x }, &[x])
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(invalid(
                "maxpool2d",
                s,
                format!("[n, c, h, w] with h, w >= {kernel}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax, oh, ow) =
            kernels::maxpool2d_forward(self.data(x), n * c, h, w, kernel, stride);
        self.push_op(vec![n, c, oh, ow], out, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// `[n, c, h, w]` → `[n, c]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(invalid("global_avgpool", s, "[n, c, h, w]"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::lit(hw as f64);
        let out = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push_op(vec![n, c], out, Op::GlobalAvgPool { x }, &[x])
    }

    /// Per-channel batch normalization of `[n, c, h, w]`.
    ///
    /// In training mode batch statistics are used and the running estimates
    /// (unbiased variance) are updated; a batch of one sample falls back to
    /// the running estimates and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        opts: BatchNormOpts,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(invalid("batch_norm2d", &sx, "[n, c, h, w]"));
        }
        let (n, c, s) = (sx[0], sx[1], sx[2] * sx[3]);
        for v in [gamma, beta, running_mean, running_var] {
            if self.shape(v) != [c] {
                return Err(mismatch("batch_norm2d", &sx, self.shape(v)));
            }
        }
        let batch_stats = opts.training && n > 1;
        let eps = T::lit(opts.eps);
        let (mean, var) = if batch_stats {
            let (mean, var) = kernels::channel_moments(self.data(x), n, c, s);
            let m = T::lit(opts.momentum);
            let count = (n * s) as f64;
            let unbias = T::lit(count / (count - 1.0).max(1.0));
            let rm = self.value_mut(running_mean)?.data_mut();
            for (r, &mu) in rm.iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * mu;
            }
            let rv = self.value_mut(running_var)?.data_mut();
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * v * unbias;
            }
            (mean, var)
        } else {
            (
                self.data(running_mean).to_vec(),
                self.data(running_var).to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let range = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                for i in range {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let op = Op::BatchNorm2d {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push_op(sx, out, op, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() {
            return Err(mismatch("reshape", s, shape));
        }
        let out = self.data(x).to_vec();
        self.push_op(shape.to_vec(), out, Op::Reshape { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|v| v.ln()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Log { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|v| v.exp()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Exp { x }, &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().copied().sum::<T>();
        self.push_op(Vec::new(), vec![total], Op::Sum { x }, &[x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.data(x).len();
        if len == 0 {
            return Err(invalid("mean", self.shape(x), "at least one element"));
        }
        let total = self.data(x).iter().copied().sum::<T>() / T::lit(len as f64);
        self.push_op(Vec::new(), vec![total], Op::Mean { x }, &[x])
    }

    /// Log-softmax over the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s
            .last()
            .ok_or_else(|| invalid("log_softmax", &s, "rank >= 1"))?;
        if k == 0 {
            return Err(invalid("log_softmax", &s, "non-empty last axis"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            log_softmax_in_place(row);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        self.push_op(s, out, Op::LogSoftmax { x }, &[x])
    }

    /// Gathers `x[i, labels[i]]` from `[n, k]` into `[n]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("pick", s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "pick: label {bad} out of range for {k} classes"
            )));
        }
        let d = self.data(x);
        let out = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| d[i * k + l])
            .collect();
        self.push_op(
            vec![labels.len()],
            out,
            Op::Pick {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        )
    }

    /// Scales each row of `[n, d]` to unit L2 norm (norms floored at 1e-12).
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(invalid("row_l2_normalize", &s, "rank 2"));
        }
        let d = s[1].max(1);
        let floor = T::lit(1e-12);
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        self.push_op(s, out, Op::RowL2Normalize { x, norms }, &[x])
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, leaving `dloss/dleaf` on every
    /// leaf that requires a gradient and was reached.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        if !self.data(loss)[0].is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(dy);
                continue;
            }
            backprop_node(nodes, &mut grads, node, &dy);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter_mut().for_each(|v| *v = *v - lse);
}

fn transpose_buf<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Adds `contrib()` into the gradient slot of `v` when `v` needs one.
fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    contrib: impl FnOnce() -> Vec<T>,
) {
    if !nodes[v.0].value.requires_grad() {
        return;
    }
    let c = contrib();
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(c).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(c),
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    node: &Node<T>,
    dy: &[T],
) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k, n) = (shape(*a)[0], shape(*a)[1], shape(*b)[1]);
            accumulate(nodes, grads, *a, || {
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, dy, false, val(*b), true, &mut da, false);
                da
            });
            accumulate(nodes, grads, *b, || {
                let mut db = vec![T::zero(); k * n];
                gemm(k, m, n, val(*a), true, dy, false, &mut db, false);
                db
            });
        }
        Op::Transpose { x } => {
            let (m, n) = (shape(*x)[0], shape(*x)[1]);
            accumulate(nodes, grads, *x, || transpose_buf(dy, n, m));
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, || dy.to_vec());
            accumulate(nodes, grads, *b, || dy.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, || dy.to_vec());
            accumulate(nodes, grads, *b, || dy.iter().map(|&g| -g).collect());
        }
        Op::Mul { a, b } => {
            accumulate(nodes, grads, *a, || {
                dy.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect()
            });
            accumulate(nodes, grads, *b, || {
                dy.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect()
            });
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, || {
                dy.iter().map(|&g| g * *factor).collect()
            });
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, *x, || dy.to_vec());
            accumulate(nodes, grads, *bias, || {
                let s = shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let mut db = vec![T::zero(); c];
                for (i, chunk) in dy.chunks(inner).enumerate() {
                    db[i % c] = db[i % c] + chunk.iter().copied().sum::<T>();
                }
                db
            });
        }
        Op::Conv2d { x, w, geom, cols } => {
            let want_dx = nodes[x.0].value.requires_grad();
            let want_dw = nodes[w.0].value.requires_grad();
            let (dx, dw) = kernels::conv2d_backward(dy, val(*w), cols, geom, want_dx, want_dw);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, || dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, || dw);
            }
        }
        Op::ConvTranspose2d { x, w, adj } => {
            let want_dx = nodes[x.0].value.requires_grad();
            let want_dw = nodes[w.0].value.requires_grad();
            let (dx, dw) =
                kernels::conv_transpose2d_backward(dy, val(*x), val(*w), adj, want_dx, want_dw);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, || dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, || dw);
            }
        }
        Op::Relu { x } => {
            accumulate(nodes, grads, *x, || {
                dy.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect()
            });
        }
        Op::MaxPool2d { x, argmax } => {
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&idx, &g) in argmax.iter().zip(dy) {
                    dx[idx] = dx[idx] + g;
                }
                dx
            });
        }
        Op::GlobalAvgPool { x } => {
            accumulate(nodes, grads, *x, || {
                let s = shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::lit(hw as f64);
                dy.iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
                    .collect()
            });
        }
        Op::BatchNorm2d {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = shape(*x);
            let (n, c, sp) = (s[0], s[1], s[2] * s[3]);
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                        sum_dy[ch] = sum_dy[ch] + dy[i];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * xhat[i];
                    }
                }
            }
            let g = val(*gamma);
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); dy.len()];
                let m = T::lit((n * sp) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let k = g[ch] * inv_std[ch];
                        for i in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                            dx[i] = if *batch_stats {
                                k / m * (m * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                            } else {
                                k * dy[i]
                            };
                        }
                    }
                }
                dx
            });
            accumulate(nodes, grads, *gamma, || sum_dy_xhat.clone());
            accumulate(nodes, grads, *beta, || sum_dy.clone());
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, || dy.to_vec()),
        Op::Log { x } => {
            accumulate(nodes, grads, *x, || {
                dy.iter().zip(val(*x)).map(|(&g, &v)| g / v).collect()
            });
        }
        Op::Exp { x } => {
            accumulate(nodes, grads, *x, || {
                dy.iter().zip(y).map(|(&g, &e)| g * e).collect()
            });
        }
        Op::Sum { x } => accumulate(nodes, grads, *x, || vec![dy[0]; val(*x).len()]),
        Op::Mean { x } => {
            let len = val(*x).len();
            accumulate(nodes, grads, *x, || vec![dy[0] / T::lit(len as f64); len]);
        }
        Op::LogSoftmax { x } => {
            let k = *shape(*x).last().unwrap_or(&1);
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); dy.len()];
                for ((dxr, dyr), yr) in dx.chunks_mut(k).zip(dy.chunks(k)).zip(y.chunks(k)) {
                    let total = dyr.iter().copied().sum::<T>();
                    for ((d, &g), &lp) in dxr.iter_mut().zip(dyr).zip(yr) {
                        *d = g - lp.exp() * total;
                    }
                }
                dx
            });
        }
        Op::Pick { x, labels } => {
            let k = shape(*x)[1];
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (i, (&l, &g)) in labels.iter().zip(dy).enumerate() {
                    dx[i * k + l] = g;
                }
                dx
            });
        }
        Op::RowL2Normalize { x, norms } => {
            let d = shape(*x)[1].max(1);
            accumulate(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); dy.len()];
                for (((dxr, dyr), yr), &norm) in dx
                    .chunks_mut(d)
                    .zip(dy.chunks(d))
                    .zip(y.chunks(d))
                    .zip(norms)
                {
                    let dot = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
                        *o = (g - yv * dot) / norm;
                    }
                }
                dx
            });
        }
    }
}
