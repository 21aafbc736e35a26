//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape built dynamically during one forward pass: every
//! builder method computes its output eagerly and records the operation.
//! [`Graph::backward`] then walks the tape in reverse, accumulating gradients
//! into every node that (transitively) depends on a gradient-tracked leaf.
//! Graphs are cheap and single-use; build a fresh one per training step.
//!
//! The op set is exactly what the network needs: convolutions, instance norm,
//! activations, pooling, a complex 2D FFT pair, and elementwise arithmetic.
//! Complex data uses the interleaved-pair layout documented in [`crate::tensor`].

pub mod fft;
pub mod gradcheck;
pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rustfft::FftDirection;

/// Handle to a node in one [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Smooth reparameterization applied between a raw (unconstrained) parameter
/// value and the effective value used by the model.
///
/// The open-bound constraints carry a floor of [`CONSTRAINT_FLOOR`] so the
/// effective value stays strictly inside its range even when softplus
/// saturates below machine epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// effective = floor + softplus(raw) > 0
    Positive,
    /// effective = 1 + floor + softplus(raw) > 1
    GreaterThanOne,
    /// effective = 0.1 + 0.8 * sigmoid(raw), inside (0.1, 0.9)
    UnitInterval,
}

pub const CONSTRAINT_FLOOR: f64 = 1e-6;

impl Constraint {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Constraint::None => raw,
            Constraint::Positive => CONSTRAINT_FLOOR + softplus_f64(raw),
            Constraint::GreaterThanOne => 1.0 + CONSTRAINT_FLOOR + softplus_f64(raw),
            Constraint::UnitInterval => 0.1 + 0.8 / (1.0 + (-raw).exp()),
        }
    }

    /// Inverse of [`Constraint::apply`]; used to seed raw values from a
    /// desired effective initialization.
    pub fn raw_from_effective(self, effective: f64) -> f64 {
        match self {
            Constraint::None => effective,
            Constraint::Positive => softplus_inv(effective - CONSTRAINT_FLOOR),
            Constraint::GreaterThanOne => softplus_inv(effective - 1.0 - CONSTRAINT_FLOOR),
            Constraint::UnitInterval => {
                let t = (effective - 0.1) / 0.8;
                (t / (1.0 - t)).ln()
            }
        }
    }
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), stable for the magnitudes we initialize with
    y + (-(-y).exp_m1()).ln()
}

/// Named, gradient-tracked tensor with an optional constraint.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub constraint: Constraint,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            constraint: Constraint::None,
        }
    }

    pub fn constrained(name: impl Into<String>, tensor: Tensor<T>, constraint: Constraint) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            constraint,
        }
    }

    /// Scalar parameter whose raw value is derived from the desired effective value.
    pub fn scalar_with_effective(
        name: impl Into<String>,
        effective: f64,
        constraint: Constraint,
    ) -> Self {
        let raw = constraint.raw_from_effective(effective);
        Parameter {
            name: name.into(),
            tensor: Tensor::scalar(T::of_f64(raw)),
            constraint,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Sqrt(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Atan(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, T),
    Clamp(NodeId, T, T),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<T>,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
        stride: usize,
    },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    SumAll(NodeId),
    SumPerSample(NodeId),
    ScaleChannels {
        x: NodeId,
        s: NodeId,
    },
    RealToComplex(NodeId),
    Fft2 {
        z: NodeId,
        inverse: bool,
    },
    Ifft2Real(NodeId),
    ComplexMulReal {
        z: NodeId,
        m: NodeId,
    },
    MulImagIfft2Real {
        z: NodeId,
        factor: Arc<Vec<T>>,
    },
    LgfMap {
        log_center: NodeId,
        two_log_sigma_sq: NodeId,
        log_mag: Arc<Vec<T>>,
    },
    Phase {
        e: NodeId,
        o1: NodeId,
        o2: NodeId,
        eps: T,
    },
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
}

/// Dynamically-taped computation graph. See the module docs.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fft: fft::FftContext<T>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fft: fft::FftContext::default(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(&self.nodes[id.0].shape, self.nodes[id.0].value.clone())
            .expect("node shape/value always consistent")
    }

    /// Gradient of the last backward pass w.r.t. this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        let shape = t.shape().to_vec();
        let value = t.into_data();
        self.push(Op::Leaf, shape, value, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    /// Register a parameter: returns the raw leaf (for gradient readback) and
    /// the effective node after its constraint reparameterization.
    pub fn param(&mut self, p: &Parameter<T>) -> Result<(NodeId, NodeId)> {
        if !p.tensor.all_finite() {
            return Err(Error::Numeric(format!(
                "parameter '{}' holds non-finite values",
                p.name
            )));
        }
        let leaf = self.leaf(p.tensor.clone(), true);
        let eff = match p.constraint {
            Constraint::None => leaf,
            Constraint::Positive => {
                let sp = self.softplus(leaf);
                self.add_scalar(sp, CONSTRAINT_FLOOR)
            }
            Constraint::GreaterThanOne => {
                let sp = self.softplus(leaf);
                self.add_scalar(sp, 1.0 + CONSTRAINT_FLOOR)
            }
            Constraint::UnitInterval => {
                let s = self.sigmoid(leaf);
                let s = self.scale(s, 0.8);
                self.add_scalar(s, 0.1)
            }
        };
        Ok((leaf, eff))
    }

    // ── Elementwise binary (scalar broadcast allowed on either side) ─

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let shape = if an.shape == bn.shape {
            an.shape.clone()
        } else if an.value.len() == 1 {
            bn.shape.clone()
        } else if bn.value.len() == 1 {
            an.shape.clone()
        } else {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                an.shape, bn.shape
            )));
        };
        let (av, bv) = (&an.value, &bn.value);
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let (asc, bsc) = (av.len() == 1, bv.len() == 1);
        for i in 0..n {
            out.push(f(av[if asc { 0 } else { i }], bv[if bsc { 0 } else { i }]));
        }
        let needs = an.needs_grad || bn.needs_grad;
        Ok(self.push(op, shape, out, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let xn = &self.nodes[x.0];
        let value: Vec<T> = xn.value.iter().map(|&v| f(v)).collect();
        let shape = xn.shape.clone();
        let needs = xn.needs_grad;
        self.push(op, shape, value, needs)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of_f64(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of_f64(c);
        self.unary(x, |v| v + c, Op::AddScalar(x, c))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn atan(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.atan(), Op::Atan(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            Op::Softplus(x),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid_stable, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::of_f64(slope);
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { v * s },
            Op::LeakyRelu(x, s),
        )
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    // ── Structured ops ───────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = dims4(self.shape(x), "conv2d input")?;
        let ws = dims4(self.shape(w), "conv2d weight")?;
        if xs.1 != ws.1 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {} channels but weight expects {}",
                xs.1, ws.1
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride {stride} unsupported (expected 1 or 2)"
            )));
        }
        if xs.2 + 2 * pad < ws.2 || xs.3 + 2 * pad < ws.3 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                ws.2,
                ws.3,
                xs.2 + 2 * pad,
                xs.3 + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws.0] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: bias shape {:?} != [{}]",
                    self.shape(b),
                    ws.0
                )));
            }
        }
        let ho = kernels::conv_out_extent(xs.2, ws.2, stride, pad);
        let wo = kernels::conv_out_extent(xs.3, ws.3, stride, pad);
        let mut out = vec![T::zero(); xs.0 * ws.0 * ho * wo];
        kernels::conv2d_forward(
            &self.nodes[x.0].value,
            xs,
            &self.nodes[w.0].value,
            (ws.0, ws.2, ws.3),
            b.map(|b| self.nodes[b.0].value.as_slice()),
            stride,
            pad,
            &mut out,
        );
        let needs =
            self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv2d { x, w, b, stride, pad },
            vec![xs.0, ws.0, ho, wo],
            out,
            needs,
        ))
    }

    /// Transposed convolution with stride 2 and a 2x2 kernel: output spatial
    /// extents are exactly twice the input's. Weight layout is [Cin,Cout,2,2].
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = dims4(self.shape(x), "conv_transpose2d input")?;
        let ws = dims4(self.shape(w), "conv_transpose2d weight")?;
        if ws.2 != 2 || ws.3 != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose2d: kernel {}x{} unsupported (only 2x2, stride 2)",
                ws.2, ws.3
            )));
        }
        if xs.1 != ws.0 {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d: input has {} channels but weight expects {}",
                xs.1, ws.0
            )));
        }
        let co = ws.1;
        let mut out = vec![T::zero(); xs.0 * co * 4 * xs.2 * xs.3];
        kernels::conv_transpose2d_forward(
            &self.nodes[x.0].value,
            xs,
            &self.nodes[w.0].value,
            co,
            b.map(|b| self.nodes[b.0].value.as_slice()),
            &mut out,
        );
        let needs =
            self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::ConvTranspose2d { x, w, b },
            vec![xs.0, co, 2 * xs.2, 2 * xs.3],
            out,
            needs,
        ))
    }

    /// Per-(sample, channel) normalization over spatial dims, eps = 1e-5,
    /// with per-channel affine parameters.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = dims4(self.shape(x), "instance_norm input")?;
        if self.shape(gamma) != [xs.1] || self.shape(beta) != [xs.1] {
            return Err(Error::ShapeMismatch(format!(
                "instance_norm: affine shapes {:?}/{:?} != [{}]",
                self.shape(gamma),
                self.shape(beta),
                xs.1
            )));
        }
        let eps = T::of_f64(1e-5);
        let stats = kernels::instance_norm_stats(&self.nodes[x.0].value, xs, eps);
        let m = xs.2 * xs.3;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..xs.0 {
            for c in 0..xs.1 {
                let plane = n * xs.1 + c;
                let (mean, invstd) = (stats[2 * plane], stats[2 * plane + 1]);
                let (g, b) = (gv[c], bv[c]);
                let src = &xv[plane * m..][..m];
                let dst = &mut out[plane * m..][..m];
                for i in 0..m {
                    dst[i] = (src[i] - mean) * invstd * g + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::InstanceNorm { x, gamma, beta, stats }, shape, out, needs))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xs = dims4(self.shape(x), "avg_pool2d input")?;
        if k == 0 || stride == 0 || xs.2 < k || xs.3 < k {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2d: window {k} stride {stride} invalid for {}x{}",
                xs.2, xs.3
            )));
        }
        let ho = (xs.2 - k) / stride + 1;
        let wo = (xs.3 - k) / stride + 1;
        let mut out = vec![T::zero(); xs.0 * xs.1 * ho * wo];
        kernels::avg_pool2d_forward(&self.nodes[x.0].value, xs, k, stride, &mut out);
        let needs = self.needs(x);
        Ok(self.push(
            Op::AvgPool2d { x, k, stride },
            vec![xs.0, xs.1, ho, wo],
            out,
            needs,
        ))
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = dims4(self.shape(xs[0]), "concat input")?;
        let mut channels = 0;
        for &x in xs {
            let s = dims4(self.shape(x), "concat input")?;
            if (s.0, s.2, s.3) != (first.0, first.2, first.3) {
                return Err(Error::ShapeMismatch(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.shape(x),
                    self.shape(xs[0])
                )));
            }
            channels += s.1;
        }
        let m = first.2 * first.3;
        let mut out = vec![T::zero(); first.0 * channels * m];
        let mut needs = false;
        for n in 0..first.0 {
            let mut c_off = 0;
            for &x in xs {
                let s = dims4(self.shape(x), "concat input")?;
                let src = &self.nodes[x.0].value[n * s.1 * m..][..s.1 * m];
                out[(n * channels + c_off) * m..][..s.1 * m].copy_from_slice(src);
                c_off += s.1;
                needs |= self.needs(x);
            }
        }
        Ok(self.push(
            Op::Concat(xs.to_vec()),
            vec![first.0, channels, first.2, first.3],
            out,
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {} elements into {:?}",
                self.nodes[x.0].value.len(),
                shape
            )));
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), value, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].value {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(Op::SumAll(x), vec![1], vec![acc], needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over all axes except the leading (batch) axis; output shape [N].
    pub fn sum_per_sample(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("sum_per_sample on 0-d tensor".into()));
        }
        let n = shape[0];
        let m = self.nodes[x.0].value.len() / n.max(1);
        let mut out = vec![T::zero(); n];
        for (s, chunk) in out.iter_mut().zip(self.nodes[x.0].value.chunks_exact(m)) {
            for &v in chunk {
                *s += v;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SumPerSample(x), vec![n], out, needs))
    }

    /// Multiply each channel of x[N,C,H,W] by s[c].
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = dims4(self.shape(x), "scale_channels input")?;
        if self.shape(s) != [xs.1] {
            return Err(Error::ShapeMismatch(format!(
                "scale_channels: scale shape {:?} != [{}]",
                self.shape(s),
                xs.1
            )));
        }
        let m = xs.2 * xs.3;
        let sv = &self.nodes[s.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..xs.0 {
            for c in 0..xs.1 {
                let plane = (n * xs.1 + c) * m;
                let sc = sv[c];
                for i in 0..m {
                    out[plane + i] = xv[plane + i] * sc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(s);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::ScaleChannels { x, s }, shape, out, needs))
    }

    // ── Complex / spectral ops ───────────────────────────────────────

    /// Real [..] -> complex [.., 2] with zero imaginary part.
    pub fn real_to_complex(&mut self, x: NodeId) -> NodeId {
        let xn = &self.nodes[x.0];
        let mut value = Vec::with_capacity(xn.value.len() * 2);
        for &v in &xn.value {
            value.push(v);
            value.push(T::zero());
        }
        let mut shape = xn.shape.clone();
        shape.push(2);
        let needs = xn.needs_grad;
        self.push(Op::RealToComplex(x), shape, value, needs)
    }

    /// Unnormalized forward 2D FFT of a complex tensor [.., H, W, 2].
    pub fn fft2(&mut self, z: NodeId) -> Result<NodeId> {
        self.fft2_impl(z, false)
    }

    /// Normalized (1/(H*W)) inverse 2D FFT; exact inverse of [`Graph::fft2`].
    pub fn ifft2(&mut self, z: NodeId) -> Result<NodeId> {
        self.fft2_impl(z, true)
    }

    fn fft2_impl(&mut self, z: NodeId, inverse: bool) -> Result<NodeId> {
        let (batch, h, w) = complex_dims(self.shape(z))?;
        let dir = if inverse {
            FftDirection::Inverse
        } else {
            FftDirection::Forward
        };
        let out = self
            .fft
            .fft2_batch(&self.nodes[z.0].value, batch, h, w, dir, inverse);
        let needs = self.needs(z);
        let shape = self.nodes[z.0].shape.clone();
        Ok(self.push(Op::Fft2 { z, inverse }, shape, out, needs))
    }

    /// Real part of the normalized inverse 2D FFT: complex [.., H, W, 2] -> real [.., H, W].
    pub fn ifft2_real(&mut self, z: NodeId) -> Result<NodeId> {
        let (batch, h, w) = complex_dims(self.shape(z))?;
        let value = self
            .fft
            .ifft2_realpart(&self.nodes[z.0].value, batch, h, w);
        let mut shape = self.nodes[z.0].shape.clone();
        shape.pop();
        let needs = self.needs(z);
        Ok(self.push(Op::Ifft2Real(z), shape, value, needs))
    }

    /// Multiply a complex tensor [.., H, W, 2] by a real map [H, W],
    /// broadcasting over the leading dims.
    pub fn complex_mul_real(&mut self, z: NodeId, m: NodeId) -> Result<NodeId> {
        let (batch, h, w) = complex_dims(self.shape(z))?;
        if self.shape(m) != [h, w] {
            return Err(Error::ShapeMismatch(format!(
                "complex_mul_real: map shape {:?} != [{h}, {w}]",
                self.shape(m)
            )));
        }
        let zv = &self.nodes[z.0].value;
        let mv = &self.nodes[m.0].value;
        let mut out = vec![T::zero(); zv.len()];
        for b in 0..batch {
            let base = b * h * w * 2;
            for p in 0..h * w {
                let f = mv[p];
                out[base + 2 * p] = zv[base + 2 * p] * f;
                out[base + 2 * p + 1] = zv[base + 2 * p + 1] * f;
            }
        }
        let needs = self.needs(z) || self.needs(m);
        let shape = self.nodes[z.0].shape.clone();
        Ok(self.push(Op::ComplexMulReal { z, m }, shape, out, needs))
    }

    /// Fused quadrature step: multiply a complex spectrum [.., H, W, 2] by
    /// the purely imaginary map i * factor[h,w], inverse transform, and keep
    /// the real part. Output is real [.., H, W].
    pub fn mul_imag_ifft2_real(&mut self, z: NodeId, factor: Arc<Vec<T>>) -> Result<NodeId> {
        let (batch, h, w) = complex_dims(self.shape(z))?;
        if factor.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mul_imag_ifft2_real: factor length {} != {}",
                factor.len(),
                h * w
            )));
        }
        let value =
            self.fft
                .ifft2_realpart_mul_imag(&self.nodes[z.0].value, &factor, batch, h, w);
        let mut shape = self.nodes[z.0].shape.clone();
        shape.pop();
        let needs = self.needs(z);
        Ok(self.push(Op::MulImagIfft2Real { z, factor }, shape, value, needs))
    }

    /// Log-Gabor frequency response over a fixed grid of log-magnitudes:
    /// out = mask * exp(-(log_mag - log_center)^2 / two_log_sigma_sq),
    /// with the DC bin forced to zero through the mask. Differentiable in the
    /// two scalar inputs.
    pub fn lgf_map(
        &mut self,
        log_center: NodeId,
        two_log_sigma_sq: NodeId,
        log_mag: Arc<Vec<T>>,
        mask: Arc<Vec<T>>,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        if self.nodes[log_center.0].value.len() != 1 || self.nodes[two_log_sigma_sq.0].value.len() != 1
        {
            return Err(Error::ShapeMismatch(
                "lgf_map: scalar inputs expected".into(),
            ));
        }
        if log_mag.len() != h * w || mask.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "lgf_map: grid length {} != {h}x{w}",
                log_mag.len()
            )));
        }
        let u0 = self.nodes[log_center.0].value[0];
        let s2 = self.nodes[two_log_sigma_sq.0].value[0];
        if !u0.is_finite() || !s2.is_finite() || s2 <= T::zero() {
            return Err(Error::Numeric(
                "lgf_map: non-finite or non-positive filter parameters".into(),
            ));
        }
        // responses below exp(-30) ~ 1e-13 are flushed to zero; their
        // gradient contributions vanish identically as well
        let cutoff = s2 * T::of_f64(30.0);
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h * w {
            let d = log_mag[i] - u0;
            let q = d * d;
            out.push(if q > cutoff {
                T::zero()
            } else {
                mask[i] * (-q / s2).exp()
            });
        }
        let needs = self.needs(log_center) || self.needs(two_log_sigma_sq);
        Ok(self.push(
            Op::LgfMap {
                log_center,
                two_log_sigma_sq,
                log_mag,
            },
            vec![h, w],
            out,
            needs,
        ))
    }

    /// Local-phase map: atan(e / sqrt(o1^2 + o2^2 + eps^2)). The eps term
    /// floors the denominator so 0/0 maps to phase 0 with finite gradients.
    pub fn phase(&mut self, e: NodeId, o1: NodeId, o2: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[e.0].shape.clone();
        if self.nodes[o1.0].shape != shape || self.nodes[o2.0].shape != shape {
            return Err(Error::ShapeMismatch(
                "phase: even/odd maps must share a shape".into(),
            ));
        }
        let epst = T::of_f64(eps);
        let eps2 = epst * epst;
        let (ev, o1v, o2v) = (
            &self.nodes[e.0].value,
            &self.nodes[o1.0].value,
            &self.nodes[o2.0].value,
        );
        let mut out = Vec::with_capacity(ev.len());
        for i in 0..ev.len() {
            let d = (o1v[i] * o1v[i] + o2v[i] * o2v[i] + eps2).sqrt();
            out.push((ev[i] / d).atan());
        }
        let needs = self.needs(e) || self.needs(o1) || self.needs(o2);
        Ok(self.push(Op::Phase { e, o1, o2, eps: epst }, shape, out, needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node, accumulating gradients into
    /// every reachable gradient-tracked node. May be called once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        let (before, rest) = self.grads.split_at_mut(i);
        let g = rest[0].as_deref().expect("checked by caller");
        let nodes = &self.nodes;
        let node = &nodes[i];

        // Contributions computed as fresh buffers are moved into empty grad
        // slots (the common single-consumer case) and only otherwise summed;
        // small accumulator targets (scalars, per-channel vectors) use the
        // zero-filled path. Inputs that do not require grad are skipped.
        macro_rules! place {
            ($id:expr, $vec:expr) => {{
                let id: NodeId = $id;
                if nodes[id.0].needs_grad {
                    place_or_add(&mut before[id.0], $vec);
                }
            }};
        }
        macro_rules! small_acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                if nodes[id.0].needs_grad {
                    Some(
                        before[id.0]
                            .get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.len()])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        macro_rules! wants {
            ($id:expr) => {
                nodes[$id.0].needs_grad
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if !wants!(id) {
                        continue;
                    }
                    if nodes[id.0].value.len() == 1 {
                        let mut acc = T::zero();
                        for &gi in g {
                            acc += gi;
                        }
                        if let Some(slot) = small_acc!(id) {
                            slot[0] += acc;
                        }
                    } else {
                        place!(id, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants!(*a) {
                    if nodes[a.0].value.len() == 1 {
                        let mut acc = T::zero();
                        for &gi in g {
                            acc += gi;
                        }
                        if let Some(slot) = small_acc!(*a) {
                            slot[0] += acc;
                        }
                    } else {
                        place!(*a, g.to_vec());
                    }
                }
                if wants!(*b) {
                    if nodes[b.0].value.len() == 1 {
                        let mut acc = T::zero();
                        for &gi in g {
                            acc += gi;
                        }
                        if let Some(slot) = small_acc!(*b) {
                            slot[0] -= acc;
                        }
                    } else {
                        place!(*b, g.iter().map(|&v| -v).collect());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants!(*a) {
                    if av.len() == 1 {
                        let mut acc = T::zero();
                        for (i, &gi) in g.iter().enumerate() {
                            acc += gi * bv[if bv.len() == 1 { 0 } else { i }];
                        }
                        if let Some(slot) = small_acc!(*a) {
                            slot[0] += acc;
                        }
                    } else {
                        let contrib = (0..g.len())
                            .map(|i| g[i] * bv[if bv.len() == 1 { 0 } else { i }])
                            .collect();
                        place!(*a, contrib);
                    }
                }
                if wants!(*b) {
                    if bv.len() == 1 {
                        let mut acc = T::zero();
                        for (i, &gi) in g.iter().enumerate() {
                            acc += gi * av[if av.len() == 1 { 0 } else { i }];
                        }
                        if let Some(slot) = small_acc!(*b) {
                            slot[0] += acc;
                        }
                    } else {
                        let contrib = (0..g.len())
                            .map(|i| g[i] * av[if av.len() == 1 { 0 } else { i }])
                            .collect();
                        place!(*b, contrib);
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let a_at = |i: usize| av[if av.len() == 1 { 0 } else { i }];
                let b_at = |i: usize| bv[if bv.len() == 1 { 0 } else { i }];
                if wants!(*a) {
                    if av.len() == 1 {
                        let mut acc = T::zero();
                        for (i, &gi) in g.iter().enumerate() {
                            acc += gi / b_at(i);
                        }
                        if let Some(slot) = small_acc!(*a) {
                            slot[0] += acc;
                        }
                    } else {
                        place!(*a, (0..g.len()).map(|i| g[i] / b_at(i)).collect());
                    }
                }
                if wants!(*b) {
                    if bv.len() == 1 {
                        let mut acc = T::zero();
                        for (i, &gi) in g.iter().enumerate() {
                            let b = b_at(i);
                            acc += -gi * a_at(i) / (b * b);
                        }
                        if let Some(slot) = small_acc!(*b) {
                            slot[0] += acc;
                        }
                    } else {
                        let contrib = (0..g.len())
                            .map(|i| {
                                let b = b_at(i);
                                -g[i] * a_at(i) / (b * b)
                            })
                            .collect();
                        place!(*b, contrib);
                    }
                }
            }
            Op::Neg(x) => {
                place!(*x, g.iter().map(|&v| -v).collect());
            }
            Op::Scale(x, c) => {
                let c = *c;
                place!(*x, g.iter().map(|&v| v * c).collect());
            }
            Op::AddScalar(x, _) => {
                place!(*x, g.to_vec());
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let half = T::of_f64(0.5);
                place!(*x, (0..g.len()).map(|i| g[i] * half / y[i]).collect());
            }
            Op::Log(x) => {
                let xv = &nodes[x.0].value;
                place!(*x, (0..g.len()).map(|i| g[i] / xv[i]).collect());
            }
            Op::Exp(x) => {
                let y = &node.value;
                place!(*x, (0..g.len()).map(|i| g[i] * y[i]).collect());
            }
            Op::Atan(x) => {
                let xv = &nodes[x.0].value;
                place!(
                    *x,
                    (0..g.len())
                        .map(|i| g[i] / (T::one() + xv[i] * xv[i]))
                        .collect()
                );
            }
            Op::Softplus(x) => {
                let xv = &nodes[x.0].value;
                place!(
                    *x,
                    (0..g.len())
                        .map(|i| g[i] * sigmoid_stable(xv[i]))
                        .collect()
                );
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                place!(
                    *x,
                    (0..g.len())
                        .map(|i| g[i] * y[i] * (T::one() - y[i]))
                        .collect()
                );
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &nodes[x.0].value;
                let slope = *slope;
                place!(
                    *x,
                    (0..g.len())
                        .map(|i| g[i] * if xv[i] >= T::zero() { T::one() } else { slope })
                        .collect()
                );
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &nodes[x.0].value;
                let (lo, hi) = (*lo, *hi);
                place!(
                    *x,
                    (0..g.len())
                        .map(|i| {
                            if xv[i] >= lo && xv[i] <= hi {
                                g[i]
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                );
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = dims4(&nodes[x.0].shape, "conv2d input")?;
                let ws = dims4(&nodes[w.0].shape, "conv2d weight")?;
                let (stride, pad) = (*stride, *pad);
                let (x, w, b) = (*x, *w, *b);
                let mut gx = wants!(x).then(|| vec![T::zero(); nodes[x.0].value.len()]);
                let mut gw = wants!(w).then(|| vec![T::zero(); nodes[w.0].value.len()]);
                let mut gb = b
                    .filter(|b| wants!(*b))
                    .map(|b| vec![T::zero(); nodes[b.0].value.len()]);
                kernels::conv2d_backward(
                    &nodes[x.0].value,
                    xs,
                    &nodes[w.0].value,
                    (ws.0, ws.2, ws.3),
                    stride,
                    pad,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    place!(x, gx);
                }
                if let Some(gw) = gw {
                    place!(w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    place!(b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b } => {
                let xs = dims4(&nodes[x.0].shape, "conv_transpose2d input")?;
                let co = nodes[w.0].shape[1];
                let (x, w, b) = (*x, *w, *b);
                let mut gx = wants!(x).then(|| vec![T::zero(); nodes[x.0].value.len()]);
                let mut gw = wants!(w).then(|| vec![T::zero(); nodes[w.0].value.len()]);
                let mut gb = b
                    .filter(|b| wants!(*b))
                    .map(|b| vec![T::zero(); nodes[b.0].value.len()]);
                kernels::conv_transpose2d_backward(
                    &nodes[x.0].value,
                    xs,
                    &nodes[w.0].value,
                    co,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    place!(x, gx);
                }
                if let Some(gw) = gw {
                    place!(w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    place!(b, gb);
                }
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let xs = dims4(&nodes[x.0].shape, "instance_norm input")?;
                let m = xs.2 * xs.3;
                let inv_m = T::one() / T::of_f64(m as f64);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let (x, gamma, beta) = (*x, *gamma, *beta);

                if let Some(gb) = small_acc!(beta) {
                    for n in 0..xs.0 {
                        for c in 0..xs.1 {
                            let plane = (n * xs.1 + c) * m;
                            let mut acc = T::zero();
                            for &gi in &g[plane..plane + m] {
                                acc += gi;
                            }
                            gb[c] += acc;
                        }
                    }
                }
                if let Some(gg) = small_acc!(gamma) {
                    for n in 0..xs.0 {
                        for c in 0..xs.1 {
                            let plane = n * xs.1 + c;
                            let (mean, invstd) = (stats[2 * plane], stats[2 * plane + 1]);
                            let mut acc = T::zero();
                            for i in 0..m {
                                let xhat = (xv[plane * m + i] - mean) * invstd;
                                acc += g[plane * m + i] * xhat;
                            }
                            gg[c] += acc;
                        }
                    }
                }
                if wants!(x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    for n in 0..xs.0 {
                        for c in 0..xs.1 {
                            let plane = n * xs.1 + c;
                            let (mean, invstd) = (stats[2 * plane], stats[2 * plane + 1]);
                            let gamma_c = gv[c];
                            let (mut g_mean, mut gxhat_mean) = (T::zero(), T::zero());
                            for i in 0..m {
                                let xhat = (xv[plane * m + i] - mean) * invstd;
                                g_mean += g[plane * m + i];
                                gxhat_mean += g[plane * m + i] * xhat;
                            }
                            g_mean *= inv_m;
                            gxhat_mean *= inv_m;
                            for i in 0..m {
                                let xhat = (xv[plane * m + i] - mean) * invstd;
                                gx[plane * m + i] = gamma_c
                                    * invstd
                                    * (g[plane * m + i] - g_mean - xhat * gxhat_mean);
                            }
                        }
                    }
                    place!(x, gx);
                }
            }
            Op::AvgPool2d { x, k, stride } => {
                let xs = dims4(&nodes[x.0].shape, "avg_pool2d input")?;
                let (x, k, stride) = (*x, *k, *stride);
                if wants!(x) {
                    let mut gx = vec![T::zero(); nodes[x.0].value.len()];
                    kernels::avg_pool2d_backward(xs, k, stride, g, &mut gx);
                    place!(x, gx);
                }
            }
            Op::Concat(parts) => {
                let out_s = dims4(&node.shape, "concat output")?;
                let m = out_s.2 * out_s.3;
                let parts = parts.clone();
                let mut c_off = 0;
                for &p in &parts {
                    let s = dims4(&nodes[p.0].shape, "concat input")?;
                    if wants!(p) {
                        let mut gp = Vec::with_capacity(nodes[p.0].value.len());
                        for n in 0..out_s.0 {
                            gp.extend_from_slice(&g[(n * out_s.1 + c_off) * m..][..s.1 * m]);
                        }
                        place!(p, gp);
                    }
                    c_off += s.1;
                }
            }
            Op::Reshape(x) => {
                place!(*x, g.to_vec());
            }
            Op::SumAll(x) => {
                let n = nodes[x.0].value.len();
                place!(*x, vec![g[0]; n]);
            }
            Op::SumPerSample(x) => {
                let n = node.value.len();
                if wants!(*x) {
                    let m = nodes[x.0].value.len() / n.max(1);
                    let mut gx = Vec::with_capacity(nodes[x.0].value.len());
                    for &s in g {
                        gx.extend(std::iter::repeat_n(s, m));
                    }
                    place!(*x, gx);
                }
            }
            Op::ScaleChannels { x, s } => {
                let xs = dims4(&nodes[x.0].shape, "scale_channels input")?;
                let m = xs.2 * xs.3;
                let xv = &nodes[x.0].value;
                let sv = &nodes[s.0].value;
                let (x, s) = (*x, *s);
                if wants!(x) {
                    let mut gx = Vec::with_capacity(xv.len());
                    for n in 0..xs.0 {
                        for c in 0..xs.1 {
                            let plane = (n * xs.1 + c) * m;
                            let sc = sv[c];
                            gx.extend(g[plane..plane + m].iter().map(|&v| v * sc));
                        }
                    }
                    place!(x, gx);
                }
                if let Some(gs) = small_acc!(s) {
                    for n in 0..xs.0 {
                        for c in 0..xs.1 {
                            let plane = (n * xs.1 + c) * m;
                            let mut acc = T::zero();
                            for i in 0..m {
                                acc += g[plane + i] * xv[plane + i];
                            }
                            gs[c] += acc;
                        }
                    }
                }
            }
            Op::RealToComplex(x) => {
                place!(*x, g.chunks_exact(2).map(|c| c[0]).collect());
            }
            Op::Fft2 { z, inverse } => {
                // Linear-adjoint rule: the adjoint of the unnormalized forward
                // DFT is the unnormalized inverse; the adjoint of the
                // normalized inverse is the normalized forward.
                let (batch, h, w) = complex_dims(&node.shape)?;
                let (z, inverse) = (*z, *inverse);
                if self.nodes[z.0].needs_grad {
                    let (dir, norm) = if inverse {
                        (FftDirection::Forward, true)
                    } else {
                        (FftDirection::Inverse, false)
                    };
                    let gz = self.fft.fft2_batch(g, batch, h, w, dir, norm);
                    let (before, _) = self.grads.split_at_mut(i);
                    place_or_add(&mut before[z.0], gz);
                }
            }
            Op::Ifft2Real(z) => {
                let mut shape = node.shape.clone();
                shape.push(2);
                let (batch, h, w) = complex_dims(&shape)?;
                let z = *z;
                if self.nodes[z.0].needs_grad {
                    let gz = self.fft.fft2_embed_real(g, batch, h, w, true);
                    let (before, _) = self.grads.split_at_mut(i);
                    place_or_add(&mut before[z.0], gz);
                }
            }
            Op::ComplexMulReal { z, m } => {
                let (batch, h, w) = complex_dims(&node.shape)?;
                let zv = &nodes[z.0].value;
                let mv = &nodes[m.0].value;
                let (z, m) = (*z, *m);
                if wants!(z) {
                    let mut gz = Vec::with_capacity(zv.len());
                    for b in 0..batch {
                        let base = b * h * w * 2;
                        for p in 0..h * w {
                            let f = mv[p];
                            gz.push(g[base + 2 * p] * f);
                            gz.push(g[base + 2 * p + 1] * f);
                        }
                    }
                    place!(z, gz);
                }
                if let Some(gm) = small_acc!(m) {
                    for b in 0..batch {
                        let base = b * h * w * 2;
                        for p in 0..h * w {
                            gm[p] += g[base + 2 * p] * zv[base + 2 * p]
                                + g[base + 2 * p + 1] * zv[base + 2 * p + 1];
                        }
                    }
                }
            }
            Op::MulImagIfft2Real { z, factor } => {
                // adjoint of Re . ifft . (i*a): multiply the forward-
                // transformed upstream grad by the conjugate map -i*a
                let mut shape = node.shape.clone();
                shape.push(2);
                let (batch, h, w) = complex_dims(&shape)?;
                let (z, factor) = (*z, factor.clone());
                if self.nodes[z.0].needs_grad {
                    let s = self.fft.fft2_embed_real(g, batch, h, w, true);
                    let mut gz = Vec::with_capacity(s.len());
                    for b in 0..batch {
                        let base = b * h * w * 2;
                        for (p, &f) in factor.iter().enumerate() {
                            // (-i*f) * (sr + i*si) = f*si - i*f*sr
                            gz.push(f * s[base + 2 * p + 1]);
                            gz.push(-f * s[base + 2 * p]);
                        }
                    }
                    let (before, _) = self.grads.split_at_mut(i);
                    place_or_add(&mut before[z.0], gz);
                }
            }
            Op::LgfMap {
                log_center,
                two_log_sigma_sq,
                log_mag,
                ..
            } => {
                let u0 = nodes[log_center.0].value[0];
                let s2 = nodes[two_log_sigma_sq.0].value[0];
                let y = &node.value;
                let log_mag = log_mag.clone();
                let (log_center, two_log_sigma_sq) = (*log_center, *two_log_sigma_sq);
                let two = T::of_f64(2.0);
                if let Some(gc) = small_acc!(log_center) {
                    let mut acc = T::zero();
                    for i in 0..y.len() {
                        let d = log_mag[i] - u0;
                        acc += g[i] * y[i] * two * d / s2;
                    }
                    gc[0] += acc;
                }
                if let Some(gs) = small_acc!(two_log_sigma_sq) {
                    let mut acc = T::zero();
                    for i in 0..y.len() {
                        let d = log_mag[i] - u0;
                        acc += g[i] * y[i] * d * d / (s2 * s2);
                    }
                    gs[0] += acc;
                }
            }
            Op::Phase { e, o1, o2, eps } => {
                let (ev, o1v, o2v) = (
                    &nodes[e.0].value,
                    &nodes[o1.0].value,
                    &nodes[o2.0].value,
                );
                let eps2 = *eps * *eps;
                let (e, o1, o2) = (*e, *o1, *o2);
                // theta = atan(e/d), d = sqrt(o1^2 + o2^2 + eps^2):
                //   d theta/d e  =  d / (d^2 + e^2)
                //   d theta/d oK = -e*oK / (d * (d^2 + e^2))
                // single fused pass over the pixels for all three inputs
                let n = g.len();
                let (we, w1, w2) = (wants!(e), wants!(o1), wants!(o2));
                let mut ge = we.then(|| Vec::with_capacity(n));
                let mut go1 = w1.then(|| Vec::with_capacity(n));
                let mut go2 = w2.then(|| Vec::with_capacity(n));
                for i in 0..n {
                    let d2 = o1v[i] * o1v[i] + o2v[i] * o2v[i] + eps2;
                    let d = d2.sqrt();
                    let denom = d2 + ev[i] * ev[i];
                    let common = g[i] / denom;
                    if let Some(ge) = ge.as_mut() {
                        ge.push(common * d);
                    }
                    let odd_scale = common * ev[i] / d;
                    if let Some(go1) = go1.as_mut() {
                        go1.push(-odd_scale * o1v[i]);
                    }
                    if let Some(go2) = go2.as_mut() {
                        go2.push(-odd_scale * o2v[i]);
                    }
                }
                if let Some(ge) = ge {
                    place!(e, ge);
                }
                if let Some(go1) = go1 {
                    place!(o1, go1);
                }
                if let Some(go2) = go2 {
                    place!(o2, go2);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Move a fresh contribution into an empty grad slot, or sum it in.
fn place_or_add<T: Scalar>(slot: &mut Option<Vec<T>>, v: Vec<T>) {
    match slot {
        None => *slot = Some(v),
        Some(dst) => add_into(dst, &v),
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected 4 dims [N,C,H,W], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// (batch, h, w) of a complex tensor shaped [.., H, W, 2].
fn complex_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 || *shape.last().unwrap() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected complex shape [.., H, W, 2], got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 3];
    let w = shape[shape.len() - 2];
    let batch: usize = shape[..shape.len() - 3].iter().product();
    Ok((batch, h, w))
}
