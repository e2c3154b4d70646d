//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the inputs it was
//! computed from, so nodes are always in topological order. [`Tape::backward`]
//! walks the nodes in reverse once and accumulates `dLoss/dLeaf` into the
//! gradient slot of every leaf created with `requires_grad`.
//!
//! A tape is single-owner (`Send`, not shared). Build a fresh tape per
//! forward pass; parallel evaluation uses independent tapes.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    ExpandTime { x: Var, len: usize },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sign,
    MaxScalar { x: Var, c: f64 },
    Scale { x: Var, c: f64 },
    Softmax { x: Var, axis: usize },
    MeanLast(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape(Var),
    SwapLast2(Var),
    ConcatLast(Vec<Var>),
    SelectStep { x: Var, index: usize },
    Sum(Var),
    Mean(Var),
    Huber { pred: Var, target: Var, delta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode batch norm, reported so the
/// owning layer can fold them into its running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-variance updates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the NaN/Inf check run after every op.
    pub fn set_finite_check(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v).to_vec();
        self.grad(v).map(|g| Tensor::new(shape, g.to_vec()).expect("grad shape"))
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, trans_b);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", value, Op::MatMul { a, b, trans_b }, rg)
    }

    /// Batched `a[B×m×k] · b[B×k×n]` (or `b[B×n×k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::matmul_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                trans_b,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("bmm", value, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    /// 1-D convolution of `x[N×C_in×L_in]` with `w[C_out×C_in×K]` and optional bias `b[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::dim("conv1d", sx, sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim("conv1d bias", self.shape(b), &[sw[0]]));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be ≥ 1".into()));
        }
        let (batch, c_in, l_in) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        if kernel == 0 || kernel > l_in + 2 * padding {
            return Err(Error::Config(format!(
                "conv1d output length is nonpositive (L_in={l_in}, K={kernel}, padding={padding})"
            )));
        }
        let l_out = (l_in + 2 * padding - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            l_in,
            c_out,
            kernel,
            stride,
            padding,
            l_out,
        };
        let y = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![batch, c_out, l_out], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push_checked("conv1d", value, Op::Conv1d { x, w, b, geom }, rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push_checked("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", v, Op::Mul(a, b), rg)
    }

    /// Adds `bias[d]` to every length-`d` row along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [d] {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push_checked("add_bias", value, Op::AddBias { x, bias }, rg)
    }

    /// Repeats `x[B×C]` along a new trailing time axis: `[B×C×len]`.
    pub fn expand_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return Err(Error::dim("expand_time", tx.shape(), &[0, 0]));
        }
        let data = tx
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, len))
            .collect();
        let value = Tensor::new(vec![tx.shape()[0], tx.shape()[1], len], data)?;
        let rg = self.rg(&[x]);
        self.push_checked("expand_time", value, Op::ExpandTime { x, len }, rg)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push_checked(name, value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), f64::abs)
    }

    /// Sign with `sign(0) = 0`; its gradient is zero everywhere.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary("sign", x, Op::Sign, sign)
    }

    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("max_scalar", x, Op::MaxScalar { x, c }, move |v| v.max(c))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale { x, c }, move |v| v * c)
    }

    // ---- reductions and normalization -----------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::Config(format!("softmax axis {axis} out of range for {:?}", tx.shape())));
        }
        let (outer, n, inner) = kernels::axis_split(tx.shape(), axis);
        let y = kernels::softmax_forward(tx.data(), outer, n, inner);
        let value = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.rg(&[x]);
        self.push_checked("softmax", value, Op::Softmax { x, axis }, rg)
    }

    /// Mean over the last axis, e.g. global average pooling `[B×C×L] → [B×C]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (&l, lead) = tx
            .shape()
            .split_last()
            .ok_or(Error::EmptySequence("mean_last"))?;
        if l == 0 {
            return Err(Error::EmptySequence("global_avg_pool"));
        }
        let data = tx.data().chunks(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
        let value = Tensor::new(lead.to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push_checked("mean_last", value, Op::MeanLast(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 3 {
            return Err(Error::dim("global_avg_pool", self.shape(x), &[0, 0, 0]));
        }
        self.mean_last(x)
    }

    /// Batch normalization of `x[B×C×L]` per channel using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let (b, c, l) = bn_dims(tx, self.value(gamma), self.value(beta))?;
        let count = b * l;
        if count < 2 {
            return Err(Error::Contract(format!("batch norm in train mode needs B·L ≥ 2, got {count}")));
        }
        let idx = |ch: usize, j: usize| (j / l * c + ch) * l + j % l;
        let stats = kernels::group_stats(tx.data(), c, count, idx);
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let batch = BatchStats {
            mean: stats.mean.clone(),
            var_unbiased: stats.var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect(),
        };
        let var = self.batch_norm_apply(x, gamma, beta, &stats.mean, &inv_std, true)?;
        Ok((var, batch))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (_, c, _) = bn_dims(self.value(x), self.value(gamma), self.value(beta))?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm_eval stats", &[mean.len(), var.len()], &[c, c]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, &inv_std, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (c, l) = (shape[1], shape[2]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut y = vec![0.0; tx.len()];
        for (i, (&xv, (xh, yv))) in tx.data().iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
            let ch = (i / l) % c;
            *xh = (xv - mean[ch]) * inv_std[ch];
            *yv = g[ch] * *xh + bt[ch];
        }
        let value = Tensor::new(shape, y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            batch_stats,
        };
        self.push_checked("batch_norm", value, op, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or(Error::EmptySequence("layer_norm"))?;
        if d == 0 {
            return Err(Error::EmptySequence("layer_norm"));
        }
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let rows = tx.len() / d;
        let stats = kernels::group_stats(tx.data(), rows, d, |r, j| r * d + j);
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.len()];
        let mut y = vec![0.0; tx.len()];
        for (i, &xv) in tx.data().iter().enumerate() {
            let (r, j) = (i / d, i % d);
            xhat[i] = (xv - stats.mean[r]) * inv_std[r];
            y[i] = g[j] * xhat[i] + bt[j];
        }
        let value = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push_checked("layer_norm", value, op, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptySequence("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean Huber loss between `pred` and `target` of equal shape.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::dim("huber", tp.shape(), tt.shape()));
        }
        if tp.is_empty() {
            return Err(Error::EmptySequence("huber"));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| huber_value(p - t, delta))
            .sum();
        let value = Tensor::scalar(total / tp.len() as f64);
        let rg = self.rg(&[pred, target]);
        self.push_checked("huber", value, Op::Huber { pred, target, delta }, rg)
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes of a 3-D tensor: `[B×P×Q] → [B×Q×P]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 3 {
            return Err(Error::dim("swap_last2", tx.shape(), &[0, 0, 0]));
        }
        let (b, p, q) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let value = Tensor::new(vec![b, q, p], swap_last2(tx.data(), b, p, q))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SwapLast2(x), rg))
    }

    /// Concatenates tensors of equal leading shape along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_last"))?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Picks time step `index` from `x[B×L×D]`, giving `[B×D]`.
    pub fn select_step(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 3 || index >= tx.shape()[1] {
            return Err(Error::dim("select_step", tx.shape(), &[index]));
        }
        let (b, l, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut data = Vec::with_capacity(b * d);
        for n in 0..b {
            let start = (n * l + index) * d;
            data.extend_from_slice(&tx.data()[start..start + d]);
        }
        let value = Tensor::new(vec![b, d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SelectStep { x, index }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `dLoss/dLeaf` into every `requires_grad` leaf.
    ///
    /// Calling again without [`Tape::zero_grad`] adds to existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = Accumulator {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k) = (sa[0], sa[1]);
                    let n = if *trans_b { sb[0] } else { sb[1] };
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.with(*a, |da| {
                        // dA = dC·Bᵀ (or dC·B when B was used transposed)
                        kernels::matmul_acc(&g, bd, da, m, n, k, !*trans_b);
                    });
                    acc.with(*b, |db| {
                        if *trans_b {
                            kernels::matmul_tn_acc(&g, ad, db, m, n, k);
                        } else {
                            kernels::matmul_tn_acc(ad, &g, db, m, k, n);
                        }
                    });
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (batch, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *trans_b { sb[1] } else { sb[2] };
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.with(*a, |da| {
                        for i in 0..batch {
                            kernels::matmul_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                                !*trans_b,
                            );
                        }
                    });
                    acc.with(*b, |db| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ad[i * m * k..(i + 1) * m * k];
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                kernels::matmul_tn_acc(gi, ai, dbi, m, n, k);
                            } else {
                                kernels::matmul_tn_acc(ai, gi, dbi, m, k, n);
                            }
                        }
                    });
                }
                Op::Conv1d { x, w, b, geom } => {
                    let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    let mut dx = acc.take_if_needed(*x);
                    let mut dw = acc.take_if_needed(*w);
                    let mut db = b.and_then(|b| acc.take_if_needed(b));
                    kernels::conv1d_backward(xd, wd, &g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                    acc.restore(*x, dx);
                    acc.restore(*w, dw);
                    if let Some(b) = b {
                        acc.restore(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    acc.with(*b, |d| d.iter_mut().zip(&g).for_each(|(d, v)| *d -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc.with(*a, |d| {
                        for ((d, gv), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    });
                    acc.with(*b, |d| {
                        for ((d, gv), x) in d.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    });
                }
                Op::AddBias { x, bias } => {
                    acc.add(*x, &g);
                    let d = nodes[bias.0].value.len();
                    acc.with(*bias, |db| {
                        for row in g.chunks(d.max(1)) {
                            db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                    });
                }
                Op::ExpandTime { x, len } => {
                    acc.with(*x, |dx| {
                        for (d, chunk) in dx.iter_mut().zip(g.chunks(*len)) {
                            *d += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc.with(*x, |d| pointwise_acc(d, &g, xv, |x| if x > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc.with(*x, |d| pointwise_acc(d, &g, y, |s| s * (1.0 - s)));
                }
                Op::Abs(x) => {
                    let xv = nodes[x.0].value.data();
                    acc.with(*x, |d| pointwise_acc(d, &g, xv, sign));
                }
                Op::Sign => {}
                Op::MaxScalar { x, c } => {
                    let xv = nodes[x.0].value.data();
                    acc.with(*x, |d| pointwise_acc(d, &g, xv, |v| if v > *c { 1.0 } else { 0.0 }));
                }
                Op::Scale { x, c } => {
                    acc.with(*x, |d| d.iter_mut().zip(&g).for_each(|(d, v)| *d += c * v));
                }
                Op::Softmax { x, axis } => {
                    let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis);
                    let y = node.value.data();
                    acc.with(*x, |dx| kernels::softmax_backward(y, &g, dx, outer, n, inner));
                }
                Op::MeanLast(x) => {
                    let l = *nodes[x.0].value.shape().last().unwrap();
                    acc.with(*x, |dx| {
                        for (chunk, gv) in dx.chunks_mut(l).zip(&g) {
                            chunk.iter_mut().for_each(|d| *d += gv / l as f64);
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = nodes[x.0].value.shape();
                    let (b, c, l) = (shape[0], shape[1], shape[2]);
                    let gd = nodes[gamma.0].value.data();
                    let chan = |i: usize| (i / l) % c;
                    acc.with(*gamma, |dg| {
                        for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                            dg[chan(i)] += gv * xh;
                        }
                    });
                    acc.with(*beta, |db| {
                        for (i, gv) in g.iter().enumerate() {
                            db[chan(i)] += gv;
                        }
                    });
                    acc.with(*x, |dx| {
                        let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * gd[chan(i)]).collect();
                        if *batch_stats {
                            let count = b * l;
                            for ch in 0..c {
                                let idx = |j: usize| (j / l * c + ch) * l + j % l;
                                kernels::norm_backward_group(xhat, &dxhat, inv_std[ch], count, idx, dx);
                            }
                        } else {
                            for (i, (d, dh)) in dx.iter_mut().zip(&dxhat).enumerate() {
                                *d += dh * inv_std[chan(i)];
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[gamma.0].value.len();
                    let gd = nodes[gamma.0].value.data();
                    acc.with(*gamma, |dg| {
                        for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                            dg[i % d] += gv * xh;
                        }
                    });
                    acc.with(*beta, |db| {
                        for (i, gv) in g.iter().enumerate() {
                            db[i % d] += gv;
                        }
                    });
                    acc.with(*x, |dx| {
                        let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * gd[i % d]).collect();
                        for (r, &is) in inv_std.iter().enumerate() {
                            kernels::norm_backward_group(xhat, &dxhat, is, d, |j| r * d + j, dx);
                        }
                    });
                }
                Op::Reshape(x) => acc.add(*x, &g),
                Op::SwapLast2(x) => {
                    // output is [B×Q×P]; swapping back gives [B×P×Q]
                    let s = node.value.shape();
                    let back = swap_last2(&g, s[0], s[1], s[2]);
                    acc.add(*x, &back);
                }
                Op::ConcatLast(parts) => {
                    let total = *node.value.shape().last().unwrap();
                    let rows = node.value.len() / total.max(1);
                    let mut offset = 0;
                    for p in parts {
                        let w = *nodes[p.0].value.shape().last().unwrap();
                        acc.with(*p, |dp| {
                            for r in 0..rows {
                                for j in 0..w {
                                    dp[r * w + j] += g[r * total + offset + j];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::SelectStep { x, index } => {
                    let s = nodes[x.0].value.shape();
                    let (b, l, d) = (s[0], s[1], s[2]);
                    acc.with(*x, |dx| {
                        for n in 0..b {
                            let start = (n * l + index) * d;
                            for j in 0..d {
                                dx[start + j] += g[n * d + j];
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    acc.with(*x, |d| d.iter_mut().for_each(|v| *v += gv));
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len() as f64;
                    let gv = g[0] / n;
                    acc.with(*x, |d| d.iter_mut().for_each(|v| *v += gv));
                }
                Op::Huber { pred, target, delta } => {
                    let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
                    let scale = g[0] / p.len() as f64;
                    let slope: Vec<f64> = p
                        .iter()
                        .zip(t)
                        .map(|(p, t)| scale * huber_slope(p - t, *delta))
                        .collect();
                    acc.add(*pred, &slope);
                    acc.with(*target, |d| d.iter_mut().zip(&slope).for_each(|(d, s)| *d -= s));
                }
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        self.with(v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
    }

    fn take_if_needed(&mut self, v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]))
    }

    fn restore(&mut self, v: Var, g: Option<Vec<f64>>) {
        if g.is_some() {
            self.grads[v.0] = g;
        }
    }
}

fn pointwise_acc(d: &mut [f64], g: &[f64], src: &[f64], deriv: impl Fn(f64) -> f64) {
    for ((d, gv), &s) in d.iter_mut().zip(g).zip(src) {
        *d += gv * deriv(s);
    }
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::dim("batch_norm", x.shape(), &[0, 0, 0]));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim("batch_norm affine", x.shape(), gamma.shape()));
    }
    Ok((x.shape()[0], c, x.shape()[2]))
}

fn swap_last2(src: &[f64], b: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        let base = n * p * q;
        for i in 0..p {
            for j in 0..q {
                out[base + j * p + i] = src[base + i * q + j];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn huber_value(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

fn huber_slope(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * sign(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn matmul_examples() {
        let id = eval(|tp| {
            let a = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
            let b = tp.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
            tp.matmul(a, b)
        });
        assert_eq!(id.data(), &[3.0, 4.0, 5.0, 6.0]);
        let dotp = eval(|tp| {
            let a = tp.constant(t(&[1, 2], &[1.0, 2.0]));
            let b = tp.constant(t(&[2, 1], &[3.0, 4.0]));
            tp.matmul(a, b)
        });
        assert_eq!(dotp.data(), &[11.0]);
        let zero = eval(|tp| {
            let a = tp.constant(Tensor::zeros(&[1, 1]));
            let b = tp.constant(t(&[1, 3], &[7.0, -1.0, 2.0]));
            tp.matmul(a, b)
        });
        assert_eq!(zero.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        match tp.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn conv(x: &[f64], w: &[f64], b: f64, pad: usize) -> Vec<f64> {
        eval(|tp| {
            let xv = tp.constant(t(&[1, 1, x.len()], x));
            let wv = tp.constant(t(&[1, 1, w.len()], w));
            let bv = tp.constant(t(&[1], &[b]));
            tp.conv1d(xv, wv, Some(bv), 1, pad)
        })
        .into_data()
    }

    #[test]
    fn conv1d_examples() {
        assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0], 0.0, 0), vec![1.0, 2.0, 3.0]);
        assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0, 1.0], 0.0, 0), vec![3.0, 5.0]);
        assert_eq!(conv(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 1.0, 1), vec![3.0, 4.0, 3.0]);
    }

    #[test]
    fn conv1d_rejects_empty_output() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::zeros(&[1, 1, 2]));
        let w = tp.constant(Tensor::zeros(&[1, 1, 5]));
        assert!(matches!(tp.conv1d(x, w, None, 1, 1), Err(Error::Config(_))));
        assert!(matches!(tp.conv1d(x, w, None, 0, 2), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_strided_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, ci, li, co, k, s, p) = (2, 3, 9, 2, 3, 2, 1);
        let x = random(&[n, ci, li], &mut rng);
        let w = random(&[co, ci, k], &mut rng);
        let b = random(&[co], &mut rng);
        let y = eval(|tp| {
            let (xv, wv, bv) = (tp.constant(x.clone()), tp.constant(w.clone()), tp.constant(b.clone()));
            tp.conv1d(xv, wv, Some(bv), s, p)
        });
        let lo = (li + 2 * p - k) / s + 1;
        assert_eq!(y.shape(), &[n, co, lo]);
        for bn in 0..n {
            for o in 0..co {
                for tt in 0..lo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for kk in 0..k {
                            let pos = (tt * s + kk) as isize - p as isize;
                            if pos >= 0 && (pos as usize) < li {
                                acc += x.data()[(bn * ci + c) * li + pos as usize] * w.data()[(o * ci + c) * k + kk];
                            }
                        }
                    }
                    assert!((y.data()[(bn * co + o) * lo + tt] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let r = eval(|tp| {
            let x = tp.constant(t(&[2], &[-1.0, 2.0]));
            tp.relu(x)
        });
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        let ident = eval(|tp| {
            let x = tp.constant(t(&[1], &[-3.0]));
            let a = tp.abs(x)?;
            let s = tp.sign(x)?;
            tp.mul(a, s)
        });
        assert_eq!(ident.data(), &[-3.0]);
    }

    #[test]
    fn softmax_examples() {
        let sm = |v: &[f64]| {
            eval(|tp| {
                let x = tp.constant(t(&[v.len()], v));
                tp.softmax(x, 0)
            })
            .into_data()
        };
        for v in sm(&[0.0, 0.0, 0.0]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(sm(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let y = sm(&[0.0, 3f64.ln()]);
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 4], &mut rng);
        let y = eval(|tp| {
            let v = tp.constant(x.clone());
            tp.softmax(v, 1)
        });
        for a in 0..2 {
            for c in 0..4 {
                let s: f64 = (0..3).map(|b| y.data()[(a * 3 + b) * 4 + c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let pool = |shape: &[usize], v: &[f64]| {
            eval(|tp| {
                let x = tp.constant(t(shape, v));
                tp.global_avg_pool(x)
            })
            .into_data()
        };
        assert_eq!(pool(&[1, 1, 3], &[1.0, 1.0, 1.0]), vec![1.0]);
        assert_eq!(pool(&[1, 1, 3], &[1.0, 2.0, 3.0]), vec![2.0]);
        assert_eq!(pool(&[1, 2, 2], &[0.0, 0.0, 4.0, 6.0]), vec![0.0, 5.0]);
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::zeros(&[1, 2, 0]));
        assert!(matches!(tp.global_avg_pool(x), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tp = Tape::new();
        let x = tp.leaf(Tensor::zeros(&[2, 3]), true);
        let s = tp.sum(x).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[1.0; 6]);

        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tp.mul(x, x).unwrap();
        let s = tp.sum(sq).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[2.0, 4.0]);
        // a second pass accumulates, zero_grad resets
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[4.0, 8.0]);
        tp.zero_grad();
        assert!(tp.grad(x).is_none());
    }

    #[test]
    fn backward_needs_scalar_and_nonempty_tape() {
        let mut tp = Tape::new();
        assert!(matches!(tp.backward(Var(0)), Err(Error::Contract(_))));
        let x = tp.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tp.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_check_reports_op() {
        let mut tp = Tape::new();
        tp.set_finite_check(true);
        let x = tp.constant(t(&[1], &[f64::INFINITY]));
        assert!(matches!(tp.scale(x, 0.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn huber_examples() {
        let h = |p: f64, tgt: f64| {
            eval(|tp| {
                let a = tp.constant(t(&[1], &[p]));
                let b = tp.constant(t(&[1], &[tgt]));
                tp.huber(a, b, 1.0)
            })
            .item()
            .unwrap()
        };
        assert_eq!(h(0.3, 0.3), 0.0);
        assert_eq!(h(0.5, 0.0), 0.125);
        assert_eq!(h(2.0, 0.0), 1.5);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let bt = random(&[2, 4], &mut rng);
            let w = random(&[2, 3], &mut rng);
            let r = check_inputs(&[a.clone(), b.clone(), bt.clone(), w.clone()], DEFAULT_STEP, |tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                let z = tp.matmul_nt(v[0], v[2])?;
                let y = tp.add(y, z)?;
                let y = tp.sigmoid(y)?;
                let y = tp.matmul(v[3], y)?;
                let y = tp.mul(y, y)?;
                tp.sum(y)
            })
            .unwrap();
            assert!(r.passes(1e-4), "matmul/sigmoid seed {seed}: {r:?}");

            let x = random(&[2, 3, 5], &mut rng);
            let r = check_inputs(&[x], DEFAULT_STEP, |tp, v| {
                let s = tp.softmax(v[0], 1)?;
                let s2 = tp.softmax(v[0], 2)?;
                let p = tp.mul(s, s2)?;
                let p = tp.swap_last2(p)?;
                let p = tp.select_step(p, 2)?;
                let q = tp.mul(p, p)?;
                tp.mean(q)
            })
            .unwrap();
            assert!(r.passes(1e-4), "softmax seed {seed}: {r:?}");

            let q = random(&[2, 4, 3], &mut rng);
            let k = random(&[2, 4, 3], &mut rng);
            let r = check_inputs(&[q, k], DEFAULT_STEP, |tp, v| {
                let s = tp.bmm(v[0], v[1], true)?;
                let s = tp.bmm(s, v[1], false)?;
                let c = tp.concat_last(&[s, v[0]])?;
                let c = tp.mul(c, c)?;
                tp.sum(c)
            })
            .unwrap();
            assert!(r.passes(1e-4), "bmm seed {seed}: {r:?}");

            let x = random(&[3, 4, 5], &mut rng);
            let lam = random(&[3, 4], &mut rng);
            let r = check_inputs(&[x, lam], DEFAULT_STEP, |tp, v| {
                let e = tp.expand_time(v[1], 5)?;
                let d = tp.sub(v[0], e)?;
                let a = tp.abs(d)?;
                let m = tp.max_scalar(a, 0.3)?;
                let p = tp.global_avg_pool(m)?;
                let r = tp.relu(v[1])?;
                let y = tp.mul(p, r)?;
                let y = tp.scale(y, 1.7)?;
                tp.sum(y)
            })
            .unwrap();
            assert!(r.passes(1e-4), "elementwise seed {seed}: {r:?}");

            let p = random(&[6], &mut rng).map(|v| 1.5 * v);
            let tg = random(&[6], &mut rng);
            let r = check_inputs(&[p, tg], DEFAULT_STEP, |tp, v| tp.huber(v[0], v[1], 1.0)).unwrap();
            assert!(r.passes(1e-4), "huber seed {seed}: {r:?}");
        }
    }
}
