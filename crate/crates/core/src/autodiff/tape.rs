//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every forward op appends a node whose inputs precede it, so a single reverse
//! sweep over the node list visits each recorded op exactly once. Nodes whose
//! inputs are all constant carry no backward rule.

use std::collections::HashMap;
use std::sync::Arc;

use super::linalg::gemm;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: `(grad_out, inputs, output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Vec<f64>>>;

/// Geometry of a valid (unpadded) NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
        patches: Vec<f64>,
    },
    SpatialSoftArgmax {
        x: Var,
        shape: [usize; 4],
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Conv2d { .. } => "conv2d",
            Op::SpatialSoftArgmax { .. } => "spatial_soft_argmax",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
///
/// One tape serves exactly one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let c = t.last_dim();
    (t.len() / c, c)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_leaf(Arc::new(t), rg)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Binds a stored parameter; repeated binds return the same var so that
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.value_arc(id), store.is_trainable(id));
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(out, op, &[x])
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.push(out, op, &[a, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (at, bt) = (self.value(a), self.value(b));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: at.shape().to_vec(),
            rhs: bt.shape().to_vec(),
        };
        if at.ndim() != 2 || bt.ndim() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (at.shape()[0], at.shape()[1]);
        let (k2, n) = (bt.shape()[0], bt.shape()[1]);
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, at.data(), false, bt.data(), false, 0.0, &mut out);
        let out = Tensor::matrix(m, n, out)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    /// Adds a length-`n` bias to every row of a tensor whose last axis is `n`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (xt, bt) = (self.value(x), self.value(bias));
        let (_, c) = rows_cols(xt);
        if bt.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: xt.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let b = bt.data();
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xt = self.value(x);
        let (_, c) = rows_cols(xt);
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xt = self.value(x);
        let (_, c) = rows_cols(xt);
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Contiguous range `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let xt = self.value(x);
        let (rows, c) = rows_cols(xt);
        if start >= end || end > c {
            return Err(AutodiffError::InvalidSlice { start, end, len: c });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&xt.data()[r * c + start..r * c + end]);
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { x, start, end }, &[x])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = self
            .value(*parts.first().ok_or(AutodiffError::EmptyConcat)?)
            .shape()
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = super::linalg::compensated_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let s = super::linalg::compensated_sum(t.data().iter().copied()) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = s / p.len() as f64;
        self.push(Tensor::scalar(v), Op::Mse(pred, target), &[pred, target])
    }

    /// Mean softmax cross-entropy of `[m, c]` logits against integer targets.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, AutodiffError> {
        self.cross_entropy_impl(logits, targets, None)
    }

    /// Class-weighted cross-entropy: `sum_i w[t_i] * nll_i / sum_i w[t_i]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[f64],
    ) -> Result<Var, AutodiffError> {
        self.cross_entropy_impl(logits, targets, Some(class_weights.to_vec()))
    }

    fn cross_entropy_impl(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<Vec<f64>>,
    ) -> Result<Var, AutodiffError> {
        let lt = self.value(logits);
        let (m, c) = match lt.shape() {
            [m, c] => (*m, *c),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: s.to_vec(),
                    rhs: vec![targets.len()],
                })
            }
        };
        if targets.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lt.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::InvalidClass {
                index: bad,
                classes: c,
            });
        }
        if let Some(w) = &weights {
            if w.len() != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: vec![c],
                    rhs: vec![w.len()],
                });
            }
        }
        let mut probs = lt.data().to_vec();
        let mut total = 0.0;
        let mut norm = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            let w = weights.as_ref().map_or(1.0, |w| w[t]);
            total += w * (lse - row[t]);
            norm += w;
            softmax_in_place(row);
        }
        if norm <= 0.0 {
            return Err(AutodiffError::NonFinite {
                op: "cross_entropy",
            });
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        self.push(Tensor::scalar(total / norm), op, &[logits])
    }

    /// Picks `x[r, index[r]]` from each row of a `[m, c]` tensor, giving `[m]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let xt = self.value(x);
        let (m, c) = rows_cols(xt);
        if index.len() != m || xt.ndim() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: xt.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(AutodiffError::InvalidClass {
                index: bad,
                classes: c,
            });
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| xt.data()[r * c + i])
            .collect();
        let out = Tensor::new(vec![m], data)?;
        self.push(
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Valid NHWC convolution. `input` is `[n, h, w, c_in]`, `kernel` is
    /// `[k * k * c_in, c_out]` with patch order (row, col, channel). The
    /// result is `[n, oh, ow, c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        kernel_size: usize,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let (it, kt) = (self.value(input), self.value(kernel));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: it.shape().to_vec(),
            rhs: kt.shape().to_vec(),
        };
        let [n, h, w, cin] = *it.shape() else {
            return Err(mismatch());
        };
        let [plen, cout] = *kt.shape() else {
            return Err(mismatch());
        };
        if stride == 0 || kernel_size == 0 || kernel_size > h || kernel_size > w {
            return Err(mismatch());
        }
        let g = ConvGeometry {
            batch: n,
            height: h,
            width: w,
            in_channels: cin,
            out_channels: cout,
            kernel: kernel_size,
            stride,
        };
        if plen != g.patch_len() {
            return Err(mismatch());
        }
        let patches = im2col(it.data(), &g);
        let rows = n * g.out_height() * g.out_width();
        let mut out = vec![0.0; rows * cout];
        gemm(
            rows,
            plen,
            cout,
            &patches,
            false,
            kt.data(),
            false,
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![n, g.out_height(), g.out_width(), cout], out)?;
        let op = Op::Conv2d {
            input,
            kernel,
            geometry: g,
            patches,
        };
        self.push(out, op, &[input, kernel])
    }

    /// Expected image coordinates per channel of `[n, h, w, c]` activations:
    /// a softmax over the `h * w` positions of each channel, then the
    /// probability-weighted mean of column and row coordinates (both in
    /// `[-1, 1]`). The result is `[n, 2c]` ordered `(x_0, y_0, x_1, y_1, ..)`.
    pub fn spatial_soft_argmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xt = self.value(x);
        let [n, h, w, c] = *xt.shape() else {
            return Err(AutodiffError::ShapeMismatch {
                op: "spatial_soft_argmax",
                lhs: xt.shape().to_vec(),
                rhs: vec![],
            });
        };
        let (out, probs) = spatial_soft_argmax_with_probs(xt.data(), n, h, w, c);
        let out = Tensor::new(vec![n, 2 * c], out)?;
        let op = Op::SpatialSoftArgmax {
            x,
            shape: [n, h, w, c],
            probs,
        };
        self.push(out, op, &[x])
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        backward: CustomBackward,
    ) -> Result<Var, AutodiffError> {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(output, op, inputs)
    }

    /// Smallest `|x|` over the inputs of every recorded relu, i.e. how close
    /// the current point is to a non-differentiable kink.
    pub fn relu_kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.abs()))
            .reduce(f64::min)
    }

    /// Differentiates the scalar `loss`. Gradients of every reachable var are
    /// kept on the tape; gradients of bound parameters are returned (zeros for
    /// bound parameters the loss does not reach).
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads, AutodiffError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        let mut out = ParamGrads::default();
        for &(pid, v) in &self.bindings {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.value(v).len()]);
            out.push(pid, g);
        }
        Ok(out)
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let out = Arc::clone(&self.nodes[i].value);
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bt.data(), true, 0.0, &mut ga);
                    pending.push((*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, at.data(), true, g, false, 0.0, &mut gb);
                    pending.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                pending.push((*a, g.iter().zip(bt.data()).map(|(x, y)| x * y).collect()));
                pending.push((*b, g.iter().zip(at.data()).map(|(x, y)| x * y).collect()));
            }
            Op::Minimum(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for j in 0..g.len() {
                    if at.data()[j] <= bt.data()[j] {
                        ga[j] = g[j];
                    } else {
                        gb[j] = g[j];
                    }
                }
                pending.push((*a, ga));
                pending.push((*b, gb));
            }
            Op::AddRow(x, bias) => {
                let c = self.value(*bias).len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                pending.push((*x, g.to_vec()));
                pending.push((*bias, gb));
            }
            Op::Scale(x, f) => pending.push((*x, g.iter().map(|v| v * f).collect())),
            Op::AddScalar(x) => pending.push((*x, g.to_vec())),
            Op::Relu(x) => {
                let xt = self.value(*x);
                let gx = g
                    .iter()
                    .zip(xt.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                pending.push((*x, gx));
            }
            Op::Tanh(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                pending.push((*x, gx));
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                pending.push((*x, gx));
            }
            Op::Clamp { x, lo, hi } => {
                let xt = self.value(*x);
                let gx = g
                    .iter()
                    .zip(xt.data())
                    .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                    .collect();
                pending.push((*x, gx));
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                pending.push((*x, gx));
            }
            Op::LogSoftmax(x) => {
                let c = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dst[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                pending.push((*x, gx));
            }
            Op::Slice { x, start, end } => {
                let xt = self.value(*x);
                let (rows, c) = rows_cols(xt);
                let w = end - start;
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    gx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                pending.push((*x, gx));
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    pending.push((p, gp));
                }
            }
            Op::Reshape(x) => pending.push((*x, g.to_vec())),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                pending.push((*x, vec![g[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                pending.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Mse(p, t) => {
                let (pt, tt) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g[0] / pt.len() as f64;
                let diff: Vec<f64> = pt
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                pending.push((*t, diff.iter().map(|v| -v).collect()));
                pending.push((*p, diff));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let norm: f64 = match weights {
                    Some(w) => targets.iter().map(|&t| w[t]).sum(),
                    None => targets.len() as f64,
                };
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[t]);
                    let row = &mut gx[r * c..(r + 1) * c];
                    row[t] -= 1.0;
                    let s = g[0] * w / norm;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                pending.push((*logits, gx));
            }
            Op::Gather { x, index } => {
                let c = self.value(*x).last_dim();
                let mut gx = vec![0.0; index.len() * c];
                for (r, &i) in index.iter().enumerate() {
                    gx[r * c + i] = g[r];
                }
                pending.push((*x, gx));
            }
            Op::Conv2d {
                input,
                kernel,
                geometry,
                patches,
            } => {
                let kt = self.value(*kernel);
                let rows = geometry.batch * geometry.out_height() * geometry.out_width();
                let (plen, cout) = (geometry.patch_len(), geometry.out_channels);
                if self.requires_grad(*kernel) {
                    let mut gk = vec![0.0; plen * cout];
                    gemm(plen, rows, cout, patches, true, g, false, 0.0, &mut gk);
                    pending.push((*kernel, gk));
                }
                if self.requires_grad(*input) {
                    let mut gp = vec![0.0; rows * plen];
                    gemm(rows, cout, plen, g, false, kt.data(), true, 0.0, &mut gp);
                    pending.push((*input, col2im(&gp, geometry)));
                }
            }
            Op::SpatialSoftArgmax { x, shape, probs } => {
                let [n, h, w, c] = *shape;
                let od = out.data();
                let mut gx = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = b * 2 * c + 2 * ch;
                        let (ex, ey, gex, gey) = (od[o], od[o + 1], g[o], g[o + 1]);
                        for i in 0..h {
                            for j in 0..w {
                                let k = ((b * h + i) * w + j) * c + ch;
                                gx[k] = probs[k]
                                    * (gex * (grid_coord(j, w) - ex)
                                        + gey * (grid_coord(i, h) - ey));
                            }
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(g, &ins, &out);
                for (&v, gv) in inputs.iter().zip(gs) {
                    pending.push((v, gv));
                }
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn grid_coord(i: usize, len: usize) -> f64 {
    if len > 1 {
        2.0 * i as f64 / (len - 1) as f64 - 1.0
    } else {
        0.0
    }
}

fn spatial_soft_argmax_with_probs(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; x.len()];
    let mut out = vec![0.0; n * 2 * c];
    let mut row = vec![0.0; h * w];
    for b in 0..n {
        let base = b * h * w * c;
        for ch in 0..c {
            for (p, v) in row.iter_mut().enumerate() {
                *v = x[base + p * c + ch];
            }
            softmax_in_place(&mut row);
            let (mut ex, mut ey) = (0.0, 0.0);
            for (p, &pv) in row.iter().enumerate() {
                probs[base + p * c + ch] = pv;
                ex += pv * grid_coord(p % w, w);
                ey += pv * grid_coord(p / w, h);
            }
            out[b * 2 * c + 2 * ch] = ex;
            out[b * 2 * c + 2 * ch + 1] = ey;
        }
    }
    (out, probs)
}

/// Tape-free [`Tape::spatial_soft_argmax`] on NHWC data.
pub fn spatial_soft_argmax(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    spatial_soft_argmax_with_probs(x, n, h, w, c).0
}

/// Softmax of a single row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Log-softmax of a single row of logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_height(), g.out_width(), g.patch_len());
    let mut patches = Vec::with_capacity(g.batch * oh * ow * plen);
    let row_stride = g.width * g.in_channels;
    let img = g.height * row_stride;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..g.kernel {
                    let y = oy * g.stride + ky;
                    let start = b * img + y * row_stride + ox * g.stride * g.in_channels;
                    patches.extend_from_slice(&input[start..start + g.kernel * g.in_channels]);
                }
            }
        }
    }
    patches
}

fn col2im(grad_patches: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow, plen) = (g.out_height(), g.out_width(), g.patch_len());
    let row_stride = g.width * g.in_channels;
    let img = g.height * row_stride;
    let span = g.kernel * g.in_channels;
    let mut out = vec![0.0; g.batch * img];
    let mut p = 0;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = &grad_patches[p * plen..(p + 1) * plen];
                for ky in 0..g.kernel {
                    let y = oy * g.stride + ky;
                    let start = b * img + y * row_stride + ox * g.stride * g.in_channels;
                    out[start..start + span]
                        .iter_mut()
                        .zip(&patch[ky * span..(ky + 1) * span])
                        .for_each(|(o, v)| *o += v);
                }
                p += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.5]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[3, 4], &data));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln3() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(l).item() - 1.0986122886681098).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("[3, 2]"));
    }

    #[test]
    fn invalid_class_index_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[0, 3]),
            Err(AutodiffError::InvalidClass {
                index: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(
            tape.exp(x),
            Err(AutodiffError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.7).with_requires_grad(true));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mse_with_itself_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]).with_requires_grad(true));
        let l = tape.mse(x, x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn constant_inputs_record_no_backward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        let y = tape.tanh(x).unwrap();
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.op_name(y), "leaf");
    }

    #[test]
    fn conv_with_unit_kernel_is_channel_matmul() {
        // 1x1 kernel: every pixel's channels go through the same linear map
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..2 * 2 * 2 * 3).map(|v| v as f64).collect();
        let x = tape.constant(t(&[2, 2, 2, 3], &img));
        let k = tape.constant(t(&[3, 1], &[1.0, 10.0, 100.0]));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        let want: Vec<f64> = img
            .chunks(3)
            .map(|p| p[0] + 10.0 * p[1] + 100.0 * p[2])
            .collect();
        assert_eq!(tape.value(y).shape(), &[2, 2, 2, 1]);
        assert_eq!(tape.value(y).data(), &want[..]);
    }
}
