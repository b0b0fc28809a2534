use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{NumError, Result};
use crate::kernels::{self, Conv1dDims, Conv2dDims};
use crate::tensor::Tensor;

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    MulRows {
        x: usize,
        scale: usize,
    },
    Scale {
        x: usize,
        factor: f32,
    },
    AddScalar(usize),
    Matmul {
        a: usize,
        b: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Narrow {
        x: usize,
        start: usize,
    },
    Concat(Vec<usize>),
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Swish(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        rstd: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: (usize, usize),
    },
    MaxPool1d {
        x: usize,
        argmax: Vec<usize>,
    },
    DepthwiseRows {
        x: usize,
        w: usize,
        b: usize,
    },
    Bce {
        p: usize,
        target: usize,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Unrounded result of scalar reductions.
    exact: Option<f64>,
}

/// Tape of primitive applications in creation order.
///
/// Every node's inputs precede it, so a reverse sweep is a valid topological
/// order for [`Graph::backward`]. Gradients are only kept for leaves created
/// with `requires_grad = true`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, op: Op, value: f64, requires_grad: bool) -> Var {
        let v = self.push(op, Tensor::scalar(value as f32), requires_grad);
        self.nodes[v.0].exact = Some(value);
        v
    }

    /// Value of a single-element result at the precision it was accumulated
    /// in; reductions keep their `f64` sum.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        let node = &self.nodes[v.0];
        node.exact.or_else(|| node.value.item().map(f64::from))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn data(&self, v: usize) -> &[f32] {
        self.nodes[v].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::from_parts(self.shape(a).to_vec(), data), self.rg(&[a.0, b.0])))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let data = self.data(x.0).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x.0]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), t, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a.0, b.0), t, rg))
    }

    /// Adds a `[D]` bias to every row of a tensor whose last extent is `D`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != bs.last() {
            return Err(NumError::ShapeMismatch {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let d = bs[0];
        let b = self.data(bias.0);
        let data = self.data(x.0).iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let value = Tensor::from_parts(xs.to_vec(), data);
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(Op::AddBias { x: x.0, bias: bias.0 }, value, rg))
    }

    /// Scales row `r` of a `[R, D]` tensor by `scale[r]`; `scale` holds `R` values.
    pub fn mul_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.value(scale).len() != xs[0] {
            return Err(NumError::ShapeMismatch {
                op: "mul_rows",
                lhs: xs.to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let d = xs[1];
        let s = self.data(scale.0);
        let data = self.data(x.0).iter().enumerate().map(|(i, &v)| v * s[i / d]).collect();
        let value = Tensor::from_parts(xs.to_vec(), data);
        let rg = self.rg(&[x.0, scale.0]);
        Ok(self.push(Op::MulRows { x: x.0, scale: scale.0 }, value, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.unary(x, Op::Scale { x: x.0, factor }, |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a.0), self.data(b.0), m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, Tensor::from_parts(vec![m, n], data), rg))
    }

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(NumError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        self.permute(x, &[1, 0])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(NumError::InvalidShape {
                op: "permute",
                shape,
                reason: format!("axes {axes:?} are not a permutation"),
            });
        }
        let data = permute_data(self.data(x.0), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            Tensor::from_parts(out_shape, data),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Reshape(x.0), value, rg))
    }

    /// Slice `start..start+len` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if shape.is_empty() || len == 0 || start + len > d {
            return Err(NumError::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("range {start}..{} outside last axis", start + len),
            });
        }
        let rows = self.value(x).len() / d;
        let src = self.data(x.0);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Narrow { x: x.0, start }, Tensor::from_parts(out_shape, data), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p.0)[r * w..(r + 1) * w]);
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::Concat(ids), Tensor::from_parts(out_shape, data), rg))
    }

    /// Row lookup in a `[V, D]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || indices.is_empty() {
            return Err(NumError::InvalidShape {
                op: "gather",
                shape: ts.to_vec(),
                reason: "expected a [V, D] table and at least one index".into(),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumError::IndexOutOfRange {
                op: "gather",
                index: bad,
                extent: v,
            });
        }
        let src = self.data(table.0);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            Tensor::from_parts(vec![indices.len(), d], data),
            rg,
        ))
    }

    /// Replaces entries where `mask` is set by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f32) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(NumError::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self
            .data(x.0)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), f32::tanh)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Op::Swish(x.0), |v| v * sigmoid(v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), f32::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    fn rowwise(&mut self, op_name: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        match shape.last() {
            Some(&d) => Ok((self.value(x).len() / d, d)),
            None => Err(NumError::InvalidShape {
                op: op_name,
                shape: shape.to_vec(),
                reason: "needs at least one axis".into(),
            }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.rowwise("softmax", x)?;
        let src = self.data(x.0);
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&v| (v as f64 - lse).exp() as f32));
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::Softmax(x.0), value, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.rowwise("log_softmax", x)?;
        let src = self.data(x.0);
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&v| (v as f64 - lse) as f32));
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::LogSoftmax(x.0), value, rg))
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.rowwise("logsumexp", x)?;
        let src = self.data(x.0);
        let data = (0..rows).map(|r| logsumexp(&src[r * d..(r + 1) * d]) as f32).collect();
        let shape = self.shape(x);
        let out_shape = shape[..shape.len() - 1].to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::LogSumExp(x.0), Tensor::from_parts(out_shape, data), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.rowwise("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(NumError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x.0);
        let (g, b) = (self.data(gain.0), self.data(bias.0));
        let mut data = Vec::with_capacity(rows * d);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstds.push(rstd);
            data.extend(
                row.iter()
                    .enumerate()
                    .map(|(i, &v)| ((v as f64 - mean) * rstd * g[i] as f64 + b[i] as f64) as f32),
            );
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                rstd: rstds,
            },
            value,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x.0).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x.0]);
        self.push_scalar(Op::Sum(x.0), s, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.data(x.0).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x.0]);
        self.push_scalar(Op::Mean(x.0), s / n, rg)
    }

    /// Valid 1D convolution. `x: [B, C, L]`, `w: [O, C, K]`, `b: [O]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let dims = self.conv1d_dims(x, w, b, stride)?;
        let data = kernels::conv1d_forward(&dims, self.data(x.0), self.data(w.0), self.data(b.0));
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
            Tensor::from_parts(vec![dims.batch, dims.out_ch, dims.out_len], data),
            rg,
        ))
    }

    fn conv1d_dims(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<Conv1dDims> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || bs != [ws[0]] || stride == 0 {
            return Err(NumError::ShapeMismatch {
                op: "conv1d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let out_len = window_count("conv1d", xs[2], ws[2], stride)?;
        Ok(Conv1dDims {
            batch: xs[0],
            in_ch: xs[1],
            len: xs[2],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            out_len,
        })
    }

    /// Valid 2D convolution. `x: [B, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let dims = self.conv2d_dims(x, w, b, stride)?;
        let data = kernels::conv2d_forward(&dims, self.data(x.0), self.data(w.0), self.data(b.0));
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
            },
            Tensor::from_parts(vec![dims.batch, dims.out_ch, dims.out_h, dims.out_w], data),
            rg,
        ))
    }

    fn conv2d_dims(&self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Conv2dDims> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] || stride.0 == 0 || stride.1 == 0 {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let out_h = window_count("conv2d", xs[2], ws[2], stride.0)?;
        let out_w = window_count("conv2d", xs[3], ws[3], stride.1)?;
        Ok(Conv2dDims {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            out_h,
            out_w,
        })
    }

    /// Max pooling over the last axis.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (rows, len) = self.rowwise("max_pool1d", x)?;
        if kernel == 0 || stride == 0 {
            return Err(NumError::InvalidShape {
                op: "max_pool1d",
                shape: self.shape(x).to_vec(),
                reason: "kernel and stride must be positive".into(),
            });
        }
        let out_len = window_count("max_pool1d", len, kernel, stride)?;
        let (data, argmax) = kernels::max_pool_forward(self.data(x.0), rows, len, kernel, stride, out_len);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out_len;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Op::MaxPool1d { x: x.0, argmax }, Tensor::from_parts(shape, data), rg))
    }

    /// Per-column convolution along the rows of `x: [L, C]` with an odd
    /// kernel `w: [K, C]`, same (zero) padding and bias `b: [C]`.
    pub fn depthwise_conv_rows(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [xs[1]] || ws[0] % 2 == 0 {
            return Err(NumError::ShapeMismatch {
                op: "depthwise_conv_rows",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (rows, cols, k) = (xs[0], xs[1], ws[0]);
        let data = kernels::depthwise_rows_forward(self.data(x.0), self.data(w.0), self.data(b.0), rows, cols, k);
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            Op::DepthwiseRows { x: x.0, w: w.0, b: b.0 },
            Tensor::from_parts(vec![rows, cols], data),
            rg,
        ))
    }

    /// Probabilities feeding a BCE node. A sigmoid output is recomputed from
    /// its logits in `f64`, since `1 - p` loses most of its digits once `p`
    /// is rounded to `f32` near one.
    fn probs_f64(&self, p: usize) -> Vec<f64> {
        match self.nodes[p].op {
            Op::Sigmoid(z) => self
                .data(z)
                .iter()
                .map(|&z| 1.0 / (1.0 + (-(z as f64)).exp()))
                .collect(),
            _ => self.data(p).iter().map(|&v| v as f64).collect(),
        }
    }

    /// Mean binary cross-entropy between probabilities `p` and targets of
    /// the same shape, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: Var, eps: f64) -> Result<Var> {
        self.same_shape("bce", p, target)?;
        let pd = self.data(p.0);
        let td = self.data(target.0);
        if !pd.iter().chain(td).all(|v| v.is_finite()) {
            return Err(NumError::NonFinite("bce"));
        }
        let n = pd.len() as f64;
        let total: f64 = self
            .probs_f64(p.0)
            .into_iter()
            .zip(td)
            .map(|(p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                let t = t as f64;
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.rg(&[p.0]);
        Ok(self.push_scalar(
            Op::Bce {
                p: p.0,
                target: target.0,
                eps,
            },
            total / n,
            rg,
        ))
    }

    /// Hash of every branch taken by non-smooth primitives: ReLU input signs,
    /// max-pool winners and BCE clamps. Two tapes with equal signatures lie on
    /// the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.data(*x) {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool1d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { p, eps, .. } => {
                    i.hash(&mut h);
                    for v in self.probs_f64(*p) {
                        (v < *eps, v > 1.0 - *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every
    /// `requires_grad` leaf that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NumError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(NumError::NonFinite(if matches!(self.nodes[i].op, Op::Leaf) {
                        "backward"
                    } else {
                        "backward (intermediate)"
                    }));
                }
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g / b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((d, g), a), b) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= (*g as f64 * *a as f64 / (*b as f64 * *b as f64)) as f32;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, |d| add_into(d, g));
                let width = self.data(*bias).len();
                self.acc(grads, *bias, |d| {
                    let mut s = vec![0.0f64; width];
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % width] += gv as f64;
                    }
                    add_f64(d, &s);
                });
            }
            Op::MulRows { x, scale } => {
                let width = self.shape(Var(*x))[1];
                let (xv, sv) = (self.data(*x), self.data(*scale));
                self.acc(grads, *x, |d| {
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * sv[i / width];
                    }
                });
                self.acc(grads, *scale, |d| {
                    for (r, d) in d.iter_mut().enumerate() {
                        let s: f64 = (r * width..(r + 1) * width).map(|i| g[i] as f64 * xv[i] as f64).sum();
                        *d += s as f32;
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.acc(grads, *x, |d| add_into(d, g));
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(Var(*a)), self.shape(Var(*b)));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.nodes[*a].requires_grad {
                    let ga = kernels::matmul_bt(g, bv, m, n, k);
                    self.acc(grads, *a, |d| add_into(d, &ga));
                }
                if self.nodes[*b].requires_grad {
                    let gb = kernels::matmul_at(av, g, m, k, n);
                    self.acc(grads, *b, |d| add_into(d, &gb));
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gx = permute_data(g, node.value.shape(), &inverse);
                self.acc(grads, *x, |d| add_into(d, &gx));
            }
            Op::Narrow { x, start } => {
                let d_in = *self.shape(Var(*x)).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for (r, chunk) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * d_in + start..r * d_in + start + len], chunk);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(Var(p)).last().unwrap();
                    self.acc(grads, p, |d| {
                        for (r, dst) in d.chunks_mut(w).enumerate() {
                            add_into(dst, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { table, indices } => {
                let width = self.shape(Var(*table))[1];
                self.acc(grads, *table, |d| {
                    for (r, &row) in indices.iter().enumerate() {
                        add_into(&mut d[row * width..(row + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                self.acc(grads, *x, |d| {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += g;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Swish(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(*x);
                        *d += g * (s + x * s * (1.0 - s));
                    }
                });
            }
            Op::Exp(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / x;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * g * x;
                    }
                });
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let dot: f64 = g.iter().zip(y).map(|(&g, &y)| g as f64 * y as f64).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += (y as f64 * (g as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let width = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let total: f64 = g.iter().map(|&g| g as f64).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += (g as f64 - (y as f64).exp() * total) as f32;
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let xv = self.data(*x);
                let width = *self.shape(Var(*x)).last().unwrap();
                self.acc(grads, *x, |d| {
                    for (r, d) in d.chunks_mut(width).enumerate() {
                        let lse = y[r] as f64;
                        for (d, &x) in d.iter_mut().zip(&xv[r * width..(r + 1) * width]) {
                            *d += (g[r] as f64 * (x as f64 - lse).exp()) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = self.data(*x);
                let gv = self.data(*gain);
                let width = gv.len();
                let rows = xv.len() / width;
                let mut xhat = vec![0.0f64; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * width..(r + 1) * width];
                    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
                    for (i, &v) in row.iter().enumerate() {
                        xhat[r * width + i] = (v as f64 - mean) * rstd[r];
                    }
                }
                if self.nodes[*x].requires_grad {
                    let mut gx = vec![0.0f32; xv.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * width..(r + 1) * width;
                        let dxhat: Vec<f64> = g[range.clone()]
                            .iter()
                            .zip(gv)
                            .map(|(&g, &w)| g as f64 * w as f64)
                            .collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum();
                        let n = width as f64;
                        for (j, i) in range.enumerate() {
                            gx[i] = (rs / n * (n * dxhat[j] - s1 - xhat[i] * s2)) as f32;
                        }
                    }
                    self.acc(grads, *x, |d| add_into(d, &gx));
                }
                self.acc(grads, *gain, |d| {
                    let mut s = vec![0.0f64; width];
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % width] += gv as f64 * xhat[i];
                    }
                    add_f64(d, &s);
                });
                self.acc(grads, *bias, |d| {
                    let mut s = vec![0.0f64; width];
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % width] += gv as f64;
                    }
                    add_f64(d, &s);
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.data(*x).len() as f32;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Conv1d { x, w, b, stride } => {
                let dims = self
                    .conv1d_dims(Var(*x), Var(*w), Var(*b), *stride)
                    .expect("validated on forward");
                let want = [*x, *w, *b].map(|i| self.nodes[i].requires_grad);
                let (dx, dw, db) = kernels::conv1d_backward(&dims, self.data(*x), self.data(*w), g, want);
                self.acc_opt(grads, *x, dx);
                self.acc_opt(grads, *w, dw);
                self.acc_opt(grads, *b, db);
            }
            Op::Conv2d { x, w, b, stride } => {
                let dims = self
                    .conv2d_dims(Var(*x), Var(*w), Var(*b), *stride)
                    .expect("validated on forward");
                let want = [*x, *w, *b].map(|i| self.nodes[i].requires_grad);
                let (dx, dw, db) = kernels::conv2d_backward(&dims, self.data(*x), self.data(*w), g, want);
                self.acc_opt(grads, *x, dx);
                self.acc_opt(grads, *w, dw);
                self.acc_opt(grads, *b, db);
            }
            Op::MaxPool1d { x, argmax } => {
                self.acc(grads, *x, |d| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                });
            }
            Op::DepthwiseRows { x, w, b } => {
                let xs = self.shape(Var(*x));
                let (rows, cols) = (xs[0], xs[1]);
                let k = self.shape(Var(*w))[0];
                let want = [*x, *w, *b].map(|i| self.nodes[i].requires_grad);
                let (dx, dw, db) =
                    kernels::depthwise_rows_backward(self.data(*x), self.data(*w), g, rows, cols, k, want);
                self.acc_opt(grads, *x, dx);
                self.acc_opt(grads, *w, dw);
                self.acc_opt(grads, *b, db);
            }
            Op::Bce { p, target, eps } => {
                let (pv, tv) = (self.data(*p), self.data(*target));
                let n = pv.len() as f64;
                self.acc(grads, *p, |d| {
                    for ((d, &p), &t) in d.iter_mut().zip(pv).zip(tv) {
                        let p = p as f64;
                        if p <= *eps || p >= 1.0 - eps {
                            continue;
                        }
                        *d += (g[0] as f64 * (p - t as f64) / (p * (1.0 - p)) / n) as f32;
                    }
                });
            }
        }
    }

    /// Runs `f` on the gradient buffer of `idx` when that node needs one.
    fn acc(&self, grads: &mut [Option<Vec<f32>>], idx: usize, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let len = self.nodes[idx].value.len();
        let buf = grads[idx].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn acc_opt(&self, grads: &mut [Option<Vec<f32>>], idx: usize, contrib: Option<Vec<f32>>) {
        if let Some(c) = contrib {
            self.acc(grads, idx, |d| add_into(d, &c));
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_f64(dst: &mut [f32], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s as f32;
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

fn window_count(op: &'static str, len: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || len < window {
        return Err(NumError::EmptyWindow { op, len, window });
    }
    Ok((len - window) / stride + 1)
}

fn permute_data(src: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
