use std::fmt;

use super::ops::{bilinear_taps, gemm, sigmoid, softmax_rows, split_axis};
use super::Tensor;
use crate::error::{contract, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for backward-rule fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Concat,
    Slice,
    Mean,
    Sum,
    Transpose,
    Reshape,
    Embedding,
    AvgPool2x,
    Upsample,
    BceWithLogits,
    SoftDice,
}

impl OpKind {
    /// Every differentiable kind, in a stable order.
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Embedding,
        OpKind::AvgPool2x,
        OpKind::Upsample,
        OpKind::BceWithLogits,
        OpKind::SoftDice,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.to_string() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Embedding => "embedding",
            OpKind::AvgPool2x => "avg_pool2x",
            OpKind::Upsample => "bilinear_upsample",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::SoftDice => "soft_dice",
        };
        f.write_str(name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
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
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    AvgPool2x(Var),
    Upsample(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
    SoftDice {
        logits: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::AvgPool2x(..) => OpKind::AvgPool2x,
            Op::Upsample(..) => OpKind::Upsample,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::SoftDice { .. } => OpKind::SoftDice,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations during the forward pass and replays them in reverse.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Inputs are never mutated; each op allocates its output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of `v`; all zeros when `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
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

    /// Corrupts the backward rule of one op kind. Used to prove that the
    /// gradient checker notices a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn expect_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d(a, "matmul")?;
        let (k2, n) = self.expect_2d(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dimensions disagree: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), g))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), g))
    }

    /// Adds a `[d]` bias to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "bias of shape {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, factor), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Sigmoid(x), g)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let data = softmax_rows(self.value(x).data(), d);
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Softmax(x), g)
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(contract("layer_norm needs a last axis of at least 2"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!(
                "layer_norm affine parameters {:?}/{:?} do not match last axis {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            g,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(format!(
                "slice [{start}, {}) along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x, axis, start },
            g,
        ))
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, d)| *d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Mean { x, axis },
            g,
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), g)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.expect_2d(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    /// Gathers rows `ids` of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.expect_2d(table, "embedding")?;
        if ids.is_empty() {
            return Err(contract("embedding lookup with no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(crate::error::SlvError::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let g = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    fn expect_grid(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(shape_err(format!("{what} expects [h, w, c], got {s:?}"))),
        }
    }

    /// 2x2 average pooling of an `[h, w, c]` grid with even `h` and `w`.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.expect_grid(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("avg_pool2x needs even grid sides, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut data = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let dst = &mut data[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for k in 0..c {
                        dst[k] += 0.25 * src[s + k];
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![oh, ow, c], data),
            Op::AvgPool2x(x),
            g,
        ))
    }

    /// Bilinear resize (align-corners=false) of an `[h, w, c]` grid.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = self.expect_grid(x, "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("upsample target must be non-empty"));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let src = self.value(x).data();
        let mut data = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let dst = &mut data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (sy, sx, wgt) in taps {
                    let s = (sy * w + sx) * c;
                    for k in 0..c {
                        dst[k] += wgt * src[s + k];
                    }
                }
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![out_h, out_w, c], data),
            Op::Upsample(x),
            g,
        ))
    }

    fn binary_target(&self, logits: Var, target: &[f64], what: &str) -> Result<()> {
        if self.value(logits).len() != target.len() {
            return Err(shape_err(format!(
                "{what}: logits of shape {:?} vs target of {} values",
                self.shape(logits),
                target.len()
            )));
        }
        Ok(())
    }

    /// Mean per-element binary cross-entropy in logit form:
    /// `max(l, 0) - l*g + ln(1 + exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        self.binary_target(logits, target, "bce_with_logits")?;
        let l = self.value(logits).data();
        let total: f64 = l
            .iter()
            .zip(target)
            .map(|(&x, &g)| x.max(0.0) - x * g + (-x.abs()).exp().ln_1p())
            .sum();
        let value = total / l.len() as f64;
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
            g,
        ))
    }

    /// Soft Dice loss `1 - (2·Σσ(l)g + eps) / (Σσ(l) + Σg + eps)`.
    pub fn soft_dice(&mut self, logits: Var, target: &[f64], eps: f64) -> Result<Var> {
        self.binary_target(logits, target, "soft_dice")?;
        let (inter, union) = dice_sums(self.value(logits).data(), target);
        let value = 1.0 - (2.0 * inter + eps) / (union + eps);
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftDice {
                logits,
                target: target.to_vec(),
                eps,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.input_grads(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().enumerate().for_each(|(k, v)| {
                        *v = *v * 1.5 + if k == 0 { 1e-3 } else { 0.0 };
                    });
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Grads { grads, shapes })
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::new();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, 0.0, &mut da);
                    res.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, 0.0, &mut db);
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias(x, b) => {
                let d = self.shape(*b)[0];
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(d)
                    .zip(out.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = val(*gamma);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, inv) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        sum_gh += gh;
                        sum_ghx += gh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        dx[r * d + j] = inv / dn * (dn * gh - sum_gh - hr[j] * sum_ghx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((*p, dp));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let inv = 1.0 / n as f64;
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            dx[(o * n + k) * inner + j] = g[o * inner + j] * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::AvgPool2x(x) => {
                let (w, c) = (self.shape(*x)[1], self.shape(*x)[2]);
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; self.value(*x).len()];
                for y in 0..oh {
                    for xx in 0..ow {
                        let src = &g[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                        for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((2 * y + dy) * w + 2 * xx + dxo) * c;
                            for k in 0..c {
                                dx[s + k] += 0.25 * src[k];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Upsample(x) => {
                let (h, w, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (out_h, out_w) = (node.value.shape()[0], node.value.shape()[1]);
                let ty = bilinear_taps(h, out_h);
                let tx = bilinear_taps(w, out_w);
                let mut dx = vec![0.0; h * w * c];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let src = &g[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                        let taps = [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x1, (1.0 - fy) * fx),
                            (y1, x0, fy * (1.0 - fx)),
                            (y1, x1, fy * fx),
                        ];
                        for (sy, sx, wgt) in taps {
                            let s = (sy * w + sx) * c;
                            for k in 0..c {
                                dx[s + k] += wgt * src[k];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::BceWithLogits { logits, target } => {
                let scale = g[0] / target.len() as f64;
                let dl = val(*logits)
                    .iter()
                    .zip(target)
                    .map(|(&l, &t)| (sigmoid(l) - t) * scale)
                    .collect();
                vec![(*logits, dl)]
            }
            Op::SoftDice {
                logits,
                target,
                eps,
            } => {
                let l = val(*logits);
                let (inter, union) = dice_sums(l, target);
                let num = 2.0 * inter + eps;
                let den = union + eps;
                let dl = l
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| {
                        let s = sigmoid(x);
                        // d(loss)/ds = -(2t·den - num) / den²
                        let ds = -(2.0 * t * den - num) / (den * den);
                        g[0] * ds * s * (1.0 - s)
                    })
                    .collect();
                vec![(*logits, dl)]
            }
        }
    }
}

fn dice_sums(logits: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&l, &t) in logits.iter().zip(target) {
        let s = sigmoid(l);
        inter += s * t;
        union += s + t;
    }
    (inter, union)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 3]"), "{err}");
        assert!(err.contains("dimension error"));
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_and_symmetric_pair() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[3], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[3], 1.0));
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let x = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::SlvError::Contract(_))
        ));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        let gu = grads.get(unused);
        assert_eq!(gu.shape(), &[2, 2]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
        assert!(grads.get(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            tape.embedding(table, &[1, 4]),
            Err(crate::error::SlvError::Input(_))
        ));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
    }

    #[test]
    fn upsample_of_constant_grid_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 1], 3.0));
        let y = tape.upsample_bilinear(x, 8, 8).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn loss_limits() {
        let target = [1.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let l = tape.constant(t(&[4], &[50.0, -50.0, -50.0, 50.0]));
        let bce = tape.bce_with_logits(l, &target).unwrap();
        let dice = tape.soft_dice(l, &target, 1.0).unwrap();
        assert!(tape.value(bce).item() < 1e-6);
        assert!(tape.value(dice).item() < 1e-6);
        let z = tape.constant(Tensor::zeros(&[4]));
        let bce = tape.bce_with_logits(z, &target).unwrap();
        assert!((tape.value(bce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
