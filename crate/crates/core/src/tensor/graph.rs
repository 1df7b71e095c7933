use super::{Result, Tensor, TensorError};
use crate::rng::Rng;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Stack { inputs: Vec<Var>, axis: usize },
    Select { a: Var, axis: usize, index: usize },
    Reshape(Var),
    Dropout { a: Var, mask: Vec<f64> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis { a: Var, axis: usize },
    Pick { a: Var, indices: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Embedding { .. } => "embedding",
            Op::Stack { .. } => "stack",
            Op::Select { .. } => "select",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Pick { .. } => "pick",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf tensors produced by one reverse pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Execution tape. Ops are appended in execution order; [`Graph::backward`]
/// walks them in exactly the reverse order and then clears the tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-8;

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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Matrix product. `b` is either a shared `[k, n]` matrix applied to the
    /// last axis of `a`, or a `[batch, k, n]` stack multiplied against a
    /// `[batch, m, k]` stack. With `trans_b`, `b` holds the transposed layout.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_bt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: name,
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 {
            return Err(mismatch());
        }
        let k = *sa.last().unwrap();
        let (bk, n) = match sb.len() {
            2 | 3 => {
                let r = sb[sb.len() - 2];
                let c = sb[sb.len() - 1];
                if trans_b {
                    (c, r)
                } else {
                    (r, c)
                }
            }
            _ => return Err(mismatch()),
        };
        if bk != k {
            return Err(mismatch());
        }
        let (batch, m) = if sb.len() == 3 {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(mismatch());
            }
            (sa[0], sa[1])
        } else {
            (1, sa.iter().product::<usize>() / k)
        };
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = if sb.len() == 3 {
                    &bd[bi * k * n..(bi + 1) * k * n]
                } else {
                    bd
                };
                gemm(m, k, n, a_s, false, b_s, trans_b, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(kind.name(), &sa, &sb)?;
        let ad = self.data(a);
        let bd = self.data(b);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
            out
        };
        let op = match kind {
            BinaryKind::Add => Op::Add { a, b },
            BinaryKind::Sub => Op::Sub { a, b },
            BinaryKind::Mul => Op::Mul { a, b },
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, out)?, op, rg)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Elementwise (Hadamard) product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let out = self.map(a, |x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(TensorError::InvalidShape {
                op,
                shape: self.shape(a).to_vec(),
                reason: "needs a non-empty last axis",
            }),
        }
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.last_axis("softmax", a)?;
        let mut out = self.value(a).clone();
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.last_axis("log_softmax", a)?;
        let mut out = self.value(a).clone();
        for row in out.data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Row lookup into a `[rows, dim]` table. Output shape is
    /// `index_shape ++ [dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: st,
                reason: "table must be two-dimensional",
            });
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                left: index_shape.to_vec(),
                right: vec![indices.len()],
            });
        }
        let (rows, dim) = (st[0], st[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::InvalidShape {
                op: "stack",
                shape: vec![],
                reason: "no inputs",
            });
        };
        let shape = self.shape(first).to_vec();
        if axis > shape.len() {
            return Err(TensorError::InvalidShape {
                op: "stack",
                shape,
                reason: "axis out of range",
            });
        }
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: shape,
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let k = inputs.len();
        let mut out = vec![0.0; outer * k * inner];
        for (j, &v) in inputs.iter().enumerate() {
            let d = self.data(v);
            for o in 0..outer {
                out[(o * k + j) * inner..(o * k + j + 1) * inner]
                    .copy_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, k);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Slice `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "select",
                shape,
                reason: "axis out of range",
            });
        }
        let k = shape[axis];
        if index >= k {
            return Err(TensorError::IndexOutOfRange {
                op: "select",
                index,
                extent: k,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * k + index) * inner..(o * k + index + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out)?, Op::Select { a, axis, index }, rg)
    }

    /// Inverse of [`Graph::stack`]: one tensor per slice along `axis`.
    pub fn unstack(&mut self, a: Var, axis: usize) -> Result<Vec<Var>> {
        let k = *self.shape(a).get(axis).ok_or_else(|| TensorError::InvalidShape {
            op: "unstack",
            shape: self.shape(a).to_vec(),
            reason: "axis out of range",
        })?;
        (0..k).map(|i| self.select(a, axis, i)).collect()
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.data(a).to_vec()).map_err(|_| {
            TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            }
        })?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` during training;
    /// outside training (or with `p == 0`) the input is returned untouched.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidShape {
                op: "dropout",
                shape: self.shape(a).to_vec(),
                reason: "ratio must lie in [0, 1)",
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Dropout { a, mask }, rg)
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.last_axis("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut normalized = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(xd.len() / n);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean along `axis`, dropping that axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape,
                reason: "axis out of range",
            });
        }
        let k = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..k {
                let src = &d[(o * k + j) * inner..(o * k + j + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { a, axis }, rg)
    }

    /// Gathers one entry per row of the last axis.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.last_axis("pick", a)?;
        let d = self.data(a);
        let rows = d.len() / n;
        if indices.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                left: self.shape(a).to_vec(),
                right: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    extent: n,
                });
            }
            out.push(d[r * n + i]);
        }
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out)?,
            Op::Pick {
                a,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// marked `requires_grad` that the loss depends on, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut out = Gradients {
            grads: vec![None; nodes.len()],
        };
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out.grads[idx] = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    });
                }
                Op::MatMul { a, b, trans_b } => {
                    backward_matmul(nodes, &mut grads, &g, *a, *b, *trans_b);
                }
                Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                    let sa = nodes[a.0].value.shape();
                    let sb = nodes[b.0].value.shape();
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    let (da, db): (f64, f64) = match node.op {
                        Op::Sub { .. } => (1.0, -1.0),
                        _ => (1.0, 1.0),
                    };
                    let is_mul = matches!(node.op, Op::Mul { .. });
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for_each_broadcast(node.value.shape(), sa, sb, |o, ia, ib| {
                            ga[ia] += if is_mul { g[o] * bd[ib] } else { da * g[o] };
                        });
                    }
                    if let Some(gb) = acc(nodes, &mut grads, *b) {
                        for_each_broadcast(node.value.shape(), sa, sb, |o, ia, ib| {
                            gb[ib] += if is_mul { g[o] * ad[ia] } else { db * g[o] };
                        });
                    }
                }
                Op::Scale { a, factor } => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi * factor);
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::Log(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] / x[i];
                        }
                    }
                }
                Op::Softmax(a) => {
                    let n = *node.value.shape().last().unwrap();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let n = *node.value.shape().last().unwrap();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                            let total: f64 = gr.iter().sum();
                            for j in 0..n {
                                dr[j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
                Op::Embedding { table, indices } => {
                    let dim = nodes[table.0].value.shape()[1];
                    if let Some(gt) = acc(nodes, &mut grads, *table) {
                        for (r, &i) in indices.iter().enumerate() {
                            for j in 0..dim {
                                gt[i * dim + j] += g[r * dim + j];
                            }
                        }
                    }
                }
                Op::Stack { inputs, axis } => {
                    let shape = nodes[inputs[0].0].value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis..].iter().product();
                    let k = inputs.len();
                    for (j, &v) in inputs.iter().enumerate() {
                        if let Some(gv) = acc(nodes, &mut grads, v) {
                            for o in 0..outer {
                                let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                                for (d, s) in gv[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                Op::Select { a, axis, index } => {
                    let shape = nodes[a.0].value.shape();
                    let k = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for o in 0..outer {
                            let dst = &mut ga[(o * k + index) * inner..(o * k + index + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        ga.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Dropout { a, mask } => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * mask[i];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let n = *node.value.shape().last().unwrap();
                    let gd = nodes[gain.0].value.data();
                    if let Some(gg) = acc(nodes, &mut grads, *gain) {
                        for (gr, xr) in g.chunks(n).zip(normalized.chunks(n)) {
                            for j in 0..n {
                                gg[j] += gr[j] * xr[j];
                            }
                        }
                    }
                    if let Some(gb) = acc(nodes, &mut grads, *bias) {
                        for gr in g.chunks(n) {
                            for j in 0..n {
                                gb[j] += gr[j];
                            }
                        }
                    }
                    if let Some(gx) = acc(nodes, &mut grads, *x) {
                        let nf = n as f64;
                        for (r, ((gr, xr), dr)) in g
                            .chunks(n)
                            .zip(normalized.chunks(n))
                            .zip(gx.chunks_mut(n))
                            .enumerate()
                        {
                            let dxh: Vec<f64> = (0..n).map(|j| gr[j] * gd[j]).collect();
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dr[j] += inv_std[r] / nf * (nf * dxh[j] - s1 - xr[j] * s2);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        ga.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        ga.iter_mut().for_each(|d| *d += g[0] / n);
                    }
                }
                Op::MeanAxis { a, axis } => {
                    let shape = nodes[a.0].value.shape();
                    let k = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for o in 0..outer {
                            for j in 0..k {
                                let dst = &mut ga[(o * k + j) * inner..(o * k + j + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += s / k as f64;
                                }
                            }
                        }
                    }
                }
                Op::Pick { a, indices } => {
                    let n = *nodes[a.0].value.shape().last().unwrap();
                    if let Some(ga) = acc(nodes, &mut grads, *a) {
                        for (r, &i) in indices.iter().enumerate() {
                            ga[r * n + i] += g[r];
                        }
                    }
                }
            }
        }
        self.nodes.clear();
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Gradient buffer for `v`, allocated on first use; `None` for constants.
fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backward_matmul(nodes: &[Node], grads: &mut [Option<Vec<f64>>], g: &[f64], a: Var, b: Var, trans_b: bool) {
    let sa = nodes[a.0].value.shape();
    let sb = nodes[b.0].value.shape();
    let k = *sa.last().unwrap();
    let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
    let batched = sb.len() == 3;
    let (batch, m) = if batched {
        (sa[0], sa[1])
    } else {
        (1, nodes[a.0].value.numel() / k)
    };
    let ad = nodes[a.0].value.data();
    let bd = nodes[b.0].value.data();
    if let Some(ga) = acc(nodes, grads, a) {
        for bi in 0..batch {
            let gs = &g[bi * m * n..(bi + 1) * m * n];
            let bs = if batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
            // dA = dC · op(B)ᵀ
            gemm(m, n, k, gs, false, bs, !trans_b, &mut ga[bi * m * k..(bi + 1) * m * k]);
        }
    }
    if let Some(gb) = acc(nodes, grads, b) {
        for bi in 0..batch {
            let gs = &g[bi * m * n..(bi + 1) * m * n];
            let as_ = &ad[bi * m * k..(bi + 1) * m * k];
            let dst = if batched {
                &mut gb[bi * k * n..(bi + 1) * k * n]
            } else {
                &mut gb[..]
            };
            if trans_b {
                // B is stored [n, k]: dB = dCᵀ · A
                gemm(n, m, k, gs, true, as_, false, dst);
            } else {
                gemm(k, m, n, as_, true, gs, false, dst);
            }
        }
    }
}

/// `c[m, n] += op(a)[m, k] · op(b)[k, n]`, where `ta`/`tb` mean the operand is
/// stored transposed (`a` as `[k, m]`, `b` as `[n, k]`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *cv += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = s;
        }
        s *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if sa == sb {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let stra = broadcast_strides(sa, out);
    let strb = broadcast_strides(sb, out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += stra[d];
            ib += strb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= stra[d] * out[d];
            ib -= strb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut g = Graph::new();
        let base = vec![0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 1000.0).collect();
        let a = g.constant(Tensor::from_vec(base)).unwrap();
        let b = g.constant(Tensor::from_vec(shifted)).unwrap();
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        close(g.value(sa).data(), g.value(sb).data(), 1e-12);
        let total: f64 = g.value(sb).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 3.0])).unwrap();
        let gain = g.constant(Tensor::full(&[2], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        close(g.value(y).data(), &[-1.0, 1.0], 1e-7);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3], 4.2)).unwrap();
        let gain = g.constant(Tensor::full(&[3], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25, 0.25, 0.25]);
        assert!(g.is_empty());
    }

    #[test]
    fn linear_gradient_is_coefficient() {
        let mut g = Graph::new();
        let c = vec![1.5, -2.0, 0.25];
        let x = g.param(Tensor::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        let cv = g.constant(Tensor::from_vec(c.clone())).unwrap();
        let p = g.mul(cv, x).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), c.as_slice());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[4, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Graph::new();
        assert_eq!(
            g.constant(Tensor::from_vec(vec![1.0, f64::NAN])).unwrap_err(),
            TensorError::NonFinite { op: "leaf" }
        );
        let z = g.constant(Tensor::from_vec(vec![0.0])).unwrap();
        assert_eq!(g.log(z).unwrap_err(), TensorError::NonFinite { op: "log" });
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
        let mut empty = Graph::new();
        assert_eq!(empty.backward(Var(0)).unwrap_err(), TensorError::EmptyGraph);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let before = g.len();
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        assert_eq!(g.len(), before);
    }

    #[test]
    fn dropout_rate_and_rescale() {
        let mut g = Graph::new();
        let mut rng = Rng::new(3);
        let p = 0.3;
        let n = 100_000;
        let x = g.constant(Tensor::full(&[n], 1.0)).unwrap();
        let y = g.dropout(x, p, true, &mut rng).unwrap();
        let vals = g.value(y).data();
        let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - p).abs() < 0.02, "zero fraction {zeros}");
        let keep = 1.0 / (1.0 - p);
        assert!(vals.iter().all(|&v| v == 0.0 || v == keep));
    }

    #[test]
    fn stack_select_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let s = g.stack(&[a, b], 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 2]);
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let parts = g.unstack(s, 1).unwrap();
        assert_eq!(g.value(parts[0]).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(parts[1]).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn broadcast_bias_add() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap()).unwrap();
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            g.embedding(t, &[0, 3], &[2]),
            Err(TensorError::IndexOutOfRange { index: 3, extent: 3, .. })
        ));
    }
}
