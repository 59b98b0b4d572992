//! Reverse-mode differentiation over a linear tape of primitive operations.
//!
//! Every primitive is recorded together with its inputs, so the tape can be
//! replayed forward (reproducing each output bit-exactly) or traversed
//! backward once to produce vector-Jacobian products.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, AttentionMask};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `x[r×c] + b[c]`
    AddRow,
    /// `x[r×c] ⊙ g[c]`
    MulRow,
    /// `x[r×c] ⊙ s[r]` (each row scaled by its own scalar)
    ScaleRows,
    Sum,
    Mean,
    Softmax {
        axis: usize,
    },
    LayerNorm {
        eps: f64,
    },
    Attention {
        scale: f64,
        mask: AttentionMask,
    },
    Rope {
        positions: Vec<usize>,
    },
    Gelu,
    ClampLog {
        floor: f64,
    },
    SliceRows {
        start: usize,
        len: usize,
    },
    ConcatRows,
    SliceCols {
        start: usize,
        len: usize,
    },
    ConcatCols,
    Reshape {
        shape: Vec<usize>,
    },
    Element {
        index: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::ScaleRows => "scale_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Rope { .. } => "rope",
            Op::Gelu => "gelu",
            Op::ClampLog { .. } => "clamp_log",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::Reshape { .. } => "reshape",
            Op::Element { .. } => "element",
        }
    }

    fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        let out = match self {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::Matmul => {
                let (a, b) = (x[0], x[1]);
                let (m, k) = dims2(a);
                let (k2, n) = dims2(b);
                if a.rank() != 2 || b.rank() != 2 || k != k2 {
                    return Err(mismatch("matmul", a, b));
                }
                Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
            }
            Op::Transpose => {
                let (r, c) = dims2(x[0]);
                Tensor::new(&[c, r], kernels::transpose(x[0].data(), r, c))?
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (x[0], x[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(self.name(), a, b));
                }
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |p, q| p + q,
                    Op::Sub => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(a.shape(), data)?
            }
            Op::Scale(c) => Tensor::new(x[0].shape(), x[0].data().iter().map(|v| v * c).collect())?,
            Op::AddRow | Op::MulRow => {
                let (a, b) = (x[0], x[1]);
                let (_, c) = a.matrix_dims();
                if b.numel() != c {
                    return Err(mismatch(self.name(), a, b));
                }
                let add = matches!(self, Op::AddRow);
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if add { v + b.data()[i % c] } else { v * b.data()[i % c] })
                    .collect();
                Tensor::new(a.shape(), data)?
            }
            Op::ScaleRows => {
                let (a, s) = (x[0], x[1]);
                let (r, c) = a.matrix_dims();
                if s.numel() != r {
                    return Err(mismatch("scale_rows", a, s));
                }
                let data = a.data().iter().enumerate().map(|(i, &v)| v * s.data()[i / c]).collect();
                Tensor::new(a.shape(), data)?
            }
            Op::Sum => Tensor::scalar(x[0].data().iter().sum())?,
            Op::Mean => Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].numel() as f64)?,
            Op::Softmax { axis } => {
                if *axis >= x[0].rank() {
                    return Err(Error::Shape {
                        shape: x[0].shape().to_vec(),
                        reason: format!("softmax axis {axis} out of range"),
                    });
                }
                Tensor::new(x[0].shape(), kernels::softmax(x[0].data(), x[0].shape(), *axis))?
            }
            Op::LayerNorm { eps } => {
                let (a, g, b) = (x[0], x[1], x[2]);
                let (rows, d) = a.matrix_dims();
                if d < 2 {
                    return Err(Error::DegenerateRow(d));
                }
                if g.numel() != d || b.numel() != d {
                    return Err(mismatch("layer_norm", a, g));
                }
                Tensor::new(
                    a.shape(),
                    kernels::layer_norm(a.data(), g.data(), b.data(), rows, d, *eps),
                )?
            }
            Op::Attention { scale, mask } => {
                let (q, k, v) = (x[0], x[1], x[2]);
                let (lq, d) = dims2(q);
                let (lk, dk) = dims2(k);
                let (lv, dv) = dims2(v);
                if d != dk {
                    return Err(mismatch("attention q/k", q, k));
                }
                if lk != lv {
                    return Err(mismatch("attention k/v", k, v));
                }
                mask.validate(lq, lk)?;
                let (out, _) = kernels::attention(q.data(), k.data(), v.data(), lq, lk, d, dv, *scale, mask)?;
                Tensor::new(&[lq, dv], out)?
            }
            Op::Rope { positions } => {
                let (rows, d) = dims2(x[0]);
                if d % 2 != 0 {
                    return Err(Error::ChannelParity(d));
                }
                if positions.len() != rows {
                    return Err(Error::Dimension {
                        op: "rope",
                        lhs: x[0].shape().to_vec(),
                        rhs: vec![positions.len()],
                    });
                }
                Tensor::new(x[0].shape(), kernels::rope(x[0].data(), positions, d, 1.0))?
            }
            Op::Gelu => Tensor::new(x[0].shape(), x[0].data().iter().map(|&v| kernels::gelu(v)).collect())?,
            Op::ClampLog { floor } => {
                Tensor::new(x[0].shape(), x[0].data().iter().map(|&v| v.max(*floor).ln()).collect())?
            }
            Op::SliceRows { start, len } => {
                let (rows, c) = dims2(x[0]);
                if start + len > rows || *len == 0 {
                    return Err(Error::Shape {
                        shape: x[0].shape().to_vec(),
                        reason: format!("row slice {start}..{} out of range", start + len),
                    });
                }
                Tensor::new(&[*len, c], x[0].data()[start * c..(start + len) * c].to_vec())?
            }
            Op::ConcatRows => {
                let c = dims2(x[0]).1;
                let mut data = Vec::new();
                let mut rows = 0;
                for t in x {
                    let (r, tc) = dims2(t);
                    if tc != c || t.rank() != 2 {
                        return Err(mismatch("concat_rows", x[0], t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::new(&[rows, c], data)?
            }
            Op::SliceCols { start, len } => {
                let (rows, c) = dims2(x[0]);
                if start + len > c || *len == 0 {
                    return Err(Error::Shape {
                        shape: x[0].shape().to_vec(),
                        reason: format!("column slice {start}..{} out of range", start + len),
                    });
                }
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&x[0].data()[r * c + start..r * c + start + len]);
                }
                Tensor::new(&[rows, *len], data)?
            }
            Op::ConcatCols => {
                let rows = dims2(x[0]).0;
                let widths: Vec<usize> = x.iter().map(|t| dims2(t).1).collect();
                for t in x {
                    if dims2(t).0 != rows || t.rank() != 2 {
                        return Err(mismatch("concat_cols", x[0], t));
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (t, &w) in x.iter().zip(&widths) {
                        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                }
                Tensor::new(&[rows, total], data)?
            }
            Op::Reshape { shape } => x[0].reshape(shape)?.with_requires_grad(false),
            Op::Element { index } => {
                if *index >= x[0].numel() {
                    return Err(Error::Shape {
                        shape: x[0].shape().to_vec(),
                        reason: format!("element {index} out of range"),
                    });
                }
                Tensor::scalar(x[0].data()[*index])?
            }
        };
        Ok(out)
    }

    /// Gradients w.r.t. each input given the upstream gradient `g` of the output.
    fn vjp(&self, x: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul => {
                let (a, b) = (x[0], x[1]);
                let (m, k) = dims2(a);
                let n = dims2(b).1;
                vec![
                    kernels::matmul_nt(g, b.data(), m, n, k),
                    kernels::matmul_tn(a.data(), g, m, k, n),
                ]
            }
            Op::Transpose => {
                let (r, c) = dims2(x[0]);
                vec![kernels::transpose(g, c, r)]
            }
            Op::Add => vec![g.to_vec(), g.to_vec()],
            Op::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
            Op::Mul => vec![
                g.iter().zip(x[1].data()).map(|(a, b)| a * b).collect(),
                g.iter().zip(x[0].data()).map(|(a, b)| a * b).collect(),
            ],
            Op::Scale(c) => vec![g.iter().map(|v| v * c).collect()],
            Op::AddRow => {
                let c = x[1].numel();
                let mut db = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    db[i % c] += v;
                }
                vec![g.to_vec(), db]
            }
            Op::MulRow => {
                let c = x[1].numel();
                let mut db = vec![0.0; c];
                let mut da = vec![0.0; g.len()];
                for (i, v) in g.iter().enumerate() {
                    da[i] = v * x[1].data()[i % c];
                    db[i % c] += v * x[0].data()[i];
                }
                vec![da, db]
            }
            Op::ScaleRows => {
                let (_, c) = x[0].matrix_dims();
                let mut ds = vec![0.0; x[1].numel()];
                let mut da = vec![0.0; g.len()];
                for (i, v) in g.iter().enumerate() {
                    da[i] = v * x[1].data()[i / c];
                    ds[i / c] += v * x[0].data()[i];
                }
                vec![da, ds]
            }
            Op::Sum => vec![vec![g[0]; x[0].numel()]],
            Op::Mean => vec![vec![g[0] / x[0].numel() as f64; x[0].numel()]],
            Op::Softmax { axis } => vec![kernels::softmax_backward(out.data(), g, out.shape(), *axis)],
            Op::LayerNorm { eps } => {
                let (rows, d) = x[0].matrix_dims();
                let (dx, dg, db) = kernels::layer_norm_backward(x[0].data(), x[1].data(), g, rows, d, *eps);
                vec![dx, dg, db]
            }
            Op::Attention { scale, mask } => {
                let (q, k, v) = (x[0], x[1], x[2]);
                let (lq, d) = dims2(q);
                let (lk, dv) = (dims2(k).0, dims2(v).1);
                let (_, probs) = kernels::attention(q.data(), k.data(), v.data(), lq, lk, d, dv, *scale, mask)
                    .expect("forward already validated");
                let (dq, dk, dvv) =
                    kernels::attention_backward(q.data(), k.data(), v.data(), &probs, g, lq, lk, d, dv, *scale);
                vec![dq, dk, dvv]
            }
            Op::Rope { positions } => {
                let d = dims2(x[0]).1;
                vec![kernels::rope(g, positions, d, -1.0)]
            }
            Op::Gelu => vec![g
                .iter()
                .zip(x[0].data())
                .map(|(gv, &v)| gv * kernels::gelu_grad(v))
                .collect()],
            Op::ClampLog { floor } => vec![g
                .iter()
                .zip(x[0].data())
                .map(|(gv, &v)| if v > *floor { gv / v } else { 0.0 })
                .collect()],
            Op::SliceRows { start, len } => {
                let c = dims2(x[0]).1;
                let mut dx = vec![0.0; x[0].numel()];
                dx[start * c..(start + len) * c].copy_from_slice(g);
                vec![dx]
            }
            Op::ConcatRows => {
                let mut offset = 0;
                x.iter()
                    .map(|t| {
                        let n = t.numel();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        part
                    })
                    .collect()
            }
            Op::SliceCols { start, len } => {
                let (rows, c) = dims2(x[0]);
                let mut dx = vec![0.0; x[0].numel()];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![dx]
            }
            Op::ConcatCols => {
                let rows = dims2(x[0]).0;
                let widths: Vec<usize> = x.iter().map(|t| dims2(t).1).collect();
                let total: usize = widths.iter().sum();
                let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (p, &w) in parts.iter_mut().zip(&widths) {
                        p.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                parts
            }
            Op::Reshape { .. } => vec![g.to_vec()],
            Op::Element { index } => {
                let mut dx = vec![0.0; x[0].numel()];
                dx[*index] = g[0];
                vec![dx]
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        _ => t.matrix_dims(),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes whose vector-Jacobian product was evaluated.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

/// An append-only record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf. It participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            inputs: vec![],
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Leaf for a stored parameter; repeated calls return the same [`Var`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    fn record(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&xs)?
        };
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Matmul, vec![a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, vec![a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), vec![a])
    }

    /// Adds a row vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow, vec![a, row])
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow, vec![a, row])
    }

    /// Scales row `i` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        self.record(Op::ScaleRows, vec![a, s])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean, vec![a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::Softmax { axis }, vec![a])
    }

    /// Row-wise layer normalization with [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm { eps }, vec![x, gain, bias])
    }

    /// `softmax(q·kᵀ/√d + mask)·v` for a single head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
        let d = self.value(q).matrix_dims().1;
        let scale = 1.0 / (d as f64).sqrt();
        self.record(
            Op::Attention {
                scale,
                mask: mask.clone(),
            },
            vec![q, k, v],
        )
    }

    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        self.record(
            Op::Rope {
                positions: positions.to_vec(),
            },
            vec![x],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu, vec![x])
    }

    /// `ln(max(x, floor))`.
    pub fn clamp_log(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.record(Op::ClampLog { floor }, vec![x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceRows { start, len }, vec![x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        self.record(Op::ConcatRows, parts.to_vec())
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceCols { start, len }, vec![x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        self.record(Op::ConcatCols, parts.to_vec())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape { shape: shape.to_vec() }, vec![x])
    }

    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        self.record(Op::Element { index }, vec![x])
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all outputs are bit-identical to the recorded ones.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            if !node.op.forward(&xs)?.bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Vector-Jacobian sweep from a scalar `loss`. Each node reachable from
    /// the loss that depends on a gradient-requiring leaf is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            let xs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = node.op.vjp(&xs, &node.value, &g);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
            // keep the seed for the loss itself addressable
            if idx == loss.0 {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Adds the gradient of every parameter leaf into the store's accumulators.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (&id, &var) in &self.params {
            if !store.get(id).requires_grad() {
                continue;
            }
            if let Some(g) = grads.wrt(var) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Runs [`Tape::backward`] and accumulates into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_norm_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rank_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn gradients_accumulate_across_passes() {
        let mut store = ParamStore::new();
        let id = store.register("w", t(&[2], &[1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let s = tape.sum(w).unwrap();
            tape.backward_into(s, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grads();
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.mul(a, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.nodes_visited(), 4);
        // d/dx (2x + 2x²) = 2 + 4x
        assert_eq!(g.wrt(x).unwrap(), &[6.0, 10.0, 14.0]);
        assert!(tape.replay_matches().unwrap());
    }

    #[test]
    fn all_blocked_row_is_an_error() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::ones(&[2, 2]).unwrap());
        let bad = AttentionMask::causal(vec![0]);
        assert!(matches!(tape.attention(q, q, q, &bad), Err(Error::Dimension { .. })));
        // the query at frame 0 sees no key: both keys live at frame 1
        let mask = AttentionMask::causal_cross(vec![0, 1], vec![1, 1]);
        assert!(matches!(
            tape.attention(q, q, q, &mask),
            Err(Error::AllBlocked { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 1]).unwrap());
        let g = tape.constant(Tensor::ones(&[1]).unwrap());
        assert!(matches!(tape.layer_norm(x, g, g), Err(Error::DegenerateRow(1))));
    }

    #[test]
    fn rope_rejects_odd_width() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3]).unwrap());
        assert!(matches!(tape.rope(x, &[1]), Err(Error::ChannelParity(3))));
    }
}
