//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so node ids are already a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to tensor-vs-scalar. Row-wise bias and gain use
//! the explicit [`Tape::add_row`] / [`Tape::mul_row`] ops.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value that masked positions take in [`Tape::masked_fill`].
pub const MASK_SENTINEL: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    MaskedFill { x: Var, keep: Vec<bool> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Nodes that require grad but sit off
    /// every path to the loss get zeros.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        })
    }

    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `shape` split around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn last_dim(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    (t.numel() / cols.max(1), cols)
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x > 709.0) {
            return Err(Error::Domain {
                op: "exp",
                msg: format!("overflow at input {x}"),
            });
        }
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {x}"),
            });
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    /// `ln(1 + eˣ)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// `x[i, :] + row` for every row `i` of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_op(x, row, "add_row", |a, b| a + b)?;
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// `x[i, :] * row` elementwise for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_op(x, row, "mul_row", |a, b| a * b)?;
        let rg = self.rg(&[x, row]);
        self.push(out, Op::MulRow(x, row), rg)
    }

    fn row_op(&self, x: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (_, cols) = tx.dims2()?;
        if tr.numel() != cols {
            return Err(Error::mismatch(name, tx.shape(), tr.shape()));
        }
        let data = tx
            .data()
            .chunks(cols)
            .flat_map(|r| r.iter().zip(tr.data()).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>())
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, cols) = last_dim(t);
        let data = t
            .data()
            .chunks(cols)
            .flat_map(crate::tensor::softmax_slice)
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` with the
    /// biased variance. The affine part of layer norm is left to the caller.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        let mut out = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in t.data().chunks(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(r.iter().map(|x| (x - mean) * inv));
            inv_std.push(inv);
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows { x: a, inv_std }, rg)
    }

    /// Keeps entries where `keep` is true and writes [`MASK_SENTINEL`]
    /// elsewhere. `keep` is data; no gradient flows through it.
    pub fn masked_fill(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if keep.len() != t.numel() {
            return Err(Error::mismatch("masked_fill", t.shape(), &[keep.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { MASK_SENTINEL })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push(
            out,
            Op::MaskedFill {
                x: a,
                keep: keep.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
        let (_, cols) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if c != cols {
                return Err(Error::mismatch("concat_rows", self.shape(first), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "nothing to concatenate"))?;
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        if len == 0 || start + len > rows {
            return Err(Error::OutOfBounds {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {rows}", start + len),
            });
        }
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { x: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::OutOfBounds {
                op: "slice_cols",
                msg: format!("cols {start}..{} of {cols}", start + len),
            });
        }
        let data = t
            .data()
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x: a, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Sum over `axis`, or over everything (rank-0 result) when `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.reduce(a, axis, false)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum { x: a, axis }, rg)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.reduce(a, axis, true)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean { x: a, axis }, rg)
    }

    fn reduce(&self, a: Var, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let t = self.value(a);
        match axis {
            None => {
                let s = t.sum_all();
                Ok(Tensor::scalar(if mean { s / t.numel() as f64 } else { s }))
            }
            Some(axis) => {
                let (outer, extent, inner) = axis_split(t.shape(), axis)?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            out[o * inner + i] += t.data()[(o * extent + e) * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|x| *x /= extent as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                if shape.is_empty() {
                    return Ok(Tensor::scalar(out[0]));
                }
                Tensor::new(shape, out)
            }
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let (_, n) = val(b).dims2().unwrap();
                if wants(a) {
                    acc(a, matmul_nt_raw(g, val(b).data(), m, n, k));
                }
                if wants(b) {
                    acc(b, matmul_tn_raw(val(a).data(), g, m, k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (m, k) = val(a).dims2().unwrap();
                let (n, _) = val(b).dims2().unwrap();
                if wants(a) {
                    acc(a, matmul_raw(g, val(b).data(), m, n, k));
                }
                if wants(b) {
                    acc(b, matmul_tn_raw(g, val(a).data(), m, n, k));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = val(a).dims2().unwrap();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                acc(a, out);
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddScalar(a) => acc(a, g.to_vec()),
            &Op::Scale(a, s) => acc(a, g.iter().map(|x| x * s).collect()),
            &Op::Neg(a) => acc(a, g.iter().map(|x| -x).collect()),
            &Op::Exp(a) => acc(a, g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect()),
            &Op::Log(a) => acc(a, g.iter().zip(val(a).data()).map(|(x, y)| x / y).collect()),
            &Op::Softplus(a) => acc(
                a,
                g.iter().zip(val(a).data()).map(|(x, &y)| x * sigmoid(y)).collect(),
            ),
            &Op::Gelu(a) => acc(
                a,
                g.iter().zip(val(a).data()).map(|(x, &y)| x * gelu_grad(y)).collect(),
            ),
            &Op::AddRow(x, row) => {
                acc(x, g.to_vec());
                if wants(row) {
                    let cols = val(row).numel();
                    let mut gr = vec![0.0; cols];
                    for r in g.chunks(cols) {
                        gr.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    acc(row, gr);
                }
            }
            &Op::MulRow(x, row) => {
                let cols = val(row).numel();
                if wants(x) {
                    let rv = val(row).data();
                    acc(
                        x,
                        g.chunks(cols)
                            .flat_map(|r| r.iter().zip(rv).map(|(a, b)| a * b).collect::<Vec<_>>())
                            .collect(),
                    );
                }
                if wants(row) {
                    let mut gr = vec![0.0; cols];
                    for (gc, xc) in g.chunks(cols).zip(val(x).data().chunks(cols)) {
                        for j in 0..cols {
                            gr[j] += gc[j] * xc[j];
                        }
                    }
                    acc(row, gr);
                }
            }
            &Op::Softmax(a) => {
                let (_, cols) = last_dim(&node.value);
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(node.value.data().chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    out.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                acc(a, out);
            }
            Op::NormalizeRows { x, inv_std } => {
                let (_, cols) = node.value.dims2().unwrap();
                let nf = cols as f64;
                let mut out = Vec::with_capacity(g.len());
                for ((gr, yr), &inv) in g.chunks(cols).zip(node.value.data().chunks(cols)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    out.extend(gr.iter().zip(yr).map(|(gi, yi)| inv * (gi - mean_g - yi * mean_gy)));
                }
                acc(*x, out);
            }
            Op::MaskedFill { x, keep } => {
                acc(*x, g.iter().zip(keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (_, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = val(p).dims2().unwrap();
                    if wants(p) {
                        acc(
                            p,
                            g.chunks(total).flat_map(|r| r[offset..offset + c].to_vec()).collect(),
                        );
                    }
                    offset += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let src = val(x);
                let (_, cols) = src.dims2().unwrap();
                let mut out = vec![0.0; src.numel()];
                out[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(x, out);
            }
            &Op::SliceCols { x, start } => {
                let src = val(x);
                let (_, cols) = src.dims2().unwrap();
                let (_, len) = node.value.dims2().unwrap();
                let mut out = vec![0.0; src.numel()];
                for (o, gr) in out.chunks_mut(cols).zip(g.chunks(len)) {
                    o[start..start + len].copy_from_slice(gr);
                }
                acc(x, out);
            }
            &Op::Reshape(a) => acc(a, g.to_vec()),
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let src = val(x);
                let out = match axis {
                    None => {
                        let v = if mean { g[0] / src.numel() as f64 } else { g[0] };
                        vec![v; src.numel()]
                    }
                    Some(axis) => {
                        let (outer, extent, inner) = axis_split(src.shape(), axis).unwrap();
                        let div = if mean { extent as f64 } else { 1.0 };
                        let mut out = vec![0.0; src.numel()];
                        for o in 0..outer {
                            for e in 0..extent {
                                for i in 0..inner {
                                    out[(o * extent + e) * inner + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        out
                    }
                };
                acc(x, out);
            }
        }
    }
}
