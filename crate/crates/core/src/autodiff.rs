//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Leaf gradients accumulate
//! across `backward` calls until [`Graph::zero_grad`].
//!
//! Axis-wise operations accept rank-1 and rank-2 tensors only.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-24;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    NormalizeRows(Var),
    NormalizeSum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    MaskFill(Var, Vec<bool>),
    Pick(Var, Vec<usize>),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Lane geometry of an axis reduction: `count` lanes of `len` elements, lane
/// `l` element `k` at flat index `l * lane_stride + k * elem_stride`.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    lane_stride: usize,
    elem_stride: usize,
}

impl Lanes {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        match (shape.len(), axis) {
            (1, 0) => Ok(Lanes {
                count: 1,
                len: shape[0],
                lane_stride: 0,
                elem_stride: 1,
            }),
            (2, 1) => Ok(Lanes {
                count: shape[0],
                len: shape[1],
                lane_stride: shape[1],
                elem_stride: 1,
            }),
            (2, 0) => Ok(Lanes {
                count: shape[1],
                len: shape[0],
                lane_stride: 1,
                elem_stride: shape[1],
            }),
            _ => Err(Error::Contract(format!(
                "{op}: axis {axis} unsupported for shape {shape:?}"
            ))),
        }
    }

    #[inline]
    fn at(&self, lane: usize, k: usize) -> usize {
        lane * self.lane_stride + k * self.elem_stride
    }

    fn reduced_shape(&self) -> Vec<usize> {
        vec![self.count]
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    pins: Vec<Tensor>,
    detached: Vec<Tensor>,
    visited: usize,
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` nodes take, in creation order, the given values
    /// instead of their input's value. Used to evaluate the surrogate function
    /// whose exact gradient a straight-through estimator reports.
    pub fn with_detach_pins(pins: Vec<Tensor>) -> Self {
        let mut pins = pins;
        pins.reverse();
        Graph {
            pins,
            ..Self::default()
        }
    }

    /// Values produced by `detach` nodes so far, in creation order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes the most recent `backward` call processed.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(t, Op::Leaf, requires_grad)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((r, k)), Some((k2, c))) = (matrix_dims(ta), matrix_dims(tb)) else {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta.data(), tb.data(), r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs a matrix, got {:?}",
                t.shape()
            )));
        }
        let out = t.transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let Some((r, c)) = matrix_dims(ta) else {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        };
        if tr.numel() != c {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    /// Replaces masked entries with `fill`; they receive no gradient.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::shape("mask_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskFill(a, mask.to_vec()), rg))
    }

    /// Identity in the forward pass, no gradient in the backward pass.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = match self.pins.pop() {
            Some(pin) => {
                if pin.shape() != self.shape(a) {
                    return Err(Error::shape("detach pin", self.shape(a), pin.shape()));
                }
                pin
            }
            None => self.value(a).clone(),
        };
        self.detached.push(value.clone());
        Ok(self.push(value, Op::Detach, false))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let lanes = Lanes::of("sum_axis", t.shape(), axis)?;
        let d = t.data();
        let out: Vec<f64> = (0..lanes.count)
            .map(|l| (0..lanes.len).map(|k| d[lanes.at(l, k)]).sum())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(lanes.reduced_shape(), out)?,
            Op::SumAxis(a, axis),
            rg,
        ))
    }

    /// Maximum along `axis`, with the lane-local position of each maximum
    /// (first occurrence on ties).
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let t = self.value(a);
        let lanes = Lanes::of("max_axis", t.shape(), axis)?;
        if lanes.len == 0 {
            return Err(Error::Contract("max_axis over an empty axis".into()));
        }
        let d = t.data();
        let mut vals = Vec::with_capacity(lanes.count);
        let mut args = Vec::with_capacity(lanes.count);
        for l in 0..lanes.count {
            let mut best = 0;
            let mut bv = d[lanes.at(l, 0)];
            for k in 1..lanes.len {
                let v = d[lanes.at(l, k)];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            vals.push(bv);
            args.push(best);
        }
        let rg = self.rg(a);
        let v = self.push(
            Tensor::new(lanes.reduced_shape(), vals)?,
            Op::MaxAxis(a, axis, args.clone()),
            rg,
        );
        Ok((v, args))
    }

    // ── normalizations ──────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let lanes = Lanes::of("softmax", t.shape(), axis)?;
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for l in 0..lanes.count {
            let m = (0..lanes.len)
                .map(|k| d[lanes.at(l, k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..lanes.len {
                let e = (d[lanes.at(l, k)] - m).exp();
                out[lanes.at(l, k)] = e;
                z += e;
            }
            for k in 0..lanes.len {
                out[lanes.at(l, k)] /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let lanes = Lanes::of("log_softmax", t.shape(), axis)?;
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for l in 0..lanes.count {
            let m = (0..lanes.len)
                .map(|k| d[lanes.at(l, k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m
                + (0..lanes.len)
                    .map(|k| (d[lanes.at(l, k)] - m).exp())
                    .sum::<f64>()
                    .ln();
            for k in 0..lanes.len {
                out[lanes.at(l, k)] = d[lanes.at(l, k)] - lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let lanes = Lanes::of("normalize_rows", t.shape(), t.rank() - 1)?;
        let d = t.data();
        let mut out = d.to_vec();
        for l in 0..lanes.count {
            let n = ((0..lanes.len)
                .map(|k| d[lanes.at(l, k)].powi(2))
                .sum::<f64>()
                + NORM_EPS)
                .sqrt();
            for k in 0..lanes.len {
                out[lanes.at(l, k)] /= n;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    /// Divides a vector by its sum.
    pub fn normalize_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        if s == 0.0 {
            return Err(Error::Contract(format!("normalize_sum: total is {s}")));
        }
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x / s).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeSum(a), rg))
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let Some((r, c)) = matrix_dims(t) else {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = t.data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ── indexing ────────────────────────────────────────────────────

    /// Selects rows of a matrix by index (embedding lookup, row slicing).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let Some((r, c)) = matrix_dims(t) else {
            return Err(Error::shape("gather_rows", t.shape(), &[ids.len()]));
        };
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::Contract(format!(
                    "gather_rows: row {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], data)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || t.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if matrix_dims(t).map(|(rr, _)| rr) != Some(r) {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let Some((r, c)) = matrix_dims(t) else {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        };
        if start > end || end > c {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![r, w], data)?,
            Op::SliceCols(a, start, end),
            rg,
        ))
    }

    /// Picks entry `(i, cols[i])` of every row, giving a vector.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let Some((r, c)) = matrix_dims(t) else {
            return Err(Error::shape("pick", t.shape(), &[cols.len()]));
        };
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick", t.shape(), &[cols.len()]));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::Pick(a, cols.to_vec()), rg))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulates d(root)/d(leaf) into every gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let mut visited = 0;

        fn slot<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    let acc = self.leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Detach => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (r, k) = matrix_dims(ta).expect("matrix");
                    let c = tb.cols();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        // gA = gC · Bᵀ
                        let bd = tb.data();
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let brow = &bd[p * c..(p + 1) * c];
                                ga[i * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        // gB = Aᵀ · gC
                        let ad = ta.data();
                        for i in 0..r {
                            let grow = &g[i * c..(i + 1) * c];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(gv) = slot(&mut grads, nodes, *v) {
                            gv.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(o, x)| *o -= x);
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * db[i];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for i in 0..g.len() {
                            gb[i] += g[i] * da[i];
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                    if let Some(gr) = slot(&mut grads, nodes, *row) {
                        let c = gr.len();
                        for (i, x) in g.iter().enumerate() {
                            gr[i % c] += x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += s * x);
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                Op::SumAxis(a, axis) => {
                    let lanes = Lanes::of("sum_axis", nodes[a.0].value.shape(), *axis)?;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for l in 0..lanes.count {
                            for k in 0..lanes.len {
                                ga[lanes.at(l, k)] += g[l];
                            }
                        }
                    }
                }
                Op::MaxAxis(a, axis, args) => {
                    let lanes = Lanes::of("max_axis", nodes[a.0].value.shape(), *axis)?;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (l, &k) in args.iter().enumerate() {
                            ga[lanes.at(l, k)] += g[l];
                        }
                    }
                }
                Op::Log(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            // exact zeros arise where log(0) = -inf fed a softmax
                            if g[i] != 0.0 {
                                ga[i] += g[i] / x[i];
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i];
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            let xi = x[i];
                            let t = (GELU_C * (xi + 0.044715 * xi * xi * xi)).tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5
                                    * xi
                                    * (1.0 - t * t)
                                    * GELU_C
                                    * (1.0 + 3.0 * 0.044715 * xi * xi);
                            ga[i] += g[i] * d;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = matrix_dims(&nodes[a.0].value).expect("matrix");
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    }
                }
                Op::Softmax(a, axis) => {
                    let lanes = Lanes::of("softmax", node.value.shape(), *axis)?;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for l in 0..lanes.count {
                            let dotp: f64 = (0..lanes.len)
                                .map(|k| g[lanes.at(l, k)] * y[lanes.at(l, k)])
                                .sum();
                            for k in 0..lanes.len {
                                let i = lanes.at(l, k);
                                ga[i] += y[i] * (g[i] - dotp);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a, axis) => {
                    let lanes = Lanes::of("log_softmax", node.value.shape(), *axis)?;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for l in 0..lanes.count {
                            let gsum: f64 = (0..lanes.len).map(|k| g[lanes.at(l, k)]).sum();
                            for k in 0..lanes.len {
                                let i = lanes.at(l, k);
                                ga[i] += g[i] - y[i].exp() * gsum;
                            }
                        }
                    }
                }
                Op::NormalizeRows(a) => {
                    let x = &nodes[a.0].value;
                    let lanes = Lanes::of("normalize_rows", x.shape(), x.rank() - 1)?;
                    let xd = x.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for l in 0..lanes.count {
                            let n = ((0..lanes.len)
                                .map(|k| xd[lanes.at(l, k)].powi(2))
                                .sum::<f64>()
                                + NORM_EPS)
                                .sqrt();
                            let gy: f64 = (0..lanes.len)
                                .map(|k| g[lanes.at(l, k)] * y[lanes.at(l, k)])
                                .sum();
                            for k in 0..lanes.len {
                                let i = lanes.at(l, k);
                                ga[i] += (g[i] - y[i] * gy) / n;
                            }
                        }
                    }
                }
                Op::NormalizeSum(a) => {
                    let s: f64 = nodes[a.0].value.data().iter().sum();
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            ga[i] += (g[i] - gy) / s;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = matrix_dims(&node.value).expect("matrix");
                    let gam = nodes[gamma.0].value.data();
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for i in 0..r * c {
                            gg[i % c] += g[i] * xhat[i];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for i in 0..r * c {
                            gb[i % c] += g[i];
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let cf = c as f64;
                        for i in 0..r {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                let gh = g[i * c + j] * gam[j];
                                s1 += gh;
                                s2 += gh * xhat[i * c + j];
                            }
                            for j in 0..c {
                                let gh = g[i * c + j] * gam[j];
                                gx[i * c + j] +=
                                    inv_std[i] / cf * (cf * gh - s1 - xhat[i * c + j] * s2);
                            }
                        }
                    }
                }
                Op::GatherRows(table, ids) => {
                    let c = nodes[table.0].value.cols();
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        for (k, &row) in ids.iter().enumerate() {
                            for j in 0..c {
                                gt[row * c + j] += g[k * c + j];
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.numel();
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            gp.iter_mut()
                                .zip(&g[off..off + len])
                                .for_each(|(o, x)| *o += x);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = matrix_dims(&node.value).expect("matrix");
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            for i in 0..r {
                                for j in 0..w {
                                    gp[i * w + j] += g[i * total + off + j];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = matrix_dims(&nodes[a.0].value).expect("matrix");
                    let w = end - start;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..r {
                            for j in 0..w {
                                ga[i * c + start + j] += g[i * w + j];
                            }
                        }
                    }
                }
                Op::MaskFill(a, mask) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            if !mask[i] {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::Pick(a, cols) => {
                    let c = nodes[a.0].value.cols();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (i, &j) in cols.iter().enumerate() {
                            ga[i * c + j] += g[i];
                        }
                    }
                }
            }
        }
        self.visited = visited;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central-difference gradient of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    /// Checks d(build(x))/dx against finite differences.
    fn check_unary(shape: &[usize], seed: u64, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let out = build(&mut g, v);
            g.scalar_value(out)
        };
        let mut g = Graph::new();
        let v = g.param(x0.clone());
        let out = build(&mut g, v);
        g.backward(out).unwrap();
        let analytic = g.grad(v).unwrap().to_vec();
        let numeric = numeric_grad(&x0, &eval);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "relative error {e}: {analytic:?} vs {numeric:?}");
    }

    /// Projects an arbitrary-shape output to a scalar with fixed weights so
    /// every output entry influences the checked gradient.
    fn weighted_sum(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).numel();
        let shape = g.shape(v).to_vec();
        let w: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let w = g.constant(Tensor::new(shape, w).unwrap());
        g.dot(v, w).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let col = g.constant(Tensor::matrix(2, 1, vec![2.0, 5.0]).unwrap());
        let p = g.matmul(sel, col).unwrap();
        assert_eq!(g.value(p).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[5, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let b2 = b.clone();
        check_unary(&[3, 4], 12, &move |g, a| {
            let bv = g.constant(b2.clone());
            let p = g.matmul(a, bv).unwrap();
            g.sum(p)
        });
        let a = rand_tensor(&mut rng, &[3, 4]);
        check_unary(&[4, 2], 13, &move |g, b| {
            let av = g.constant(a.clone());
            let p = g.matmul(av, b).unwrap();
            weighted_sum(g, p)
        });
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[8, 8]);
            let b = rand_tensor(&mut rng, &[8, 8]);
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let p = g.matmul(va, vb).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += a.get(i, k) * b.get(k, j);
                    }
                    assert!((g.value(p).get(i, j) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert!(g.value(s).all_finite());
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
        assert!(g.value(s).data()[1] < 1e-300);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        // exp(k) / (e + e^2 + e^3), evaluated directly
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (v, e) in g.value(s).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!((expect[0] - 0.09003).abs() < 5e-6);
        assert!((expect[1] - 0.24473).abs() < 5e-6);
        assert!((expect[2] - 0.66524).abs() < 5e-6);
    }

    #[test]
    fn softmax_along_both_axes_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, &[3, 5]);
        let mut g = Graph::new();
        let x = g.constant(t);
        for axis in [0, 1] {
            let s = g.softmax(x, axis).unwrap();
            let sums = g.sum_axis(s, axis).unwrap();
            for v in g.value(sums).data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_self_dot_is_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.dot(x, x).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let d = g.dot(x, x).unwrap();
        g.backward(d).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let c = g.add(b, a).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.nodes_visited(), g.len());
        // d/dx (2x^2 + x) = 4x + 1
        assert_eq!(g.grad(x).unwrap(), &[5.0, 9.0]);
    }

    #[test]
    fn detach_blocks_gradient_and_honours_pins() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let d = g.detach(x).unwrap();
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.detached_values()[0].data(), &[3.0]);

        let mut g = Graph::with_detach_pins(vec![Tensor::vector(vec![10.0])]);
        let x = g.param(Tensor::vector(vec![3.0]));
        let d = g.detach(x).unwrap();
        assert_eq!(g.value(d).data(), &[10.0]);
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let cases: Vec<(&[usize], Box<dyn Fn(&mut Graph, Var) -> Var>)> = vec![
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.exp(x);
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.tanh(x);
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.gelu(x);
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.mul(x, x).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.transpose(x).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.sum_axis(x, 0).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.sum_axis(x, 1).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let (y, _) = g.max_axis(x, 1).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let (y, _) = g.max_axis(x, 0).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.softmax(x, 1).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.softmax(x, 0).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.log_softmax(x, 1).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.normalize_rows(x).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 6]).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.slice_cols(x, 1, 3).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let y = g.pick(x, &[3, 0, 1]).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let m = [
                        true, false, false, true, false, false, false, false, true, false, false,
                        false,
                    ];
                    let y = g.mask_fill(x, &m, -5.0).unwrap();
                    weighted_sum(g, y)
                }),
            ),
            (
                &[3, 4],
                Box::new(|g, x| {
                    let a = g.slice_cols(x, 0, 2).unwrap();
                    let b = g.slice_cols(x, 2, 4).unwrap();
                    let y = g.concat_cols(&[b, a]).unwrap();
                    let z = g.concat_rows(&[a, b]).unwrap();
                    let wy = weighted_sum(g, y);
                    let wz = weighted_sum(g, z);
                    g.add(wy, wz).unwrap()
                }),
            ),
            (
                &[4],
                Box::new(|g, x| {
                    let e = g.exp(x);
                    let y = g.normalize_sum(e).unwrap();
                    let l = g.log(y);
                    weighted_sum(g, l)
                }),
            ),
            (
                &[4],
                Box::new(|g, x| {
                    let y = g.relu(x);
                    let z = g.scale(y, 3.0);
                    weighted_sum(g, z)
                }),
            ),
        ];
        for (seed, (shape, build)) in cases.iter().enumerate() {
            check_unary(shape, 100 + seed as u64, build.as_ref());
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = rand_tensor(&mut rng, &[5]);
        let beta = rand_tensor(&mut rng, &[5]);
        let x0 = rand_tensor(&mut rng, &[3, 5]);
        let (g1, b1) = (gamma.clone(), beta.clone());
        check_unary(&[3, 5], 21, &move |g, x| {
            let ga = g.constant(g1.clone());
            let be = g.constant(b1.clone());
            let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y)
        });
        let (x1, b1) = (x0.clone(), beta.clone());
        check_unary(&[5], 22, &move |g, ga| {
            let x = g.constant(x1.clone());
            let be = g.constant(b1.clone());
            let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y)
        });
        check_unary(&[5], 23, &move |g, be| {
            let x = g.constant(x0.clone());
            let ga = g.constant(gamma.clone());
            let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn add_row_gradient_reaches_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[3, 4]);
        check_unary(&[4], 31, &move |g, b| {
            let av = g.constant(a.clone());
            let y = g.add_row(av, b).unwrap();
            let y = g.tanh(y);
            weighted_sum(g, y)
        });
    }
}
