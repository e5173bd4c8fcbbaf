//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is an append-only tape. Each method evaluates one primitive
//! eagerly and records how to push gradients back through it; [`Graph::backward`]
//! walks the tape in reverse. Shape mismatches are programming errors and panic.
//!
//! In checked mode the first operation producing a NaN or infinity is recorded
//! and surfaced by [`Graph::check`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which grouping a softmax or reduction acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row is one group (reduces over columns, result is `rows × 1`).
    Row,
    /// Each column is one group (reduces over rows, result is `1 × cols`).
    Column,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    Softmax {
        x: Var,
        axis: Axis,
    },
    LogSoftmax {
        x: Var,
        axis: Axis,
    },
    LogSumExp {
        x: Var,
        axis: Axis,
        mask: Option<Vec<bool>>,
    },
    Max {
        x: Var,
        axis: Axis,
        argmax: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        floor: f64,
        norms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    Diag(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBT(..) => "matmul_bt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Max { .. } => "max",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Gather { .. } => "gather",
            Op::Slice { .. } => "slice",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Stack(..) => "stack",
            Op::Diag(..) => "diag",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    checked: bool,
    error: Option<&'static str>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Index of element `t` inside group `g`, and the group length.
fn group_layout(rows: usize, cols: usize, axis: Axis) -> (usize, usize) {
    match axis {
        Axis::Row => (rows, cols),
        Axis::Column => (cols, rows),
    }
}

#[inline]
fn group_index(cols: usize, axis: Axis, g: usize, t: usize) -> usize {
    match axis {
        Axis::Row => g * cols + t,
        Axis::Column => t * cols + g,
    }
}

fn reduced_shape(rows: usize, cols: usize, axis: Axis) -> Vec<usize> {
    match axis {
        Axis::Row => vec![rows, 1],
        Axis::Column => vec![1, cols],
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records the first operation producing a non-finite value.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fails if checked mode saw a non-finite intermediate.
    pub fn check(&self) -> Result<()> {
        match self.error {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.checked && self.error.is_none() && !value.is_finite() {
            self.error = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients flow into but that is not tied to a store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers the named parameter of `store` as a trainable leaf. Repeated
    /// calls with the same name return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters registered through [`Graph::param`], in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let out = tensor::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMulBT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            (ta.rows(), ta.cols()),
            (tb.rows(), tb.cols()),
            "{} shape mismatch",
            op.name()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::matrix(ta.rows(), ta.cols(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b` of shape `1 × cols` to every row of `a`, or `b` of shape
    /// `1 × 1` to every element.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(b);
        assert!(
            br == 1 && (bc == c || bc == 1),
            "add_broadcast: {r}x{c} + {br}x{bc}"
        );
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            *v += if bc == 1 { bv[0] } else { bv[idx % c] };
        }
        let out = out.reshape(vec![r, c]).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddBroadcast(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(a);
        let (groups, len) = group_layout(r, c, axis);
        let x = self.value(a).data();
        let out: Vec<f64> = (0..groups)
            .map(|g| (0..len).map(|t| x[group_index(c, axis, g, t)]).sum())
            .collect();
        let out = Tensor::new(reduced_shape(r, c, axis), out).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::SumAxis(a, axis), rg)
    }

    /// Softmax within each group along `axis`.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(x);
        let out = softmax_values(self.value(x).data(), r, c, axis, None);
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, out).unwrap(), Op::Softmax { x, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let (groups, len) = group_layout(r, c, axis);
        let mut out = vec![0.0; r * c];
        for g in 0..groups {
            let lse = logsumexp_group(xv, c, axis, g, len, None);
            for t in 0..len {
                let idx = group_index(c, axis, g, t);
                out[idx] = xv[idx] - lse;
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::LogSoftmax { x, axis },
            rg,
        )
    }

    /// Log-sum-exp of each group, skipping elements whose `mask` entry is
    /// false. `mask` covers the full input, row-major.
    pub fn logsumexp(&mut self, x: Var, axis: Axis, mask: Option<Vec<bool>>) -> Var {
        let (r, c) = self.dims(x);
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "logsumexp mask length");
        }
        let xv = self.value(x).data();
        let (groups, len) = group_layout(r, c, axis);
        let out: Vec<f64> = (0..groups)
            .map(|g| logsumexp_group(xv, c, axis, g, len, mask.as_deref()))
            .collect();
        let out = Tensor::new(reduced_shape(r, c, axis), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::LogSumExp { x, axis, mask }, rg)
    }

    /// Maximum of each group. The gradient goes to the first maximal element.
    pub fn max(&mut self, x: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let (groups, len) = group_layout(r, c, axis);
        let mut argmax = Vec::with_capacity(groups);
        let mut out = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for t in 0..len {
                let v = xv[group_index(c, axis, g, t)];
                if v > best_v {
                    best_v = v;
                    best = t;
                }
            }
            argmax.push(best);
            out.push(best_v);
        }
        let out = Tensor::new(reduced_shape(r, c, axis), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Max { x, axis, argmax }, rg)
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn normalize_rows(&mut self, x: Var, floor: f64) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let n = tensor::dot(row, row).sqrt();
            norms.push(n);
            let denom = n.max(floor);
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::NormalizeRows { x, floor, norms },
            rg,
        )
    }

    /// Row `i` of the result is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (v, c) = self.dims(table);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in &ids {
            if id >= v {
                return Err(Error::IdOutOfRange { id, size: v });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let t = Tensor::matrix(ids.len(), c, out).unwrap();
        let rg = self.rg(table);
        Ok(self.push(t, Op::Gather { table, ids }, rg))
    }

    /// Rows `r0..r1` and columns `c0..c1`.
    pub fn slice(&mut self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Var {
        let (r, c) = self.dims(x);
        assert!(rows.0 <= rows.1 && rows.1 <= r && cols.0 <= cols.1 && cols.1 <= c);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity((rows.1 - rows.0) * (cols.1 - cols.0));
        for i in rows.0..rows.1 {
            out.extend_from_slice(&xv[i * c + cols.0..i * c + cols.1]);
        }
        let t = Tensor::matrix(rows.1 - rows.0, cols.1 - cols.0, out).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Slice { x, rows, cols }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let c = self.dims(x).1;
        self.slice(x, (r0, r1), (0, c))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(rows, c, out).unwrap(),
            Op::ConcatRows(parts),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let r = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.rows(), r, "concat_cols row mismatch");
            let c = t.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(r, total, out).unwrap(),
            Op::ConcatCols(parts),
            rg,
        )
    }

    /// Arranges `rows × cols` scalar nodes into a matrix, row-major.
    pub fn stack(&mut self, scalars: Vec<Var>, rows: usize, cols: usize) -> Var {
        assert_eq!(scalars.len(), rows * cols, "stack size");
        let data = scalars.iter().map(|&s| self.scalar(s)).collect();
        let rg = scalars.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(rows, cols, data).unwrap(),
            Op::Stack(scalars),
            rg,
        )
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(r, c, "diag of non-square matrix");
        let xv = self.value(x).data();
        let out = (0..r).map(|i| xv[i * c + i]).collect();
        let rg = self.rg(x);
        self.push(Tensor::column_vector(out), Op::Diag(x), rg)
    }

    /// Per-row layer normalization with learned `gamma` and `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c));
        assert_eq!(self.dims(beta), (1, c));
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    // ---- reverse pass ----

    /// Gradients of the scalar `output` with respect to every node that
    /// requires one.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    *slot = Some(delta.reshape(shape).unwrap());
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    let da = tensor::matmul_bt(gd, self.value(*b).data(), m, n, k);
                    acc(*a, Tensor::matrix(m, k, da).unwrap(), grads);
                }
                if self.rg(*b) {
                    let db = tensor::matmul_at(self.value(*a).data(), gd, m, k, n);
                    acc(*b, Tensor::matrix(k, n, db).unwrap(), grads);
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.rg(*a) {
                    let da = tensor::matmul(gd, self.value(*b).data(), m, n, k);
                    acc(*a, Tensor::matrix(m, k, da).unwrap(), grads);
                }
                if self.rg(*b) {
                    let db = tensor::matmul_at(gd, self.value(*a).data(), m, n, k);
                    acc(*b, Tensor::matrix(n, k, db).unwrap(), grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = zip_map(gd, self.value(*b).data(), |x, y| x * y);
                    acc(*a, Tensor::matrix(g.rows(), g.cols(), d).unwrap(), grads);
                }
                if self.rg(*b) {
                    let d = zip_map(gd, self.value(*a).data(), |x, y| x * y);
                    acc(*b, Tensor::matrix(g.rows(), g.cols(), d).unwrap(), grads);
                }
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, g.clone(), grads);
                if self.rg(*b) {
                    let bc = self.dims(*b).1;
                    let c = g.cols();
                    let mut db = vec![0.0; bc];
                    for (i, v) in gd.iter().enumerate() {
                        db[if bc == 1 { 0 } else { i % c }] += v;
                    }
                    acc(*b, Tensor::matrix(1, bc, db).unwrap(), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Relu(a) => {
                let d = zip_map(gd, self.value(*a).data(), |gv, x| if x > 0.0 { gv } else { 0.0 });
                acc(*a, Tensor::matrix(g.rows(), g.cols(), d).unwrap(), grads);
            }
            Op::Exp(a) => {
                let d = zip_map(gd, out.data(), |gv, y| gv * y);
                acc(*a, Tensor::matrix(g.rows(), g.cols(), d).unwrap(), grads);
            }
            Op::Log(a) => {
                let d = zip_map(gd, self.value(*a).data(), |gv, x| gv / x);
                acc(*a, Tensor::matrix(g.rows(), g.cols(), d).unwrap(), grads);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(&[t.rows(), t.cols()], gd[0]), grads);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = gd[0] / t.len() as f64;
                acc(*a, Tensor::filled(&[t.rows(), t.cols()], v), grads);
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.dims(*a);
                let (groups, len) = group_layout(r, c, *axis);
                let mut d = vec![0.0; r * c];
                for gi in 0..groups {
                    for t in 0..len {
                        d[group_index(c, *axis, gi, t)] = gd[gi];
                    }
                }
                acc(*a, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::Softmax { x, axis } => {
                let (r, c) = self.dims(*x);
                let (groups, len) = group_layout(r, c, *axis);
                let y = out.data();
                let mut d = vec![0.0; r * c];
                for gi in 0..groups {
                    let s: f64 = (0..len)
                        .map(|t| {
                            let i = group_index(c, *axis, gi, t);
                            gd[i] * y[i]
                        })
                        .sum();
                    for t in 0..len {
                        let i = group_index(c, *axis, gi, t);
                        d[i] = y[i] * (gd[i] - s);
                    }
                }
                acc(*x, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::LogSoftmax { x, axis } => {
                let (r, c) = self.dims(*x);
                let (groups, len) = group_layout(r, c, *axis);
                let y = out.data();
                let mut d = vec![0.0; r * c];
                for gi in 0..groups {
                    let s: f64 = (0..len).map(|t| gd[group_index(c, *axis, gi, t)]).sum();
                    for t in 0..len {
                        let i = group_index(c, *axis, gi, t);
                        d[i] = gd[i] - y[i].exp() * s;
                    }
                }
                acc(*x, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::LogSumExp { x, axis, mask } => {
                let (r, c) = self.dims(*x);
                let (groups, len) = group_layout(r, c, *axis);
                let xv = self.value(*x).data();
                let lse = out.data();
                let mut d = vec![0.0; r * c];
                for gi in 0..groups {
                    if !lse[gi].is_finite() {
                        continue;
                    }
                    for t in 0..len {
                        let i = group_index(c, *axis, gi, t);
                        if mask.as_ref().is_some_and(|m| !m[i]) {
                            continue;
                        }
                        d[i] = gd[gi] * (xv[i] - lse[gi]).exp();
                    }
                }
                acc(*x, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::Max { x, axis, argmax } => {
                let (r, c) = self.dims(*x);
                let mut d = vec![0.0; r * c];
                for (gi, &t) in argmax.iter().enumerate() {
                    d[group_index(c, *axis, gi, t)] += gd[gi];
                }
                acc(*x, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::NormalizeRows { x, floor, norms } => {
                let (r, c) = self.dims(*x);
                let y = out.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &gd[i * c..(i + 1) * c];
                    if norms[i] > *floor {
                        let yr = &y[i * c..(i + 1) * c];
                        let proj = tensor::dot(yr, gr);
                        for j in 0..c {
                            d[i * c + j] = (gr[j] - yr[j] * proj) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            d[i * c + j] = gr[j] / floor;
                        }
                    }
                }
                acc(*x, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::Gather { table, ids } => {
                let (v, c) = self.dims(*table);
                let mut d = vec![0.0; v * c];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] += gd[row * c + j];
                    }
                }
                acc(*table, Tensor::matrix(v, c, d).unwrap(), grads);
            }
            Op::Slice { x, rows, cols } => {
                let (r, c) = self.dims(*x);
                let w = cols.1 - cols.0;
                let mut d = vec![0.0; r * c];
                for i in rows.0..rows.1 {
                    let src = &gd[(i - rows.0) * w..(i - rows.0 + 1) * w];
                    d[i * c + cols.0..i * c + cols.1].copy_from_slice(src);
                }
                acc(*x, Tensor::matrix(r, c, d).unwrap(), grads);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.dims(p).0;
                    let d = gd[off * c..(off + pr) * c].to_vec();
                    acc(p, Tensor::matrix(pr, c, d).unwrap(), grads);
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    let mut d = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        d.extend_from_slice(&gd[i * total + off..i * total + off + pc]);
                    }
                    acc(p, Tensor::matrix(r, pc, d).unwrap(), grads);
                    off += pc;
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let shape = self.value(p).shape().to_vec();
                    acc(p, Tensor::new(shape, vec![gd[i]]).unwrap(), grads);
                }
            }
            Op::Diag(x) => {
                let n = self.dims(*x).0;
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = gd[i];
                }
                acc(*x, Tensor::matrix(n, n, d).unwrap(), grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.dims(*x);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        dgamma[j] += gd[k] * xhat[k];
                        dbeta[j] += gd[k];
                        let dh = gd[k] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let k = i * c + j;
                        let dh = gd[k] * gv[j];
                        dx[k] = inv_std[i] / cf * (cf * dh - sum_dh - xhat[k] * sum_dh_h);
                    }
                }
                acc(*x, Tensor::matrix(r, c, dx).unwrap(), grads);
                acc(*gamma, Tensor::matrix(1, c, dgamma).unwrap(), grads);
                acc(*beta, Tensor::matrix(1, c, dbeta).unwrap(), grads);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn logsumexp_group(
    x: &[f64],
    cols: usize,
    axis: Axis,
    g: usize,
    len: usize,
    mask: Option<&[bool]>,
) -> f64 {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut m = f64::NEG_INFINITY;
    for t in 0..len {
        let i = group_index(cols, axis, g, t);
        if keep(i) && x[i] > m {
            m = x[i];
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = (0..len)
        .map(|t| group_index(cols, axis, g, t))
        .filter(|&i| keep(i))
        .map(|i| (x[i] - m).exp())
        .sum();
    m + s.ln()
}

/// Softmax of each group; entries with a false `mask` (or a value of −∞) get
/// weight zero. A group with no admissible entry is all zeros.
pub(crate) fn softmax_values(
    x: &[f64],
    rows: usize,
    cols: usize,
    axis: Axis,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let (groups, len) = group_layout(rows, cols, axis);
    let mut out = vec![0.0; rows * cols];
    for g in 0..groups {
        let live = |i: usize| mask.map_or(true, |m| m[i]);
        let m = (0..len)
            .map(|t| group_index(cols, axis, g, t))
            .filter(|&i| live(i))
            .fold(f64::NEG_INFINITY, |a, i| a.max(x[i]));
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for t in 0..len {
            let i = group_index(cols, axis, g, t);
            if live(i) {
                out[i] = (x[i] - m).exp();
                z += out[i];
            }
        }
        for t in 0..len {
            out[group_index(cols, axis, g, t)] /= z;
        }
    }
    out
}
