//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every primitive appends one node to the tape. [`Tape::backward`] walks the
//! nodes in exact reverse order, so gradient replay is deterministic.

use std::cell::RefCell;

use super::{GradStore, NumericError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskedFill(Var, Vec<bool>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Pick(Var, Vec<usize>),
    Maximum(Var, Var),
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for one forward pass.
///
/// A tape is confined to one thread; build one per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(NumericError::Rank { op, expected: 2, shape: t.shape().to_vec() }),
    }
}

fn transpose_values(rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = v[i * cols + j];
        }
    }
    out
}

/// `a (m×k) · b (k×n)` into a fresh buffer.
fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], values: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.values_mut().iter_mut().zip(values) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), values).expect("gradient shape"));
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NumericError> {
        if !value.all_finite() {
            return Err(NumericError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var(nodes.len() - 1))
    }

    /// Clone of the value held by `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    pub fn constant(&self, t: Tensor) -> Result<Var, NumericError> {
        self.push("constant", t, Op::Constant)
    }

    /// Records a trainable leaf whose gradient is reported under `name`.
    pub fn param(&self, name: &str, t: &Tensor) -> Result<Var, NumericError> {
        self.push("param", t.clone(), Op::Param(name.to_string()))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.with2(a, b, |x, y| {
            let (m, k) = require_rank2("matmul", x)?;
            let (k2, n) = require_rank2("matmul", y)?;
            if k != k2 {
                return Err(shape_err("matmul", x, y));
            }
            Tensor::new(vec![m, n], matmul_values(x.values(), y.values(), m, k, n))
        })?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, NumericError> {
        let value = self.with1(a, |x| {
            let (r, c) = require_rank2("transpose", x)?;
            Tensor::new(vec![c, r], transpose_values(r, c, x.values()))
        })?;
        self.push("transpose", value, Op::Transpose(a))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericError> {
        self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(shape_err(name, x, y));
            }
            let v = x.values().iter().zip(y.values()).map(|(p, q)| f(*p, *q)).collect();
            Tensor::new(x.shape().to_vec(), v)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        self.push("sub", value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.zip_same("maximum", a, b, f64::max)?;
        self.push("maximum", value, Op::Maximum(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, NumericError> {
        let value = self.with1(a, |x| {
            Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| v * c).collect())
        })?;
        self.push("scale", value, Op::Scale(a, c))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let value = self.with2(a, bias, |x, b| {
            let (m, n) = require_rank2("add_bias", x)?;
            if b.shape() != [n] {
                return Err(shape_err("add_bias", x, b));
            }
            let mut v = x.values().to_vec();
            for i in 0..m {
                for (o, bv) in v[i * n..(i + 1) * n].iter_mut().zip(b.values()) {
                    *o += bv;
                }
            }
            Tensor::new(vec![m, n], v)
        })?;
        self.push("add_bias", value, Op::AddBias(a, bias))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.with1(a, |x| {
            Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| f(*v)).collect())
                .expect("same shape")
        })
    }

    pub fn relu(&self, a: Var) -> Result<Var, NumericError> {
        let value = self.map(a, |v| v.max(0.0));
        self.push("relu", value, Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var, NumericError> {
        let value = self.map(a, f64::exp);
        self.push("exp", value, Op::Exp(a))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&self, a: Var) -> Result<Var, NumericError> {
        if let Some(bad) = self.with1(a, |x| x.values().iter().copied().find(|v| *v <= 0.0)) {
            return Err(NumericError::Domain { op: "log", value: bad });
        }
        let value = self.map(a, f64::ln);
        self.push("log", value, Op::Log(a))
    }

    pub fn softplus(&self, a: Var) -> Result<Var, NumericError> {
        let value = self.map(a, softplus);
        self.push("softplus", value, Op::Softplus(a))
    }

    fn rowwise(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Tensor, NumericError> {
        self.with1(a, |x| {
            if x.shape().is_empty() {
                return Err(NumericError::Rank { op: name, expected: 1, shape: vec![] });
            }
            let c = x.cols();
            let mut out = vec![0.0; x.len()];
            for (src, dst) in x.values().chunks(c).zip(out.chunks_mut(c)) {
                f(src, dst);
            }
            Tensor::new(x.shape().to_vec(), out)
        })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var, NumericError> {
        let value = self.rowwise("softmax_rows", a, |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        })?;
        self.push("softmax_rows", value, Op::SoftmaxRows(a))
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax_rows(&self, a: Var) -> Result<Var, NumericError> {
        let value = self.rowwise("log_softmax_rows", a, |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        })?;
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var, NumericError> {
        let s = self.with1(a, |x| x.values().iter().sum());
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var, NumericError> {
        let s = self.with1(a, |x| x.values().iter().sum::<f64>() / x.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, NumericError> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| {
                NumericError::Contract("concat_cols of nothing".into())
            })?.0]
                .value;
            let (m, _) = require_rank2("concat_cols", first)?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c) = require_rank2("concat_cols", t)?;
                if r != m {
                    return Err(shape_err("concat_cols", first, t));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut v = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    v.extend_from_slice(nodes[p.0].value.row(i));
                }
            }
            Tensor::new(vec![m, total], v)?
        };
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks tensors along the leading axis; trailing extents must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, NumericError> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts.first().ok_or_else(|| {
                NumericError::Contract("concat_rows of nothing".into())
            })?.0]
                .value;
            if first.shape().is_empty() {
                let v: Vec<f64> = parts.iter().map(|p| nodes[p.0].value.item()).collect();
                Tensor::vector(v)
            } else {
                let tail = first.shape()[1..].to_vec();
                let mut rows = 0;
                let mut v = Vec::new();
                for p in parts {
                    let t = &nodes[p.0].value;
                    if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                        return Err(shape_err("concat_rows", first, t));
                    }
                    rows += t.shape()[0];
                    v.extend_from_slice(t.values());
                }
                let mut shape = vec![rows];
                shape.extend(tail);
                Tensor::new(shape, v)?
            }
        };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&self, a: Var, mask: &[bool], fill: f64) -> Result<Var, NumericError> {
        let value = self.with1(a, |x| {
            if mask.len() != x.len() {
                return Err(NumericError::Shape {
                    op: "masked_fill",
                    lhs: x.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let v = x
                .values()
                .iter()
                .zip(mask)
                .map(|(v, m)| if *m { fill } else { *v })
                .collect();
            Tensor::new(x.shape().to_vec(), v)
        })?;
        self.push("masked_fill", value, Op::MaskedFill(a, mask.to_vec()))
    }

    /// Selects rows of a `V×D` table.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var, NumericError> {
        let value = self.with1(table, |t| {
            let (v, d) = require_rank2("gather_rows", t)?;
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= v {
                    return Err(NumericError::Index { op: "gather_rows", index: i, bound: v });
                }
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![indices.len(), d], out)
        })?;
        self.push("gather_rows", value, Op::GatherRows(table, indices.to_vec()))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let value = self.with1(a, |x| {
            let (m, n) = require_rank2("slice_cols", x)?;
            if start + len > n {
                return Err(NumericError::Index { op: "slice_cols", index: start + len, bound: n });
            }
            let mut v = Vec::with_capacity(m * len);
            for i in 0..m {
                v.extend_from_slice(&x.row(i)[start..start + len]);
            }
            Tensor::new(vec![m, len], v)
        })?;
        self.push("slice_cols", value, Op::SliceCols(a, start))
    }

    /// Picks entries by flat row-major index into a vector.
    pub fn pick(&self, a: Var, flat: &[usize]) -> Result<Var, NumericError> {
        let value = self.with1(a, |x| {
            let mut v = Vec::with_capacity(flat.len());
            for &i in flat {
                if i >= x.len() {
                    return Err(NumericError::Index { op: "pick", index: i, bound: x.len() });
                }
                v.push(x.values()[i]);
            }
            Ok(Tensor::vector(v))
        })?;
        self.push("pick", value, Op::Pick(a, flat.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let value = self.with1(a, |x| x.clone().reshape(shape.to_vec()))?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Per-row layer normalization followed by gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericError> {
        let (value, normed, inv_std) = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let g = &nodes[gain.0].value;
            let b = &nodes[bias.0].value;
            let (m, n) = require_rank2("layer_norm", xt)?;
            if g.shape() != [n] {
                return Err(shape_err("layer_norm", xt, g));
            }
            if b.shape() != [n] {
                return Err(shape_err("layer_norm", xt, b));
            }
            let mut normed = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = xt.row(i);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..n {
                    let h = (row[j] - mean) * inv;
                    normed[i * n + j] = h;
                    out[i * n + j] = h * g.values()[j] + b.values()[j];
                }
            }
            (Tensor::new(vec![m, n], out)?, normed, inv_std)
        };
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, normed, inv_std })
    }

    /// Reverse sweep from a scalar `loss`, adding parameter gradients into `grads`.
    ///
    /// Parameters that do not influence `loss` receive nothing, so a store
    /// zeroed beforehand reports zero for them.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) -> Result<(), NumericError> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0].value;
        if !loss_node.is_scalar() {
            return Err(NumericError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(loss_node.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &nodes[idx];
            let gv = g.values();
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => grads.accumulate(name, &g)?,
                Op::MatMul(a, b) => {
                    let (m, k) = require_rank2("matmul", val(*a))?;
                    let n = val(*b).shape()[1];
                    let bt = transpose_values(k, n, val(*b).values());
                    let da = matmul_values(gv, &bt, m, n, k);
                    let at = transpose_values(m, k, val(*a).values());
                    let db = matmul_values(&at, gv, k, m, n);
                    accumulate(&mut adj[a.0], &[m, k], da);
                    accumulate(&mut adj[b.0], &[k, n], db);
                }
                Op::Transpose(a) => {
                    let (r, c) = require_rank2("transpose", val(*a))?;
                    accumulate(&mut adj[a.0], &[r, c], transpose_values(c, r, gv));
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.shape(), gv.to_vec());
                    accumulate(&mut adj[b.0], g.shape(), gv.to_vec());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.shape(), gv.to_vec());
                    accumulate(&mut adj[b.0], g.shape(), gv.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let av = val(*a).values();
                    let bv = val(*b).values();
                    let da = gv.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db = gv.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut adj[a.0], g.shape(), da);
                    accumulate(&mut adj[b.0], g.shape(), db);
                }
                Op::Maximum(a, b) => {
                    let av = val(*a).values();
                    let bv = val(*b).values();
                    let mut da = vec![0.0; gv.len()];
                    let mut db = vec![0.0; gv.len()];
                    for i in 0..gv.len() {
                        if av[i] >= bv[i] {
                            da[i] = gv[i];
                        } else {
                            db[i] = gv[i];
                        }
                    }
                    accumulate(&mut adj[a.0], g.shape(), da);
                    accumulate(&mut adj[b.0], g.shape(), db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj[a.0], g.shape(), gv.iter().map(|v| v * c).collect());
                }
                Op::AddBias(a, b) => {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in gv.chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(&mut adj[a.0], g.shape(), gv.to_vec());
                    accumulate(&mut adj[b.0], &[n], db);
                }
                Op::Relu(a) => {
                    let av = val(*a).values();
                    let da = gv.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::Exp(a) => {
                    let ov = node.value.values();
                    let da = gv.iter().zip(ov).map(|(g, y)| g * y).collect();
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::Log(a) => {
                    let av = val(*a).values();
                    let da = gv.iter().zip(av).map(|(g, x)| g / x).collect();
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::Softplus(a) => {
                    let av = val(*a).values();
                    let da = gv.iter().zip(av).map(|(g, x)| g * sigmoid(*x)).collect();
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::SoftmaxRows(a) => {
                    let c = node.value.cols();
                    let mut da = vec![0.0; gv.len()];
                    for ((y, gr), d) in
                        node.value.values().chunks(c).zip(gv.chunks(c)).zip(da.chunks_mut(c))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d[j] = y[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::LogSoftmaxRows(a) => {
                    let c = node.value.cols();
                    let mut da = vec![0.0; gv.len()];
                    for ((y, gr), d) in
                        node.value.values().chunks(c).zip(gv.chunks(c)).zip(da.chunks_mut(c))
                    {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[j] = gr[j] - y[j].exp() * total;
                        }
                    }
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::Sum(a) => {
                    let t = val(*a);
                    accumulate(&mut adj[a.0], t.shape(), vec![gv[0]; t.len()]);
                }
                Op::Mean(a) => {
                    let t = val(*a);
                    accumulate(&mut adj[a.0], t.shape(), vec![gv[0] / t.len() as f64; t.len()]);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let m = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&gv[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut adj[p.0], &[m, w], d);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let t = val(*p);
                        let n = t.len();
                        accumulate(&mut adj[p.0], t.shape(), gv[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::MaskedFill(a, mask) => {
                    let da = gv.iter().zip(mask).map(|(g, m)| if *m { 0.0 } else { *g }).collect();
                    accumulate(&mut adj[a.0], g.shape(), da);
                }
                Op::GatherRows(t, indices) => {
                    let shape = val(*t).shape().to_vec();
                    let d = shape[1];
                    let mut dt = vec![0.0; val(*t).len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += gv[r * d + j];
                        }
                    }
                    accumulate(&mut adj[t.0], &shape, dt);
                }
                Op::SliceCols(a, start) => {
                    let shape = val(*a).shape().to_vec();
                    let (m, n) = (shape[0], shape[1]);
                    let w = node.value.cols();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + w].copy_from_slice(&gv[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adj[a.0], &shape, da);
                }
                Op::Pick(a, flat) => {
                    let t = val(*a);
                    let mut da = vec![0.0; t.len()];
                    for (k, &i) in flat.iter().enumerate() {
                        da[i] += gv[k];
                    }
                    accumulate(&mut adj[a.0], t.shape(), da);
                }
                Op::Reshape(a) => {
                    accumulate(&mut adj[a.0], val(*a).shape(), gv.to_vec());
                }
                Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                    let n = val(*gain).len();
                    let gain_v = val(*gain).values();
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = vec![0.0; gv.len()];
                    for (i, inv) in inv_std.iter().enumerate() {
                        let gr = &gv[i * n..(i + 1) * n];
                        let h = &normed[i * n..(i + 1) * n];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            dgain[j] += gr[j] * h[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gain_v[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gain_v[j];
                            dx[i * n + j] = inv / nf * (nf * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut adj[x.0], g.shape(), dx);
                    accumulate(&mut adj[gain.0], &[n], dgain);
                    accumulate(&mut adj[bias.0], &[n], dbias);
                }
            }
        }
        Ok(())
    }
}
