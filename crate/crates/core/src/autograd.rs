//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! walks the record in reverse once; a second call is rejected until
//! [`Tape::zero_grad`] clears the accumulated gradients. Tapes are `!Sync`
//! and meant to live for a single forward/backward cycle on one thread.
//!
//! Broadcasting is limited to scalar-with-tensor for `add`/`sub`/`mul`.
//! Row-wise bias and per-row scaling have their own explicit ops
//! ([`Tape::add_row`], [`Tape::scale_rows`]).

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, matmul_nt_into, matmul_tn_into, Tensor, LEAKY_SLOPE};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Binary),
    Sub(usize, usize, Binary),
    Mul(usize, usize, Binary),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    MaskedSoftmaxRows(usize),
    MaskedLogSoftmaxRows(usize, Rc<[bool]>),
    Sum(usize),
    Mean(usize),
    AddRow(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    ScaleRows(usize, usize),
    SegmentSoftmax(usize, Rc<[usize]>, usize),
    WeightedBce(usize, Rc<[f64]>, Rc<[f64]>),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities fed to [`Tape::weighted_bce`] are clamped to this band.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].requires_grad)
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Result<Var> {
        let mut value = t.clone();
        value.grad = None;
        let rg = t.requires_grad;
        self.push(value, Op::Leaf, rg, "leaf")
    }

    /// Records a tracked copy of `t` regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Result<Var> {
        let mut value = t.clone();
        value.grad = None;
        self.push(value, Op::Leaf, true, "param")
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    fn binary_kind(&self, op: &'static str, a: Var, b: Var) -> Result<(Binary, Vec<usize>)> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa == sb {
            Ok((Binary::Same, sa.to_vec()))
        } else if nodes[a.0].value.len() == 1 {
            Ok((Binary::LeftScalar, sb.to_vec()))
        } else if nodes[b.0].value.len() == 1 {
            Ok((Binary::RightScalar, sa.to_vec()))
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary_values(&self, a: Var, b: Var, kind: Binary, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
        match kind {
            Binary::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Binary::LeftScalar => db.iter().map(|&y| f(da[0], y)).collect(),
            Binary::RightScalar => da.iter().map(|&x| f(x, db[0])).collect(),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (kind, shape) = self.binary_kind("add", a, b)?;
        let out = Tensor::new(shape, self.binary_values(a, b, kind, |x, y| x + y))?;
        self.push(out, Op::Add(a.0, b.0, kind), self.rg(&[a.0, b.0]), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (kind, shape) = self.binary_kind("sub", a, b)?;
        let out = Tensor::new(shape, self.binary_values(a, b, kind, |x, y| x - y))?;
        self.push(out, Op::Sub(a.0, b.0, kind), self.rg(&[a.0, b.0]), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (kind, shape) = self.binary_kind("mul", a, b)?;
        let out = Tensor::new(shape, self.binary_values(a, b, kind, |x, y| x * y))?;
        self.push(out, Op::Mul(a.0, b.0, kind), self.rg(&[a.0, b.0]), "mul")
    }

    /// `scale * a + offset`.
    pub fn affine(&self, a: Var, scale: f64, offset: f64) -> Result<Var> {
        let out = self.value(a).map(|x| scale * x + offset);
        self.push(out, Op::Affine(a.0, scale), self.rg(&[a.0]), "affine")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    fn unary(&self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, op, self.rg(&[a.0]), name)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.0), "tanh", f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), "sigmoid", tensor::sigmoid)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), "relu", |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(a.0), "leaky_relu", tensor::leaky_relu)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.0), "exp", f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(a, Op::Log(a.0), "log", f64::ln)
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            Tensor::new(v.shape().to_vec(), softmax_rows_values(&v, None))?
        };
        self.push(out, Op::SoftmaxRows(a.0), self.rg(&[a.0]), "softmax_rows")
    }

    /// Row softmax over entries where `mask` is true; masked entries are 0.
    pub fn masked_softmax_rows(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            check_mask(&v, mask)?;
            Tensor::new(v.shape().to_vec(), softmax_rows_values(&v, Some(mask)))?
        };
        self.push(out, Op::MaskedSoftmaxRows(a.0), self.rg(&[a.0]), "masked_softmax_rows")
    }

    /// Row log-softmax restricted to `mask`; masked entries hold 0.
    pub fn masked_log_softmax_rows(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            check_mask(&v, mask)?;
            let cols = v.cols();
            let mut out = vec![0.0; v.len()];
            for (r, row) in v.data().chunks(cols).enumerate() {
                let m = &mask[r * cols..(r + 1) * cols];
                let lse = masked_logsumexp(row, m);
                for j in 0..cols {
                    if m[j] {
                        out[r * cols + j] = row[j] - lse;
                    }
                }
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        let mask: Rc<[bool]> = mask.into();
        self.push(
            out,
            Op::MaskedLogSoftmaxRows(a.0, mask),
            self.rg(&[a.0]),
            "masked_log_softmax_rows",
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), self.rg(&[a.0]), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let m = {
            let v = self.value(a);
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(a.0), self.rg(&[a.0]), "mean")
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            if r.len() != x.cols() {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    left: x.shape().to_vec(),
                    right: r.shape().to_vec(),
                });
            }
            let mut out = x.data().to_vec();
            for chunk in out.chunks_mut(r.len()) {
                for (o, b) in chunk.iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.push(out, Op::AddRow(a.0, row.0), self.rg(&[a.0, row.0]), "add_row")
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rows() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        left: nodes[parts[0].0].value.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::matrix(rows, total, out)?
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::ConcatCols(ids), rg, "concat_cols")
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        left: nodes[parts[0].0].value.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::ConcatRows(ids), rg, "concat_rows")
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let cols = v.cols();
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                if i >= v.rows() {
                    return Err(Error::InvalidArgument(format!(
                        "gather_rows index {i} out of {} rows",
                        v.rows()
                    )));
                }
                out.extend_from_slice(v.row(i));
            }
            Tensor::matrix(idx.len(), cols, out)?
        };
        self.push(out, Op::GatherRows(a.0, idx), self.rg(&[a.0]), "gather_rows")
    }

    /// Sums row `e` of `a` into output row `idx[e]`; output has `n` rows.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<[usize]>, n: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if idx.len() != v.rows() {
                return Err(Error::LengthMismatch(format!(
                    "scatter_add_rows: {} indices for {} rows",
                    idx.len(),
                    v.rows()
                )));
            }
            let cols = v.cols();
            let mut out = vec![0.0; n * cols];
            for (e, &t) in idx.iter().enumerate() {
                if t >= n {
                    return Err(Error::InvalidArgument(format!("scatter index {t} >= {n}")));
                }
                for (o, x) in out[t * cols..(t + 1) * cols].iter_mut().zip(v.row(e)) {
                    *o += x;
                }
            }
            Tensor::matrix(n, cols, out)?
        };
        self.push(out, Op::ScatterAddRows(a.0, idx), self.rg(&[a.0]), "scatter_add_rows")
    }

    /// Multiplies row `e` of `a` by the scalar `w[e]`.
    pub fn scale_rows(&self, a: Var, w: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, wv) = (&nodes[a.0].value, &nodes[w.0].value);
            if wv.len() != x.rows() {
                return Err(Error::ShapeMismatch {
                    op: "scale_rows",
                    left: x.shape().to_vec(),
                    right: wv.shape().to_vec(),
                });
            }
            let cols = x.cols();
            let mut out = x.data().to_vec();
            for (chunk, &s) in out.chunks_mut(cols).zip(wv.data()) {
                chunk.iter_mut().for_each(|o| *o *= s);
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.push(out, Op::ScaleRows(a.0, w.0), self.rg(&[a.0, w.0]), "scale_rows")
    }

    /// Softmax of a column of logits within groups given by `seg`.
    pub fn segment_softmax(&self, a: Var, seg: Rc<[usize]>, n_seg: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if v.len() != seg.len() {
                return Err(Error::LengthMismatch(format!(
                    "segment_softmax: {} ids for {} logits",
                    seg.len(),
                    v.len()
                )));
            }
            let x = v.data();
            let mut max = vec![f64::NEG_INFINITY; n_seg];
            for (e, &s) in seg.iter().enumerate() {
                max[s] = max[s].max(x[e]);
            }
            let mut out: Vec<f64> = seg.iter().enumerate().map(|(e, &s)| (x[e] - max[s]).exp()).collect();
            let mut denom = vec![0.0; n_seg];
            for (e, &s) in seg.iter().enumerate() {
                denom[s] += out[e];
            }
            for (e, &s) in seg.iter().enumerate() {
                out[e] /= denom[s];
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        self.push(out, Op::SegmentSoftmax(a.0, seg, n_seg), self.rg(&[a.0]), "segment_softmax")
    }

    /// `-Σ w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]`, with `p` clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn weighted_bce(&self, p: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let loss = {
            let v = self.value(p);
            if v.len() != targets.len() || v.len() != weights.len() {
                return Err(Error::LengthMismatch(format!(
                    "weighted_bce: {} probabilities, {} targets, {} weights",
                    v.len(),
                    targets.len(),
                    weights.len()
                )));
            }
            let mut clamped = false;
            let mut loss = 0.0;
            for ((&pi, &y), &w) in v.data().iter().zip(targets).zip(weights) {
                let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                clamped |= pc != pi;
                loss -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
            }
            if clamped {
                log::warn!("weighted_bce: probabilities clamped to [{PROB_CLAMP}, 1-{PROB_CLAMP}]");
            }
            loss
        };
        self.push(
            Tensor::scalar(loss),
            Op::WeightedBce(p.0, targets.into(), weights.into()),
            self.rg(&[p.0]),
            "weighted_bce",
        )
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0), self.rg(&[a.0]), "transpose")
    }

    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// tracked and reachable.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow().as_ref().and_then(|g| g[v.0].clone())
    }

    /// Writes the gradient of `v` into `param.grad`.
    pub fn store_grad(&self, v: Var, param: &mut Tensor) {
        param.grad = Some(self.grad(v).unwrap_or_else(|| vec![0.0; param.len()]));
    }

    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::BackwardAlreadyRun);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

fn check_mask(v: &Tensor, mask: &[bool]) -> Result<()> {
    if mask.len() != v.len() {
        return Err(Error::LengthMismatch(format!(
            "mask of {} for {} entries",
            mask.len(),
            v.len()
        )));
    }
    if mask.chunks(v.cols()).any(|row| !row.iter().any(|&m| m)) {
        return Err(Error::InvalidArgument("fully masked softmax row".into()));
    }
    Ok(())
}

fn masked_logsumexp(row: &[f64], mask: &[bool]) -> f64 {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (x - max).exp())
        .sum();
    max + s.ln()
}

pub(crate) fn softmax_rows_values(v: &Tensor, mask: Option<&[bool]>) -> Vec<f64> {
    let cols = v.cols();
    let mut out = vec![0.0; v.len()];
    for (r, row) in v.data().chunks(cols).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in (0..cols).filter(|&j| keep(j)) {
            let e = (row[j] - max).exp();
            out[r * cols + j] = e;
            denom += e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= denom;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn binary_grads(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    b: usize,
    kind: Binary,
    ga: Vec<f64>,
    gb: Vec<f64>,
) {
    let reduce = |g: Vec<f64>| vec![g.iter().sum::<f64>()];
    match kind {
        Binary::Same => {
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        Binary::LeftScalar => {
            accumulate(grads, nodes, a, reduce(ga));
            accumulate(grads, nodes, b, gb);
        }
        Binary::RightScalar => {
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, reduce(gb));
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).cols());
            accumulate_with(grads, nodes, *a, |da| matmul_nt_into(g, val(*b).data(), da, m, n, k));
            accumulate_with(grads, nodes, *b, |db| matmul_tn_into(val(*a).data(), g, db, m, k, n));
        }
        Op::Add(a, b, kind) => binary_grads(grads, nodes, *a, *b, *kind, g.to_vec(), g.to_vec()),
        Op::Sub(a, b, kind) => {
            binary_grads(grads, nodes, *a, *b, *kind, g.to_vec(), g.iter().map(|x| -x).collect())
        }
        Op::Mul(a, b, kind) => {
            let (xa, xb) = (val(*a).data(), val(*b).data());
            let at = |x: &[f64], i: usize| if x.len() == 1 { x[0] } else { x[i] };
            let ga = g.iter().enumerate().map(|(i, gi)| gi * at(xb, i)).collect();
            let gb = g.iter().enumerate().map(|(i, gi)| gi * at(xa, i)).collect();
            binary_grads(grads, nodes, *a, *b, *kind, ga, gb);
        }
        Op::Affine(a, s) => accumulate(grads, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::Tanh(a) => {
            let c = g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::Sigmoid(a) => {
            let c = g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::Relu(a) => {
            let c = g
                .iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::LeakyRelu(a) => {
            let c = g
                .iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { LEAKY_SLOPE * gi })
                .collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::Exp(a) => {
            let c = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::Log(a) => {
            let c = g.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
            let cols = out.cols();
            let mut c = vec![0.0; out.len()];
            for (r, y) in out.data().chunks(cols).enumerate() {
                let gr = &g[r * cols..(r + 1) * cols];
                let s = tensor::dot(gr, y);
                for j in 0..cols {
                    c[r * cols + j] = y[j] * (gr[j] - s);
                }
            }
            accumulate(grads, nodes, *a, c);
        }
        Op::MaskedLogSoftmaxRows(a, mask) => {
            let cols = out.cols();
            let mut c = vec![0.0; out.len()];
            for r in 0..out.rows() {
                let rng = r * cols..(r + 1) * cols;
                let gsum: f64 = rng.clone().filter(|&i| mask[i]).map(|i| g[i]).sum();
                for i in rng.filter(|&i| mask[i]) {
                    c[i] = g[i] - out.data()[i].exp() * gsum;
                }
            }
            accumulate(grads, nodes, *a, c);
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let n = val(*row).len();
            accumulate_with(grads, nodes, *row, |dr| {
                for chunk in g.chunks(n) {
                    dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                accumulate_with(grads, nodes, p, |dp| {
                    for r in 0..out.rows() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        dp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                accumulate(grads, nodes, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::GatherRows(a, idx) => {
            let cols = out.cols();
            accumulate_with(grads, nodes, *a, |da| {
                for (e, &i) in idx.iter().enumerate() {
                    let src = &g[e * cols..(e + 1) * cols];
                    da[i * cols..(i + 1) * cols].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
            });
        }
        Op::ScatterAddRows(a, idx) => {
            let cols = out.cols();
            let mut c = Vec::with_capacity(idx.len() * cols);
            for &t in idx.iter() {
                c.extend_from_slice(&g[t * cols..(t + 1) * cols]);
            }
            accumulate(grads, nodes, *a, c);
        }
        Op::ScaleRows(a, w) => {
            let x = val(*a);
            let ws = val(*w).data();
            let cols = x.cols();
            let ga = g
                .chunks(cols)
                .zip(ws)
                .flat_map(|(gr, &s)| gr.iter().map(move |v| v * s))
                .collect();
            accumulate(grads, nodes, *a, ga);
            let gw = g.chunks(cols).zip(x.data().chunks(cols)).map(|(gr, xr)| tensor::dot(gr, xr)).collect();
            accumulate(grads, nodes, *w, gw);
        }
        Op::SegmentSoftmax(a, seg, n_seg) => {
            let y = out.data();
            let mut s = vec![0.0; *n_seg];
            for (e, &k) in seg.iter().enumerate() {
                s[k] += g[e] * y[e];
            }
            let c = seg.iter().enumerate().map(|(e, &k)| y[e] * (g[e] - s[k])).collect();
            accumulate(grads, nodes, *a, c);
        }
        Op::WeightedBce(p, targets, weights) => {
            let c = val(*p)
                .data()
                .iter()
                .zip(targets.iter())
                .zip(weights.iter())
                .map(|((&pi, &y), &w)| {
                    let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    -g[0] * w * (y / pc - (1.0 - y) / (1.0 - pc))
                })
                .collect();
            accumulate(grads, nodes, *p, c);
        }
        Op::Transpose(a) => {
            let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).expect("grad shape").transpose();
            accumulate(grads, nodes, *a, gt.into_data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn unary_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert_eq!(tape.scalar_value(tape.tanh(z).unwrap()), 0.0);
        assert_eq!(tape.scalar_value(tape.sigmoid(z).unwrap()), 0.5);
        let err = tape.log(z).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "log", .. }));
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let cases: [(&[f64], &[f64]); 3] = [
            (&[0.0, 0.0], &[0.5, 0.5]),
            (&[1000.0, 1000.0], &[0.5, 0.5]),
            (&[0.0, 3f64.ln()], &[0.25, 0.75]),
        ];
        for (input, expect) in cases {
            let x = tape.constant(row(input)).unwrap();
            let y = tape.softmax_rows(x).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(&row(&[1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let tape = Tape::new();
        let logits = tape.param(&row(&[0.3, -1.2, 2.0])).unwrap();
        let mask = [true; 3];
        let logp = tape.masked_log_softmax_rows(logits, &mask).unwrap();
        let y = tape.constant(row(&[0.0, 1.0, 0.0])).unwrap();
        let picked = tape.mul(logp, y).unwrap();
        let s = tape.sum(picked).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        tape.backward(loss).unwrap();
        let p = softmax_rows_values(&row(&[0.3, -1.2, 2.0]), None);
        let g = tape.grad(logits).unwrap();
        for j in 0..3 {
            let yj = if j == 1 { 1.0 } else { 0.0 };
            assert!((g[j] - (p[j] - yj)).abs() < 1e-12);
        }
    }

    #[test]
    fn double_backward_needs_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardAlreadyRun)));
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(&row(&[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0)).unwrap();
        let x = tape.param(&Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(c), None);
        assert_eq!(tape.grad(x).unwrap(), vec![2.0]);
    }

    #[test]
    fn segment_softmax_normalizes_each_group() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![5, 1], vec![1.0, 2.0, -0.5, 4.0, 0.0]).unwrap()).unwrap();
        let seg: Rc<[usize]> = vec![0, 0, 1, 1, 1].into();
        let y = tape.segment_softmax(x, seg, 2).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] + v.data()[1] - 1.0).abs() < 1e-15);
        assert!((v.data()[2..].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
