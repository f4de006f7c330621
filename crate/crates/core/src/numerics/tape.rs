//! Reverse-mode differentiation over an eagerly evaluated, recorded computation.
//!
//! Every operation computes its value immediately and appends a node; calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients into
//! the [`ParamStore`] for every parameter leaf reachable from the loss.

use super::linear::{cross_entropy_value, Activation};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_t, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMulT { x: Var, w: Var },
    AddRow { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, seg: usize },
    SegmentSum { x: Var, seg: usize },
    GroupMean { x: Var, groups: Vec<Vec<usize>> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    CrossEntropy { logits: Var, target: usize },
    SoftCrossEntropy { logits: Var, target: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor2, b: &Tensor2, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map(t: &Tensor2, f: impl Fn(f64) -> f64) -> Tensor2 {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor2::from_vec(t.rows(), t.cols(), data).expect("same size")
}

fn zip(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("same size")
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
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

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// `x · wᵀ` with `w` stored out×in.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(Error::Shape(format!(
                "matmul: input width {} vs weight width {}",
                xv.cols(),
                wv.cols()
            )));
        }
        let out = matmul_t(xv, wv);
        Ok(self.push(out, Op::MatMulT { x, w }))
    }

    /// Adds the 1×cols row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "row broadcast: {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = map(self.value(a), |x| x * f);
        self.push(out, Op::Scale(a, f))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
            Activation::Identity => a,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            if i >= xv.rows() {
                return Err(Error::Shape(format!(
                    "gather row {i} out of {} rows",
                    xv.rows()
                )));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor2::from_vec(idx.len(), cols, data)?;
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    /// Softmax over each block of `seg` consecutive rows, independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: usize) -> Result<Var> {
        let xv = self.value(x);
        if seg == 0 || xv.rows() % seg != 0 {
            return Err(Error::Shape(format!(
                "{} rows do not split into segments of {seg}",
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for s in 0..xv.rows() / seg {
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for r in 0..seg {
                    max = max.max(xv.get(s * seg + r, c));
                }
                let mut sum = 0.0;
                for r in 0..seg {
                    let e = (xv.get(s * seg + r, c) - max).exp();
                    out.set(s * seg + r, c, e);
                    sum += e;
                }
                for r in 0..seg {
                    let v = out.get(s * seg + r, c) / sum;
                    out.set(s * seg + r, c, v);
                }
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax { x, seg }))
    }

    /// Sums each block of `seg` consecutive rows into one row.
    pub fn segment_sum(&mut self, x: Var, seg: usize) -> Result<Var> {
        let xv = self.value(x);
        if seg == 0 || xv.rows() % seg != 0 {
            return Err(Error::Shape(format!(
                "{} rows do not split into segments of {seg}",
                xv.rows()
            )));
        }
        let n = xv.rows() / seg;
        let mut out = Tensor2::zeros(n, xv.cols());
        for s in 0..n {
            for r in 0..seg {
                let src = xv.row(s * seg + r);
                for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        Ok(self.push(out, Op::SegmentSum { x, seg }))
    }

    /// Row `g` of the result is the mean of the rows of `x` listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(groups.len(), xv.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Empty(format!("group {g} has no members")));
            }
            for &i in members {
                if i >= xv.rows() {
                    return Err(Error::Shape(format!("group member {i} out of range")));
                }
                for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
            let inv = members.len() as f64;
            out.row_mut(g).iter_mut().for_each(|o| *o /= inv);
        }
        Ok(self.push(out, Op::GroupMean { x, groups }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of {} columns",
                start + len,
                xv.cols()
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor2::from_vec(xv.rows(), len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape("concat_cols: row counts differ".into()));
            }
            cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape("concat_rows: column counts differ".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean-free softmax cross-entropy of a 1×C logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target >= lv.cols() {
            return Err(Error::Shape(format!(
                "cross-entropy target {target} for logits {:?}",
                lv.shape()
            )));
        }
        let loss = cross_entropy_value(lv.data(), target);
        Ok(self.push(
            Tensor2::row_vector(vec![loss]),
            Op::CrossEntropy { logits, target },
        ))
    }

    /// Cross-entropy against a soft target distribution `−Σ t_c log p_c`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || target.len() != lv.cols() {
            return Err(Error::Shape(format!(
                "soft target of length {} for logits {:?}",
                target.len(),
                lv.shape()
            )));
        }
        let z = lv.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss: f64 = target.iter().zip(z).map(|(t, zz)| t * (lse - zz)).sum();
        Ok(self.push(
            Tensor2::row_vector(vec![loss]),
            Op::SoftCrossEntropy { logits, target },
        ))
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2::row_vector(vec![s]), Op::Sum(x))
    }

    /// Sign of every relu input on the tape, in recording order. Finite
    /// difference probes compare this to detect crossing a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Accumulates `∂loss/∂θ` into `store` for every parameter leaf feeding `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invariant("backward called before forward".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be a scalar, got {:?}",
                lv.shape()
            )));
        }
        lv.ensure_finite("loss")?;

        let mut grads: Vec<Option<Tensor2>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::row_vector(vec![1.0]));

        fn acc(slot: &mut Option<Tensor2>, g: Tensor2) {
            match slot {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for n in (0..=loss.0).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = store.grad_mut(*id);
                    if dst.shape() != g.shape() {
                        return Err(Error::Shape("parameter changed shape".into()));
                    }
                    for (a, b) in dst.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::MatMulT { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                    // dX = dY · W
                    let mut dx = Tensor2::zeros(rows, din);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let dxr = dx.row_mut(i);
                        for o in 0..dout {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, w) in dxr.iter_mut().zip(wv.row(o)) {
                                *d += go * w;
                            }
                        }
                    }
                    // dW = dYᵀ · X
                    let mut dw = Tensor2::zeros(dout, din);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xr = xv.row(i);
                        for o in 0..dout {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, xx) in dw.row_mut(o).iter_mut().zip(xr) {
                                *d += go * xx;
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[w.0], dw);
                }
                Op::AddRow { x, b } => {
                    let mut db = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads[b.0], db);
                    acc(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], map(&g, |v| -v));
                    acc(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, self.value(*b), |x, y| x * y);
                    let db = zip(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    acc(&mut grads[a.0], map(&g, |v| v * f));
                }
                Op::Relu(a) => {
                    let d = zip(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads[a.0], d);
                }
                Op::Tanh(a) => {
                    let d = zip(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let d = zip(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads[a.0], d);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::SegmentSoftmax { x, seg } => {
                    let y = &node.value;
                    let seg = *seg;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for s in 0..y.rows() / seg {
                        for c in 0..y.cols() {
                            let mut dot = 0.0;
                            for r in 0..seg {
                                dot += g.get(s * seg + r, c) * y.get(s * seg + r, c);
                            }
                            for r in 0..seg {
                                let row = s * seg + r;
                                dx.set(row, c, y.get(row, c) * (g.get(row, c) - dot));
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::SegmentSum { x, seg } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        dx.row_mut(r).copy_from_slice(g.row(r / seg));
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::GroupMean { x, groups } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = members.len() as f64;
                        for &i in members {
                            for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(gi)) {
                                *d += v / inv;
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let len = g.cols();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut dp = Tensor2::zeros(g.rows(), pc);
                        for i in 0..g.rows() {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        off += pc;
                        acc(&mut grads[p.0], dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.value(p).shape();
                        let dp = Tensor2::from_vec(pr, pc, g.data()[off..off + pr * pc].to_vec())?;
                        off += pr * pc;
                        acc(&mut grads[p.0], dp);
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads[x.0], g.reshaped(r, c)?);
                }
                Op::CrossEntropy { logits, target } => {
                    let gl = g.data()[0];
                    let mut p = softmax_row(self.value(*logits).data());
                    p[*target] -= 1.0;
                    p.iter_mut().for_each(|v| *v *= gl);
                    acc(&mut grads[logits.0], Tensor2::row_vector(p));
                }
                Op::SoftCrossEntropy { logits, target } => {
                    let gl = g.data()[0];
                    let p = softmax_row(self.value(*logits).data());
                    let mass: f64 = target.iter().sum();
                    let d = p
                        .iter()
                        .zip(target)
                        .map(|(pp, t)| gl * (pp * mass - t))
                        .collect();
                    acc(&mut grads[logits.0], Tensor2::row_vector(d));
                }
                Op::Sum(x) => {
                    let gl = g.data()[0];
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads[x.0], Tensor2::from_vec(r, c, vec![gl; r * c])?);
                }
            }
        }
        Ok(())
    }
}
