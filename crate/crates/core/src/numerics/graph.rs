//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is the computation record: every operation appends a node
//! holding its forward value and the operand references its gradient rule
//! needs. [`Graph::backward`] replays the nodes in reverse execution order and
//! accumulates `∂loss/∂leaf` into the grad buffer of every leaf created with
//! `requires_grad`. Intermediate gradients live only for the duration of one
//! backward call, so repeated calls accumulate into leaves exactly once each.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs in BCE.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations selectable through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Abs,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var, f64),
    Bce {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    Sum(Var),
    RowSum(Var),
    MulRows(Var, Var),
    GatherRows {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    Gather {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Transpose(Var),
    SegmentSoftmax {
        src: Var,
        seg: Vec<usize>,
    },
    SegmentSum {
        src: Var,
        seg: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    /// Accumulated gradient; only allocated for `requires_grad` leaves.
    leaf_grad: Option<Vec<f64>>,
}

/// Computation record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize], len: usize) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let c = *shape.last().unwrap();
            (if c == 0 { 0 } else { len / c }, c)
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let n = t.len();
        let v = self.push(shape, t.into_values(), Op::Leaf, rg);
        if rg {
            self.nodes[v.0].leaf_grad = Some(vec![0.0; n]);
        }
        v
    }

    /// Copies a parameter tensor into the record as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true);
        self.nodes[v.0].leaf_grad = Some(vec![0.0; t.len()]);
        v
    }

    /// Copies a tensor into the record as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::dim("input", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    /// Zeroes every leaf gradient buffer.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.leaf_grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(&n.shape, n.value.clone()).expect("node shape");
        if let Some(g) = &n.leaf_grad {
            t.set_requires_grad(true);
            t.accumulate_grad(g);
        }
        t
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        rows_cols(&n.shape, n.value.len())
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.require_matrix("matmul", a)?;
        let (p2, q) = self.require_matrix("matmul", b)?;
        if p != p2 {
            return Err(Error::dim("matmul", &[m, p], &[p2, q]));
        }
        let mut out = vec![0.0; m * q];
        kernels::matmul(self.value(a), self.value(b), m, p, q, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, q], out, Op::MatMul(a, b), ng))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Abs, None) => Ok(self.abs(a)),
            (Elementwise::Scale(c), None) => Ok(self.scale(a, c)),
            (op, _) => Err(Error::Contract(format!("wrong operand count for {op:?}"))),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Vec<f64>, bool)> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).to_vec();
        let b = self.value(bias);
        for r in 0..m {
            for (o, bb) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, bias), ng))
    }

    /// Row-wise `softmax(a / tau)` with max-subtraction. Vectors are one row.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
        }
        let (m, n) = self.dims(a);
        if n == 0 {
            return Err(Error::Input("softmax over empty rows".into()));
        }
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            kernels::softmax_into(row, tau, o);
        }
        let ng = self.ng(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a, tau), ng))
    }

    /// Weighted binary cross entropy `Σ w·bce(p, t)` as a scalar.
    pub fn bce_weighted(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.len() != weights.len() {
            return Err(Error::dim("bce", self.shape(pred), &[target.len()]));
        }
        if let Some(t) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("bce target {t} outside [0, 1]")));
        }
        let mut total = 0.0;
        for ((&p, &t), &w) in p.iter().zip(target).zip(weights) {
            if w != 0.0 {
                total += w * kernels::bce_term(p, t);
            }
        }
        let ng = self.ng(pred);
        Ok(self.push(
            vec![],
            vec![total],
            Op::Bce {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Mean binary cross entropy over all elements.
    pub fn bce_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::Input("bce over empty tensor".into()));
        }
        let w = vec![1.0 / n as f64; n];
        self.bce_weighted(pred, target, &w)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    /// `m×n → m×1` sum over columns.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a);
        let out = (0..m).map(|r| x[r * n..(r + 1) * n].iter().sum()).collect();
        let ng = self.ng(a);
        self.push(vec![m, 1], out, Op::RowSum(a), ng)
    }

    /// Scales row `r` of an `m×n` matrix by `w[r]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(w).len() != m {
            return Err(Error::dim("mul_rows", self.shape(a), self.shape(w)));
        }
        let x = self.value(a);
        let wv = self.value(w);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o = v * wv[r];
            }
        }
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulRows(a, w), ng))
    }

    /// Selects rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.require_matrix("gather_rows", src)?;
        let x = self.value(src);
        let mut out = vec![0.0; idx.len() * n];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= m {
                    return Err(Error::Index { index: i, len: m });
                }
                out[r * n..(r + 1) * n].copy_from_slice(&x[i * n..(i + 1) * n]);
            }
        }
        let ng = self.ng(src);
        Ok(self.push(
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Flat element gather into a tensor of `shape`; `None` yields zero.
    pub fn gather(&mut self, src: Var, idx: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::dim("gather", shape, &[idx.len()]));
        }
        let x = self.value(src);
        let mut out = vec![0.0; idx.len()];
        for (o, i) in out.iter_mut().zip(idx) {
            if let Some(i) = *i {
                *o = *x.get(i).ok_or(Error::Index { index: i, len: x.len() })?;
            }
        }
        let ng = self.ng(src);
        Ok(self.push(
            shape.to_vec(),
            out,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat of nothing".into()));
        };
        let m = self.require_matrix("concat_cols", first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.require_matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p);
            for r in 0..m {
                out[r * total + off..r * total + off + w].copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat of nothing".into()));
        };
        let n = self.require_matrix("concat_rows", first)?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.require_matrix("concat_rows", p)?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
            m += pm;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.require_matrix("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, end]));
        }
        let w = end - start;
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![m, w], out, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_matrix("transpose", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = x[r * n + c];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    /// Softmax over the elements of `src` grouped by segment id.
    pub fn segment_softmax(&mut self, src: Var, seg: &[usize]) -> Result<Var> {
        let x = self.value(src);
        if x.len() != seg.len() {
            return Err(Error::dim("segment_softmax", self.shape(src), &[seg.len()]));
        }
        let nseg = seg.iter().max().map_or(0, |m| m + 1);
        let mut mx = vec![f64::NEG_INFINITY; nseg];
        for (&v, &s) in x.iter().zip(seg) {
            mx[s] = mx[s].max(v);
        }
        let mut out: Vec<f64> = x.iter().zip(seg).map(|(&v, &s)| (v - mx[s]).exp()).collect();
        let mut den = vec![0.0; nseg];
        for (&e, &s) in out.iter().zip(seg) {
            den[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(seg) {
            *o /= den[s];
        }
        let ng = self.ng(src);
        Ok(self.push(
            self.shape(src).to_vec(),
            out,
            Op::SegmentSoftmax {
                src,
                seg: seg.to_vec(),
            },
            ng,
        ))
    }

    /// Sums rows of an `N×D` matrix into `nseg` rows by segment id, with
    /// optional per-row weights.
    pub fn segment_sum(&mut self, src: Var, seg: &[usize], nseg: usize, weights: Option<&[f64]>) -> Result<Var> {
        let (m, n) = self.require_matrix("segment_sum", src)?;
        if seg.len() != m || weights.is_some_and(|w| w.len() != m) {
            return Err(Error::dim("segment_sum", &[m, n], &[seg.len()]));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= nseg) {
            return Err(Error::Index { index: bad, len: nseg });
        }
        let x = self.value(src);
        let mut out = vec![0.0; nseg * n];
        for r in 0..m {
            let w = weights.map_or(1.0, |w| w[r]);
            let o = &mut out[seg[r] * n..(seg[r] + 1) * n];
            for (o, &v) in o.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o += w * v;
            }
        }
        let ng = self.ng(src);
        Ok(self.push(
            vec![nseg, n],
            out,
            Op::SegmentSum {
                src,
                seg: seg.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
            },
            ng,
        ))
    }

    /// Accumulates `∂loss/∂leaf` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                if let Some(lg) = self.nodes[i].leaf_grad.as_mut() {
                    for (a, b) in lg.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = self.dims(*a);
                let q = self.dims(*b).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| kernels::matmul_bt_acc(g, bv, m, q, p, ga));
                acc(*b, &mut |gb| kernels::matmul_at_acc(av, g, m, p, q, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*b, &mut |gb| kernels::axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*b, &mut |gb| kernels::axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        // sign(0) = 0
                        if xi > 0.0 {
                            *o += gi;
                        } else if xi < 0.0 {
                            *o -= gi;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| kernels::axpy(*c, g, ga)),
            Op::AddBias(a, bias) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*bias, &mut |gb| {
                    for r in 0..m {
                        kernels::axpy(1.0, &g[r * n..(r + 1) * n], gb);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }),
            Op::SoftmaxRows(a, tau) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in ga[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - dot) / tau;
                        }
                    }
                });
            }
            Op::Bce { pred, target, weights } => {
                let p = self.value(*pred);
                let g0 = g[0];
                acc(*pred, &mut |gp| {
                    for (((o, &pi), &ti), &wi) in gp.iter_mut().zip(p).zip(target).zip(weights) {
                        *o += g0 * wi * kernels::bce_grad(pi, ti);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g0));
            }
            Op::RowSum(a) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        ga[r * n..(r + 1) * n].iter_mut().for_each(|o| *o += g[r]);
                    }
                });
            }
            Op::MulRows(a, w) => {
                let (m, n) = self.dims(*a);
                let (x, wv) = (self.value(*a), self.value(*w));
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        kernels::axpy(wv[r], &g[r * n..(r + 1) * n], &mut ga[r * n..(r + 1) * n]);
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..m {
                        gw[r] += kernels::dot(&g[r * n..(r + 1) * n], &x[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let n = self.dims(*src).1;
                acc(*src, &mut |gs| {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            kernels::axpy(1.0, &g[r * n..(r + 1) * n], &mut gs[i * n..(i + 1) * n]);
                        }
                    }
                });
            }
            Op::Gather { src, idx } => acc(*src, &mut |gs| {
                for (&gi, i) in g.iter().zip(idx) {
                    if let Some(i) = *i {
                        gs[i] += gi;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let m = node.shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    acc(p, &mut |gp| {
                        for r in 0..m {
                            kernels::axpy(1.0, &g[r * total + off..r * total + off + w], &mut gp[r * w..(r + 1) * w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| kernels::axpy(1.0, &g[off..off + len], gp));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let w = node.shape[1];
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        kernels::axpy(1.0, &g[r * w..(r + 1) * w], &mut ga[r * n + start..r * n + start + w]);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| kernels::axpy(1.0, g, ga)),
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::SegmentSoftmax { src, seg } => {
                let nseg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for ((&yi, &gi), &s) in y.iter().zip(g).zip(seg) {
                    dot[s] += yi * gi;
                }
                acc(*src, &mut |gs| {
                    for (((o, &yi), &gi), &s) in gs.iter_mut().zip(y).zip(g).zip(seg) {
                        *o += yi * (gi - dot[s]);
                    }
                });
            }
            Op::SegmentSum { src, seg, weights } => {
                let n = self.dims(*src).1;
                acc(*src, &mut |gs| {
                    for (r, &s) in seg.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[r]);
                        kernels::axpy(w, &g[s * n..(s + 1) * n], &mut gs[r * n..(r + 1) * n]);
                    }
                });
            }
        }
    }
}
