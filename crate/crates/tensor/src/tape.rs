//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its
//! output value and the inputs it read. Nodes are appended in evaluation
//! order, so the list is already topologically sorted and `backward` is a
//! single reverse sweep that visits each node once.

use crate::error::{Result, TensorError};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Real, Shape, Tensor};

/// Lower bound applied to the second argument of `kl_rows`.
pub const KL_FLOOR: f64 = 1e-12;
/// Tolerance on row sums accepted by `kl_rows`.
pub const DISTRIBUTION_TOL: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    Pool {
        x: Var,
        groups: Vec<(usize, usize)>,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SmoothL1(Var, Var),
    KlRows(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    NormalizeRows(Var, Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; zeros when `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let s = self.shapes[v.0];
                Tensor::zeros(s.rows, s.cols)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn mismatch(op: &'static str, a: Shape, b: Shape) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a,
        right: b,
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::raw(a.shape(), data)
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::raw(Shape::new(1, g.cols()), out)
}

fn huber<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::of(0.5) * d * d
    } else {
        a - T::of(0.5)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, op: Op<T>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes that cannot reach a parameter need no backward bookkeeping.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), &[a, b], out)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(mismatch("matmul_nt", sa, sb));
        }
        let out = matmul_nt(self.value(a), self.value(b));
        self.push("matmul_nt", Op::MatMulNt(a, b), &[a, b], out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push("transpose", Op::Transpose(x), &[x], out)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), &[a, b], out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), &[a, b], out)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("hadamard", Op::Mul(a, b), &[a, b], out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push("scale", Op::Scale(x, s), &[x], out)
    }

    fn check_row(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(r));
        if sr.rows != 1 || sr.cols != sx.cols {
            return Err(mismatch(op, sx, sr));
        }
        Ok(())
    }

    /// Adds the `[1, n]` row `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check_row("broadcast_add", x, r)?;
        let xv = self.value(x);
        let rv = self.value(r).data();
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv) {
                *o = *o + b;
            }
        }
        self.push("broadcast_add", Op::AddRow(x, r), &[x, r], out)
    }

    /// Multiplies every row of `x` elementwise by the `[1, n]` row `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.check_row("broadcast_mul", x, r)?;
        let xv = self.value(x);
        let rv = self.value(r).data();
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(rv) {
                *o = *o * b;
            }
        }
        self.push("broadcast_mul", Op::MulRow(x, r), &[x, r], out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", Op::Sigmoid(x), &[x], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", Op::Relu(x), &[x], out)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", Op::Abs(x), &[x], out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push("exp", Op::Exp(x), &[x], out)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("empty range [{lo}, {hi}]")));
        }
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push("clamp", Op::Clamp(x, lo, hi), &[x], out)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rows = self.shape(first).rows;
        for &x in xs {
            if self.shape(x).rows != rows {
                return Err(mismatch("concat", self.shape(first), self.shape(x)));
            }
        }
        let cols: usize = xs.iter().map(|&x| self.shape(x).cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::raw(Shape::new(rows, cols), out);
        self.push("concat", Op::ConcatCols(xs.to_vec()), xs, out)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = self.shape(first).cols;
        for &x in xs {
            if self.shape(x).cols != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(x)));
            }
        }
        let rows: usize = xs.iter().map(|&x| self.shape(x).rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::raw(Shape::new(rows, cols), out);
        self.push("concat_rows", Op::ConcatRows(xs.to_vec()), xs, out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if start >= end || end > s.rows {
            return Err(invalid("slice", format!("rows {start}..{end} out of {s}")));
        }
        let data = self.value(x).data()[start * s.cols..end * s.cols].to_vec();
        let out = Tensor::raw(Shape::new(end - start, s.cols), data);
        self.push("slice", Op::SliceRows(x, start), &[x], out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if start >= end || end > s.cols {
            return Err(invalid("slice", format!("cols {start}..{end} out of {s}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(s.rows * (end - start));
        for r in 0..s.rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::raw(Shape::new(s.rows, end - start), data);
        self.push("slice", Op::SliceCols(x, start), &[x], out)
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if idx.is_empty() {
            return Err(invalid("gather", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s.rows) {
            return Err(invalid("gather", format!("row {bad} out of {s}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * s.cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::raw(Shape::new(idx.len(), s.cols), data);
        self.push("gather", Op::GatherRows(x, idx.to_vec()), &[x], out)
    }

    // ---- normalizations and pooling -------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows_masked(self.value(x), None)?;
        self.push("row_softmax", Op::Softmax(x), &[x], out)
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Masked
    /// entries are exactly zero; a row with no allowed entry is all zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = softmax_rows_masked(self.value(x), Some(mask))?;
        self.push("row_softmax", Op::Softmax(x), &[x], out)
    }

    /// Pools contiguous row ranges `[start, end)` into one row each.
    pub fn pool_rows(&mut self, x: Var, groups: &[(usize, usize)], kind: PoolKind) -> Result<Var> {
        let s = self.shape(x);
        let name = match kind {
            PoolKind::Mean => "avg_pool",
            PoolKind::Max => "max_pool",
        };
        if groups.is_empty() {
            return Err(invalid(name, "no groups"));
        }
        for &(a, b) in groups {
            if a >= b || b > s.rows {
                return Err(invalid(name, format!("group {a}..{b} out of {s}")));
            }
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(groups.len() * s.cols);
        let mut argmax = Vec::new();
        for &(a, b) in groups {
            match kind {
                PoolKind::Mean => {
                    let inv = T::one() / T::of((b - a) as f64);
                    for c in 0..s.cols {
                        let mut acc = T::zero();
                        for r in a..b {
                            acc = acc + xv.get(r, c);
                        }
                        data.push(acc * inv);
                    }
                }
                PoolKind::Max => {
                    for c in 0..s.cols {
                        let mut best = a;
                        for r in a + 1..b {
                            if xv.get(r, c) > xv.get(best, c) {
                                best = r;
                            }
                        }
                        argmax.push(best);
                        data.push(xv.get(best, c));
                    }
                }
            }
        }
        let out = Tensor::raw(Shape::new(groups.len(), s.cols), data);
        let op = Op::Pool {
            x,
            groups: groups.to_vec(),
            kind,
            argmax,
        };
        self.push(name, op, &[x], out)
    }

    pub fn mean_pool_all(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x).rows;
        self.pool_rows(x, &[(0, rows)], PoolKind::Mean)
    }

    /// Rows scaled to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = (xv.row(r).iter().map(|&v| v * v).sum::<T>() + T::of(NORM_EPS)).sqrt();
            norms.push(n);
            for v in out.row_mut(r) {
                *v = *v / n;
            }
        }
        self.push("normalize", Op::NormalizeRows(x, norms), &[x], out)
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Op::Sum(x), &[x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push("mean", Op::Mean(x), &[x], Tensor::scalar(s))
    }

    /// Sum over entries of the Huber form with threshold 1.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("smooth_l1", pred, target)?;
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| huber(p - t))
            .sum();
        self.push("smooth_l1", Op::SmoothL1(pred, target), &[pred, target], Tensor::scalar(s))
    }

    /// Mean over rows of `KL(p_i || q_i)`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_rows", p, q)?;
        let out = kl_rows_value(self.value(p), self.value(q))?;
        self.push("kl_rows", Op::KlRows(p, q), &[p, q], Tensor::scalar(T::of(out)))
    }

    /// Mean negative log-likelihood of `targets` under a row softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if targets.len() != s.rows {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), s.rows),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s.cols) {
            return Err(invalid("cross_entropy", format!("class {bad} out of {}", s.cols)));
        }
        let probs = softmax_rows_masked(self.value(logits), None)?;
        let xv = self.value(logits);
        let mut acc = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = xv.row(r);
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            acc += (lse - row[t]).f64();
        }
        let out = Tensor::scalar(T::of(acc / s.rows as f64));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", op, &[logits], out)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let s = self.shape(loss);
        if s != Shape::new(1, 1) {
            return Err(TensorError::NotScalar(s));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(T::one()))])
    }

    /// Reverse sweep from arbitrary upstream gradients. Seeds on the same
    /// node accumulate.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(mismatch("backward", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(grads, v, t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, matmul_nt(g, val(*b)));
                send(*b, matmul_tn(val(*a), g));
            }
            Op::MatMulNt(a, b) => {
                send(*a, matmul_raw(g, val(*b)));
                send(*b, matmul_tn(g, val(*a)));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, zip_map(g, val(*b), |x, y| x * y));
                send(*b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s)),
            Op::AddRow(x, r) => {
                send(*x, g.clone());
                send(*r, col_sums(g));
            }
            Op::MulRow(x, r) => {
                let rv = val(*r).data();
                let xv = val(*x);
                let mut gx = g.clone();
                for row in 0..gx.rows() {
                    for (o, &b) in gx.row_mut(row).iter_mut().zip(rv) {
                        *o = *o * b;
                    }
                }
                send(*x, gx);
                send(*r, col_sums(&zip_map(g, xv, |a, b| a * b)));
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).cols();
                    let mut data = Vec::with_capacity(g.rows() * c);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    send(x, Tensor::raw(Shape::new(g.rows(), c), data));
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).len();
                    let data = g.data()[offset..offset + n].to_vec();
                    send(x, Tensor::raw(val(x).shape(), data));
                    offset += n;
                }
            }
            Op::Sigmoid(x) => send(*x, zip_map(g, y, |gv, s| gv * s * (T::one() - s))),
            Op::Relu(x) => send(
                *x,
                zip_map(g, val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
            ),
            Op::Abs(x) => send(
                *x,
                zip_map(g, val(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Exp(x) => send(*x, zip_map(g, y, |gv, e| gv * e)),
            Op::Clamp(x, lo, hi) => send(
                *x,
                zip_map(g, val(*x), |gv, xv| {
                    if xv > *lo && xv < *hi {
                        gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Softmax(x) => {
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: T = g.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                        *o = yv * (*o - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Pool {
                x,
                groups,
                kind,
                argmax,
            } => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s.rows, s.cols);
                for (gi, &(a, b)) in groups.iter().enumerate() {
                    match kind {
                        PoolKind::Mean => {
                            let inv = T::one() / T::of((b - a) as f64);
                            for r in a..b {
                                for c in 0..s.cols {
                                    let v = gx.get(r, c) + g.get(gi, c) * inv;
                                    gx.set(r, c, v);
                                }
                            }
                        }
                        PoolKind::Max => {
                            for c in 0..s.cols {
                                let r = argmax[gi * s.cols + c];
                                let v = gx.get(r, c) + g.get(gi, c);
                                gx.set(r, c, v);
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Transpose(x) => send(*x, g.transpose()),
            Op::SliceRows(x, start) => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s.rows, s.cols);
                let off = start * s.cols;
                gx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                send(*x, gx);
            }
            Op::SliceCols(x, start) => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*x, gx);
            }
            Op::GatherRows(x, idx) => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s.rows, s.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = *o + v;
                    }
                }
                send(*x, gx);
            }
            Op::Sum(x) => {
                let s = val(*x).shape();
                send(*x, Tensor::full(s.rows, s.cols, g.item()));
            }
            Op::Mean(x) => {
                let s = val(*x).shape();
                send(*x, Tensor::full(s.rows, s.cols, g.item() / T::of(s.numel() as f64)));
            }
            Op::SmoothL1(p, t) => {
                let gp = zip_map(val(*p), val(*t), |a, b| {
                    let d = a - b;
                    g.item() * d.max(-T::one()).min(T::one())
                });
                send(*t, gp.map(|v| -v));
                send(*p, gp);
            }
            Op::KlRows(p, q) => {
                let (pv, qv) = (val(*p), val(*q));
                let scale = g.item() / T::of(pv.rows() as f64);
                let floor = T::of(KL_FLOOR);
                let gp = zip_map(pv, qv, |a, b| {
                    if a > T::zero() {
                        scale * ((a / b.max(floor)).ln() + T::one())
                    } else {
                        T::zero()
                    }
                });
                let gq = zip_map(pv, qv, |a, b| {
                    if b > floor {
                        -scale * a / b
                    } else {
                        T::zero()
                    }
                });
                send(*p, gp);
                send(*q, gq);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / T::of(targets.len() as f64);
                let mut gx = probs.map(|v| v * scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = gx.get(r, t) - scale;
                    gx.set(r, t, v);
                }
                send(*logits, gx);
            }
            Op::NormalizeRows(x, norms) => {
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: T = g.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yv * dot) / norms[r];
                    }
                }
                send(*x, gx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable row softmax, optionally restricted by a mask.
pub fn softmax_rows_masked<T: Real>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(invalid(
                "row_softmax",
                format!("mask of length {} for shape {}", m.len(), x.shape()),
            ));
        }
    }
    let cols = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let row = x.row(r);
        let mut mx = T::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) && v > mx {
                mx = v;
            }
        }
        let orow = out.row_mut(r);
        if mx == T::neg_infinity() {
            orow.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut total = T::zero();
        for (c, o) in orow.iter_mut().enumerate() {
            *o = if allowed(c) { (row[c] - mx).exp() } else { T::zero() };
            total = total + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: "row_softmax" });
    }
    Ok(out)
}

pub(crate) fn kl_rows_value<T: Real>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(mismatch("kl_rows", p.shape(), q.shape()));
    }
    check_distribution_rows("kl_rows", p)?;
    check_distribution_rows("kl_rows", q)?;
    let mut total = 0.0;
    for r in 0..p.rows() {
        for (&a, &b) in p.row(r).iter().zip(q.row(r)) {
            let a = a.f64();
            if a > 0.0 {
                total += a * (a / b.f64().max(KL_FLOOR)).ln();
            }
        }
    }
    Ok(total / p.rows() as f64)
}

pub(crate) fn check_distribution_rows<T: Real>(op: &'static str, p: &Tensor<T>) -> Result<()> {
    for r in 0..p.rows() {
        let row = p.row(r);
        let sum: f64 = row.iter().map(|v| v.f64()).sum();
        if row.iter().any(|v| v.f64() < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(TensorError::NotDistribution { op, row: r, sum });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let v = tape.constant(Tensor::from_rows(&[&[3.0], &[7.0]]));
        let out = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.value(out), &Tensor::from_rows(&[&[3.0], &[7.0]]));

        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let out = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(out), &Tensor::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        assert!(tape.add_row(a, b).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_rows(&[&[100.0]]));
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_rows(&[&[0.0]]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert!(close(g.get(x).item(), 0.25, 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
        let x = tape.constant(Tensor::from_rows(&[&[0.0, 3f64.ln()]]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(close(tape.value(y).get(0, 0), 0.25, 1e-12));
        assert!(close(tape.value(y).get(0, 1), 0.75, 1e-12));
        let x = tape.constant(Tensor::from_rows(&[&[0.0, 20.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(close(tape.value(y).get(0, 0), 2.061_153_618e-9, 1e-8));
        assert!(close(tape.value(y).get(0, 1), 1.0, 1e-8));
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 5.0, 1.0], &[2.0, 2.0, 2.0]]));
        let y = tape
            .masked_softmax_rows(x, &[true, false, true, false, false, false])
            .unwrap();
        assert_eq!(tape.value(y).row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(tape.value(y).row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn smooth_l1_examples() {
        let cases = [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)];
        for (d, expected) in cases {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(Tensor::from_rows(&[&[d]]));
            let t = tape.constant(Tensor::from_rows(&[&[0.0]]));
            let l = tape.smooth_l1(p, t).unwrap();
            assert!(close(tape.value(l).item(), expected, 1e-12), "d={d}");
        }
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(1, 2));
        let t = tape.constant(Tensor::zeros(2, 1));
        assert!(tape.smooth_l1(p, t).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let q = tape.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
        let kl = tape.kl_rows(p, q).unwrap();
        assert!(close(tape.value(kl).item(), std::f64::consts::LN_2, 1e-12));
        let same = tape.kl_rows(q, q).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let bad = tape.constant(Tensor::from_rows(&[&[0.7, 0.7]]));
        assert!(matches!(
            tape.kl_rows(bad, q),
            Err(TensorError::NotDistribution { row: 0, .. })
        ));
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]);
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x), xv.map(|v| 2.0 * v));
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0]]));
        let unused = tape.param(Tensor::from_rows(&[&[3.0]]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(1, 1));
        assert!(g.get_ref(unused).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(1, 2));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_rows(&[&[3.0]]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 7.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(3, 50));
        let l = tape.cross_entropy(x, &[0, 7, 49]).unwrap();
        assert!(close(tape.value(l).item(), 50f64.ln(), 1e-12));
        assert!(tape.cross_entropy(x, &[0, 7, 50]).is_err());
    }
}
