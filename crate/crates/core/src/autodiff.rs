//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in insertion order; [`Graph::backward`]
//! replays the tape in exact reverse order and accumulates gradients into the
//! leaves that were created with `requires_grad`. Graphs are cheap and meant to
//! be rebuilt for every forward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Row-major dense tensor. Scalars have shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "ragged rows: {} vs {}",
                bad.len(),
                cols
            )));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix (a rank-1 tensor is one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        self.values.len() / self.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Plain kernels, shared by the graph and by graph-free inference so that both
// routes produce bit-identical numbers.

/// `out[n×m] = a[n×k] · b[k×m]`.
pub fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×m] += aᵀ · g` with `a[n×k]`, `g[n×m]`.
fn matmul_at_b_acc(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[n×k] += g · bᵀ` with `g[n×m]`, `b[k×m]`.
fn matmul_a_bt_acc(g: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// In-place softmax of one row, max-subtracted.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax of one row.
pub fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

// ---------------------------------------------------------------------------

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    Square(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Some requires-grad leaf is upstream of this node.
    needs_grad: bool,
}

/// Tape of operations. Single-threaded; build one per forward pass.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Resolves a broadcast pair: either equal shapes, or one operand is the
/// other's trailing shape (optionally with a leading 1) broadcast over the
/// leading batch dimension. Returns `(batch, inner, which_is_broadcast)`.
fn broadcast(a: &[usize], b: &[usize]) -> Option<(usize, usize, Broadcast)> {
    if a == b {
        return Some((1, a.iter().product(), Broadcast::None));
    }
    let trailing = |full: &[usize], part: &[usize]| -> bool {
        if full.len() < 2 {
            return false;
        }
        let rest = &full[1..];
        part == rest || (part.len() == full.len() && part[0] == 1 && &part[1..] == rest)
    };
    if trailing(a, b) {
        Some((a[0], b.iter().product(), Broadcast::Rhs))
    } else if trailing(b, a) {
        Some((b[0], a.iter().product(), Broadcast::Lhs))
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "tensor {v:?} is not part of this graph"
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{op:?} produced a non-finite value"
            )));
        }
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                self.nodes[a].needs_grad || self.nodes[b].needs_grad
            }
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => self.nodes[a].needs_grad,
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag decides whether
    /// [`backward`](Self::backward) accumulates into it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Constant leaf (never receives gradient).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        let i = self.check(v)?;
        Ok(self.nodes[i].value.grad())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(&ta.values, &tb.values, n, k, m, &mut out);
        self.push(Op::MatMul(ia, ib), Tensor::matrix(n, m, out)?)
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let name = if mul { "multiply" } else { "add" };
        let (batch, inner, bc) = broadcast(&ta.shape, &tb.shape)
            .ok_or_else(|| Error::Shape(format!("{name} of {:?} and {:?}", ta.shape, tb.shape)))?;
        let shape = if bc == Broadcast::Lhs {
            tb.shape.clone()
        } else {
            ta.shape.clone()
        };
        let mut out = Vec::with_capacity(batch * inner);
        for r in 0..batch {
            for j in 0..inner {
                let x = if bc == Broadcast::Lhs {
                    ta.values[j]
                } else {
                    ta.values[r * inner + j]
                };
                let y = if bc == Broadcast::Rhs {
                    tb.values[j]
                } else {
                    tb.values[r * inner + j]
                };
                out.push(if mul { x * y } else { x + y });
            }
        }
        let op = if mul {
            Op::Mul(ia, ib)
        } else {
            Op::Add(ia, ib)
        };
        self.push(op, Tensor::new(shape, out)?)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor::new(t.shape.clone(), t.values.iter().map(|&v| f(v)).collect())?;
        self.push(op, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary(a, Op::Scale(ia, c), |v| v * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary(a, Op::Neg(ia), |v| -v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary(a, Op::Square(ia), |v| v * v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary(a, Op::Relu(ia), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        self.unary(a, Op::Exp(ia), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if let Some(bad) = self.nodes[ia].value.values.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(a, Op::Log(ia), f64::ln)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.values.iter().sum();
        self.push(Op::Sum(ia), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let s = t.values.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(ia), Tensor::scalar(s))
    }

    /// Row-wise softmax (a rank-1 tensor is a single row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (c, mut out) = (t.cols(), t.values.clone());
        out.chunks_mut(c).for_each(softmax_row);
        let shape = t.shape.clone();
        self.push(Op::Softmax(ia), Tensor::new(shape, out)?)
    }

    /// Row-wise log-softmax; avoids `log(0)` when probabilities underflow.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (c, mut out) = (t.cols(), t.values.clone());
        out.chunks_mut(c).for_each(log_softmax_row);
        let shape = t.shape.clone();
        self.push(Op::LogSoftmax(ia), Tensor::new(shape, out)?)
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// `requires_grad` leaf; calling twice without [`zero_grad`](Self::zero_grad)
    /// doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op;
            let nodes = &self.nodes;
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, j: usize, f: &dyn Fn(&mut [f64])| {
                if !nodes[j].needs_grad {
                    return;
                }
                let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(slot);
            };
            let out = &nodes[i].value;
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    if node.value.requires_grad {
                        match &mut node.value.grad {
                            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                            None => node.value.grad = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                    let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    acc(&mut grads, a, &|s| {
                        matmul_a_bt_acc(&g, &tb.values, n, k, m, s)
                    });
                    acc(&mut grads, b, &|s| {
                        matmul_at_b_acc(&ta.values, &g, n, k, m, s)
                    });
                }
                Op::Add(a, b) | Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                    let (_, inner, bc) = broadcast(&ta.shape, &tb.shape).expect("checked");
                    let mul = matches!(op, Op::Mul(..));
                    // d/da = g * b (or g), reduced over the batch when a was broadcast.
                    let side = |slot: &mut [f64], other: &Tensor, other_bc: bool, self_bc: bool| {
                        for (idx, &gv) in g.iter().enumerate() {
                            let j = idx % inner;
                            let dv = if mul {
                                let o = if other_bc {
                                    other.values[j]
                                } else {
                                    other.values[idx]
                                };
                                gv * o
                            } else {
                                gv
                            };
                            if self_bc {
                                slot[j] += dv;
                            } else {
                                slot[idx] += dv;
                            }
                        }
                    };
                    let lhs_bc = bc == Broadcast::Lhs;
                    let rhs_bc = bc == Broadcast::Rhs;
                    acc(&mut grads, a, &|s| side(s, tb, rhs_bc, lhs_bc));
                    acc(&mut grads, b, &|s| side(s, ta, lhs_bc, rhs_bc));
                }
                Op::Scale(a, c) => acc(&mut grads, a, &|s| {
                    s.iter_mut().zip(&g).for_each(|(s, gv)| *s += gv * c)
                }),
                Op::Neg(a) => acc(&mut grads, a, &|s| {
                    s.iter_mut().zip(&g).for_each(|(s, gv)| *s -= gv)
                }),
                Op::Square(a) => {
                    let x = &nodes[a].value.values;
                    acc(&mut grads, a, &|s| {
                        for ((s, gv), xv) in s.iter_mut().zip(&g).zip(x) {
                            *s += 2.0 * xv * gv;
                        }
                    })
                }
                Op::Relu(a) => {
                    let x = &nodes[a].value.values;
                    acc(&mut grads, a, &|s| {
                        for ((s, gv), xv) in s.iter_mut().zip(&g).zip(x) {
                            if *xv > 0.0 {
                                *s += gv;
                            }
                        }
                    })
                }
                Op::Log(a) => {
                    let x = &nodes[a].value.values;
                    acc(&mut grads, a, &|s| {
                        for ((s, gv), xv) in s.iter_mut().zip(&g).zip(x) {
                            *s += gv / xv;
                        }
                    })
                }
                Op::Exp(a) => acc(&mut grads, a, &|s| {
                    for ((s, gv), yv) in s.iter_mut().zip(&g).zip(&out.values) {
                        *s += gv * yv;
                    }
                }),
                Op::Sum(a) => acc(&mut grads, a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
                Op::Mean(a) => {
                    let n = nodes[a].value.len() as f64;
                    acc(&mut grads, a, &|s| {
                        s.iter_mut().for_each(|s| *s += g[0] / n)
                    })
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    acc(&mut grads, a, &|s| {
                        for ((srow, grow), yrow) in
                            s.chunks_mut(c).zip(g.chunks(c)).zip(out.values.chunks(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((sv, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                                *sv += yv * (gv - dot);
                            }
                        }
                    })
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    acc(&mut grads, a, &|s| {
                        for ((srow, grow), lrow) in
                            s.chunks_mut(c).zip(g.chunks(c)).zip(out.values.chunks(c))
                        {
                            let gsum: f64 = grow.iter().sum();
                            for ((sv, gv), lv) in srow.iter_mut().zip(grow).zip(lrow) {
                                *sv += gv - lv.exp() * gsum;
                            }
                        }
                    })
                }
            }
        }
        Ok(())
    }

    /// Runs [`backward`](Self::backward) and returns `∂loss/∂v` for each
    /// requested leaf (zeros when the loss does not depend on it).
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        for &v in wrt {
            let i = self.check(v)?;
            if self.nodes[i].op != Op::Leaf || !self.nodes[i].value.requires_grad {
                return Err(Error::Graph(format!("{v:?} is not a differentiable leaf")));
            }
        }
        self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                let t = &self.nodes[v.index].value;
                t.grad.clone().unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect())
    }
}
