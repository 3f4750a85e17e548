//! Reverse-mode differentiation over a linear tape of rank-2 tensor ops.
//!
//! Nodes are appended in evaluation order, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Leaves come in two flavours: [`Tape::param`] (gradients tracked) and
//! [`Tape::constant`] (gradients never computed, nor for anything that
//! depends only on constants).

use crate::error::{GimError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value slot on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    Broadcast(Var),
    SelectRows(Var, Vec<usize>),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked slot of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(
                self.shapes[v.0].clone(),
                vec![0.0; self.shapes[v.0].iter().product()],
            ),
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(
        vec![t.rows(), t.cols()],
        t.data().iter().map(|&x| f(x)).collect(),
    )
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        vec![a.rows(), a.cols()],
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, value: Tensor, op: Op, a: Var) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn push_binary(&mut self, value: Tensor, op: Op, a: Var, b: Var) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(to_matrix(t), Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(to_matrix(t), Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (dims(self.value(a)), dims(self.value(b)));
        if da != db {
            return Err(GimError::Shape(format!(
                "{what} of {}x{} and {}x{}",
                da.0, da.1, db.0, db.1
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_binary(v, Op::MatMul(a, b), a, b))
    }

    /// `a + 1·bias` where `bias` is a `1×cols` row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if dims(self.value(bias)) != (1, c) {
            return Err(GimError::Shape(format!(
                "bias {:?} for {r}x{c} activations",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let v = Tensor::from_parts(vec![r, c], out);
        Ok(self.push_binary(v, Op::AddBias(a, bias), a, bias))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push_unary(v, Op::Relu(a), a)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_binary(v, Op::Add(a, b), a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_binary(v, Op::Sub(a, b), a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_binary(v, Op::Mul(a, b), a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push_binary(v, Op::Div(a, b), a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push_unary(v, Op::Square(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push_unary(v, Op::Exp(a), a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::ln);
        self.push_unary(v, Op::Ln(a), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.push_unary(v, Op::AddScalar(a), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x * c);
        self.push_unary(v, Op::MulScalar(a, c), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Sum of all elements, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_unary(Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(a), a)
    }

    /// Mean of all elements, as a 1×1 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_unary(Tensor::from_parts(vec![1, 1], vec![m]), Op::Mean(a), a)
    }

    /// Per-row sums: `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums = t.row_iter().map(|r| r.iter().sum()).collect();
        let v = Tensor::from_parts(vec![t.rows(), 1], sums);
        self.push_unary(v, Op::RowSum(a), a)
    }

    /// Per-column means: `n×m → 1×m`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut acc = vec![0.0; c];
        for row in t.row_iter() {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s += x;
            }
        }
        acc.iter_mut().for_each(|s| *s /= r as f64);
        let v = Tensor::from_parts(vec![1, c], acc);
        self.push_unary(v, Op::ColMean(a), a)
    }

    /// Repeats a `1×1`, `1×m`, or `n×1` value up to `rows×cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = dims(t);
        if !((r == 1 || r == rows) && (c == 1 || c == cols)) || rows == 0 || cols == 0 {
            return Err(GimError::Shape(format!(
                "cannot broadcast {r}x{c} to {rows}x{cols}"
            )));
        }
        let src = t.data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if r == 1 { 0 } else { i };
            for j in 0..cols {
                let sj = if c == 1 { 0 } else { j };
                out.push(src[si * c + sj]);
            }
        }
        let v = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push_unary(v, Op::Broadcast(a), a))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a).select_rows(rows)?;
        Ok(self.push_unary(v, Op::SelectRows(a, rows.to_vec()), a))
    }

    /// `max(a, floor)` elementwise; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = map(self.value(a), |x| x.max(floor));
        self.push_unary(v, Op::ClampMin(a, floor), a)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = loss.0 + 1;
        if n > self.nodes.len() {
            return Err(GimError::Contract(format!("unknown slot {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(GimError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.tracked {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims(av);
                let n = bv.cols();
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm((m, n, k), (g.data(), n, 1), (bv.data(), 1, n), &mut da, false);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm((k, m, n), (av.data(), 1, k), (g.data(), n, 1), &mut db, false);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::AddBias(a, bias) => {
                if self.tracked(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.row_iter() {
                        for (s, &x) in db.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    accumulate(grads, *bias, Tensor::from_parts(vec![1, c], db));
                }
                self.send(grads, *a, || g.clone());
            }
            Op::Relu(a) => {
                self.send(grads, *a, || zip(g, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || map(g, |d| -d));
            }
            Op::Mul(a, b) => {
                self.send(grads, *a, || zip(g, self.value(*b), |d, y| d * y));
                self.send(grads, *b, || zip(g, self.value(*a), |d, x| d * x));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.send(grads, *a, || zip(g, bv, |d, y| d / y));
                self.send(grads, *b, || {
                    let num = zip(g, self.value(*a), |d, x| d * x);
                    zip(&num, bv, |dx, y| -dx / (y * y))
                });
            }
            Op::Square(a) => {
                self.send(grads, *a, || zip(g, self.value(*a), |d, x| 2.0 * d * x));
            }
            Op::Exp(a) => {
                self.send(grads, *a, || zip(g, out, |d, e| d * e));
            }
            Op::Ln(a) => {
                self.send(grads, *a, || zip(g, self.value(*a), |d, x| d / x));
            }
            Op::AddScalar(a) => self.send(grads, *a, || g.clone()),
            Op::MulScalar(a, c) => self.send(grads, *a, || map(g, |d| d * c)),
            Op::Sum(a) | Op::Mean(a) => {
                let av = self.value(*a);
                let mut d = g.data()[0];
                if matches!(node.op, Op::Mean(_)) {
                    d /= av.len() as f64;
                }
                self.send(grads, *a, || Tensor::from_parts(vec![av.rows(), av.cols()], vec![d; av.len()]));
            }
            Op::RowSum(a) => {
                let (r, c) = dims(self.value(*a));
                self.send(grads, *a, || {
                    let data = (0..r).flat_map(|i| std::iter::repeat_n(g.data()[i], c)).collect();
                    Tensor::from_parts(vec![r, c], data)
                });
            }
            Op::ColMean(a) => {
                let (r, c) = dims(self.value(*a));
                self.send(grads, *a, || {
                    let row: Vec<f64> = g.data().iter().map(|d| d / r as f64).collect();
                    let data = (0..r).flat_map(|_| row.iter().copied()).collect();
                    Tensor::from_parts(vec![r, c], data)
                });
            }
            Op::Broadcast(a) => {
                let (r, c) = dims(self.value(*a));
                self.send(grads, *a, || {
                    let mut acc = vec![0.0; r * c];
                    let gc = g.cols();
                    for (i, row) in g.row_iter().enumerate() {
                        let si = if r == 1 { 0 } else { i };
                        for (j, &d) in row.iter().enumerate() {
                            let sj = if c == 1 { 0 } else { j };
                            acc[si * c + sj] += d;
                        }
                        debug_assert_eq!(row.len(), gc);
                    }
                    Tensor::from_parts(vec![r, c], acc)
                });
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = dims(self.value(*a));
                self.send(grads, *a, || {
                    let mut acc = vec![0.0; r * c];
                    for (k, &i) in rows.iter().enumerate() {
                        for (s, &d) in acc[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *s += d;
                        }
                    }
                    Tensor::from_parts(vec![r, c], acc)
                });
            }
            Op::ClampMin(a, floor) => {
                self.send(grads, *a, || zip(g, self.value(*a), |d, x| if x > *floor { d } else { 0.0 }));
            }
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, delta: impl FnOnce() -> Tensor) {
        if self.tracked(to) {
            accumulate(grads, to, delta());
        }
    }
}

fn to_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let shape = vec![t.rows(), t.cols()];
        Tensor::from_parts(shape, t.into_data())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], to: Var, delta: Tensor) {
    match &mut grads[to.0] {
        Some(g) => {
            for (s, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *s += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
