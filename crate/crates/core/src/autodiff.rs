//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, which is a valid topological
//! order, so [`Tape::backward`] is a single reverse sweep.
//!
//! A node only participates in the backward sweep when one of its ancestors
//! is a trainable leaf *and* no [`Tape::stop_grad`] sits on the path. That is
//! what gives `stop_grad` its exact-zero semantics: the sweep never visits the
//! far side of it.
//!
//! ```
//! use gapped_st::autodiff::Tape;
//! use gapped_st::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![2.0]));
//! let y = tape.log(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[0.5]);
//! ```

use thiserror::Error;

use crate::tensor::{argmax, gemm, softmax_row, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ReluPlus(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMax(Var, Vec<usize>),
    ExpandCols(Var),
    GatherRows(Var, Vec<usize>),
    SoftmaxTau(Var, f64),
    LogSoftmax(Var),
    BceWithLogits(Var, Tensor),
    Reshape(Var),
    StopGrad,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when gradient can reach a trainable leaf through this node.
    live: bool,
}

/// One forward evaluation's worth of nodes.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Trainable leaf: gradients are accumulated for it by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradient can flow from `v` back to a trainable leaf.
    pub fn is_live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    /// Gradient from the most recent `backward` call. `None` when the node
    /// was not reached (constants, nodes behind a stop-gradient).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, live: bool) -> Var {
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let live = match &op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::StopGrad => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                self.is_live(*a) || self.is_live(*b)
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ReluPlus(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::RowMax(a, _)
            | Op::ExpandCols(a)
            | Op::GatherRows(a, _)
            | Op::SoftmaxTau(a, _)
            | Op::LogSoftmax(a)
            | Op::BceWithLogits(a, _)
            | Op::Reshape(a) => self.is_live(*a),
        };
        Ok(self.push_raw(value, op, live))
    }

    fn binary_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || ta.len() == 1 || tb.len() == 1 {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
            .into())
        }
    }

    fn broadcast_zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, "binary", f).expect("shapes checked");
        }
        if tb.len() == 1 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape(a, b, "add")?;
        let out = self.broadcast_zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape(a, b, "sub")?;
        let out = self.broadcast_zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape(a, b, "mul")?;
        let out = self.broadcast_zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x (rows x n) + bias (n)` applied to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (rows, cols) = tx.rows_cols();
        if tb.len() != cols || tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
            .into());
        }
        let mut out = tx.clone();
        for r in 0..rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    /// `(x)+ = max(x, 0)`.
    pub fn relu_plus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::ReluPlus(a), "relu_plus")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidArgument("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a), "mean")
    }

    /// Sum over the last axis: `rows x n -> rows x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, _) = t.rows_cols();
        let data = (0..rows).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::new(&[rows, 1], data)?;
        self.push(out, Op::RowSum(a), "row_sum")
    }

    /// Max over the last axis: `rows x n -> rows x 1`. The gradient goes to
    /// the lowest maximising index.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, _) = t.rows_cols();
        let idx: Vec<usize> = (0..rows).map(|r| argmax(t.row(r))).collect();
        let data = idx.iter().enumerate().map(|(r, &i)| t.row(r)[i]).collect();
        let out = Tensor::new(&[rows, 1], data)?;
        self.push(out, Op::RowMax(a, idx), "row_max")
    }

    /// Repeats a `rows x 1` column `n` times: `rows x 1 -> rows x n`.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = t.rows_cols();
        if cols != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "expand_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, 1],
            }
            .into());
        }
        let data = t.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
        let out = Tensor::new(&[rows, n], data)?;
        self.push(out, Op::ExpandCols(a), "expand_cols")
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (nrows, cols) = t.matrix_dims("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(AutodiffError::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {nrows} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(&[rows.len(), cols], data)?;
        self.push(out, Op::GatherRows(a, rows.to_vec()), "gather_row")
    }

    /// Row-wise `softmax(x / tau)` with max subtraction.
    pub fn softmax_tau(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AutodiffError::InvalidTemperature(tau));
        }
        let t = self.value(a);
        t.check_finite("softmax_tau input")?;
        let (rows, _) = t.rows_cols();
        let mut out = t.clone();
        for r in 0..rows {
            softmax_row(t.row(r), tau, out.row_mut(r));
        }
        self.push(out, Op::SoftmaxTau(a, tau), "softmax_tau")
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, _) = t.rows_cols();
        let mut out = t.clone();
        for r in 0..rows {
            let lse = crate::tensor::log_sum_exp(t.row(r));
            for o in out.row_mut(r) {
                *o -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    /// Element-wise Bernoulli negative log-likelihood of `target` under
    /// logits `a`: `softplus(a) - target * a`.
    pub fn bce_with_logits(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(a);
        let out = t.zip_map(target, "bce_with_logits", |z, y| {
            z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
        })?;
        self.push(out, Op::BceWithLogits(a, target.clone()), "bce_with_logits")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        self.push(out, Op::StopGrad, "stop_grad")
    }

    /// Accumulates `d loss / d node` for every live node. Buffers are zeroed
    /// at the start of each call, so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].live {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.live {
                grads[id] = Some(g);
                continue;
            }
            let contributions = self.local_grads(id, &g)?;
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].live {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Reduces a gradient back to the shape of a possibly scalar-broadcast
    /// operand.
    fn unbroadcast(&self, operand: Var, g: Tensor) -> Tensor {
        let shape = self.value(operand).shape();
        if shape == g.shape() {
            g
        } else {
            Tensor::full(shape, g.sum())
        }
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::StopGrad => vec![],
            Op::Add(a, b) => vec![
                (*a, self.unbroadcast(*a, g.clone())),
                (*b, self.unbroadcast(*b, g.clone())),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.unbroadcast(*a, g.clone())),
                (*b, self.unbroadcast(*b, g.map(|x| -x))),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = broadcast_mul(g, tb);
                let gb = broadcast_mul(g, ta);
                vec![(*a, self.unbroadcast(*a, ga)), (*b, self.unbroadcast(*b, gb))]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, g.map(|x| c * x))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.matrix_dims("matmul")?;
                let (_, n) = tb.matrix_dims("matmul")?;
                let mut contrib = Vec::with_capacity(2);
                if self.nodes[a.0].live {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da);
                    contrib.push((*a, Tensor::new(&[m, k], da)?));
                }
                if self.nodes[b.0].live {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db);
                    contrib.push((*b, Tensor::new(&[k, n], db)?));
                }
                contrib
            }
            Op::AddBias(x, b) => {
                let (rows, cols) = g.rows_cols();
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                let gb = Tensor::new(self.value(*b).shape(), gb)?;
                vec![(*x, g.clone()), (*b, gb)]
            }
            Op::ReluPlus(a) => {
                let ga = g.zip_map(self.value(*a), "relu_plus", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                vec![(*a, ga)]
            }
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), "log", |gi, x| gi / x)?)],
            Op::Exp(a) => vec![(*a, g.zip_map(y, "exp", |gi, e| gi * e)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let t = self.value(*a);
                vec![(*a, Tensor::full(t.shape(), g.data()[0] / t.len() as f64))]
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let (_, cols) = t.rows_cols();
                let data = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
                vec![(*a, Tensor::new(t.shape(), data)?)]
            }
            Op::RowMax(a, idx) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (r, &i) in idx.iter().enumerate() {
                    ga.row_mut(r)[i] = g.data()[r];
                }
                vec![(*a, ga)]
            }
            Op::ExpandCols(a) => {
                let (rows, _) = g.rows_cols();
                let data = (0..rows).map(|r| g.row(r).iter().sum()).collect();
                vec![(*a, Tensor::new(self.value(*a).shape(), data)?)]
            }
            Op::GatherRows(a, rows) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (acc, v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *acc += v;
                    }
                }
                vec![(*a, ga)]
            }
            Op::SoftmaxTau(a, tau) => {
                // dx = (1/tau) * y * (g - <g, y>) per row
                let (rows, _) = y.rows_cols();
                let mut ga = g.clone();
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner) / tau;
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a) => {
                // dx = g - softmax(x) * sum(g) per row
                let (rows, _) = y.rows_cols();
                let mut ga = g.clone();
                for r in 0..rows {
                    let total: f64 = g.row(r).iter().sum();
                    for (o, &ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * total;
                    }
                }
                vec![(*a, ga)]
            }
            Op::BceWithLogits(a, target) => {
                let z = self.value(*a);
                let mut ga = g.clone();
                for ((o, &zi), &ti) in ga.data_mut().iter_mut().zip(z.data()).zip(target.data()) {
                    *o *= sigmoid(zi) - ti;
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape())?)],
        };
        Ok(out)
    }
}

/// `g * other` where `other` is either a single element or already has the
/// output shape.
fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.len() == 1 {
        let s = other.data()[0];
        g.map(|x| x * s)
    } else {
        g.zip_map(other, "mul", |a, b| a * b)
            .expect("non-scalar operand has the output shape")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
