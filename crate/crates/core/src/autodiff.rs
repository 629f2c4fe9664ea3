//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use srcr_core::autodiff::Graph;
//! use srcr_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(&Tensor::from_rows(&[[1.0, 2.0]]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{gemm, Tensor, TensorError};

/// A linear map applied independently to every column of its input, e.g. a
/// fixed graph propagation matrix. Implementors supply the transpose for the
/// backward pass.
pub trait RowOperator: fmt::Debug {
    fn input_rows(&self) -> usize;
    fn output_rows(&self) -> usize;
    fn apply(&self, x: &Tensor) -> Tensor;
    fn apply_transpose(&self, x: &Tensor) -> Tensor;
}

/// Handle to a node on a [`Graph`].
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
    MatMul(Var, Var),
    /// The right operand may be a 1 x cols row broadcast over rows.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    L2NormRows(Var),
    Sum(Var),
    Mean(Var),
    SqDist(Var, Var),
    Operator(Var, Rc<dyn RowOperator>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes that do not depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Records a leaf; gradients flow to it iff the tensor requires them.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Tensor {
        self.val(v).as_ref().clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v).data()[0]
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.val(a).matmul(&self.val(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    fn broadcast_check(&self, op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool, TensorError> {
        if a.shape() == b.shape() {
            Ok(false)
        } else if b.rows() == 1 && b.cols() == a.cols() {
            Ok(true)
        } else {
            Err(TensorError::Shape {
                op,
                left: a.shape(),
                right: b.shape(),
            })
        }
    }

    fn zip_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        let broadcast = self.broadcast_check(op, &ta, &tb)?;
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { tb.data()[i % cols] } else { tb.data()[i] };
                f(x, y)
            })
            .collect();
        Tensor::new(ta.rows(), cols, data)
    }

    /// `a + b`; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_broadcast("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// `a - b`; `b` may be a row vector broadcast over the rows of `a`.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_broadcast("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        ta.check_same_shape("mul", &tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.val(a).map(|x| s * x);
        self.push(out, Op::Scale(a, s), self.needs(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), self.needs(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.val(a).map(f64::exp);
        self.push(out, Op::Exp(a), self.needs(a))
    }

    pub fn log(&self, a: Var) -> Result<Var, TensorError> {
        let ta = self.val(a);
        if let Some(bad) = ta.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        let out = ta.map(f64::ln);
        Ok(self.push(out, Op::Log(a), self.needs(a)))
    }

    /// Row-wise softmax, max-shifted for stability.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let ta = self.val(a);
        let mut out = ta.detached();
        let cols = ta.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        self.push(out, Op::SoftmaxRows(a), self.needs(a))
    }

    /// Euclidean norm of each row, as a `rows x 1` column.
    pub fn l2norm_rows(&self, a: Var) -> Var {
        let ta = self.val(a);
        let data = (0..ta.rows())
            .map(|r| ta.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(ta.rows(), 1, data).expect("column shape");
        self.push(out, Op::L2NormRows(a), self.needs(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).data().iter().sum());
        self.push(out, Op::Sum(a), self.needs(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let ta = self.val(a);
        let n = ta.len().max(1) as f64;
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / n);
        self.push(out, Op::Mean(a), self.needs(a))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n x d)
    /// and the rows of `b` (m x d), as an n x m matrix.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols() != tb.cols() {
            return Err(TensorError::Shape {
                op: "sq_dist",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        for i in 0..ta.rows() {
            let ai = ta.row(i);
            for j in 0..tb.rows() {
                let d = ai.iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                out.set(i, j, d);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::SqDist(a, b), needs))
    }

    /// Applies a fixed linear row operator (left multiplication).
    pub fn apply_operator(&self, a: Var, op: Rc<dyn RowOperator>) -> Result<Var, TensorError> {
        let ta = self.val(a);
        if ta.rows() != op.input_rows() {
            return Err(TensorError::Shape {
                op: "apply_operator",
                left: (op.output_rows(), op.input_rows()),
                right: ta.shape(),
            });
        }
        let out = op.apply(&ta);
        Ok(self.push(out, Op::Operator(a, op), self.needs(a)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let (rows, cols) = nodes[loss.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let mut send = |v: Var, contribution: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                        gemm(&g, false, tb, true, &mut ga, 0.0);
                        send(*a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                        gemm(ta, true, &g, false, &mut gb, 0.0);
                        send(*b, gb);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let tb = &nodes[b.0].value;
                    if nodes[b.0].needs_grad {
                        let gb = if tb.shape() == g.shape() {
                            g.map(|x| sign * x)
                        } else {
                            let mut col = Tensor::zeros(1, g.cols());
                            for r in 0..g.rows() {
                                for (c, x) in g.row(r).iter().enumerate() {
                                    col.data_mut()[c] += sign * x;
                                }
                            }
                            col
                        };
                        send(*b, gb);
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = zip(&g, tb, |x, y| x * y);
                    let gb = zip(&g, ta, |x, y| x * y);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(a, s) => send(*a, g.map(|x| s * x)),
                Op::Relu(a) => {
                    let ga = zip(&g, &nodes[a.0].value, |x, y| if y > 0.0 { x } else { 0.0 });
                    send(*a, ga);
                }
                Op::Exp(a) => send(*a, zip(&g, &node.value, |x, y| x * y)),
                Op::Log(a) => send(*a, zip(&g, &nodes[a.0].value, |x, y| x / y)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    send(*a, ga);
                }
                Op::L2NormRows(a) => {
                    let ta = &nodes[a.0].value;
                    let norms = &node.value;
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..ta.rows() {
                        let n = norms.get(r, 0);
                        // subgradient 0 at the origin
                        if n > 0.0 {
                            let s = g.get(r, 0) / n;
                            for c in 0..ta.cols() {
                                ga.set(r, c, s * ta.get(r, c));
                            }
                        }
                    }
                    send(*a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    send(*a, Tensor::filled(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    let n = (r * c).max(1) as f64;
                    send(*a, Tensor::filled(r, c, g.data()[0] / n));
                }
                Op::SqDist(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        // 2 * (rowsum(g) * a - g b)
                        let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                        gemm(&g, false, tb, false, &mut ga, 0.0);
                        for i in 0..ta.rows() {
                            let rs: f64 = g.row(i).iter().sum();
                            for c in 0..ta.cols() {
                                ga.set(i, c, 2.0 * (rs * ta.get(i, c) - ga.get(i, c)));
                            }
                        }
                        send(*a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        // 2 * (colsum(g) * b - g^T a)
                        let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                        gemm(&g, true, ta, false, &mut gb, 0.0);
                        for j in 0..tb.rows() {
                            let cs: f64 = (0..g.rows()).map(|i| g.get(i, j)).sum();
                            for c in 0..tb.cols() {
                                gb.set(j, c, 2.0 * (cs * tb.get(j, c) - gb.get(j, c)));
                            }
                        }
                        send(*b, gb);
                    }
                }
                Op::Operator(a, op) => send(*a, op.apply_transpose(&g)),
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}
