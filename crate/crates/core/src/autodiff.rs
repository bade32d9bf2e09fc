//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value, so node indices
//! are already a topological order and `backward` is a single reverse sweep.
//! Gradients are accumulated into the nodes that were created with
//! `requires_grad`; calling `backward` twice without [`Tape::zero_grad`] sums
//! the two passes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, ENTROPY_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxTemp(Var, f64),
    Entropy(Var),
    /// Mean over rows of `-ln p[row, label]`.
    Nll(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Whether any `requires_grad` leaf feeds this node.
    on_grad_path: bool,
    grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            on_grad_path: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let on_grad_path = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::AddRowBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) => {
                self.nodes[a.0].on_grad_path || self.nodes[b.0].on_grad_path
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::SoftmaxTemp(a, _)
            | Op::Entropy(a)
            | Op::Nll(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => self.nodes[a.0].on_grad_path,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            on_grad_path,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.push(value, Op::AddRowBias(x, bias)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x).map(|v| v + offset);
        self.push(value, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn softmax_temp(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        let value = tensor::softmax_temp(self.value(logits), temperature)?;
        Ok(self.push(value, Op::SoftmaxTemp(logits, temperature)))
    }

    /// Row entropies [b] of a probability matrix [b × c].
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let value = tensor::entropy(self.value(p))?;
        Ok(self.push(value, Op::Entropy(p)))
    }

    /// Mean negative log-probability of the labelled class.
    pub fn nll(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let probs = self.value(p);
        if !probs.is_matrix() || probs.rows() != labels.len() || probs.rows() == 0 {
            return Err(Error::dim("nll", probs.shape(), &[labels.len()]));
        }
        let c = probs.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs.get(r, y).max(f64::MIN_POSITIVE).ln())
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::Nll(p, labels.into())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Accumulates `∂loss/∂leaf` into every `requires_grad` leaf on the path
    /// to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.on_grad_path {
                continue;
            }
            if node.requires_grad {
                match &mut self.nodes[idx].grad {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_gradients(idx, &g) {
                if !self.nodes[input.0].on_grad_path {
                    continue;
                }
                match &mut adjoint[input.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for its operands.
    fn local_gradients(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut grads = Vec::with_capacity(2);
                if self.nodes[a.0].on_grad_path {
                    grads.push((*a, tensor::matmul_nt(g, bv)));
                }
                if self.nodes[b.0].on_grad_path {
                    grads.push((*b, tensor::matmul_tn(av, g)));
                }
                grads
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = Tensor::zeros(self.value(*bias).shape());
                for row in g.data().chunks(n) {
                    for (d, &v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, db)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Scale(x, factor) => vec![(*x, g.map(|v| v * factor))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxTemp(x, temperature) => {
                // dz = p ⊙ (g − ⟨g, p⟩) / T, row by row.
                let c = out.cols();
                let mut dx = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = dx.row_mut(r);
                    for j in 0..c {
                        dr[j] = p[j] * (gr[j] - dot) / temperature;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Entropy(p) => {
                let pv = self.value(*p);
                let c = pv.cols();
                let mut dp = Tensor::zeros(pv.shape());
                for r in 0..pv.rows() {
                    let gr = g.data()[r];
                    for (d, &v) in dp.row_mut(r).iter_mut().zip(&pv.data()[r * c..(r + 1) * c]) {
                        if v >= ENTROPY_FLOOR {
                            *d = -gr * (v.ln() + 1.0);
                        }
                    }
                }
                vec![(*p, dp)]
            }
            Op::Nll(p, labels) => {
                let pv = self.value(*p);
                let scale = g.item() / labels.len() as f64;
                let mut dp = Tensor::zeros(pv.shape());
                let c = pv.cols();
                for (r, &y) in labels.iter().enumerate() {
                    dp.data_mut()[r * c + y] = -scale / pv.get(r, y).max(f64::MIN_POSITIVE);
                }
                vec![(*p, dp)]
            }
            Op::Sum(x) => {
                let gv = g.item();
                vec![(*x, self.value(*x).map(|_| gv))]
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item() / xv.len() as f64;
                vec![(*x, xv.map(|_| gv))]
            }
        }
    }
}
