//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value to a [`Tape`];
//! node ids grow monotonically, so the node vector is already in
//! topological order and `backward` is a single reverse sweep.
//!
//! ```
//! use mcnc::autodiff::Tape;
//! use mcnc::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(0.0));
//! let two = tape.constant(Tensor::scalar(2.0));
//! let y = tape.mul(x, two).unwrap();
//! let y = tape.activation(y, mcnc::Activation::Sine);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Elementwise nonlinearity used by generators and task networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
    /// Alpha 1.0.
    Elu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Sine,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Elu,
        Activation::Sigmoid,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sine => x.sin(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sine => x.cos(),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sine => "sine",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
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

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sine" | "sin" => Ok(Activation::Sine),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leakyrelu" => Ok(Activation::LeakyRelu),
            "elu" => Ok(Activation::Elu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// Right operand is a shared matrix that never receives a gradient.
    MatMulFrozen(Var, Arc<Tensor>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Activation(Var, Activation),
    ScaleRows(Var, Var),
    Slice {
        src: Var,
        offset: usize,
    },
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SortedMatchingW2 {
        a: Var,
        b: Var,
        order_a: Vec<usize>,
        order_b: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b)
            | Op::SortedMatchingW2 { a, b, .. } => vec![*a, *b],
            Op::MatMulFrozen(a, _)
            | Op::Activation(a, _)
            | Op::Slice { src: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::NormalizeRows(a)
            | Op::SoftmaxCrossEntropy { logits: a, .. } => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation graph. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when `v` did not influence the root.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        t.dims2()
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `x · w` where `w` is frozen and shared rather than copied onto the tape.
    pub fn matmul_frozen(&mut self, x: Var, w: Arc<Tensor>) -> Result<Var> {
        let value = self.value(x).matmul(&w)?;
        Ok(self.push(Op::MatMulFrozen(x, w), value))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Adds a length-`n` bias to every row of a `B×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Activation(x, kind), value)
    }

    /// Multiplies row `i` of a `B×n` matrix by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (rows, n) = self.dims(x, "scale_rows")?;
        if self.value(scale).len() != rows {
            return Err(Error::Dimension {
                op: "scale_rows",
                left: self.value(x).shape().to_vec(),
                right: self.value(scale).shape().to_vec(),
            });
        }
        let s = self.value(scale).data().to_vec();
        let mut value = self.value(x).clone();
        for (row, si) in value.data_mut().chunks_exact_mut(n).zip(&s) {
            for v in row {
                *v *= si;
            }
        }
        Ok(self.push(Op::ScaleRows(x, scale), value))
    }

    /// Takes `product(shape)` consecutive elements of the flattened `src`
    /// starting at `offset`, as a new tensor of `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let available = self.value(src).len();
        if offset + len > available {
            return Err(Error::Structural(format!(
                "slice [{offset}, {}) out of range for {available} elements",
                offset + len
            )));
        }
        let data = self.value(src).data()[offset..offset + len].to_vec();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::Slice { src, offset }, value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(x), value)
    }

    /// Divides each row by its Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.dims(x, "normalize_rows")?;
        let value = normalize_rows(self.value(x))?;
        Ok(self.push(Op::NormalizeRows(x), value))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Data(format!(
                "{} labels for a batch of {b} logits",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!(
                "label {l} at index {i} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                total += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= total;
            }
            loss += total.ln() - (row[labels[i]] - max);
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Squared 1-D Wasserstein-2 distance by sorted matching, averaged over
    /// columns: `a` and `b` are `n×m` matrices of `m` projected samples.
    pub fn sorted_matching_w2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sorted_matching_w2")?;
        let (n, m) = self.dims(a, "sorted_matching_w2")?;
        let order_a = column_orders(self.value(a), n, m);
        let order_b = column_orders(self.value(b), n, m);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut total = 0.0;
        for j in 0..m {
            for i in 0..n {
                let r = da[order_a[j * n + i] * m + j] - db[order_b[j * n + i] * m + j];
                total += r * r;
            }
        }
        let value = Tensor::scalar(total / (n * m) as f64);
        Ok(self.push(Op::SortedMatchingW2 { a, b, order_a, order_b }, value))
    }

    /// Clears all gradient slots so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `root`. Gradients of every node that
    /// influences `root` are left in place for [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("unknown node {}", root.0)));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        let seed_shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&seed_shape, 1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &g)?;
            self.nodes[id].grad = Some(g);
            for (input, grad) in contributions {
                assert!(input.0 < id, "tape is not topologically ordered");
                let slot = &mut self.nodes[input.0];
                match &mut slot.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += v;
                        }
                    }
                    None => slot.grad = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, false);
                    out.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, false);
                    out.push((*b, Tensor::new(vec![k, n], gb)?));
                }
            }
            Op::MatMulFrozen(x, w) => {
                if self.wants(*x) {
                    let (m, k) = self.value(*x).dims2()?;
                    let n = w.cols();
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, w.data(), true, &mut gx, false);
                    out.push((*x, Tensor::new(vec![m, k], gx)?));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, elementwise(g, self.value(*b), |x, y| x * y)));
                }
                if self.wants(*b) {
                    out.push((*b, elementwise(g, self.value(*a), |x, y| x * y)));
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    out.push((*bias, Tensor::new(shape, gb)?));
                }
            }
            Op::Activation(x, kind) => {
                if self.wants(*x) {
                    let kind = *kind;
                    out.push((*x, elementwise(g, self.value(*x), |gv, xv| gv * kind.derivative(xv))));
                }
            }
            Op::ScaleRows(x, scale) => {
                let n = g.cols();
                if self.wants(*x) {
                    let s = self.value(*scale).data();
                    let mut gx = g.clone();
                    for (row, si) in gx.data_mut().chunks_exact_mut(n).zip(s) {
                        for v in row {
                            *v *= si;
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*scale) {
                    let gs: Vec<f64> = g
                        .data()
                        .chunks_exact(n)
                        .zip(self.value(*x).data().chunks_exact(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    let shape = self.value(*scale).shape().to_vec();
                    out.push((*scale, Tensor::new(shape, gs)?));
                }
            }
            Op::Slice { src, offset } => {
                if self.wants(*src) {
                    let mut gs = Tensor::zeros(self.value(*src).shape());
                    gs.data_mut()[*offset..*offset + g.len()].copy_from_slice(g.data());
                    out.push((*src, gs));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let t = self.value(*x);
                    out.push((*x, Tensor::full(t.shape(), g.data()[0] / t.len() as f64)));
                }
            }
            Op::NormalizeRows(x) => {
                if self.wants(*x) {
                    let input = self.value(*x);
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = g.clone();
                    for ((gr, yr), xr) in gx
                        .data_mut()
                        .chunks_exact_mut(n)
                        .zip(y.data().chunks_exact(n))
                        .zip(input.data().chunks_exact(n))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * dot) / norm;
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g.data()[0] / b as f64;
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * c + l] -= 1.0;
                    }
                    for v in &mut gl {
                        *v *= scale;
                    }
                    out.push((*logits, Tensor::new(vec![b, c], gl)?));
                }
            }
            Op::SortedMatchingW2 { a, b, order_a, order_b } => {
                let (n, m) = self.value(*a).dims2()?;
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * g.data()[0] / (n * m) as f64;
                let mut ga = vec![0.0; n * m];
                let mut gb = vec![0.0; n * m];
                for j in 0..m {
                    for i in 0..n {
                        let (ia, ib) = (order_a[j * n + i] * m + j, order_b[j * n + i] * m + j);
                        let r = scale * (da[ia] - db[ib]);
                        ga[ia] += r;
                        gb[ib] -= r;
                    }
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::new(vec![n, m], ga)?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(vec![n, m], gb)?));
                }
            }
        }
        Ok(out)
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked at record time")
}

/// Row indices sorted by value, per column, laid out column after column.
fn column_orders(t: &Tensor, n: usize, m: usize) -> Vec<usize> {
    let d = t.data();
    let mut orders = Vec::with_capacity(n * m);
    for j in 0..m {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&p, &q| d[p * m + j].total_cmp(&d[q * m + j]));
        orders.extend(idx);
    }
    orders
}

/// Divides each row of a matrix by its Euclidean norm.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput { row: i });
        }
        for v in row {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Compares tape gradients of a scalar function against central finite
/// differences `(f(x+he) - f(x-he)) / 2h`, coordinate by coordinate over all
/// `inputs`. Returns the largest `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value is {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).data()[0].is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.symmetric(1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sine_of_double_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.add(x, x).unwrap();
        let y = tape.activation(y, Activation::Sine);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
        tape.reset_grads();
        tape.backward(y).unwrap();
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sine.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.5), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::LeakyRelu.apply(-1.0), -0.01);
        assert!((Activation::Elu.apply(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!("cosine".parse::<Activation>().is_err());
        for a in Activation::ALL {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let err = finite_difference_check_many(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                Ok(t.sum(c))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = Rng::from_seed(2);
        let x = random(&[2, 3], &mut rng);
        for kind in Activation::ALL {
            let err = finite_difference_check(
                |t, v| {
                    let y = t.activation(v, kind);
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum(y2))
                },
                &x,
                1e-5,
            )
            .unwrap();
            let tol = if kind == Activation::Sine { 1e-8 } else { 1e-6 };
            assert!(err <= tol, "{kind}: {err}");
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let z = tape.leaf(Tensor::from_rows(&[[10.0, -10.0]]).unwrap());
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        // -log sigmoid(20) = log1p(exp(-20))
        let oracle = (-20.0f64).exp().ln_1p();
        let got = tape.value(l).data()[0];
        assert!((got - oracle).abs() / oracle < 1e-6, "{got} vs {oracle}");
        assert!((got - 2.06e-9).abs() < 0.01e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.softmax_cross_entropy(z, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = Rng::from_seed(4);
        let z = random(&[4, 3], &mut rng);
        let err = finite_difference_check(|t, v| t.softmax_cross_entropy(v, &[0, 2, 1, 2]), &z, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn three_layer_sine_mlp_all_leaves() {
        let mut rng = Rng::from_seed(9);
        let x = random(&[5, 3], &mut rng);
        let w1 = random(&[3, 6], &mut rng);
        let b1 = random(&[6], &mut rng);
        let w2 = random(&[6, 6], &mut rng);
        let w3 = random(&[6, 1], &mut rng);
        let err = finite_difference_check_many(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.activation(h, Activation::Sine);
                let h = t.matmul(h, v[3])?;
                let h = t.activation(h, Activation::Sine);
                let h = t.matmul(h, v[4])?;
                Ok(t.sum(h))
            },
            &[x, w1, b1, w2, w3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x*x + sin(x)) uses x three times.
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.activation(v, Activation::Sine);
        let y = tape.add(sq, s).unwrap();
        let y = tape.sum(y);
        tape.backward(y).unwrap();
        let g = tape.grad(v).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - (2.0 * xi + xi.cos())).abs() < 1e-14);
        }
    }

    #[test]
    fn normalize_and_scale_rows_gradients() {
        let mut rng = Rng::from_seed(12);
        let x = random(&[4, 3], &mut rng);
        let s = random(&[4], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let err = finite_difference_check_many(
            |t, v| {
                let y = t.normalize_rows(v[0])?;
                let y = t.scale_rows(y, v[1])?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &[x, s],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn slice_and_sorted_matching_gradients() {
        let mut rng = Rng::from_seed(13);
        let x = random(&[3, 4], &mut rng);
        let a = random(&[6, 2], &mut rng);
        let b = random(&[6, 2], &mut rng);
        let err = finite_difference_check_many(
            |t, v| {
                let s = t.slice(v[0], 2, &[2, 3])?;
                let s2 = t.mul(s, s)?;
                let w = t.sorted_matching_w2(v[1], v[2])?;
                let total = t.sum(s2);
                t.add(total, w)
            },
            &[x, a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn finite_difference_check_on_linear_and_quadratic() {
        let x = Tensor::vector(vec![0.4, -3.0, 7.5]).unwrap();
        let err = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
        assert!(finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_function_is_numeric_error() {
        let x = Tensor::vector(vec![f64::NAN]).unwrap();
        let res = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 1e-5);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
