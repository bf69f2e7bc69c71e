//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array of `f64` plus a gradient slot.
//! Every differentiable operation records its inputs, so calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates `d loss / d leaf` into the grad slot of
//! every leaf created with [`Tensor::param`].
//!
//! Gradients accumulate: a second `backward` adds to whatever is already in
//! the slots. Clearing them is the optimizer's job (see
//! [`Tensor::zero_grad`]).
//!
//! Operations whose inputs are all constants produce constants, so inference
//! passes retain no graph.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Lower bound applied to every `log` argument.
pub const LOG_CLAMP: f64 = 1e-12;

/// Rows shorter than this are treated as having this norm by
/// [`Tensor::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRowBias(Tensor, Tensor),
    Scale(Tensor, f64),
    Neg(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Softmax(Tensor),
    NormalizeRows(Tensor),
    Dropout(Tensor, Vec<f64>),
    Sum(Tensor),
    Mean(Tensor),
}

impl Op {
    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRowBias(x, b) => vec![x, b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Neg(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::NormalizeRows(x)
            | Op::Dropout(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("data", &self.node.data)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Dimension(format!("shape {shape:?} has a zero extent")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} holds {numel} elements but {len} values were given"
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| t.node.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        check_shape(&shape, data.len())?;
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op: Op::Leaf,
            }),
        })
    }

    /// A trainable leaf: `backward` writes its gradient into the grad slot.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::constant(vec![0.0; n], shape)
    }

    /// Builds a constant `rows.len() × cols` matrix from row slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Tensor> {
        let Some(first) = rows.first() else {
            return Err(Error::Dimension("cannot build a matrix from zero rows".into()));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::constant(data, &[rows.len(), cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Row count of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.node.shape.len() {
            2 => self.node.shape[0],
            _ => 1,
        }
    }

    /// Column count of a matrix (the length for vectors).
    pub fn cols(&self) -> usize {
        *self.node.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.node.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same values, no graph, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.shape.clone(), self.node.data.clone(), false)
            .expect("shape already validated")
    }

    /// Constant matrix made of the given rows, in order. Indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let n = self.rows();
        if idx.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Dimension(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::constant(data, &[idx.len(), c])
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.node.shape != other.node.shape {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.node.shape, other.node.shape
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} times {k2}x{n}"
            )));
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let data = transpose_raw(self.data(), r, c);
        Ok(Tensor::from_op(vec![c, r], data, Op::Transpose(self.clone())))
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(other, what)?;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// `x[i, j] + bias[j]` for a `B×n` matrix and a length-`n` bias.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.matrix_dims("add_row_bias")?;
        if bias.numel() != c {
            return Err(Error::Dimension(format!(
                "bias of length {} cannot broadcast over {c} columns",
                bias.numel()
            )));
        }
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            Op::AddRowBias(self.clone(), bias.clone()),
        ))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(self.node.shape.clone(), self.map(|v| v * c), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(self.node.shape.clone(), self.map(|v| -v), Op::Neg(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.node.shape.clone(), self.map(|v| v.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.node.shape.clone(), self.map(f64::exp), Op::Exp(self.clone()))
    }

    /// Natural log of `max(x, LOG_CLAMP)`. Clamped entries get zero gradient.
    pub fn log(&self) -> Tensor {
        Tensor::from_op(
            self.node.shape.clone(),
            self.map(|v| v.max(LOG_CLAMP).ln()),
            Op::Log(self.clone()),
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("softmax")?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(self.row(i), &mut data[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_op(vec![r, c], data, Op::Softmax(self.clone())))
    }

    /// Divides each row by its L2 norm (floored at `NORM_EPS`).
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("normalize_rows")?;
        let mut data = self.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let norm = l2(row).max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Tensor::from_op(vec![r, c], data, Op::NormalizeRows(self.clone())))
    }

    /// Inverted dropout. With `active == false` or `rate == 0` the input is
    /// returned unchanged and no random numbers are drawn.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, active: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !active || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            Op::Dropout(self.clone(), mask),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s / self.numel() as f64], Op::Mean(self.clone()))
    }

    /// Accumulates `d self / d leaf` into every reachable trainable leaf.
    /// `self` must hold exactly one element.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node.shape
            )));
        }
        if !self.node.requires_grad {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.node), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&Rc::as_ptr(&t.node)) else {
                continue;
            };
            if let Op::Leaf = t.node.op {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => *slot = Some(g),
                }
                continue;
            }
            t.propagate(&g, &mut grads);
        }
        Ok(())
    }

    /// Post-order over the differentiable part of the graph; each node once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.node);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.node.op.inputs() {
                if input.node.requires_grad && !visited.contains(&Rc::as_ptr(&input.node)) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<*const Node, Vec<f64>>) {
        let mut send = |t: &Tensor, contrib: Vec<f64>| {
            if !t.node.requires_grad {
                return;
            }
            match grads.get_mut(&Rc::as_ptr(&t.node)) {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, v)| *a += v),
                None => {
                    grads.insert(Rc::as_ptr(&t.node), contrib);
                }
            }
        };
        let out = self.data();
        match &self.node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (a.node.shape[0], a.node.shape[1]);
                let n = b.node.shape[1];
                if a.node.requires_grad {
                    let bt = transpose_raw(b.data(), k, n);
                    send(a, matmul_raw(g, &bt, m, n, k));
                }
                if b.node.requires_grad {
                    let at = transpose_raw(a.data(), m, k);
                    send(b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (x.node.shape[0], x.node.shape[1]);
                send(x, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if a.node.requires_grad {
                    send(a, g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                }
                if b.node.requires_grad {
                    send(b, g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddRowBias(x, b) => {
                send(x, g.to_vec());
                if b.node.requires_grad {
                    let c = b.numel();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    send(b, gb);
                }
            }
            Op::Scale(x, c) => send(x, g.iter().map(|v| v * c).collect()),
            Op::Neg(x) => send(x, g.iter().map(|v| -v).collect()),
            Op::Relu(x) => send(
                x,
                g.iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(x) => send(x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(x) => send(
                x,
                g.iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > LOG_CLAMP { g / v } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(x) => {
                let c = x.cols();
                let mut gx = vec![0.0; g.len()];
                for (i, (gr, yr)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(x, gx);
            }
            Op::NormalizeRows(x) => {
                let c = x.cols();
                let mut gx = vec![0.0; g.len()];
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let yr = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let norm = l2(xr);
                    if norm > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            gx[i * c + j] = gr[j] / NORM_EPS;
                        }
                    }
                }
                send(x, gx);
            }
            Op::Dropout(x, mask) => send(x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Sum(x) => send(x, vec![g[0]; x.numel()]),
            Op::Mean(x) => send(x, vec![g[0] / x.numel() as f64; x.numel()]),
        }
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}
