//! Computation graphs: an eager evaluator and a reverse-mode tape.
//!
//! Model code is written once against [`Graph`]. Running it on [`Eager`]
//! just computes values; running it on [`Tape`] records every primitive so
//! [`Tape::backward`] can produce gradients. Both share the same kernels in
//! [`Tensor`], so forward values are identical either way.

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub trait Graph<'p> {
    type Value: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// A borrowed leaf that receives a gradient on a tape.
    fn param(&mut self, t: &'p Tensor) -> Self::Value;
    /// A borrowed leaf that never receives a gradient.
    fn frozen(&mut self, t: &'p Tensor) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, factor: f64) -> Self::Value;
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    fn mean(&mut self, a: &Self::Value) -> Self::Value;
    fn square(&mut self, a: &Self::Value) -> Self::Value;
    fn sqrt(&mut self, a: &Self::Value) -> Self::Value;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn l2_norm(&mut self, a: &Self::Value) -> Self::Value;
    /// `a / ||a||`; the zero tensor maps to itself.
    fn normalize(&mut self, a: &Self::Value) -> Self::Value;
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn select_row(&mut self, table: &Self::Value, index: usize) -> Result<Self::Value>;

    fn value_of(&self, v: &Self::Value) -> f64 {
        self.tensor(v).item()
    }
}

/// Evaluates without recording anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<'p> Graph<'p> for Eager {
    type Value = Cow<'p, Tensor>;

    fn constant(&mut self, t: Tensor) -> Self::Value {
        Cow::Owned(t)
    }
    fn param(&mut self, t: &'p Tensor) -> Self::Value {
        Cow::Borrowed(t)
    }
    fn frozen(&mut self, t: &'p Tensor) -> Self::Value {
        Cow::Borrowed(t)
    }
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor {
        v
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.add(b).map(Cow::Owned)
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.sub(b).map(Cow::Owned)
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.mul(b).map(Cow::Owned)
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        a.matmul(b).map(Cow::Owned)
    }
    fn add_row(&mut self, a: &Self::Value, row: &Self::Value) -> Result<Self::Value> {
        a.add_row(row).map(Cow::Owned)
    }
    fn scale(&mut self, a: &Self::Value, factor: f64) -> Self::Value {
        Cow::Owned(a.scale(factor))
    }
    fn sum(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.sum())
    }
    fn mean(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.mean())
    }
    fn square(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.square())
    }
    fn sqrt(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.sqrt())
    }
    fn tanh(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.tanh())
    }
    fn l2_norm(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.l2_norm())
    }
    fn normalize(&mut self, a: &Self::Value) -> Self::Value {
        Cow::Owned(a.normalized())
    }
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        Tensor::concat(&refs).map(Cow::Owned)
    }
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        a.reshape(shape).map(Cow::Owned)
    }
    fn select_row(&mut self, table: &Self::Value, index: usize) -> Result<Self::Value> {
        table.select_row(index).map(Cow::Owned)
    }
}

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
    MatMul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    L2Norm(Var),
    Normalize(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SelectRow(Var, usize),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations. Nodes are stored in
/// creation order, which is a topological order.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf that owns its value.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.get(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out_value = &self.nodes[out].value;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, || g.clone());
                self.accumulate(grads, b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, || g.clone());
                self.accumulate(grads, b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, || zip(g, self.get(b), |x, y| x * y));
                self.accumulate(grads, b, || zip(g, self.get(a), |x, y| x * y));
            }
            Op::MatMul(a, b) => {
                let at = self.get(a);
                let bt = self.get(b);
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                self.accumulate(grads, a, || {
                    // dA = G * B^T
                    let mut out = vec![0.0; m * k];
                    let (gd, bd) = (g.data(), bt.data());
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * bd[p * n + j];
                            }
                            out[i * k + p] = acc;
                        }
                    }
                    Tensor::from_parts(vec![m, k], out)
                });
                self.accumulate(grads, b, || {
                    // dB = A^T * G
                    let mut out = vec![0.0; k * n];
                    let (gd, ad) = (g.data(), at.data());
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut out[p * n..(p + 1) * n];
                            for (o, &gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![k, n], out)
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, || g.clone());
                self.accumulate(grads, row, || {
                    let n = g.shape()[1];
                    let mut out = vec![0.0; n];
                    for r in g.data().chunks(n) {
                        for (o, v) in out.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(vec![1, n], out)
                });
            }
            Op::Scale(a, f) => self.accumulate(grads, a, || g.scale(f)),
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, a, || Tensor::full(self.get(a).shape(), gv));
            }
            Op::Mean(a) => {
                let x = self.get(a);
                let gv = g.item() / x.numel() as f64;
                self.accumulate(grads, a, || Tensor::full(x.shape(), gv));
            }
            Op::Square(a) => {
                self.accumulate(grads, a, || zip(g, self.get(a), |gv, x| 2.0 * x * gv));
            }
            Op::Sqrt(a) => {
                self.accumulate(grads, a, || zip(g, out_value, |gv, y| 0.5 * gv / y));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, a, || zip(g, out_value, |gv, y| gv * (1.0 - y * y)));
            }
            Op::L2Norm(a) => {
                let norm = out_value.item();
                let gv = g.item();
                self.accumulate(grads, a, || {
                    if norm == 0.0 {
                        Tensor::zeros(self.get(a).shape())
                    } else {
                        self.get(a).scale(gv / norm)
                    }
                });
            }
            Op::Normalize(a) => {
                let norm = self.get(a).l2_norm().item();
                self.accumulate(grads, a, || {
                    if norm == 0.0 {
                        Tensor::zeros(g.shape())
                    } else {
                        let proj: f64 = g.data().iter().zip(out_value.data()).map(|(x, y)| x * y).sum();
                        zip(g, out_value, |gv, u| (gv - u * proj) / norm)
                    }
                });
            }
            Op::Concat(ref parts) => {
                let shape = g.shape();
                let width = shape[shape.len() - 1];
                let rows = g.numel() / width;
                let mut offset = 0;
                for &p in parts {
                    let pt = self.get(p);
                    let w = pt.shape()[pt.shape().len() - 1];
                    self.accumulate(grads, p, || {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g.data()[r * width + offset..r * width + offset + w]);
                        }
                        Tensor::from_parts(pt.shape().to_vec(), out)
                    });
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let shape = self.get(a).shape().to_vec();
                self.accumulate(grads, a, || Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::SelectRow(table, index) => {
                self.accumulate(grads, table, || {
                    let t = self.get(table);
                    let n = t.shape()[1];
                    let mut out = Tensor::zeros(t.shape());
                    out.data_mut()[index * n..(index + 1) * n].copy_from_slice(g.data());
                    out
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.wants(v) {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(c.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<'p> Graph<'p> for Tape<'p> {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }
    fn param(&mut self, t: &'p Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }
    fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }
    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.get(*v)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).add(self.get(*b))?;
        Ok(self.push(v, Op::Add(*a, *b), &[*a, *b]))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).sub(self.get(*b))?;
        Ok(self.push(v, Op::Sub(*a, *b), &[*a, *b]))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).mul(self.get(*b))?;
        Ok(self.push(v, Op::Mul(*a, *b), &[*a, *b]))
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).matmul(self.get(*b))?;
        Ok(self.push(v, Op::MatMul(*a, *b), &[*a, *b]))
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let v = self.get(*a).add_row(self.get(*row))?;
        Ok(self.push(v, Op::AddRow(*a, *row), &[*a, *row]))
    }
    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let v = self.get(*a).scale(factor);
        self.push(v, Op::Scale(*a, factor), &[*a])
    }
    fn sum(&mut self, a: &Var) -> Var {
        let v = self.get(*a).sum();
        self.push(v, Op::Sum(*a), &[*a])
    }
    fn mean(&mut self, a: &Var) -> Var {
        let v = self.get(*a).mean();
        self.push(v, Op::Mean(*a), &[*a])
    }
    fn square(&mut self, a: &Var) -> Var {
        let v = self.get(*a).square();
        self.push(v, Op::Square(*a), &[*a])
    }
    fn sqrt(&mut self, a: &Var) -> Var {
        let v = self.get(*a).sqrt();
        self.push(v, Op::Sqrt(*a), &[*a])
    }
    fn tanh(&mut self, a: &Var) -> Var {
        let v = self.get(*a).tanh();
        self.push(v, Op::Tanh(*a), &[*a])
    }
    fn l2_norm(&mut self, a: &Var) -> Var {
        let v = self.get(*a).l2_norm();
        self.push(v, Op::L2Norm(*a), &[*a])
    }
    fn normalize(&mut self, a: &Var) -> Var {
        let v = self.get(*a).normalized();
        self.push(v, Op::Normalize(*a), &[*a])
    }
    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.get(*p)).collect();
        let v = Tensor::concat(&refs)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }
    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let v = self.get(*a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(*a), &[*a]))
    }
    fn select_row(&mut self, table: &Var, index: usize) -> Result<Var> {
        let v = self.get(*table).select_row(index)?;
        Ok(self.push(v, Op::SelectRow(*table, index), &[*table]))
    }
}
