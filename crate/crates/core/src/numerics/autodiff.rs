//! Append-only tape for reverse-mode differentiation over the crate's op set.

use std::sync::Arc;

use super::norm::{rmsnorm_backward, silu_l2_normalize_backward};
use super::ops::{self, reduce_to_shape, Unary};
use super::softmax::{causal_attention_backward, cross_entropy_backward};
use super::solve::transposed_back_substitution;
use super::{Element, RowMap, Tensor};
use crate::error::{contract_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<F: Element> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Unary(Var, Unary),
    RmsNorm { x: Var, gain: Var, eps: F },
    SiluL2 { x: Var, eps: F },
    Attention { q: Var, k: Var, v: Var, probs: Tensor<F>, scale: F },
    PrefixMean { x: Var, prior: usize },
    MeanLast(Var),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Tril { x: Var, strict: bool },
    ForwardSub { t: Var, r: Var },
    RowMap { x: Var, map: Arc<dyn RowMap<F>> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    SumAll(Var),
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    trainable: bool,
}

/// Records every operation of a forward pass; [`Tape::backward`] replays it in
/// reverse. One tape per forward pass, single writer.
#[derive(Default)]
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], one per trainable leaf.
pub struct Gradients<F: Element> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Trainable leaves always receive a gradient.
    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable, trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, trainable: false });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return contract_err("backward", format!("loss has shape {:?}, expected a scalar", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.vjp(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if self.needs(a) {
                    let da = if ta {
                        ops::matmul_t(val(b), tb, g, true)?
                    } else {
                        ops::matmul_t(g, false, val(b), !tb)?
                    };
                    out.push((a, reduce_to_shape(&da, val(a).shape())));
                }
                if self.needs(b) {
                    let db = if tb {
                        ops::matmul_t(g, true, val(a), ta)?
                    } else {
                        ops::matmul_t(val(a), !ta, g, false)?
                    };
                    out.push((b, reduce_to_shape(&db, val(b).shape())));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, reduce_to_shape(g, val(a).shape())));
                out.push((b, reduce_to_shape(g, val(b).shape())));
            }
            &Op::Sub(a, b) => {
                out.push((a, reduce_to_shape(g, val(a).shape())));
                out.push((b, ops::scale(&reduce_to_shape(g, val(b).shape()), -F::one())));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    out.push((a, reduce_to_shape(&ops::mul(g, val(b))?, val(a).shape())));
                }
                if self.needs(b) {
                    out.push((b, reduce_to_shape(&ops::mul(g, val(a))?, val(b).shape())));
                }
            }
            &Op::Scale(a, c) => out.push((a, ops::scale(g, c))),
            &Op::Unary(a, u) => {
                let x = val(a);
                let data = x.data().iter().zip(g.data()).map(|(&xi, &gi)| gi * u.derivative(xi)).collect();
                out.push((a, Tensor::from_raw(x.shape().to_vec(), data)));
            }
            &Op::RmsNorm { x, gain, eps } => {
                let (dx, dg) = rmsnorm_backward(val(x), val(gain), eps, g);
                out.push((x, dx));
                out.push((gain, dg));
            }
            &Op::SiluL2 { x, eps } => out.push((x, silu_l2_normalize_backward(val(x), eps, g))),
            Op::Attention { q, k, v, probs, scale } => {
                let (dq, dk, dv) = causal_attention_backward(val(*q), val(*k), val(*v), probs, *scale, g);
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            &Op::PrefixMean { x, prior } => {
                let (batch, rows, cols) = g.as_matrices("prefix_mean")?;
                let mut dx = vec![F::zero(); g.numel()];
                let mut acc = vec![F::zero(); cols];
                for b in 0..batch {
                    acc.iter_mut().for_each(|a| *a = F::zero());
                    for t in (0..rows).rev() {
                        let inv = F::one() / F::of((prior + t + 1) as f64);
                        let base = (b * rows + t) * cols;
                        for c in 0..cols {
                            acc[c] += g.data()[base + c] * inv;
                            dx[base + c] = acc[c];
                        }
                    }
                }
                out.push((x, Tensor::from_raw(g.shape().to_vec(), dx)));
            }
            &Op::MeanLast(a) => {
                let x = val(a);
                let cols = *x.shape().last().unwrap_or(&1);
                let inv = F::one() / F::of(cols as f64);
                let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, cols)).collect();
                out.push((a, Tensor::from_raw(x.shape().to_vec(), data)));
            }
            &Op::SliceRows { x, start } => {
                let xs = val(x);
                let (batch, rows, cols) = xs.as_matrices("slice_rows")?;
                let n = g.shape()[g.rank() - 2];
                let mut dx = vec![F::zero(); xs.numel()];
                for b in 0..batch {
                    let dst = b * rows * cols + start * cols;
                    dx[dst..dst + n * cols].copy_from_slice(&g.data()[b * n * cols..(b + 1) * n * cols]);
                }
                out.push((x, Tensor::from_raw(xs.shape().to_vec(), dx)));
            }
            Op::GatherRows { x, rows: idx } => {
                let xs = val(*x);
                let (batch, rows, cols) = xs.as_matrices("gather_rows")?;
                let mut dx = vec![F::zero(); xs.numel()];
                for b in 0..batch {
                    for (k, &i) in idx.iter().enumerate() {
                        let src = &g.data()[(b * idx.len() + k) * cols..(b * idx.len() + k + 1) * cols];
                        let dst = &mut dx[(b * rows + i) * cols..(b * rows + i + 1) * cols];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                out.push((*x, Tensor::from_raw(xs.shape().to_vec(), dx)));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).shape()[val(p).rank() - 2];
                    out.push((p, g.slice_rows(start, start + n)?));
                    start += n;
                }
            }
            &Op::Reshape(a) => out.push((a, g.reshape(val(a).shape().to_vec())?)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, g.permute(&inv)?));
            }
            &Op::Tril { x, strict } => out.push((x, ops::tril(g, strict)?)),
            &Op::ForwardSub { t, r } => {
                let dr = transposed_back_substitution(val(t), g)?;
                if self.needs(t) {
                    // only the strictly-lower entries of T are read by the solver
                    let dt = ops::tril(&ops::matmul_t(&dr, false, &node.value, true)?, true)?;
                    let dt = ops::scale(&reduce_to_shape(&dt, val(t).shape()), -F::one());
                    out.push((t, dt));
                }
                out.push((r, dr));
            }
            Op::RowMap { x, map } => out.push((*x, map.adjoint(g, val(*x).shape())?)),
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let dim = tv.shape()[1];
                let mut dt = vec![F::zero(); tv.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for (d, &s) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g.data()[k * dim..(k + 1) * dim]) {
                        *d += s;
                    }
                }
                out.push((*table, Tensor::from_raw(tv.shape().to_vec(), dt)));
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let d = cross_entropy_backward(val(*logits), targets, mask, g.data()[0]);
                out.push((*logits, d));
            }
            &Op::SumAll(a) => out.push((a, Tensor::full(val(a).shape().to_vec(), g.data()[0]))),
        }
        Ok(out)
    }
}

fn inputs<F: Element>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Unary(a, _)
        | Op::SiluL2 { x: a, .. }
        | Op::PrefixMean { x: a, .. }
        | Op::MeanLast(a)
        | Op::SliceRows { x: a, .. }
        | Op::GatherRows { x: a, .. }
        | Op::Reshape(a)
        | Op::Permute { x: a, .. }
        | Op::Tril { x: a, .. }
        | Op::RowMap { x: a, .. }
        | Op::Embedding { table: a, .. }
        | Op::CrossEntropy { logits: a, .. }
        | Op::SumAll(a) => vec![*a],
        Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::ForwardSub { t, r } => vec![*t, *r],
        Op::ConcatRows(parts) => parts.clone(),
    }
}
