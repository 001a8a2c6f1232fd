//! One op vocabulary, two executors: [`Eager`] computes tensors directly and
//! [`Tape`] additionally records the graph for [`Tape::backward`]. Model code is
//! written once against [`Backend`].

use std::sync::Arc;

use super::autodiff::{Op, Tape, Var};
use super::ops::{self, Unary};
use super::{norm, softmax, solve, Element, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// A linear map acting along the time (second-to-last) axis, e.g. virtual-token
/// expansion. The adjoint is what makes it differentiable.
pub trait RowMap<F: Element>: Send + Sync {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>>;
    fn adjoint(&self, dy: &Tensor<F>, input_shape: &[usize]) -> Result<Tensor<F>>;
}

pub trait Backend<F: Element> {
    type Value: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor<F>) -> Self::Value;
    /// A trainable parameter.
    fn param(&mut self, t: &Tensor<F>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<F>;

    fn shape(&self, v: &Self::Value) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.matmul_t(a, false, b, false)
    }
    fn matmul_t(&mut self, a: &Self::Value, ta: bool, b: &Self::Value, tb: bool) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: F) -> Result<Self::Value>;
    fn unary(&mut self, a: &Self::Value, op: Unary) -> Result<Self::Value>;
    fn rmsnorm(&mut self, x: &Self::Value, gain: &Self::Value, eps: F) -> Result<Self::Value>;
    fn silu_l2_normalize(&mut self, x: &Self::Value, eps: F) -> Result<Self::Value>;
    fn causal_attention(&mut self, q: &Self::Value, k: &Self::Value, v: &Self::Value, scale: F) -> Result<Self::Value>;
    /// Running mean over the time axis; `history` is a constant (sum, count) of earlier rows.
    fn prefix_mean(&mut self, x: &Self::Value, history: Option<(&Tensor<F>, usize)>) -> Result<Self::Value>;
    fn mean_last(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn slice_rows(&mut self, x: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn gather_rows(&mut self, x: &Self::Value, rows: &[usize]) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn permute(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value>;
    fn tril(&mut self, x: &Self::Value, strict: bool) -> Result<Self::Value>;
    fn forward_substitution(&mut self, t: &Self::Value, r: &Self::Value) -> Result<Self::Value>;
    fn row_map(&mut self, x: &Self::Value, map: Arc<dyn RowMap<F>>) -> Result<Self::Value>;
    /// Row lookup: `ids` index rows of `table` (`[V, D]`); output is `[shape..., D]`.
    fn embedding(&mut self, table: &Self::Value, ids: &[usize], shape: &[usize]) -> Result<Self::Value>;
    fn cross_entropy(&mut self, logits: &Self::Value, targets: &[usize], mask: &[bool]) -> Result<Self::Value>;
    fn sum_all(&mut self, x: &Self::Value) -> Result<Self::Value>;
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

fn embedding_forward<F: Element>(table: &Tensor<F>, ids: &[usize], shape: &[usize]) -> Result<Tensor<F>> {
    if table.rank() != 2 {
        return dim_err("embedding", format!("table {:?} is not a matrix", table.shape()));
    }
    if shape.iter().product::<usize>() != ids.len() {
        return dim_err("embedding", format!("{} ids do not fill {:?}", ids.len(), shape));
    }
    let (vocab, dim) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= vocab {
            return contract_err("embedding", format!("id {id} outside table of {vocab} rows"));
        }
        data.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    let mut s = shape.to_vec();
    s.push(dim);
    Ok(Tensor::from_raw(s, data))
}

impl<F: Element> Backend<F> for Eager {
    type Value = Tensor<F>;

    fn constant(&mut self, t: Tensor<F>) -> Tensor<F> {
        t
    }
    fn param(&mut self, t: &Tensor<F>) -> Tensor<F> {
        t.clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor<F>) -> &'a Tensor<F> {
        v
    }
    fn matmul_t(&mut self, a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool) -> Result<Tensor<F>> {
        ops::matmul_t(a, ta, b, tb)
    }
    fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        ops::add(a, b)
    }
    fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        ops::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        ops::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        Ok(ops::scale(a, c))
    }
    fn unary(&mut self, a: &Tensor<F>, op: Unary) -> Result<Tensor<F>> {
        Ok(ops::unary(a, op))
    }
    fn rmsnorm(&mut self, x: &Tensor<F>, gain: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        norm::rmsnorm(x, gain, eps)
    }
    fn silu_l2_normalize(&mut self, x: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        norm::silu_l2_normalize(x, eps)
    }
    fn causal_attention(&mut self, q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, scale: F) -> Result<Tensor<F>> {
        softmax::causal_attention(q, k, v, scale)
    }
    fn prefix_mean(&mut self, x: &Tensor<F>, history: Option<(&Tensor<F>, usize)>) -> Result<Tensor<F>> {
        ops::prefix_mean(x, history)
    }
    fn mean_last(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::mean_last(x)
    }
    fn slice_rows(&mut self, x: &Tensor<F>, start: usize, end: usize) -> Result<Tensor<F>> {
        x.slice_rows(start, end)
    }
    fn gather_rows(&mut self, x: &Tensor<F>, rows: &[usize]) -> Result<Tensor<F>> {
        x.gather_rows(rows)
    }
    fn concat_rows(&mut self, parts: &[Tensor<F>]) -> Result<Tensor<F>> {
        let refs: Vec<&Tensor<F>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
    fn reshape(&mut self, x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
        x.reshape(shape.to_vec())
    }
    fn permute(&mut self, x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
        x.permute(perm)
    }
    fn tril(&mut self, x: &Tensor<F>, strict: bool) -> Result<Tensor<F>> {
        ops::tril(x, strict)
    }
    fn forward_substitution(&mut self, t: &Tensor<F>, r: &Tensor<F>) -> Result<Tensor<F>> {
        solve::forward_substitution(t, r)
    }
    fn row_map(&mut self, x: &Tensor<F>, map: Arc<dyn RowMap<F>>) -> Result<Tensor<F>> {
        map.forward(x)
    }
    fn embedding(&mut self, table: &Tensor<F>, ids: &[usize], shape: &[usize]) -> Result<Tensor<F>> {
        embedding_forward(table, ids, shape)
    }
    fn cross_entropy(&mut self, logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<Tensor<F>> {
        Ok(Tensor::scalar(softmax::cross_entropy(logits, targets, mask)?))
    }
    fn sum_all(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(Tensor::scalar(x.sum()))
    }
}

impl<F: Element> Backend<F> for Tape<F> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }
    fn param(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.clone(), true)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<F> {
        Tape::value(self, *v)
    }
    fn matmul_t(&mut self, a: &Var, ta: bool, b: &Var, tb: bool) -> Result<Var> {
        let y = ops::matmul_t(self.value(*a), ta, self.value(*b), tb)?;
        Ok(self.push(y, Op::MatMul { a: *a, b: *b, ta, tb }))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(self.value(*a), self.value(*b))?;
        Ok(self.push(y, Op::Add(*a, *b)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::sub(self.value(*a), self.value(*b))?;
        Ok(self.push(y, Op::Sub(*a, *b)))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::mul(self.value(*a), self.value(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b)))
    }
    fn scale(&mut self, a: &Var, c: F) -> Result<Var> {
        let y = ops::scale(self.value(*a), c);
        Ok(self.push(y, Op::Scale(*a, c)))
    }
    fn unary(&mut self, a: &Var, op: Unary) -> Result<Var> {
        let y = ops::unary(self.value(*a), op);
        Ok(self.push(y, Op::Unary(*a, op)))
    }
    fn rmsnorm(&mut self, x: &Var, gain: &Var, eps: F) -> Result<Var> {
        let y = norm::rmsnorm(self.value(*x), self.value(*gain), eps)?;
        Ok(self.push(y, Op::RmsNorm { x: *x, gain: *gain, eps }))
    }
    fn silu_l2_normalize(&mut self, x: &Var, eps: F) -> Result<Var> {
        let y = norm::silu_l2_normalize(self.value(*x), eps)?;
        Ok(self.push(y, Op::SiluL2 { x: *x, eps }))
    }
    fn causal_attention(&mut self, q: &Var, k: &Var, v: &Var, scale: F) -> Result<Var> {
        let (y, probs) =
            softmax::causal_attention_with_probs(self.value(*q), self.value(*k), self.value(*v), scale)?;
        Ok(self.push(y, Op::Attention { q: *q, k: *k, v: *v, probs, scale }))
    }
    fn prefix_mean(&mut self, x: &Var, history: Option<(&Tensor<F>, usize)>) -> Result<Var> {
        let y = ops::prefix_mean(self.value(*x), history)?;
        let prior = history.map_or(0, |(_, c)| c);
        Ok(self.push(y, Op::PrefixMean { x: *x, prior }))
    }
    fn mean_last(&mut self, x: &Var) -> Result<Var> {
        let y = ops::mean_last(self.value(*x))?;
        Ok(self.push(y, Op::MeanLast(*x)))
    }
    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(*x).slice_rows(start, end)?;
        Ok(self.push(y, Op::SliceRows { x: *x, start }))
    }
    fn gather_rows(&mut self, x: &Var, rows: &[usize]) -> Result<Var> {
        let y = self.value(*x).gather_rows(rows)?;
        Ok(self.push(y, Op::GatherRows { x: *x, rows: rows.to_vec() }))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<F>> = parts.iter().map(|p| self.value(*p)).collect();
        let y = Tensor::concat_rows(&refs)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }
    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(*x).reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape(*x)))
    }
    fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(*x).permute(perm)?;
        Ok(self.push(y, Op::Permute { x: *x, perm: perm.to_vec() }))
    }
    fn tril(&mut self, x: &Var, strict: bool) -> Result<Var> {
        let y = ops::tril(self.value(*x), strict)?;
        Ok(self.push(y, Op::Tril { x: *x, strict }))
    }
    fn forward_substitution(&mut self, t: &Var, r: &Var) -> Result<Var> {
        let y = solve::forward_substitution(self.value(*t), self.value(*r))?;
        Ok(self.push(y, Op::ForwardSub { t: *t, r: *r }))
    }
    fn row_map(&mut self, x: &Var, map: Arc<dyn RowMap<F>>) -> Result<Var> {
        let y = map.forward(self.value(*x))?;
        Ok(self.push(y, Op::RowMap { x: *x, map }))
    }
    fn embedding(&mut self, table: &Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let y = embedding_forward(self.value(*table), ids, shape)?;
        Ok(self.push(y, Op::Embedding { table: *table, ids: ids.to_vec() }))
    }
    fn cross_entropy(&mut self, logits: &Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let l = softmax::cross_entropy(self.value(*logits), targets, mask)?;
        Ok(self.push(
            Tensor::scalar(l),
            Op::CrossEntropy { logits: *logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }
    fn sum_all(&mut self, x: &Var) -> Result<Var> {
        let s = self.value(*x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(*x)))
    }
}
