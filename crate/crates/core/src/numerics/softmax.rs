//! Causal scaled-dot-product attention and token-level cross-entropy.

use super::{Element, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Rows of queries processed together when the score matrix is not materialized.
const ROW_BLOCK: usize = 64;

struct AttnDims {
    batch: usize,
    tq: usize,
    tk: usize,
    d: usize,
    dv: usize,
}

fn attn_dims<F: Element>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> Result<AttnDims> {
    let (bq, tq, d) = q.as_matrices("causal_attention")?;
    let (bk, tk, dk) = k.as_matrices("causal_attention")?;
    let (bv, tv, dv) = v.as_matrices("causal_attention")?;
    let r = q.rank();
    if k.rank() != r
        || v.rank() != r
        || q.shape()[..r - 2] != k.shape()[..r - 2]
        || k.shape()[..r - 2] != v.shape()[..r - 2]
        || bq != bk
        || bk != bv
        || d != dk
        || tk != tv
    {
        return dim_err(
            "causal_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    if tq > tk {
        return contract_err("causal_attention", format!("{tq} queries but only {tk} keys"));
    }
    Ok(AttnDims { batch: bq, tq, tk, d, dv })
}

/// In-place masked softmax of one score row whose first `len` entries are live.
fn softmax_row<F: Element>(row: &mut [F], len: usize) {
    let m = row[..len].iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut s = F::zero();
    for x in &mut row[..len] {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = F::one() / s;
    for x in &mut row[..len] {
        *x *= inv;
    }
    for x in &mut row[len..] {
        *x = F::zero();
    }
}

/// `softmax(scale · q kᵀ + causal mask) v`, where query row `i` sits at absolute
/// position `tk − tq + i` and sees keys `0..=tk − tq + i`.
///
/// Works in blocks of query rows so memory stays `O(block · tk)`.
pub fn causal_attention<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    scale: F,
) -> Result<Tensor<F>> {
    let AttnDims { batch, tq, tk, d, dv } = attn_dims(q, k, v)?;
    let offset = tk - tq;
    let mut out = vec![F::zero(); batch * tq * dv];
    let mut scores = vec![F::zero(); ROW_BLOCK * tk];
    for b in 0..batch {
        let qb = &q.data()[b * tq * d..(b + 1) * tq * d];
        let kb = &k.data()[b * tk * d..(b + 1) * tk * d];
        let vb = &v.data()[b * tk * dv..(b + 1) * tk * dv];
        let ob = &mut out[b * tq * dv..(b + 1) * tq * dv];
        let mut r0 = 0;
        while r0 < tq {
            let r1 = (r0 + ROW_BLOCK).min(tq);
            let rows = r1 - r0;
            let live = offset + r1; // keys any row in this block can see
            let s = &mut scores[..rows * live];
            F::gemm(
                rows, d, live,
                &qb[r0 * d..], d as isize, 1,
                kb, 1, d as isize,
                s, live as isize, 1,
                false,
            );
            for (i, row) in s.chunks_mut(live).enumerate() {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_row(row, offset + r0 + i + 1);
            }
            F::gemm(
                rows, live, dv,
                s, live as isize, 1,
                vb, dv as isize, 1,
                &mut ob[r0 * dv..r1 * dv], dv as isize, 1,
                false,
            );
            r0 = r1;
        }
    }
    let mut shape = q.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = dv;
    Ok(Tensor::from_raw(shape, out))
}

/// Same as [`causal_attention`] but also returns the `[..., tq, tk]` weights
/// needed for the backward pass.
pub fn causal_attention_with_probs<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    scale: F,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let AttnDims { batch, tq, tk, d, dv } = attn_dims(q, k, v)?;
    let offset = tk - tq;
    let mut probs = vec![F::zero(); batch * tq * tk];
    let mut out = vec![F::zero(); batch * tq * dv];
    for b in 0..batch {
        let p = &mut probs[b * tq * tk..(b + 1) * tq * tk];
        F::gemm(
            tq, d, tk,
            &q.data()[b * tq * d..], d as isize, 1,
            &k.data()[b * tk * d..], 1, d as isize,
            p, tk as isize, 1,
            false,
        );
        for (i, row) in p.chunks_mut(tk).enumerate() {
            row.iter_mut().for_each(|x| *x *= scale);
            softmax_row(row, offset + i + 1);
        }
        F::gemm(
            tq, tk, dv,
            p, tk as isize, 1,
            &v.data()[b * tk * dv..], dv as isize, 1,
            &mut out[b * tq * dv..(b + 1) * tq * dv], dv as isize, 1,
            false,
        );
    }
    let lead = &q.shape()[..q.rank() - 2];
    let mut oshape = lead.to_vec();
    oshape.extend([tq, dv]);
    let mut pshape = lead.to_vec();
    pshape.extend([tq, tk]);
    Ok((Tensor::from_raw(oshape, out), Tensor::from_raw(pshape, probs)))
}

/// Vector-Jacobian product of causal attention given the saved weights.
/// Returns `(dq, dk, dv)`.
pub fn causal_attention_backward<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &Tensor<F>,
    scale: F,
    d_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, tq, d) = q.as_matrices("causal_attention").expect("validated in forward");
    let tk = k.shape()[k.rank() - 2];
    let dv = v.shape()[v.rank() - 1];
    let mut dq = vec![F::zero(); q.numel()];
    let mut dk = vec![F::zero(); k.numel()];
    let mut dvv = vec![F::zero(); v.numel()];
    let mut dp = vec![F::zero(); tq * tk];
    for b in 0..batch {
        let p = &probs.data()[b * tq * tk..(b + 1) * tq * tk];
        let go = &d_out.data()[b * tq * dv..(b + 1) * tq * dv];
        // dV = Pᵀ dO
        F::gemm(
            tk, tq, dv,
            p, 1, tk as isize,
            go, dv as isize, 1,
            &mut dvv[b * tk * dv..(b + 1) * tk * dv], dv as isize, 1,
            false,
        );
        // dP = dO Vᵀ
        F::gemm(
            tq, dv, tk,
            go, dv as isize, 1,
            &v.data()[b * tk * dv..], 1, dv as isize,
            &mut dp, tk as isize, 1,
            false,
        );
        // dS = scale · P ⊙ (dP − rowsum(dP ⊙ P))
        for (prow, drow) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
            let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in drow.iter_mut().zip(prow) {
                *x = scale * pv * (*x - dot);
            }
        }
        F::gemm(
            tq, tk, d,
            &dp, tk as isize, 1,
            &k.data()[b * tk * d..], d as isize, 1,
            &mut dq[b * tq * d..(b + 1) * tq * d], d as isize, 1,
            false,
        );
        F::gemm(
            tk, tq, d,
            &dp, 1, tk as isize,
            &q.data()[b * tq * d..], d as isize, 1,
            &mut dk[b * tk * d..(b + 1) * tk * d], d as isize, 1,
            false,
        );
    }
    (
        Tensor::from_raw(q.shape().to_vec(), dq),
        Tensor::from_raw(k.shape().to_vec(), dk),
        Tensor::from_raw(v.shape().to_vec(), dvv),
    )
}

/// Mean negative log-likelihood over positions with `mask[i] = true`.
/// `logits` is `[..., V]`, flattened to one row per target.
pub fn cross_entropy<F: Element>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<F> {
    let (rows, vocab) = ce_dims(logits, targets, mask)?;
    let mut total = F::zero();
    let mut count = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let row = &logits.data()[r * vocab..(r + 1) * vocab];
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&x| (x - m).exp()).sum::<F>().ln() + m;
        total += lse - row[targets[r]];
        count += 1;
    }
    if count == 0 {
        return contract_err("cross_entropy", "mask selects no positions");
    }
    Ok(total / F::of(count as f64))
}

pub fn cross_entropy_backward<F: Element>(
    logits: &Tensor<F>,
    targets: &[usize],
    mask: &[bool],
    d_loss: F,
) -> Tensor<F> {
    let vocab = *logits.shape().last().expect("validated in forward");
    let count = mask.iter().filter(|&&m| m).count();
    let w = d_loss / F::of(count as f64);
    let mut g = vec![F::zero(); logits.numel()];
    for (r, (row, grow)) in logits.data().chunks(vocab).zip(g.chunks_mut(vocab)).enumerate() {
        if !mask[r] {
            continue;
        }
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let s: F = row.iter().map(|&x| (x - m).exp()).sum();
        for (gi, &x) in grow.iter_mut().zip(row) {
            *gi = (x - m).exp() / s * w;
        }
        grow[targets[r]] -= w;
    }
    Tensor::from_raw(logits.shape().to_vec(), g)
}

fn ce_dims<F: Element>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    let Some(&vocab) = logits.shape().last() else {
        return dim_err("cross_entropy", "scalar logits");
    };
    let rows = logits.numel() / vocab.max(1);
    if targets.len() != rows || mask.len() != rows {
        return dim_err(
            "cross_entropy",
            format!("{rows} logit rows, {} targets, {} mask entries", targets.len(), mask.len()),
        );
    }
    if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab).map(|(t, _)| t) {
        return contract_err("cross_entropy", format!("target {t} outside vocabulary {vocab}"));
    }
    Ok((rows, vocab))
}
