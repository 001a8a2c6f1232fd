//! Row normalizations over the trailing dimension, with their vector-Jacobian products.

use super::ops::{sigmoid_scalar, Unary};
use super::{Element, Tensor};
use crate::error::{contract_err, dim_err, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

fn rows<F: Element>(x: &Tensor<F>, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => dim_err(op, format!("needs a non-empty trailing dimension, got {:?}", x.shape())),
    }
}

/// `x / sqrt(mean(x²) + eps) * gain` per trailing-dimension vector.
pub fn rmsnorm<F: Element>(x: &Tensor<F>, gain: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let cols = rows(x, "rmsnorm")?;
    if gain.numel() != cols {
        return dim_err("rmsnorm", format!("gain {:?} vs trailing dim {cols}", gain.shape()));
    }
    if eps <= F::zero() {
        return contract_err("rmsnorm", "eps must be positive");
    }
    let g = gain.data();
    let inv_n = F::one() / F::of(cols as f64);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
        let inv_r = F::one() / (ms + eps).sqrt();
        out.extend(row.iter().zip(g).map(|(&v, &gi)| v * inv_r * gi));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Gradients of [`rmsnorm`] with respect to `x` and `gain`.
pub fn rmsnorm_backward<F: Element>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    eps: F,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let cols = gain.numel();
    let g = gain.data();
    let inv_n = F::one() / F::of(cols as f64);
    let mut dx = Vec::with_capacity(x.numel());
    let mut dg = vec![F::zero(); cols];
    for (row, drow) in x.data().chunks(cols).zip(dy.data().chunks(cols)) {
        let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
        let inv_r = F::one() / (ms + eps).sqrt();
        // Σ (g·dy·x)
        let dot: F = row.iter().zip(drow).zip(g).map(|((&v, &d), &gi)| v * d * gi).sum();
        let coef = dot * inv_n * inv_r * inv_r * inv_r;
        for i in 0..cols {
            dx.push(g[i] * drow[i] * inv_r - row[i] * coef);
            dg[i] += drow[i] * row[i] * inv_r;
        }
    }
    (
        Tensor::from_raw(x.shape().to_vec(), dx),
        Tensor::from_raw(gain.shape().to_vec(), dg),
    )
}

/// `SiLU(x) / (‖SiLU(x)‖₂ + eps)` per trailing-dimension vector.
pub fn silu_l2_normalize<F: Element>(x: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let cols = rows(x, "silu_l2_normalize")?;
    if eps <= F::zero() {
        return contract_err("silu_l2_normalize", "eps must be positive");
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut u = vec![F::zero(); cols];
    for row in x.data().chunks(cols) {
        for (ui, &v) in u.iter_mut().zip(row) {
            *ui = v * sigmoid_scalar(v);
        }
        let norm = u.iter().map(|&v| v * v).sum::<F>().sqrt();
        let inv = F::one() / (norm + eps);
        out.extend(u.iter().map(|&v| v * inv));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

pub fn silu_l2_normalize_backward<F: Element>(x: &Tensor<F>, eps: F, dy: &Tensor<F>) -> Tensor<F> {
    let cols = *x.shape().last().expect("validated in forward");
    let mut dx = Vec::with_capacity(x.numel());
    let mut u = vec![F::zero(); cols];
    for (row, drow) in x.data().chunks(cols).zip(dy.data().chunks(cols)) {
        for (ui, &v) in u.iter_mut().zip(row) {
            *ui = Unary::Silu.apply(v);
        }
        let norm = u.iter().map(|&v| v * v).sum::<F>().sqrt();
        let den = norm + eps;
        let dot: F = u.iter().zip(drow).map(|(&a, &b)| a * b).sum();
        // d(u/(‖u‖+ε)) = du/den − u (u·du)/(den² ‖u‖)
        let coef = if norm > F::zero() { dot / (den * den * norm) } else { F::zero() };
        for i in 0..cols {
            let du = drow[i] / den - u[i] * coef;
            dx.push(du * Unary::Silu.derivative(row[i]));
        }
    }
    Tensor::from_raw(x.shape().to_vec(), dx)
}
