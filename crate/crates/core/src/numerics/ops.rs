//! Matrix products, broadcasting elementwise arithmetic, and pointwise activations.

use super::tensor::{for_each_offset, strides};
use super::{Element, Tensor};
use crate::error::{dim_err, Result};

/// `√(2/π)` and the cubic coefficient of the tanh-form GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against the (broadcast) `target` shape, zero on broadcast axes.
fn aligned_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

fn offsets(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let st = aligned_strides(shape, target);
    let mut v = Vec::with_capacity(target.iter().product());
    for_each_offset(target, &st, |o| v.push(o));
    v
}

/// Sums `grad` (shaped like a broadcast result) back down to `target`.
pub fn reduce_to_shape<F: Element>(grad: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    if grad.shape() == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target.to_vec());
    let st = aligned_strides(target, grad.shape());
    let g = grad.data();
    let o = out.data_mut();
    let mut i = 0;
    for_each_offset(grad.shape(), &st, |off| {
        o[off] += g[i];
        i += 1;
    });
    out
}

pub fn binary<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_raw(a.shape().to_vec(), data));
    }
    let Some(shape) = broadcast_shape(a.shape(), b.shape()) else {
        return dim_err(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    };
    let oa = offsets(a.shape(), &shape);
    let ob = offsets(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Ok(Tensor::from_raw(shape, data))
}

pub fn add<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale<F: Element>(a: &Tensor<F>, c: F) -> Tensor<F> {
    a.map(|x| x * c)
}

/// Pointwise activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unary {
    Sigmoid,
    Silu,
    /// tanh approximation: `½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    Gelu,
    Tanh,
    Exp,
}

#[inline]
pub fn sigmoid_scalar<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl Unary {
    #[inline]
    pub fn apply<F: Element>(self, x: F) -> F {
        match self {
            Unary::Sigmoid => sigmoid_scalar(x),
            Unary::Silu => x * sigmoid_scalar(x),
            Unary::Gelu => {
                let c = F::of(GELU_SQRT_2_OVER_PI);
                let a = F::of(GELU_CUBIC);
                let half = F::of(0.5);
                half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
            }
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
        }
    }

    /// d/dx evaluated at the input `x`.
    #[inline]
    pub fn derivative<F: Element>(self, x: F) -> F {
        let one = F::one();
        match self {
            Unary::Sigmoid => {
                let s = sigmoid_scalar(x);
                s * (one - s)
            }
            Unary::Silu => {
                let s = sigmoid_scalar(x);
                s * (one + x * (one - s))
            }
            Unary::Gelu => {
                let c = F::of(GELU_SQRT_2_OVER_PI);
                let a = F::of(GELU_CUBIC);
                let half = F::of(0.5);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (one + t) + half * x * (one - t * t) * c * (one + F::of(3.0) * a * x * x)
            }
            Unary::Tanh => {
                let t = x.tanh();
                one - t * t
            }
            Unary::Exp => x.exp(),
        }
    }
}

pub fn unary<F: Element>(a: &Tensor<F>, op: Unary) -> Tensor<F> {
    a.map(|x| op.apply(x))
}

pub fn sigmoid<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    unary(a, Unary::Sigmoid)
}

pub fn silu<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    unary(a, Unary::Silu)
}

pub fn gelu<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    unary(a, Unary::Gelu)
}

pub fn tanh<F: Element>(a: &Tensor<F>) -> Tensor<F> {
    unary(a, Unary::Tanh)
}

/// Standard matrix product over the trailing two dimensions; leading (batch)
/// dimensions broadcast.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    matmul_t(a, false, b, false)
}

/// `op(a) · op(b)` where `op` optionally transposes the trailing two dimensions
/// (by stride, without copying).
pub fn matmul_t<F: Element>(
    a: &Tensor<F>,
    transpose_a: bool,
    b: &Tensor<F>,
    transpose_b: bool,
) -> Result<Tensor<F>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return dim_err("matmul", format!("operands {:?} and {:?} need rank >= 2", a.shape(), b.shape()));
    }
    let (a0, a1) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (b0, b1) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let (m, k) = if transpose_a { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if transpose_b { (b1, b0) } else { (b0, b1) };
    if k != k2 {
        return dim_err(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape(), b.shape()),
        );
    }
    let (ba, bb) = (&a.shape()[..ra - 2], &b.shape()[..rb - 2]);
    let Some(batch) = broadcast_shape(ba, bb) else {
        return dim_err("matmul", format!("batch dims {ba:?} vs {bb:?} do not broadcast"));
    };
    let ia = offsets(ba, &batch);
    let ib = offsets(bb, &batch);
    let (sa, sb) = (a0 * a1, b0 * b1);
    let (rsa, csa) = if transpose_a { (1, a1 as isize) } else { (a1 as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, b1 as isize) } else { (b1 as isize, 1) };
    let mut out = vec![F::zero(); ia.len() * m * n];
    for (bi, (&oa, &ob)) in ia.iter().zip(&ib).enumerate() {
        F::gemm(
            m,
            k,
            n,
            &a.data()[oa * sa..(oa + 1) * sa],
            rsa,
            csa,
            &b.data()[ob * sb..(ob + 1) * sb],
            rsb,
            csb,
            &mut out[bi * m * n..(bi + 1) * m * n],
            n as isize,
            1,
            false,
        );
    }
    let mut shape = batch;
    shape.extend([m, n]);
    Ok(Tensor::from_raw(shape, out))
}

/// Zeroes everything above the diagonal of the trailing matrices; with `strict`
/// the diagonal is zeroed as well.
pub fn tril<F: Element>(x: &Tensor<F>, strict: bool) -> Result<Tensor<F>> {
    let (batch, rows, cols) = x.as_matrices("tril")?;
    let mut out = x.clone();
    let d = out.data_mut();
    for b in 0..batch {
        for i in 0..rows {
            let first_zero = if strict { i } else { i + 1 };
            for j in first_zero.min(cols)..cols {
                d[b * rows * cols + i * cols + j] = F::zero();
            }
        }
    }
    Ok(out)
}

/// Running mean over the second-to-last (time) dimension: row `t` is the mean of
/// rows `0..=t`. `history` carries the sum and count of rows seen before this block.
pub fn prefix_mean<F: Element>(
    x: &Tensor<F>,
    history: Option<(&Tensor<F>, usize)>,
) -> Result<Tensor<F>> {
    let (batch, rows, cols) = x.as_matrices("prefix_mean")?;
    let prior_count = history.map_or(0, |(_, c)| c);
    if let Some((h, _)) = history {
        if h.numel() != batch * cols {
            return dim_err(
                "prefix_mean",
                format!("history {:?} does not match {:?}", h.shape(), x.shape()),
            );
        }
    }
    let mut out = vec![F::zero(); x.numel()];
    let xd = x.data();
    let mut acc = vec![F::zero(); cols];
    for b in 0..batch {
        match history {
            Some((h, _)) => acc.copy_from_slice(&h.data()[b * cols..(b + 1) * cols]),
            None => acc.iter_mut().for_each(|a| *a = F::zero()),
        }
        for t in 0..rows {
            let denom = F::of((prior_count + t + 1) as f64);
            let base = (b * rows + t) * cols;
            for c in 0..cols {
                acc[c] += xd[base + c];
                out[base + c] = acc[c] / denom;
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Mean over the last dimension, keeping it with size 1.
pub fn mean_last<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let r = x.rank();
    if r == 0 {
        return dim_err("mean_last", "scalar input");
    }
    let cols = x.shape()[r - 1];
    let inv = F::one() / F::of(cols as f64);
    let data = x
        .data()
        .chunks(cols.max(1))
        .map(|row| row.iter().copied().sum::<F>() * inv)
        .collect();
    let mut shape = x.shape().to_vec();
    shape[r - 1] = 1;
    Ok(Tensor::from_raw(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                c.set(&[i, j], s);
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::<f32>::rand_uniform([3, 4], -1.0, 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &m).unwrap(), m);
        let a = Tensor::<f32>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_f64([2, 1], &[1., 1.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::rand_uniform([4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform([5, 6], -1.0, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
        // f32 path against the f64 oracle
        let c32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap().cast::<f64>();
        assert!(c32.max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
    }

    #[test]
    fn matmul_transposed_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::rand_uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::rand_uniform([5, 2], -1.0, 1.0, &mut rng);
        let c = matmul(&a, &w).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4, 2]);
        let a12 = a.reshape([24, 5]).unwrap();
        assert!(c.reshape([24, 2]).unwrap().max_abs_diff(&triple_loop(&a12, &w)) < 1e-12);

        let at = a.transpose_last().unwrap();
        let c2 = matmul_t(&at, true, &w.transpose_last().unwrap(), true).unwrap();
        assert!(c2.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Dimension { .. })));
        let b = Tensor::<f32>::zeros([2, 3, 3]);
        let c = Tensor::<f32>::zeros([3, 3, 3]);
        assert!(matmul(&b, &c).is_err());
    }

    #[test]
    fn elementwise_identities() {
        assert_eq!(Unary::Sigmoid.apply(0.0f32), 0.5);
        assert_eq!(Unary::Gelu.apply(0.0f64), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::rand_uniform([64], -8.0, 8.0, &mut rng);
        let s = add(&sigmoid(&x), &sigmoid(&scale(&x, -1.0))).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn gelu_tanh_form_close_to_erf_form() {
        // erf via Abramowitz-Stegun 7.1.26 is only good to 1.5e-7; a series is exact enough here.
        fn erf(x: f64) -> f64 {
            let mut sum = 0.0;
            let mut term = x;
            let mut n = 0.0;
            while term.abs() > 1e-17 || n < 5.0 {
                sum += term / (2.0 * n + 1.0);
                n += 1.0;
                term *= -x * x / n;
                if n > 200.0 {
                    break;
                }
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        }
        for i in -60..=60 {
            let x = i as f64 / 10.0;
            let exact = 0.5 * x * (1.0 + erf(x / 2f64.sqrt()));
            assert!((Unary::Gelu.apply(x) - exact).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn broadcast_binary_and_reduce() {
        let a = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_f64([3], &[10., 20., 30.]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let col = Tensor::<f64>::from_f64([2, 1], &[2., 3.]).unwrap();
        assert_eq!(mul(&a, &col).unwrap().data(), &[2., 4., 6., 12., 15., 18.]);
        assert_eq!(reduce_to_shape(&a, &[3]).data(), &[5., 7., 9.]);
        assert_eq!(reduce_to_shape(&a, &[2, 1]).data(), &[6., 15.]);
        assert!(add(&a, &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn tril_prefix_mean_mean_last() {
        let x = Tensor::<f64>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(tril(&x, false).unwrap().data(), &[1., 0., 3., 4.]);
        assert_eq!(tril(&x, true).unwrap().data(), &[0., 0., 3., 0.]);
        let pm = prefix_mean(&x, None).unwrap();
        assert_eq!(pm.data(), &[1., 2., 2., 3.]);
        let hist = Tensor::<f64>::from_f64([2], &[1., 2.]).unwrap();
        let tail = Tensor::<f64>::from_f64([1, 2], &[3., 4.]).unwrap();
        assert_eq!(prefix_mean(&tail, Some((&hist, 1))).unwrap().data(), &[2., 3.]);
        assert_eq!(mean_last(&x).unwrap().data(), &[1.5, 3.5]);
    }
}
