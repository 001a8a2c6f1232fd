//! Batched unit-lower-triangular solves. The inverse is never formed.

use super::{Element, Tensor};
use crate::error::{contract_err, dim_err, Result};

fn check_system<F: Element>(t: &Tensor<F>, r: &Tensor<F>, op: &'static str) -> Result<(usize, usize, usize)> {
    let (_, n, n2) = t.as_matrices(op)?;
    let (rb, rn, d) = r.as_matrices(op)?;
    if n != n2 {
        return dim_err(op, format!("system matrix {:?} is not square", t.shape()));
    }
    let shared = t.rank() == 2;
    if rn != n || (!shared && t.shape()[..t.rank() - 2] != r.shape()[..r.rank() - 2]) {
        return dim_err(op, format!("system {:?} vs right-hand side {:?}", t.shape(), r.shape()));
    }
    Ok((rb, n, d))
}

/// Solves `T·Y = R` for unit-lower-triangular `T` (`[..., N, N]`) and `R`
/// (`[..., N, d]`) by forward substitution. `T` may be a single `[N, N]` matrix
/// shared across the batch.
///
/// Rejects a non-unit diagonal or a non-zero strictly-upper part.
pub fn forward_substitution<F: Element>(t: &Tensor<F>, r: &Tensor<F>) -> Result<Tensor<F>> {
    let (batch, n, d) = check_system(t, r, "forward_substitution")?;
    let tol = F::epsilon() * F::of(4.0);
    let td = t.data();
    let tbatch = td.len() / (n * n).max(1);
    for b in 0..tbatch {
        let m = &td[b * n * n..(b + 1) * n * n];
        for i in 0..n {
            if (m[i * n + i] - F::one()).abs() > tol {
                return contract_err(
                    "forward_substitution",
                    format!("diagonal entry ({i},{i}) = {} is not 1", m[i * n + i]),
                );
            }
            if m[i * n + i + 1..(i + 1) * n].iter().any(|&v| v != F::zero()) {
                return contract_err("forward_substitution", format!("row {i} has entries above the diagonal"));
            }
        }
    }
    let mut y = r.data().to_vec();
    for b in 0..batch {
        let m = if tbatch == 1 { &td[..n * n] } else { &td[b * n * n..(b + 1) * n * n] };
        let ys = &mut y[b * n * d..(b + 1) * n * d];
        for i in 1..n {
            let (done, rest) = ys.split_at_mut(i * d);
            let yi = &mut rest[..d];
            for (j, &tij) in m[i * n..i * n + i].iter().enumerate() {
                if tij != F::zero() {
                    for (a, &b) in yi.iter_mut().zip(&done[j * d..(j + 1) * d]) {
                        *a -= tij * b;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(r.shape().to_vec(), y))
}

/// Solves `Tᵀ·X = G` for the same unit-lower `T` (back substitution on the
/// unit-upper transpose). Used for the vector-Jacobian product of
/// [`forward_substitution`]; `T` is assumed already validated.
pub fn transposed_back_substitution<F: Element>(t: &Tensor<F>, g: &Tensor<F>) -> Result<Tensor<F>> {
    let (batch, n, d) = check_system(t, g, "transposed_back_substitution")?;
    let td = t.data();
    let tbatch = td.len() / (n * n).max(1);
    let mut x = g.data().to_vec();
    for b in 0..batch {
        let m = if tbatch == 1 { &td[..n * n] } else { &td[b * n * n..(b + 1) * n * n] };
        let xs = &mut x[b * n * d..(b + 1) * n * d];
        for i in (0..n.saturating_sub(1)).rev() {
            let (head, done) = xs.split_at_mut((i + 1) * d);
            let xi = &mut head[i * d..];
            for j in i + 1..n {
                let tji = m[j * n + i];
                if tji != F::zero() {
                    let xj = &done[(j - i - 1) * d..(j - i) * d];
                    for (a, &b) in xi.iter_mut().zip(xj) {
                        *a -= tji * b;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(g.shape().to_vec(), x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{matmul, matmul_t, sub};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit_lower(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::<f64>::rand_uniform([n, n], -1.0, 1.0, rng);
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    t.set(&[i, j], 1.0);
                } else if j > i {
                    t.set(&[i, j], 0.0);
                } else {
                    // keep the system well conditioned for large N
                    let v = t.at(&[i, j]) / n as f64;
                    t.set(&[i, j], v);
                }
            }
        }
        t
    }

    #[test]
    fn identity_and_two_by_two() {
        let r = Tensor::<f64>::from_f64([3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(forward_substitution(&Tensor::eye(3), &r).unwrap(), r);
        let t = Tensor::<f64>::from_f64([2, 2], &[1., 0., 0.5, 1.]).unwrap();
        let r = Tensor::<f64>::from_f64([2, 1], &[2., 1.5]).unwrap();
        assert_eq!(forward_substitution(&t, &r).unwrap().data(), &[2.0, 0.5]);
    }

    #[test]
    fn rejects_non_unit_diagonal_and_upper_entries() {
        let r = Tensor::<f64>::zeros([2, 1]);
        let t = Tensor::<f64>::from_f64([2, 2], &[2., 0., 0., 1.]).unwrap();
        assert!(matches!(forward_substitution(&t, &r), Err(crate::Error::Contract { .. })));
        let t = Tensor::<f64>::from_f64([2, 2], &[1., 0.3, 0., 1.]).unwrap();
        assert!(matches!(forward_substitution(&t, &r), Err(crate::Error::Contract { .. })));
        assert!(forward_substitution(&Tensor::<f64>::eye(3), &r).is_err());
    }

    #[test]
    fn residual_small_up_to_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [8, 32, 128] {
            let t = random_unit_lower(n, &mut rng);
            let r = Tensor::<f64>::rand_uniform([n, 5], -1.0, 1.0, &mut rng);
            let y = forward_substitution(&t, &r).unwrap();
            assert!(sub(&matmul(&t, &y).unwrap(), &r).unwrap().max_abs() < 1e-12, "n={n}");

            let (t32, r32) = (t.cast::<f32>(), r.cast::<f32>());
            let y32 = forward_substitution(&t32, &r32).unwrap();
            assert!(sub(&matmul(&t32, &y32).unwrap(), &r32).unwrap().max_abs() < 1e-6, "n={n}");
        }
    }

    #[test]
    fn batched_and_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ts: Vec<_> = (0..3).map(|_| random_unit_lower(6, &mut rng)).collect();
        let data: Vec<f64> = ts.iter().flat_map(|t| t.data().to_vec()).collect();
        let t = Tensor::new([3, 6, 6], data).unwrap();
        let g = Tensor::<f64>::rand_uniform([3, 6, 2], -1.0, 1.0, &mut rng);
        let y = forward_substitution(&t, &g).unwrap();
        assert!(sub(&matmul(&t, &y).unwrap(), &g).unwrap().max_abs() < 1e-12);
        let x = transposed_back_substitution(&t, &g).unwrap();
        assert!(sub(&matmul_t(&t, true, &x, false).unwrap(), &g).unwrap().max_abs() < 1e-12);
    }
}
