//! Tape gradients against central finite differences, op by op, at 64-bit.

use std::sync::Arc;

use magattn::numerics::{Backend, RowMap, Tape, Tensor, Unary, Var};
use magattn::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Graph = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Weighted-sum loss so every output element carries a distinct cotangent.
fn loss_of(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(&out, &w).unwrap();
    tape.sum_all(&p).unwrap()
}

fn eval(f: &Graph, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = loss_of(&mut tape, out, 99);
    tape.value(l).item().unwrap()
}

fn check(name: &str, f: &Graph, inputs: Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let l = loss_of(&mut tape, out, 99);
    let grads = tape.backward(l).unwrap();
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).unwrap();
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
            let an = g.data()[j];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
            assert!(err < 1e-5, "{name}: input {i} elem {j}: fd {fd} vs autodiff {an}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn sum_of_squares_gradient_is_2x() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([3], &[1., 2., 3.]).unwrap(), true);
    let c = tape.leaf(Tensor::from_f64([3], &[5., 5., 5.]).unwrap(), true);
    let unused = tape.leaf(Tensor::zeros([2]), true);
    let sq = tape.mul(&x, &x).unwrap();
    let l = tape.sum_all(&sq).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2., 4., 6.]);
    assert_eq!(g.get(c).unwrap().data(), &[0., 0., 0.]);
    assert_eq!(g.get(unused).unwrap().data(), &[0., 0.]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros([3]), true);
    assert!(matches!(tape.backward(x), Err(magattn::Error::Contract { .. })));
}

#[test]
fn matmul_variants_and_broadcast() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand(&[2, 4, 3], 1) } else { rand(&[2, 3, 4], 1) };
        let b = if tb { rand(&[5, 4], 2) } else { rand(&[4, 5], 2) };
        check("matmul_t", &move |t, v| t.matmul_t(&v[0], ta, &v[1], tb), vec![a, b]);
    }
}

#[test]
fn elementwise_and_broadcasting() {
    check("add", &|t, v| t.add(&v[0], &v[1]), vec![rand(&[2, 3], 3), rand(&[3], 4)]);
    check("sub", &|t, v| t.sub(&v[0], &v[1]), vec![rand(&[2, 3], 5), rand(&[2, 1], 6)]);
    check("mul", &|t, v| t.mul(&v[0], &v[1]), vec![rand(&[2, 2, 3], 7), rand(&[2, 1, 3], 8)]);
    check("scale", &|t, v| t.scale(&v[0], 1.7), vec![rand(&[4], 9)]);
    for u in [Unary::Sigmoid, Unary::Silu, Unary::Gelu, Unary::Tanh, Unary::Exp] {
        check("unary", &move |t, v| t.unary(&v[0], u), vec![rand(&[7], 10)]);
    }
}

#[test]
fn normalizations() {
    check("rmsnorm", &|t, v| t.rmsnorm(&v[0], &v[1], 1e-6), vec![rand(&[3, 5], 11), rand(&[5], 12)]);
    check("silu_l2", &|t, v| t.silu_l2_normalize(&v[0], 1e-6), vec![rand(&[3, 5], 13)]);
}

#[test]
fn attention_kernel() {
    check(
        "causal_attention",
        &|t, v| t.causal_attention(&v[0], &v[1], &v[2], 0.6),
        vec![rand(&[2, 5, 3], 14), rand(&[2, 5, 3], 15), rand(&[2, 5, 2], 16)],
    );
    check(
        "causal_attention suffix",
        &|t, v| t.causal_attention(&v[0], &v[1], &v[2], 0.6),
        vec![rand(&[2, 2, 3], 17), rand(&[2, 5, 3], 18), rand(&[2, 5, 2], 19)],
    );
}

#[test]
fn time_axis_ops() {
    let hist = rand(&[2, 3], 20);
    check("prefix_mean", &move |t, v| t.prefix_mean(&v[0], Some((&hist, 4))), vec![rand(&[2, 4, 3], 21)]);
    check("mean_last", &|t, v| t.mean_last(&v[0]), vec![rand(&[2, 4, 3], 22)]);
    check("slice_rows", &|t, v| t.slice_rows(&v[0], 1, 3), vec![rand(&[2, 4, 3], 23)]);
    check("gather_rows", &|t, v| t.gather_rows(&v[0], &[3, 1, 1]), vec![rand(&[2, 4, 3], 24)]);
    check("concat_rows", &|t, v| t.concat_rows(&[v[0], v[1]]), vec![rand(&[2, 1, 3], 25), rand(&[2, 2, 3], 26)]);
    check("reshape", &|t, v| t.reshape(&v[0], &[6, 4]), vec![rand(&[2, 4, 3], 27)]);
    check("permute", &|t, v| t.permute(&v[0], &[2, 0, 1]), vec![rand(&[2, 4, 3], 28)]);
    check("tril", &|t, v| t.tril(&v[0], false), vec![rand(&[2, 3, 3], 29)]);
    check("tril strict", &|t, v| t.tril(&v[0], true), vec![rand(&[2, 3, 3], 30)]);
}

#[test]
fn triangular_solve() {
    // T = I + strict_lower(A): the solve only depends on the strictly-lower part.
    check(
        "forward_substitution",
        &|t, v| {
            let eye = t.constant(Tensor::eye(4));
            let low = t.tril(&v[0], true)?;
            let tt = t.add(&eye, &low)?;
            t.forward_substitution(&tt, &v[1])
        },
        vec![rand(&[2, 4, 4], 31), rand(&[2, 4, 3], 32)],
    );
}

struct ShiftAdd;

impl RowMap<f64> for ShiftAdd {
    // y_t = x_t + 2 x_{t-1}
    fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut y = x.clone();
        let (b, r, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for bi in 0..b {
            for t in 1..r {
                for j in 0..c {
                    y.data_mut()[(bi * r + t) * c + j] += 2.0 * x.data()[(bi * r + t - 1) * c + j];
                }
            }
        }
        Ok(y)
    }
    fn adjoint(&self, dy: &Tensor<f64>, _: &[usize]) -> Result<Tensor<f64>> {
        let mut dx = dy.clone();
        let (b, r, c) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        for bi in 0..b {
            for t in 0..r - 1 {
                for j in 0..c {
                    dx.data_mut()[(bi * r + t) * c + j] += 2.0 * dy.data()[(bi * r + t + 1) * c + j];
                }
            }
        }
        Ok(dx)
    }
}

#[test]
fn row_map_embedding_cross_entropy() {
    check("row_map", &|t, v| t.row_map(&v[0], Arc::new(ShiftAdd)), vec![rand(&[2, 4, 3], 33)]);
    check("embedding", &|t, v| t.embedding(&v[0], &[2, 0, 2, 1], &[2, 2]), vec![rand(&[3, 4], 34)]);
    check(
        "cross_entropy",
        &|t, v| t.cross_entropy(&v[0], &[1, 3, 0], &[true, false, true]),
        vec![rand(&[3, 4], 35)],
    );
}
