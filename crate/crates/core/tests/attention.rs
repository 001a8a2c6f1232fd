use magattn::attention::{
    beta_gates, decode_step, linear_branch, liza_forward, liza_heads, mag_mix, project_qkv, softmax_attention,
    AttentionConfig, AttentionParams, BetaSource, LizaCache, MagConfig, Mixing,
};
use magattn::expansion::{ExpansionMode, ExpansionSpec};
use magattn::memory::{ChunkSpec, StateNonlinearity};
use magattn::numerics::{rmsnorm, silu_l2_normalize, Backend, Eager, Tape, Var};
use magattn::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn config(d_model: usize, heads: usize, n_h: usize, c: usize, mode: ExpansionMode, alpha: f64) -> AttentionConfig {
    let mut cfg = AttentionConfig::new(d_model, heads)
        .unwrap()
        .with_virtual_tokens(ExpansionSpec::new(mode, n_h).unwrap())
        .unwrap();
    cfg.chunk.chunk_size = c;
    cfg.mag.alpha = alpha;
    cfg
}

fn params<F: Element>(cfg: &AttentionConfig, seed: u64) -> AttentionParams<Tensor<F>> {
    let mut p = AttentionParams::<Tensor<F>>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // a non-trivial gain so its gradient and placement are exercised
    p.norm_gain = rand(&[cfg.d_head], seed + 1).map(|g| 1.0 + 0.5 * g).cast();
    p
}

fn forward(p: &AttentionParams<Tensor<f64>>, x: &Tensor<f64>, cfg: &AttentionConfig) -> Tensor<f64> {
    liza_forward(&mut Eager, p, x, cfg, None).unwrap()
}

/// Plain triple loop causal attention on `[T, d]`.
fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (t, d, dv) = (q.shape()[0], q.shape()[1], v.shape()[1]);
    let mut out = vec![0.0; t * dv];
    for i in 0..t {
        let s: Vec<f64> = (0..=i)
            .map(|j| (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        for j in 0..=i {
            for c in 0..dv {
                out[i * dv + c] += (s[j] - m).exp() / z * v.at(&[j, c]);
            }
        }
    }
    Tensor::new([t, dv], out).unwrap()
}

#[test]
fn projections() {
    let cfg = AttentionConfig::new(4, 1).unwrap();
    let x = rand(&[1, 3, 4], 1);
    let eye = Tensor::<f64>::eye(4);
    let (q, k, v) = project_qkv(&mut Eager, &x, (&eye, &eye, &eye), &cfg).unwrap();
    for t in [&q, &k, &v] {
        assert_eq!(t.shape(), &[1, 1, 3, 4]);
        assert_eq!(t.data(), x.data());
    }
    let cfg = AttentionConfig::new(6, 2).unwrap();
    let w = rand(&[6, 6], 2);
    let (q, ..) = project_qkv(&mut Eager, &Tensor::zeros([2, 3, 6]), (&w, &w, &w), &cfg).unwrap();
    assert_eq!(q.max_abs(), 0.0);
    let x = rand(&[2, 3, 6], 3);
    let (q, ..) = project_qkv(&mut Eager, &x, (&w, &w, &w), &cfg).unwrap();
    for b in 0..2 {
        for h in 0..2 {
            for t in 0..3 {
                for j in 0..3 {
                    let want: f64 = (0..6).map(|i| x.at(&[b, t, i]) * w.at(&[i, h * 3 + j])).sum();
                    assert!((q.at(&[b, h, t, j]) - want).abs() < 1e-6);
                }
            }
        }
    }
    assert!(project_qkv(&mut Eager, &rand(&[1, 3, 5], 4), (&w, &w, &w), &cfg).is_err());
}

#[test]
fn softmax_branch() {
    let v = rand(&[1, 4], 5);
    let q = rand(&[1, 4], 6);
    assert_eq!(softmax_attention(&mut Eager, &q, &q, &v).unwrap(), v);
    // identical keys give uniform weights: output is the running mean of values
    let k = Tensor::<f64>::full([5, 3], 0.3);
    let v = rand(&[5, 2], 7);
    let o = softmax_attention(&mut Eager, &rand(&[5, 3], 8), &k, &v).unwrap();
    for t in 0..5 {
        for c in 0..2 {
            let mean = (0..=t).map(|j| v.at(&[j, c])).sum::<f64>() / (t + 1) as f64;
            assert!((o.at(&[t, c]) - mean).abs() < 1e-12);
        }
    }
    let (q, k, v) = (rand(&[8, 4], 9), rand(&[8, 4], 10), rand(&[8, 3], 11));
    let o = softmax_attention(&mut Eager, &q, &k, &v).unwrap();
    assert!(o.max_abs_diff(&attention_oracle(&q, &k, &v)) < 1e-6);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn gates() {
    let z = Tensor::<f64>::zeros([4, 3]);
    let g = beta_gates(&mut Eager, &z, &z, BetaSource::K, None).unwrap();
    assert_eq!(g.shape(), &[4, 1]);
    assert!(g.data().iter().all(|&b| b == 0.5));
    let c = Tensor::from_f64([3, 2], &[0.4, -1.0, 0.4, -1.0, 0.4, -1.0]).unwrap();
    let g = beta_gates(&mut Eager, &c, &z, BetaSource::K, None).unwrap();
    let want = (sigmoid(0.4) + sigmoid(-1.0)) / 2.0;
    assert!(g.data().iter().all(|&b| (b - want).abs() < 1e-15));

    let (k, v) = (rand(&[5, 3], 12), rand(&[5, 3], 13));
    for source in [BetaSource::K, BetaSource::V, BetaSource::KV] {
        let g = beta_gates(&mut Eager, &k, &v, source, None).unwrap();
        for t in 0..5 {
            let pooled = |x: &Tensor<f64>, j: usize| sigmoid((0..=t).map(|i| x.at(&[i, j])).sum::<f64>() / (t + 1) as f64);
            let want = (0..3)
                .map(|j| match source {
                    BetaSource::K => pooled(&k, j),
                    BetaSource::V => pooled(&v, j),
                    BetaSource::KV => pooled(&k, j) * pooled(&v, j),
                })
                .sum::<f64>()
                / 3.0;
            assert!((g.data()[t] - want).abs() < 1e-6, "{source}");
        }
    }
}

#[test]
fn linear_branch_cases() {
    let cfg = config(4, 1, 1, 4, ExpansionMode::Derivative, 1.0);
    let gain = Tensor::<f64>::full([4], 1.0);
    // one token with q = k: the read is a positive multiple of the normalized value
    let k = rand(&[1, 1, 1, 4], 14);
    let v = rand(&[1, 1, 1, 4], 15);
    let o = linear_branch(&mut Eager, &k, &k, &v, &gain, &cfg, None).unwrap();
    let want = rmsnorm(&silu_l2_normalize(&v, 1e-6).unwrap(), &gain, 1e-6).unwrap();
    assert!(o.max_abs_diff(&want) < 1e-5);
    // nothing written: zero output everywhere
    let z = Tensor::<f64>::zeros([1, 1, 6, 4]);
    let o = linear_branch(&mut Eager, &rand(&[1, 1, 6, 4], 16), &rand(&[1, 1, 6, 4], 17), &z, &gain, &cfg, None).unwrap();
    assert_eq!(o.max_abs(), 0.0);
    // chunked vs one token per chunk
    let (q, k, v) = (rand(&[2, 2, 13, 4], 18), rand(&[2, 2, 13, 4], 19), rand(&[2, 2, 13, 4], 20));
    for n_h in [1, 2, 3] {
        let a = config(8, 2, n_h, 5, ExpansionMode::Both, 1.0);
        let b = config(8, 2, n_h, 1, ExpansionMode::Both, 1.0);
        let q32 = |t: &Tensor<f64>| t.cast::<f32>();
        let g = Tensor::<f32>::full([4], 1.0);
        let oa = linear_branch(&mut Eager, &q32(&q), &q32(&k), &q32(&v), &g, &a, None).unwrap();
        let ob = linear_branch(&mut Eager, &q32(&q), &q32(&k), &q32(&v), &g, &b, None).unwrap();
        assert!(oa.max_abs_diff(&ob) < 1e-5, "n_h={n_h}");
    }
}

#[test]
fn endpoints_match_single_branches() {
    for mixing in [Mixing::Gated, Mixing::CrossGate] {
        let mut cfg = config(8, 2, 2, 3, ExpansionMode::Both, 0.0);
        cfg.mag.mixing = mixing;
        let p = params::<f64>(&cfg, 21);
        let x = rand(&[2, 7, 8], 22);
        let (q, k, v) = project_qkv(&mut Eager, &x, (&p.w_q, &p.w_k, &p.w_v), &cfg).unwrap();
        let soft = softmax_attention(&mut Eager, &q, &k, &v).unwrap();
        let lin = linear_branch(&mut Eager, &q, &k, &v, &p.norm_gain, &cfg, None).unwrap();
        let out = |h: &Tensor<f64>| {
            let m = h.permute(&[0, 2, 1, 3]).unwrap().reshape([2, 7, 8]).unwrap();
            magattn::numerics::matmul(&m, &p.w_o).unwrap()
        };
        assert!(forward(&p, &x, &cfg).max_abs_diff(&out(&soft)) < 1e-6);
        cfg.mag.alpha = 1.0;
        assert!(forward(&p, &x, &cfg).max_abs_diff(&out(&lin)) < 1e-6);
        // and the cached path (which always runs both branches) agrees
        let mut cache = LizaCache::new(&cfg, 2).unwrap();
        let cached = liza_forward(&mut Eager, &p, &x, &cfg, Some(&mut cache)).unwrap();
        assert!(cached.max_abs_diff(&out(&lin)) < 1e-6);
    }
}

fn variants() -> Vec<AttentionConfig> {
    let mut out = Vec::new();
    for (n_h, mode) in [
        (1, ExpansionMode::Derivative),
        (2, ExpansionMode::Derivative),
        (2, ExpansionMode::Rotary),
        (2, ExpansionMode::Both),
        (3, ExpansionMode::Both),
        (3, ExpansionMode::Alternate),
    ] {
        for c in [1, 4, 16] {
            let mut cfg = config(8, 2, n_h, c, mode, 0.5);
            cfg.mag.mixing = if c == 4 { Mixing::CrossGate } else { Mixing::Gated };
            cfg.beta_source = [BetaSource::K, BetaSource::V, BetaSource::KV][c % 3];
            cfg.chunk.nonlinearity = if c == 16 { StateNonlinearity::Gelu } else { StateNonlinearity::None };
            cfg.share_projections = n_h != 3;
            out.push(cfg);
        }
    }
    out
}

#[test]
fn strictly_causal() {
    for cfg in variants() {
        let p = params::<f64>(&cfg, 23);
        let x = rand(&[1, 12, 8], 24);
        let base = forward(&p, &x, &cfg);
        for t in [0, 5, 11] {
            let mut y = x.clone();
            for j in 0..8 {
                y.set(&[0, t, j], x.at(&[0, t, j]) + 0.5);
            }
            let out = forward(&p, &y, &cfg);
            for s in 0..12 {
                let diff = (0..8).map(|j| (out.at(&[0, s, j]) - base.at(&[0, s, j])).abs()).fold(0.0, f64::max);
                if s < t {
                    assert_eq!(diff, 0.0, "{cfg:?} leaked from {t} to {s}");
                } else if s == t {
                    assert!(diff > 0.0);
                }
            }
        }
    }
}

#[test]
fn batch_entries_are_independent() {
    let cfg = config(8, 2, 2, 4, ExpansionMode::Both, 0.5);
    let p = params::<f64>(&cfg, 25);
    let x = rand(&[2, 9, 8], 26);
    let both = forward(&p, &x, &cfg);
    for b in 0..2 {
        let xb = Tensor::new([1, 9, 8], x.data()[b * 72..(b + 1) * 72].to_vec()).unwrap();
        let ob = forward(&p, &xb, &cfg);
        let got = &both.data()[b * 72..(b + 1) * 72];
        assert!(ob.data().iter().zip(got).all(|(a, c)| (a - c).abs() < 1e-6));
    }
}

#[test]
fn decoding_matches_full_forward() {
    for cfg in variants() {
        let p = params::<f32>(&cfg, 27);
        let x = rand(&[2, 64, 8], 28).cast::<f32>();
        let full = liza_forward(&mut Eager, &p, &x, &cfg, None).unwrap();
        let mut cache = LizaCache::new(&cfg, 2).unwrap();
        let mut linear_sizes = Vec::new();
        for t in 0..64 {
            let xt = x.slice_rows(t, t + 1).unwrap();
            let o = decode_step(&p, &xt, &cfg, &mut cache).unwrap();
            let want = full.slice_rows(t, t + 1).unwrap();
            assert!(o.max_abs_diff(&want) < 1e-5, "{cfg:?} token {t}: {}", o.max_abs_diff(&want));
            assert!(cache.recent_len() < cfg.n_h());
            linear_sizes.push(cache.footprint().linear);
        }
        assert_eq!(cache.position(), 64);
        let settled = linear_sizes[cfg.n_h()..].iter().all(|&s| s == linear_sizes[63]);
        assert!(settled, "{linear_sizes:?}");
    }
}

#[test]
fn prefill_then_decode() {
    let cfg = config(8, 2, 3, 4, ExpansionMode::Both, 0.3);
    let p = params::<f64>(&cfg, 29);
    let x = rand(&[1, 20, 8], 30);
    let full = forward(&p, &x, &cfg);
    let mut cache = LizaCache::new(&cfg, 1).unwrap();
    let head = liza_forward(&mut Eager, &p, &x.slice_rows(0, 11).unwrap(), &cfg, Some(&mut cache)).unwrap();
    assert!(head.max_abs_diff(&full.slice_rows(0, 11).unwrap()) < 1e-10);
    let tail = liza_forward(&mut Eager, &p, &x.slice_rows(11, 20).unwrap(), &cfg, Some(&mut cache)).unwrap();
    assert!(tail.max_abs_diff(&full.slice_rows(11, 20).unwrap()) < 1e-10);
}

#[test]
fn heads_are_independent() {
    let cfg = config(8, 2, 2, 4, ExpansionMode::Both, 0.5);
    let p = params::<f64>(&cfg, 31);
    let x = rand(&[1, 6, 8], 32);
    let before = liza_heads(&mut Eager, &p, &x, &cfg, None).unwrap();
    let mut z = p.clone();
    for w in [&mut z.w_q, &mut z.w_k, &mut z.w_v] {
        for i in 0..8 {
            for j in 4..8 {
                w.set(&[i, j], 0.0);
            }
        }
    }
    let after = liza_heads(&mut Eager, &z, &x, &cfg, None).unwrap();
    let head = |t: &Tensor<f64>, h: usize| t.data()[h * 24..(h + 1) * 24].to_vec();
    assert_eq!(head(&before, 0), head(&after, 0));
    assert_ne!(head(&before, 1), head(&after, 1));
}

#[test]
fn mixing_rejects_bad_alpha() {
    let a = Tensor::<f64>::zeros([2]);
    assert!(mag_mix(&mut Eager, &a, &a, &MagConfig { alpha: -0.01, mixing: Mixing::Gated }).is_err());
    let mut cfg = config(4, 1, 1, 2, ExpansionMode::Derivative, 0.5);
    cfg.mag.alpha = 2.0;
    let p = params::<f64>(&config(4, 1, 1, 2, ExpansionMode::Derivative, 0.5), 33);
    assert!(liza_forward(&mut Eager, &p, &Tensor::zeros([1, 2, 4]), &cfg, None).is_err());
}

/// Tape gradients of `Σ out ⊙ w` for every parameter (in `named` order) and for `x`.
fn tape_grads(
    p: &AttentionParams<Tensor<f64>>,
    x: &Tensor<f64>,
    cfg: &AttentionConfig,
    w: &Tensor<f64>,
) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let mut tape = Tape::new();
    let pv = p.map(|_, t| tape.leaf(t.clone(), true));
    let xv = tape.leaf(x.clone(), true);
    let out = liza_forward(&mut tape, &pv, &xv, cfg, None).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(&out, &wv).unwrap();
    let loss = tape.sum_all(&prod).unwrap();
    let g = tape.backward(loss).unwrap();
    let grads: Vec<Tensor<f64>> = pv.named().into_iter().map(|(_, v): (_, &Var)| g.get(*v).unwrap().clone()).collect();
    (grads, g.get(xv).unwrap().clone())
}

#[test]
fn gradients_match_finite_differences() {
    for mixing in [Mixing::Gated, Mixing::CrossGate] {
        let mut cfg = config(16, 2, 2, 3, ExpansionMode::Both, 0.5);
        cfg.mag.mixing = mixing;
        cfg.beta_source = BetaSource::KV;
        cfg.chunk.nonlinearity = StateNonlinearity::Tanh;
        let p = params::<f64>(&cfg, 34);
        let x = rand(&[2, 8, 16], 35);
        let w = rand(&[2, 8, 16], 36);
        let (pg, xg) = tape_grads(&p, &x, &cfg, &w);
        let eval = |p: &AttentionParams<Tensor<f64>>, x: &Tensor<f64>| {
            let o = forward(p, x, &cfg);
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        for (pi, (name, t)) in p.named().into_iter().enumerate() {
            for j in 0..t.numel() {
                let bump = |d: f64| {
                    p.map(|n, v| {
                        let mut v = v.clone();
                        if n == name {
                            v.data_mut()[j] += d;
                        }
                        v
                    })
                };
                let fd = (eval(&bump(h), &x) - eval(&bump(-h), &x)) / (2.0 * h);
                let r = rel(fd, pg[pi].data()[j]);
                if fd.abs().max(pg[pi].data()[j].abs()) > 1e-7 {
                    worst = worst.max(r);
                }
                assert!(r < 1e-3 || (fd - pg[pi].data()[j]).abs() < 1e-8, "{mixing} {name}[{j}]: fd {fd} vs {}", pg[pi].data()[j]);
            }
        }
        for j in 0..x.numel() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[j] += h;
            b.data_mut()[j] -= h;
            let fd = (eval(&p, &a) - eval(&p, &b)) / (2.0 * h);
            assert!(rel(fd, xg.data()[j]) < 1e-3 || (fd - xg.data()[j]).abs() < 1e-8, "{mixing} x[{j}]");
        }
        assert!(worst < 1e-3);
    }
}

#[test]
fn unshared_projections_feed_linear_branch() {
    let mut cfg = config(8, 2, 1, 4, ExpansionMode::Derivative, 1.0);
    cfg.share_projections = false;
    let p = params::<f64>(&cfg, 37);
    let x = rand(&[1, 5, 8], 38);
    let base = forward(&p, &x, &cfg);
    let mut q = p.clone();
    q.w_q = rand(&[8, 8], 39);
    // alpha = 1 never reads the softmax projections
    assert_eq!(forward(&q, &x, &cfg), base);
    let mut r = p.clone();
    r.linear.as_mut().unwrap().w_k = rand(&[8, 8], 40);
    assert_ne!(forward(&r, &x, &cfg), base);
}

#[test]
fn chunk_spec_is_carried() {
    let cfg = config(8, 2, 2, 5, ExpansionMode::Rotary, 0.5);
    assert_eq!(cfg.chunk, ChunkSpec::new(5, 2, StateNonlinearity::None).unwrap());
}
