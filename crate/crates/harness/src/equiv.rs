//! `equiv`: oracle suites for the memory kernels and the attention operator.
//!
//! * `chunkwise`: chunkwise update vs. the sequential delta rule over a sweep of
//!   `(T, d, C, n_h)` at each requested precision;
//! * `scalar`: the two-token worked case `k = (1, 1)`, `v = (2, 3)`, `β = (1, ½)`;
//! * `endpoint`: reduction identities (`n_h = 1` DeltaProduct, `C = 1` chunks,
//!   `α = 0` and `α = 1`);
//! * `incremental`: token-by-token decoding vs. the full forward for every variant;
//! * `causality`: perturbing position `t` leaves every earlier output bit-identical.

use std::fmt;

use magattn::attention::{
    decode_step, linear_branch, liza_forward, project_qkv, softmax_attention, AttentionConfig, AttentionParams,
    BetaSource, LizaCache, Mixing,
};
use magattn::expansion::{ExpansionMode, ExpansionSpec};
use magattn::memory::{
    chunkwise_update_signed, delta_sequential_scan, delta_step, deltaproduct_step, readout, ChunkSpec, MemoryState,
    StateNonlinearity, TriangularSign,
};
use magattn::numerics::{matmul, Eager};
use magattn::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Key, RunConfig, Schema};
use crate::error::{usage, Result};
use crate::output::{write_csv, Manifest, RunOutput};
use crate::Report;

pub const SUITES: [&str; 5] = ["chunkwise", "scalar", "endpoint", "incremental", "causality"];

pub fn schema() -> Schema {
    Schema::new(
        "equiv",
        "Run the oracle equivalence suites",
        &[
            Key::new("suites", "chunkwise,scalar,endpoint,incremental,causality", "suites to run"),
            Key::new("T", "1,7,16,64,256", "chunkwise: sequence lengths (real tokens)").short('T'),
            Key::new("d", "1,8,32", "chunkwise: key/value widths").short('d'),
            Key::new("C", "1,3,8,T", "chunkwise: chunk sizes; T means one chunk").short('C'),
            Key::new("nh", "1,2,3", "chunkwise: rows per real token"),
            Key::new("precision", "f32,f64", "chunkwise: f32 and/or f64"),
            Key::new("tol_f32", "1e-5", "chunkwise tolerance at f32"),
            Key::new("tol_f64", "1e-10", "chunkwise tolerance at f64"),
            Key::new("tol_endpoint", "1e-6", "tolerance of the reduction identities"),
            Key::new("tol_incremental", "1e-5", "decode vs. full forward tolerance (f32)"),
            Key::new("decode_len", "64", "incremental: tokens decoded per variant"),
            Key::new("causal_len", "12", "causality: sequence length"),
            Key::new("inject_sign_flip", "false", "use the wrong sign in the triangular system"),
        ],
    )
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub precision: &'static str,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CaseResult {
    fn within(suite: &'static str, case: String, precision: &'static str, diff: f64, tol: f64) -> Self {
        Self { suite, case, precision, max_abs_diff: diff, tolerance: tol, pass: diff < tol }
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<11} {:<48} {} max_abs_diff={:.3e} tol={:.0e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.suite,
            self.case,
            self.precision,
            self.max_abs_diff,
            self.tolerance
        )
    }
}

/// Chunk size choice in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkChoice {
    Fixed(usize),
    /// One chunk covering the whole sequence.
    Whole,
}

impl std::str::FromStr for ChunkChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "T" | "t" => Ok(Self::Whole),
            _ => match s.parse::<usize>() {
                Ok(c) if c > 0 => Ok(Self::Fixed(c)),
                _ => Err(format!("chunk size '{s}' is not a positive integer or T")),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChunkSweep {
    pub seq_lens: Vec<usize>,
    pub dims: Vec<usize>,
    pub chunks: Vec<ChunkChoice>,
    pub n_hs: Vec<usize>,
    pub sign: TriangularSign,
}

impl ChunkSweep {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("T", &self.seq_lens), ("d", &self.dims), ("nh", &self.n_hs)] {
            if v.is_empty() || v.contains(&0) {
                return usage(format!("{name} must list positive integers"));
            }
        }
        if self.chunks.is_empty() {
            return usage("C must list at least one chunk size");
        }
        Ok(())
    }

    /// `(T, d, C, n_h)` cases with duplicate chunk sizes per `T` removed.
    pub fn cases(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for &t in &self.seq_lens {
            let mut cs: Vec<usize> = self
                .chunks
                .iter()
                .map(|c| match c {
                    ChunkChoice::Fixed(c) => *c,
                    ChunkChoice::Whole => t,
                })
                .collect();
            cs.sort_unstable();
            cs.dedup();
            for &d in &self.dims {
                for &c in &cs {
                    for &n_h in &self.n_hs {
                        out.push((t, d, c, n_h));
                    }
                }
            }
        }
        out
    }
}

fn unit_rows<F: Element>(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
        data.extend(r.iter().map(|x| x / norm));
    }
    Tensor::from_f64([n, d], &data).expect("n·d values")
}

/// Random memory inputs: unit queries and keys, values in `[-1, 1]`, gates in `[0, 1]`.
pub struct MemoryStream<F: Element> {
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    pub beta: Tensor<F>,
    pub s0: MemoryState<F>,
}

pub fn memory_stream<F: Element>(rows: usize, d: usize, seed: u64) -> MemoryStream<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = unit_rows(rows, d, &mut rng);
    let k = unit_rows(rows, d, &mut rng);
    let v = Tensor::<f64>::rand_uniform([rows, d], -1.0, 1.0, &mut rng).cast();
    let beta = Tensor::<f64>::rand_uniform([rows], 0.0, 1.0, &mut rng).cast();
    let s0 = MemoryState::from_matrix(Tensor::<f64>::rand_uniform([d, d], -0.5, 0.5, &mut rng).cast())
        .expect("square state");
    MemoryStream { q, k, v, beta, s0 }
}

fn case_seed(seed: u64, parts: &[usize]) -> u64 {
    parts.iter().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, &p| h.wrapping_mul(0x100_0000_01b3).wrapping_add(p as u64 + 1))
}

/// Chunkwise vs. sequential: max abs diff over the final state and every output row.
pub fn chunkwise_suite<F: Element>(sweep: &ChunkSweep, tol: f64, seed: u64) -> Result<Vec<CaseResult>> {
    sweep.validate()?;
    let mut out = Vec::new();
    for (t, d, c, n_h) in sweep.cases() {
        let s = memory_stream::<F>(t * n_h, d, case_seed(seed, &[t, d, c, n_h]));
        let spec = ChunkSpec::new(c, n_h, StateNonlinearity::None)?;
        let seq = delta_sequential_scan(&s.q, &s.k, &s.v, &s.beta, &s.s0)?;
        let last = &seq.states.last().expect("T >= 1").s;
        let diff = match chunkwise_update_signed(&s.q, &s.k, &s.v, &s.beta, &s.s0, &spec, sweep.sign) {
            Ok(ch) => ch.state.s.max_abs_diff(last).as_f64().max(ch.outputs.max_abs_diff(&seq.outputs).as_f64()),
            Err(magattn::Error::NonFinite(_)) => f64::INFINITY,
            Err(e) => return Err(e.into()),
        };
        let diff = if diff.is_nan() { f64::INFINITY } else { diff };
        out.push(CaseResult::within("chunkwise", format!("T={t} d={d} C={c} nh={n_h}"), F::NAME, diff, tol));
    }
    Ok(out)
}

/// The worked scalar case, which pins the sign of the triangular system: both
/// paths must give `s_out = 2.5`.
pub fn scalar_suite(sign: TriangularSign) -> Result<Vec<CaseResult>> {
    let k = Tensor::<f64>::from_f64([2, 1], &[1.0, 1.0])?;
    let v = Tensor::from_f64([2, 1], &[2.0, 3.0])?;
    let beta = Tensor::from_f64([2], &[1.0, 0.5])?;
    let s0 = MemoryState::zeros(1, 1);
    let seq = delta_sequential_scan(&k, &k, &v, &beta, &s0)?;
    let spec = ChunkSpec::new(2, 1, StateNonlinearity::None)?;
    let ch = chunkwise_update_signed(&k, &k, &v, &beta, &s0, &spec, sign)?;
    let seq_s = seq.states[1].s.item()?;
    let ch_s = ch.state.s.item()?;
    Ok(vec![
        CaseResult::within("scalar", format!("sequential s_out={seq_s}"), "f64", (seq_s - 2.5).abs(), 1e-12),
        CaseResult::within("scalar", format!("chunkwise s_out={ch_s}"), "f64", (ch_s - 2.5).abs(), 1e-12),
    ])
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn attention_config(n_h: usize, mode: ExpansionMode, c: usize) -> Result<AttentionConfig> {
    let mut cfg = AttentionConfig::new(8, 2)?.with_virtual_tokens(ExpansionSpec::new(mode, n_h)?)?;
    cfg.chunk.chunk_size = c;
    Ok(cfg)
}

fn attention_params<F: Element>(cfg: &AttentionConfig, seed: u64) -> Result<AttentionParams<Tensor<F>>> {
    let mut p = AttentionParams::<Tensor<F>>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    p.norm_gain = rand_tensor(&[cfg.d_head], seed ^ 1).map(|g| 1.0 + 0.5 * g).cast();
    Ok(p)
}

/// Reduction identities at f64.
pub fn endpoint_suite(tol: f64, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for i in 0..16 {
        let s = memory_stream::<f64>(1, 8, case_seed(seed, &[1, i]));
        let one = delta_step(&s.s0, &s.k, &s.v, s.beta.data()[0])?;
        let prod = deltaproduct_step(&s.s0, &s.k, &s.v, &s.beta)?;
        worst = worst.max(one.s.max_abs_diff(&prod.s));
    }
    out.push(CaseResult::within("endpoint", "deltaproduct nh=1 == delta rule".into(), "f64", worst, tol));

    let s = memory_stream::<f64>(17, 8, case_seed(seed, &[2]));
    let spec = ChunkSpec::new(1, 1, StateNonlinearity::None)?;
    let ch = chunkwise_update_signed(&s.q, &s.k, &s.v, &s.beta, &s.s0, &spec, TriangularSign::Plus)?;
    let mut st = s.s0.clone();
    let mut worst = 0.0f64;
    for t in 0..17 {
        st = delta_step(&st, &s.k.slice_rows(t, t + 1)?, &s.v.slice_rows(t, t + 1)?, s.beta.data()[t])?;
        let read = readout(&st, &s.q.slice_rows(t, t + 1)?.reshape([8])?, false)?;
        worst = worst.max(read.max_abs_diff(&ch.outputs.slice_rows(t, t + 1)?.reshape([8])?));
    }
    worst = worst.max(ch.state.s.max_abs_diff(&st.s));
    out.push(CaseResult::within("endpoint", "C=1 chunkwise == step loop".into(), "f64", worst, tol));

    for mixing in [Mixing::Gated, Mixing::CrossGate] {
        let mut cfg = attention_config(2, ExpansionMode::Both, 3)?;
        cfg.mag.mixing = mixing;
        let p = attention_params::<f64>(&cfg, case_seed(seed, &[3]))?;
        let x = rand_tensor(&[2, 7, 8], case_seed(seed, &[4]));
        let (q, k, v) = project_qkv(&mut Eager, &x, (&p.w_q, &p.w_k, &p.w_v), &cfg)?;
        let heads_out = |h: &Tensor<f64>| -> Result<Tensor<f64>> {
            let m = h.permute(&[0, 2, 1, 3])?.reshape([2, 7, 8])?;
            Ok(matmul(&m, &p.w_o)?)
        };
        let soft = heads_out(&softmax_attention(&mut Eager, &q, &k, &v)?)?;
        let lin = heads_out(&linear_branch(&mut Eager, &q, &k, &v, &p.norm_gain, &cfg, None)?)?;
        for (alpha, want, name) in [(0.0, &soft, "softmax"), (1.0, &lin, "linear branch")] {
            cfg.mag.alpha = alpha;
            let plain = liza_forward(&mut Eager, &p, &x, &cfg, None)?;
            let mut cache = LizaCache::new(&cfg, 2)?;
            let cached = liza_forward(&mut Eager, &p, &x, &cfg, Some(&mut cache))?;
            let diff = plain.max_abs_diff(want).max(cached.max_abs_diff(want));
            out.push(CaseResult::within("endpoint", format!("alpha={alpha} {mixing} == {name}"), "f64", diff, tol));
        }
    }
    Ok(out)
}

/// The attention variants exercised by the incremental and causality suites:
/// every `β` source, both mixings, `n_h ∈ {1, 2, 3}`, every expansion mode,
/// boundary nonlinearity on and off, shared and separate projections.
pub fn variants() -> Result<Vec<AttentionConfig>> {
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
            let mut cfg = attention_config(n_h, mode, c)?;
            cfg.mag.alpha = 0.5;
            cfg.mag.mixing = if c == 4 { Mixing::CrossGate } else { Mixing::Gated };
            cfg.beta_source = [BetaSource::K, BetaSource::V, BetaSource::KV][c % 3];
            cfg.chunk.nonlinearity = if c == 16 { StateNonlinearity::Gelu } else { StateNonlinearity::None };
            cfg.share_projections = n_h != 3;
            out.push(cfg);
        }
    }
    Ok(out)
}

pub fn describe(cfg: &AttentionConfig) -> String {
    format!(
        "nh={} {} C={} {} beta={} phi={}{}",
        cfg.n_h(),
        cfg.expansion.mode,
        cfg.chunk.chunk_size,
        cfg.mag.mixing,
        cfg.beta_source,
        cfg.chunk.nonlinearity,
        if cfg.share_projections { "" } else { " separate-proj" }
    )
}

/// Stepwise decoding vs. the full forward (f32), plus a check that the
/// linear-branch cache stops growing once `n_h` tokens have been seen.
pub fn incremental_suite(tol: f64, decode_len: usize, seed: u64) -> Result<Vec<CaseResult>> {
    if decode_len == 0 {
        return usage("decode_len must be >= 1");
    }
    let mut out = Vec::new();
    for (i, cfg) in variants()?.into_iter().enumerate() {
        let p = attention_params::<f32>(&cfg, case_seed(seed, &[5, i]))?;
        let x = rand_tensor(&[2, decode_len, 8], case_seed(seed, &[6, i])).cast::<f32>();
        let full = liza_forward(&mut Eager, &p, &x, &cfg, None)?;
        let mut cache = LizaCache::new(&cfg, 2)?;
        let mut worst = 0.0f64;
        let mut sizes = Vec::with_capacity(decode_len);
        for t in 0..decode_len {
            let o = decode_step(&p, &x.slice_rows(t, t + 1)?, &cfg, &mut cache)?;
            worst = worst.max(o.max_abs_diff(&full.slice_rows(t, t + 1)?).as_f64());
            sizes.push(cache.footprint().linear);
        }
        let name = describe(&cfg);
        out.push(CaseResult::within("incremental", format!("decode {name}"), "f32", worst, tol));
        let settled = &sizes[cfg.n_h().min(decode_len - 1)..];
        let spread = settled.iter().max().unwrap_or(&0) - settled.iter().min().unwrap_or(&0);
        out.push(CaseResult {
            suite: "incremental",
            case: format!("linear cache {} elems {name}", sizes[decode_len - 1]),
            precision: "f32",
            max_abs_diff: spread as f64,
            tolerance: 0.0,
            pass: spread == 0,
        });
    }
    Ok(out)
}

/// Perturbs positions `0`, `T/2` and `T−1` of the input; outputs before the
/// perturbed position must not change at all, the output at it must.
pub fn causality_suite(seq_len: usize, seed: u64) -> Result<Vec<CaseResult>> {
    if seq_len < 2 {
        return usage("causal_len must be >= 2");
    }
    let mut out = Vec::new();
    for (i, cfg) in variants()?.into_iter().enumerate() {
        let p = attention_params::<f64>(&cfg, case_seed(seed, &[7, i]))?;
        let x = rand_tensor(&[1, seq_len, 8], case_seed(seed, &[8, i]));
        let base = liza_forward(&mut Eager, &p, &x, &cfg, None)?;
        let mut leak = 0.0f64;
        let mut moved = true;
        for t in [0, seq_len / 2, seq_len - 1] {
            let mut y = x.clone();
            for j in 0..8 {
                y.set(&[0, t, j], x.at(&[0, t, j]) + 0.5);
            }
            let o = liza_forward(&mut Eager, &p, &y, &cfg, None)?;
            for s in 0..=t {
                let diff = o.slice_rows(s, s + 1)?.max_abs_diff(&base.slice_rows(s, s + 1)?);
                if s < t {
                    leak = leak.max(diff);
                } else {
                    moved &= diff > 0.0;
                }
            }
        }
        out.push(CaseResult {
            suite: "causality",
            case: describe(&cfg),
            precision: "f64",
            max_abs_diff: leak,
            tolerance: 0.0,
            pass: leak == 0.0 && moved,
        });
    }
    Ok(out)
}

/// Resolves single-case mode: when `T`, `C` and `nh` each name one value, only the
/// chunkwise suite runs, at `d = 8` and f64, unless those keys were set too.
pub fn apply_single_case(cfg: &mut RunConfig) -> Result<bool> {
    let one = |k: &str| -> Result<bool> { Ok(cfg.list::<String>(k)?.len() == 1) };
    let single = one("T")? && one("C")? && one("nh")? && ["T", "C", "nh"].iter().any(|k| cfg.is_explicit(k));
    if single {
        cfg.set_default("suites", "chunkwise");
        cfg.set_default("d", "8");
        cfg.set_default("precision", "f64");
    }
    Ok(single)
}

/// Runs the configured suites.
pub fn run_suites(cfg: &RunConfig) -> Result<Vec<CaseResult>> {
    let seed = cfg.seed()?;
    let suites: Vec<String> = cfg.list("suites")?;
    if let Some(bad) = suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
        return usage(format!("unknown suite '{bad}' (known: {})", SUITES.join(", ")));
    }
    let sign = if cfg.flag("inject_sign_flip")? { TriangularSign::Minus } else { TriangularSign::Plus };
    let mut out = Vec::new();
    for suite in SUITES.iter().filter(|s| suites.iter().any(|x| x == *s)) {
        match *suite {
            "chunkwise" => {
                let sweep = ChunkSweep { seq_lens: cfg.list("T")?, dims: cfg.list("d")?, chunks: cfg.list("C")?, n_hs: cfg.list("nh")?, sign };
                let precisions: Vec<String> = cfg.list("precision")?;
                if precisions.is_empty() {
                    return usage("precision must list f32 and/or f64");
                }
                for p in precisions {
                    match p.as_str() {
                        "f32" => out.extend(chunkwise_suite::<f32>(&sweep, cfg.get("tol_f32")?, seed)?),
                        "f64" => out.extend(chunkwise_suite::<f64>(&sweep, cfg.get("tol_f64")?, seed)?),
                        other => return usage(format!("precision '{other}' is not f32 or f64")),
                    }
                }
            }
            "scalar" => out.extend(scalar_suite(sign)?),
            "endpoint" => out.extend(endpoint_suite(cfg.get("tol_endpoint")?, seed)?),
            "incremental" => out.extend(incremental_suite(cfg.get("tol_incremental")?, cfg.get("decode_len")?, seed)?),
            "causality" => out.extend(causality_suite(cfg.get("causal_len")?, seed)?),
            _ => unreachable!(),
        }
    }
    Ok(out)
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let mut cfg = cfg.clone();
    let single = apply_single_case(&mut cfg)?;
    let results = run_suites(&cfg)?;
    let out = RunOutput::create(&cfg.out_dir(), "equiv")?;
    write_csv(
        &out.csv_path(),
        &["suite", "case", "precision", "max_abs_diff", "tolerance", "pass"],
        results.iter().map(|r| {
            [
                r.suite.to_string(),
                r.case.clone(),
                r.precision.to_string(),
                format!("{:e}", r.max_abs_diff),
                format!("{:e}", r.tolerance),
                r.pass.to_string(),
            ]
        }),
    )?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    let mut m = Manifest::default();
    m.note("seed", cfg.seed()?);
    m.note("mode", if single { "single-case" } else { "sweep" });
    for suite in SUITES {
        let rows: Vec<&CaseResult> = results.iter().filter(|r| r.suite == suite).collect();
        if !rows.is_empty() {
            let worst = rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
            let bad = rows.iter().filter(|r| !r.pass).count();
            m.note(format!("suite {suite}"), format!("cases={} failed={bad} worst_diff={worst:e}", rows.len()));
        }
    }
    m.note("artifact", out.csv_path().display());
    let manifest = m.write(&out, &cfg)?;
    println!("{} cases, {failed} failed -> {}", results.len(), out.csv_path().display());
    Ok(Report { passed: failed == 0, csv: out.csv_path(), manifest })
}
