//! Fast-weight memory: the delta rule, DeltaProduct sub-steps and the
//! chunkwise-parallel update.
//!
//! The state `s` is stored `d_k × d_v`; a write is
//! `s ← (I − β k kᵀ) s + β k vᵀ` and a read is `sᵀ q`. The token-by-token
//! [`delta_sequential_scan`] is the reference every parallel path is tested against.
//!
//! Chunkwise form, per chunk of `N` rows with `Kβ = K ⊙ β`:
//!
//! ```text
//! T = I + tril(Kβ Kᵀ, −1)          (unit lower triangular)
//! R = V ⊙ β − Kβ · s_in
//! Y = solve(T, R)                  (forward substitution)
//! s_out = s_in + Kᵀ Y
//! O = Q · s_in + tril(Q Kᵀ) · Y    (inclusive; per-row readout)
//! ```
//!
//! The strictly-lower term enters `T` with a plus sign: expanding the recurrence
//! gives `y_i = β_i (v_i − s_inᵀ k_i) − β_i Σ_{j<i} (k_i·k_j) y_j`, so moving the
//! sum to the left-hand side yields `+`. Writing `T = I − tril(…)` instead does not
//! reproduce the sequential scan (see [`TriangularSign::Minus`]).

use std::fmt;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::numerics::{Backend, Eager, Element, Tensor, Unary};

/// Threshold below which a normalized read's denominator is rejected.
pub const READOUT_EPS: f64 = 1e-6;

/// Elementwise map applied to the state at every chunk boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateNonlinearity {
    #[default]
    None,
    Gelu,
    Tanh,
}

impl StateNonlinearity {
    pub fn unary(self) -> Option<Unary> {
        match self {
            StateNonlinearity::None => None,
            StateNonlinearity::Gelu => Some(Unary::Gelu),
            StateNonlinearity::Tanh => Some(Unary::Tanh),
        }
    }
}

impl fmt::Display for StateNonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateNonlinearity::None => "none",
            StateNonlinearity::Gelu => "gelu",
            StateNonlinearity::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for StateNonlinearity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            _ => Err(format!("unknown state nonlinearity '{s}' (none|gelu|tanh)")),
        }
    }
}

/// Chunking of the memory update. `chunk_size` counts real tokens; each real
/// token contributes `n_h` rows (virtual tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpec {
    pub chunk_size: usize,
    pub n_h: usize,
    pub nonlinearity: StateNonlinearity,
}

impl ChunkSpec {
    pub fn new(chunk_size: usize, n_h: usize, nonlinearity: StateNonlinearity) -> Result<Self> {
        let spec = Self { chunk_size, n_h, nonlinearity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 || self.n_h == 0 {
            return contract_err(
                "ChunkSpec",
                format!("chunk_size ({}) and n_h ({}) must be >= 1", self.chunk_size, self.n_h),
            );
        }
        Ok(())
    }
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self { chunk_size: 64, n_h: 1, nonlinearity: StateNonlinearity::None }
    }
}

/// Sign of the strictly-lower term in the chunk's triangular system.
/// `Plus` is the one that matches the recurrence; `Minus` exists so equivalence
/// suites can prove they catch the wrong sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TriangularSign {
    #[default]
    Plus,
    Minus,
}

/// Per-head fast-weight memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<F: Element = f32> {
    /// `d_k × d_v`.
    pub s: Tensor<F>,
    /// Optional kernel normalizer `Σ β_i k_i` (length `d_k`).
    pub z: Option<Tensor<F>>,
    /// Number of rank-1 writes applied so far.
    pub tokens_seen: usize,
}

impl<F: Element> MemoryState<F> {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self { s: Tensor::zeros([d_k, d_v]), z: None, tokens_seen: 0 }
    }

    pub fn with_normalizer(d_k: usize, d_v: usize) -> Self {
        Self { z: Some(Tensor::zeros([d_k])), ..Self::zeros(d_k, d_v) }
    }

    pub fn from_matrix(s: Tensor<F>) -> Result<Self> {
        if s.rank() != 2 {
            return dim_err("MemoryState", format!("state must be a matrix, got {:?}", s.shape()));
        }
        s.check_finite("MemoryState")?;
        Ok(Self { s, z: None, tokens_seen: 0 })
    }

    pub fn d_k(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn d_v(&self) -> usize {
        self.s.shape()[1]
    }

    fn check_kv(&self, op: &'static str, k: &[F], v: &[F]) -> Result<()> {
        if k.len() != self.d_k() || v.len() != self.d_v() {
            return dim_err(
                op,
                format!("key {} / value {} vs state {:?}", k.len(), v.len(), self.s.shape()),
            );
        }
        Ok(())
    }

    fn bump_normalizer(&mut self, k: &[F], beta: F) {
        if let Some(z) = &mut self.z {
            for (zi, &ki) in z.data_mut().iter_mut().zip(k) {
                *zi += beta * ki;
            }
        }
    }

    /// In-place delta-rule write.
    fn write(&mut self, k: &[F], v: &[F], beta: F) {
        let dv = self.d_v();
        let s = self.s.data_mut();
        // e = vᵀ − kᵀ s  (the prediction error for key k)
        let mut e: Vec<F> = v.to_vec();
        for (i, &ki) in k.iter().enumerate() {
            if ki != F::zero() {
                for (ej, &sij) in e.iter_mut().zip(&s[i * dv..(i + 1) * dv]) {
                    *ej -= ki * sij;
                }
            }
        }
        for (i, &ki) in k.iter().enumerate() {
            let c = beta * ki;
            if c != F::zero() {
                for (sij, &ej) in s[i * dv..(i + 1) * dv].iter_mut().zip(&e) {
                    *sij += c * ej;
                }
            }
        }
        self.bump_normalizer(k, beta);
        self.tokens_seen += 1;
    }
}

fn check_beta<F: Element>(op: &'static str, beta: F) -> Result<()> {
    if !(beta >= F::zero() && beta <= F::one()) {
        return contract_err(op, format!("beta {beta} outside [0, 1]"));
    }
    Ok(())
}

fn vector<'a, F: Element>(op: &'static str, t: &'a Tensor<F>) -> Result<&'a [F]> {
    if t.rank() > 1 && t.shape()[..t.rank() - 1].iter().any(|&d| d != 1) {
        return dim_err(op, format!("expected a vector, got {:?}", t.shape()));
    }
    Ok(t.data())
}

/// `s ← (I − β k kᵀ) s + β k vᵀ`.
pub fn delta_step<F: Element>(state: &MemoryState<F>, k: &Tensor<F>, v: &Tensor<F>, beta: F) -> Result<MemoryState<F>> {
    let (k, v) = (vector("delta_step", k)?, vector("delta_step", v)?);
    state.check_kv("delta_step", k, v)?;
    check_beta("delta_step", beta)?;
    if !k.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("delta_step key"));
    }
    let mut next = state.clone();
    next.write(k, v, beta);
    next.s.check_finite("delta_step")?;
    Ok(next)
}

/// Plain kernelized linear-attention accumulation `s ← s + β k vᵀ`, `z ← z + β k`
/// (no erase term). Exposed so the normalized read has a direct-sum counterpart.
pub fn additive_step<F: Element>(state: &MemoryState<F>, k: &Tensor<F>, v: &Tensor<F>, beta: F) -> Result<MemoryState<F>> {
    let (k, v) = (vector("additive_step", k)?, vector("additive_step", v)?);
    state.check_kv("additive_step", k, v)?;
    let mut next = state.clone();
    let dv = next.d_v();
    let s = next.s.data_mut();
    for (i, &ki) in k.iter().enumerate() {
        for (sij, &vj) in s[i * dv..(i + 1) * dv].iter_mut().zip(v) {
            *sij += beta * ki * vj;
        }
    }
    next.bump_normalizer(k, beta);
    next.tokens_seen += 1;
    next.s.check_finite("additive_step")?;
    Ok(next)
}

/// Result of a token-by-token scan.
#[derive(Debug, Clone)]
pub struct ScanOutput<F: Element> {
    /// State after each row (`states[i]` includes row `i`).
    pub states: Vec<MemoryState<F>>,
    /// `T × d_v` reads `s_iᵀ q_i`.
    pub outputs: Tensor<F>,
}

struct Rows<'a, F: Element> {
    q: &'a Tensor<F>,
    k: &'a Tensor<F>,
    v: &'a Tensor<F>,
    beta: &'a Tensor<F>,
    n: usize,
}

fn rows<'a, F: Element>(
    op: &'static str,
    q: &'a Tensor<F>,
    k: &'a Tensor<F>,
    v: &'a Tensor<F>,
    beta: &'a Tensor<F>,
    state: &MemoryState<F>,
) -> Result<Rows<'a, F>> {
    if k.rank() != 2 || v.rank() != 2 || q.rank() != 2 {
        return dim_err(op, "queries, keys and values must be matrices");
    }
    let n = k.shape()[0];
    if q.shape() != k.shape()
        || v.shape()[0] != n
        || beta.numel() != n
        || k.shape()[1] != state.d_k()
        || v.shape()[1] != state.d_v()
    {
        return dim_err(
            op,
            format!(
                "q {:?}, k {:?}, v {:?}, beta {:?}, state {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                beta.shape(),
                state.s.shape()
            ),
        );
    }
    for &b in beta.data() {
        check_beta(op, b)?;
    }
    Ok(Rows { q, k, v, beta, n })
}

/// Reference recurrence: one [`delta_step`] per row, reading `s_iᵀ q_i` after each.
pub fn delta_sequential_scan<F: Element>(
    queries: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    betas: &Tensor<F>,
    s0: &MemoryState<F>,
) -> Result<ScanOutput<F>> {
    let spec = ChunkSpec { chunk_size: usize::MAX, n_h: 1, nonlinearity: StateNonlinearity::None };
    sequential_scan(queries, keys, values, betas, s0, &spec)
}

/// Reference recurrence that also applies the chunk-boundary nonlinearity after
/// every `chunk_size` real tokens (`chunk_size · n_h` rows), exactly where the
/// chunkwise path applies it.
pub fn sequential_scan<F: Element>(
    queries: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    betas: &Tensor<F>,
    s0: &MemoryState<F>,
    spec: &ChunkSpec,
) -> Result<ScanOutput<F>> {
    spec.validate()?;
    let r = rows("sequential_scan", queries, keys, values, betas, s0)?;
    if r.n % spec.n_h != 0 {
        return contract_err("sequential_scan", format!("{} rows is not a multiple of n_h={}", r.n, spec.n_h));
    }
    let (dk, dv) = (s0.d_k(), s0.d_v());
    let boundary = spec.chunk_size.saturating_mul(spec.n_h);
    let mut state = s0.clone();
    let mut states = Vec::with_capacity(r.n);
    let mut out = Vec::with_capacity(r.n * dv);
    for i in 0..r.n {
        let k = &r.k.data()[i * dk..(i + 1) * dk];
        let v = &r.v.data()[i * dv..(i + 1) * dv];
        state.write(k, v, r.beta.data()[i]);
        let q = &r.q.data()[i * dk..(i + 1) * dk];
        out.extend(read(&state.s, q));
        if (i + 1) % boundary == 0 {
            state = apply_state_nonlinearity(&state, spec);
        }
        state.s.check_finite("sequential_scan")?;
        states.push(state.clone());
    }
    Ok(ScanOutput { states, outputs: Tensor::new([r.n, dv], out)? })
}

fn read<F: Element>(s: &Tensor<F>, q: &[F]) -> Vec<F> {
    let dv = s.shape()[1];
    let mut o = vec![F::zero(); dv];
    for (i, &qi) in q.iter().enumerate() {
        for (oj, &sij) in o.iter_mut().zip(&s.data()[i * dv..(i + 1) * dv]) {
            *oj += qi * sij;
        }
    }
    o
}

/// `n_h` ordered delta writes for one real token (`H_{i,0} = H_{i−1}`, `H_{i,n_h} = H_i`).
pub fn deltaproduct_step<F: Element>(
    state: &MemoryState<F>,
    ks: &Tensor<F>,
    vs: &Tensor<F>,
    betas: &Tensor<F>,
) -> Result<MemoryState<F>> {
    if ks.rank() != 2 || vs.rank() != 2 || ks.shape()[0] != vs.shape()[0] || betas.numel() != ks.shape()[0] {
        return dim_err(
            "deltaproduct_step",
            format!("ks {:?}, vs {:?}, betas {:?}", ks.shape(), vs.shape(), betas.shape()),
        );
    }
    let (dk, dv) = (ks.shape()[1], vs.shape()[1]);
    let mut next = state.clone();
    for j in 0..ks.shape()[0] {
        let k = &ks.data()[j * dk..(j + 1) * dk];
        let v = &vs.data()[j * dv..(j + 1) * dv];
        next.check_kv("deltaproduct_step", k, v)?;
        let beta = betas.data()[j];
        // beta up to 2 keeps (I − β k kᵀ) a (generalized) reflection for unit k
        if !(beta >= F::zero() && beta <= F::of(2.0)) {
            return contract_err("deltaproduct_step", format!("beta {beta} outside [0, 2]"));
        }
        next.write(k, v, beta);
    }
    next.s.check_finite("deltaproduct_step")?;
    Ok(next)
}

/// Reads the memory: `sᵀ q`, or `sᵀ q / (zᵀ q)` when `normalized`.
pub fn readout<F: Element>(state: &MemoryState<F>, q: &Tensor<F>, normalized: bool) -> Result<Tensor<F>> {
    let q = vector("readout", q)?;
    if q.len() != state.d_k() {
        return dim_err("readout", format!("query {} vs state {:?}", q.len(), state.s.shape()));
    }
    let mut o = read(&state.s, q);
    if normalized {
        let Some(z) = &state.z else {
            return contract_err("readout", "normalized read on a state without a normalizer");
        };
        let den: F = z.data().iter().zip(q).map(|(&a, &b)| a * b).sum();
        if den.abs() < F::of(READOUT_EPS) {
            return Err(Error::DegenerateDenominator {
                op: "readout",
                value: den.as_f64(),
                eps: READOUT_EPS,
            });
        }
        o.iter_mut().for_each(|x| *x /= den);
    }
    Ok(Tensor::from_raw(vec![state.d_v()], o))
}

/// Applies the chunk-boundary map to `s`; `z` is left alone.
pub fn apply_state_nonlinearity<F: Element>(state: &MemoryState<F>, spec: &ChunkSpec) -> MemoryState<F> {
    match spec.nonlinearity.unary() {
        None => state.clone(),
        Some(u) => MemoryState { s: state.s.map(|x| u.apply(x)), ..state.clone() },
    }
}

/// Output of [`chunkwise_update`].
#[derive(Debug, Clone)]
pub struct ChunkwiseOutput<F: Element> {
    pub state: MemoryState<F>,
    /// `N × d_v` solved pseudo-values, chunk by chunk.
    pub y: Tensor<F>,
    /// `N × d_v` per-row reads (same as the sequential scan's outputs).
    pub outputs: Tensor<F>,
}

/// Chunkwise-parallel memory update over `N = n_h · T` rows.
pub fn chunkwise_update<F: Element>(
    queries: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    betas: &Tensor<F>,
    s_in: &MemoryState<F>,
    spec: &ChunkSpec,
) -> Result<ChunkwiseOutput<F>> {
    chunkwise_update_signed(queries, keys, values, betas, s_in, spec, TriangularSign::Plus)
}

/// [`chunkwise_update`] with an explicit triangular sign (for mutation checks).
pub fn chunkwise_update_signed<F: Element>(
    queries: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    betas: &Tensor<F>,
    s_in: &MemoryState<F>,
    spec: &ChunkSpec,
    sign: TriangularSign,
) -> Result<ChunkwiseOutput<F>> {
    spec.validate()?;
    let r = rows("chunkwise_update", queries, keys, values, betas, s_in)?;
    if r.n % spec.n_h != 0 {
        return contract_err("chunkwise_update", format!("{} rows is not a multiple of n_h={}", r.n, spec.n_h));
    }
    let lift = |t: &Tensor<F>| t.reshape([1, t.shape()[0], t.numel() / t.shape()[0].max(1)]);
    let beta = betas.reshape([1, r.n, 1])?;
    let s0 = s_in.s.reshape([1, s_in.d_k(), s_in.d_v()])?;
    let mut bk = Eager;
    let out = chunkwise_scan(
        &mut bk,
        ChunkInputs { q: &lift(r.q)?, k: &lift(r.k)?, v: &lift(r.v)?, beta: &beta },
        &s0,
        spec,
        0,
        sign,
    )?;
    let (dk, dv) = (s_in.d_k(), s_in.d_v());
    let mut z = s_in.z.clone();
    if let Some(z) = &mut z {
        for i in 0..r.n {
            let b = r.beta.data()[i];
            for (zj, &kj) in z.data_mut().iter_mut().zip(&r.k.data()[i * dk..(i + 1) * dk]) {
                *zj += b * kj;
            }
        }
    }
    let state = MemoryState { s: out.state.reshape([dk, dv])?, z, tokens_seen: s_in.tokens_seen + r.n };
    state.s.check_finite("chunkwise_update")?;
    Ok(ChunkwiseOutput {
        state,
        y: out.y.reshape([r.n, dv])?,
        outputs: out.outputs.reshape([r.n, dv])?,
    })
}

/// Batched inputs of [`chunkwise_scan`]: `[..., N, d]` rows and `[..., N, 1]` gates.
pub struct ChunkInputs<'a, V> {
    pub q: &'a V,
    pub k: &'a V,
    pub v: &'a V,
    pub beta: &'a V,
}

pub struct ChunkScan<V> {
    pub state: V,
    pub y: V,
    pub outputs: V,
}

/// Batched chunkwise scan written against [`Backend`], so the same code runs
/// eagerly and on the autodiff tape.
///
/// `tokens_before` is the number of real tokens already folded into `s0`; chunk
/// boundaries (and the boundary nonlinearity) sit at absolute multiples of
/// `spec.chunk_size`, so a continuation lines up with a full-sequence pass.
pub fn chunkwise_scan<F: Element, B: Backend<F>>(
    bk: &mut B,
    x: ChunkInputs<'_, B::Value>,
    s0: &B::Value,
    spec: &ChunkSpec,
    tokens_before: usize,
    sign: TriangularSign,
) -> Result<ChunkScan<B::Value>> {
    spec.validate()?;
    let shape = bk.shape(x.k);
    let n = shape[shape.len() - 2];
    if n % spec.n_h != 0 {
        return contract_err("chunkwise_scan", format!("{n} rows is not a multiple of n_h={}", spec.n_h));
    }
    let mut state = s0.clone();
    let mut ys = Vec::new();
    let mut outs = Vec::new();
    let mut pos = tokens_before;
    let mut row = 0;
    while row < n {
        let room = spec.chunk_size - pos % spec.chunk_size;
        let take = room.min((n - row) / spec.n_h);
        let end = row + take * spec.n_h;
        let q = bk.slice_rows(x.q, row, end)?;
        let k = bk.slice_rows(x.k, row, end)?;
        let v = bk.slice_rows(x.v, row, end)?;
        let beta = bk.slice_rows(x.beta, row, end)?;
        let (next, y, o) = chunk_step(bk, &q, &k, &v, &beta, &state, sign)?;
        state = next;
        ys.push(y);
        outs.push(o);
        pos += take;
        row = end;
        if pos % spec.chunk_size == 0 {
            if let Some(u) = spec.nonlinearity.unary() {
                state = bk.unary(&state, u)?;
            }
        }
    }
    if ys.is_empty() {
        // no rows: empty y / outputs with the right trailing width
        let mut es = shape.clone();
        let r = es.len();
        es[r - 1] = bk.shape(x.v)[r - 1];
        es[r - 2] = 0;
        let e = bk.constant(Tensor::zeros(es));
        return Ok(ChunkScan { state, y: e.clone(), outputs: e });
    }
    let y = if ys.len() == 1 { ys.pop().unwrap() } else { bk.concat_rows(&ys)? };
    let outputs = if outs.len() == 1 { outs.pop().unwrap() } else { bk.concat_rows(&outs)? };
    Ok(ChunkScan { state, y, outputs })
}

/// One chunk: returns `(s_out, Y, O)`.
fn chunk_step<F: Element, B: Backend<F>>(
    bk: &mut B,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    beta: &B::Value,
    s_in: &B::Value,
    sign: TriangularSign,
) -> Result<(B::Value, B::Value, B::Value)> {
    let shape = bk.shape(k);
    let n = shape[shape.len() - 2];
    let kb = bk.mul(k, beta)?;
    let gram = bk.matmul_t(&kb, false, k, true)?;
    let lower = bk.tril(&gram, true)?;
    let eye = bk.constant(Tensor::eye(n));
    let t = match sign {
        TriangularSign::Plus => bk.add(&eye, &lower)?,
        TriangularSign::Minus => bk.sub(&eye, &lower)?,
    };
    let vb = bk.mul(v, beta)?;
    let ks = bk.matmul(&kb, s_in)?;
    let r = bk.sub(&vb, &ks)?;
    let y = bk.forward_substitution(&t, &r)?;
    let upd = bk.matmul_t(k, true, &y, false)?;
    let s_out = bk.add(s_in, &upd)?;
    let qs = bk.matmul(q, s_in)?;
    let qk = bk.matmul_t(q, false, k, true)?;
    let qk = bk.tril(&qk, false)?;
    let intra = bk.matmul(&qk, &y)?;
    let o = bk.add(&qs, &intra)?;
    Ok((s_out, y, o))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn single_write_and_gating_off() {
        let s = MemoryState::<f64>::zeros(2, 2);
        let s1 = delta_step(&s, &t(&[2], &[1., 0.]), &t(&[2], &[3., 4.]), 1.0).unwrap();
        assert_eq!(s1.s.data(), &[3., 4., 0., 0.]);
        let s2 = delta_step(&s1, &t(&[2], &[0.6, 0.8]), &t(&[2], &[-1., 7.]), 0.0).unwrap();
        assert_eq!(s2.s, s1.s);
    }

    #[test]
    fn unit_key_recall_is_exact() {
        let mut s = MemoryState::<f64>::zeros(2, 3);
        s.s = t(&[2, 3], &[0.3, -1.2, 2.0, 0.5, 0.1, -0.7]);
        let k = t(&[2], &[0.6, 0.8]);
        let v = t(&[3], &[1.5, -2.0, 0.25]);
        let s1 = delta_step(&s, &k, &v, 1.0).unwrap();
        let r = readout(&s1, &k, false).unwrap();
        assert!(r.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn errors() {
        let s = MemoryState::<f64>::zeros(2, 2);
        assert!(matches!(
            delta_step(&s, &t(&[3], &[1., 0., 0.]), &t(&[2], &[3., 4.]), 1.0),
            Err(Error::Dimension { .. })
        ));
        assert!(delta_step(&s, &t(&[2], &[1., 0.]), &t(&[2], &[3., 4.]), 1.5).is_err());
        assert!(ChunkSpec::new(0, 1, StateNonlinearity::None).is_err());
        assert!(ChunkSpec::new(1, 0, StateNonlinearity::None).is_err());
        // normalized read needs a normalizer and a usable denominator
        assert!(readout(&s, &t(&[2], &[1., 0.]), true).is_err());
        let zs = MemoryState::<f64>::with_normalizer(2, 2);
        assert!(matches!(
            readout(&zs, &t(&[2], &[1., 0.]), true),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn scalar_worked_case_both_paths() {
        let k = t(&[2, 1], &[1., 1.]);
        let v = t(&[2, 1], &[2., 3.]);
        let b = t(&[2], &[1., 0.5]);
        let s0 = MemoryState::<f64>::zeros(1, 1);
        let seq = delta_sequential_scan(&k, &k, &v, &b, &s0).unwrap();
        assert_eq!(seq.states[0].s.data(), &[2.0]);
        assert_eq!(seq.states[1].s.data(), &[2.5]);
        let spec = ChunkSpec::new(2, 1, StateNonlinearity::None).unwrap();
        let ch = chunkwise_update(&k, &k, &v, &b, &s0, &spec).unwrap();
        assert_eq!(ch.y.data(), &[2.0, 0.5]);
        assert_eq!(ch.state.s.data(), &[2.5]);
        let wrong = chunkwise_update_signed(&k, &k, &v, &b, &s0, &spec, TriangularSign::Minus).unwrap();
        assert!((wrong.state.s.data()[0] - 2.5).abs() > 0.5);
    }

    #[test]
    fn rows_must_be_multiple_of_n_h() {
        let k = Tensor::<f64>::zeros([3, 2]);
        let v = Tensor::<f64>::zeros([3, 2]);
        let b = Tensor::<f64>::zeros([3]);
        let spec = ChunkSpec::new(2, 2, StateNonlinearity::None).unwrap();
        assert!(matches!(
            chunkwise_update(&k, &k, &v, &b, &MemoryState::zeros(2, 2), &spec),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn nonlinearity_modes() {
        let mut st = MemoryState::<f64>::zeros(2, 2);
        let none = ChunkSpec::new(1, 1, StateNonlinearity::None).unwrap();
        let tanh = ChunkSpec { nonlinearity: StateNonlinearity::Tanh, ..none };
        assert_eq!(apply_state_nonlinearity(&st, &tanh), st);
        st.s = t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]);
        assert_eq!(apply_state_nonlinearity(&st, &none), st);
        let gelu = ChunkSpec { nonlinearity: StateNonlinearity::Gelu, ..none };
        let g = apply_state_nonlinearity(&st, &gelu);
        assert_eq!(g.s, crate::numerics::gelu(&st.s));
    }
}
