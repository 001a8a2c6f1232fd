//! Gated softmax + linear attention (LiZAttention) and its decoding cache.
//!
//! Per layer: shared projections feed two branches.
//!
//! * softmax branch: causal `softmax(q kᵀ / √d_head) v` on the raw projections;
//! * linear branch: SiLU + L2 normalization of `q, k, v`, a per-token gate `β` from the
//!   prefix mean of the normalized stream(s), virtual-token expansion, the chunkwise
//!   delta-rule scan, a read at each token's last virtual row and a per-head RMSNorm.
//!
//! The two are mixed with weight `α` (see [`mag_mix`]) before the output projection.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::expansion::{copy_index, expand_on, ExpansionSpec, Expander};
use crate::memory::{chunkwise_scan, ChunkInputs, ChunkSpec, TriangularSign};
use crate::numerics::norm::DEFAULT_EPS;
use crate::numerics::{Backend, Eager, Element, Tensor, Unary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mixing {
    #[default]
    Gated,
    CrossGate,
}

impl fmt::Display for Mixing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mixing::Gated => "gated",
            Mixing::CrossGate => "cross_gate",
        })
    }
}

impl std::str::FromStr for Mixing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gated" => Ok(Self::Gated),
            "cross_gate" => Ok(Self::CrossGate),
            _ => Err(format!("unknown mixing '{s}' (gated|cross_gate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaSource {
    #[default]
    K,
    V,
    KV,
}

impl fmt::Display for BetaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaSource::K => "k",
            BetaSource::V => "v",
            BetaSource::KV => "kv",
        })
    }
}

impl std::str::FromStr for BetaSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "k" => Ok(Self::K),
            "v" => Ok(Self::V),
            "kv" => Ok(Self::KV),
            _ => Err(format!("unknown beta source '{s}' (k|v|kv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagConfig {
    pub alpha: f64,
    pub mixing: Mixing,
}

impl MagConfig {
    pub fn new(alpha: f64, mixing: Mixing) -> Result<Self> {
        check_alpha("MagConfig", alpha)?;
        Ok(Self { alpha, mixing })
    }
}

impl Default for MagConfig {
    fn default() -> Self {
        Self { alpha: 0.5, mixing: Mixing::Gated }
    }
}

fn check_alpha(op: &'static str, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return contract_err(op, format!("alpha {alpha} outside [0, 1]"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub chunk: ChunkSpec,
    pub expansion: ExpansionSpec,
    pub mag: MagConfig,
    pub share_projections: bool,
    pub beta_source: BetaSource,
}

impl AttentionConfig {
    /// Shared projections, `β` from keys, one virtual token, chunks of 64, `α = 0.5`.
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return contract_err("AttentionConfig", format!("d_model {d_model} not divisible by n_heads {n_heads}"));
        }
        let cfg = Self {
            d_model,
            n_heads,
            d_head: d_model / n_heads,
            chunk: ChunkSpec::default(),
            expansion: ExpansionSpec::identity(),
            mag: MagConfig::default(),
            share_projections: true,
            beta_source: BetaSource::K,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets `n_h` on both the expansion and the chunk spec.
    pub fn with_virtual_tokens(mut self, expansion: ExpansionSpec) -> Result<Self> {
        self.chunk.n_h = expansion.n_h;
        self.expansion = expansion;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return contract_err(
                "AttentionConfig",
                format!("d_model {} != n_heads {} * d_head {}", self.d_model, self.n_heads, self.d_head),
            );
        }
        self.chunk.validate()?;
        self.expansion.validate(Some(self.d_head))?;
        if self.chunk.n_h != self.expansion.n_h {
            return contract_err(
                "AttentionConfig",
                format!("chunk n_h {} != expansion n_h {}", self.chunk.n_h, self.expansion.n_h),
            );
        }
        check_alpha("AttentionConfig", self.mag.alpha)
    }

    pub fn n_h(&self) -> usize {
        self.expansion.n_h
    }
}

/// Separate projections used by the linear branch when projections are not shared.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjections<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

/// Weights of one attention layer. `T` is a tensor for eager use or a tape handle.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// `d_model × (n_heads·d_head)`, applied as `x · W`.
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// `(n_heads·d_head) × d_model`.
    pub w_o: T,
    pub linear: Option<LinearProjections<T>>,
    /// RMSNorm gain of the linear branch, `d_head`, shared by all heads.
    pub norm_gain: T,
}

impl<T> AttentionParams<T> {
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut v = vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)];
        if let Some(l) = &self.linear {
            v.extend([("w_q_lin", &l.w_q), ("w_k_lin", &l.w_k), ("w_v_lin", &l.w_v)]);
        }
        v.push(("norm_gain", &self.norm_gain));
        v
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U, E>) -> Result<AttentionParams<U>, E> {
        Ok(AttentionParams {
            w_q: f("w_q", &self.w_q)?,
            w_k: f("w_k", &self.w_k)?,
            w_v: f("w_v", &self.w_v)?,
            w_o: f("w_o", &self.w_o)?,
            linear: match &self.linear {
                Some(l) => Some(LinearProjections {
                    w_q: f("w_q_lin", &l.w_q)?,
                    w_k: f("w_k_lin", &l.w_k)?,
                    w_v: f("w_v_lin", &l.w_v)?,
                }),
                None => None,
            },
            norm_gain: f("norm_gain", &self.norm_gain)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> AttentionParams<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t))).unwrap_or_else(|e| match e {})
    }
}

/// Scale of the output projection relative to `1/√fan_in`.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

impl<F: Element> AttentionParams<Tensor<F>> {
    /// Uniform `±1/√fan_in` projections, a small output projection and unit gain.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let inner = cfg.n_heads * cfg.d_head;
        let mut proj = |rows: usize, cols: usize, scale: f64| {
            let a = scale / (rows as f64).sqrt();
            Tensor::<f64>::rand_uniform([rows, cols], -a, a, rng).cast::<F>()
        };
        let (w_q, w_k, w_v) = (proj(cfg.d_model, inner, 1.0), proj(cfg.d_model, inner, 1.0), proj(cfg.d_model, inner, 1.0));
        let w_o = proj(inner, cfg.d_model, OUTPUT_INIT_SCALE);
        let linear = (!cfg.share_projections).then(|| LinearProjections {
            w_q: proj(cfg.d_model, inner, 1.0),
            w_k: proj(cfg.d_model, inner, 1.0),
            w_v: proj(cfg.d_model, inner, 1.0),
        });
        Ok(Self { w_q, w_k, w_v, w_o, linear, norm_gain: Tensor::full([cfg.d_head], F::one()) })
    }

    pub fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let inner = cfg.n_heads * cfg.d_head;
        let want = |name: &str, t: &Tensor<F>, shape: [usize; 2]| {
            if t.shape() != shape {
                return dim_err("AttentionParams", format!("{name} is {:?}, expected {shape:?}", t.shape()));
            }
            Ok(())
        };
        want("w_q", &self.w_q, [cfg.d_model, inner])?;
        want("w_k", &self.w_k, [cfg.d_model, inner])?;
        want("w_v", &self.w_v, [cfg.d_model, inner])?;
        want("w_o", &self.w_o, [inner, cfg.d_model])?;
        if self.linear.is_some() == cfg.share_projections {
            return contract_err("AttentionParams", "linear-branch projections do not match share_projections");
        }
        if let Some(l) = &self.linear {
            want("w_q_lin", &l.w_q, [cfg.d_model, inner])?;
            want("w_k_lin", &l.w_k, [cfg.d_model, inner])?;
            want("w_v_lin", &l.w_v, [cfg.d_model, inner])?;
        }
        if self.norm_gain.shape() != [cfg.d_head] {
            return dim_err("AttentionParams", format!("norm_gain is {:?}", self.norm_gain.shape()));
        }
        Ok(())
    }
}

fn split_heads<F: Element, B: Backend<F>>(bk: &mut B, x: &B::Value, cfg: &AttentionConfig) -> Result<B::Value> {
    let s = bk.shape(x);
    let x = bk.reshape(x, &[s[0], s[1], cfg.n_heads, cfg.d_head])?;
    bk.permute(&x, &[0, 2, 1, 3])
}

fn merge_heads<F: Element, B: Backend<F>>(bk: &mut B, x: &B::Value) -> Result<B::Value> {
    let s = bk.shape(x);
    let x = bk.permute(x, &[0, 2, 1, 3])?;
    bk.reshape(&x, &[s[0], s[2], s[1] * s[3]])
}

/// Projects `x: [B, T, d_model]` to per-head `q, k, v: [B, H, T, d_head]`.
pub fn project_qkv<F: Element, B: Backend<F>>(
    bk: &mut B,
    x: &B::Value,
    w: (&B::Value, &B::Value, &B::Value),
    cfg: &AttentionConfig,
) -> Result<(B::Value, B::Value, B::Value)> {
    let s = bk.shape(x);
    if s.len() != 3 || s[2] != cfg.d_model {
        return dim_err("project_qkv", format!("input {s:?} vs d_model {}", cfg.d_model));
    }
    let mut one = |wm: &B::Value| -> Result<B::Value> {
        let p = bk.matmul(x, wm)?;
        split_heads(bk, &p, cfg)
    };
    Ok((one(w.0)?, one(w.1)?, one(w.2)?))
}

/// Causal softmax attention with scale `1/√d_head`. `k, v` may carry earlier
/// positions in front of the queries.
pub fn softmax_attention<F: Element, B: Backend<F>>(
    bk: &mut B,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
) -> Result<B::Value> {
    let d = *bk.shape(q).last().unwrap_or(&1);
    bk.causal_attention(q, k, v, F::of(1.0 / (d as f64).sqrt()))
}

/// Running sums and count of the pooled streams before the current block.
#[derive(Debug, Clone, Copy)]
pub struct PoolHistory<'a, F: Element> {
    pub sum_k: &'a Tensor<F>,
    pub sum_v: &'a Tensor<F>,
    pub count: usize,
}

/// Per-token gates `[..., T, 1]`: sigmoid of the prefix mean of the selected
/// stream(s), averaged over features (`kv` multiplies the two sigmoids first).
pub fn beta_gates<F: Element, B: Backend<F>>(
    bk: &mut B,
    k: &B::Value,
    v: &B::Value,
    source: BetaSource,
    history: Option<PoolHistory<'_, F>>,
) -> Result<B::Value> {
    let mut gate = |x: &B::Value, sum: Option<&Tensor<F>>| -> Result<B::Value> {
        let hist = sum.zip(history.map(|h| h.count));
        let pooled = bk.prefix_mean(x, hist)?;
        bk.unary(&pooled, Unary::Sigmoid)
    };
    let g = match source {
        BetaSource::K => gate(k, history.map(|h| h.sum_k))?,
        BetaSource::V => gate(v, history.map(|h| h.sum_v))?,
        BetaSource::KV => {
            let gk = gate(k, history.map(|h| h.sum_k))?;
            let gv = gate(v, history.map(|h| h.sum_v))?;
            bk.mul(&gk, &gv)?
        }
    };
    bk.mean_last(&g)
}

/// `(1−α) o_base + α o_lin`, plus `((1−α) o_base) ⊙ (α o_lin)` for cross-gating.
pub fn mag_mix<F: Element, B: Backend<F>>(
    bk: &mut B,
    o_base: &B::Value,
    o_lin: &B::Value,
    mag: &MagConfig,
) -> Result<B::Value> {
    check_alpha("mag_mix", mag.alpha)?;
    if bk.shape(o_base) != bk.shape(o_lin) {
        return dim_err("mag_mix", format!("{:?} vs {:?}", bk.shape(o_base), bk.shape(o_lin)));
    }
    let a = bk.scale(o_base, F::of(1.0 - mag.alpha))?;
    let b = bk.scale(o_lin, F::of(mag.alpha))?;
    let mixed = bk.add(&a, &b)?;
    match mag.mixing {
        Mixing::Gated => Ok(mixed),
        Mixing::CrossGate => {
            let cross = bk.mul(&a, &b)?;
            bk.add(&mixed, &cross)
        }
    }
}

/// Decoding cache for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LizaCache<F: Element = f32> {
    dims: Option<CacheDims>,
    position: usize,
    soft_k: Option<Tensor<F>>,
    soft_v: Option<Tensor<F>>,
    /// `[B, H, d_head, d_head]`.
    state: Option<Tensor<F>>,
    /// Last `≤ n_h − 1` normalized q, k, v rows, `[B, H, h, d_head]` each.
    recent: Option<[Tensor<F>; 3]>,
    sum_k: Option<Tensor<F>>,
    sum_v: Option<Tensor<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CacheDims {
    batch: usize,
    n_heads: usize,
    d_head: usize,
    n_h: usize,
}

/// Element counts held by a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheFootprint {
    pub softmax: usize,
    pub linear: usize,
}

impl<F: Element> Default for LizaCache<F> {
    fn default() -> Self {
        Self::uninitialized()
    }
}

impl<F: Element> LizaCache<F> {
    /// A cache that every decode call rejects until replaced by [`LizaCache::new`].
    pub fn uninitialized() -> Self {
        Self { dims: None, position: 0, soft_k: None, soft_v: None, state: None, recent: None, sum_k: None, sum_v: None }
    }

    pub fn new(cfg: &AttentionConfig, batch: usize) -> Result<Self> {
        cfg.validate()?;
        if batch == 0 {
            return contract_err("LizaCache", "batch must be >= 1");
        }
        Ok(Self {
            dims: Some(CacheDims { batch, n_heads: cfg.n_heads, d_head: cfg.d_head, n_h: cfg.n_h() }),
            ..Self::uninitialized()
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.dims.is_some()
    }

    /// Real tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Rows of normalized history currently held per stream.
    pub fn recent_len(&self) -> usize {
        self.recent.as_ref().map_or(0, |r| r[0].dim(-2))
    }

    pub fn footprint(&self) -> CacheFootprint {
        let n = |t: &Option<Tensor<F>>| t.as_ref().map_or(0, Tensor::numel);
        let recent = self.recent.as_ref().map_or(0, |r| r.iter().map(Tensor::numel).sum());
        CacheFootprint {
            softmax: n(&self.soft_k) + n(&self.soft_v),
            linear: n(&self.state) + recent + n(&self.sum_k) + n(&self.sum_v),
        }
    }

    fn check(&self, cfg: &AttentionConfig, batch: usize) -> Result<CacheDims> {
        let Some(d) = self.dims else {
            return contract_err("LizaCache", "cache is not initialized");
        };
        if d != (CacheDims { batch, n_heads: cfg.n_heads, d_head: cfg.d_head, n_h: cfg.n_h() }) {
            return contract_err(
                "LizaCache",
                format!("cache built for {d:?}, called with batch {batch} and {cfg:?}"),
            );
        }
        Ok(d)
    }
}

fn append_rows<F: Element>(prev: Option<Tensor<F>>, new: &Tensor<F>) -> Result<Tensor<F>> {
    match prev {
        Some(p) => Tensor::concat_rows(&[&p, new]),
        None => Ok(new.clone()),
    }
}

fn add_row_sums<F: Element>(prev: Option<Tensor<F>>, x: &Tensor<F>) -> Result<Tensor<F>> {
    // x: [B, H, T, d] → sums over T, [B, H, d]
    let s = x.shape();
    let (lead, t, d) = (s[0] * s[1], s[2], s[3]);
    let mut acc = prev.map_or_else(|| vec![F::zero(); lead * d], Tensor::into_data);
    for b in 0..lead {
        for r in 0..t {
            for j in 0..d {
                acc[b * d + j] += x.data()[(b * t + r) * d + j];
            }
        }
    }
    Tensor::new([s[0], s[1], d], acc)
}

/// Linear branch on per-head projections `[B, H, T, d_head]`.
pub fn linear_branch<F: Element, B: Backend<F>>(
    bk: &mut B,
    q: &B::Value,
    k: &B::Value,
    v: &B::Value,
    norm_gain: &B::Value,
    cfg: &AttentionConfig,
    cache: Option<&mut LizaCache<F>>,
) -> Result<B::Value> {
    let eps = F::of(DEFAULT_EPS);
    let qn = bk.silu_l2_normalize(q, eps)?;
    let kn = bk.silu_l2_normalize(k, eps)?;
    let vn = bk.silu_l2_normalize(v, eps)?;
    let shape = bk.shape(&kn);
    let (b, h, t, d) = (shape[0], shape[1], shape[2], shape[3]);
    let n_h = cfg.n_h();

    let (history, s0, before) = match &cache {
        Some(c) => (
            c.sum_k.as_ref().zip(c.sum_v.as_ref()).map(|(sum_k, sum_v)| PoolHistory { sum_k, sum_v, count: c.position }),
            c.state.clone(),
            c.position,
        ),
        None => (None, None, 0),
    };
    let beta = beta_gates(bk, &kn, &vn, cfg.beta_source, history)?;

    let expander = Arc::new(Expander::new(&cfg.expansion)?);
    let recent = cache.as_ref().and_then(|c| c.recent.clone());
    let ex = |bk: &mut B, x: &B::Value, i: usize| expand_on(bk, x, recent.as_ref().map(|r| &r[i]), &expander);
    let (qe, ke, ve) = (ex(bk, &qn, 0)?, ex(bk, &kn, 1)?, ex(bk, &vn, 2)?);
    let be = if n_h == 1 { beta } else { bk.gather_rows(&beta, &copy_index(t, n_h))? };

    let s0 = bk.constant(s0.unwrap_or_else(|| Tensor::zeros([b, h, d, d])));
    let scan = chunkwise_scan(
        bk,
        ChunkInputs { q: &qe, k: &ke, v: &ve, beta: &be },
        &s0,
        &cfg.chunk,
        before,
        TriangularSign::Plus,
    )?;
    let last: Vec<usize> = (0..t).map(|i| i * n_h + n_h - 1).collect();
    let o = if n_h == 1 { scan.outputs } else { bk.gather_rows(&scan.outputs, &last)? };
    let o = bk.rmsnorm(&o, norm_gain, eps)?;

    if let Some(c) = cache {
        c.state = Some(bk.value(&scan.state).clone());
        c.sum_k = Some(add_row_sums(c.sum_k.take(), bk.value(&kn))?);
        c.sum_v = Some(add_row_sums(c.sum_v.take(), bk.value(&vn))?);
        if n_h > 1 {
            let keep = |prev: Option<&Tensor<F>>, new: &Tensor<F>| -> Result<Tensor<F>> {
                let all = append_rows(prev.cloned(), new)?;
                let rows = all.dim(-2);
                all.slice_rows(rows.saturating_sub(n_h - 1), rows)
            };
            let prev = c.recent.take();
            let p = |i: usize| prev.as_ref().map(|r| &r[i]);
            c.recent = Some([keep(p(0), bk.value(&qn))?, keep(p(1), bk.value(&kn))?, keep(p(2), bk.value(&vn))?]);
        }
    }
    Ok(o)
}

/// Mixed per-head outputs `[B, H, T, d_head]` (everything except the output projection).
pub fn liza_heads<F: Element, B: Backend<F>>(
    bk: &mut B,
    params: &AttentionParams<B::Value>,
    x: &B::Value,
    cfg: &AttentionConfig,
    mut cache: Option<&mut LizaCache<F>>,
) -> Result<B::Value> {
    cfg.validate()?;
    let batch = bk.shape(x)[0];
    if let Some(c) = &cache {
        c.check(cfg, batch)?;
    }
    let (q, k, v) = project_qkv(bk, x, (&params.w_q, &params.w_k, &params.w_v), cfg)?;
    let alpha = cfg.mag.alpha;
    let cached = cache.is_some();

    let base = if alpha < 1.0 || cached {
        let (ka, va) = match cache.as_deref_mut() {
            Some(c) => {
                let kt = append_rows(c.soft_k.take(), bk.value(&k))?;
                let vt = append_rows(c.soft_v.take(), bk.value(&v))?;
                c.soft_k = Some(kt.clone());
                c.soft_v = Some(vt.clone());
                // earlier positions enter as constants; the new rows keep their graph
                let tp = kt.dim(-2) - bk.shape(&k)[2];
                if tp == 0 {
                    (k.clone(), v.clone())
                } else {
                    let kp = bk.constant(kt.slice_rows(0, tp)?);
                    let vp = bk.constant(vt.slice_rows(0, tp)?);
                    (bk.concat_rows(&[kp, k.clone()])?, bk.concat_rows(&[vp, v.clone()])?)
                }
            }
            None => (k.clone(), v.clone()),
        };
        Some(softmax_attention(bk, &q, &ka, &va)?)
    } else {
        None
    };

    let lin = if alpha > 0.0 || cached {
        let (ql, kl, vl) = match &params.linear {
            Some(l) => project_qkv(bk, x, (&l.w_q, &l.w_k, &l.w_v), cfg)?,
            None => (q.clone(), k.clone(), v.clone()),
        };
        Some(linear_branch(bk, &ql, &kl, &vl, &params.norm_gain, cfg, cache.as_deref_mut())?)
    } else {
        None
    };

    if let Some(c) = cache {
        c.position += bk.shape(x)[1];
    }
    match (base, lin) {
        (Some(b), Some(l)) => mag_mix(bk, &b, &l, &cfg.mag),
        (Some(b), None) => Ok(b),
        (None, Some(l)) => Ok(l),
        (None, None) => unreachable!("alpha is in [0, 1], so one branch always runs"),
    }
}

/// Full operator: `[B, T, d_model] → [B, T, d_model]`. With a cache, `x` continues the
/// cached sequence and the cache is advanced.
pub fn liza_forward<F: Element, B: Backend<F>>(
    bk: &mut B,
    params: &AttentionParams<B::Value>,
    x: &B::Value,
    cfg: &AttentionConfig,
    cache: Option<&mut LizaCache<F>>,
) -> Result<B::Value> {
    let heads = liza_heads(bk, params, x, cfg, cache)?;
    let merged = merge_heads(bk, &heads)?;
    bk.matmul(&merged, &params.w_o)
}

/// One-token incremental step, `x_t: [B, 1, d_model]`.
pub fn decode_step<F: Element>(
    params: &AttentionParams<Tensor<F>>,
    x_t: &Tensor<F>,
    cfg: &AttentionConfig,
    cache: &mut LizaCache<F>,
) -> Result<Tensor<F>> {
    if !cache.is_initialized() {
        return contract_err("decode_step", "cache is not initialized");
    }
    if x_t.rank() != 3 || x_t.shape()[1] != 1 {
        return dim_err("decode_step", format!("expected [B, 1, d_model], got {:?}", x_t.shape()));
    }
    liza_forward(&mut Eager, params, x_t, cfg, Some(cache))
}
