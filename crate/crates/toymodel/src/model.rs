//! Decoder-only model: token + learned position embeddings, pre-norm blocks of
//! attention and a GELU MLP, a final RMSNorm and an output head.

use magattn::attention::{liza_forward, AttentionConfig, AttentionParams};
use magattn::numerics::norm::DEFAULT_EPS;
use magattn::numerics::{Backend, Eager, Unary};
use magattn::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ToyError};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    /// Reuse the token embedding as the output head.
    pub tie_embeddings: bool,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: `d_model = 64`, two heads, two layers, `T ≤ 64`.
    pub fn small(vocab_size: usize) -> Self {
        let attention = AttentionConfig::new(64, 2).expect("64 splits over 2 heads");
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            mlp_hidden: 256,
            tie_embeddings: false,
            attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ToyError::Config(format!("{name} must be positive")));
        }
        if self.attention.d_model != self.d_model || self.attention.n_heads != self.n_heads {
            return Err(ToyError::Config(format!(
                "attention is {}x{} heads but the model is {}x{} heads",
                self.attention.d_model, self.attention.n_heads, self.d_model, self.n_heads
            )));
        }
        self.attention.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: T,
    pub attn: AttentionParams<T>,
    pub mlp_norm: T,
    /// `d_model × mlp_hidden`
    pub mlp_in: T,
    /// `mlp_hidden × d_model`
    pub mlp_out: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `vocab × d_model`
    pub tok_emb: T,
    /// `max_seq_len × d_model`
    pub pos_emb: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: T,
    /// `d_model × vocab`; absent when tied to `tok_emb`.
    pub head: Option<T>,
}

impl<T> ModelParams<T> {
    /// Parameters with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &b.attn_norm));
            for (n, t) in b.attn.named() {
                out.push((format!("blocks.{i}.attn.{n}"), t));
            }
            out.push((format!("blocks.{i}.mlp_norm"), &b.mlp_norm));
            out.push((format!("blocks.{i}.mlp_in"), &b.mlp_in));
            out.push((format!("blocks.{i}.mlp_out"), &b.mlp_out));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Maps every parameter; `f` sees the same names as [`ModelParams::named`].
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let tok_emb = f("tok_emb", &self.tok_emb)?;
        let pos_emb = f("pos_emb", &self.pos_emb)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            blocks.push(BlockParams {
                attn_norm: f(&format!("blocks.{i}.attn_norm"), &b.attn_norm)?,
                attn: b.attn.try_map(|n, t| f(&format!("blocks.{i}.attn.{n}"), t))?,
                mlp_norm: f(&format!("blocks.{i}.mlp_norm"), &b.mlp_norm)?,
                mlp_in: f(&format!("blocks.{i}.mlp_in"), &b.mlp_in)?,
                mlp_out: f(&format!("blocks.{i}.mlp_out"), &b.mlp_out)?,
            });
        }
        let final_norm = f("final_norm", &self.final_norm)?;
        let head = match &self.head {
            Some(h) => Some(f("head", h)?),
            None => None,
        };
        Ok(ModelParams { tok_emb, pos_emb, blocks, final_norm, head })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t))).unwrap_or_else(|e| match e {})
    }
}

/// Scale of the output head relative to `1/√d_model`.
pub const HEAD_INIT_SCALE: f64 = 0.1;

fn uniform<F: Element>(rng: &mut ChaCha8Rng, shape: [usize; 2], a: f64) -> Tensor<F> {
    Tensor::<f64>::rand_uniform(shape, -a, a, rng).cast()
}

/// A model: configuration plus eager parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Element = f32> {
    pub cfg: ModelConfig,
    pub params: ModelParams<Tensor<F>>,
}

/// Builds a model with every parameter drawn from a generator seeded by `seed`.
pub fn build_model<F: Element>(cfg: &ModelConfig, seed: u64) -> Result<Model<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let tok_emb = uniform(&mut rng, [cfg.vocab_size, d], 1.0);
    let pos_emb = uniform(&mut rng, [cfg.max_seq_len, d], 0.5);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let layer_seed: u64 = rng.gen();
        blocks.push(BlockParams {
            attn_norm: Tensor::full([d], F::one()),
            attn: AttentionParams::init(&cfg.attention, &mut ChaCha8Rng::seed_from_u64(layer_seed))?,
            mlp_norm: Tensor::full([d], F::one()),
            mlp_in: uniform(&mut rng, [d, cfg.mlp_hidden], fan(d)),
            mlp_out: uniform(&mut rng, [cfg.mlp_hidden, d], fan(cfg.mlp_hidden)),
        });
    }
    let head = (!cfg.tie_embeddings).then(|| uniform(&mut rng, [d, cfg.vocab_size], HEAD_INIT_SCALE * fan(d)));
    Ok(Model { cfg: cfg.clone(), params: ModelParams { tok_emb, pos_emb, blocks, final_norm: Tensor::full([d], F::one()), head } })
}

impl<F: Element> Model<F> {
    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Eager logits `[B, T, vocab]` for `tokens` laid out `[B, T]`.
    pub fn logits(&self, tokens: &[usize], batch: usize, alpha: f64) -> Result<Tensor<F>> {
        forward(&mut Eager, &self.params, &self.cfg, tokens, batch, alpha)
    }
}

/// Logits `[B, T, vocab]`; `alpha` overrides the configured mixing weight.
pub fn forward<F: Element, B: Backend<F>>(
    bk: &mut B,
    params: &ModelParams<B::Value>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    alpha: f64,
) -> Result<B::Value> {
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(ToyError::Config(format!("{} tokens do not split into {batch} rows", tokens.len())));
    }
    let t = tokens.len() / batch;
    if t == 0 || t > cfg.max_seq_len {
        return Err(ToyError::Config(format!("sequence length {t} outside 1..={}", cfg.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ToyError::Config(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let mut attn = cfg.attention.clone();
    attn.mag.alpha = alpha;
    let eps = F::of(DEFAULT_EPS);

    let tok = bk.embedding(&params.tok_emb, tokens, &[batch, t])?;
    let pos = bk.slice_rows(&params.pos_emb, 0, t)?;
    let mut x = bk.add(&tok, &pos)?;
    for b in &params.blocks {
        let h = bk.rmsnorm(&x, &b.attn_norm, eps)?;
        let a = liza_forward(bk, &b.attn, &h, &attn, None)?;
        x = bk.add(&x, &a)?;
        let h = bk.rmsnorm(&x, &b.mlp_norm, eps)?;
        let h = bk.matmul(&h, &b.mlp_in)?;
        let h = bk.unary(&h, Unary::Gelu)?;
        let h = bk.matmul(&h, &b.mlp_out)?;
        x = bk.add(&x, &h)?;
    }
    let x = bk.rmsnorm(&x, &params.final_norm, eps)?;
    Ok(match &params.head {
        Some(h) => bk.matmul(&x, h)?,
        None => bk.matmul_t(&x, false, &params.tok_emb, true)?,
    })
}
