//! Pre-norm decoder-only transformer.

use modtune_autodiff::{lit, Float, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LoraConfig, ModelConfig, Projection};
use crate::ctx::Ctx;
use crate::error::{CoreError, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterIds {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: NormIds,
    pub ln2: NormIds,
    /// Indexed like [`Projection::ALL`].
    pub proj: [LinearIds; 6],
    pub adapters: [Option<AdapterIds>; 6],
}

#[derive(Debug, Clone)]
pub(crate) struct LoraState {
    pub cfg: LoraConfig,
}

pub(crate) fn proj_index(p: Projection) -> usize {
    Projection::ALL.iter().position(|&q| q == p).expect("listed projection")
}

/// Hidden states of one forward pass. `hidden[j]` is the output of layer `j`
/// (`hidden[0]` is the embedding sum); each has dims `[batch, seq, d]`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub batch: usize,
    pub seq: usize,
    hidden: Vec<Option<Var>>,
    computed: usize,
    keep_from: usize,
}

impl ForwardTrace {
    /// Number of layers run so far.
    pub fn computed(&self) -> usize {
        self.computed
    }

    pub fn hidden(&self, layer: usize) -> Result<Var> {
        if layer > self.computed {
            return Err(CoreError::State(format!("layer {layer} not computed (have {})", self.computed)));
        }
        self.hidden
            .get(layer)
            .copied()
            .flatten()
            .ok_or_else(|| CoreError::State(format!("hidden state {layer} was not retained")))
    }

    /// Indices of the hidden states currently held.
    pub fn retained(&self) -> Vec<usize> {
        (0..self.hidden.len()).filter(|&j| self.hidden[j].is_some()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T: Float> {
    cfg: ModelConfig,
    pub params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    pub(crate) blocks: Vec<Block>,
    head_weight: Option<ParamId>,
    head_bias: ParamId,
    final_norm: NormIds,
    pub(crate) lora: Option<LoraState>,
}

impl<T: Float> TransformerModel<T> {
    /// Builds and initializes the model deterministically from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let mut matrix = |params: &mut ParamStore<T>, name: String, dims: Vec<usize>| {
            params.add(name, Tensor::randn(dims, INIT_STD, &mut rng), ParamGroup::Base)
        };
        let tok_emb = matrix(&mut params, "embed.tok".into(), vec![v, d])?;
        let pos_emb = matrix(&mut params, "embed.pos".into(), vec![cfg.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for j in 0..cfg.n_layers {
            let l = j + 1;
            let ln1 = norm_params(&mut params, &format!("layers.{l}.ln1"), d)?;
            let mut proj = Vec::with_capacity(6);
            for p in Projection::ALL {
                let (din, dout) = p.shape(&cfg);
                let weight = matrix(&mut params, format!("layers.{l}.{}.weight", p.name()), vec![din, dout])?;
                let bias = params.add(format!("layers.{l}.{}.bias", p.name()), Tensor::zeros(vec![dout]), ParamGroup::Base)?;
                proj.push(LinearIds { weight, bias });
            }
            let ln2 = norm_params(&mut params, &format!("layers.{l}.ln2"), d)?;
            blocks.push(Block { ln1, ln2, proj: proj.try_into().expect("six projections"), adapters: [None; 6] });
        }
        let head_weight = if cfg.tie_embeddings { None } else { Some(matrix(&mut params, "lm_head.weight".into(), vec![d, v])?) };
        let head_bias = params.add("lm_head.bias", Tensor::zeros(vec![v]), ParamGroup::Base)?;
        let final_norm = norm_params(&mut params, "final_norm", d)?;
        Ok(TransformerModel { cfg, params, tok_emb, pos_emb, blocks, head_weight, head_bias, final_norm, lora: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref().map(|l| &l.cfg)
    }

    pub fn final_norm(&self) -> NormIds {
        self.final_norm
    }

    pub fn count_params(&self, trainable_only: bool, group: Option<ParamGroup>) -> usize {
        self.params.count(trainable_only, group)
    }

    /// Starts a forward pass: embeds `tokens` (`batch × seq`, row-major) and runs every layer.
    pub fn forward(&self, ctx: &mut Ctx<T>, tokens: &[usize], batch: usize, seq: usize) -> Result<ForwardTrace> {
        let mut trace = self.embed(ctx, tokens, batch, seq, 0)?;
        self.run_to(ctx, &mut trace, self.cfg.n_layers)?;
        Ok(trace)
    }

    /// Embeds `tokens` without running any layer. Hidden states below `keep_from` are
    /// dropped from the trace as soon as the next layer has consumed them.
    pub fn embed(&self, ctx: &mut Ctx<T>, tokens: &[usize], batch: usize, seq: usize, keep_from: usize) -> Result<ForwardTrace> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(CoreError::Validation(format!("{} tokens for batch {batch} x seq {seq}", tokens.len())));
        }
        if seq > self.cfg.max_seq_len {
            return Err(CoreError::Validation(format!("sequence length {seq} exceeds max_seq_len {}", self.cfg.max_seq_len)));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(CoreError::Validation(format!("token id {t} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let d = self.cfg.d_model;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = ctx.p(self.tok_emb);
        let pos = ctx.p(self.pos_emb);
        let te = ctx.g.embedding(tok, tokens)?;
        let pe = ctx.g.embedding(pos, &positions)?;
        let h0 = ctx.g.add(te, pe)?;
        let h0 = ctx.g.reshape(h0, &[batch, seq, d])?;
        let mut hidden = vec![None; self.cfg.n_layers + 1];
        hidden[0] = Some(h0);
        Ok(ForwardTrace { batch, seq, hidden, computed: 0, keep_from })
    }

    /// Embedding of a single token at position `pos`, `[1, d]`.
    pub(crate) fn embed_at(&self, ctx: &mut Ctx<T>, token: usize, pos: usize) -> Result<Var> {
        if token >= self.cfg.vocab_size || pos >= self.cfg.max_seq_len {
            return Err(CoreError::Validation(format!("token {token} at position {pos} is out of range")));
        }
        let tok = ctx.p(self.tok_emb);
        let posv = ctx.p(self.pos_emb);
        let te = ctx.g.embedding(tok, &[token])?;
        let pe = ctx.g.embedding(posv, &[pos])?;
        Ok(ctx.g.add(te, pe)?)
    }

    /// Runs layers until `layer` (1-based) has been computed.
    pub fn run_to(&self, ctx: &mut Ctx<T>, trace: &mut ForwardTrace, layer: usize) -> Result<()> {
        if layer > self.cfg.n_layers {
            return Err(CoreError::Validation(format!("layer {layer} beyond depth {}", self.cfg.n_layers)));
        }
        while trace.computed < layer {
            let j = trace.computed;
            let x = trace.hidden(j)?;
            let y = self.block(ctx, j, x, trace.batch, trace.seq)?;
            trace.hidden[j + 1] = Some(y);
            if j < trace.keep_from {
                trace.hidden[j] = None;
            }
            trace.computed += 1;
        }
        Ok(())
    }

    fn block(&self, ctx: &mut Ctx<T>, j: usize, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.head_dim());
        let b = &self.blocks[j];
        let a = self.norm(ctx, b.ln1, x)?;
        let split = |ctx: &mut Ctx<T>, t: Var| -> Result<Var> {
            let t = ctx.g.reshape(t, &[batch, seq, h, dh])?;
            Ok(ctx.g.permute(t, &[0, 2, 1, 3])?)
        };
        let q = self.linear(ctx, j, Projection::AttnQ, a)?;
        let k = self.linear(ctx, j, Projection::AttnK, a)?;
        let v = self.linear(ctx, j, Projection::AttnV, a)?;
        let (q, k, v) = (split(ctx, q)?, split(ctx, k)?, split(ctx, v)?);
        let scores = ctx.g.bmm_t(q, k)?;
        let scores = ctx.g.scale(scores, T::one() / lit::<T>(dh as f64).sqrt());
        let scores = ctx.g.causal_mask(scores)?;
        let probs = ctx.g.softmax(scores);
        let att = ctx.g.bmm(probs, v)?;
        let att = ctx.g.permute(att, &[0, 2, 1, 3])?;
        let att = ctx.g.reshape(att, &[batch, seq, self.cfg.d_model])?;
        let o = self.linear(ctx, j, Projection::AttnO, att)?;
        let x = ctx.g.add(x, o)?;
        self.mlp_residual(ctx, j, x)
    }

    /// `x + MLP(LN2(x))` for layer index `j`.
    pub(crate) fn mlp_residual(&self, ctx: &mut Ctx<T>, j: usize, x: Var) -> Result<Var> {
        let m = self.norm(ctx, self.blocks[j].ln2, x)?;
        let m = self.linear(ctx, j, Projection::MlpIn, m)?;
        let m = ctx.g.gelu(m);
        let m = self.linear(ctx, j, Projection::MlpOut, m)?;
        Ok(ctx.g.add(x, m)?)
    }

    pub(crate) fn norm(&self, ctx: &mut Ctx<T>, ids: NormIds, x: Var) -> Result<Var> {
        let g = ctx.p(ids.gamma);
        let b = ctx.p(ids.beta);
        Ok(ctx.g.layer_norm(x, g, b, self.cfg.norm_eps)?)
    }

    /// `x·W + b`, plus the scaled low-rank update when an adapter is attached.
    pub(crate) fn linear(&self, ctx: &mut Ctx<T>, j: usize, p: Projection, x: Var) -> Result<Var> {
        let idx = proj_index(p);
        let ids = self.blocks[j].proj[idx];
        let w = ctx.p(ids.weight);
        let b = ctx.p(ids.bias);
        let y = ctx.g.matmul(x, w)?;
        let mut y = ctx.g.add_bias(y, b)?;
        if let (Some(ad), Some(lora)) = (self.blocks[j].adapters[idx], &self.lora) {
            let a = ctx.p(ad.a);
            let bm = ctx.p(ad.b);
            let t = ctx.g.matmul_t(x, a)?;
            let u = ctx.g.matmul_t(t, bm)?;
            let u = ctx.g.scale(u, lit(lora.cfg.scale()));
            y = ctx.g.add(y, u)?;
        }
        Ok(y)
    }

    /// The unembedding map: hidden `[.., d]` to logits `[.., V]`.
    pub fn lm_head(&self, ctx: &mut Ctx<T>, h: Var) -> Result<Var> {
        let logits = match self.head_weight {
            Some(w) => {
                let w = ctx.p(w);
                ctx.g.matmul(h, w)?
            }
            None => {
                let e = ctx.p(self.tok_emb);
                ctx.g.matmul_t(h, e)?
            }
        };
        let b = ctx.p(self.head_bias);
        Ok(ctx.g.add_bias(logits, b)?)
    }

    /// `lm_head(final_norm(h))`.
    pub fn norm_and_head(&self, ctx: &mut Ctx<T>, norm: NormIds, h: Var) -> Result<Var> {
        let n = self.norm(ctx, norm, h)?;
        self.lm_head(ctx, n)
    }

    /// Logits of the unmodified model, from the last hidden state.
    pub fn final_logits(&self, ctx: &mut Ctx<T>, trace: &ForwardTrace) -> Result<Var> {
        let h = trace.hidden(self.cfg.n_layers)?;
        self.norm_and_head(ctx, self.final_norm, h)
    }

    /// The base weight and bias of a projection.
    pub fn projection(&self, layer: usize, p: Projection) -> LinearIds {
        self.blocks[layer].proj[proj_index(p)]
    }

    pub fn adapter(&self, layer: usize, p: Projection) -> Option<AdapterIds> {
        self.blocks[layer].adapters[proj_index(p)]
    }
}

fn norm_params<T: Float>(params: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<NormIds> {
    let gamma = params.add(format!("{prefix}.gamma"), Tensor::ones(vec![d]), ParamGroup::Base)?;
    let beta = params.add(format!("{prefix}.beta"), Tensor::zeros(vec![d]), ParamGroup::Base)?;
    Ok(NormIds { gamma, beta })
}
