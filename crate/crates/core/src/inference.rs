//! Token generation, optionally skipping the layers above the deepest selected exit.

use std::time::Instant;

use modtune_autodiff::{argmax, kernels, Float, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Projection;
use crate::ctx::Ctx;
use crate::error::{CoreError, Result};
use crate::mod_head::{ensemble, route_tiebreak, ModHead};
use crate::model::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

/// How earlier positions are handled while decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Recompute every position at every step. Exact.
    None,
    /// Keep per-layer keys and values. When layers are skipped, their cache entries are
    /// filled from the deepest computed hidden state, so later tokens may differ from
    /// full computation.
    Propagate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub decoding: Decoding,
    pub max_new_tokens: usize,
    pub early_exit: bool,
    pub cache_mode: CacheMode,
    pub stop_at_eos: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            decoding: Decoding::Greedy,
            max_new_tokens: 32,
            early_exit: false,
            cache_mode: CacheMode::None,
            stop_at_eos: true,
            seed: 0,
        }
    }
}

/// Compute spent on one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCost {
    pub layers_computed: usize,
    /// Index of the deepest selected exit, when a routed head is present.
    pub deepest_route: Option<usize>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub n_layers: usize,
    pub tokens: Vec<TokenCost>,
}

impl ComputeLedger {
    pub fn new(n_layers: usize) -> Self {
        ComputeLedger { n_layers, tokens: Vec::new() }
    }

    pub fn layer_forwards(&self) -> usize {
        self.tokens.iter().map(|t| t.layers_computed).sum()
    }

    /// Layer forwards a model without skipping spends on the same tokens.
    pub fn baseline_layer_forwards(&self) -> usize {
        self.n_layers * self.tokens.len()
    }

    /// `n·T / Σ layers_computed`.
    pub fn layer_ratio(&self) -> f64 {
        self.baseline_layer_forwards() as f64 / self.layer_forwards() as f64
    }

    pub fn wall_secs(&self) -> f64 {
        self.tokens.iter().map(|t| t.wall_secs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Newly generated tokens, excluding the prompt.
    pub tokens: Vec<usize>,
    pub ledger: ComputeLedger,
}

/// How far an approximate generation agrees with exact computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub compared: usize,
    /// Leading tokens that agree.
    pub matching_prefix: usize,
    /// Fraction of positions that agree.
    pub agreement: f64,
}

impl Divergence {
    pub fn between(exact: &[usize], approx: &[usize]) -> Self {
        let compared = exact.len().max(approx.len());
        let matching_prefix = exact.iter().zip(approx).take_while(|(a, b)| a == b).count();
        let same = exact.iter().zip(approx).filter(|(a, b)| a == b).count();
        let agreement = if compared == 0 { 1.0 } else { same as f64 / compared as f64 };
        Divergence { compared, matching_prefix, agreement }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelerationReport {
    pub tokens: usize,
    pub n_layers: usize,
    pub layer_forwards: usize,
    pub baseline_layer_forwards: usize,
    pub layer_forward_ratio: f64,
    pub wall_clock_secs: f64,
    pub baseline_wall_clock_secs: f64,
    pub wall_clock_ratio: f64,
    pub cache_mode: CacheMode,
    pub divergence: Option<Divergence>,
}

/// Compares a skipping run against a full-compute run of the same prompts.
pub fn acceleration_report(
    ledger: &ComputeLedger,
    baseline: &ComputeLedger,
    cache_mode: CacheMode,
    divergence: Option<Divergence>,
) -> AccelerationReport {
    let (wall, base_wall) = (ledger.wall_secs(), baseline.wall_secs());
    AccelerationReport {
        tokens: ledger.tokens.len(),
        n_layers: ledger.n_layers,
        layer_forwards: ledger.layer_forwards(),
        baseline_layer_forwards: ledger.baseline_layer_forwards(),
        layer_forward_ratio: ledger.layer_ratio(),
        wall_clock_secs: wall,
        baseline_wall_clock_secs: base_wall,
        wall_clock_ratio: if wall > 0.0 { base_wall / wall } else { f64::NAN },
        cache_mode,
        divergence,
    }
}

/// Generates from `prompt`. With a head the next-token logits are the routed mixture,
/// otherwise the final-layer logits.
pub fn generate<T: Float>(
    model: &TransformerModel<T>,
    head: Option<&ModHead>,
    prompt: &[usize],
    cfg: &GenConfig,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(CoreError::Validation("prompt is empty".into()));
    }
    if cfg.early_exit && head.is_none() {
        return Err(CoreError::Config("early exit needs a routed head".into()));
    }
    if let Decoding::Sample { temperature } = cfg.decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CoreError::Config(format!("temperature must be positive, got {temperature}")));
        }
    }
    let max_len = model.config().max_seq_len;
    if prompt.len() > max_len {
        return Err(CoreError::Validation(format!("prompt of {} tokens exceeds max_seq_len {max_len}", prompt.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = prompt.to_vec();
    let mut ledger = ComputeLedger::new(model.n_layers());
    let mut cache = match cfg.cache_mode {
        CacheMode::None => None,
        CacheMode::Propagate => {
            let mut c = KvCache::new(model);
            for (pos, &t) in prompt[..prompt.len() - 1].iter().enumerate() {
                c.step(model, head, t, pos, false)?;
            }
            Some(c)
        }
    };
    let mut generated = Vec::new();
    while generated.len() < cfg.max_new_tokens && tokens.len() < max_len {
        let started = Instant::now();
        let (logits, cost) = match cache.as_mut() {
            None => next_logits(model, head, &tokens, cfg.early_exit)?,
            Some(c) => c.step(model, head, *tokens.last().expect("non-empty"), tokens.len() - 1, cfg.early_exit)?,
        };
        let next = pick(&logits, cfg.decoding, &mut rng)?;
        ledger.tokens.push(TokenCost { wall_secs: started.elapsed().as_secs_f64(), ..cost });
        tokens.push(next);
        generated.push(next);
        if cfg.stop_at_eos && next == crate::data::EOS {
            break;
        }
    }
    Ok(Generation { tokens: generated, ledger })
}

/// [`generate`] with layer skipping switched on.
pub fn generate_early_exit<T: Float>(
    model: &TransformerModel<T>,
    head: &ModHead,
    prompt: &[usize],
    cfg: &GenConfig,
) -> Result<Generation> {
    let cfg = GenConfig { early_exit: true, ..cfg.clone() };
    generate(model, Some(head), prompt, &cfg)
}

fn pick<T: Float>(logits: &[T], decoding: Decoding, rng: &mut ChaCha8Rng) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite { what: "logits", step: 0 });
    }
    match decoding {
        Decoding::Greedy => Ok(argmax(logits)),
        Decoding::Sample { temperature } => {
            let mut p: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
            kernels::softmax_row(&mut p);
            let dist = WeightedIndex::new(&p).map_err(|e| CoreError::Validation(format!("sampling: {e}")))?;
            Ok(dist.sample(rng))
        }
    }
}

/// The value of row `r` of `v` as a fresh `[1, d]` constant.
fn row_constant<T: Float>(ctx: &mut Ctx<T>, v: Var, r: usize) -> Result<Var> {
    let t = ctx.g.value(v);
    let row = Tensor::new(vec![1, t.last_dim()], t.row(r).to_vec())?;
    Ok(ctx.g.constant(row))
}

/// Routing decision for one position: the mixture weights `[1, k]` and which exits
/// are kept.
fn route<T: Float>(head: &ModHead, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Vec<bool>)> {
    let weights = head.weights(ctx, x)?;
    let selected = match head.config().top_k {
        Some(t) if t < head.k() => {
            let scores = head.scores(ctx, x)?;
            route_tiebreak(ctx.g.value(scores).data(), t)
        }
        _ => vec![true; head.k()],
    };
    Ok((weights, selected))
}

/// Next-token logits for the last position of `tokens`, recomputing the whole prefix.
fn next_logits<T: Float>(
    model: &TransformerModel<T>,
    head: Option<&ModHead>,
    tokens: &[usize],
    early_exit: bool,
) -> Result<(Vec<T>, TokenCost)> {
    let n = model.n_layers();
    let s = tokens.len();
    let mut ctx = Ctx::new(&model.params, false);
    let Some(head) = head else {
        let trace = model.forward(&mut ctx, tokens, 1, s)?;
        let h = row_constant(&mut ctx, trace.hidden(n)?, s - 1)?;
        let logits = model.norm_and_head(&mut ctx, model.final_norm(), h)?;
        let cost = TokenCost { layers_computed: n, deepest_route: None, wall_secs: 0.0 };
        return Ok((ctx.g.value(logits).data().to_vec(), cost));
    };
    let k = head.k();
    let base = head.routing_input_layer();
    let mut trace = model.embed(&mut ctx, tokens, 1, s, base)?;
    model.run_to(&mut ctx, &mut trace, base)?;
    let x = row_constant(&mut ctx, trace.hidden(base)?, s - 1)?;
    let (weights, selected) = route(head, &mut ctx, x)?;
    let deepest = selected.iter().rposition(|&b| b).expect("at least one route");
    let top = if early_exit { base + deepest + 1 } else { n };
    model.run_to(&mut ctx, &mut trace, top)?;
    let mut logits = vec![None; k];
    for (i, slot) in logits.iter_mut().enumerate() {
        if early_exit && !selected[i] {
            continue;
        }
        let h = row_constant(&mut ctx, trace.hidden(head.route_layer(i))?, s - 1)?;
        *slot = Some(model.norm_and_head(&mut ctx, head.route_norm(model, i), h)?);
    }
    let mix = ensemble(&mut ctx.g, &logits, weights)?;
    let cost = TokenCost { layers_computed: top, deepest_route: Some(deepest), wall_secs: 0.0 };
    Ok((ctx.g.value(mix).data().to_vec(), cost))
}

/// Per-layer key and value rows for the positions decoded so far.
struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Float> KvCache<T> {
    fn new(model: &TransformerModel<T>) -> Self {
        let n = model.n_layers();
        KvCache { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds `token` at position `pos` and returns the logits predicting the next one.
    fn step(
        &mut self,
        model: &TransformerModel<T>,
        head: Option<&ModHead>,
        token: usize,
        pos: usize,
        early_exit: bool,
    ) -> Result<(Vec<T>, TokenCost)> {
        if pos != self.len {
            return Err(CoreError::State(format!("cache holds {} positions, got position {pos}", self.len)));
        }
        let n = model.n_layers();
        let mut ctx = Ctx::new(&model.params, false);
        let mut h = model.embed_at(&mut ctx, token, pos)?;
        let mut hidden = vec![h];
        let (mut top, mut chosen) = (n, None);
        if let Some(head) = head {
            let base = head.routing_input_layer();
            for j in 0..base {
                h = self.layer(model, &mut ctx, j, h)?;
                hidden.push(h);
            }
            let (weights, selected) = route(head, &mut ctx, h)?;
            let deepest = selected.iter().rposition(|&b| b).expect("at least one route");
            top = if early_exit { base + deepest + 1 } else { n };
            for j in base..top {
                h = self.layer(model, &mut ctx, j, h)?;
                hidden.push(h);
            }
            for j in top..n {
                self.fill(model, &mut ctx, j, h)?;
            }
            let mut logits = vec![None; head.k()];
            for (i, slot) in logits.iter_mut().enumerate() {
                if head.route_layer(i) <= top && (selected[i] || !early_exit) {
                    *slot = Some(model.norm_and_head(&mut ctx, head.route_norm(model, i), hidden[head.route_layer(i)])?);
                }
            }
            chosen = Some((ensemble(&mut ctx.g, &logits, weights)?, deepest));
        } else {
            for j in 0..n {
                h = self.layer(model, &mut ctx, j, h)?;
            }
        }
        self.len += 1;
        let (logits, deepest) = match chosen {
            Some((mix, deepest)) => (mix, Some(deepest)),
            None => (model.norm_and_head(&mut ctx, model.final_norm(), h)?, None),
        };
        let cost = TokenCost { layers_computed: top, deepest_route: deepest, wall_secs: 0.0 };
        Ok((ctx.g.value(logits).data().to_vec(), cost))
    }

    /// Appends this position's key and value for layer `j`, computed from `h`.
    fn push_kv(&mut self, model: &TransformerModel<T>, ctx: &mut Ctx<T>, j: usize, h: Var) -> Result<Var> {
        let a = model.norm(ctx, model.blocks[j].ln1, h)?;
        let k = model.linear(ctx, j, Projection::AttnK, a)?;
        let v = model.linear(ctx, j, Projection::AttnV, a)?;
        self.keys[j].extend_from_slice(ctx.g.value(k).data());
        self.values[j].extend_from_slice(ctx.g.value(v).data());
        Ok(a)
    }

    fn fill(&mut self, model: &TransformerModel<T>, ctx: &mut Ctx<T>, j: usize, h: Var) -> Result<()> {
        self.push_kv(model, ctx, j, h).map(|_| ())
    }

    /// One block for a single position attending over the cache.
    fn layer(&mut self, model: &TransformerModel<T>, ctx: &mut Ctx<T>, j: usize, x: Var) -> Result<Var> {
        let cfg = model.config();
        let (heads, dh, d) = (cfg.n_heads, cfg.head_dim(), cfg.d_model);
        let a = self.push_kv(model, ctx, j, x)?;
        let q = model.linear(ctx, j, Projection::AttnQ, a)?;
        let q = ctx.g.reshape(q, &[heads, 1, dh])?;
        let p = self.keys[j].len() / d;
        let by_head = |rows: &[T]| -> Result<Tensor<T>> {
            let t = Tensor::new(vec![p, heads, dh], rows.to_vec())?;
            let mut out = vec![T::zero(); rows.len()];
            for pos in 0..p {
                for hh in 0..heads {
                    let src = (pos * heads + hh) * dh;
                    let dst = (hh * p + pos) * dh;
                    out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                }
            }
            Ok(Tensor::new(vec![heads, p, dh], out)?)
        };
        let keys = ctx.g.constant(by_head(&self.keys[j])?);
        let values = ctx.g.constant(by_head(&self.values[j])?);
        let scores = ctx.g.bmm_t(q, keys)?;
        let scores = ctx.g.scale(scores, T::one() / T::from_f64(dh as f64).sqrt());
        let probs = ctx.g.softmax(scores);
        let att = ctx.g.bmm(probs, values)?;
        let att = ctx.g.reshape(att, &[1, d])?;
        let o = model.linear(ctx, j, Projection::AttnO, att)?;
        let x = ctx.g.add(x, o)?;
        model.mlp_residual(ctx, j, x)
    }
}

/// Fraction of synthetic examples whose greedy answer matches exactly, including the
/// terminating [`EOS`](crate::data::EOS). At most `limit` examples are scored.
pub fn answer_accuracy<T: Float>(
    model: &TransformerModel<T>,
    head: Option<&ModHead>,
    seqs: &[Vec<usize>],
    limit: usize,
) -> Result<f64> {
    let mut scored = 0usize;
    let mut correct = 0usize;
    for seq in seqs.iter().take(limit) {
        let Some((prompt, answer)) = crate::data::prompt_and_answer(seq) else {
            return Err(CoreError::Validation("sequence has no answer separator".into()));
        };
        let cfg = GenConfig { max_new_tokens: answer.len() + 1, ..GenConfig::default() };
        let out = generate(model, head, &prompt, &cfg)?;
        let mut expect = answer;
        expect.push(crate::data::EOS);
        scored += 1;
        correct += usize::from(out.tokens == expect);
    }
    if scored == 0 {
        return Err(CoreError::Validation("no examples to score".into()));
    }
    Ok(correct as f64 / scored as f64)
}
