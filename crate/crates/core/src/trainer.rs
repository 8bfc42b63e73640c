//! Presets, optimizer and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use modtune_autodiff::{lit, Float};
use serde::{Deserialize, Serialize};

use crate::ctx::Ctx;
use crate::data::{epoch_batches, Batch};
use crate::error::{CoreError, Result};
use crate::metrics::{route_stats, sparsity, MetricsRecord, RouteMetrics};
use crate::mod_head::ModHead;
use crate::model::TransformerModel;
use crate::objectives::{combined_loss, cross_entropy_value, distill_loss, distill_value, task_loss};
use crate::params::{ParamGroup, ParamStore};

/// Which parameter groups a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    LoraAll,
    LoraNotK,
    LoraAllPlusMod,
    LoraNotKPlusMod,
    ModOnly,
    FullBaseline,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::LoraAll,
        Preset::LoraNotK,
        Preset::LoraAllPlusMod,
        Preset::LoraNotKPlusMod,
        Preset::ModOnly,
        Preset::FullBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LoraAll => "lora_all",
            Preset::LoraNotK => "lora_not_k",
            Preset::LoraAllPlusMod => "lora_all_plus_mod",
            Preset::LoraNotKPlusMod => "lora_not_k_plus_mod",
            Preset::ModOnly => "mod_only",
            Preset::FullBaseline => "full_baseline",
        }
    }

    pub fn uses_head(self) -> bool {
        matches!(self, Preset::LoraAllPlusMod | Preset::LoraNotKPlusMod | Preset::ModOnly)
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, Preset::LoraAll | Preset::LoraNotK | Preset::LoraAllPlusMod | Preset::LoraNotKPlusMod)
    }

    /// Whether adapters skip the top `k` layers.
    pub fn excludes_top(self) -> bool {
        matches!(self, Preset::LoraNotK | Preset::LoraNotKPlusMod)
    }

    pub fn trains(self, g: ParamGroup) -> bool {
        match self {
            Preset::FullBaseline => true,
            Preset::LoraAll | Preset::LoraNotK => g == ParamGroup::Lora,
            Preset::LoraAllPlusMod | Preset::LoraNotKPlusMod => g != ParamGroup::Base,
            Preset::ModOnly => matches!(g, ParamGroup::ModRouting | ParamGroup::ModNorms),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| CoreError::Config(format!("unknown preset {s:?}")))
    }
}

/// Checks that the model carries the components `preset` expects and marks exactly
/// the preset's groups as trainable. `k` is the number of top layers a `*_not_k`
/// preset leaves without adapters.
pub fn apply_preset<T: Float>(model: &mut TransformerModel<T>, head: Option<&ModHead>, preset: Preset, k: usize) -> Result<()> {
    let bad = |m: String| Err(CoreError::Config(format!("preset {preset}: {m}")));
    if preset.uses_head() && head.is_none() {
        return bad("needs a routed head".into());
    }
    if !preset.uses_head() && preset != Preset::FullBaseline && head.is_some() {
        return bad("does not use a routed head".into());
    }
    if let Some(h) = head {
        if h.k() != k {
            return bad(format!("head has k = {} but the run uses k = {k}", h.k()));
        }
    }
    match (preset.uses_lora(), model.lora_config()) {
        (true, None) => return bad("needs adapters".into()),
        (false, Some(_)) if preset != Preset::FullBaseline => return bad("does not use adapters".into()),
        (true, Some(l)) => {
            let n = l.layer_mask.len();
            let expect: Vec<bool> = (0..n).map(|j| !preset.excludes_top() || j + k < n).collect();
            if l.layer_mask != expect {
                return bad(format!("adapter layer mask {:?} does not match {expect:?}", l.layer_mask));
            }
        }
        _ => {}
    }
    model.params.set_trainable_groups(|g| preset.trains(g));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,
    /// Evaluate on at most this many batches; `None` uses the whole split.
    pub eval_batches: Option<usize>,
    /// Exits inspected by the diagnostics when the model has no routed head.
    pub probe_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::LoraAllPlusMod,
            lr: 3e-4,
            batch_size: 16,
            epochs: 2,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            eval_every: 100,
            eval_batches: None,
            probe_k: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("adam_eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if self.probe_k == 0 {
            return bad("probe_k must be positive".into());
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    step: i32,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        AdamW {
            lr: lit(cfg.lr),
            beta1: lit(cfg.beta1),
            beta2: lit(cfg.beta2),
            eps: lit(cfg.adam_eps),
            weight_decay: lit(cfg.weight_decay),
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// One update. Frozen parameters and parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (id, p) in store.iter_mut() {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let decay = self.weight_decay > T::zero();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                let old = *w;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                if decay {
                    *w -= self.lr * self.weight_decay * old;
                }
            }
        }
    }
}

/// Global L2 norm of the present gradients.
pub fn grad_norm<T: Float>(grads: &[Option<Vec<T>>]) -> f64 {
    let mut total = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g {
            let x = x.as_f64();
            total += x * x;
        }
    }
    total.sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grads<T: Float>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s: T = lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Loss values and routing diagnostics of one batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub task: f64,
    pub distill: f64,
    pub total: f64,
    /// Cross-entropy of each exit alone.
    pub route_task: Vec<f64>,
    /// Routing weights of each route over the unmasked positions; `None` without a head.
    pub route_weights: Option<Vec<Vec<f64>>>,
    pub active: usize,
}

/// Builds the training loss for `batch` on `ctx` and evaluates the diagnostics.
///
/// With a head the loss is the routed objective. Without one it is the plain
/// next-token loss, and the diagnostics read the top `probe_k` layers through the
/// final norm.
pub fn batch_loss<T: Float>(
    model: &TransformerModel<T>,
    head: Option<&ModHead>,
    ctx: &mut Ctx<T>,
    batch: &Batch,
    probe_k: usize,
) -> Result<(modtune_autodiff::Var, BatchStats)> {
    let trace = model.forward(ctx, &batch.inputs, batch.batch, batch.seq)?;
    let (total, task, distill, route_logits, route_weights) = match head {
        Some(h) => {
            let out = h.forward(model, ctx, &trace)?;
            let task = task_loss(&mut ctx.g, out.ensemble, &batch.targets, &batch.mask)?;
            let lambda = h.config().lambda;
            // Non-finite logits skip the distillation graph; the NaN still reaches the totals.
            let finite = out.route_logits.iter().all(|&l| ctx.g.value(l).data().iter().all(|x| x.is_finite()));
            let distill = if lambda != 0.0 && finite {
                distill_loss(&mut ctx.g, &out.route_logits, &batch.mask, h.config().detach_teacher)?
            } else {
                None
            };
            let total = combined_loss(&mut ctx.g, task, distill, lambda)?;
            let w = ctx.g.value(out.weights);
            let weights: Vec<Vec<f64>> =
                (0..h.k()).map(|i| (0..w.rows()).filter(|&r| batch.mask[r]).map(|r| w.row(r)[i].as_f64()).collect()).collect();
            (total, task, distill, out.route_logits, Some(weights))
        }
        None => {
            let n = model.n_layers();
            let probe = probe_k.min(n);
            let fin = model.final_logits(ctx, &trace)?;
            let mut logits = Vec::with_capacity(probe);
            for layer in n + 1 - probe..n {
                let h = trace.hidden(layer)?;
                logits.push(model.norm_and_head(ctx, model.final_norm(), h)?);
            }
            logits.push(fin);
            let task = task_loss(&mut ctx.g, fin, &batch.targets, &batch.mask)?;
            (task, task, None, logits, None)
        }
    };
    let route_values: Vec<&_> = route_logits.iter().map(|&l| ctx.g.value(l)).collect();
    let route_task = route_values.iter().map(|l| cross_entropy_value(*l, &batch.targets, &batch.mask)).collect();
    let distill_v = match distill {
        Some(d) => ctx.g.value(d).item().as_f64(),
        None if route_values.iter().all(|l| l.data().iter().all(|x| x.is_finite())) => distill_value(&route_values, &batch.mask),
        None => f64::NAN,
    };
    let stats = BatchStats {
        task: ctx.g.value(task).item().as_f64(),
        distill: distill_v,
        total: ctx.g.value(total).item().as_f64(),
        route_task,
        route_weights,
        active: batch.active(),
    };
    Ok((total, stats))
}

/// Token-weighted running aggregate of [`BatchStats`].
#[derive(Debug, Clone, Default)]
struct Window {
    task: f64,
    distill: f64,
    total: f64,
    route_task: Vec<f64>,
    weights: Option<Vec<Vec<f64>>>,
    tokens: usize,
}

impl Window {
    fn add(&mut self, s: &BatchStats) {
        let n = s.active as f64;
        self.task += s.task * n;
        self.distill += s.distill * n;
        self.total += s.total * n;
        if self.route_task.is_empty() {
            self.route_task = vec![0.0; s.route_task.len()];
        }
        for (a, b) in self.route_task.iter_mut().zip(&s.route_task) {
            *a += b * n;
        }
        if let Some(w) = &s.route_weights {
            let acc = self.weights.get_or_insert_with(|| vec![Vec::new(); w.len()]);
            for (a, b) in acc.iter_mut().zip(w) {
                a.extend_from_slice(b);
            }
        }
        self.tokens += s.active;
    }

    fn record(&self, step: usize, split: &str, eps: f64, tokens_seen: u64) -> MetricsRecord {
        let n = self.tokens.max(1) as f64;
        let routes = self
            .route_task
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = self.weights.as_ref().map(|w| &w[i]);
                let stats = w.map(|w| route_stats(w));
                RouteMetrics {
                    loss: l / n,
                    sparsity: w.map(|w| sparsity(w, eps)),
                    mean: stats.map(|s| s.0),
                    var: stats.map(|s| s.1),
                }
            })
            .collect();
        MetricsRecord {
            step,
            split: split.into(),
            loss_task: self.task / n,
            loss_distill: self.distill / n,
            loss_total: self.total / n,
            routes,
            tokens_seen,
        }
    }
}

fn sparsity_eps(head: Option<&ModHead>) -> f64 {
    head.map_or(1e-5, |h| h.config().epsilon_sparsity)
}

/// Scores `seqs` without updating anything.
pub fn evaluate<T: Float>(
    model: &TransformerModel<T>,
    head: Option<&ModHead>,
    seqs: &[Vec<usize>],
    cfg: &TrainConfig,
    step: usize,
    tokens_seen: u64,
) -> Result<MetricsRecord> {
    if seqs.is_empty() {
        return Err(CoreError::Validation("evaluation split is empty".into()));
    }
    let mut window = Window::default();
    let limit = cfg.eval_batches.unwrap_or(usize::MAX);
    for chunk in seqs.chunks(cfg.batch_size).take(limit) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = Batch::from_sequences(&refs)?;
        let mut ctx = Ctx::new(&model.params, false);
        let (_, stats) = batch_loss(model, head, &mut ctx, &batch, cfg.probe_k)?;
        window.add(&stats);
    }
    Ok(window.record(step, "eval", sparsity_eps(head), tokens_seen))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub tokens_seen: u64,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
    pub wall_clock_secs: f64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }

    pub fn evals(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.split == "eval")
    }
}

/// Trains the parameters selected by `cfg.preset` on `train`, evaluating on `eval`
/// every `cfg.eval_every` steps (0 disables evaluation). Every record is also passed
/// to `sink` as soon as it exists.
pub fn train<T: Float>(
    model: &mut TransformerModel<T>,
    head: Option<&ModHead>,
    train: &[Vec<usize>],
    eval: &[Vec<usize>],
    cfg: &TrainConfig,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Validation("training split is empty".into()));
    }
    let k = head.map_or(cfg.probe_k, ModHead::k);
    apply_preset(model, head, cfg.preset, k)?;
    if model.count_params(true, None) == 0 {
        return Err(CoreError::Config(format!("preset {} leaves nothing to train", cfg.preset)));
    }
    let started = Instant::now();
    let eps = sparsity_eps(head);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));
    let mut opt = AdamW::new(cfg, model.params.len());
    let mut out = TrainOutcome { steps: 0, tokens_seen: 0, step_losses: Vec::new(), records: Vec::new(), wall_clock_secs: 0.0 };
    let mut emit = |out: &mut TrainOutcome, r: MetricsRecord| -> Result<()> {
        sink(&r)?;
        out.records.push(r);
        Ok(())
    };
    let evaluating = cfg.eval_every > 0 && !eval.is_empty();
    if evaluating {
        let r = evaluate(model, head, eval, cfg, 0, 0)?;
        emit(&mut out, r)?;
    }
    let mut window = Window::default();
    'epochs: for epoch in 0..cfg.epochs {
        for idx in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if out.steps >= total_steps {
                break 'epochs;
            }
            let refs: Vec<&[usize]> = idx.iter().map(|&i| train[i].as_slice()).collect();
            let batch = Batch::from_sequences(&refs)?;
            let (mut grads, stats) = {
                let mut ctx = Ctx::new(&model.params, true);
                let (loss, stats) = batch_loss(model, head, &mut ctx, &batch, cfg.probe_k)?;
                if !stats.total.is_finite() {
                    let mut w = Window::default();
                    w.add(&stats);
                    let r = w.record(out.steps, "abort", eps, out.tokens_seen);
                    emit(&mut out, r)?;
                    return Err(CoreError::NonFinite { what: "loss", step: out.steps });
                }
                ctx.g.backward(loss)?;
                (ctx.param_grads(), stats)
            };
            let norm = clip_grads(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(CoreError::NonFinite { what: "gradient norm", step: out.steps });
            }
            opt.step(&mut model.params, &grads);
            out.steps += 1;
            out.tokens_seen += stats.active as u64;
            out.step_losses.push(stats.total);
            window.add(&stats);
            let last = out.steps == total_steps;
            if evaluating && (out.steps % cfg.eval_every == 0 || last) {
                let r = window.record(out.steps, "train", eps, out.tokens_seen);
                emit(&mut out, r)?;
                window = Window::default();
                let r = evaluate(model, head, eval, cfg, out.steps, out.tokens_seen)?;
                emit(&mut out, r)?;
            }
        }
    }
    out.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(out)
}

/// Scalar parameter counts per group, as `(total, trainable)`.
pub fn param_breakdown<T: Float>(model: &TransformerModel<T>) -> BTreeMap<String, (usize, usize)> {
    ParamGroup::ALL
        .into_iter()
        .map(|g| (g.name().to_string(), (model.count_params(false, Some(g)), model.count_params(true, Some(g)))))
        .collect()
}
