//! Routed multi-exit head: a per-token mixture over the logits of the top `k` layers.

use modtune_autodiff::{top_k_indices, Float, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModConfig;
use crate::ctx::Ctx;
use crate::error::{CoreError, Result};
use crate::model::{ForwardTrace, NormIds, TransformerModel};
use crate::params::{ParamGroup, ParamId};

#[derive(Debug, Clone)]
pub struct ModHead {
    cfg: ModConfig,
    n_layers: usize,
    w_g: ParamId,
    norms: Vec<NormIds>,
}

/// Everything the head produces for one forward pass.
#[derive(Debug, Clone)]
pub struct RoutedOutput {
    /// Exit logits per route, `[batch, seq, V]`.
    pub route_logits: Vec<Var>,
    /// Mixture weights `[batch, seq, k]`.
    pub weights: Var,
    /// `Σ_i w_i·logits_i`, `[batch, seq, V]`.
    pub ensemble: Var,
}

impl ModHead {
    /// Registers the routing matrix and the per-exit norms on `model`. Each norm starts
    /// as a copy of the model's final norm.
    pub fn attach<T: Float>(model: &mut TransformerModel<T>, cfg: ModConfig) -> Result<Self> {
        cfg.validate(model.config())?;
        if model.params.id("mod.w_g").is_some() {
            return Err(CoreError::State("model already has a routed head".into()));
        }
        let d = model.config().d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w_g =
            model.params.add("mod.w_g", Tensor::randn(vec![d, cfg.k], cfg.routing_init_std, &mut rng), ParamGroup::ModRouting)?;
        let mut norms = Vec::new();
        if cfg.use_trainable_norms {
            let fin = model.final_norm();
            for i in 0..cfg.k {
                let gamma = model.params.value(fin.gamma).clone();
                let beta = model.params.value(fin.beta).clone();
                let gamma = model.params.add(format!("mod.norm.{i}.gamma"), gamma, ParamGroup::ModNorms)?;
                let beta = model.params.add(format!("mod.norm.{i}.beta"), beta, ParamGroup::ModNorms)?;
                norms.push(NormIds { gamma, beta });
            }
        }
        Ok(ModHead { cfg, n_layers: model.n_layers(), w_g, norms })
    }

    pub fn config(&self) -> &ModConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    /// Changes how many routes are kept per token.
    pub fn set_top_k(&mut self, top_k: Option<usize>) -> Result<()> {
        let cfg = ModConfig { top_k, ..self.cfg.clone() };
        if let Some(t) = top_k {
            if t < 1 || t > cfg.k {
                return Err(CoreError::Config(format!("top_k must be in 1..={}, got {t}", cfg.k)));
            }
        }
        self.cfg = cfg;
        Ok(())
    }

    pub fn routing_matrix(&self) -> ParamId {
        self.w_g
    }

    /// The norm applied before the head on route `i`.
    pub fn route_norm<T: Float>(&self, model: &TransformerModel<T>, i: usize) -> NormIds {
        if self.cfg.use_trainable_norms {
            self.norms[i]
        } else {
            model.final_norm()
        }
    }

    /// Layer whose output feeds route `i`; route `k-1` is the last layer.
    pub fn route_layer(&self, i: usize) -> usize {
        self.n_layers - self.cfg.k + 1 + i
    }

    /// Layer whose output is the routing input.
    pub fn routing_input_layer(&self) -> usize {
        self.n_layers - self.cfg.k
    }

    pub fn exit_logits<T: Float>(
        &self,
        model: &TransformerModel<T>,
        ctx: &mut Ctx<T>,
        trace: &ForwardTrace,
        i: usize,
    ) -> Result<Var> {
        if i >= self.cfg.k {
            return Err(CoreError::Validation(format!("route {i} out of range for k = {}", self.cfg.k)));
        }
        let h = trace.hidden(self.route_layer(i))?;
        model.norm_and_head(ctx, self.route_norm(model, i), h)
    }

    /// Routing scores `x·W_g`.
    pub fn scores<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w_g);
        Ok(ctx.g.matmul(x, w)?)
    }

    pub fn route_dense<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = self.scores(ctx, x)?;
        Ok(dense_weights(&mut ctx.g, s))
    }

    pub fn route_topk<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, top_k: usize) -> Result<Var> {
        let s = self.scores(ctx, x)?;
        topk_weights(&mut ctx.g, s, top_k)
    }

    /// Mixture weights under the configured routing mode.
    pub fn weights<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self.cfg.top_k {
            Some(t) => self.route_topk(ctx, x, t),
            None => self.route_dense(ctx, x),
        }
    }

    /// Exit logits of every route, the routing weights, and their mixture.
    pub fn forward<T: Float>(&self, model: &TransformerModel<T>, ctx: &mut Ctx<T>, trace: &ForwardTrace) -> Result<RoutedOutput> {
        let x = trace.hidden(self.routing_input_layer())?;
        let weights = self.weights(ctx, x)?;
        let route_logits = (0..self.cfg.k).map(|i| self.exit_logits(model, ctx, trace, i)).collect::<Result<Vec<_>>>()?;
        let present: Vec<Option<Var>> = route_logits.iter().copied().map(Some).collect();
        let ensemble = ensemble(&mut ctx.g, &present, weights)?;
        Ok(RoutedOutput { route_logits, weights, ensemble })
    }
}

/// `softmax(scores)` over the route axis.
pub fn dense_weights<T: Float>(g: &mut Graph<T>, scores: Var) -> Var {
    g.softmax(scores)
}

/// Softmax restricted to the `top_k` highest scores of each row; the rest are set to
/// -inf first and so receive exactly zero weight and zero gradient.
pub fn topk_weights<T: Float>(g: &mut Graph<T>, scores: Var, top_k: usize) -> Result<Var> {
    let s = g.value(scores);
    let k = s.last_dim();
    if top_k < 1 || top_k > k {
        return Err(CoreError::Validation(format!("top_k must be in 1..={k}, got {top_k}")));
    }
    if top_k == k {
        return Ok(g.softmax(scores));
    }
    let keep: Vec<bool> = (0..s.rows()).flat_map(|r| route_tiebreak(s.row(r), top_k)).collect();
    let masked = g.mask_fill(scores, &keep)?;
    Ok(g.softmax(masked))
}

/// Which of the routes survive top-`top_k` selection. Equal scores favor the deeper route.
pub fn route_tiebreak<T: Float>(scores: &[T], top_k: usize) -> Vec<bool> {
    let mut keep = vec![false; scores.len()];
    for i in top_k_indices(scores, top_k) {
        keep[i] = true;
    }
    keep
}

/// `Σ_i w_i·logits_i` over the routes that are present. Absent routes must carry zero
/// weight; skipping them gives the same sum as adding their zero terms.
pub fn ensemble<T: Float>(g: &mut Graph<T>, route_logits: &[Option<Var>], weights: Var) -> Result<Var> {
    let wdims = g.value(weights).dims().to_vec();
    let k = *wdims.last().expect("rank >= 1");
    if route_logits.len() != k {
        return Err(CoreError::Validation(format!("{} route logits for {k} weights", route_logits.len())));
    }
    let rows = g.value(weights).rows();
    let w = g.reshape(weights, &[rows, k])?;
    let mut acc: Option<Var> = None;
    let mut out_dims = None;
    for (i, l) in route_logits.iter().enumerate() {
        let Some(l) = *l else { continue };
        let dims = g.value(l).dims().to_vec();
        let v = *dims.last().expect("rank >= 1");
        let flat = g.reshape(l, &[rows, v])?;
        let wi = g.column(w, i)?;
        let term = g.scale_rows(flat, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
        out_dims = Some(dims);
    }
    let (acc, dims) = acc.zip(out_dims).ok_or_else(|| CoreError::Validation("no routes present".into()))?;
    Ok(g.reshape(acc, &dims)?)
}
