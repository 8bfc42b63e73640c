use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Shape and initialization settings of the base transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// 8 layers, width 128, byte vocabulary.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 259,
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            norm_eps: 1e-5,
            tie_embeddings: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("vocab_size, d_model, d_ff and n_heads must be positive".into());
        }
        if self.n_layers < 1 {
            return bad("n_layers must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of the base model.
    pub fn param_count(&self) -> usize {
        let (v, d, f, s, n) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len, self.n_layers);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let head = if self.tie_embeddings { v } else { d * v + v };
        v * d + s * d + n * per_layer + 2 * d + head
    }
}

/// Linear projections inside a block that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpIn,
    MlpOut,
}

impl Projection {
    pub const ALL: [Projection; 6] =
        [Projection::AttnQ, Projection::AttnK, Projection::AttnV, Projection::AttnO, Projection::MlpIn, Projection::MlpOut];

    pub fn name(self) -> &'static str {
        match self {
            Projection::AttnQ => "attn_q",
            Projection::AttnK => "attn_k",
            Projection::AttnV => "attn_v",
            Projection::AttnO => "attn_o",
            Projection::MlpIn => "mlp_in",
            Projection::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Projection::ALL.into_iter().find(|p| p.name() == s)
    }

    /// (d_in, d_out) of the projection.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        match self {
            Projection::MlpIn => (d, f),
            Projection::MlpOut => (f, d),
            _ => (d, d),
        }
    }
}

/// Low-rank adapter settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    /// One flag per layer, bottom first.
    pub layer_mask: Vec<bool>,
    pub init_std: f64,
    pub seed: u64,
}

impl LoraConfig {
    pub fn new(n_layers: usize) -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec![Projection::AttnQ, Projection::AttnV, Projection::MlpOut],
            layer_mask: vec![true; n_layers],
            init_std: 0.02,
            seed: 1,
        }
    }

    /// Adapters everywhere except the top `k` layers.
    pub fn excluding_top(mut self, k: usize) -> Self {
        let n = self.layer_mask.len();
        for (j, m) in self.layer_mask.iter_mut().enumerate() {
            *m = j + k < n;
        }
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(CoreError::Config("lora rank must be positive".into()));
        }
        if self.layer_mask.len() != model.n_layers {
            return Err(CoreError::Config(format!(
                "lora layer_mask has {} entries for {} layers",
                self.layer_mask.len(),
                model.n_layers
            )));
        }
        if self.targets.is_empty() {
            return Err(CoreError::Config("lora targets are empty".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(CoreError::Config("lora targets contain duplicates".into()));
        }
        Ok(())
    }

    /// Adapter parameters added to one layer.
    pub fn per_layer_params(&self, model: &ModelConfig) -> usize {
        self.targets
            .iter()
            .map(|p| {
                let (i, o) = p.shape(model);
                self.rank * (i + o)
            })
            .sum()
    }
}

/// Settings of the routed multi-exit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModConfig {
    /// Number of top layers that act as exits.
    pub k: usize,
    /// Keep only this many exits per token; `None` keeps all `k`.
    pub top_k: Option<usize>,
    pub lambda: f64,
    pub routing_init_std: f64,
    pub use_trainable_norms: bool,
    pub detach_teacher: bool,
    pub epsilon_sparsity: f64,
    pub seed: u64,
}

impl Default for ModConfig {
    fn default() -> Self {
        ModConfig {
            k: 3,
            top_k: None,
            lambda: 1e-4,
            routing_init_std: 0.02,
            use_trainable_norms: true,
            detach_teacher: true,
            epsilon_sparsity: 1e-5,
            seed: 2,
        }
    }
}

impl ModConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.k < 1 || self.k > model.n_layers {
            return bad(format!("k must be in 1..={}, got {}", model.n_layers, self.k));
        }
        if let Some(t) = self.top_k {
            if t < 1 || t > self.k {
                return bad(format!("top_k must be in 1..={}, got {t}", self.k));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(self.routing_init_std >= 0.0 && self.routing_init_std.is_finite()) {
            return bad(format!("routing_init_std must be non-negative, got {}", self.routing_init_std));
        }
        if !(self.epsilon_sparsity > 0.0) {
            return bad(format!("epsilon_sparsity must be positive, got {}", self.epsilon_sparsity));
        }
        Ok(())
    }

    /// Number of exits kept per token.
    pub fn active_routes(&self) -> usize {
        self.top_k.unwrap_or(self.k)
    }

    /// Parameters added by the head: the routing matrix plus, optionally, k norms.
    pub fn param_count(&self, model: &ModelConfig) -> usize {
        let d = model.d_model;
        d * self.k + if self.use_trainable_norms { 2 * d * self.k } else { 0 }
    }
}
