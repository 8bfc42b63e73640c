//! Run configuration: `key = value` lines with dotted namespaces.
//!
//! ```text
//! # toy addition run
//! model.n_layers = 8
//! mod.k = 3
//! mod.top_k = none
//! train.max_steps = 2000
//! data.kind = synth_addition
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use modtune_core::data::{DataConfig, DatasetKind, VOCAB_SIZE};
use modtune_core::inference::{CacheMode, Decoding, GenConfig};
use modtune_core::{LoraConfig, ModConfig, ModelConfig, Projection, TrainConfig};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub head: ModConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub data: DataConfig,
    pub generation: GenConfig,
    /// Examples scored for exact-match accuracy after a run.
    pub eval_samples: usize,
    pub sweep_max_k: usize,
    /// Eval prompts decoded per sweep cell to measure layer savings.
    pub sweep_prompts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy();
        RunConfig {
            lora: LoraConfig::new(model.n_layers),
            model,
            head: ModConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            data: DataConfig::new(DatasetKind::SynthAddition),
            generation: GenConfig::default(),
            eval_samples: 200,
            sweep_max_k: 6,
            sweep_prompts: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies every line of `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut data_path: Option<PathBuf> = None;
        let mut data_kind: Option<String> = None;
        let mut temperature: Option<f64> = None;
        let mut decoding: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config { line, msg };
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("{key}: missing value")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            let v = Value { key, raw: value, line };
            match key {
                "model.vocab_size" => cfg.model.vocab_size = v.usize()?,
                "model.d_model" => cfg.model.d_model = v.usize()?,
                "model.n_layers" => cfg.model.n_layers = v.usize()?,
                "model.n_heads" => cfg.model.n_heads = v.usize()?,
                "model.d_ff" => cfg.model.d_ff = v.usize()?,
                "model.max_seq_len" => cfg.model.max_seq_len = v.usize()?,
                "model.norm_eps" => cfg.model.norm_eps = v.f64()?,
                "model.tie_embeddings" => cfg.model.tie_embeddings = v.bool()?,
                "model.seed" => cfg.model.seed = v.u64()?,

                "lora.rank" => cfg.lora.rank = v.usize()?,
                "lora.alpha" => cfg.lora.alpha = v.f64()?,
                "lora.targets" => cfg.lora.targets = v.projections()?,
                "lora.init_std" => cfg.lora.init_std = v.f64()?,
                "lora.seed" => cfg.lora.seed = v.u64()?,

                "mod.k" => cfg.head.k = v.usize()?,
                "mod.top_k" => cfg.head.top_k = v.opt_usize()?,
                "mod.lambda" => cfg.head.lambda = v.f64()?,
                "mod.routing_init_std" => cfg.head.routing_init_std = v.f64()?,
                "mod.trainable_norms" => cfg.head.use_trainable_norms = v.bool()?,
                "mod.detach_teacher" => cfg.head.detach_teacher = v.bool()?,
                "mod.epsilon_sparsity" => cfg.head.epsilon_sparsity = v.f64()?,
                "mod.seed" => cfg.head.seed = v.u64()?,

                "train.preset" => cfg.train.preset = v.raw.parse().map_err(|e| err(format!("{e}")))?,
                "train.lr" => cfg.train.lr = v.f64()?,
                "train.batch_size" => cfg.train.batch_size = v.usize()?,
                "train.epochs" => cfg.train.epochs = v.usize()?,
                "train.max_steps" => cfg.train.max_steps = v.opt_usize()?,
                "train.beta1" => cfg.train.beta1 = v.f64()?,
                "train.beta2" => cfg.train.beta2 = v.f64()?,
                "train.adam_eps" => cfg.train.adam_eps = v.f64()?,
                "train.weight_decay" => cfg.train.weight_decay = v.f64()?,
                "train.grad_clip" => cfg.train.grad_clip = v.f64()?,
                "train.eval_every" => cfg.train.eval_every = v.usize()?,
                "train.eval_batches" => cfg.train.eval_batches = v.opt_usize()?,
                "train.seed" => cfg.train.seed = v.u64()?,
                "train.precision" => {
                    cfg.precision = match v.raw {
                        "f32" => Precision::F32,
                        "f64" => Precision::F64,
                        other => return Err(err(format!("train.precision must be f32 or f64, got {other:?}"))),
                    }
                }

                "data.kind" => data_kind = Some(v.raw.to_string()),
                "data.path" => data_path = Some(PathBuf::from(v.raw)),
                "data.samples" => cfg.data.samples = v.usize()?,
                "data.digits" => cfg.data.digits = v.usize()?,
                "data.eval_fraction" => cfg.data.eval_fraction = v.f64()?,
                "data.seq_len" => cfg.data.seq_len = v.usize()?,
                "data.seed" => cfg.data.seed = v.u64()?,

                "gen.decoding" => decoding = Some(v.raw.to_string()),
                "gen.temperature" => temperature = Some(v.f64()?),
                "gen.max_new_tokens" => cfg.generation.max_new_tokens = v.usize()?,
                "gen.early_exit" => cfg.generation.early_exit = v.bool()?,
                "gen.cache_mode" => {
                    cfg.generation.cache_mode = match v.raw {
                        "none" => CacheMode::None,
                        "propagate" => CacheMode::Propagate,
                        other => return Err(err(format!("gen.cache_mode must be none or propagate, got {other:?}"))),
                    }
                }
                "gen.stop_at_eos" => cfg.generation.stop_at_eos = v.bool()?,
                "gen.seed" => cfg.generation.seed = v.u64()?,

                "eval.samples" => cfg.eval_samples = v.usize()?,
                "sweep.max_k" => cfg.sweep_max_k = v.usize()?,
                "sweep.prompts" => cfg.sweep_prompts = v.usize()?,
                _ => return Err(err(format!("unknown key {key}"))),
            }
        }

        cfg.data.kind = match (data_kind.as_deref(), data_path) {
            (None | Some("synth_addition"), None) => DatasetKind::SynthAddition,
            (Some("synth_copy"), None) => DatasetKind::SynthCopy,
            (Some("text_corpus"), Some(path)) => DatasetKind::TextCorpus { path },
            (Some("text_corpus"), None) => return Err(whole("data.kind = text_corpus needs data.path")),
            (None | Some("synth_addition" | "synth_copy"), Some(_)) => {
                return Err(whole("data.path is only used with data.kind = text_corpus"))
            }
            (Some(other), _) => return Err(whole(&format!("unknown data.kind {other:?}"))),
        };
        cfg.generation.decoding = match (decoding.as_deref(), temperature) {
            (None | Some("greedy"), None) => Decoding::Greedy,
            (Some("sample"), t) => Decoding::Sample { temperature: t.unwrap_or(1.0) },
            (None | Some("greedy"), Some(_)) => return Err(whole("gen.temperature needs gen.decoding = sample")),
            (Some(other), _) => return Err(whole(&format!("unknown gen.decoding {other:?}"))),
        };
        if cfg.lora.layer_mask.len() != cfg.model.n_layers {
            cfg.lora.layer_mask = vec![true; cfg.model.n_layers];
        }
        cfg.train.probe_k = cfg.head.k;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not depend on which command runs.
    pub fn validate(&self) -> Result<()> {
        let core = |e: modtune_core::CoreError| whole(&e.to_string());
        self.model.validate().map_err(core)?;
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(whole(&format!("model.vocab_size must be at least {VOCAB_SIZE} for byte tokens")));
        }
        self.lora.validate(&self.model).map_err(core)?;
        self.head.validate(&self.model).map_err(core)?;
        self.train.validate().map_err(core)?;
        if self.sweep_max_k < 1 {
            return Err(whole("sweep.max_k must be at least 1"));
        }
        Ok(())
    }
}

/// A problem with the configuration as a whole rather than one line.
fn whole(msg: &str) -> CliError {
    CliError::Usage(msg.to_string())
}

/// Drops a `#` comment that starts the line or follows whitespace.
fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

struct Value<'a> {
    key: &'a str,
    raw: &'a str,
    line: usize,
}

impl Value<'_> {
    fn fail(&self, what: &str) -> CliError {
        CliError::Config { line: self.line, msg: format!("{}: expected {what}, got {:?}", self.key, self.raw) }
    }

    fn usize(&self) -> Result<usize> {
        self.raw.parse().map_err(|_| self.fail("a non-negative integer"))
    }

    fn u64(&self) -> Result<u64> {
        self.raw.parse().map_err(|_| self.fail("a non-negative integer"))
    }

    fn opt_usize(&self) -> Result<Option<usize>> {
        if self.raw == "none" {
            return Ok(None);
        }
        self.raw.parse().map(Some).map_err(|_| self.fail("an integer or none"))
    }

    fn f64(&self) -> Result<f64> {
        match self.raw.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.fail("a finite number")),
        }
    }

    fn bool(&self) -> Result<bool> {
        match self.raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.fail("true or false")),
        }
    }

    fn projections(&self) -> Result<Vec<Projection>> {
        let out: Option<Vec<_>> = self.raw.split(',').map(|s| Projection::parse(s.trim())).collect();
        match out {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(self.fail("a comma-separated list of attn_q, attn_k, attn_v, attn_o, mlp_in, mlp_out")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use modtune_core::Preset;

    #[test]
    fn defaults_match_the_toy_setup() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model, ModelConfig::toy());
        assert_eq!(cfg.head.k, 3);
        assert_eq!(cfg.train.preset, Preset::LoraAllPlusMod);
        assert_eq!(cfg.precision, Precision::F32);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse(
            "# header\nmod.k = 2   # two exits\n\nmod.top_k = 1\ndata.path=#not-a-comment\ndata.kind = text_corpus\n",
        )
        .unwrap();
        assert_eq!(cfg.head.k, 2);
        assert_eq!(cfg.head.top_k, Some(1));
        assert_eq!(cfg.train.probe_k, 2);
        assert_eq!(cfg.data.kind, DatasetKind::TextCorpus { path: "#not-a-comment".into() });
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line = |text: &str| match RunConfig::parse(text) {
            Err(CliError::Config { line, .. }) => line,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(line("mod.k = 2\nmod.bogus = 1\n"), 2);
        assert_eq!(line("\n\nmod.k = two\n"), 3);
        assert_eq!(line("mod.k = 2\nmod.k = 3\n"), 2);
        assert_eq!(line("just words\n"), 1);
        assert_eq!(line("train.preset = everything\n"), 1);
        assert!(matches!(RunConfig::parse("mod.k = 9\n"), Err(CliError::Usage(_))));
    }
}
