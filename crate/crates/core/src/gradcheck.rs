//! Finite-difference verification of the full training objective.

use std::time::Instant;

use modtune_autodiff::gradcheck::{rel_err, FD_REL_TOL, FD_STEP};
use modtune_autodiff::OpKind;
use serde::{Deserialize, Serialize};

use crate::config::{LoraConfig, ModConfig, ModelConfig, Projection};
use crate::ctx::Ctx;
use crate::data::Batch;
use crate::error::Result;
use crate::lora;
use crate::mod_head::ModHead;
use crate::model::TransformerModel;
use crate::params::ParamGroup;
use crate::trainer::{apply_preset, batch_loss, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub head: ModConfig,
    pub preset: Preset,
    pub batch: usize,
    pub seq: usize,
    pub seed: u64,
    /// Corrupts the backward rule of one op kind by scaling its upstream gradient by
    /// `1 + factor`. Used as a negative control.
    #[serde(skip)]
    pub fault: Option<(OpKind, f64)>,
}

impl GradcheckConfig {
    /// Two layers, width 8, an 11-token vocabulary and two exits.
    ///
    /// The teacher is not detached and the distillation weight is large: a detached
    /// teacher is invisible to finite differences, and a tiny weight would hide the
    /// distillation gradient below the tolerance.
    pub fn tiny() -> Self {
        let model = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            norm_eps: 1e-5,
            tie_embeddings: false,
            seed: 7,
        };
        let mut lora = LoraConfig::new(2);
        lora.rank = 2;
        lora.targets = Projection::ALL.to_vec();
        let head = ModConfig { k: 2, lambda: 0.5, detach_teacher: false, routing_init_std: 0.5, ..Default::default() };
        GradcheckConfig { model, lora, head, preset: Preset::LoraAllPlusMod, batch: 2, seq: 5, seed: 3, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub elements: usize,
    pub max_rel_err: f64,
    /// Parameter and element index of the largest error.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_secs: f64,
}

/// Compares analytic gradients of the routed objective with central differences for
/// every trainable element, in 64-bit precision.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut model = TransformerModel::<f64>::new(cfg.model.clone())?;
    lora::inject(&mut model, cfg.lora.clone())?;
    let head = ModHead::attach(&mut model, cfg.head.clone())?;
    // Move every group away from its special initial value (B = 0, norms = identity)
    // so each gradient path carries signal.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    for (_, p) in model.params.iter_mut() {
        if p.group != ParamGroup::Base || p.name.contains("norm") || p.name.ends_with("bias") {
            let noise = modtune_autodiff::Tensor::<f64>::randn(p.value.dims().to_vec(), 0.3, &mut rng);
            for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }
    apply_preset(&mut model, Some(&head), cfg.preset, head.k())?;

    let tokens: Vec<Vec<usize>> = (0..cfg.batch)
        .map(|b| {
            let len = cfg.seq + 1 - (b % 2) * 2;
            (0..len).map(|t| (t * 7 + b * 3 + 1) % cfg.model.vocab_size).collect()
        })
        .collect();
    let refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
    let batch = Batch::padded(&refs, 0)?;

    let analytic = {
        let mut ctx = Ctx::new(&model.params, true);
        if let Some((kind, factor)) = cfg.fault {
            ctx.g.inject_backward_fault(kind, factor);
        }
        let (loss, _) = batch_loss(&model, Some(&head), &mut ctx, &batch, head.k())?;
        ctx.g.backward(loss)?;
        ctx.param_grads()
    };
    let loss_at = |m: &TransformerModel<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(&m.params, false);
        Ok(batch_loss(m, Some(&head), &mut ctx, &batch, head.k())?.1.total)
    };

    let mut groups: Vec<GroupCheck> = Vec::new();
    let ids: Vec<_> = model.params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let (name, group, n) = {
            let p = model.params.param(id);
            (p.name.clone(), p.group, p.value.numel())
        };
        let grad = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let entry = match groups.iter().position(|g| g.group == group) {
            Some(i) => i,
            None => {
                groups.push(GroupCheck { group, elements: 0, max_rel_err: 0.0, worst: String::new() });
                groups.len() - 1
            }
        };
        for i in 0..n {
            let orig = model.params.value(id).data()[i];
            model.params.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = loss_at(&model)?;
            model.params.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = loss_at(&model)?;
            model.params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = rel_err(grad[i], numeric);
            let g = &mut groups[entry];
            g.elements += 1;
            if err > g.max_rel_err || g.worst.is_empty() {
                g.max_rel_err = err;
                g.worst = format!("{name}[{i}]");
            }
        }
    }
    groups.sort_by_key(|g| g.group);
    let passed = !groups.is_empty() && groups.iter().all(|g| g.max_rel_err < FD_REL_TOL);
    Ok(GradcheckReport { groups, tolerance: FD_REL_TOL, passed, elapsed_secs: started.elapsed().as_secs_f64() })
}
