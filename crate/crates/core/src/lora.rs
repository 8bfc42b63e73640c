//! Low-rank adapters on the block projections.

use modtune_autodiff::{kernels, lit, Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LoraConfig, Projection};
use crate::error::{CoreError, Result};
use crate::model::{proj_index, AdapterIds, LoraState, TransformerModel};
use crate::params::ParamGroup;

/// Attaches adapters to `model` in place. `A` starts Gaussian and `B` at zero, so the
/// adapted model initially computes exactly what the base model does.
pub fn inject<T: Float>(model: &mut TransformerModel<T>, cfg: LoraConfig) -> Result<()> {
    if model.lora.is_some() {
        return Err(CoreError::State("model already has adapters".into()));
    }
    cfg.validate(model.config())?;
    let mcfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for j in 0..mcfg.n_layers {
        if !cfg.layer_mask[j] {
            continue;
        }
        for &p in &cfg.targets {
            let (din, dout) = p.shape(&mcfg);
            let prefix = format!("lora.{}.{}", j + 1, p.name());
            let a = model.params.add(
                format!("{prefix}.A"),
                Tensor::randn(vec![cfg.rank, din], cfg.init_std, &mut rng),
                ParamGroup::Lora,
            )?;
            let b = model.params.add(format!("{prefix}.B"), Tensor::zeros(vec![dout, cfg.rank]), ParamGroup::Lora)?;
            model.blocks[j].adapters[proj_index(p)] = Some(AdapterIds { a, b });
        }
    }
    model.lora = Some(LoraState { cfg });
    Ok(())
}

/// `W + (α/r)·(B·A)ᵀ` in the `[d_in, d_out]` layout used by the model.
pub fn merged_weight<T: Float>(model: &TransformerModel<T>, layer: usize, p: Projection) -> Result<Tensor<T>> {
    let w = model.params.value(model.projection(layer, p).weight).clone();
    let (Some(ad), Some(cfg)) = (model.adapter(layer, p), model.lora_config()) else {
        return Ok(w);
    };
    let (din, dout) = p.shape(model.config());
    let a = model.params.value(ad.a);
    let b = model.params.value(ad.b);
    // (B·A)ᵀ = Aᵀ·Bᵀ, an [din, dout] product of the stored [r, din] and [dout, r].
    let mut delta = vec![T::zero(); din * dout];
    kernels::gemm(din, cfg.rank, dout, a.data(), true, b.data(), true, T::zero(), &mut delta);
    let s: T = lit(cfg.scale());
    let data = w.data().iter().zip(&delta).map(|(&w, &dw)| w + s * dw).collect();
    Ok(Tensor::new(vec![din, dout], data)?)
}

/// A copy of `model` with every adapter folded into its base weight and removed.
pub fn merge<T: Float>(model: &TransformerModel<T>) -> Result<TransformerModel<T>> {
    let mut out = TransformerModel::new(model.config().clone())?;
    for (_, p) in out.params.iter_mut() {
        p.value = model.params.get(&p.name).expect("same base layout").value.clone();
    }
    for j in 0..model.n_layers() {
        for p in Projection::ALL {
            if model.adapter(j, p).is_some() {
                let w = merged_weight(model, j, p)?;
                let id = out.projection(j, p).weight;
                *out.params.value_mut(id) = w;
            }
        }
    }
    Ok(out)
}

/// Largest absolute difference between the adapted projections and their merged
/// weights, evaluated on `rows` random inputs per projection.
pub fn merge_check<T: Float>(model: &TransformerModel<T>, rows: usize, seed: u64) -> Result<f64> {
    let Some(cfg) = model.lora_config() else {
        return Ok(0.0);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: T = lit(cfg.scale());
    let mut worst = 0.0f64;
    for j in 0..model.n_layers() {
        for p in Projection::ALL {
            let Some(ad) = model.adapter(j, p) else { continue };
            let (din, dout) = p.shape(model.config());
            let x = Tensor::<T>::randn(vec![rows, din], 1.0, &mut rng);
            let w = model.params.value(model.projection(j, p).weight);
            let (a, b) = (model.params.value(ad.a), model.params.value(ad.b));

            let mut adapted = vec![T::zero(); rows * dout];
            kernels::gemm(rows, din, dout, x.data(), false, w.data(), false, T::zero(), &mut adapted);
            let mut t = vec![T::zero(); rows * cfg.rank];
            kernels::gemm(rows, din, cfg.rank, x.data(), false, a.data(), true, T::zero(), &mut t);
            let mut u = vec![T::zero(); rows * dout];
            kernels::gemm(rows, cfg.rank, dout, &t, false, b.data(), true, T::zero(), &mut u);
            for (y, du) in adapted.iter_mut().zip(&u) {
                *y += s * *du;
            }

            let merged = merged_weight(model, j, p)?;
            let mut direct = vec![T::zero(); rows * dout];
            kernels::gemm(rows, din, dout, x.data(), false, merged.data(), false, T::zero(), &mut direct);
            for (y1, y2) in adapted.iter().zip(&direct) {
                worst = worst.max((y1.as_f64() - y2.as_f64()).abs());
            }
        }
    }
    Ok(worst)
}
