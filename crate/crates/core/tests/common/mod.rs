#![allow(dead_code)]

use modtune_autodiff::{Float, Tensor};
use modtune_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 259,
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        norm_eps: 1e-5,
        tie_embeddings: false,
        seed,
    }
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Overwrites every parameter of `group` with Gaussian noise of the given scale.
pub fn randomize_group<T: Float>(model: &mut TransformerModel<T>, group: ParamGroup, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.params.iter_mut() {
        if p.group == group {
            p.value = Tensor::randn(p.value.dims().to_vec(), std, &mut rng);
        }
    }
}

/// Logits of the plain model for a batch.
pub fn final_logits<T: Float>(model: &TransformerModel<T>, tokens: &[usize], batch: usize, seq: usize) -> Tensor<T> {
    let mut ctx = Ctx::new(&model.params, false);
    let trace = model.forward(&mut ctx, tokens, batch, seq).unwrap();
    let l = model.final_logits(&mut ctx, &trace).unwrap();
    ctx.g.value(l).clone()
}
