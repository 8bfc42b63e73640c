mod common;

use common::{random_tokens, randomize_group, small_config};
use modtune_core::inference::*;
use modtune_core::*;

fn routed(k: usize, top_k: Option<usize>, seed: u64) -> (TransformerModel<f32>, ModHead) {
    let mut m = TransformerModel::<f32>::new(ModelConfig { n_layers: 6, ..small_config(seed) }).unwrap();
    randomize_group(&mut m, ParamGroup::Base, 0.5, seed);
    let mut head = ModHead::attach(&mut m, ModConfig { k, top_k, routing_init_std: 1.0, seed, ..Default::default() }).unwrap();
    randomize_group(&mut m, ParamGroup::ModNorms, 1.0, seed + 1);
    head.set_top_k(top_k).unwrap();
    (m, head)
}

#[test]
fn skipping_matches_full_compute() {
    for seed in 0..6 {
        let (m, head) = routed(4, Some(1 + (seed as usize % 3)), seed);
        let prompt = random_tokens(3 + seed as usize, 259, seed);
        let cfg = GenConfig { max_new_tokens: 10, stop_at_eos: false, ..Default::default() };
        let full = generate(&m, Some(&head), &prompt, &cfg).unwrap();
        let fast = generate_early_exit(&m, &head, &prompt, &cfg).unwrap();
        assert_eq!(full.tokens, fast.tokens);
        assert!(full.ledger.tokens.iter().all(|t| t.layers_computed == 6));
        for t in &fast.ledger.tokens {
            assert_eq!(t.layers_computed, 6 - 4 + t.deepest_route.unwrap() + 1);
        }
        let sum: usize = fast.ledger.tokens.iter().map(|t| t.layers_computed).sum();
        assert_eq!(fast.ledger.layer_ratio(), (6 * fast.tokens.len()) as f64 / sum as f64);
    }
}

#[test]
fn ledger_examples() {
    let mut l = ComputeLedger::new(8);
    for _ in 0..5 {
        l.tokens.push(TokenCost { layers_computed: 6, deepest_route: Some(0), wall_secs: 0.0 });
    }
    assert!((l.layer_ratio() - 8.0 / 6.0).abs() < 1e-12);
    let mut l = ComputeLedger::new(8);
    l.tokens.push(TokenCost { layers_computed: 8 - 6 + 1, deepest_route: Some(0), wall_secs: 0.0 });
    assert!((l.layer_ratio() - 8.0 / 3.0).abs() < 1e-12);
}

#[test]
fn dense_routing_never_skips() {
    let (m, head) = routed(3, None, 3);
    let cfg = GenConfig { max_new_tokens: 4, stop_at_eos: false, ..Default::default() };
    let g = generate_early_exit(&m, &head, &[1, 2, 3], &cfg).unwrap();
    assert_eq!(g.ledger.layer_ratio(), 1.0);
}

#[test]
fn tiny_temperature_is_greedy() {
    let (m, head) = routed(3, Some(2), 4);
    let greedy = GenConfig { max_new_tokens: 8, stop_at_eos: false, ..Default::default() };
    let cold = GenConfig { decoding: Decoding::Sample { temperature: 1e-6 }, seed: 11, ..greedy.clone() };
    assert_eq!(
        generate(&m, Some(&head), &[5, 6], &greedy).unwrap().tokens,
        generate(&m, Some(&head), &[5, 6], &cold).unwrap().tokens
    );
    let warm = GenConfig { decoding: Decoding::Sample { temperature: 1.0 }, seed: 11, ..greedy };
    let a = generate(&m, Some(&head), &[5, 6], &warm).unwrap().tokens;
    let b = generate(&m, Some(&head), &[5, 6], &warm).unwrap().tokens;
    assert_eq!(a, b);
}

#[test]
fn cached_decoding_without_skipping_tracks_full_compute() {
    let (m, head) = routed(3, Some(2), 5);
    let cfg = GenConfig { max_new_tokens: 12, stop_at_eos: false, ..Default::default() };
    let full = generate(&m, Some(&head), &[7, 8, 9], &cfg).unwrap();
    let cached = generate(&m, Some(&head), &[7, 8, 9], &GenConfig { cache_mode: CacheMode::Propagate, ..cfg.clone() }).unwrap();
    assert_eq!(full.tokens, cached.tokens);
    let plain = generate(&m, None, &[7, 8, 9], &cfg).unwrap();
    let plain_cached = generate(&m, None, &[7, 8, 9], &GenConfig { cache_mode: CacheMode::Propagate, ..cfg.clone() }).unwrap();
    assert_eq!(plain.tokens, plain_cached.tokens);

    let skipping = GenConfig { cache_mode: CacheMode::Propagate, ..cfg };
    let approx = generate_early_exit(&m, &head, &[7, 8, 9], &skipping).unwrap();
    let d = Divergence::between(&full.tokens, &approx.tokens);
    assert_eq!(d.compared, 12);
    assert!(d.matching_prefix >= 1, "first token uses exact keys and values");
    let report = acceleration_report(&approx.ledger, &full.ledger, CacheMode::Propagate, Some(d));
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["cache_mode"], "propagate");
    assert_eq!(json["layer_forwards"].as_u64().unwrap() as usize, approx.ledger.layer_forwards());
}

#[test]
fn stops_at_context_limit_and_validates() {
    let (m, head) = routed(2, None, 6);
    let prompt = random_tokens(30, 259, 1);
    let cfg = GenConfig { max_new_tokens: 10, stop_at_eos: false, ..Default::default() };
    assert_eq!(generate(&m, Some(&head), &prompt, &cfg).unwrap().tokens.len(), 2);
    assert!(generate(&m, Some(&head), &[], &cfg).is_err());
    let hot = GenConfig { decoding: Decoding::Sample { temperature: 0.0 }, ..cfg.clone() };
    assert!(matches!(generate(&m, Some(&head), &[1], &hot), Err(CoreError::Config(_))));
    let ee = GenConfig { early_exit: true, ..cfg };
    assert!(matches!(generate(&m, None, &[1], &ee), Err(CoreError::Config(_))));
}
