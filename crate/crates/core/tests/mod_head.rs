mod common;

use common::{final_logits, random_tokens, randomize_group, small_config};
use modtune_autodiff::{Graph, Tensor};
use modtune_core::mod_head::{dense_weights, ensemble, route_tiebreak, topk_weights};
use modtune_core::*;
use proptest::prelude::*;

fn weights(scores: &[f64], top_k: Option<usize>) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(vec![1, scores.len()], scores.to_vec()).unwrap());
    let w = match top_k {
        Some(t) => topk_weights(&mut g, s, t).unwrap(),
        None => dense_weights(&mut g, s),
    };
    g.value(w).data().to_vec()
}

#[test]
fn worked_examples() {
    let w = weights(&[2.0, 1.0, 0.5], Some(2));
    let expect = [1.0 / (1.0 + (-1.0f64).exp()), 1.0 / (1.0 + 1.0f64.exp()), 0.0];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-4);
    }
    assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4 && w[2] == 0.0);
    let w = weights(&[std::f64::consts::LN_2, 0.0, 0.0], None);
    for (a, b) in w.iter().zip([0.5, 0.25, 0.25]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ties_go_to_the_deeper_route() {
    assert_eq!(route_tiebreak(&[1.0f64, 1.0, 0.0], 1), vec![false, true, false]);
    assert_eq!(route_tiebreak(&[3.0f64, 3.0, 3.0], 2), vec![false, true, true]);
}

proptest! {
    #[test]
    fn routing_identities(scores in prop::collection::vec(-20.0f64..20.0, 1..7), pick in 0usize..7) {
        let k = scores.len();
        let dense = weights(&scores, None);
        prop_assert!((dense.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let full = weights(&scores, Some(k));
        prop_assert_eq!(
            full.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            dense.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let t = pick % k + 1;
        let sparse = weights(&scores, Some(t));
        prop_assert_eq!(sparse.iter().filter(|&&x| x != 0.0).count(), t);
        prop_assert!((sparse.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn unselected_routes_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let s = g.param(Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.7, 1.5, 1.5, -0.2, 0.1]).unwrap());
    let w = topk_weights(&mut g, s, 2).unwrap();
    let coef = g.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 7.0]).unwrap());
    let p = g.mul(w, coef).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    let grad = g.grad(s).unwrap();
    let keep = [route_tiebreak(&[0.3, -1.0, 2.0, 0.7], 2), route_tiebreak(&[1.5, 1.5, -0.2, 0.1], 2)].concat();
    for (gv, kept) in grad.iter().zip(keep) {
        if !kept {
            assert_eq!(*gv, 0.0);
        } else {
            assert_ne!(*gv, 0.0);
        }
    }
}

#[test]
fn adds_routing_and_norm_params() {
    for norms in [true, false] {
        for k in 1..=4 {
            let mut m = TransformerModel::<f32>::new(small_config(0)).unwrap();
            let before = m.count_params(false, None);
            let cfg = ModConfig { k, use_trainable_norms: norms, ..Default::default() };
            let head = ModHead::attach(&mut m, cfg).unwrap();
            let d = 16;
            let expect = if norms { d * k + 2 * d * k } else { d * k };
            assert_eq!(m.count_params(false, None) - before, expect);
            assert_eq!(head.config().param_count(m.config()), expect);
            assert_eq!(m.params.get("mod.w_g").unwrap().value.dims(), &[16, k]);
            assert_eq!(m.params.get("mod.norm.0.gamma").is_some(), norms);
        }
    }
}

#[test]
fn attach_validates() {
    let mut m = TransformerModel::<f32>::new(small_config(0)).unwrap();
    assert!(matches!(ModHead::attach(&mut m, ModConfig { k: 5, ..Default::default() }), Err(CoreError::Config(_))));
    ModHead::attach(&mut m, ModConfig::default()).unwrap();
    assert!(matches!(ModHead::attach(&mut m, ModConfig::default()), Err(CoreError::State(_))));
}

#[test]
fn route_layout_and_final_exit() {
    let mut m = TransformerModel::<f64>::new(small_config(0)).unwrap();
    randomize_group(&mut m, ParamGroup::Base, 0.3, 1);
    let head = ModHead::attach(&mut m, ModConfig { k: 3, ..Default::default() }).unwrap();
    assert_eq!(head.routing_input_layer(), 1);
    assert_eq!((head.route_layer(0), head.route_layer(2)), (2, 4));
    let toks = random_tokens(10, 259, 1);
    let reference = final_logits(&m, &toks, 2, 5);
    let mut ctx = Ctx::new(&m.params, false);
    let trace = m.forward(&mut ctx, &toks, 2, 5).unwrap();
    let last = head.exit_logits(&m, &mut ctx, &trace, 2).unwrap();
    assert_eq!(ctx.g.value(last), &reference);
    assert!(head.exit_logits(&m, &mut ctx, &trace, 3).is_err());

    let out = head.forward(&m, &mut ctx, &trace).unwrap();
    assert_eq!(ctx.g.value(out.weights).dims(), &[2, 5, 3]);
    assert_eq!(ctx.g.value(out.ensemble).dims(), &[2, 5, 259]);
}

#[test]
fn ensemble_is_the_weighted_sum() {
    let mut g = Graph::<f64>::new();
    let l0 = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let l1 = g.constant(Tensor::new(vec![2, 3], vec![-1.0, 0.0, 1.0, 2.0, 2.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(vec![2, 2], vec![0.25, 0.75, 1.0, 0.0]).unwrap());
    let e = ensemble(&mut g, &[Some(l0), Some(l1)], w).unwrap();
    assert_eq!(g.value(e).data(), &[-0.5, 0.5, 1.5, 4.0, 5.0, 6.0]);
}

#[test]
fn untrained_norms_fall_back_to_final_norm() {
    let mut m = TransformerModel::<f64>::new(small_config(0)).unwrap();
    let head = ModHead::attach(&mut m, ModConfig { use_trainable_norms: false, ..Default::default() }).unwrap();
    let fin = m.final_norm();
    let r = head.route_norm(&m, 1);
    assert_eq!((r.gamma, r.beta), (fin.gamma, fin.beta));
}
