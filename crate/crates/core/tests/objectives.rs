mod common;

use common::{random_tokens, randomize_group, small_config};
use modtune_autodiff::{Graph, Tensor};
use modtune_core::objectives::*;
use modtune_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(g: &mut Graph<f64>, rows: usize, v: usize, rng: &mut ChaCha8Rng, scale: f64) -> modtune_autodiff::Var {
    g.param(Tensor::randn(vec![rows, v], scale, rng))
}

#[test]
fn single_route_and_identical_routes_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f64>::new();
    let mask = vec![true; 4];
    let a = logits(&mut g, 4, 7, &mut rng, 1.0);
    assert!(distill_loss(&mut g, &[a], &mask, true).unwrap().is_none());
    let d = distill_loss(&mut g, &[a, a, a], &mask, true).unwrap().unwrap();
    assert_eq!(g.value(d).item(), 0.0);
}

#[test]
fn non_negative_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = rng.gen_range(2..5);
        let rows = rng.gen_range(1..4);
        let scale = rng.gen_range(0.1..10.0);
        let mut g = Graph::<f64>::new();
        let routes: Vec<_> = (0..k).map(|_| logits(&mut g, rows, 5, &mut rng, scale)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let d = distill_loss(&mut g, &routes, &mask, rng.gen_bool(0.5)).unwrap().unwrap();
        assert!(g.value(d).item() >= 0.0);
    }
}

#[test]
fn sum_of_per_route_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let routes: Vec<_> = (0..3).map(|_| logits(&mut g, 3, 6, &mut rng, 2.0)).collect();
    let mask = vec![true, false, true];
    let d = distill_loss(&mut g, &routes, &mask, true).unwrap().unwrap();
    let vals: Vec<_> = routes.iter().map(|&r| g.value(r).clone()).collect();
    let oracle = |p: &Tensor<f64>, q: &Tensor<f64>| {
        let mut total = 0.0;
        for r in [0, 2] {
            let sm = |row: &[f64]| {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                row.iter().map(|x| (x - m).exp() / z).collect::<Vec<_>>()
            };
            let (pp, qq) = (sm(p.row(r)), sm(q.row(r)));
            total += pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
        total / 2.0
    };
    let expect = oracle(&vals[0], &vals[2]) + oracle(&vals[1], &vals[2]);
    assert!((g.value(d).item() - expect).abs() < 1e-12);
    assert!((distill_value(&[&vals[0], &vals[1], &vals[2]], &mask) - expect).abs() < 1e-12);
}

#[test]
fn detached_teacher_gets_no_distill_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for detach in [true, false] {
        let mut g = Graph::<f64>::new();
        let routes: Vec<_> = (0..3).map(|_| logits(&mut g, 2, 5, &mut rng, 1.0)).collect();
        let d = distill_loss(&mut g, &routes, &[true, true], detach).unwrap().unwrap();
        g.backward(d).unwrap();
        let teacher_grad = g.grad(routes[2]).map(|s| s.iter().any(|&x| x != 0.0)).unwrap_or(false);
        assert_eq!(teacher_grad, !detach);
        assert!(g.grad(routes[0]).unwrap().iter().any(|&x| x != 0.0));
    }
}

#[test]
fn combination_arithmetic() {
    let mut g = Graph::<f64>::new();
    let task = g.constant(Tensor::scalar(2.0));
    let distill = g.constant(Tensor::scalar(0.5));
    let t = combined_loss(&mut g, task, Some(distill), 1e-4).unwrap();
    assert!((g.value(t).item() - 2.00005).abs() < 1e-15);
    let t0 = combined_loss(&mut g, task, Some(distill), 0.0).unwrap();
    assert_eq!(t0, task);
}

#[test]
fn all_masked_is_an_error() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(task_loss(&mut g, l, &[0, 1], &[false, false]), Err(CoreError::Validation(_))));
    assert!(matches!(distill_loss(&mut g, &[l, l], &[false, false], true), Err(CoreError::Validation(_))));
}

#[test]
fn zero_lambda_matches_task_only_gradients() {
    let mut m = TransformerModel::<f64>::new(small_config(5)).unwrap();
    randomize_group(&mut m, ParamGroup::Base, 0.2, 5);
    let head = ModHead::attach(&mut m, ModConfig { k: 3, lambda: 0.0, ..Default::default() }).unwrap();
    let toks = random_tokens(12, 259, 6);
    let targets = random_tokens(12, 259, 7);
    let mask = vec![true; 12];
    let grads = |head: &ModHead, with_distill_node: bool| {
        let mut ctx = Ctx::new(&m.params, true);
        let trace = m.forward(&mut ctx, &toks, 2, 6).unwrap();
        let out = head.forward(&m, &mut ctx, &trace).unwrap();
        let task = task_loss(&mut ctx.g, out.ensemble, &targets, &mask).unwrap();
        let loss = if with_distill_node {
            let d = distill_loss(&mut ctx.g, &out.route_logits, &mask, true).unwrap();
            combined_loss(&mut ctx.g, task, d, head.config().lambda).unwrap()
        } else {
            task
        };
        ctx.g.backward(loss).unwrap();
        ctx.param_grads()
    };
    let a = grads(&head, true);
    let b = grads(&head, false);
    assert_eq!(a, b);
}
