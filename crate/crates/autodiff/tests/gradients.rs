//! Every differentiable op against central finite differences, 64-bit, 20 random
//! instances each.

use modtune_autodiff::gradcheck::{central_difference, max_rel_err, FD_REL_TOL, FD_STEP};
use modtune_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Builds `sum(op(inputs) ⊙ w)` for a fixed random `w`, so every output element
/// contributes with a distinct weight.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let dims = g.value(out).dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = Tensor::randn(dims, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(vars[idx]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut flat = input.data().to_vec();
        let numeric = central_difference(&mut flat, FD_STEP, |x| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(
                    |(j, t)| {
                        if j == idx {
                            g.param(Tensor::new(t.dims().to_vec(), x.to_vec()).unwrap())
                        } else {
                            g.param(t.clone())
                        }
                    },
                )
                .collect();
            let loss = build(&mut g, &vars);
            g.value(loss).item()
        });
        let (err, at) = max_rel_err(&analytic, &numeric);
        assert!(
            err < FD_REL_TOL,
            "{name}: input {idx} element {at}: analytic {} vs numeric {} (rel err {err:e})",
            analytic[at],
            numeric[at]
        );
    }
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(dims.to_vec(), 1.0, rng)
}

fn for_instances(mut f: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

#[test]
fn elementwise_ops() {
    for_instances(|seed, rng| {
        let dims = [rng.gen_range(1..4), rng.gen_range(1..5)];
        let (a, b) = (randn(&dims, rng), randn(&dims, rng));
        check("add", vec![a.clone(), b.clone()], &move |g, v| {
            let o = g.add(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("sub", vec![a.clone(), b.clone()], &move |g, v| {
            let o = g.sub(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("mul", vec![a.clone(), b.clone()], &move |g, v| {
            let o = g.mul(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("scale", vec![a.clone()], &move |g, v| {
            let o = g.scale(v[0], -1.7);
            weighted(g, o, seed)
        });
        check("exp", vec![a.clone()], &move |g, v| {
            let o = g.exp(v[0]);
            weighted(g, o, seed)
        });
        check("gelu", vec![a.clone()], &move |g, v| {
            let o = g.gelu(v[0]);
            weighted(g, o, seed)
        });
        let pos = Tensor::new(dims.to_vec(), a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        check("log", vec![pos], &move |g, v| {
            let o = g.log(v[0]).unwrap();
            weighted(g, o, seed)
        });
        let bias = randn(&[dims[1]], rng);
        check("add_bias", vec![a.clone(), bias], &move |g, v| {
            let o = g.add_bias(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("sum/mean", vec![a], &move |g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            let p = g.mul(s, m).unwrap();
            g.sum(p)
        });
    });
}

#[test]
fn matmul_variants() {
    for_instances(|seed, rng| {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        check("matmul", vec![randn(&[m, k], rng), randn(&[k, n], rng)], &move |g, v| {
            let o = g.matmul(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("matmul 3d lhs", vec![randn(&[2, m, k], rng), randn(&[k, n], rng)], &move |g, v| {
            let o = g.matmul(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("matmul_t", vec![randn(&[m, k], rng), randn(&[n, k], rng)], &move |g, v| {
            let o = g.matmul_t(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("t_matmul", vec![randn(&[k, m], rng), randn(&[k, n], rng)], &move |g, v| {
            let o = g.t_matmul(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("bmm", vec![randn(&[2, 3, m, k], rng), randn(&[2, 3, k, n], rng)], &move |g, v| {
            let o = g.bmm(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
        check("bmm_t", vec![randn(&[3, m, k], rng), randn(&[3, n, k], rng)], &move |g, v| {
            let o = g.bmm_t(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
    });
}

#[test]
fn matmul_5x4_by_4x3_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    check("matmul 5x4x3", vec![randn(&[5, 4], &mut rng), randn(&[4, 3], &mut rng)], &|g, v| {
        let o = g.matmul(v[0], v[1]).unwrap();
        g.sum(o)
    });
}

#[test]
fn shape_ops() {
    for_instances(|seed, rng| {
        let dims = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        check("permute", vec![randn(&dims, rng)], &move |g, v| {
            let o = g.permute(v[0], &[2, 0, 1]).unwrap();
            weighted(g, o, seed)
        });
        check("transpose", vec![randn(&dims[..2], rng)], &move |g, v| {
            let o = g.transpose(v[0]).unwrap();
            weighted(g, o, seed)
        });
        let total: usize = dims.iter().product();
        check("reshape", vec![randn(&dims, rng)], &move |g, v| {
            let o = g.reshape(v[0], &[total]).unwrap();
            weighted(g, o, seed)
        });
        check("concat", vec![randn(&[2, dims[1]], rng), randn(&[3, dims[1]], rng)], &move |g, v| {
            let o = g.concat(&[v[0], v[1]]).unwrap();
            weighted(g, o, seed)
        });
        let col = rng.gen_range(0..dims[2]);
        check("column", vec![randn(&dims, rng)], &move |g, v| {
            let o = g.column(v[0], col).unwrap();
            weighted(g, o, seed)
        });
        check("scale_rows", vec![randn(&[dims[0], 5], rng), randn(&[dims[0], 1], rng)], &move |g, v| {
            let o = g.scale_rows(v[0], v[1]).unwrap();
            weighted(g, o, seed)
        });
    });
}

#[test]
fn nn_ops() {
    for_instances(|seed, rng| {
        let rows = rng.gen_range(1..5);
        let width = rng.gen_range(2..7);
        check("softmax", vec![randn(&[rows, width], rng)], &move |g, v| {
            let o = g.softmax(v[0]);
            weighted(g, o, seed)
        });
        let gamma = Tensor::new(vec![width], (0..width).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        check("layer_norm", vec![randn(&[rows, width], rng), gamma, randn(&[width], rng)], &move |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted(g, o, seed)
        });
        let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        check("embedding", vec![randn(&[4, width], rng)], &move |g, v| {
            let o = g.embedding(v[0], &ids).unwrap();
            weighted(g, o, seed)
        });
        check("causal_mask+softmax", vec![randn(&[2, 4, 4], rng)], &move |g, v| {
            let m = g.causal_mask(v[0]).unwrap();
            let o = g.softmax(m);
            weighted(g, o, seed)
        });
        let keep: Vec<bool> = (0..rows * width).map(|i| i % width == 0 || rng.gen_bool(0.5)).collect();
        check("mask_fill+softmax", vec![randn(&[rows, width], rng)], &move |g, v| {
            let m = g.mask_fill(v[0], &keep).unwrap();
            let o = g.softmax(m);
            weighted(g, o, seed)
        });
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..width)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        check("cross_entropy", vec![randn(&[rows, width], rng)], &move |g, v| {
            g.cross_entropy(v[0], &targets, Some(&mask)).unwrap()
        });
        check("kl_div", vec![randn(&[rows, width], rng), randn(&[rows, width], rng)], &|g, v| {
            let p = g.softmax(v[0]);
            let q = g.softmax(v[1]);
            g.kl_div(p, q, None).unwrap()
        });
    });
}
