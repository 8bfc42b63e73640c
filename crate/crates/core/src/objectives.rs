//! Training losses for the routed head.

use modtune_autodiff::{kernels, Float, Graph, Tensor, Var};

use crate::error::{CoreError, Result};

/// Mean next-token cross-entropy over unmasked positions. `logits` is `[.., V]` with
/// one row per target.
pub fn task_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    check_mask(targets.len(), mask)?;
    let rows = g.value(logits).rows();
    let v = g.value(logits).last_dim();
    let flat = g.reshape(logits, &[rows, v])?;
    Ok(g.cross_entropy(flat, targets, Some(mask))?)
}

/// `Σ_{i<k-1} KL(P_i ‖ P_{k-1})` where `P_i = softmax(route_logits[i])`; each term is a
/// mean over unmasked positions. `None` when there is a single route.
pub fn distill_loss<T: Float>(
    g: &mut Graph<T>,
    route_logits: &[Var],
    mask: &[bool],
    detach_teacher: bool,
) -> Result<Option<Var>> {
    let k = route_logits.len();
    if k < 2 {
        return Ok(None);
    }
    let flat = |g: &mut Graph<T>, l: Var| -> Result<Var> {
        let rows = g.value(l).rows();
        let v = g.value(l).last_dim();
        Ok(g.reshape(l, &[rows, v])?)
    };
    let teacher = flat(g, route_logits[k - 1])?;
    check_mask(g.value(teacher).rows(), mask)?;
    let teacher = if detach_teacher { g.detach(teacher) } else { teacher };
    let q = g.softmax(teacher);
    let mut total: Option<Var> = None;
    for &l in &route_logits[..k - 1] {
        let s = flat(g, l)?;
        let p = g.softmax(s);
        let term = g.kl_div(p, q, Some(mask))?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total)
}

/// `task + λ·distill`. With `λ = 0` or no distillation term the task loss is returned
/// as is, so the graph carries no distillation branch.
pub fn combined_loss<T: Float>(g: &mut Graph<T>, task: Var, distill: Option<Var>, lambda: f64) -> Result<Var> {
    match distill {
        Some(d) if lambda != 0.0 => {
            let scaled = g.scale(d, T::from_f64(lambda));
            Ok(g.add(task, scaled)?)
        }
        _ => Ok(task),
    }
}

fn check_mask(rows: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != rows {
        return Err(CoreError::Validation(format!("mask has {} entries for {rows} positions", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(CoreError::Validation("every position is masked".into()));
    }
    Ok(())
}

/// Cross-entropy of `logits` rows against `targets`, computed in f64 off the graph.
pub fn cross_entropy_value<T: Float>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut row = vec![0.0f64; logits.last_dim()];
    for r in (0..logits.rows()).filter(|&r| mask[r]) {
        for (o, x) in row.iter_mut().zip(logits.row(r)) {
            *o = x.as_f64();
        }
        total += kernels::log_sum_exp(&row) - row[targets[r]];
        count += 1;
    }
    total / count as f64
}

/// Mean over unmasked rows of `KL(softmax(p_logits) ‖ softmax(q_logits))`, off the graph.
pub fn kl_value<T: Float>(p_logits: &Tensor<T>, q_logits: &Tensor<T>, mask: &[bool]) -> f64 {
    let v = p_logits.last_dim();
    let (mut p, mut q) = (vec![0.0f64; v], vec![0.0f64; v]);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in (0..p_logits.rows()).filter(|&r| mask[r]) {
        for i in 0..v {
            p[i] = p_logits.row(r)[i].as_f64();
            q[i] = q_logits.row(r)[i].as_f64();
        }
        kernels::softmax_row(&mut p);
        kernels::softmax_row(&mut q);
        total += p
            .iter()
            .zip(&q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi / qi.max(modtune_autodiff::KL_Q_FLOOR)).ln())
            .sum::<f64>();
        count += 1;
    }
    total / count as f64
}

/// Summed distillation value over the student routes, off the graph.
pub fn distill_value<T: Float>(route_logits: &[&Tensor<T>], mask: &[bool]) -> f64 {
    let k = route_logits.len();
    if k < 2 {
        return 0.0;
    }
    route_logits[..k - 1].iter().map(|l| kl_value(l, route_logits[k - 1], mask)).sum()
}
