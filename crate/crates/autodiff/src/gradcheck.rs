//! Central finite differences for checking analytic gradients.

/// Step used by every finite-difference check in this workspace.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error threshold gradients must meet in 64-bit.
pub const FD_REL_TOL: f64 = 1e-4;

/// Denominator floor for [`rel_err`]; gradients smaller than this are compared
/// absolutely at that scale.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(x: &mut [f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

/// Largest relative error over a gradient pair and the index where it occurs.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0.0, 0), |best, (i, e)| if e > best.0 { (e, i) } else { best })
}
