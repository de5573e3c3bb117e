//! Central finite-difference verification of hand-written gradients.

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate where it occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is (near) zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-2;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of the scalar function
/// `f` around `x`, perturbing one coordinate at a time by `±step`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "one analytic gradient entry per input");
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck { max_rel_error: err, worst_index: i, analytic: analytic[i], numeric };
        }
    }
    worst
}

/// [`grad_check`] for functions evaluated in single precision. The probe
/// values are rounded to `f32` before every evaluation, so that the
/// perturbation actually seen by `f` is used in the difference quotient.
pub fn grad_check_f32<F>(mut f: F, x: &[f32], analytic: &[f32], step: f32) -> GradCheck
where
    F: FnMut(&[f32]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "one analytic gradient entry per input");
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let hi = x[i] + step;
        let lo = x[i] - step;
        probe[i] = hi;
        let up = f(&probe);
        probe[i] = lo;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (hi as f64 - lo as f64);
        let err = relative_error(analytic[i] as f64, numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck { max_rel_error: err, worst_index: i, analytic: analytic[i] as f64, numeric };
        }
    }
    worst
}

/// [`grad_check_f32`] with one Richardson step: the quotients at `step` and
/// `step / 2` are combined as `(4·D(h/2) − D(h)) / 3`, which cancels the
/// `h²` truncation term. This allows steps large enough that f32 rounding
/// of the function value stays negligible for strongly nonlinear ops.
pub fn grad_check_f32_extrapolated<F>(mut f: F, x: &[f32], analytic: &[f32], step: f32) -> GradCheck
where
    F: FnMut(&[f32]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "one analytic gradient entry per input");
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.to_vec();
    let mut quotient = |probe: &mut Vec<f32>, i: usize, h: f32| {
        let (hi, lo) = (x[i] + h, x[i] - h);
        probe[i] = hi;
        let up = f(probe);
        probe[i] = lo;
        let down = f(probe);
        probe[i] = x[i];
        (up - down) / (hi as f64 - lo as f64)
    };
    for i in 0..x.len() {
        let coarse = quotient(&mut probe, i, step);
        let fine = quotient(&mut probe, i, step / 2.0);
        let numeric = (4.0 * fine - coarse) / 3.0;
        let err = relative_error(analytic[i] as f64, numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck { max_rel_error: err, worst_index: i, analytic: analytic[i] as f64, numeric };
        }
    }
    worst
}

/// Deterministic pseudo-random vector in `[-1, 1]` used to reduce a
/// tensor-valued op to a scalar (`<probe, op(x)>`).
pub fn probe_vector(n: usize, seed: u64) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// `<a, b>` accumulated in double precision.
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let coeffs = [0.5, -2.0, 3.25, 7.0];
        let f = |x: &[f64]| x.iter().zip(&coeffs).map(|(a, b)| a * b).sum::<f64>();
        let r = grad_check(f, &[1.0, 2.0, -3.0, 0.1], &coeffs, 1e-6);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink() {
        let step = 1e-3f32;
        let x = [0.5f32, -0.7, 1.3, -0.02, 0.9];
        assert!(x.iter().all(|v| v.abs() > 10.0 * step));
        let analytic: Vec<f32> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let f = |x: &[f32]| x.iter().map(|&v| v.max(0.0) as f64).sum::<f64>();
        assert!(grad_check_f32(f, &x, &analytic, step).max_rel_error < 1e-3);
    }

    #[test]
    fn extrapolation_cancels_curvature() {
        // cubic: plain central differences are off by h², the extrapolated
        // quotient is exact up to rounding
        let f = |x: &[f32]| (x[0] as f64).powi(3);
        let plain = grad_check_f32(f, &[1.0], &[3.0], 0.1);
        let extra = grad_check_f32_extrapolated(f, &[1.0], &[3.0], 0.1);
        assert!(plain.max_rel_error > 1e-3);
        assert!(extra.max_rel_error < 1e-5, "{extra:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = grad_check(f, &[3.0], &[5.0], 1e-5);
        assert!(r.max_rel_error > 0.1);
    }
}
