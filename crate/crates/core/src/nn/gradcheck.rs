//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e−8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference derivative of `f` along coordinate `i` of `theta`.
pub fn numeric_partial(f: &impl Fn(&[f64]) -> f64, theta: &[f64], i: usize, h: f64) -> f64 {
    let mut x = theta.to_vec();
    x[i] = theta[i] + h;
    let up = f(&x);
    x[i] = theta[i] - h;
    let down = f(&x);
    (up - down) / (2.0 * h)
}

/// Max relative error between an analytic gradient and central differences
/// of a plain function.
pub fn check_fn(f: impl Fn(&[f64]) -> f64, analytic: &[f64], theta: &[f64]) -> f64 {
    (0..theta.len())
        .map(|i| relative_error(analytic[i], numeric_partial(&f, theta, i, FD_STEP)))
        .fold(0.0, f64::max)
}

/// `f` is treated as non-differentiable between `θ − h` and `θ + h` when its
/// one-sided slopes there disagree by more than this fraction of their size
/// (plus [`KINK_SLACK`]). Smooth functions disagree by about `h·|f''|`.
pub const KINK_TOL: f64 = 1e-2;
pub const KINK_SLACK: f64 = 1e-3;

/// True when the forward and backward one-sided slopes around `center`
/// disagree, as at a ReLU hinge crossed by the perturbation.
pub fn straddles_kink(down: f64, center: f64, up: f64, h: f64) -> bool {
    let fwd = (up - center) / h;
    let bwd = (center - down) / h;
    (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()) + KINK_SLACK
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates left out because a non-differentiable point lies within
    /// the finite-difference step.
    pub kinks: usize,
}

/// Compares backpropagated parameter gradients of the scalar built by
/// `build` against central differences.
///
/// With `per_param = Some(k)` at most `k` coordinates of each parameter are
/// checked, chosen with `seed`.
pub fn check_graph(
    store: &mut ParamStore,
    build: impl Fn(&mut Graph) -> Result<Var>,
    per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut grads = store.zero_grads();
    {
        let mut g = Graph::new(store);
        let root = build(&mut g)?;
        g.backward(root, &mut grads);
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let root = build(&mut g)?;
        Ok(g.value(root).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    let center = eval(store)?;
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let len = store.value(id).len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + FD_STEP;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - FD_STEP;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            if straddles_kink(down, center, up, FD_STEP) {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id)[c];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let a = [0.3, -1.2, 4.0];
        let f = |x: &[f64]| x.iter().zip(&a).map(|(x, a)| x * a).sum::<f64>() + 2.0;
        let err = check_fn(f, &a, &[1.0, 2.0, -3.0]);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let theta = [0.5, -1.5, 2.25, 3.0];
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let err = check_fn(|x: &[f64]| x.iter().map(|v| v * v).sum(), &grad, &theta);
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn relu_hinge_is_a_kink_and_curvature_is_not() {
        let h = FD_STEP;
        let relu = |x: f64| x.max(0.0);
        assert!(straddles_kink(
            relu(-h / 2.0 - h),
            relu(-h / 2.0),
            relu(-h / 2.0 + h),
            h
        ));
        let sq = |x: f64| 50.0 * x * x;
        assert!(!straddles_kink(sq(1.0 - h), sq(1.0), sq(1.0 + h), h));
        assert!(!straddles_kink(relu(1.0 - h), relu(1.0), relu(1.0 + h), h));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let theta = [1.0, 2.0];
        let err = check_fn(|x: &[f64]| x[0] * x[1], &[2.0, 2.0], &theta);
        assert!(err > 0.1);
    }
}
