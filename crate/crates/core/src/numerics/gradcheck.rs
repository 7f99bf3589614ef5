//! Central-difference verification of analytic gradients.

use super::{NumericsError, ParamSet, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the analytic gradient returned by `f` against central
/// differences over every coordinate of `theta`; returns the maximum
/// relative error.
///
/// `f` maps a parameter vector to `(value, gradient)`.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor), NumericsError>,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_diff_check_at(f, theta, h, &coords)
}

/// As [`finite_diff_check`], restricted to the given coordinates.
pub fn finite_diff_check_at<F>(mut f: F, theta: &Tensor, h: f64, coords: &[usize]) -> Result<f64, NumericsError>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor), NumericsError>,
{
    let (_, analytic) = f(theta)?;
    if analytic.len() != theta.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "finite_diff_check",
            left: theta.shape().to_vec(),
            right: analytic.shape().to_vec(),
        });
    }
    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(NumericsError::NonFiniteGradient { coordinate: i });
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Finite-difference check of one tensor inside a parameter set.
///
/// `loss` evaluates a (perturbed) copy of `params` and returns the loss
/// together with the analytic gradient of tensor `index`.
pub fn check_param_gradient<F>(
    params: &ParamSet,
    index: usize,
    coords: &[usize],
    h: f64,
    mut loss: F,
) -> Result<f64, NumericsError>
where
    F: FnMut(&ParamSet) -> Result<(f64, Tensor), NumericsError>,
{
    let mut probe = params.clone();
    let f = |theta: &Tensor| {
        probe.get_mut(index).data_mut().copy_from_slice(theta.data());
        loss(&probe)
    };
    finite_diff_check_at(f, params.get(index), h, coords)
}
