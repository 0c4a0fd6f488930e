//! Central finite-difference oracle for analytic gradients.

use super::{Graph, Tensor, TensorError, Var};

/// Relative step; the actual step for a coordinate is `STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, input: &Tensor<f64>) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), false);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if !v.is_scalar() {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences at every coordinate of `input`.
pub fn finite_diff_check<F>(f: F, input: &Tensor<f64>, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let coords: Vec<usize> = (0..input.len()).collect();
    finite_diff_check_at(f, input, &coords, tolerance)
}

/// Same as [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(
    f: F,
    input: &Tensor<f64>,
    coords: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let mut probe = input.clone();
    let mut max_rel_error: f64 = 0.0;
    for &i in coords {
        let x0 = input.data()[i];
        let h = STEP * x0.abs().max(1.0);
        probe.data_mut()[i] = x0 + h;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        max_rel_error = max_rel_error.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(GradCheckReport { passed: max_rel_error < tolerance, max_rel_error, checked: coords.len() })
}
