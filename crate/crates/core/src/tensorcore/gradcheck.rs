use crate::error::{Error, Result};

/// Value and analytic gradient of a scalar function at a point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient of `f` at `theta` with central differences
/// `(f(θ+h·e) − f(θ−h·e)) / 2h`, coordinate by coordinate.
///
/// The relative error of a coordinate is
/// `|g_a − g_c| / max(|g_a| + |g_c|, 1e-8)`.
pub fn check_gradients<F>(mut f: F, theta: &[f64], h: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::validation(format!("step must be positive, got {h}")));
    }
    let base = f(theta)?;
    if !base.value.is_finite() {
        return Err(Error::Numeric(format!("f(θ) = {}", base.value)));
    }
    if base.gradient.len() != theta.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} parameters",
            base.gradient.len(),
            theta.len()
        )));
    }

    let mut point = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = f(&point)?.value;
        point[i] = theta[i] - h;
        let minus = f(&point)?.value;
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value perturbing coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * h);
        let analytic = base.gradient[i];
        let rel = (analytic - central).abs() / (analytic.abs() + central.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
        numeric.push(central);
    }

    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic: base.gradient,
        numeric,
    })
}
