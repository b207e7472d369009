use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-parameter `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub rel_errors: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub median_rel_error: f64,
    pub worst_index: usize,
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` is evaluated at `params ± h·e_i` for every coordinate `i`, all in
/// `f64`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be > 0, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut rel_errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let up = f(&x);
        x[i] = params[i] - h;
        let down = f(&x);
        x[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteObjective { index: i });
        }
        let num = (up - down) / (2.0 * h);
        let ana = analytic[i];
        let denom = ana.abs().max(num.abs()).max(1e-8);
        numeric.push(num);
        rel_errors.push((ana - num).abs() / denom);
    }
    let (worst_index, max_rel_error) = rel_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let mut sorted = rel_errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median_rel_error = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    Ok(GradCheckReport {
        rel_errors,
        numeric,
        max_rel_error,
        median_rel_error,
        worst_index,
    })
}
