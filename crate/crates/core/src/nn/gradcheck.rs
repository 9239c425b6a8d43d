use super::{NnError, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `theta`.
pub fn finite_difference_check<F>(theta: &[f64], analytic: &[f64], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_difference_check_coords(theta, analytic, &coords, h, f)
}

/// As [`finite_difference_check`], restricted to `coords`.
pub fn finite_difference_check_coords<F>(
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(super::shape_err("finite_difference_check", "gradient and parameter lengths differ"));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(NnError::NonFinite(format!("coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Steps tried by [`finite_difference_check_piecewise`] after the first,
/// each a tenth of the previous.
pub const MAX_STEP_REDUCTIONS: usize = 4;

/// As [`finite_difference_check_coords`] for a piecewise-smooth `f` that
/// also returns its piece (for example [`Tape::relu_pattern`](super::Tape::relu_pattern)).
/// When `theta + h` or `theta - h` lands on a different piece than `theta`,
/// the step shrinks tenfold; a coordinate still straddling a boundary after
/// [`MAX_STEP_REDUCTIONS`] reductions is an error.
pub fn finite_difference_check_piecewise<F, P>(
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, P),
    P: PartialEq,
{
    if analytic.len() != theta.len() {
        return Err(super::shape_err("finite_difference_check", "gradient and parameter lengths differ"));
    }
    let (_, piece) = f(theta);
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let mut step = h;
        let numeric = loop {
            probe[i] = theta[i] + step;
            let (up, up_piece) = f(&probe);
            probe[i] = theta[i] - step;
            let (down, down_piece) = f(&probe);
            probe[i] = theta[i];
            if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
                return Err(NnError::NonFinite(format!("coordinate {i}")));
            }
            if up_piece == piece && down_piece == piece {
                break (up - down) / (2.0 * step);
            }
            if step < h * 0.1f64.powi(MAX_STEP_REDUCTIONS as i32) * 1.5 {
                return Err(NnError::NonFinite(format!("coordinate {i} sits on a kink at step {step:e}")));
            }
            step *= 0.1;
        };
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
