use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of `f` at `theta`:
/// `(f(theta + step e_i) - f(theta - step e_i)) / (2 step)` per coordinate.
pub fn finite_difference_gradient<F>(f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..theta.len()).collect();
    finite_difference_at(f, theta, step, &all)
}

/// Like [`finite_difference_gradient`] but only for the listed coordinates.
pub fn finite_difference_at<F>(
    mut f: F,
    theta: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = point[i];
        point[i] = orig + step;
        let up = f(&point);
        point[i] = orig - step;
        let down = f(&point);
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference",
            });
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let g = finite_difference_gradient(|t| t.iter().sum(), &[0.3, -2.0, 5.0], 1e-4).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_square_norm_returns_theta() {
        let theta = [0.5, -1.25, 3.0];
        let g = finite_difference_gradient(
            |t| 0.5 * t.iter().map(|x| x * x).sum::<f64>(),
            &theta,
            1e-3,
        )
        .unwrap();
        for (a, b) in g.iter().zip(theta) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r =
            finite_difference_gradient(|t| if t[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert!(finite_difference_gradient(|_| 0.0, &[0.0], 0.0).is_err());
    }
}
