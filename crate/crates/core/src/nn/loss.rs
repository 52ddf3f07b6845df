//! Loss functions (mean-squared error, Gaussian negative log-likelihood) with
//! analytic gradients. Both losses average over output dimensions.

use super::NnError;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

fn check_same_len(a: &[f64], b: &[f64], context: &'static str) -> Result<(), NnError> {
    if a.is_empty() {
        return Err(NnError::EmptyInput { context });
    }
    if a.len() != b.len() {
        return Err(NnError::ShapeMismatch {
            context,
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    Ok(())
}

/// Mean over dimensions of squared error.
pub fn mse(prediction: &[f64], target: &[f64]) -> Result<f64, NnError> {
    check_same_len(prediction, target, "mse")?;
    let n = prediction.len() as f64;
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse`] with respect to the prediction.
pub fn mse_grad(prediction: &[f64], target: &[f64]) -> Result<Vec<f64>, NnError> {
    check_same_len(prediction, target, "mse_grad")?;
    let n = prediction.len() as f64;
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}

/// Mean over dimensions of `0.5·ln(2πσ²) + (target−μ)²/(2σ²)`.
///
/// Every `std` entry must be strictly positive; the σ head upstream enforces
/// this with a softplus plus a small floor.
pub fn gaussian_nll(mean: &[f64], std: &[f64], target: &[f64]) -> Result<f64, NnError> {
    check_same_len(mean, std, "gaussian_nll")?;
    check_same_len(mean, target, "gaussian_nll")?;
    let n = mean.len() as f64;
    let mut total = 0.0;
    for ((&m, &s), &t) in mean.iter().zip(std).zip(target) {
        if !(s > 0.0) {
            return Err(NnError::NonPositiveStd { value: s });
        }
        let r = t - m;
        total += 0.5 * (TWO_PI * s * s).ln() + r * r / (2.0 * s * s);
    }
    Ok(total / n)
}

/// Gradients of [`gaussian_nll`] with respect to (mean, std).
pub fn gaussian_nll_grad(
    mean: &[f64],
    std: &[f64],
    target: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    check_same_len(mean, std, "gaussian_nll_grad")?;
    check_same_len(mean, target, "gaussian_nll_grad")?;
    let n = mean.len() as f64;
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_std = Vec::with_capacity(std.len());
    for ((&m, &s), &t) in mean.iter().zip(std).zip(target) {
        if !(s > 0.0) {
            return Err(NnError::NonPositiveStd { value: s });
        }
        let r = m - t;
        d_mean.push(r / (s * s) / n);
        d_std.push((1.0 / s - r * r / (s * s * s)) / n);
    }
    Ok((d_mean, d_std))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_at_mean_with_unit_std_is_half_ln_two_pi() {
        let v = gaussian_nll(&[1.7], &[1.0], &[1.7]).unwrap();
        assert!((v - 0.5 * TWO_PI.ln()).abs() < 1e-15);
        assert!((v - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn nll_two_sigma_away_adds_two() {
        let v = gaussian_nll(&[0.0], &[1.0], &[2.0]).unwrap();
        assert!((v - (0.5 * TWO_PI.ln() + 2.0)).abs() < 1e-15);
        assert!((v - 2.9189).abs() < 1e-4);
    }

    #[test]
    fn nll_averages_over_dimensions() {
        let a = gaussian_nll(&[0.0], &[1.0], &[2.0]).unwrap();
        let b = gaussian_nll(&[0.3], &[0.7], &[-0.1]).unwrap();
        let both = gaussian_nll(&[0.0, 0.3], &[1.0, 0.7], &[2.0, -0.1]).unwrap();
        assert!((both - 0.5 * (a + b)).abs() < 1e-15);
    }

    #[test]
    fn nll_rejects_non_positive_std() {
        assert!(matches!(
            gaussian_nll(&[0.0], &[0.0], &[0.0]),
            Err(NnError::NonPositiveStd { .. })
        ));
        assert!(matches!(
            gaussian_nll(&[0.0], &[-1.0], &[0.0]),
            Err(NnError::NonPositiveStd { .. })
        ));
        assert!(gaussian_nll_grad(&[0.0], &[-1.0], &[0.0]).is_err());
    }

    #[test]
    fn nll_mean_gradient_is_residual_over_variance() {
        let (d_mean, _) = gaussian_nll_grad(&[1.5], &[0.5], &[1.0]).unwrap();
        assert!((d_mean[0] - (1.5 - 1.0) / 0.25).abs() < 1e-14);
    }

    #[test]
    fn mse_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        let g = mse_grad(&[3.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![2.0, 0.0]);
    }

    #[test]
    fn losses_reject_length_mismatch_and_empty() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
        assert!(gaussian_nll(&[0.0], &[1.0, 1.0], &[0.0]).is_err());
    }
}
