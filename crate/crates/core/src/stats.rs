//! Small statistics helpers.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Sum of squared residuals.
    pub residual: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - residual / syy } else { 1.0 };
    LinearFit {
        slope,
        intercept,
        r2,
        residual,
    }
}

/// Fit of `log e = log C + β log ε`.
pub fn rate_fit(eps: &[f64], errors: &[f64]) -> Result<LinearFit> {
    if eps.len() < 2 || eps.len() != errors.len() {
        return Err(Error::Statistics("rate fit needs ≥ 2 matched points".into()));
    }
    if errors.iter().chain(eps).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Statistics("rate fit needs positive finite data".into()));
    }
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    Ok(linear_fit(&x, &y))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Mean and its standard error from `batches` contiguous batch means.
pub fn batch_means(x: &[f64], batches: usize) -> Result<(f64, f64)> {
    if batches < 2 || x.len() < 2 * batches {
        return Err(Error::Statistics(format!(
            "batch means need ≥ {} samples for {batches} batches",
            2 * batches
        )));
    }
    let size = x.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&x[b * size..(b + 1) * size])).collect();
    Ok((mean(&means), (variance(&means) / batches as f64).sqrt()))
}
