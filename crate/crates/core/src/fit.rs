//! Ordinary least-squares line fits for scaling exponents.

use serde::Serialize;

use crate::error::{LabError, Result};

/// A row left out of a fit, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedRow {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination, clamped to `[0, 1]`.
    pub r_squared: f64,
    pub n_points: usize,
    pub excluded: Vec<ExcludedRow>,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Fits `y = slope * x + intercept` to at least three points.
pub fn fit_line(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(LabError::Fit(format!(
            "need at least 3 points for a line fit, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(LabError::Fit("non-finite point in fit input".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let spread = points
        .iter()
        .map(|p| p.0.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    if sxx <= (1e-12 * spread).powi(2) * n {
        return Err(LabError::Fit(
            "abscissae are (numerically) all equal".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = points
            .iter()
            .map(|&(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
        excluded: Vec::new(),
    })
}
