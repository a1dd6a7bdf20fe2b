//! Power-law fits for learning curves: direct log-log regression, and
//! the exponent recovered from the bound/error ratio via C' = 1/(1 - alpha).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("need at least 3 points in the fit range, have {0}")]
    TooFewPoints(usize),
    #[error("non-positive value {value} at m = {m}")]
    NonPositiveValue { m: usize, value: f64 },
    #[error("m values must be strictly increasing (violation at index {0})")]
    UnorderedGrid(usize),
    #[error("curves do not share an m grid")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    EmpiricalError,
    Bound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningCurve {
    /// (m, value, stderr) with m strictly increasing, values positive.
    pub points: Vec<(usize, f64, f64)>,
    pub kind: CurveKind,
}

impl LearningCurve {
    pub fn new(points: Vec<(usize, f64, f64)>, kind: CurveKind) -> Result<Self, CurveError> {
        for (i, &(m, value, _)) in points.iter().enumerate() {
            if i > 0 && m <= points[i - 1].0 {
                return Err(CurveError::UnorderedGrid(i));
            }
            if value <= 0.0 || !value.is_finite() {
                return Err(CurveError::NonPositiveValue { m, value });
            }
        }
        Ok(LearningCurve { points, kind })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// value ~ b m^-alpha
    pub alpha: f64,
    pub log_prefactor: f64,
    pub alpha_stderr: f64,
    pub prefactor_stderr: f64,
    pub fit_range: (usize, usize),
    pub r_squared: f64,
}

/// Ordinary least squares of ln(value) on ln(m); alpha is the negated
/// slope. Unweighted by default; `weighted` uses inverse relative
/// variance from the stderr column.
pub fn fit_power_law(
    curve: &LearningCurve,
    m_min: Option<usize>,
    weighted: bool,
) -> Result<PowerLawFit, CurveError> {
    let lo = m_min.unwrap_or(0);
    let pts: Vec<&(usize, f64, f64)> = curve.points.iter().filter(|&&(m, _, _)| m >= lo).collect();
    if pts.len() < 3 {
        return Err(CurveError::TooFewPoints(pts.len()));
    }
    let n = pts.len() as f64;
    let w = |p: &(usize, f64, f64)| -> f64 {
        if weighted && p.2 > 0.0 {
            // variance of ln(value) is (stderr/value)^2
            (p.1 / p.2).powi(2)
        } else {
            1.0
        }
    };
    let sw: f64 = pts.iter().map(|p| w(p)).sum();
    let mean_x: f64 = pts.iter().map(|p| w(p) * (p.0 as f64).ln()).sum::<f64>() / sw;
    let mean_y: f64 = pts.iter().map(|p| w(p) * p.1.ln()).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for p in &pts {
        let dx = (p.0 as f64).ln() - mean_x;
        let dy = p.1.ln() - mean_y;
        let wi = w(p);
        sxx += wi * dx * dx;
        sxy += wi * dx * dy;
        syy += wi * dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1.ln() - (intercept + slope * (p.0 as f64).ln());
            w(p) * e * e
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    // residual variance with n - 2 degrees of freedom
    let var = if pts.len() > 2 {
        ss_res / (n - 2.0)
    } else {
        0.0
    };
    let slope_stderr = (var / sxx).sqrt();
    let intercept_stderr = (var * (1.0 / sw + mean_x * mean_x / sxx)).sqrt();
    Ok(PowerLawFit {
        alpha: -slope,
        log_prefactor: intercept,
        alpha_stderr: slope_stderr,
        prefactor_stderr: intercept_stderr,
        fit_range: (pts[0].0, pts[pts.len() - 1].0),
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatioExponent {
    pub c_prime: f64,
    pub alpha: f64,
    /// True when c_prime <= 1, outside the domain of C' = 1/(1 - alpha)
    /// for decaying curves; alpha is then reported as <= 0.
    pub domain_warning: bool,
}

/// Exponent from the bound/error ratio: C' = mean over the shared grid
/// of bound(m)/error(m), then alpha = 1 - 1/C'. `geometric` switches
/// the ratio aggregation to a geometric mean.
pub fn exponent_from_ratio(
    bound_curve: &LearningCurve,
    error_curve: &LearningCurve,
    m_min: Option<usize>,
    geometric: bool,
) -> Result<RatioExponent, CurveError> {
    let lo = m_min.unwrap_or(0);
    let b: Vec<&(usize, f64, f64)> = bound_curve
        .points
        .iter()
        .filter(|&&(m, _, _)| m >= lo)
        .collect();
    let e: Vec<&(usize, f64, f64)> = error_curve
        .points
        .iter()
        .filter(|&&(m, _, _)| m >= lo)
        .collect();
    if b.len() != e.len() || b.is_empty() || b.iter().zip(&e).any(|(x, y)| x.0 != y.0) {
        return Err(CurveError::GridMismatch);
    }
    let ratios: Vec<f64> = b.iter().zip(&e).map(|(x, y)| x.1 / y.1).collect();
    let c_prime = if geometric {
        (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let alpha = 1.0 - 1.0 / c_prime;
    let domain_warning = c_prime <= 1.0;
    if domain_warning {
        log::warn!(
            "bound/error ratio {c_prime} <= 1; alpha = {alpha} is outside the power-law domain"
        );
    }
    Ok(RatioExponent {
        c_prime,
        alpha,
        domain_warning,
    })
}
