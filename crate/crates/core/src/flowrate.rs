//! Efficiency as a function of flow rate.
//!
//! For a fixed geometry the efficiency curve is modelled as a quadratic
//! `R(Q) = a·Q² + b·Q + c`, fitted by least squares through a handful of
//! measured operating points. Flow rates are divided by their largest
//! magnitude before the solve so that `Q²` in the thousands of m³/h does not
//! ruin the conditioning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{least_squares, NumericsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowRateError {
    #[error("a quadratic needs at least 3 points, got {found}")]
    InsufficientPoints { found: usize },
    #[error("a quadratic needs at least 3 distinct flow rates, got {distinct}")]
    DegenerateAbscissae { distinct: usize },
    #[error("non-finite value in point {index}")]
    NonFinite { index: usize },
    #[error("non-physical operating point: {0}")]
    NonPhysical(String),
}

pub type Result<T> = std::result::Result<T, FlowRateError>;

/// Quadratic efficiency curve with the points it was fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fitted_points: Vec<(f64, f64)>,
    /// `R − R̃(Q)` at each fitted point.
    pub residuals: Vec<f64>,
}

impl FlowCurve {
    pub fn evaluate(&self, q: f64) -> f64 {
        (self.a * q + self.b) * q + self.c
    }
}

pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<FlowCurve> {
    if points.len() < 3 {
        return Err(FlowRateError::InsufficientPoints { found: points.len() });
    }
    if let Some(index) = points.iter().position(|(q, r)| !q.is_finite() || !r.is_finite()) {
        return Err(FlowRateError::NonFinite { index });
    }
    let mut qs: Vec<f64> = points.iter().map(|p| p.0).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    if qs.len() < 3 {
        return Err(FlowRateError::DegenerateAbscissae { distinct: qs.len() });
    }
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let n = points.len();
    let mut design = Vec::with_capacity(3 * n);
    for (q, _) in points {
        let t = q / scale;
        design.extend_from_slice(&[t * t, t, 1.0]);
    }
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let coef = least_squares(&design, n, 3, &y).map_err(|e| match e {
        NumericsError::RankDeficient { .. } => FlowRateError::DegenerateAbscissae { distinct: qs.len() },
        other => FlowRateError::NonPhysical(other.to_string()),
    })?;
    let mut curve = FlowCurve {
        a: coef[0] / (scale * scale),
        b: coef[1] / scale,
        c: coef[2],
        fitted_points: points.to_vec(),
        residuals: Vec::new(),
    };
    curve.residuals = points.iter().map(|(q, r)| r - curve.evaluate(*q)).collect();
    Ok(curve)
}

/// Hydraulic efficiency `Q·ΔP / (C·Ω)` in SI units.
pub fn efficiency_from(q: f64, dp: f64, torque: f64, omega: f64) -> Result<f64> {
    if !(torque > 0.0) {
        return Err(FlowRateError::NonPhysical(format!("torque must be positive, got {torque}")));
    }
    if !(omega > 0.0) {
        return Err(FlowRateError::NonPhysical(format!("rotation speed must be positive, got {omega}")));
    }
    if !(q >= 0.0) {
        return Err(FlowRateError::NonPhysical(format!("flow rate must be nonnegative, got {q}")));
    }
    Ok(q * dp / (torque * omega))
}
