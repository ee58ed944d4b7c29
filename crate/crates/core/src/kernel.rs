//! Stationary separable covariance kernels.
//!
//! The covariance between two points is `σ² · ∏ⱼ ρ(|xⱼ − yⱼ|; θⱼ)` where `ρ` is a
//! one-dimensional correlation from the chosen family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, PosDefMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: kernel has {expected} dimensions, point has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Lower and upper correlation-length bounds for estimation, as multiples of
/// the per-dimension input range.
pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Matern52,
    Gaussian,
    Exponential,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Matern52 => "matern52",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Exponential => "exponential",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "matern52" | "matern5_2" => Ok(KernelFamily::Matern52),
            "gaussian" | "gauss" => Ok(KernelFamily::Gaussian),
            "exponential" | "exp" => Ok(KernelFamily::Exponential),
            other => Err(KernelError::InvalidParameter(format!("unknown kernel family `{other}`"))),
        }
    }
}

impl KernelFamily {
    /// Correlation without argument checks. `distance ≥ 0`, `theta > 0`.
    #[inline]
    pub(crate) fn correlation(self, distance: f64, theta: f64) -> f64 {
        match self {
            KernelFamily::Matern52 => {
                let r = 5.0_f64.sqrt() * distance / theta;
                (1.0 + r + r * r / 3.0) * (-r).exp()
            }
            KernelFamily::Gaussian => {
                let r = distance / theta;
                (-0.5 * r * r).exp()
            }
            KernelFamily::Exponential => (-distance / theta).exp(),
        }
    }
}

/// One-dimensional correlation `ρ_θ(d)` of the given family.
pub fn correlation_1d(family: KernelFamily, distance: f64, theta: f64) -> Result<f64> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(KernelError::InvalidParameter(format!("lengthscale must be positive, got {theta}")));
    }
    if !(distance >= 0.0) {
        return Err(KernelError::InvalidParameter(format!("distance must be nonnegative, got {distance}")));
    }
    Ok(family.correlation(distance, theta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawKernelSpec {
    family: KernelFamily,
    lengthscales: Vec<f64>,
    process_variance: f64,
}

/// Kernel family, per-dimension correlation lengths and process variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec", into = "RawKernelSpec")]
pub struct KernelSpec {
    family: KernelFamily,
    lengthscales: Vec<f64>,
    process_variance: f64,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = KernelError;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(raw.family, raw.lengthscales, raw.process_variance)
    }
}

impl From<KernelSpec> for RawKernelSpec {
    fn from(spec: KernelSpec) -> Self {
        RawKernelSpec {
            family: spec.family,
            lengthscales: spec.lengthscales,
            process_variance: spec.process_variance,
        }
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>, process_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(KernelError::InvalidParameter("at least one lengthscale is required".into()));
        }
        if let Some(t) = lengthscales.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(KernelError::InvalidParameter(format!("lengthscale must be positive, got {t}")));
        }
        if !(process_variance > 0.0) || !process_variance.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "process variance must be positive, got {process_variance}"
            )));
        }
        Ok(Self {
            family,
            lengthscales,
            process_variance,
        })
    }

    /// Matérn-5/2 kernel with the same lengthscale in every dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, process_variance: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern52, vec![lengthscale; dim], process_variance)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn process_variance(&self) -> f64 {
        self.process_variance
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn with_process_variance(&self, process_variance: f64) -> Result<Self> {
        Self::new(self.family, self.lengthscales.clone(), process_variance)
    }

    /// Correlation (unit-variance covariance) between two points of matching
    /// dimension. Callers check dimensions.
    #[inline]
    pub(crate) fn correlation_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut rho = 1.0;
        for ((a, b), t) in x.iter().zip(y).zip(&self.lengthscales) {
            rho *= self.family.correlation((a - b).abs(), *t);
        }
        rho
    }

    fn check_dim(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim() {
            return Err(KernelError::DimensionMismatch {
                expected: self.dim(),
                found: point.len(),
            });
        }
        Ok(())
    }
}

pub fn covariance(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.check_dim(x)?;
    spec.check_dim(y)?;
    Ok(spec.process_variance * spec.correlation_unchecked(x, y))
}

/// Covariance matrix `R_N` over a set of points.
pub fn covariance_matrix(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<PosDefMatrix> {
    if points.is_empty() {
        return Err(KernelError::InvalidParameter("at least one point is required".into()));
    }
    for p in points {
        spec.check_dim(p)?;
    }
    let s2 = spec.process_variance;
    Ok(PosDefMatrix::from_symmetric_fn(points.len(), |i, j| {
        if i == j {
            s2
        } else {
            s2 * spec.correlation_unchecked(&points[i], &points[j])
        }
    })?)
}

/// Covariance vector `r_N(x₀)` between `x0` and each point.
pub fn covariance_vector(spec: &KernelSpec, points: &[Vec<f64>], x0: &[f64]) -> Result<Vec<f64>> {
    spec.check_dim(x0)?;
    points
        .iter()
        .map(|p| {
            spec.check_dim(p)?;
            Ok(spec.process_variance * spec.correlation_unchecked(x0, p))
        })
        .collect()
}

/// Estimation bounds for a correlation length over an input range.
pub fn lengthscale_bounds(range: f64) -> (f64, f64) {
    (LENGTHSCALE_BOUNDS.0 * range, LENGTHSCALE_BOUNDS.1 * range)
}
