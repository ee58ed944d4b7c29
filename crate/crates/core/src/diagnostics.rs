//! Surrogate quality metrics and batch diagnostics.
//!
//! Leave-one-out predictions are scored by R², RMSE, the relative maximum
//! absolute error and the 95 % coverage rate. Proposed batches are inspected
//! through their conditional correlation matrix and the posterior
//! distribution of the improvement they realize.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kriging::{GpModel, KrigingError, PosteriorSampler};
use crate::numerics::{least_squares, NumericsError, RandomStream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("design matrix is rank deficient (column {column})")]
    RankDeficient { column: usize },
    #[error(transparent)]
    Kriging(#[from] KrigingError),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Half-width multiplier of the 95 % Gaussian interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_squared: f64,
    pub rmse: f64,
    pub rma: f64,
    pub cr95: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn population_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Scores predictions `yhat` with standard deviations `sd` against `y`.
pub fn loo_metrics(y: &[f64], yhat: &[f64], sd: &[f64]) -> Result<MetricsReport> {
    let n = y.len();
    if yhat.len() != n || sd.len() != n {
        return Err(DiagnosticsError::InvalidInput(format!(
            "lengths differ: {n} observations, {} predictions, {} deviations",
            yhat.len(),
            sd.len()
        )));
    }
    if n < 2 {
        return Err(DiagnosticsError::InvalidInput("need at least two observations".into()));
    }
    let s = population_sd(y);
    if !(s > 0.0) {
        return Err(DiagnosticsError::DegenerateData("observations have zero spread".into()));
    }
    let ybar = mean(y);
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
    let max_abs = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let covered = (0..n).filter(|&i| (y[i] - yhat[i]).abs() <= Z95 * sd[i]).count();
    Ok(MetricsReport {
        r_squared: 1.0 - ss_res / ss_tot,
        rmse: (ss_res / n as f64).sqrt(),
        rma: max_abs / s,
        cr95: covered as f64 / n as f64,
    })
}

/// Posterior correlation matrix of a batch.
pub fn conditional_correlation(model: &GpModel, xnew: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cov = model.posterior_cov(xnew)?;
    let floor = 1e-14 * model.process_variance();
    let m = xnew.len();
    if let Some(i) = (0..m).find(|&i| cov[i][i] <= floor) {
        return Err(DiagnosticsError::DegenerateData(format!("point {i} has no posterior variance")));
    }
    let sd: Vec<f64> = (0..m).map(|i| cov[i][i].sqrt()).collect();
    Ok((0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { 1.0 } else { (cov[i][j] / (sd[i] * sd[j])).clamp(-1.0, 1.0) })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EiDistribution {
    /// Realized improvements `(maxⱼ Yⱼ − best)⁺`, one per posterior draw.
    pub samples: Vec<f64>,
    /// `maxⱼ Ŷⱼ − best` using the predictive means.
    pub a_posteriori: f64,
}

impl EiDistribution {
    pub fn mean(&self) -> f64 {
        mean(&self.samples)
    }

    /// Counts per bin of width `bin_width` starting at zero.
    pub fn histogram(&self, bin_width: f64) -> Vec<usize> {
        let top = self.samples.iter().copied().fold(0.0, f64::max);
        let bins = (top / bin_width).floor() as usize + 1;
        let mut counts = vec![0; bins];
        for s in &self.samples {
            counts[((s / bin_width).floor() as usize).min(bins - 1)] += 1;
        }
        counts
    }
}

/// Joint posterior draws of the improvement a batch realizes over
/// `doe_best`.
pub fn ei_posterior_distribution(
    model: &GpModel,
    batch: &[Vec<f64>],
    doe_best: f64,
    n_draws: usize,
    rng: &mut RandomStream,
) -> Result<EiDistribution> {
    if batch.is_empty() {
        return Err(DiagnosticsError::InvalidInput("batch is empty".into()));
    }
    if n_draws < 100 {
        return Err(DiagnosticsError::InvalidInput(format!("need at least 100 draws, got {n_draws}")));
    }
    let sampler = PosteriorSampler::new(model, batch)?;
    let samples = (0..n_draws)
        .map(|_| {
            let best = sampler.draw(rng).into_iter().fold(f64::NEG_INFINITY, f64::max);
            (best - doe_best).max(0.0)
        })
        .collect();
    let a_posteriori = sampler.means().iter().copied().fold(f64::NEG_INFINITY, f64::max) - doe_best;
    Ok(EiDistribution { samples, a_posteriori })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    /// Intercept followed by one slope per input column.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
}

/// Ordinary least squares `y ≈ β₀ + Σ βⱼ xⱼ`.
pub fn fit_linear_baseline(x: &[Vec<f64>], y: &[f64]) -> Result<LinearBaseline> {
    let n = y.len();
    if x.len() != n || n == 0 {
        return Err(DiagnosticsError::InvalidInput(format!("{} rows but {n} observations", x.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(DiagnosticsError::InvalidInput("rows have different lengths".into()));
    }
    if n < d + 2 {
        return Err(DiagnosticsError::InvalidInput(format!("need at least {} rows, got {n}", d + 2)));
    }
    let cols = d + 1;
    let mut design = Vec::with_capacity(n * cols);
    for r in x {
        design.push(1.0);
        design.extend_from_slice(r);
    }
    let coefficients = least_squares(&design, n, cols, y).map_err(|e| match e {
        NumericsError::RankDeficient { column } => DiagnosticsError::RankDeficient { column },
        other => DiagnosticsError::InvalidInput(other.to_string()),
    })?;
    let fitted = x
        .iter()
        .map(|r| coefficients[0] + r.iter().zip(&coefficients[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok(LinearBaseline { coefficients, fitted })
}
