//! Benchmark objectives: Branin, Hartmann-6 and functions drawn from a
//! Gaussian-process prior.
//!
//! The named test functions are stated in their usual minimization form.
//! The optimizer maximizes, so closed-loop runs negate them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{lhs, BoxDomain};
use crate::kernel::KernelSpec;
use crate::kriging::{correlation_matrix, factorize_correlation, GpModel, KrigingError, Normalization, TrainingSet, Trend, NUGGET_START};
use crate::numerics::RandomStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("expected a {expected}-dimensional point, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("point {0:?} lies outside the domain")]
    OutOfDomain(Vec<f64>),
    #[error("unknown objective `{0}`")]
    UnknownObjective(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Kriging(#[from] KrigingError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

fn check_dim(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(BenchError::DimensionMismatch {
            expected: d,
            found: x.len(),
        });
    }
    Ok(())
}

/// Branin–Hoo function, usually studied on `[−5, 10] × [0, 15]`.
pub fn branin(x: &[f64]) -> Result<f64> {
    check_dim(x, 2)?;
    let pi = std::f64::consts::PI;
    let b = 5.1 / (4.0 * pi * pi);
    let c = 5.0 / pi;
    let t = 1.0 / (8.0 * pi);
    let inner = x[1] - b * x[0] * x[0] + c * x[0] - 6.0;
    Ok(inner * inner + 10.0 * (1.0 - t) * x[0].cos() + 10.0)
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

/// Six-dimensional Hartmann function on the unit cube.
pub fn hartmann6(x: &[f64]) -> Result<f64> {
    check_dim(x, 6)?;
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(BenchError::OutOfDomain(x.to_vec()));
    }
    let mut total = 0.0;
    for i in 0..4 {
        let e: f64 = (0..6).map(|j| HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]).powi(2)).sum();
        total -= HARTMANN_ALPHA[i] * (-e).exp();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Named {
    Branin,
    Hartmann6,
}

/// A named test function with its domain and known optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub name: String,
    pub domain: BoxDomain,
    pub global_optimum_value: f64,
    pub global_optimum_points: Vec<Vec<f64>>,
    pub orientation: Orientation,
    function: Named,
}

impl ObjectiveSpec {
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        match self.function {
            Named::Branin => branin(x),
            Named::Hartmann6 => hartmann6(x),
        }
    }

    /// Objective in maximization form, `−f(x)`.
    pub fn evaluate_negated(&self, x: &[f64]) -> Result<f64> {
        self.evaluate(x).map(|v| -v)
    }
}

/// All registered objectives.
pub fn registry() -> Vec<ObjectiveSpec> {
    let pi = std::f64::consts::PI;
    vec![
        ObjectiveSpec {
            name: "branin".into(),
            domain: BoxDomain::new(vec![-5.0, 0.0], vec![10.0, 15.0]).expect("valid box"),
            global_optimum_value: 5.0 / (4.0 * pi),
            global_optimum_points: vec![vec![-pi, 12.275], vec![pi, 2.275], vec![3.0 * pi, 2.475]],
            orientation: Orientation::Minimize,
            function: Named::Branin,
        },
        ObjectiveSpec {
            name: "hartmann6".into(),
            domain: BoxDomain::unit(6).expect("valid box"),
            global_optimum_value: -3.3223680114155147,
            global_optimum_points: vec![vec![
                0.20168950909365746,
                0.15001069354111374,
                0.4768739729250998,
                0.2753324275220782,
                0.3116516172395686,
                0.6573005345536702,
            ]],
            orientation: Orientation::Minimize,
            function: Named::Hartmann6,
        },
    ]
}

pub fn objective(name: &str) -> Result<ObjectiveSpec> {
    registry()
        .into_iter()
        .find(|o| o.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| BenchError::UnknownObjective(name.to_string()))
}

/// Joint draw from the centred prior `N(0, σ²(R + 1e-8·I))` at `points`,
/// with correlation lengths in the units of `normalization`.
pub fn sample_prior(
    kernel: &KernelSpec,
    points: &[Vec<f64>],
    normalization: &Normalization,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(BenchError::InvalidArgument("no points to sample".into()));
    }
    for p in points {
        check_dim(p, kernel.dim())?;
    }
    let unit: Vec<Vec<f64>> = points.iter().map(|p| normalization.apply(p)).collect();
    let r = correlation_matrix(kernel, &unit);
    let (l, _) = factorize_correlation(&r, points.len(), NUGGET_START)?;
    let z = rng.normals(points.len());
    let sigma = kernel.process_variance().sqrt();
    Ok(l.mul_lower(&z).expect("matching length").into_iter().map(|v| sigma * v).collect())
}

/// Deterministic function obtained by interpolating a prior draw at
/// Latin hypercube anchors.
#[derive(Debug, Clone)]
pub struct SyntheticObjective {
    model: GpModel,
    domain: BoxDomain,
}

impl SyntheticObjective {
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.model.predict(x)?.mean)
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        self.model.training().x()
    }

    pub fn anchor_values(&self) -> &[f64] {
        self.model.training().y()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }
}

pub fn synthetic_gp_objective(
    kernel: &KernelSpec,
    domain: &BoxDomain,
    anchor_count: usize,
    rng: &mut RandomStream,
) -> Result<SyntheticObjective> {
    if anchor_count < 10 {
        return Err(BenchError::InvalidArgument(format!("need at least 10 anchors, got {anchor_count}")));
    }
    check_dim(domain.lower(), kernel.dim())?;
    let anchors = lhs(anchor_count, domain, rng)
        .map_err(|e| BenchError::InvalidArgument(e.to_string()))?
        .into_points();
    let norm = Normalization::from_domain(domain);
    let values = sample_prior(kernel, &anchors, &norm, rng)?;
    let training = TrainingSet::new(anchors, values)?;
    let model = GpModel::fit_with(training, kernel.clone(), Trend::KnownMean(0.0), norm)?;
    Ok(SyntheticObjective {
        model,
        domain: domain.clone(),
    })
}
