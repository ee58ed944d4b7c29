//! Kriging (Gaussian-process) surrogate.
//!
//! Observations are modelled as `y = μ + Z(x)` with `Z` a centred Gaussian
//! process with covariance `k`. The mean `μ` is either known (simple Kriging)
//! or estimated by generalized least squares (ordinary Kriging). Inputs are
//! mapped to the unit cube before the kernel sees them, so correlation lengths
//! are always expressed in normalized units.
//!
//! A relative nugget is added to the covariance diagonal for numerical
//! stability only. It starts at `1e-8`, grows tenfold whenever the Cholesky
//! factorization fails, and gives up above `1e-4`. A prediction target that
//! coincides with a design point carries the same nugget, so the predictor
//! interpolates exactly with zero variance there.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::BoxDomain;
use crate::kernel::{KernelError, KernelFamily, KernelSpec, LENGTHSCALE_BOUNDS};
use crate::local_search::{nelder_mead_box, NelderMeadOptions};
use crate::numerics::{cholesky, dot, CholeskyFactor, NumericsError, PosDefMatrix, RandomStream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KrigingError {
    #[error("dimension mismatch: model has {expected} dimensions, point has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training points {first} and {second} coincide")]
    DuplicatePoints { first: usize, second: usize },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("degenerate design: profiled process variance is zero (constant observations)")]
    ZeroVariance,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl KrigingError {
    /// True for the numerical-degeneracy family of failures.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            KrigingError::DegenerateDesign(_) | KrigingError::ZeroVariance | KrigingError::DuplicatePoints { .. }
        )
    }
}

impl From<NumericsError> for KrigingError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::DimensionMismatch { expected, found } => KrigingError::DimensionMismatch { expected, found },
            other => KrigingError::DegenerateDesign(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, KrigingError>;

pub const NUGGET_START: f64 = 1e-8;
pub const NUGGET_MAX: f64 = 1e-4;
/// Squared normalized distance under which two points count as the same.
const COINCIDENT_SQ: f64 = 1e-24;

/// Scattered observations `(xᵢ, yᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl TrainingSet {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(KrigingError::InvalidInput("training set is empty".into()));
        }
        if x.len() != y.len() {
            return Err(KrigingError::InvalidInput(format!("{} points but {} observations", x.len(), y.len())));
        }
        let d = x[0].len();
        if d == 0 {
            return Err(KrigingError::InvalidInput("points must have at least one coordinate".into()));
        }
        for p in &x {
            if p.len() != d {
                return Err(KrigingError::DimensionMismatch { expected: d, found: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(KrigingError::InvalidInput("non-finite coordinate".into()));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(KrigingError::InvalidInput("non-finite observation".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// The same set without observation `i`.
    pub fn without(&self, i: usize) -> Result<Self> {
        let mut x = self.x.clone();
        let mut y = self.y.clone();
        x.remove(i);
        y.remove(i);
        Self::new(x, y)
    }

    pub fn with_appended(&self, points: &[Vec<f64>], values: &[f64]) -> Result<Self> {
        let mut x = self.x.clone();
        let mut y = self.y.clone();
        x.extend_from_slice(points);
        y.extend_from_slice(values);
        Self::new(x, y)
    }
}

/// Per-dimension affine map `u = (x − offset) / scale` into the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    offset: Vec<f64>,
    scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn from_domain(domain: &BoxDomain) -> Self {
        Self {
            offset: domain.lower().to_vec(),
            scale: (0..domain.dim()).map(|j| domain.width(j)).collect(),
        }
    }

    /// Bounding box of the points; a dimension with zero spread keeps unit
    /// scale.
    pub fn from_bounding_box(points: &[Vec<f64>]) -> Self {
        let d = points[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points {
            for j in 0..d {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let scale = lo.iter().zip(&hi).map(|(a, b)| if b > a { b - a } else { 1.0 }).collect();
        Self { offset: lo, scale }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }
}

/// Trend of the Gaussian process.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    /// Simple Kriging with a fixed mean.
    KnownMean(f64),
    /// Ordinary Kriging: constant mean estimated by generalized least squares.
    #[default]
    EstimateConstant,
}

/// Gaussian predictive distribution at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveDistribution {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Leave-one-out predictive means and standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooVectors {
    pub loo_mean: Vec<f64>,
    pub loo_sd: Vec<f64>,
}

/// Fitted Kriging surrogate.
#[derive(Debug, Clone)]
pub struct GpModel {
    training: TrainingSet,
    unit_x: Vec<Vec<f64>>,
    normalization: Normalization,
    spec: KernelSpec,
    trend: Trend,
    trend_mean: f64,
    nugget: f64,
    /// Cholesky factor of `K = σ²(R + nugget·I)`.
    factor: CholeskyFactor,
    /// `K⁻¹(y − μ̂·1)`.
    weights: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_duplicates(unit_x: &[Vec<f64>]) -> Result<()> {
    for i in 0..unit_x.len() {
        for j in (i + 1)..unit_x.len() {
            if sq_dist(&unit_x[i], &unit_x[j]) <= COINCIDENT_SQ {
                return Err(KrigingError::DuplicatePoints { first: i, second: j });
            }
        }
    }
    Ok(())
}

/// Correlation matrix of unit-cube points, unit diagonal.
pub(crate) fn correlation_matrix(spec: &KernelSpec, unit_x: &[Vec<f64>]) -> Vec<f64> {
    let n = unit_x.len();
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
        for j in 0..i {
            let v = spec.correlation_unchecked(&unit_x[i], &unit_x[j]);
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
    }
    r
}

/// Factorizes `R + nugget·I`, escalating the nugget on failure.
pub(crate) fn factorize_correlation(r: &[f64], n: usize, start_nugget: f64) -> Result<(CholeskyFactor, f64)> {
    let mut nugget = start_nugget.max(NUGGET_START);
    loop {
        let mut m = r.to_vec();
        for i in 0..n {
            m[i * n + i] += nugget;
        }
        let attempt = PosDefMatrix::new(n, m).and_then(|m| cholesky(&m));
        match attempt {
            Ok(l) => return Ok((l, nugget)),
            Err(_) if nugget * 10.0 <= NUGGET_MAX * (1.0 + 1e-9) => nugget *= 10.0,
            Err(e) => {
                return Err(KrigingError::DegenerateDesign(format!(
                    "covariance matrix not factorizable with nugget {nugget:e}: {e}"
                )))
            }
        }
    }
}

fn gls_mean(factor: &CholeskyFactor, y: &[f64]) -> Result<f64> {
    let ones = vec![1.0; y.len()];
    let a = factor.solve_lower(&ones)?;
    let b = factor.solve_lower(y)?;
    let denom = dot(&a, &a);
    if !(denom > 0.0) {
        return Err(KrigingError::DegenerateDesign("trend estimate undefined".into()));
    }
    Ok(dot(&a, &b) / denom)
}

struct Profiled {
    nll: f64,
    process_variance: f64,
}

fn profile_likelihood(spec: &KernelSpec, unit_x: &[Vec<f64>], y: &[f64], trend: Trend) -> Result<Profiled> {
    let n = y.len();
    let r = correlation_matrix(spec, unit_x);
    let (l, _) = factorize_correlation(&r, n, NUGGET_START)?;
    let mu = match trend {
        Trend::KnownMean(m) => m,
        Trend::EstimateConstant => gls_mean(&l, y)?,
    };
    let resid: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let z = l.solve_lower(&resid)?;
    let s2 = dot(&z, &z) / n as f64;
    let y_scale = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(s2 > 1e-20 * y_scale) || !s2.is_finite() {
        return Err(KrigingError::ZeroVariance);
    }
    let nf = n as f64;
    let nll = 0.5 * nf * (2.0 * std::f64::consts::PI).ln() + 0.5 * nf * s2.ln() + 0.5 * l.log_det() + 0.5 * nf;
    Ok(Profiled {
        nll,
        process_variance: s2,
    })
}

fn check_trend_size(n: usize, trend: Trend) -> Result<()> {
    if matches!(trend, Trend::EstimateConstant) && n < 2 {
        return Err(KrigingError::DegenerateDesign(
            "estimating the trend needs at least two observations".into(),
        ));
    }
    Ok(())
}

/// Negative log-likelihood with `μ` and `σ²` profiled out; the correlation
/// lengths of `spec` are in the units of the training bounding box.
pub fn neg_log_likelihood(training: &TrainingSet, spec: &KernelSpec, trend: Trend) -> Result<f64> {
    neg_log_likelihood_with(training, spec, trend, &Normalization::from_bounding_box(training.x()))
}

pub fn neg_log_likelihood_with(
    training: &TrainingSet,
    spec: &KernelSpec,
    trend: Trend,
    normalization: &Normalization,
) -> Result<f64> {
    check_dims(spec.dim(), training.dim())?;
    check_trend_size(training.len(), trend)?;
    let unit_x: Vec<Vec<f64>> = training.x().iter().map(|p| normalization.apply(p)).collect();
    check_duplicates(&unit_x)?;
    Ok(profile_likelihood(spec, &unit_x, training.y(), trend)?.nll)
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(KrigingError::DimensionMismatch { expected, found });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationOptions {
    pub n_starts: usize,
    /// Likelihood evaluations per start, per input dimension.
    pub evals_per_dim: usize,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            n_starts: 10,
            evals_per_dim: 200,
        }
    }
}

/// Outcome of the likelihood maximization.
#[derive(Debug, Clone)]
pub struct MleResult {
    pub spec: KernelSpec,
    pub nll: f64,
    /// Negative log-likelihood at each multistart initial point (`+∞` where
    /// the likelihood was undefined).
    pub start_nll: Vec<f64>,
}

/// Maximum-likelihood correlation lengths, with the process variance set to
/// its profiled value. Uses the training bounding box as normalization.
pub fn estimate_params(
    training: &TrainingSet,
    family: KernelFamily,
    trend: Trend,
    rng: &mut RandomStream,
) -> Result<KernelSpec> {
    let norm = Normalization::from_bounding_box(training.x());
    Ok(estimate_params_with(training, family, trend, &norm, &EstimationOptions::default(), rng)?.spec)
}

/// Multistart Nelder–Mead search over `log θ ∈ [log 1e-3, log 10]ᵈ`, started
/// from a Latin hypercube in log space.
pub fn estimate_params_with(
    training: &TrainingSet,
    family: KernelFamily,
    trend: Trend,
    normalization: &Normalization,
    options: &EstimationOptions,
    rng: &mut RandomStream,
) -> Result<MleResult> {
    let n = training.len();
    let d = training.dim();
    check_dims(normalization.dim(), d)?;
    if n < (d + 2).max(10) {
        return Err(KrigingError::DegenerateDesign(format!(
            "likelihood estimation needs at least {} observations, got {n}",
            (d + 2).max(10)
        )));
    }
    let unit_x: Vec<Vec<f64>> = training.x().iter().map(|p| normalization.apply(p)).collect();
    check_duplicates(&unit_x)?;
    let y = training.y();

    let lo = vec![LENGTHSCALE_BOUNDS.0.ln(); d];
    let hi = vec![LENGTHSCALE_BOUNDS.1.ln(); d];
    let log_box = BoxDomain::new(lo.clone(), hi.clone()).expect("valid bounds");
    let starts = crate::design::lhs(options.n_starts.max(1), &log_box, rng)
        .expect("nonempty design")
        .into_points();

    let mut zero_variance = false;
    let mut objective = |log_theta: &[f64]| -> f64 {
        let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
        let spec = match KernelSpec::new(family, theta, 1.0) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        match profile_likelihood(&spec, &unit_x, y, trend) {
            Ok(p) => p.nll,
            Err(KrigingError::ZeroVariance) => {
                zero_variance = true;
                f64::INFINITY
            }
            Err(_) => f64::INFINITY,
        }
    };

    let nm = NelderMeadOptions {
        max_evals: options.evals_per_dim * d,
        initial_step: 0.1,
        xtol: 1e-4,
        ftol: 1e-9,
    };
    let mut start_nll = Vec::with_capacity(starts.len());
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        start_nll.push(objective(s));
        let r = nelder_mead_box(&mut objective, s, &lo, &hi, nm);
        if r.value.is_finite() && best.as_ref().is_none_or(|(_, v)| r.value < *v) {
            best = Some((r.x, r.value));
        }
    }
    let Some((log_theta, nll)) = best else {
        return Err(if zero_variance {
            KrigingError::ZeroVariance
        } else {
            KrigingError::DegenerateDesign("likelihood undefined at every start".into())
        });
    };
    let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
    let unit_spec = KernelSpec::new(family, theta, 1.0)?;
    let profiled = profile_likelihood(&unit_spec, &unit_x, y, trend)?;
    Ok(MleResult {
        spec: unit_spec.with_process_variance(profiled.process_variance)?,
        nll,
        start_nll,
    })
}

impl GpModel {
    /// Fits with the training bounding box as normalization.
    pub fn fit(training: TrainingSet, spec: KernelSpec, trend: Trend) -> Result<Self> {
        let norm = Normalization::from_bounding_box(training.x());
        Self::fit_with(training, spec, trend, norm)
    }

    pub fn fit_with(training: TrainingSet, spec: KernelSpec, trend: Trend, normalization: Normalization) -> Result<Self> {
        Self::fit_with_nugget(training, spec, trend, normalization, NUGGET_START)
    }

    /// Fits with the nugget escalation starting at `nugget` instead of the
    /// default.
    pub fn fit_with_nugget(
        training: TrainingSet,
        spec: KernelSpec,
        trend: Trend,
        normalization: Normalization,
        nugget: f64,
    ) -> Result<Self> {
        let d = training.dim();
        check_dims(spec.dim(), d)?;
        check_dims(normalization.dim(), d)?;
        check_trend_size(training.len(), trend)?;
        if !(nugget >= 0.0) || nugget > NUGGET_MAX {
            return Err(KrigingError::InvalidInput(format!("nugget {nugget} outside [0, {NUGGET_MAX}]")));
        }
        let unit_x: Vec<Vec<f64>> = training.x().iter().map(|p| normalization.apply(p)).collect();
        check_duplicates(&unit_x)?;
        let n = training.len();
        let r = correlation_matrix(&spec, &unit_x);
        let (lc, nugget) = factorize_correlation(&r, n, nugget)?;
        let factor = lc.scaled(spec.process_variance().sqrt());
        let y = training.y();
        let trend_mean = match trend {
            Trend::KnownMean(m) => m,
            Trend::EstimateConstant => gls_mean(&factor, y)?,
        };
        let resid: Vec<f64> = y.iter().map(|v| v - trend_mean).collect();
        let weights = factor.solve(&resid)?;
        Ok(Self {
            training,
            unit_x,
            normalization,
            spec,
            trend,
            trend_mean,
            nugget,
            factor,
            weights,
        })
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn trend(&self) -> Trend {
        self.trend
    }

    pub fn trend_mean(&self) -> f64 {
        self.trend_mean
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn process_variance(&self) -> f64 {
        self.spec.process_variance()
    }

    pub fn dim(&self) -> usize {
        self.training.dim()
    }

    pub fn len(&self) -> usize {
        self.training.len()
    }

    pub fn is_empty(&self) -> bool {
        self.training.is_empty()
    }

    /// Covariances between `x0` and the design, plus the index of a design
    /// point coinciding with `x0`, if any.
    fn cross_covariance(&self, unit: &[f64]) -> (Vec<f64>, Option<usize>) {
        let s2 = self.spec.process_variance();
        let mut coincident = None;
        let r = self
            .unit_x
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if coincident.is_none() && sq_dist(p, unit) <= COINCIDENT_SQ {
                    coincident = Some(i);
                }
                s2 * self.spec.correlation_unchecked(unit, p)
            })
            .collect();
        (r, coincident)
    }

    pub fn predict(&self, x0: &[f64]) -> Result<PredictiveDistribution> {
        check_dims(self.dim(), x0.len())?;
        let unit = self.normalization.apply(x0);
        let (r, coincident) = self.cross_covariance(&unit);
        if let Some(i) = coincident {
            return Ok(PredictiveDistribution {
                mean: self.training.y()[i],
                variance: 0.0,
            });
        }
        let mean = self.trend_mean + dot(&r, &self.weights);
        let v = self.factor.solve_lower(&r)?;
        let variance = (self.spec.process_variance() * (1.0 + self.nugget) - dot(&v, &v)).max(0.0);
        Ok(PredictiveDistribution { mean, variance })
    }

    /// Closed-form leave-one-out predictions with hyperparameters held fixed.
    ///
    /// With `P = K⁻¹` the residual at design point `i` is `(P·e)ᵢ / Pᵢᵢ` where
    /// `e = y − μ` (known mean), or the same with `P` replaced by the
    /// projected precision `Q = P − P1·1ᵀP / 1ᵀP1` when the trend is
    /// re-estimated. The predictive variance of the reduced model at `xᵢ` is
    /// `1 / Pᵢᵢ`.
    pub fn loo(&self) -> LooVectors {
        let n = self.len();
        let p = self.factor.inverse();
        let y = self.training.y();
        let (q, target): (Vec<f64>, Vec<f64>) = match self.trend {
            Trend::KnownMean(m) => (p.clone(), y.iter().map(|v| v - m).collect()),
            Trend::EstimateConstant => {
                let p1: Vec<f64> = (0..n).map(|i| p[i * n..(i + 1) * n].iter().sum()).collect();
                let s: f64 = p1.iter().sum();
                let mut q = p.clone();
                for i in 0..n {
                    for j in 0..n {
                        q[i * n + j] -= p1[i] * p1[j] / s;
                    }
                }
                (q, y.to_vec())
            }
        };
        let mut loo_mean = Vec::with_capacity(n);
        let mut loo_sd = Vec::with_capacity(n);
        for i in 0..n {
            let row = &q[i * n..(i + 1) * n];
            let resid = dot(row, &target) / row[i];
            loo_mean.push(y[i] - resid);
            loo_sd.push((1.0 / p[i * n + i]).sqrt());
        }
        LooVectors { loo_mean, loo_sd }
    }

    /// Posterior covariance matrix at new points (dense rows).
    ///
    /// Rows and columns of points that coincide with design points are
    /// exactly zero.
    pub fn posterior_cov(&self, xnew: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for p in xnew {
            check_dims(self.dim(), p.len())?;
        }
        let m = xnew.len();
        let s2 = self.spec.process_variance();
        let units: Vec<Vec<f64>> = xnew.iter().map(|p| self.normalization.apply(p)).collect();
        let mut solved = Vec::with_capacity(m);
        let mut fixed = Vec::with_capacity(m);
        for u in &units {
            let (r, coincident) = self.cross_covariance(u);
            fixed.push(coincident.is_some());
            solved.push(self.factor.solve_lower(&r)?);
        }
        let mut cov = vec![vec![0.0; m]; m];
        for i in 0..m {
            if fixed[i] {
                continue;
            }
            for j in 0..=i {
                if fixed[j] {
                    continue;
                }
                let prior = if sq_dist(&units[i], &units[j]) <= COINCIDENT_SQ {
                    s2 * (1.0 + self.nugget)
                } else {
                    s2 * self.spec.correlation_unchecked(&units[i], &units[j])
                };
                let mut c = prior - dot(&solved[i], &solved[j]);
                if i == j {
                    c = c.max(0.0);
                }
                cov[i][j] = c;
                cov[j][i] = c;
            }
        }
        Ok(cov)
    }

    /// Joint posterior draws at new points, one row per draw.
    pub fn posterior_sample(&self, xnew: &[Vec<f64>], draws: usize, rng: &mut RandomStream) -> Result<Vec<Vec<f64>>> {
        let sampler = PosteriorSampler::new(self, xnew)?;
        Ok((0..draws).map(|_| sampler.draw(rng)).collect())
    }

    /// Model conditioned on extra observations with every hyperparameter,
    /// the trend value and the normalization held fixed.
    pub fn condition_on(&self, points: &[Vec<f64>], values: &[f64]) -> Result<Self> {
        let training = self.training.with_appended(points, values)?;
        Self::fit_with_nugget(
            training,
            self.spec.clone(),
            Trend::KnownMean(self.trend_mean),
            self.normalization.clone(),
            self.nugget,
        )
    }

    pub fn snapshot(&self, training_csv: Option<String>) -> ModelSnapshot {
        ModelSnapshot {
            family: self.spec.family(),
            lengthscales: self.spec.lengthscales().to_vec(),
            process_variance: self.spec.process_variance(),
            trend: self.trend,
            trend_mean: self.trend_mean,
            nugget: self.nugget,
            normalization: self.normalization.clone(),
            training_csv,
        }
    }

    /// Rebuilds a model from a snapshot and its training data.
    pub fn from_snapshot(snapshot: &ModelSnapshot, training: TrainingSet) -> Result<Self> {
        let spec = KernelSpec::new(snapshot.family, snapshot.lengthscales.clone(), snapshot.process_variance)?;
        Self::fit_with_nugget(training, spec, snapshot.trend, snapshot.normalization.clone(), snapshot.nugget)
    }
}

/// Reusable sampler for repeated joint posterior draws at fixed points.
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    means: Vec<f64>,
    free: Vec<usize>,
    factor: Option<CholeskyFactor>,
}

impl PosteriorSampler {
    pub fn new(model: &GpModel, xnew: &[Vec<f64>]) -> Result<Self> {
        let cov = model.posterior_cov(xnew)?;
        let means = xnew
            .iter()
            .map(|p| model.predict(p).map(|d| d.mean))
            .collect::<Result<Vec<_>>>()?;
        let free: Vec<usize> = (0..xnew.len()).filter(|&i| cov[i][i] > 0.0).collect();
        let k = free.len();
        if k == 0 {
            return Ok(Self {
                means,
                free,
                factor: None,
            });
        }
        let sub: Vec<f64> = free.iter().flat_map(|&i| free.iter().map(move |&j| (i, j))).map(|(i, j)| cov[i][j]).collect();
        let scale = free.iter().map(|&i| cov[i][i]).fold(0.0, f64::max).max(model.process_variance() * 1e-16);
        let mut jitter = 0.0;
        loop {
            let mut m = sub.clone();
            for t in 0..k {
                m[t * k + t] += jitter;
            }
            match PosDefMatrix::new(k, m).and_then(|m| cholesky(&m)) {
                Ok(l) => {
                    return Ok(Self {
                        means,
                        free,
                        factor: Some(l),
                    })
                }
                Err(_) if jitter < 1e-4 * scale => {
                    jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
                }
                Err(e) => {
                    return Err(KrigingError::DegenerateDesign(format!(
                        "posterior covariance not factorizable: {e}"
                    )))
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn draw(&self, rng: &mut RandomStream) -> Vec<f64> {
        let mut out = self.means.clone();
        if let Some(l) = &self.factor {
            let z = rng.normals(self.free.len());
            let coloured = l.mul_lower(&z).expect("length matches");
            for (t, &i) in self.free.iter().enumerate() {
                out[i] += coloured[t];
            }
        }
        out
    }
}

/// Text form of a fitted model. The training data live in a separate CSV
/// referenced by `training_csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub process_variance: f64,
    pub trend: Trend,
    pub trend_mean: f64,
    pub nugget: f64,
    pub normalization: Normalization,
    pub training_csv: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Gauss–Jordan inverse with partial pivoting plus the determinant, used
    /// as an oracle independent of the Cholesky path.
    fn invert(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            if p != c {
                m.swap(p, c);
                det = -det;
            }
            let piv = m[c][c];
            det *= piv;
            for v in m[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let row_c = m[c].clone();
                    for (v, w) in m[r].iter_mut().zip(row_c) {
                        *v -= f * w;
                    }
                }
            }
        }
        (m.into_iter().map(|r| r[n..].to_vec()).collect(), det)
    }

    fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        a.iter().map(|r| dot(r, v)).collect()
    }

    fn random_training(n: usize, d: usize, seed: u64) -> TrainingSet {
        let mut rng = RandomStream::new(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect();
        let y = x.iter().map(|p| p.iter().map(|v| (3.0 * v).sin()).sum::<f64>() + p[0] * p[0]).collect();
        TrainingSet::new(x, y).unwrap()
    }

    fn sd(y: &[f64]) -> f64 {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
    }

    #[test]
    fn constant_data_gives_constant_trend_and_zero_weights() {
        let t = TrainingSet::new(vec![vec![0.0], vec![1.0]], vec![2.5, 2.5]).unwrap();
        let m = GpModel::fit(t, KernelSpec::isotropic(1, 0.5, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        assert_relative_eq!(m.trend_mean(), 2.5, epsilon = 1e-12);
        assert!(m.weights().iter().all(|w| w.abs() < 1e-12));
    }

    #[test]
    fn single_point_needs_known_mean() {
        let t = TrainingSet::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let spec = KernelSpec::isotropic(1, 0.5, 1.0).unwrap();
        let err = GpModel::fit(t.clone(), spec.clone(), Trend::EstimateConstant).unwrap_err();
        assert!(matches!(err, KrigingError::DegenerateDesign(_)));
        assert!(GpModel::fit(t, spec, Trend::KnownMean(0.0)).is_ok());
    }

    #[test]
    fn duplicates_are_rejected() {
        let t = TrainingSet::new(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]], vec![1.0, 2.0, 3.0]).unwrap();
        let err = GpModel::fit(t, KernelSpec::isotropic(2, 0.5, 1.0).unwrap(), Trend::EstimateConstant).unwrap_err();
        assert_eq!(err, KrigingError::DuplicatePoints { first: 0, second: 2 });
    }

    #[test]
    fn gls_mean_matches_explicit_inverse() {
        let t = random_training(5, 1, 11);
        let spec = KernelSpec::isotropic(1, 0.4, 2.0).unwrap();
        let m = GpModel::fit(t.clone(), spec.clone(), Trend::EstimateConstant).unwrap();
        let norm = Normalization::from_bounding_box(t.x());
        let u: Vec<Vec<f64>> = t.x().iter().map(|p| norm.apply(p)).collect();
        let k: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                (0..5)
                    .map(|j| 2.0 * spec.correlation_unchecked(&u[i], &u[j]) + if i == j { 2.0 * m.nugget() } else { 0.0 })
                    .collect()
            })
            .collect();
        let (kinv, _) = invert(&k);
        let ones = vec![1.0; 5];
        let a = matvec(&kinv, t.y());
        let b = matvec(&kinv, &ones);
        let mu = a.iter().sum::<f64>() / b.iter().sum::<f64>();
        assert_relative_eq!(m.trend_mean(), mu, max_relative = 1e-9);
        // weights solve K·α = y − μ̂
        let ka = matvec(&k, m.weights());
        for i in 0..5 {
            assert_relative_eq!(ka[i], t.y()[i] - m.trend_mean(), epsilon = 1e-8);
        }
    }

    #[test]
    fn interpolates_training_points() {
        for seed in 0..5 {
            let t = random_training(15, 2, seed);
            let m = GpModel::fit(t.clone(), KernelSpec::isotropic(2, 0.3, 1.5).unwrap(), Trend::EstimateConstant).unwrap();
            let s = sd(t.y());
            for (x, y) in t.x().iter().zip(t.y()) {
                let p = m.predict(x).unwrap();
                assert!((p.mean - y).abs() <= 1e-6 * s);
                assert!(p.variance <= 1.1 * m.nugget() * 1.5);
            }
        }
    }

    #[test]
    fn far_away_prediction_reverts_to_prior() {
        let t = random_training(8, 2, 3);
        let m = GpModel::fit(t, KernelSpec::isotropic(2, 0.2, 3.0).unwrap(), Trend::EstimateConstant).unwrap();
        let p = m.predict(&[1e6, -1e6]).unwrap();
        assert!((p.mean - m.trend_mean()).abs() < 1e-6);
        assert_relative_eq!(p.variance, 3.0 * (1.0 + m.nugget()), max_relative = 1e-6);
    }

    #[test]
    fn single_observation_closed_form() {
        let t = TrainingSet::new(vec![vec![0.2]], vec![1.7]).unwrap();
        let spec = KernelSpec::isotropic(1, 0.5, 2.0).unwrap();
        let m = GpModel::fit_with(t, spec.clone(), Trend::KnownMean(0.0), Normalization::identity(1)).unwrap();
        let rho = spec.correlation_unchecked(&[0.55], &[0.2]);
        let p = m.predict(&[0.55]).unwrap();
        assert_relative_eq!(p.mean, rho * 1.7, max_relative = 1e-7);
        assert_relative_eq!(p.variance, 2.0 * (1.0 - rho * rho), max_relative = 1e-7);
    }

    #[test]
    fn variance_is_capped_on_random_points() {
        let t = random_training(12, 3, 8);
        let m = GpModel::fit(t, KernelSpec::isotropic(3, 0.25, 0.7).unwrap(), Trend::EstimateConstant).unwrap();
        let mut rng = RandomStream::new(1);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform_in(-0.2, 1.2)).collect();
            let v = m.predict(&x).unwrap().variance;
            assert!(v >= 0.0 && v <= 0.7 * (1.0 + m.nugget()) + 1e-10);
        }
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let t = random_training(4, 2, 1);
        let m = GpModel::fit(t, KernelSpec::isotropic(2, 0.3, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        assert_eq!(m.predict(&[0.1]).unwrap_err(), KrigingError::DimensionMismatch { expected: 2, found: 1 });
    }

    #[test]
    fn likelihood_is_permutation_invariant() {
        let t = random_training(9, 2, 4);
        let spec = KernelSpec::isotropic(2, 0.3, 1.0).unwrap();
        let a = neg_log_likelihood(&t, &spec, Trend::EstimateConstant).unwrap();
        let mut idx: Vec<usize> = (0..9).collect();
        RandomStream::new(2).shuffle(&mut idx);
        let p = TrainingSet::new(idx.iter().map(|&i| t.x()[i].clone()).collect(), idx.iter().map(|&i| t.y()[i]).collect()).unwrap();
        let b = neg_log_likelihood(&p, &spec, Trend::EstimateConstant).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn likelihood_matches_explicit_density() {
        let x = vec![vec![0.0, 0.0], vec![0.4, 1.0], vec![1.0, 0.3]];
        let y = vec![0.3, -1.2, 0.8];
        let t = TrainingSet::new(x.clone(), y.clone()).unwrap();
        let spec = KernelSpec::new(KernelFamily::Matern52, vec![0.5, 0.8], 1.0).unwrap();
        let got = neg_log_likelihood_with(&t, &spec, Trend::EstimateConstant, &Normalization::identity(2)).unwrap();
        let c: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                (0..3)
                    .map(|j| spec.correlation_unchecked(&x[i], &x[j]) + if i == j { NUGGET_START } else { 0.0 })
                    .collect()
            })
            .collect();
        let (ci, det) = invert(&c);
        let ones = [1.0; 3];
        let mu = dot(&ones, &matvec(&ci, &y)) / dot(&ones, &matvec(&ci, &ones));
        let e: Vec<f64> = y.iter().map(|v| v - mu).collect();
        let s2 = dot(&e, &matvec(&ci, &e)) / 3.0;
        // log N(y; μ1, s2·C) written out term by term
        let quad = dot(&e, &matvec(&ci, &e)) / s2;
        let oracle = 1.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * (s2.powi(3) * det).ln() + 0.5 * quad;
        assert_relative_eq!(got, oracle, max_relative = 1e-10);
    }

    #[test]
    fn likelihood_scales_with_log_of_multiplier() {
        let t = random_training(10, 2, 5);
        let spec = KernelSpec::isotropic(2, 0.3, 1.0).unwrap();
        let a = neg_log_likelihood(&t, &spec, Trend::EstimateConstant).unwrap();
        for c in [3.0_f64, -0.25] {
            let scaled = TrainingSet::new(t.x().to_vec(), t.y().iter().map(|v| c * v).collect()).unwrap();
            let b = neg_log_likelihood(&scaled, &spec, Trend::EstimateConstant).unwrap();
            assert!((b - a - 10.0 * c.abs().ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_observations_are_flagged() {
        let mut rng = RandomStream::new(3);
        let x: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
        let t = TrainingSet::new(x, vec![4.0; 12]).unwrap();
        let err = estimate_params(&t, KernelFamily::Matern52, Trend::EstimateConstant, &mut rng).unwrap_err();
        assert_eq!(err, KrigingError::ZeroVariance);
        assert!(err.is_degenerate());
    }

    #[test]
    fn estimation_beats_every_start() {
        let t = random_training(20, 2, 6);
        let mut rng = RandomStream::new(9);
        let norm = Normalization::from_bounding_box(t.x());
        let r = estimate_params_with(&t, KernelFamily::Matern52, Trend::EstimateConstant, &norm, &EstimationOptions::default(), &mut rng)
            .unwrap();
        assert_eq!(r.start_nll.len(), 10);
        assert!(r.start_nll.iter().all(|v| r.nll <= *v));
        let again = estimate_params_with(
            &t,
            KernelFamily::Matern52,
            Trend::EstimateConstant,
            &norm,
            &EstimationOptions::default(),
            &mut RandomStream::new(9),
        )
        .unwrap();
        assert_eq!(r.spec, again.spec);
    }

    #[test]
    fn estimation_needs_enough_points() {
        let t = random_training(9, 2, 6);
        let err = estimate_params(&t, KernelFamily::Matern52, Trend::EstimateConstant, &mut RandomStream::new(1)).unwrap_err();
        assert!(matches!(err, KrigingError::DegenerateDesign(_)));
    }

    fn refit_oracle(m: &GpModel, i: usize) -> PredictiveDistribution {
        let reduced = m.training().without(i).unwrap();
        let r = GpModel::fit_with_nugget(reduced, m.spec().clone(), m.trend(), m.normalization().clone(), m.nugget()).unwrap();
        assert_eq!(r.nugget(), m.nugget());
        r.predict(&m.training().x()[i]).unwrap()
    }

    #[test]
    fn loo_matches_refit() {
        for trend in [Trend::EstimateConstant, Trend::KnownMean(0.3)] {
            let t = random_training(20, 2, 13);
            let m = GpModel::fit(t, KernelSpec::isotropic(2, 0.3, 1.2).unwrap(), trend).unwrap();
            let loo = m.loo();
            for i in 0..20 {
                let p = refit_oracle(&m, i);
                assert!((loo.loo_mean[i] - p.mean).abs() < 1e-8, "{trend:?} {i}");
                assert!((loo.loo_sd[i] - p.sd()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn loo_with_two_points_uses_the_other() {
        let t = TrainingSet::new(vec![vec![0.0], vec![1.0]], vec![1.0, 3.0]).unwrap();
        let m = GpModel::fit(t, KernelSpec::isotropic(1, 0.5, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        let loo = m.loo();
        assert_relative_eq!(loo.loo_mean[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(loo.loo_mean[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn loo_near_duplicates_have_tiny_sd() {
        let x = vec![vec![0.0], vec![0.3], vec![0.3 + 1e-7], vec![1.0]];
        let y = vec![0.0, 1.0, 1.0 + 1e-7, -0.5];
        let m = GpModel::fit(TrainingSet::new(x, y).unwrap(), KernelSpec::isotropic(1, 0.4, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        let loo = m.loo();
        let bound = 10.0 * m.nugget().sqrt();
        assert!(loo.loo_sd[1] < bound && loo.loo_sd[2] < bound, "{:?}", loo.loo_sd);
        assert!(loo.loo_sd[0] > bound);
    }

    #[test]
    fn posterior_cov_diagonal_matches_predict() {
        let t = random_training(10, 2, 21);
        let m = GpModel::fit(t.clone(), KernelSpec::isotropic(2, 0.3, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        let pts = vec![vec![0.1, 0.9], vec![0.5, 0.5], t.x()[2].clone()];
        let c = m.posterior_cov(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert!((c[i][i] - m.predict(p).unwrap().variance).abs() < 1e-10);
            for j in 0..3 {
                assert_eq!(c[i][j], c[j][i]);
            }
        }
        let single = m.posterior_cov(&pts[..1]).unwrap();
        assert!((single[0][0] - m.predict(&pts[0]).unwrap().variance).abs() < 1e-10);
        let at_training = m.posterior_cov(t.x()).unwrap();
        assert!(at_training.iter().flatten().all(|v| v.abs() <= 1.1 * m.nugget()));
    }

    #[test]
    fn posterior_cov_matches_block_conditioning() {
        let t = random_training(8, 2, 31);
        let spec = KernelSpec::isotropic(2, 0.35, 2.0).unwrap();
        let m = GpModel::fit_with(t.clone(), spec.clone(), Trend::KnownMean(0.0), Normalization::identity(2)).unwrap();
        let new = vec![vec![0.2, 0.3], vec![0.25, 0.35], vec![0.9, 0.1]];
        let n = m.nugget();
        let kxx: Vec<Vec<f64>> = t
            .x()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                t.x().iter().enumerate().map(|(j, b)| 2.0 * spec.correlation_unchecked(a, b) + if i == j { 2.0 * n } else { 0.0 }).collect()
            })
            .collect();
        let (kinv, _) = invert(&kxx);
        let cov = m.posterior_cov(&new).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let ri: Vec<f64> = t.x().iter().map(|p| 2.0 * spec.correlation_unchecked(&new[i], p)).collect();
                let rj: Vec<f64> = t.x().iter().map(|p| 2.0 * spec.correlation_unchecked(&new[j], p)).collect();
                let prior = 2.0 * spec.correlation_unchecked(&new[i], &new[j]) + if i == j { 2.0 * n } else { 0.0 };
                let oracle = prior - dot(&ri, &matvec(&kinv, &rj));
                assert!((cov[i][j] - oracle).abs() < 1e-9, "{i},{j}: {} vs {oracle}", cov[i][j]);
            }
        }
    }

    #[test]
    fn samples_at_training_points_equal_data() {
        let t = random_training(10, 2, 41);
        let m = GpModel::fit(t.clone(), KernelSpec::isotropic(2, 0.3, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        let s = m.posterior_sample(t.x(), 20, &mut RandomStream::new(1)).unwrap();
        let tol = 1e-3 * sd(t.y());
        for row in &s {
            for (v, y) in row.iter().zip(t.y()) {
                assert!((v - y).abs() <= tol);
            }
        }
    }

    #[test]
    fn sample_moments_match_posterior() {
        let t = random_training(10, 2, 51);
        let m = GpModel::fit(t, KernelSpec::isotropic(2, 0.3, 1.0).unwrap(), Trend::EstimateConstant).unwrap();
        let pts = vec![vec![0.15, 0.85], vec![0.2, 0.8], vec![0.6, 0.4]];
        let draws = 10_000;
        let s = m.posterior_sample(&pts, draws, &mut RandomStream::new(77)).unwrap();
        let cov = m.posterior_cov(&pts).unwrap();
        let means: Vec<f64> = (0..3).map(|j| s.iter().map(|r| r[j]).sum::<f64>() / draws as f64).collect();
        for j in 0..3 {
            let p = m.predict(&pts[j]).unwrap();
            assert!((means[j] - p.mean).abs() <= 4.0 * p.sd() / 100.0);
        }
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = s.iter().map(|r| (r[i] - means[i]) * (r[j] - means[j])).sum::<f64>() / (draws - 1) as f64;
                diff += (e - cov[i][j]).powi(2);
                norm += cov[i][j].powi(2);
            }
        }
        assert!((diff / norm).sqrt() < 0.05);
        let again = m.posterior_sample(&pts, 5, &mut RandomStream::new(77)).unwrap();
        assert_eq!(again[..], s[..5]);
    }

    #[test]
    fn affine_rescaling_preserves_predictions() {
        let t = random_training(12, 2, 61);
        let spec = KernelSpec::isotropic(2, 0.3, 1.0).unwrap();
        let a = GpModel::fit(t.clone(), spec.clone(), Trend::EstimateConstant).unwrap();
        let map = |p: &[f64]| vec![5.0 + 100.0 * p[0], -3.0 + 0.01 * p[1]];
        let scaled = TrainingSet::new(t.x().iter().map(|p| map(p)).collect(), t.y().to_vec()).unwrap();
        let b = GpModel::fit(scaled, spec, Trend::EstimateConstant).unwrap();
        let mut rng = RandomStream::new(3);
        for _ in 0..50 {
            let p = vec![rng.uniform(), rng.uniform()];
            let pa = a.predict(&p).unwrap();
            let pb = b.predict(&map(&p)).unwrap();
            assert!((pa.mean - pb.mean).abs() < 1e-8);
            assert!((pa.variance - pb.variance).abs() < 1e-8);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let t = random_training(10, 2, 71);
        let m = GpModel::fit(t.clone(), KernelSpec::isotropic(2, 0.3, 1.4).unwrap(), Trend::EstimateConstant).unwrap();
        let snap = m.snapshot(Some("train.csv".into()));
        let text = serde_json::to_string(&snap).unwrap();
        let back: ModelSnapshot = serde_json::from_str(&text).unwrap();
        assert_eq!(back, snap);
        let r = GpModel::from_snapshot(&back, t).unwrap();
        let p = [0.37, 0.61];
        assert_eq!(r.predict(&p).unwrap(), m.predict(&p).unwrap());
    }
}
