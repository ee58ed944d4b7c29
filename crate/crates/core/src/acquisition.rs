//! Expected Improvement and batch proposals.
//!
//! The objective is maximized. For a Kriging predictive distribution with
//! mean `Ŷ` and standard deviation `σₙ` at `x`, and incumbent `Mₙ`,
//!
//! ```text
//! EI(x) = (Ŷ − Mₙ)·Φ((Ŷ − Mₙ)/σₙ) + σₙ·φ((Ŷ − Mₙ)/σₙ)
//! ```
//!
//! Batches are built with the Constant Liar heuristic: the best single-point
//! EI location is appended to the model with a fictitious observation and the
//! search is repeated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{lhs, BoxDomain};
use crate::kriging::{GpModel, KrigingError, PosteriorSampler};
use crate::local_search::{nelder_mead_box, NelderMeadOptions};
use crate::numerics::{std_normal_cdf, std_normal_pdf, RandomStream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcquisitionError {
    #[error(transparent)]
    Kriging(#[from] KrigingError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: domain has {expected} dimensions, model has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, AcquisitionError>;

/// Relative standard deviation under which EI falls back to `(Ŷ − Mₙ)⁺`.
pub const SIGMA_GUARD: f64 = 1e-12;

/// Best observed value `Mₙ` so far.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Incumbent(f64);

impl Incumbent {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(AcquisitionError::InvalidArgument(format!("incumbent {value} is not finite")));
        }
        Ok(Self(value))
    }

    /// Maximum of the observations.
    pub fn from_observations(y: &[f64]) -> Result<Self> {
        let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(m)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn max(self, other: f64) -> Self {
        Self(self.0.max(other))
    }
}

/// Closed-form EI from predictive moments. `scale` is the prior standard
/// deviation used by the guard.
pub fn ei_from_moments(mean: f64, sd: f64, incumbent: Incumbent, scale: f64) -> f64 {
    let gap = mean - incumbent.value();
    if sd <= SIGMA_GUARD * scale || sd == 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    (gap * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}

pub fn expected_improvement(model: &GpModel, x: &[f64], incumbent: Incumbent) -> Result<f64> {
    let p = model.predict(x)?;
    Ok(ei_from_moments(p.mean, p.sd(), incumbent, model.process_variance().sqrt()))
}

/// Monte Carlo estimate of the multi-point EI with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QeiEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// `E[(maxⱼ Y(x'ⱼ) − Mₙ)⁺]` averaged over joint posterior draws.
pub fn qei_mc(
    model: &GpModel,
    points: &[Vec<f64>],
    incumbent: Incumbent,
    n_draws: usize,
    rng: &mut RandomStream,
) -> Result<QeiEstimate> {
    if points.is_empty() {
        return Err(AcquisitionError::InvalidArgument("batch must contain at least one point".into()));
    }
    if n_draws < 100 {
        return Err(AcquisitionError::InvalidArgument(format!("need at least 100 draws, got {n_draws}")));
    }
    let sampler = PosteriorSampler::new(model, points)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_draws {
        let draw = sampler.draw(rng);
        let best = draw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let imp = (best - incumbent.value()).max(0.0);
        sum += imp;
        sum_sq += imp * imp;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(QeiEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionOptions {
    /// Local searches per maximization.
    pub n_starts: usize,
    /// Objective evaluations per start, per input dimension.
    pub evals_per_dim: usize,
    /// Latin hypercube candidates screened per input dimension before the
    /// best `n_starts` are refined.
    pub screen_per_dim: usize,
    /// Draws used by the Monte Carlo batch EI.
    pub qei_draws: usize,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        Self {
            n_starts: 20,
            evals_per_dim: 200,
            screen_per_dim: 100,
            qei_draws: 10_000,
        }
    }
}

/// Maximizer of single-point EI.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionMax {
    pub point: Vec<f64>,
    pub ei: f64,
}

fn check_domain(model: &GpModel, domain: &BoxDomain) -> Result<()> {
    if domain.dim() != model.dim() {
        return Err(AcquisitionError::DimensionMismatch {
            expected: domain.dim(),
            found: model.dim(),
        });
    }
    Ok(())
}

/// Multistart local maximization of EI over the domain.
///
/// A Latin hypercube of candidates is screened, and box-projected
/// Nelder–Mead searches run from the `n_starts` best of them.
pub fn maximize_acquisition(
    model: &GpModel,
    incumbent: Incumbent,
    domain: &BoxDomain,
    options: &AcquisitionOptions,
    rng: &mut RandomStream,
) -> Result<AcquisitionMax> {
    check_domain(model, domain)?;
    if options.n_starts == 0 {
        return Err(AcquisitionError::InvalidArgument("n_starts must be at least 1".into()));
    }
    let d = domain.dim();
    let unit = BoxDomain::unit(d).expect("positive dimension");
    let pool_size = options.n_starts.max(options.screen_per_dim * d);
    let pool = lhs(pool_size, &unit, rng).expect("nonempty design").into_points();

    let neg_ei = |u: &[f64]| -> f64 {
        let x = domain.from_unit(u);
        match expected_improvement(model, &x, incumbent) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let mut scored: Vec<(usize, f64)> = pool.iter().enumerate().map(|(i, u)| (i, neg_ei(u))).collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let nm = NelderMeadOptions {
        max_evals: options.evals_per_dim * d,
        initial_step: 0.05,
        xtol: 1e-7,
        ftol: 1e-12,
    };
    let lo = vec![0.0; d];
    let hi = vec![1.0; d];
    let mut best: Option<(Vec<f64>, f64)> = None;
    for &(i, _) in scored.iter().take(options.n_starts) {
        let r = nelder_mead_box(neg_ei, &pool[i], &lo, &hi, nm);
        if best.as_ref().is_none_or(|(_, v)| r.value < *v) {
            best = Some((r.x, r.value));
        }
    }
    let (u, _) = best.expect("at least one start");
    let mut point = domain.from_unit(&u);
    domain.clamp(&mut point);
    let ei = expected_improvement(model, &point, incumbent)?;
    Ok(AcquisitionMax { point, ei })
}

/// Value assigned to pending points while a batch is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiarStrategy {
    /// Minimum observed value.
    Min,
    /// Maximum observed value.
    Max,
    /// Kriging mean at the pending point.
    Mean,
    /// Both `Min` and `Max` batches; the one with larger Monte Carlo batch EI
    /// is kept.
    #[default]
    Mixed,
}

impl std::fmt::Display for LiarStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LiarStrategy::Min => "min",
            LiarStrategy::Max => "max",
            LiarStrategy::Mean => "mean",
            LiarStrategy::Mixed => "mixed",
        })
    }
}

impl std::str::FromStr for LiarStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(LiarStrategy::Min),
            "max" => Ok(LiarStrategy::Max),
            "mean" => Ok(LiarStrategy::Mean),
            "mixed" => Ok(LiarStrategy::Mixed),
            other => Err(format!("unknown liar strategy `{other}` (expected min, max, mean or mixed)")),
        }
    }
}

/// How a batch was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    Single,
    ClMin,
    ClMax,
    ClMean,
    ClMixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProposal {
    pub points: Vec<Vec<f64>>,
    /// Single-point EI of each point under the model without liars.
    pub ei_single: Vec<f64>,
    pub strategy: BatchStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_qei: Option<f64>,
    /// Batch EI of the candidate discarded by the mixed strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_qei: Option<f64>,
}

impl BatchProposal {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

const DISTINCT_SQ: f64 = 1e-18;

fn too_close(model: &GpModel, domain: &BoxDomain, x: &[f64], others: &[Vec<f64>]) -> bool {
    let u = domain.to_unit(x);
    let near = |p: &Vec<f64>| {
        let v = domain.to_unit(p);
        u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= DISTINCT_SQ
    };
    others.iter().any(near) || model.training().x().iter().any(near)
}

fn nudge(domain: &BoxDomain, x: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let step = 1e-6 * domain.width(j);
            if v + step <= domain.upper()[j] {
                v + step
            } else {
                v - step
            }
        })
        .collect();
    domain.clamp(&mut p);
    p
}

fn constant_liar_batch(
    model: &GpModel,
    incumbent: Incumbent,
    domain: &BoxDomain,
    b: usize,
    liar: LiarStrategy,
    options: &AcquisitionOptions,
    rng: &RandomStream,
) -> Result<BatchProposal> {
    let y = model.training().y();
    let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let mut current = model.clone();
    let mut inc = incumbent;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut ei_single = Vec::with_capacity(b);
    for k in 0..b {
        let found = maximize_acquisition(&current, inc, domain, options, &mut rng.split(k as u64))?;
        let mut p = found.point;
        if too_close(&current, domain, &p, &points) {
            p = nudge(domain, &p);
            if too_close(&current, domain, &p, &points) {
                return Err(KrigingError::DegenerateDesign("constant liar proposed a duplicate point".into()).into());
            }
        }
        ei_single.push(expected_improvement(model, &p, incumbent)?);
        let lie = match liar {
            LiarStrategy::Max => y_max,
            LiarStrategy::Min => y_min,
            LiarStrategy::Mean | LiarStrategy::Mixed => current.predict(&p)?.mean,
        };
        if k + 1 < b {
            current = current.condition_on(std::slice::from_ref(&p), &[lie])?;
            inc = inc.max(lie);
        }
        points.push(p);
    }
    let strategy = match liar {
        LiarStrategy::Min => BatchStrategy::ClMin,
        LiarStrategy::Max => BatchStrategy::ClMax,
        LiarStrategy::Mean => BatchStrategy::ClMean,
        LiarStrategy::Mixed => BatchStrategy::ClMixed,
    };
    Ok(BatchProposal {
        points,
        ei_single,
        strategy,
        mc_qei: None,
        rejected_qei: None,
    })
}

/// Constant Liar batch of `b` points.
///
/// With `b = 1` this is exactly [`maximize_acquisition`] on the same stream.
/// The mixed strategy builds a `Min` batch on `rng.split(0)` and a `Max`
/// batch on `rng.split(1)`, scores both with [`qei_mc`] on identical copies
/// of `rng.split(2)`, and keeps the higher score (the `Min` batch on ties).
pub fn propose_batch_cl(
    model: &GpModel,
    incumbent: Incumbent,
    domain: &BoxDomain,
    b: usize,
    strategy: LiarStrategy,
    options: &AcquisitionOptions,
    rng: &mut RandomStream,
) -> Result<BatchProposal> {
    check_domain(model, domain)?;
    if b == 0 {
        return Err(AcquisitionError::InvalidArgument("batch size must be at least 1".into()));
    }
    if b == 1 {
        let found = maximize_acquisition(model, incumbent, domain, options, rng)?;
        return Ok(BatchProposal {
            points: vec![found.point],
            ei_single: vec![found.ei],
            strategy: BatchStrategy::Single,
            mc_qei: None,
            rejected_qei: None,
        });
    }
    match strategy {
        LiarStrategy::Mixed => {
            let low = constant_liar_batch(model, incumbent, domain, b, LiarStrategy::Min, options, &rng.split(0))?;
            let high = constant_liar_batch(model, incumbent, domain, b, LiarStrategy::Max, options, &rng.split(1))?;
            let crn = rng.split(2);
            let q_low = qei_mc(model, &low.points, incumbent, options.qei_draws, &mut crn.clone())?.estimate;
            let q_high = qei_mc(model, &high.points, incumbent, options.qei_draws, &mut crn.clone())?.estimate;
            let (mut chosen, kept, rejected) = if q_low >= q_high { (low, q_low, q_high) } else { (high, q_high, q_low) };
            chosen.strategy = BatchStrategy::ClMixed;
            chosen.mc_qei = Some(kept);
            chosen.rejected_qei = Some(rejected);
            Ok(chosen)
        }
        other => constant_liar_batch(model, incumbent, domain, b, other, options, rng),
    }
}
