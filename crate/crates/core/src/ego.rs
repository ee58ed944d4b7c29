//! Efficient Global Optimization as a resumable ask/tell state machine.
//!
//! A campaign evaluates an initial space-filling design, then alternates
//! between fitting a Kriging model to everything observed so far and
//! proposing the next batch by Expected Improvement, until the evaluation
//! budget `N_s` is spent. The objective is maximized.
//!
//! Everything that influences a proposal lives in [`OptimizationState`], so a
//! state saved after any `tell` and reloaded later produces the same next
//! proposal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    propose_batch_cl, AcquisitionError, AcquisitionOptions, BatchProposal, Incumbent, LiarStrategy,
};
use crate::design::{lhs, maximin_improve, BoxDomain, DesignError, DesignMatrix};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::kriging::{
    estimate_params_with, EstimationOptions, GpModel, KrigingError, Normalization, TrainingSet, Trend,
};
use crate::numerics::RandomStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EgoError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tell does not match the outstanding request: {0}")]
    MismatchedTell(String),
    #[error("value {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("evaluation budget exhausted")]
    BudgetExhausted,
    #[error("campaign is {found}, expected {expected}")]
    WrongPhase { expected: Phase, found: Phase },
    #[error(transparent)]
    Kriging(#[from] KrigingError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Design(#[from] DesignError),
}

impl EgoError {
    /// True for errors caused by calling ask/tell out of order or with the
    /// wrong points.
    pub fn is_protocol(&self) -> bool {
        matches!(
            self,
            EgoError::MismatchedTell(_) | EgoError::BudgetExhausted | EgoError::WrongPhase { .. }
        )
    }

    /// True for numerical degeneracy of the surrogate.
    pub fn is_degenerate(&self) -> bool {
        match self {
            EgoError::Kriging(e) | EgoError::Acquisition(AcquisitionError::Kriging(e)) => e.is_degenerate(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, EgoError>;

/// Correlation length used when the likelihood cannot be maximized.
pub const FALLBACK_LENGTHSCALE: f64 = 0.5;
/// Squared normalized distance under which a told point matches a request.
const MATCH_SQ: f64 = 1e-18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Total number of evaluations `N_s`.
    pub budget_total: usize,
    /// Size `N` of the initial design; `N_s / 2` when absent.
    pub initial_size: Option<usize>,
    pub batch_size: usize,
    pub liar: LiarStrategy,
    pub seed: u64,
    pub kernel_family: KernelFamily,
    pub trend: Trend,
    /// Re-estimate hyperparameters on every `refit_every`-th ask.
    pub refit_every: usize,
    /// Maximin swap iterations applied to the initial Latin hypercube.
    pub maximin_iterations: usize,
    pub acquisition: AcquisitionOptions,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            budget_total: 20,
            initial_size: None,
            batch_size: 1,
            liar: LiarStrategy::Mixed,
            seed: 0,
            kernel_family: KernelFamily::Matern52,
            trend: Trend::EstimateConstant,
            refit_every: 1,
            maximin_iterations: 100,
            acquisition: AcquisitionOptions::default(),
        }
    }
}

impl CampaignConfig {
    pub fn initial_size(&self) -> usize {
        self.initial_size.unwrap_or(self.budget_total / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.initial_size();
        if n == 0 {
            return Err(EgoError::InvalidConfig("initial design must contain at least one point".into()));
        }
        if n >= self.budget_total {
            return Err(EgoError::InvalidConfig(format!(
                "initial size {n} must be smaller than the budget {}",
                self.budget_total
            )));
        }
        if self.batch_size == 0 {
            return Err(EgoError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.refit_every == 0 {
            return Err(EgoError::InvalidConfig("refit_every must be at least 1".into()));
        }
        if self.acquisition.n_starts == 0 {
            return Err(EgoError::InvalidConfig("n_starts must be at least 1".into()));
        }
        if self.acquisition.qei_draws < 100 {
            return Err(EgoError::InvalidConfig("qei_draws must be at least 100".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingInitial,
    Ready,
    AwaitingBatch,
    Finished,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::AwaitingInitial => "awaiting the initial design",
            Phase::Ready => "ready",
            Phase::AwaitingBatch => "awaiting a batch",
            Phase::Finished => "finished",
        })
    }
}

/// One evaluated point. `ei` is the single-point EI at proposal time, absent
/// for the initial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub point: Vec<f64>,
    pub value: f64,
    pub ei: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationState {
    domain: BoxDomain,
    config: CampaignConfig,
    initial_design: Vec<Vec<f64>>,
    evaluations: Vec<Evaluation>,
    pending: Option<BatchProposal>,
    phase: Phase,
    ask_count: u64,
    cached_spec: Option<KernelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<Evaluation>,
}

/// The initial design a campaign with this configuration starts from.
pub fn initial_design(domain: &BoxDomain, config: &CampaignConfig) -> Result<DesignMatrix> {
    let mut rng = RandomStream::new(config.seed).split(0);
    let mut design = lhs(config.initial_size(), domain, &mut rng)?;
    if config.maximin_iterations > 0 {
        design = maximin_improve(&design, config.maximin_iterations, &mut rng);
    }
    Ok(design)
}

/// Creates a campaign and its initial design.
pub fn start(domain: BoxDomain, config: CampaignConfig) -> Result<(OptimizationState, DesignMatrix)> {
    config.validate()?;
    let design = initial_design(&domain, &config)?;
    let state = OptimizationState {
        domain,
        config,
        initial_design: design.points().to_vec(),
        evaluations: Vec::new(),
        pending: None,
        phase: Phase::AwaitingInitial,
        ask_count: 0,
        cached_spec: None,
    };
    Ok((state, design))
}

fn fallback_spec(family: KernelFamily, dim: usize, y: &[f64], previous: Option<&KernelSpec>) -> Result<KernelSpec> {
    if let Some(p) = previous {
        return Ok(p.clone());
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let var = if var > 1e-20 * (1.0 + mean * mean) { var } else { 1.0 };
    Ok(KernelSpec::new(family, vec![FALLBACK_LENGTHSCALE; dim], var).map_err(KrigingError::from)?)
}

impl OptimizationState {
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn evaluations(&self) -> &[Evaluation] {
        &self.evaluations
    }

    pub fn initial_design(&self) -> &[Vec<f64>] {
        &self.initial_design
    }

    pub fn pending(&self) -> Option<&BatchProposal> {
        self.pending.as_ref()
    }

    pub fn ask_count(&self) -> u64 {
        self.ask_count
    }

    pub fn remaining(&self) -> usize {
        self.config.budget_total.saturating_sub(self.evaluations.len())
    }

    /// Points the campaign is waiting for, if any.
    pub fn outstanding(&self) -> Option<&[Vec<f64>]> {
        match self.phase {
            Phase::AwaitingInitial => Some(&self.initial_design),
            Phase::AwaitingBatch => self.pending.as_ref().map(|p| p.points.as_slice()),
            _ => None,
        }
    }

    fn unit_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..self.domain.dim())
            .map(|j| {
                let t = (a[j] - b[j]) / self.domain.width(j);
                t * t
            })
            .sum()
    }

    /// Records the values of the outstanding points.
    ///
    /// The points may arrive in any order; each must match a distinct
    /// requested point to within `1e-9` in normalized coordinates. On error
    /// the state is unchanged.
    pub fn tell(&mut self, points: &[Vec<f64>], values: &[f64]) -> Result<()> {
        let requested = match self.outstanding() {
            Some(r) => r.to_vec(),
            None => {
                return Err(EgoError::MismatchedTell(format!("nothing is outstanding (campaign is {})", self.phase)))
            }
        };
        if points.len() != values.len() {
            return Err(EgoError::MismatchedTell(format!("{} points but {} values", points.len(), values.len())));
        }
        if points.len() != requested.len() {
            return Err(EgoError::MismatchedTell(format!(
                "{} points requested, {} told",
                requested.len(),
                points.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EgoError::NonFiniteValue { index });
        }
        let d = self.domain.dim();
        let mut used = vec![false; points.len()];
        let mut ordered = Vec::with_capacity(points.len());
        for (r, req) in requested.iter().enumerate() {
            let hit = points.iter().enumerate().position(|(i, p)| {
                !used[i] && p.len() == d && self.unit_sq_dist(p, req) <= MATCH_SQ
            });
            match hit {
                Some(i) => {
                    used[i] = true;
                    ordered.push((r, values[i]));
                }
                None => {
                    return Err(EgoError::MismatchedTell(format!("requested point {req:?} was not told")));
                }
            }
        }
        let ei = self.pending.as_ref().map(|p| p.ei_single.clone());
        for (r, value) in ordered {
            self.evaluations.push(Evaluation {
                point: requested[r].clone(),
                value,
                ei: ei.as_ref().map(|e| e[r]),
            });
        }
        self.pending = None;
        self.phase = if self.evaluations.len() >= self.config.budget_total {
            Phase::Finished
        } else {
            Phase::Ready
        };
        Ok(())
    }

    /// Random stream owned by the next ask.
    pub fn next_ask_stream(&self) -> RandomStream {
        RandomStream::new(self.config.seed).split(self.ask_count + 1)
    }

    fn training(&self) -> Result<TrainingSet> {
        Ok(TrainingSet::new(
            self.evaluations.iter().map(|e| e.point.clone()).collect(),
            self.evaluations.iter().map(|e| e.value).collect(),
        )?)
    }

    fn model_and_spec(&self, rng: &RandomStream) -> Result<(GpModel, KernelSpec)> {
        let training = self.training()?;
        let norm = Normalization::from_domain(&self.domain);
        let refit = self.cached_spec.is_none() || self.ask_count % self.config.refit_every as u64 == 0;
        let spec = if refit {
            let d = self.domain.dim();
            let enough = training.len() >= (d + 2).max(10);
            let estimated = if enough {
                estimate_params_with(
                    &training,
                    self.config.kernel_family,
                    self.config.trend,
                    &norm,
                    &EstimationOptions::default(),
                    &mut rng.clone(),
                )
                .map(|r| r.spec)
            } else {
                Err(KrigingError::ZeroVariance)
            };
            match estimated {
                Ok(s) => s,
                Err(KrigingError::ZeroVariance) => {
                    fallback_spec(self.config.kernel_family, d, training.y(), self.cached_spec.as_ref())?
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            self.cached_spec.clone().expect("cached when not refitting")
        };
        let model = GpModel::fit_with(training, spec.clone(), self.config.trend, norm)?;
        Ok((model, spec))
    }

    /// The Kriging model the next ask would use.
    pub fn current_model(&self) -> Result<GpModel> {
        if self.evaluations.is_empty() {
            return Err(EgoError::WrongPhase {
                expected: Phase::Ready,
                found: self.phase,
            });
        }
        Ok(self.model_and_spec(&self.next_ask_stream().split(0))?.0)
    }

    pub fn incumbent(&self) -> Option<Incumbent> {
        let y: Vec<f64> = self.evaluations.iter().map(|e| e.value).collect();
        Incumbent::from_observations(&y).ok()
    }

    /// Proposes the next batch, or returns the pending one unchanged.
    pub fn ask(&mut self) -> Result<BatchProposal> {
        match self.phase {
            Phase::AwaitingBatch => return Ok(self.pending.clone().expect("pending batch")),
            Phase::Finished => return Err(EgoError::BudgetExhausted),
            Phase::AwaitingInitial => {
                return Err(EgoError::WrongPhase {
                    expected: Phase::Ready,
                    found: self.phase,
                })
            }
            Phase::Ready => {}
        }
        let rng = self.next_ask_stream();
        let (model, spec) = self.model_and_spec(&rng.split(0))?;
        let incumbent = self.incumbent().expect("evaluations present");
        let b = self.config.batch_size.min(self.remaining());
        let proposal = propose_batch_cl(
            &model,
            incumbent,
            &self.domain,
            b,
            self.config.liar,
            &self.config.acquisition,
            &mut rng.split(1),
        )?;
        self.cached_spec = Some(spec);
        self.ask_count += 1;
        self.pending = Some(proposal.clone());
        self.phase = Phase::AwaitingBatch;
        Ok(proposal)
    }

    /// Best evaluation so far (first occurrence on ties) with the full
    /// history.
    pub fn result(&self) -> Option<CampaignResult> {
        let mut best: Option<&Evaluation> = None;
        for e in &self.evaluations {
            if best.is_none_or(|b| e.value > b.value) {
                best = Some(e);
            }
        }
        best.map(|b| CampaignResult {
            best_point: b.point.clone(),
            best_value: b.value,
            history: self.evaluations.clone(),
        })
    }
}

/// Runs a full campaign against an objective that can be called directly.
pub fn run_closed_loop(
    mut objective: impl FnMut(&[f64]) -> f64,
    domain: BoxDomain,
    config: CampaignConfig,
) -> Result<CampaignResult> {
    let (mut state, design) = start(domain, config)?;
    let values: Vec<f64> = design.points().iter().map(|p| objective(p)).collect();
    state.tell(design.points(), &values)?;
    while state.phase() != Phase::Finished {
        let batch = state.ask()?;
        let values: Vec<f64> = batch.points.iter().map(|p| objective(p)).collect();
        state.tell(&batch.points, &values)?;
    }
    Ok(state.result().expect("finished campaign has evaluations"))
}
