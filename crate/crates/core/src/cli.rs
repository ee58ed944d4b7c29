//! Command-line front end.
//!
//! Subcommands cover the human-in-the-loop workflow (`design`, `tell`,
//! `suggest`), the post-processing steps (`interpolate`, `diagnose`) and
//! self-contained benchmark runs (`run-bench`). Each `cmd_*` function returns
//! the process exit status:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | input or configuration error |
//! | 3 | ask/tell protocol error |
//! | 4 | numerical degeneracy of the surrogate |
//!
//! CSV files are comma separated with a mandatory header. Numbers are
//! written with 17 significant digits so that values read back are
//! bit-identical to the ones written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{AcquisitionError, AcquisitionOptions, LiarStrategy};
use crate::benchfn::{self, BenchError};
use crate::design::BoxDomain;
use crate::diagnostics::{conditional_correlation, ei_posterior_distribution, loo_metrics, DiagnosticsError};
use crate::ego::{self, CampaignConfig, EgoError, Evaluation, OptimizationState, Phase};
use crate::flowrate::fit_quadratic;
use crate::kernel::KernelFamily;
use crate::kriging::{estimate_params_with, EstimationOptions, GpModel, KrigingError, ModelSnapshot, Normalization, TrainingSet, Trend};
use crate::numerics::RandomStream;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "KRIGOPT_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Degenerate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Protocol(_) => EXIT_PROTOCOL,
            CliError::Degenerate(_) => EXIT_DEGENERATE,
        }
    }
}

impl From<EgoError> for CliError {
    fn from(e: EgoError) -> Self {
        if e.is_protocol() {
            CliError::Protocol(e.to_string())
        } else if e.is_degenerate() {
            CliError::Degenerate(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<KrigingError> for CliError {
    fn from(e: KrigingError) -> Self {
        if e.is_degenerate() {
            CliError::Degenerate(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<AcquisitionError> for CliError {
    fn from(e: AcquisitionError) -> Self {
        match e {
            AcquisitionError::Kriging(k) => k.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Kriging(k) => k.into(),
            DiagnosticsError::DegenerateData(m) => CliError::Degenerate(format!("degenerate data: {m}")),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Kriging(k) => k.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Posterior draws for the improvement distribution.
    pub draws: usize,
    /// Histogram bin width; no histogram when absent.
    pub bin_width: Option<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            bin_width: None,
        }
    }
}

/// Where a flow rate comes from: a CSV column or a fixed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlowSource {
    Column(String),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowrateConfig {
    pub target_q: f64,
    pub q_low: FlowSource,
    pub r_low: String,
    pub q_doe: FlowSource,
    pub r_doe: String,
    pub q_high: FlowSource,
    pub r_high: String,
}

impl Default for FlowrateConfig {
    fn default() -> Self {
        Self {
            target_q: 2500.0,
            q_low: FlowSource::Column("Q_low".into()),
            r_low: "R_low".into(),
            q_doe: FlowSource::Column("Q_doe".into()),
            r_doe: "R_doe".into(),
            q_high: FlowSource::Column("Q_high".into()),
            r_high: "R_high".into(),
        }
    }
}

/// The JSON configuration document shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub kernel_family: KernelFamily,
    pub trend: Trend,
    pub budget_total: Option<usize>,
    pub initial_size: Option<usize>,
    pub batch_size: usize,
    pub liar: LiarStrategy,
    pub seed: Option<u64>,
    pub refit_every: usize,
    pub maximin_iterations: usize,
    pub acquisition: AcquisitionOptions,
    pub flowrate: FlowrateConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lower: None,
            upper: None,
            kernel_family: KernelFamily::Matern52,
            trend: Trend::EstimateConstant,
            budget_total: None,
            initial_size: None,
            batch_size: 10,
            liar: LiarStrategy::Mixed,
            seed: None,
            refit_every: 1,
            maximin_iterations: 100,
            acquisition: AcquisitionOptions::default(),
            flowrate: FlowrateConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                serde_json::from_str(&text).map_err(|e| io_err(p, format!("invalid configuration: {e}")))
            }
        }
    }

    pub fn domain(&self) -> CliResult<BoxDomain> {
        match (&self.lower, &self.upper) {
            (Some(l), Some(u)) => {
                BoxDomain::new(l.clone(), u.clone()).map_err(|e| CliError::Input(format!("invalid bounds: {e}")))
            }
            _ => Err(CliError::Input("domain bounds are missing (set lower/upper or --bounds)".into())),
        }
    }

    /// Applies `--bounds lo:hi,lo:hi,...`.
    pub fn set_bounds(&mut self, spec: &str) -> CliResult<()> {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for (j, part) in spec.split(',').enumerate() {
            let (a, b) = part
                .split_once(':')
                .ok_or_else(|| CliError::Input(format!("bounds entry {} `{part}` is not of the form lo:hi", j + 1)))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Input(format!("bounds entry {} has non-numeric value `{s}`", j + 1)))
            };
            lower.push(parse(a)?);
            upper.push(parse(b)?);
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(())
    }

    pub fn campaign(&self, seed: u64) -> CliResult<CampaignConfig> {
        let budget_total = self
            .budget_total
            .ok_or_else(|| CliError::Input("budget_total is required for a campaign".into()))?;
        Ok(CampaignConfig {
            budget_total,
            initial_size: self.initial_size,
            batch_size: self.batch_size,
            liar: self.liar,
            seed,
            kernel_family: self.kernel_family,
            trend: self.trend,
            refit_every: self.refit_every,
            maximin_iterations: self.maximin_iterations,
            acquisition: self.acquisition,
        })
    }
}

/// Seed precedence: configuration, then the environment variable, then the
/// command-line flag.
pub fn resolve_seed(config: Option<u64>, env: Option<&str>, flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env {
        return text
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("{SEED_ENV}=`{text}` is not an unsigned integer")));
    }
    Ok(config.unwrap_or(0))
}

fn seed_from(config: &RunConfig, flag: Option<u64>) -> CliResult<u64> {
    let env = std::env::var(SEED_ENV).ok();
    resolve_seed(config.seed, env.as_deref(), flag)
}

/// A numeric CSV with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn parse_cell(text: &str, row: usize, col: usize, name: &str) -> CliResult<f64> {
    text.trim().parse::<f64>().map_err(|_| {
        CliError::Input(format!("row {row}, column {} (`{name}`): cannot parse `{text}` as a number", col + 1))
    })
}

/// Reads a CSV whose cells are all numeric. Rows are numbered from 1 after
/// the header in error messages.
pub fn read_numeric_csv(path: &Path) -> CliResult<NumericTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| parse_cell(cell, r + 1, c, header.get(c).map(String::as_str).unwrap_or("?")))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(NumericTable { header, rows })
}

/// Formats a float with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| CliError::Input(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write_atomic(path, &bytes)
}

fn coordinate_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

fn write_points(path: &Path, points: &[Vec<f64>], extra: Option<(&str, Vec<Option<f64>>)>) -> CliResult<()> {
    let d = points.first().map_or(0, Vec::len);
    let mut header = coordinate_header(d);
    if let Some((name, _)) = &extra {
        header.push(name.to_string());
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r: Vec<String> = p.iter().map(|v| format_float(*v)).collect();
            if let Some((_, vals)) = &extra {
                r.push(vals[i].map(format_float).unwrap_or_default());
            }
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Reads `x1..xd,y` rows; extra columns named `ei` are ignored.
fn read_evaluations(path: &Path, d: Option<usize>) -> CliResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let table = read_numeric_csv(path)?;
    let y_col = table
        .column("y")
        .ok_or_else(|| CliError::Input(format!("{}: missing `y` column", path.display())))?;
    let x_cols: Vec<usize> = (0..table.header.len()).filter(|&c| c != y_col && table.header[c] != "ei").collect();
    if let Some(d) = d {
        if x_cols.len() != d {
            return Err(CliError::Input(format!(
                "{}: expected {d} coordinate columns, found {}",
                path.display(),
                x_cols.len()
            )));
        }
    }
    let x = table.rows.iter().map(|r| x_cols.iter().map(|&c| r[c]).collect()).collect();
    let y = table.rows.iter().map(|r| r[y_col]).collect();
    Ok((x, y))
}

fn read_points(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let table = read_numeric_csv(path)?;
    let cols: Vec<usize> = (0..table.header.len()).filter(|&c| table.header[c] != "ei" && table.header[c] != "y").collect();
    Ok(table.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect())
}

/// Campaign state file: the optimizer state plus the evaluations CSV last
/// used to update it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDocument {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluations_csv: Option<String>,
    pub state: OptimizationState,
}

pub fn load_state(path: &Path) -> CliResult<StateDocument> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, format!("invalid state file: {e}")))
}

fn save_state(path: &Path, doc: &StateDocument) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(doc).expect("state serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn report<T>(result: CliResult<T>) -> i32 {
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "krigopt", version, about = "Kriging surrogates and expected-improvement optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the initial space-filling design, optionally starting a campaign.
    Design(DesignArgs),
    /// Fit the surrogate and propose the next batch of points.
    Suggest(SuggestArgs),
    /// Record the values of the outstanding points.
    Tell(TellArgs),
    /// Interpolate efficiency at a target flow rate for each row.
    Interpolate(InterpolateArgs),
    /// Leave-one-out metrics and batch diagnostics as a JSON report.
    Diagnose(DiagnoseArgs),
    /// Run a closed-loop campaign on a registered test function.
    RunBench(RunBenchArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DesignArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV with header x1..xd.
    #[arg(long)]
    pub out: PathBuf,
    /// Start a campaign and write its state here.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Bounds as lo:hi,lo:hi,...
    #[arg(long)]
    pub bounds: Option<String>,
    /// Number of design points.
    #[arg(long)]
    pub n: Option<usize>,
    /// Total evaluation budget of the campaign.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SuggestArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// Evaluations CSV (x1..xd,y); rows not yet in the state are told first.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV with header x1..xd,ei.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TellArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// Results CSV (x1..xd,y) for the outstanding points.
    #[arg(long)]
    pub results: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Target flow rate, overriding the configuration.
    #[arg(long)]
    pub target_q: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DiagnoseArgs {
    #[arg(long, conflicts_with = "data")]
    pub state: Option<PathBuf>,
    /// Evaluations CSV (x1..xd,y).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Batch whose correlation and improvement distribution are reported;
    /// defaults to the pending batch of the state.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunBenchArgs {
    /// Registered objective name (branin, hartmann6).
    #[arg(long)]
    pub objective: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub initial: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub liar: Option<LiarStrategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// History CSV (x1..xd,y,ei) with the objective in its original sense.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Design(a) => cmd_design(&a),
        Command::Suggest(a) => cmd_suggest(&a),
        Command::Tell(a) => cmd_tell(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::RunBench(a) => cmd_run_bench(&a),
    }
}

pub fn cmd_design(args: &DesignArgs) -> i32 {
    report(design(args))
}

fn design(args: &DesignArgs) -> CliResult<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(b) = &args.bounds {
        config.set_bounds(b)?;
    }
    if args.n.is_some() {
        config.initial_size = args.n;
    }
    if args.budget.is_some() {
        config.budget_total = args.budget;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    let domain = config.domain()?;
    let seed = seed_from(&config, args.seed)?;
    let points = match &args.state {
        Some(state_path) => {
            let campaign = config.campaign(seed)?;
            let (state, design) = ego::start(domain, campaign)?;
            save_state(
                state_path,
                &StateDocument {
                    version: 1,
                    evaluations_csv: None,
                    state,
                },
            )?;
            design.into_points()
        }
        None => {
            let n = config
                .initial_size
                .or(config.budget_total.map(|b| b / 2))
                .ok_or_else(|| CliError::Input("design size is missing (set initial_size, budget_total or --n)".into()))?;
            let campaign = CampaignConfig {
                initial_size: Some(n),
                budget_total: n + 1,
                seed,
                maximin_iterations: config.maximin_iterations,
                ..Default::default()
            };
            ego::initial_design(&domain, &campaign)?.into_points()
        }
    };
    write_points(&args.out, &points, None)?;
    println!("wrote {} design points to {}", points.len(), args.out.display());
    Ok(())
}

fn same_point(domain: &BoxDomain, a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && (0..a.len())
            .map(|j| ((a[j] - b[j]) / domain.width(j)).powi(2))
            .sum::<f64>()
            <= 1e-18
}

/// Rows of an evaluations file not yet recorded in the state.
fn new_rows(state: &OptimizationState, x: Vec<Vec<f64>>, y: Vec<f64>) -> CliResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let known = state.evaluations();
    let mut px = Vec::new();
    let mut py = Vec::new();
    for (p, v) in x.into_iter().zip(y) {
        match known.iter().find(|e| same_point(state.domain(), &e.point, &p)) {
            Some(e) if e.value == v => {}
            Some(e) => {
                return Err(CliError::Protocol(format!(
                    "point {p:?} was already recorded with value {} but the data file says {v}",
                    e.value
                )))
            }
            None => {
                px.push(p);
                py.push(v);
            }
        }
    }
    Ok((px, py))
}

pub fn cmd_suggest(args: &SuggestArgs) -> i32 {
    report(suggest(args))
}

fn suggest(args: &SuggestArgs) -> CliResult<()> {
    let mut doc = load_state(&args.state)?;
    if let Some(data) = &args.data {
        let (x, y) = read_evaluations(data, Some(doc.state.domain().dim()))?;
        let (px, py) = new_rows(&doc.state, x, y)?;
        if !px.is_empty() {
            doc.state.tell(&px, &py)?;
        }
        doc.evaluations_csv = Some(data.display().to_string());
    }
    let proposal = doc.state.ask()?;
    let ei = proposal.ei_single.iter().map(|v| Some(*v)).collect();
    write_points(&args.out, &proposal.points, Some(("ei", ei)))?;
    save_state(&args.state, &doc)?;
    println!(
        "proposed {} point(s) ({:?}) written to {}",
        proposal.len(),
        proposal.strategy,
        args.out.display()
    );
    if let Some(q) = proposal.mc_qei {
        println!("batch expected improvement (Monte Carlo): {q}");
    }
    Ok(())
}

pub fn cmd_tell(args: &TellArgs) -> i32 {
    report(tell(args))
}

fn tell(args: &TellArgs) -> CliResult<()> {
    let mut doc = load_state(&args.state)?;
    let (x, y) = read_evaluations(&args.results, Some(doc.state.domain().dim()))?;
    doc.state.tell(&x, &y)?;
    save_state(&args.state, &doc)?;
    let best = doc.state.result().expect("evaluations recorded");
    println!("recorded {} evaluation(s); {} of {} used", x.len(), best.history.len(), doc.state.config().budget_total);
    println!("incumbent: value {} at {:?}", best.best_value, best.best_point);
    if doc.state.phase() == Phase::Finished {
        println!("budget exhausted");
    }
    Ok(())
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> i32 {
    report(interpolate(args))
}

fn interpolate(args: &InterpolateArgs) -> CliResult<()> {
    let config = RunConfig::load(args.config.as_deref())?;
    let fc = &config.flowrate;
    let target = args.target_q.unwrap_or(fc.target_q);
    let path = &args.data;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| io_err(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("{}: missing column `{name}`", path.display())))
    };
    enum Src {
        Col(usize),
        Fixed(f64),
    }
    let source = |s: &FlowSource| -> CliResult<Src> {
        Ok(match s {
            FlowSource::Column(c) => Src::Col(find(c)?),
            FlowSource::Constant(v) => Src::Fixed(*v),
        })
    };
    let pairs = [
        (source(&fc.q_low)?, find(&fc.r_low)?),
        (source(&fc.q_doe)?, find(&fc.r_doe)?),
        (source(&fc.q_high)?, find(&fc.r_high)?),
    ];
    let mut out_header = header.clone();
    out_header.extend(["a", "b", "c", "R_target"].map(String::from));
    let mut out_rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_err(path, e))?;
        let cell = |c: usize| parse_cell(record.get(c).unwrap_or(""), r + 1, c, &header[c]);
        let mut points = vec![(0.0, 0.0)];
        for (q, rc) in &pairs {
            let qv = match q {
                Src::Col(c) => cell(*c)?,
                Src::Fixed(v) => *v,
            };
            points.push((qv, cell(*rc)?));
        }
        let mut measured: Vec<f64> = points[1..].iter().map(|p| p.0).collect();
        measured.sort_by(f64::total_cmp);
        measured.dedup();
        if measured.len() < 3 {
            return Err(CliError::Input(format!(
                "row {}: the three measured flow rates must be distinct, found {} distinct value(s)",
                r + 1,
                measured.len()
            )));
        }
        let curve = fit_quadratic(&points).map_err(|e| CliError::Input(format!("row {}: {e}", r + 1)))?;
        let mut row: Vec<String> = record.iter().map(String::from).collect();
        row.extend([curve.a, curve.b, curve.c, curve.evaluate(target)].map(format_float));
        out_rows.push(row);
    }
    write_csv(&args.out, &out_header, &out_rows)?;
    println!("interpolated {} row(s) at Q = {target}", out_rows.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EiReport {
    pub doe_best: f64,
    pub a_posteriori: f64,
    pub mean: f64,
    pub samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<usize>>,
}

/// JSON document written by `diagnose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub r_squared: f64,
    pub rmse: f64,
    pub rma: f64,
    pub cr95: f64,
    pub loo_mean: Vec<f64>,
    pub loo_sd: Vec<f64>,
    pub model: ModelSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ei_distribution: Option<EiReport>,
}

impl DiagnosticReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> i32 {
    report(diagnose(args))
}

fn diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    let config = RunConfig::load(args.config.as_deref())?;
    let seed = seed_from(&config, args.seed)?;
    let (x, y, norm, family, trend, pending, csv_ref) = match (&args.state, &args.data) {
        (Some(sp), None) => {
            let doc = load_state(sp)?;
            let st = &doc.state;
            let x: Vec<Vec<f64>> = st.evaluations().iter().map(|e| e.point.clone()).collect();
            let y: Vec<f64> = st.evaluations().iter().map(|e| e.value).collect();
            (
                x,
                y,
                Normalization::from_domain(st.domain()),
                st.config().kernel_family,
                st.config().trend,
                st.pending().map(|p| p.points.clone()),
                doc.evaluations_csv.clone(),
            )
        }
        (None, Some(dp)) => {
            let (x, y) = read_evaluations(dp, None)?;
            if x.is_empty() {
                return Err(CliError::Input(format!("{}: no data rows", dp.display())));
            }
            let norm = Normalization::from_bounding_box(&x);
            (x, y, norm, config.kernel_family, config.trend, None, Some(dp.display().to_string()))
        }
        _ => return Err(CliError::Input("pass exactly one of --state or --data".into())),
    };
    let training = TrainingSet::new(x, y.clone())?;
    let rng = RandomStream::new(seed);
    let mle = estimate_params_with(&training, family, trend, &norm, &EstimationOptions::default(), &mut rng.split(0))?;
    let model = GpModel::fit_with(training, mle.spec, trend, norm)?;
    let loo = model.loo();
    let metrics = loo_metrics(&y, &loo.loo_mean, &loo.loo_sd)?;
    let batch = match &args.batch {
        Some(p) => Some(read_points(p)?),
        None => pending,
    };
    let (correlation, ei_distribution) = match &batch {
        Some(b) if !b.is_empty() => {
            let corr = conditional_correlation(&model, b)?;
            let doe_best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dist = ei_posterior_distribution(&model, b, doe_best, config.diagnostics.draws, &mut rng.split(1))?;
            let histogram = config.diagnostics.bin_width.map(|w| dist.histogram(w));
            (
                Some(corr),
                Some(EiReport {
                    doe_best,
                    a_posteriori: dist.a_posteriori,
                    mean: dist.mean(),
                    samples: dist.samples,
                    bin_width: config.diagnostics.bin_width,
                    histogram,
                }),
            )
        }
        _ => (None, None),
    };
    let report = DiagnosticReport {
        r_squared: metrics.r_squared,
        rmse: metrics.rmse,
        rma: metrics.rma,
        cr95: metrics.cr95,
        loo_mean: loo.loo_mean,
        loo_sd: loo.loo_sd,
        model: model.snapshot(csv_ref),
        batch,
        correlation,
        ei_distribution,
    };
    write_atomic(&args.out, report.to_json().as_bytes())?;
    println!("R2 {:.4}  RMSE {:.4}  RMA {:.4}  CR(95%) {:.4}", report.r_squared, report.rmse, report.rma, report.cr95);
    Ok(())
}

pub fn cmd_run_bench(args: &RunBenchArgs) -> i32 {
    report(run_bench(args))
}

fn run_bench(args: &RunBenchArgs) -> CliResult<()> {
    let objective = benchfn::objective(&args.objective)?;
    let mut config = RunConfig::load(args.config.as_deref())?;
    if args.budget.is_some() {
        config.budget_total = args.budget;
    }
    if args.initial.is_some() {
        config.initial_size = args.initial;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    if let Some(l) = args.liar {
        config.liar = l;
    }
    if config.budget_total.is_none() {
        config.budget_total = Some(40);
    }
    let seed = seed_from(&config, args.seed)?;
    let campaign = config.campaign(seed)?;
    let domain = objective.domain.clone();
    let f = |x: &[f64]| objective.evaluate_negated(x).expect("point inside the domain");
    let history: Vec<Evaluation> = if campaign.initial_size() == campaign.budget_total {
        ego::initial_design(&domain, &campaign)?
            .into_points()
            .into_iter()
            .map(|p| Evaluation {
                value: f(&p),
                point: p,
                ei: None,
            })
            .collect()
    } else {
        ego::run_closed_loop(f, domain, campaign)?.history
    };
    let mut best = f64::INFINITY;
    for (i, e) in history.iter().enumerate() {
        let v = -e.value;
        best = best.min(v);
        println!("{:>4}  f = {:<24}  best = {}", i + 1, v, best);
    }
    println!("objective {}: best {best}, optimum {}, regret {}", objective.name, objective.global_optimum_value, best - objective.global_optimum_value);
    if let Some(path) = &args.history {
        let d = objective.domain.dim();
        let mut header = coordinate_header(d);
        header.extend(["y".to_string(), "ei".to_string()]);
        let rows: Vec<Vec<String>> = history
            .iter()
            .map(|e| {
                let mut r: Vec<String> = e.point.iter().map(|v| format_float(*v)).collect();
                r.push(format_float(-e.value));
                r.push(e.ei.map(format_float).unwrap_or_default());
                r
            })
            .collect();
        write_csv(path, &header, &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), None, None).unwrap(), 3);
        assert_eq!(resolve_seed(Some(3), Some("8"), None).unwrap(), 8);
        assert_eq!(resolve_seed(Some(3), Some("8"), Some(11)).unwrap(), 11);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert_eq!(resolve_seed(None, Some("x"), None).unwrap_err().exit_code(), EXIT_INPUT);
    }

    #[test]
    fn floats_round_trip_through_text() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567, f64::MIN_POSITIVE] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn bounds_flag() {
        let mut c = RunConfig::default();
        c.set_bounds("-5:10,0:15").unwrap();
        assert_eq!(c.domain().unwrap().upper(), &[10.0, 15.0]);
        assert!(c.set_bounds("1;2").is_err());
        c.set_bounds("3:1").unwrap();
        assert_eq!(c.domain().unwrap_err().exit_code(), EXIT_INPUT);
    }

    #[test]
    fn config_defaults_and_sources() {
        let c: RunConfig = serde_json::from_str(r#"{"flowrate": {"q_low": 1000, "q_high": "Qh"}}"#).unwrap();
        assert_eq!(c.batch_size, 10);
        assert_eq!(c.flowrate.q_low, FlowSource::Constant(1000.0));
        assert_eq!(c.flowrate.q_high, FlowSource::Column("Qh".into()));
        assert_eq!(c.flowrate.target_q, 2500.0);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
