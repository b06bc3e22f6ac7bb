use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use condcov::bootstrap::BlockSpan;
use condcov::io::TimeFormat;
use condcov::{BandMethod, BlockMode, FieldKind, KernelFamily, MeanMethod};

#[derive(Debug, Parser)]
#[command(
    name = "condcov",
    version,
    about = "Conditional covariance estimation with block bootstrap bands"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file of flags; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Directory receiving exports, the manifest and error logs.
    #[arg(long, global = true, env = "CONDCOV_OUTPUT_DIR", value_name = "DIR")]
    pub output: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, value_parser = positive_usize)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the conditional covariance field of a dataset.
    Estimate(EstimateArgs),
    /// Estimate plus block-bootstrap confidence bands.
    Band(BandArgs),
    /// Write a synthetic dataset from a shipped scenario.
    Simulate(SimulateArgs),
    /// Monte Carlo coverage study of the bootstrap bands.
    Coverage(CoverageArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Band(_) => "band",
            Command::Simulate(_) => "simulate",
            Command::Coverage(_) => "coverage",
        }
    }
}

pub fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

pub fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got `{s}`")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1), got `{s}`")),
    }
}

fn ar_coefficient(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.abs() < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (-1, 1), got `{s}`")),
    }
}

fn parsed<T: std::str::FromStr<Err = condcov::Error>>(s: &str) -> Result<T, String> {
    s.parse::<T>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,

    #[arg(long, default_value = "time")]
    pub time_column: String,

    #[arg(long, default_value = "temperature")]
    pub confounder_column: String,

    /// Output columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub outputs: Vec<String>,

    #[arg(long, default_value = "iso8601", value_parser = parsed::<TimeFormat>)]
    pub time_format: TimeFormat,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[arg(long, default_value = "gaussian", value_parser = parsed::<KernelFamily>)]
    pub kernel: KernelFamily,

    #[arg(long, value_parser = positive_f64, allow_hyphen_values = true,
          required_unless_present = "cv_candidates", conflicts_with = "cv_candidates")]
    pub bandwidth: Option<f64>,

    /// Candidate bandwidths for cross-validation, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = positive_f64, allow_hyphen_values = true)]
    pub cv_candidates: Vec<f64>,

    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    pub cv_folds: usize,

    #[arg(long, default_value = "local-linear", value_parser = parsed::<MeanMethod>)]
    pub mean_method: MeanMethod,

    /// Bandwidth of the mean smoother; defaults to the covariance bandwidth.
    #[arg(long, value_parser = positive_f64, allow_hyphen_values = true)]
    pub mean_bandwidth: Option<f64>,

    /// Nodes of the interpolated mean; 0 evaluates the mean at every row.
    #[arg(long, default_value_t = 256)]
    pub mean_grid: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Number of evaluation points.
    #[arg(long = "grid", default_value_t = 100, value_parser = positive_usize)]
    pub grid: usize,

    #[arg(long, allow_hyphen_values = true)]
    pub grid_min: Option<f64>,

    #[arg(long, allow_hyphen_values = true)]
    pub grid_max: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub grid: GridArgs,

    /// Also export the conditional correlation.
    #[arg(long)]
    pub correlation: bool,

    /// Also render an SVG of the estimate.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BandArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[command(flatten)]
    pub grid: GridArgs,

    #[arg(long, default_value = "disjoint", value_parser = parsed::<BlockMode>)]
    pub mode: BlockMode,

    /// `day`, `week` or a row count.
    #[arg(long, default_value = "day", value_parser = parsed::<BlockSpan>)]
    pub span: BlockSpan,

    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,

    #[arg(long, default_value_t = 0.05, value_parser = unit_interval)]
    pub alpha: f64,

    #[arg(long, default_value = "normal", value_parser = band_method)]
    pub band_method: BandMethod,

    #[arg(long, default_value = "covariance", value_parser = field_kind)]
    pub statistic: FieldKind,

    #[arg(long)]
    pub plot: bool,
}

fn band_method(s: &str) -> Result<BandMethod, String> {
    match s {
        "normal" => Ok(BandMethod::Normal),
        "percentile" => Ok(BandMethod::Percentile),
        _ => Err(format!("expected `normal` or `percentile`, got `{s}`")),
    }
}

fn field_kind(s: &str) -> Result<FieldKind, String> {
    match s {
        "covariance" => Ok(FieldKind::Covariance),
        "correlation" => Ok(FieldKind::Correlation),
        _ => Err(format!("expected `covariance` or `correlation`, got `{s}`")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    #[arg(long, default_value = "A")]
    pub scenario: String,

    #[arg(long, default_value_t = 365, value_parser = positive_usize)]
    pub days: usize,

    #[arg(long, default_value_t = 24, value_parser = positive_usize)]
    pub samples_per_day: usize,

    /// AR(1) coefficient of the measurement noise.
    #[arg(long, default_value_t = 0.8, value_parser = ar_coefficient, allow_hyphen_values = true)]
    pub phi: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyModes {
    Disjoint,
    Moving,
    Both,
}

impl StudyModes {
    pub fn modes(self) -> Vec<BlockMode> {
        match self {
            StudyModes::Disjoint => vec![BlockMode::Disjoint],
            StudyModes::Moving => vec![BlockMode::Moving],
            StudyModes::Both => vec![BlockMode::Disjoint, BlockMode::Moving],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StudyModes::Disjoint => "disjoint",
            StudyModes::Moving => "moving",
            StudyModes::Both => "both",
        }
    }
}

fn study_modes(s: &str) -> Result<StudyModes, String> {
    match s {
        "disjoint" => Ok(StudyModes::Disjoint),
        "moving" => Ok(StudyModes::Moving),
        "both" => Ok(StudyModes::Both),
        _ => Err(format!(
            "expected `disjoint`, `moving` or `both`, got `{s}`"
        )),
    }
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,

    #[arg(long, default_value_t = 500, value_parser = positive_usize)]
    pub datasets: usize,

    #[arg(long, default_value_t = 100)]
    pub replicates: usize,

    #[arg(long, default_value = "gaussian", value_parser = parsed::<KernelFamily>)]
    pub kernel: KernelFamily,

    #[arg(long, default_value_t = 1.5, value_parser = positive_f64, allow_hyphen_values = true)]
    pub bandwidth: f64,

    #[arg(long, default_value = "local-linear", value_parser = parsed::<MeanMethod>)]
    pub mean_method: MeanMethod,

    #[arg(long, default_value_t = 64)]
    pub mean_grid: usize,

    #[arg(long, default_value = "both", value_parser = study_modes)]
    pub mode: StudyModes,

    #[arg(long, default_value = "day", value_parser = parsed::<BlockSpan>)]
    pub span: BlockSpan,

    /// Nominal levels, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.95,0.99", value_parser = unit_interval)]
    pub levels: Vec<f64>,

    /// Number of evaluation points.
    #[arg(long = "grid", default_value_t = 100, value_parser = positive_usize)]
    pub grid: usize,

    /// Distance kept from the analytic temperature range at both ends.
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub grid_margin: f64,
}

/// `key=value` lines echoing resolved arguments, in flag spelling.
pub type Manifest = Vec<(String, String)>;

fn push(m: &mut Manifest, key: &str, value: impl ToString) {
    m.push((key.to_string(), value.to_string()));
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl InputArgs {
    pub fn echo(&self, m: &mut Manifest) {
        push(m, "input", self.input.display());
        push(m, "time-column", &self.time_column);
        push(m, "confounder-column", &self.confounder_column);
        push(m, "outputs", self.outputs.join(","));
        push(
            m,
            "time-format",
            match self.time_format {
                TimeFormat::Iso8601 => "iso8601",
                TimeFormat::Epoch => "epoch",
            },
        );
    }
}

impl KernelArgs {
    pub fn echo(&self, m: &mut Manifest) {
        push(m, "kernel", self.kernel.as_str());
        if let Some(h) = self.bandwidth {
            push(m, "bandwidth", h);
        }
        if !self.cv_candidates.is_empty() {
            push(m, "cv-candidates", join(&self.cv_candidates));
            push(m, "cv-folds", self.cv_folds);
        }
        push(m, "mean-method", self.mean_method.as_str());
        if let Some(h) = self.mean_bandwidth {
            push(m, "mean-bandwidth", h);
        }
        push(m, "mean-grid", self.mean_grid);
    }
}

impl GridArgs {
    pub fn echo(&self, m: &mut Manifest) {
        push(m, "grid", self.grid);
        if let Some(v) = self.grid_min {
            push(m, "grid-min", v);
        }
        if let Some(v) = self.grid_max {
            push(m, "grid-max", v);
        }
    }
}

impl ScenarioArgs {
    pub fn echo(&self, m: &mut Manifest) {
        push(m, "scenario", &self.scenario);
        push(m, "days", self.days);
        push(m, "samples-per-day", self.samples_per_day);
        push(m, "phi", self.phi);
    }
}

impl Command {
    /// Resolved arguments of the subcommand.
    pub fn echo(&self) -> Manifest {
        let mut m = Manifest::new();
        match self {
            Command::Estimate(a) => {
                a.input.echo(&mut m);
                a.kernel.echo(&mut m);
                a.grid.echo(&mut m);
                push(&mut m, "correlation", a.correlation);
                push(&mut m, "plot", a.plot);
            }
            Command::Band(a) => {
                a.input.echo(&mut m);
                a.kernel.echo(&mut m);
                a.grid.echo(&mut m);
                push(&mut m, "mode", a.mode.as_str());
                push(&mut m, "span", a.span);
                push(&mut m, "replicates", a.replicates);
                push(&mut m, "alpha", a.alpha);
                push(
                    &mut m,
                    "band-method",
                    match a.band_method {
                        BandMethod::Normal => "normal",
                        BandMethod::Percentile => "percentile",
                    },
                );
                push(&mut m, "statistic", a.statistic.as_str());
                push(&mut m, "plot", a.plot);
            }
            Command::Simulate(a) => a.scenario.echo(&mut m),
            Command::Coverage(a) => {
                a.scenario.echo(&mut m);
                push(&mut m, "datasets", a.datasets);
                push(&mut m, "replicates", a.replicates);
                push(&mut m, "kernel", a.kernel.as_str());
                push(&mut m, "bandwidth", a.bandwidth);
                push(&mut m, "mean-method", a.mean_method.as_str());
                push(&mut m, "mean-grid", a.mean_grid);
                push(&mut m, "mode", a.mode.as_str());
                push(&mut m, "span", a.span);
                push(&mut m, "levels", join(&a.levels));
                push(&mut m, "grid", a.grid);
                push(&mut m, "grid-margin", a.grid_margin);
            }
        }
        m
    }
}
