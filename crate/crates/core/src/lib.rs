//! Confounder-dependent covariance and correlation estimation with block
//! bootstrap confidence bands and a Monte Carlo coverage harness.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod io;
pub mod kernel;
pub mod plot;
pub mod rng;
pub mod simulation;

pub use bootstrap::{
    bootstrap_ensemble, bootstrap_summary, build_block_plan, confidence_band, coverage_rate,
    ensemble_bands, normal_quantile, percentile_band, resample_counts, resample_series,
    summary_bands, BlockSpan, BootstrapConfig, CoverageRate, Ensemble, EnsembleSummary,
    ReplicateFailure,
};
pub use data::{
    validate_series, BandMethod, BandPoint, BlockMode, BlockPlan, ConfidenceBand, ConfoundedSeries,
    CovarianceField, EvaluationGrid, FieldKind, Gap, MeanField, MeanMethod, MissingMask, Statistic,
};
pub use error::{Error, Result};
pub use io::{
    fill_missing_linear, load_dataset, read_dataset, ColumnMap, ExportFormat, ExportMetadata,
    ExportRow, ExportTable, TimeFormat,
};
pub use kernel::{
    correlation_to_covariance, correlation_with_gaps, covariance_to_correlation,
    estimate_conditional_covariance, estimate_mean, kernel_weight, select_bandwidth_cv,
    BandwidthSelection, ConditionalEstimator, EstimatorConfig, KernelFamily, KernelSpec,
    MeanEvaluation,
};
pub use plot::{render_band_plot, write_band_plot, PlotOptions};
pub use simulation::{
    constant_scenario, run_coverage_study, scenario_functions, simulate_ar1, simulate_outputs,
    simulate_temperature, study_grid, CoverageCell, CoverageReport, CoverageStudyConfig,
    ScenarioSpec, Season, StudyStatistic, TemperatureModel, TemperatureSeries,
};
