use chrono::DateTime;
use condcov::bootstrap::{
    bootstrap_ensemble, bootstrap_summary, build_block_plan, ensemble_bands, summary_bands,
};
use condcov::io::{
    fill_missing_linear, load_dataset, render_export, ExportFormat, ExportMetadata, ExportTable,
};
use condcov::kernel::{correlation_with_gaps, select_bandwidth_cv};
use condcov::plot::{render_band_plot, PlotOptions};
use condcov::rng::substream;
use condcov::simulation::{
    run_coverage_study, scenario_functions, simulate_outputs, simulate_temperature, study_grid,
    CoverageStudyConfig, ScenarioSpec, TemperatureModel,
};
use condcov::{
    BandMethod, BandPoint, ColumnMap, ConditionalEstimator, ConfidenceBand, ConfoundedSeries,
    CovarianceField, Error, EstimatorConfig, EvaluationGrid, FieldKind, KernelSpec, MeanEvaluation,
    Statistic,
};

use crate::args::{
    BandArgs, CoverageArgs, EstimateArgs, GridArgs, InputArgs, KernelArgs, ScenarioArgs,
    SimulateArgs,
};

/// Files produced by a run, written only once the whole run succeeded.
#[derive(Debug, Default)]
pub struct Staged {
    pub files: Vec<(String, String)>,
    /// Extra manifest lines, written as comments.
    pub notes: Vec<(String, String)>,
}

impl Staged {
    fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }
}

type Result<T> = std::result::Result<T, Error>;

fn load(input: &InputArgs) -> Result<ConfoundedSeries> {
    let map = ColumnMap::new(
        input.time_column.clone(),
        input.confounder_column.clone(),
        input.outputs.clone(),
    )?;
    if !input.input.exists() {
        return Err(Error::InvalidParameter {
            name: "input",
            reason: format!("`{}` does not exist", input.input.display()),
        });
    }
    let raw = load_dataset(&input.input, &map, input.time_format)?;
    fill_missing_linear(&raw)
}

fn grid_for(series: &ConfoundedSeries, grid: &GridArgs) -> Result<EvaluationGrid> {
    let (lo, hi) = series.confounder_range();
    EvaluationGrid::linspace(
        grid.grid_min.unwrap_or(lo),
        grid.grid_max.unwrap_or(hi),
        grid.grid,
    )
}

/// Resolves the bandwidth, running cross-validation when candidates are given.
fn estimator_config(
    series: &ConfoundedSeries,
    args: &KernelArgs,
    staged: &mut Staged,
) -> Result<EstimatorConfig> {
    let h = match args.bandwidth {
        Some(h) => h,
        None => {
            let sel = select_bandwidth_cv(
                series,
                &args.cv_candidates,
                args.kernel,
                args.mean_method,
                args.cv_folds,
            )?;
            staged.note("selected-bandwidth", sel.bandwidth);
            sel.bandwidth
        }
    };
    let kernel = KernelSpec::new(args.kernel, h)?;
    let mean_kernel = KernelSpec::new(args.kernel, args.mean_bandwidth.unwrap_or(h))?;
    let evaluation = match args.mean_grid {
        0 => MeanEvaluation::Exact,
        1 => {
            return Err(Error::InvalidParameter {
                name: "mean-grid",
                reason: "needs 0 or at least 2 nodes".into(),
            })
        }
        n => MeanEvaluation::Gridded(n),
    };
    Ok(EstimatorConfig::new(kernel, args.mean_method)
        .with_mean_kernel(mean_kernel)
        .with_mean_evaluation(evaluation))
}

/// Zero-width bands holding only the estimate, for plotting a field.
fn point_bands(field: &CovarianceField) -> Vec<ConfidenceBand> {
    let p = field.p();
    let mut bands = Vec::new();
    for k in 0..p {
        for l in k..p {
            let points = field
                .series(k, l)
                .into_iter()
                .map(|v| {
                    v.is_finite().then_some(BandPoint {
                        estimate: v,
                        boot_sd: 0.0,
                        lower: v,
                        upper: v,
                    })
                })
                .collect();
            bands.push(ConfidenceBand {
                grid: field.grid().clone(),
                statistic: Statistic {
                    kind: field.kind(),
                    k,
                    l,
                },
                points,
                alpha: 0.0,
                replicates: 0,
                method: BandMethod::Normal,
            });
        }
    }
    bands
}

fn add_exports(
    staged: &mut Staged,
    stem: &str,
    table: &ExportTable,
    meta: &ExportMetadata,
) -> Result<()> {
    for format in [ExportFormat::Delimited, ExportFormat::Structured] {
        staged.add(
            format!("{stem}.{}", format.extension()),
            render_export(table, meta, format)?,
        );
    }
    Ok(())
}

fn plot_options(input: &InputArgs, series: &ConfoundedSeries) -> PlotOptions {
    PlotOptions {
        confounder_label: input.confounder_column.clone(),
        channel_labels: series.labels().to_vec(),
    }
}

pub fn estimate(args: &EstimateArgs) -> Result<Staged> {
    let mut staged = Staged::default();
    let series = load(&args.input)?;
    let config = estimator_config(&series, &args.kernel, &mut staged)?;
    let grid = grid_for(&series, &args.grid)?;
    let field = ConditionalEstimator::new(&series, &config, &grid)?.estimate()?;
    let h = config.kernel.bandwidth();
    add_exports(
        &mut staged,
        "covariance",
        &ExportTable::from_field(&field),
        &ExportMetadata::for_field(FieldKind::Covariance, h),
    )?;
    let mut plotted = point_bands(&field);
    if args.correlation {
        let corr = correlation_with_gaps(&field)?;
        add_exports(
            &mut staged,
            "correlation",
            &ExportTable::from_field(&corr),
            &ExportMetadata::for_field(FieldKind::Correlation, h),
        )?;
        plotted = point_bands(&corr)
            .into_iter()
            .filter(|b| b.statistic.k != b.statistic.l)
            .collect();
        if plotted.is_empty() {
            plotted = point_bands(&field);
        }
    }
    if args.plot {
        staged.add(
            "estimate.svg",
            render_band_plot(&plotted, &plot_options(&args.input, &series))?,
        );
    }
    Ok(staged)
}

pub fn band(args: &BandArgs, seed: u64) -> Result<Staged> {
    let mut staged = Staged::default();
    let series = load(&args.input)?;
    let config = estimator_config(&series, &args.kernel, &mut staged)?;
    let grid = grid_for(&series, &args.grid)?;
    let estimator = ConditionalEstimator::new(&series, &config, &grid)?;
    let field = estimator.estimate()?;
    let plan = build_block_plan(&series, args.mode, args.span)?;
    staged.note("blocks", plan.len());
    let kind = args.statistic;
    let (bands, failures) = match args.band_method {
        BandMethod::Normal => {
            let summary = bootstrap_summary(
                &estimator,
                &plan,
                args.replicates,
                seed,
                kind == FieldKind::Correlation,
            )?;
            (
                summary_bands(&field, &summary, kind, args.alpha)?,
                summary.failures.len(),
            )
        }
        BandMethod::Percentile => {
            let ensemble = bootstrap_ensemble(&estimator, &plan, args.replicates, seed)?;
            (
                ensemble_bands(&field, &ensemble, kind, args.alpha, BandMethod::Percentile)?,
                ensemble.failures.len(),
            )
        }
    };
    staged.note("failed-replicates", failures);
    // diagonal correlation bands are identically one
    let bands: Vec<ConfidenceBand> = match kind {
        FieldKind::Correlation if field.p() > 1 => bands
            .into_iter()
            .filter(|b| b.statistic.k != b.statistic.l)
            .collect(),
        _ => bands,
    };
    let meta = ExportMetadata {
        replicates: Some(args.replicates),
        alpha: Some(args.alpha),
        seed: Some(seed),
        mode: Some(args.mode),
        band_method: Some(args.band_method),
        ..ExportMetadata::for_field(kind, config.kernel.bandwidth())
    };
    add_exports(
        &mut staged,
        "band",
        &ExportTable::from_bands(&bands)?,
        &meta,
    )?;
    if args.plot {
        staged.add(
            "band.svg",
            render_band_plot(&bands, &plot_options(&args.input, &series))?,
        );
    }
    Ok(staged)
}

fn scenario(args: &ScenarioArgs) -> Result<ScenarioSpec> {
    scenario_functions(&args.scenario)?.with_ar_coefficient(args.phi)
}

fn iso(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| ts.to_string())
}

pub fn simulate(args: &SimulateArgs, seed: u64) -> Result<Staged> {
    let mut staged = Staged::default();
    let spec = scenario(&args.scenario)?;
    let model = TemperatureModel::default();
    let mut rng = substream(seed, 0);
    let temps = simulate_temperature(
        &model,
        args.scenario.days,
        args.scenario.samples_per_day,
        &mut rng,
    )?;
    let series = simulate_outputs(&spec, &temps, &mut rng)?;
    let mut csv = String::from("time,temperature,y1,y2\n");
    for i in 0..series.n() {
        let x = series.output_row(i);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            iso(series.timestamps()[i]),
            series.confounder()[i],
            x[0],
            x[1]
        ));
    }
    staged.add("dataset.csv", csv);
    let (lo, hi) = model.bounds(args.scenario.days);
    let grid = EvaluationGrid::linspace(lo, hi, 100)?;
    let mut truth = String::from("z,var1,var2,cov12\n");
    for &z in grid.points() {
        truth.push_str(&format!(
            "{z},{},{},{}\n",
            spec.observed_covariance(z, 0, 0),
            spec.observed_covariance(z, 1, 1),
            spec.observed_covariance(z, 0, 1)
        ));
    }
    staged.add("truth.csv", truth);
    Ok(staged)
}

pub fn coverage(args: &CoverageArgs, seed: u64) -> Result<Staged> {
    let mut staged = Staged::default();
    let model = TemperatureModel::default();
    let evaluation = match args.mean_grid {
        0 => MeanEvaluation::Exact,
        n => MeanEvaluation::Gridded(n),
    };
    let config = CoverageStudyConfig {
        scenario: scenario(&args.scenario)?,
        grid: study_grid(&model, args.scenario.days, args.grid, args.grid_margin)?,
        temperature: model,
        days: args.scenario.days,
        samples_per_day: args.scenario.samples_per_day,
        estimator: EstimatorConfig::new(
            KernelSpec::new(args.kernel, args.bandwidth)?,
            args.mean_method,
        )
        .with_mean_evaluation(evaluation),
        modes: args.mode.modes(),
        span: args.span,
        replicates: args.replicates,
        levels: args.levels.clone(),
        datasets: args.datasets,
        seed,
    };
    let report = run_coverage_study(&config)?;
    staged.add("coverage.csv", report.to_delimited());
    if !report.failures.is_empty() {
        let mut text = String::from("dataset,mode,reason\n");
        for f in &report.failures {
            text.push_str(&format!(
                "{},{},\"{}\"\n",
                f.dataset + 1,
                f.mode.as_str(),
                f.reason.replace('"', "'")
            ));
        }
        staged.add("failures.csv", text);
    }
    staged.note("failed-datasets", report.failures.len());
    Ok(staged)
}
