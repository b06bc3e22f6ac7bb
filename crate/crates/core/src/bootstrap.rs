//! Block and moving-block bootstrap for conditional covariance fields.
//!
//! A plan groups rows into contiguous blocks. A replicate draws blocks
//! uniformly with replacement, concatenates them and truncates to `n` rows;
//! the conditional mean and covariance are then re-estimated on the
//! replicate. Pointwise bands are `estimate -/+ q * sd`, with `sd` the
//! replicate standard deviation and `q` the standard normal quantile at
//! `1 - alpha/2`.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{
    BandMethod, BandPoint, BlockMode, BlockPlan, ConfidenceBand, ConfoundedSeries, CovarianceField,
    EvaluationGrid, FieldKind, Statistic,
};
use crate::error::{Error, Result};
use crate::kernel::{correlation_with_gaps, ConditionalEstimator};
use crate::rng::substream;

const DAY_SECONDS: i64 = 86_400;

/// Replicates per work chunk when accumulating moments.
const CHUNK: usize = 32;

/// Block extent: a row count, or a calendar unit resolved from timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockSpan {
    Rows(usize),
    Day,
    Week,
}

impl BlockSpan {
    fn unit_seconds(self) -> Option<i64> {
        match self {
            BlockSpan::Rows(_) => None,
            BlockSpan::Day => Some(DAY_SECONDS),
            BlockSpan::Week => Some(7 * DAY_SECONDS),
        }
    }
}

impl std::fmt::Display for BlockSpan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockSpan::Rows(r) => write!(f, "{r}"),
            BlockSpan::Day => f.write_str("day"),
            BlockSpan::Week => f.write_str("week"),
        }
    }
}

impl std::str::FromStr for BlockSpan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(BlockSpan::Day),
            "week" => Ok(BlockSpan::Week),
            _ => match s.parse::<usize>() {
                Ok(r) if r >= 1 => Ok(BlockSpan::Rows(r)),
                _ => Err(Error::InvalidParameter {
                    name: "span",
                    reason: format!("expected `day`, `week` or a positive row count, got `{s}`"),
                }),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub mode: BlockMode,
    pub span: BlockSpan,
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    pub method: BandMethod,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidParameter {
                name: "replicates",
                reason: format!("need at least 2, got {}", self.replicates),
            });
        }
        check_alpha(self.alpha)?;
        if self.span == BlockSpan::Rows(0) {
            return Err(Error::InvalidParameter {
                name: "span",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "alpha",
            reason: format!("must lie in (0, 1), got {alpha}"),
        })
    }
}

/// Calendar index of a timestamp (UTC days, or ISO weeks starting Monday).
fn calendar_key(ts: i64, unit: i64) -> i64 {
    let day = ts.div_euclid(DAY_SECONDS);
    if unit == DAY_SECONDS {
        day
    } else {
        // 1970-01-01 was a Thursday
        (day + 3).div_euclid(7)
    }
}

fn calendar_runs(timestamps: &[i64], unit: i64) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=timestamps.len() {
        if i == timestamps.len()
            || calendar_key(timestamps[i], unit) != calendar_key(timestamps[start], unit)
        {
            runs.push(start..i);
            start = i;
        }
    }
    runs
}

/// Groups the rows of `series` into resampling blocks.
///
/// Disjoint plans cut consecutive runs of the given length, keeping a short
/// final block, or one block per calendar unit present. Moving plans hold
/// every window `{k, ..., k + tau}`; a calendar span sets `tau + 1` to the
/// typical number of rows per unit.
pub fn build_block_plan(
    series: &ConfoundedSeries,
    mode: BlockMode,
    span: BlockSpan,
) -> Result<BlockPlan> {
    let n = series.n();
    let blocks: Vec<Range<usize>>;
    let extent;
    match (mode, span) {
        (_, BlockSpan::Rows(0)) => {
            return Err(Error::InvalidParameter {
                name: "span",
                reason: "must be at least 1".into(),
            })
        }
        (BlockMode::Disjoint, BlockSpan::Rows(len)) => {
            if len > n {
                return Err(Error::SpanTooLarge { span: len, n });
            }
            blocks = (0..n).step_by(len).map(|s| s..(s + len).min(n)).collect();
            extent = len;
        }
        (BlockMode::Disjoint, cal) => {
            let unit = cal.unit_seconds().expect("calendar span");
            blocks = calendar_runs(series.timestamps(), unit);
            if blocks.len() < 2 {
                return Err(Error::EmptyCalendarBlocks);
            }
            extent = blocks.iter().map(|b| b.len()).max().unwrap_or(1);
        }
        (BlockMode::Moving, span) => {
            let tau = match span {
                BlockSpan::Rows(t) => t,
                cal => {
                    let unit = cal.unit_seconds().expect("calendar span");
                    let runs = calendar_runs(series.timestamps(), unit);
                    if runs.len() < 2 {
                        return Err(Error::EmptyCalendarBlocks);
                    }
                    let mut lens: Vec<usize> = runs.iter().map(|r| r.len()).collect();
                    lens.sort_unstable();
                    lens[lens.len() / 2].max(2) - 1
                }
            };
            if tau >= n {
                return Err(Error::SpanTooLarge { span: tau, n });
            }
            blocks = (0..n - tau).map(|k| k..k + tau + 1).collect();
            extent = tau;
        }
    }
    Ok(BlockPlan {
        blocks,
        mode,
        span: extent,
        n,
    })
}

/// Draws block indices until their rows cover `n`, but never fewer than
/// `ceil(n / mean block length) + 1` draws.
pub fn draw_blocks<R: Rng + ?Sized>(plan: &BlockPlan, rng: &mut R) -> Vec<usize> {
    let m = plan.blocks.len();
    let minimum = (plan.n as f64 / plan.mean_block_len()).ceil() as usize + 1;
    let mut draws = Vec::with_capacity(minimum);
    let mut rows = 0;
    while draws.len() < minimum || rows < plan.n {
        let b = rng.random_range(0..m);
        rows += plan.blocks[b].len();
        draws.push(b);
    }
    draws
}

/// Row indices of a replicate: drawn blocks concatenated, truncated to `n`.
fn replicate_rows(plan: &BlockPlan, draws: &[usize]) -> Vec<usize> {
    let mut rows = Vec::with_capacity(plan.n + plan.span + 1);
    for &b in draws {
        rows.extend(plan.blocks[b].clone());
        if rows.len() >= plan.n {
            break;
        }
    }
    rows.truncate(plan.n);
    rows
}

/// Per-row multiplicities of one replicate.
pub fn resample_counts<R: Rng + ?Sized>(plan: &BlockPlan, rng: &mut R) -> Vec<f64> {
    let draws = draw_blocks(plan, rng);
    let mut counts = vec![0.0; plan.n];
    for i in replicate_rows(plan, &draws) {
        counts[i] += 1.0;
    }
    counts
}

/// Materialises one block-bootstrap replicate. Confounder and output rows
/// travel together; timestamps are renumbered `1..=n`.
pub fn resample_series<R: Rng + ?Sized>(
    series: &ConfoundedSeries,
    plan: &BlockPlan,
    rng: &mut R,
) -> Result<ConfoundedSeries> {
    if plan.n != series.n() {
        return Err(Error::MismatchedLengths {
            what: format!("plan for {} rows applied to {} rows", plan.n, series.n()),
        });
    }
    let rows = replicate_rows(plan, &draw_blocks(plan, rng));
    let outputs = Array2::from_shape_fn((rows.len(), series.p()), |(i, j)| {
        series.outputs()[[rows[i], j]]
    });
    let confounder = rows.iter().map(|&i| series.confounder()[i]).collect();
    ConfoundedSeries::new((1..=rows.len() as i64).collect(), outputs, confounder)?
        .with_labels(series.labels().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub reason: Error,
}

/// Replicate fields in replicate order plus the failure ledger.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub fields: Vec<CovarianceField>,
    pub failures: Vec<ReplicateFailure>,
    pub replicates: usize,
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if 2 * failed > total {
        Err(Error::TooManyFailures { failed, total })
    } else {
        Ok(())
    }
}

fn run_replicate(
    estimator: &ConditionalEstimator,
    plan: &BlockPlan,
    seed: u64,
    r: usize,
) -> Result<CovarianceField> {
    let mut rng = substream(seed, r as u64);
    let counts = resample_counts(plan, &mut rng);
    estimator.estimate_weighted(&counts)
}

fn check_plan(estimator: &ConditionalEstimator, plan: &BlockPlan, replicates: usize) -> Result<()> {
    if replicates < 2 {
        return Err(Error::InvalidParameter {
            name: "replicates",
            reason: format!("need at least 2, got {replicates}"),
        });
    }
    if plan.n != estimator.rows() {
        return Err(Error::MismatchedLengths {
            what: format!(
                "plan for {} rows, estimator for {}",
                plan.n,
                estimator.rows()
            ),
        });
    }
    Ok(())
}

/// Runs `replicates` bootstrap replicates. Replicate `r` draws from
/// substream `(seed, r)`, so the ensemble is independent of worker count.
pub fn bootstrap_ensemble(
    estimator: &ConditionalEstimator,
    plan: &BlockPlan,
    replicates: usize,
    seed: u64,
) -> Result<Ensemble> {
    check_plan(estimator, plan, replicates)?;
    let results: Vec<Result<CovarianceField>> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(estimator, plan, seed, r))
        .collect();
    let mut fields = Vec::with_capacity(replicates);
    let mut failures = Vec::new();
    for (replicate, res) in results.into_iter().enumerate() {
        match res {
            Ok(f) => fields.push(f),
            Err(reason) => failures.push(ReplicateFailure { replicate, reason }),
        }
    }
    check_failures(failures.len(), replicates)?;
    Ok(Ensemble {
        fields,
        failures,
        replicates,
    })
}

/// Running count, mean and squared deviation per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    count: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(cells: usize) -> Self {
        Self {
            count: vec![0; cells],
            mean: vec![0.0; cells],
            m2: vec![0.0; cells],
        }
    }

    /// Adds one value per cell; non-finite values are skipped.
    pub fn push(&mut self, values: impl IntoIterator<Item = f64>) {
        for (c, v) in values.into_iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            self.count[c] += 1;
            let delta = v - self.mean[c];
            self.mean[c] += delta / self.count[c] as f64;
            self.m2[c] += delta * (v - self.mean[c]);
        }
    }

    /// Pairwise combination of two accumulators.
    pub fn merge(&mut self, other: &Moments) {
        for c in 0..self.count.len() {
            let (na, nb) = (self.count[c], other.count[c]);
            if nb == 0 {
                continue;
            }
            if na == 0 {
                self.count[c] = nb;
                self.mean[c] = other.mean[c];
                self.m2[c] = other.m2[c];
                continue;
            }
            let n = (na + nb) as f64;
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb as f64 / n;
            self.m2[c] += other.m2[c] + delta * delta * na as f64 * nb as f64 / n;
            self.count[c] = na + nb;
        }
    }

    pub fn count(&self, cell: usize) -> u64 {
        self.count[cell]
    }

    /// Sample standard deviation (divisor `count - 1`).
    pub fn sd(&self, cell: usize) -> Option<f64> {
        (self.count[cell] >= 2).then(|| (self.m2[cell] / (self.count[cell] - 1) as f64).sqrt())
    }
}

/// Upper-triangle cells of a `(G, p, p)` field, grid-major.
fn triangle_values(field: &CovarianceField) -> impl Iterator<Item = f64> + '_ {
    let (g_len, p) = (field.grid().len(), field.p());
    (0..g_len)
        .flat_map(move |g| (0..p).flat_map(move |k| (k..p).map(move |l| field.entry(g, k, l))))
}

fn cell_index(p: usize, g: usize, k: usize, l: usize) -> usize {
    let q = p * (p + 1) / 2;
    let (k, l) = if k <= l { (k, l) } else { (l, k) };
    g * q + k * p - k * (k + 1) / 2 + l
}

/// Streaming replicate moments for covariance and (optionally) correlation.
#[derive(Debug, Clone)]
pub struct EnsembleSummary {
    pub grid: EvaluationGrid,
    pub p: usize,
    pub covariance: Moments,
    pub correlation: Option<Moments>,
    pub failures: Vec<ReplicateFailure>,
    pub replicates: usize,
}

impl EnsembleSummary {
    pub fn moments(&self, kind: FieldKind) -> Option<&Moments> {
        match kind {
            FieldKind::Covariance => Some(&self.covariance),
            FieldKind::Correlation => self.correlation.as_ref(),
        }
    }
}

/// Like [`bootstrap_ensemble`] but keeps only per-cell moments, for large
/// replicate counts. Chunks of replicates are merged in a fixed order.
pub fn bootstrap_summary(
    estimator: &ConditionalEstimator,
    plan: &BlockPlan,
    replicates: usize,
    seed: u64,
    with_correlation: bool,
) -> Result<EnsembleSummary> {
    check_plan(estimator, plan, replicates)?;
    let grid = estimator.grid().clone();
    let p = estimator.p();
    let cells = grid.len() * p * (p + 1) / 2;
    let chunks = replicates.div_ceil(CHUNK);
    type Partial = (Moments, Option<Moments>, Vec<ReplicateFailure>);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut cov = Moments::new(cells);
            let mut cor = with_correlation.then(|| Moments::new(cells));
            let mut failures = Vec::new();
            for r in c * CHUNK..((c + 1) * CHUNK).min(replicates) {
                match run_replicate(estimator, plan, seed, r) {
                    Ok(field) => {
                        cov.push(triangle_values(&field));
                        if let Some(acc) = cor.as_mut() {
                            match correlation_with_gaps(&field) {
                                Ok(rf) => acc.push(triangle_values(&rf)),
                                Err(reason) => failures.push(ReplicateFailure {
                                    replicate: r,
                                    reason,
                                }),
                            }
                        }
                    }
                    Err(reason) => failures.push(ReplicateFailure {
                        replicate: r,
                        reason,
                    }),
                }
            }
            (cov, cor, failures)
        })
        .collect();
    let mut covariance = Moments::new(cells);
    let mut correlation = with_correlation.then(|| Moments::new(cells));
    let mut failures = Vec::new();
    for (cov, cor, fail) in partials {
        covariance.merge(&cov);
        if let (Some(acc), Some(part)) = (correlation.as_mut(), cor.as_ref()) {
            acc.merge(part);
        }
        failures.extend(fail);
    }
    check_failures(failures.len(), replicates)?;
    Ok(EnsembleSummary {
        grid,
        p,
        covariance,
        correlation,
        failures,
        replicates,
    })
}

/// Standard normal quantile.
pub fn normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

fn normal_point(estimate: f64, sd: f64, q: f64) -> BandPoint {
    BandPoint {
        estimate,
        boot_sd: sd,
        lower: estimate - q * sd,
        upper: estimate + q * sd,
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Normal-approximation band from per-grid estimates and replicate values
/// (`replicates[r][g]`). The band is centred on the original estimate; a
/// NaN estimate yields a gap.
pub fn confidence_band(
    grid: &EvaluationGrid,
    statistic: Statistic,
    estimate: &[f64],
    replicates: &[Vec<f64>],
    alpha: f64,
) -> Result<ConfidenceBand> {
    check_alpha(alpha)?;
    if estimate.len() != grid.len() || replicates.iter().any(|r| r.len() != grid.len()) {
        return Err(Error::GridMismatch);
    }
    let q = normal_quantile(1.0 - alpha / 2.0);
    let mut points = Vec::with_capacity(grid.len());
    for (g, &est) in estimate.iter().enumerate() {
        if !est.is_finite() {
            points.push(None);
            continue;
        }
        let values: Vec<f64> = replicates
            .iter()
            .map(|r| r[g])
            .filter(|v| v.is_finite())
            .collect();
        if values.len() < 2 {
            return Err(Error::InsufficientReplicates {
                z: grid.points()[g],
            });
        }
        points.push(Some(normal_point(est, sample_sd(&values), q)));
    }
    Ok(ConfidenceBand {
        grid: grid.clone(),
        statistic,
        points,
        alpha,
        replicates: replicates.len(),
        method: BandMethod::Normal,
    })
}

/// Linear-interpolation (type 7) sample quantile of sorted values.
fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile band: empirical `alpha/2` and `1 - alpha/2` quantiles of the
/// replicate values. Unlike the normal band it need not be symmetric.
pub fn percentile_band(
    grid: &EvaluationGrid,
    statistic: Statistic,
    estimate: &[f64],
    replicates: &[Vec<f64>],
    alpha: f64,
) -> Result<ConfidenceBand> {
    check_alpha(alpha)?;
    if estimate.len() != grid.len() || replicates.iter().any(|r| r.len() != grid.len()) {
        return Err(Error::GridMismatch);
    }
    let mut points = Vec::with_capacity(grid.len());
    for (g, &est) in estimate.iter().enumerate() {
        if !est.is_finite() {
            points.push(None);
            continue;
        }
        let mut values: Vec<f64> = replicates
            .iter()
            .map(|r| r[g])
            .filter(|v| v.is_finite())
            .collect();
        if values.len() < 2 {
            return Err(Error::InsufficientReplicates {
                z: grid.points()[g],
            });
        }
        values.sort_by(f64::total_cmp);
        points.push(Some(BandPoint {
            estimate: est,
            boot_sd: sample_sd(&values),
            lower: sorted_quantile(&values, alpha / 2.0),
            upper: sorted_quantile(&values, 1.0 - alpha / 2.0),
        }));
    }
    Ok(ConfidenceBand {
        grid: grid.clone(),
        statistic,
        points,
        alpha,
        replicates: replicates.len(),
        method: BandMethod::Percentile,
    })
}

/// Estimate field matching `kind`, converting to correlation when asked.
pub fn field_of_kind(estimate: &CovarianceField, kind: FieldKind) -> Result<CovarianceField> {
    match (estimate.kind(), kind) {
        (a, b) if a == b => Ok(estimate.clone()),
        (FieldKind::Covariance, FieldKind::Correlation) => correlation_with_gaps(estimate),
        _ => Err(Error::InvalidParameter {
            name: "kind",
            reason: "cannot convert a correlation field to covariance without variances".into(),
        }),
    }
}

/// Bands for every entry `k <= l` from a full ensemble.
pub fn ensemble_bands(
    estimate: &CovarianceField,
    ensemble: &Ensemble,
    kind: FieldKind,
    alpha: f64,
    method: BandMethod,
) -> Result<Vec<ConfidenceBand>> {
    let point = field_of_kind(estimate, kind)?;
    let fields = ensemble
        .fields
        .iter()
        .map(|f| field_of_kind(f, kind))
        .collect::<Result<Vec<_>>>()?;
    let p = point.p();
    let mut bands = Vec::new();
    for k in 0..p {
        for l in k..p {
            let statistic = Statistic { kind, k, l };
            let reps: Vec<Vec<f64>> = fields.iter().map(|f| f.series(k, l)).collect();
            let est = point.series(k, l);
            let mut band = match method {
                BandMethod::Normal => confidence_band(point.grid(), statistic, &est, &reps, alpha)?,
                BandMethod::Percentile => {
                    percentile_band(point.grid(), statistic, &est, &reps, alpha)?
                }
            };
            band.replicates = ensemble.replicates;
            bands.push(band);
        }
    }
    Ok(bands)
}

/// Normal bands for every entry `k <= l` from streamed moments.
pub fn summary_bands(
    estimate: &CovarianceField,
    summary: &EnsembleSummary,
    kind: FieldKind,
    alpha: f64,
) -> Result<Vec<ConfidenceBand>> {
    check_alpha(alpha)?;
    let point = field_of_kind(estimate, kind)?;
    let moments = summary.moments(kind).ok_or(Error::InvalidParameter {
        name: "kind",
        reason: "summary was built without correlation moments".into(),
    })?;
    if point.grid() != &summary.grid || point.p() != summary.p {
        return Err(Error::GridMismatch);
    }
    let q = normal_quantile(1.0 - alpha / 2.0);
    let p = point.p();
    let mut bands = Vec::new();
    for k in 0..p {
        for l in k..p {
            let mut points = Vec::with_capacity(point.grid().len());
            for g in 0..point.grid().len() {
                let est = point.entry(g, k, l);
                if !est.is_finite() {
                    points.push(None);
                    continue;
                }
                let sd =
                    moments
                        .sd(cell_index(p, g, k, l))
                        .ok_or(Error::InsufficientReplicates {
                            z: point.grid().points()[g],
                        })?;
                points.push(Some(normal_point(est, sd, q)));
            }
            bands.push(ConfidenceBand {
                grid: point.grid().clone(),
                statistic: Statistic { kind, k, l },
                points,
                alpha,
                replicates: summary.replicates,
                method: BandMethod::Normal,
            });
        }
    }
    Ok(bands)
}

/// Per-grid and grid-averaged empirical coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRate {
    pub per_grid: Vec<f64>,
    pub average: f64,
}

/// Fraction of bands containing `truth` at each grid point. Gap points count
/// as misses.
pub fn coverage_rate(bands: &[ConfidenceBand], truth: &[f64]) -> Result<CoverageRate> {
    let first = bands.first().ok_or(Error::InvalidParameter {
        name: "bands",
        reason: "no bands to score".into(),
    })?;
    let g_len = first.grid.len();
    if truth.len() != g_len || bands.iter().any(|b| b.grid != first.grid) {
        return Err(Error::GridMismatch);
    }
    let per_grid: Vec<f64> = (0..g_len)
        .map(|g| {
            let hits = bands
                .iter()
                .filter(|b| b.points[g].is_some_and(|pt| pt.contains(truth[g])))
                .count();
            hits as f64 / bands.len() as f64
        })
        .collect();
    let average = per_grid.iter().sum::<f64>() / g_len as f64;
    Ok(CoverageRate { per_grid, average })
}
