//! Synthetic monitoring data and the Monte Carlo coverage study.
//!
//! Temperature follows an annual sine plus a daily sine whose amplitude
//! `zeta_d` is drawn once per day from a season-dependent uniform interval:
//!
//! ```text
//! z_d(eta) = 8 sin((d - 141) 2 pi / 365) - zeta_d sin(pi eta / 12 + 0.3) + 5.5
//! ```
//!
//! Outputs are `y_t = x_t + delta_t` with `x_t ~ N(m(z_t), S(z_t))` drawn
//! independently over time and `delta_jt` a stationary AR(1) process with
//! variance `nu_j^2`, independent across channels.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_ensemble, build_block_plan, ensemble_bands, BlockSpan};
use crate::data::{BandMethod, BlockMode, ConfoundedSeries, EvaluationGrid, FieldKind};
use crate::error::{Error, Result};
use crate::kernel::{ConditionalEstimator, EstimatorConfig};
use crate::rng::{derive_seed, substream};

/// 2019-01-01T00:00:00Z; simulated day 1 starts here.
pub const SIMULATION_EPOCH: i64 = 1_546_300_800;

const DAY_SECONDS: f64 = 86_400.0;

/// Noise variances of the two channels.
pub const NOISE_VARIANCES: [f64; 2] = [0.02, 0.017];

pub const DEFAULT_AR_COEFFICIENT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    /// Meteorological season of a day of a non-leap year.
    pub fn of_day(day: usize) -> Season {
        match (day - 1) % 365 + 1 {
            60..=151 => Season::Spring,
            152..=243 => Season::Summer,
            244..=334 => Season::Autumn,
            _ => Season::Winter,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub annual_amplitude: f64,
    pub annual_phase_day: f64,
    pub daily_phase: f64,
    pub offset: f64,
    /// `(a, b)` of the uniform daily amplitude, indexed winter, spring,
    /// summer, autumn.
    pub zeta_intervals: [(f64, f64); 4],
}

impl Default for TemperatureModel {
    fn default() -> Self {
        Self {
            annual_amplitude: 8.0,
            annual_phase_day: 141.0,
            daily_phase: 0.3,
            offset: 5.5,
            zeta_intervals: [(0.5, 2.0), (1.0, 4.0), (2.0, 6.0), (1.0, 4.0)],
        }
    }
}

impl TemperatureModel {
    pub fn validate(&self) -> Result<()> {
        if self.zeta_intervals.iter().any(|&(a, b)| !(a < b)) {
            return Err(Error::InvalidParameter {
                name: "zeta_intervals",
                reason: "every interval needs a < b".into(),
            });
        }
        Ok(())
    }

    fn seasonal(&self, day: usize) -> f64 {
        let d = ((day - 1) % 365 + 1) as f64;
        self.annual_amplitude * ((d - self.annual_phase_day) * 2.0 * PI / 365.0).sin() + self.offset
    }

    /// Temperature on `day` (1-based) at `hour` in (0, 24) for a given daily
    /// amplitude.
    pub fn temperature(&self, day: usize, hour: f64, zeta: f64) -> f64 {
        self.seasonal(day) - zeta * (PI * hour / 12.0 + self.daily_phase).sin()
    }

    pub fn zeta_interval(&self, day: usize) -> (f64, f64) {
        self.zeta_intervals[Season::of_day(day).index()]
    }

    /// Range every temperature over days `1..=days` must fall in.
    pub fn bounds(&self, days: usize) -> (f64, f64) {
        (1..=days).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
            let base = self.seasonal(d);
            let b = self
                .zeta_interval(d)
                .1
                .abs()
                .max(self.zeta_interval(d).0.abs());
            (lo.min(base - b), hi.max(base + b))
        })
    }
}

/// Simulated confounder track.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSeries {
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    /// Daily amplitude drawn for each day.
    pub zeta: Vec<f64>,
}

/// Evaluates the temperature model at `samples_per_day` equally spaced hours
/// `(s + 1/2) 24 / S` of each day, drawing the daily amplitude once per day.
pub fn simulate_temperature<R: Rng + ?Sized>(
    model: &TemperatureModel,
    days: usize,
    samples_per_day: usize,
    rng: &mut R,
) -> Result<TemperatureSeries> {
    model.validate()?;
    if days == 0 || samples_per_day == 0 || samples_per_day > 86_400 {
        return Err(Error::InvalidParameter {
            name: "days",
            reason: format!("need days >= 1 and 1 <= samples per day <= 86400, got {days} and {samples_per_day}"),
        });
    }
    let mut timestamps = Vec::with_capacity(days * samples_per_day);
    let mut values = Vec::with_capacity(days * samples_per_day);
    let mut zeta = Vec::with_capacity(days);
    for day in 1..=days {
        let (a, b) = model.zeta_interval(day);
        let z_d = Uniform::new(a, b)
            .map_err(|e| Error::InvalidParameter {
                name: "zeta_intervals",
                reason: e.to_string(),
            })?
            .sample(rng);
        zeta.push(z_d);
        for s in 0..samples_per_day {
            let hour = (s as f64 + 0.5) * 24.0 / samples_per_day as f64;
            let offset = (hour * 3600.0).round() as i64;
            timestamps.push(SIMULATION_EPOCH + (day as i64 - 1) * DAY_SECONDS as i64 + offset);
            values.push(model.temperature(day, hour, z_d));
        }
    }
    Ok(TemperatureSeries {
        timestamps,
        values,
        zeta,
    })
}

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Ground truth of a two-channel simulation.
#[derive(Clone)]
pub struct ScenarioSpec {
    name: String,
    mean: [ScalarFn; 2],
    variance: [ScalarFn; 2],
    covariance: ScalarFn,
    noise_variance: [f64; 2],
    ar_coefficient: f64,
}

impl fmt::Debug for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScenarioSpec")
            .field("name", &self.name)
            .field("noise_variance", &self.noise_variance)
            .field("ar_coefficient", &self.ar_coefficient)
            .finish_non_exhaustive()
    }
}

/// Temperature range on which scenario validity is checked.
pub const CHECK_RANGE: (f64, f64) = (-5.0, 25.0);

impl ScenarioSpec {
    /// Builds a scenario, rejecting one whose covariance matrix is not PSD at
    /// any of 1000 points of `check_range`.
    pub fn custom(
        name: impl Into<String>,
        mean: [ScalarFn; 2],
        variance: [ScalarFn; 2],
        covariance: ScalarFn,
        noise_variance: [f64; 2],
        ar_coefficient: f64,
        check_range: (f64, f64),
    ) -> Result<Self> {
        if !(ar_coefficient.abs() < 1.0) {
            return Err(Error::InvalidParameter {
                name: "ar_coefficient",
                reason: format!("needs |phi| < 1, got {ar_coefficient}"),
            });
        }
        if noise_variance.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter {
                name: "noise_variance",
                reason: "must be nonnegative".into(),
            });
        }
        let spec = Self {
            name: name.into(),
            mean,
            variance,
            covariance,
            noise_variance,
            ar_coefficient,
        };
        let (lo, hi) = check_range;
        for i in 0..1000 {
            let z = lo + (hi - lo) * i as f64 / 999.0;
            spec.factor(z)?;
        }
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn noise_variance(&self) -> [f64; 2] {
        self.noise_variance
    }

    pub fn ar_coefficient(&self) -> f64 {
        self.ar_coefficient
    }

    pub fn with_ar_coefficient(mut self, phi: f64) -> Result<Self> {
        if !(phi.abs() < 1.0) {
            return Err(Error::InvalidParameter {
                name: "ar_coefficient",
                reason: format!("needs |phi| < 1, got {phi}"),
            });
        }
        self.ar_coefficient = phi;
        Ok(self)
    }

    pub fn with_noise_variance(mut self, noise: [f64; 2]) -> Self {
        self.noise_variance = noise;
        self
    }

    pub fn mean(&self, z: f64) -> [f64; 2] {
        [(self.mean[0])(z), (self.mean[1])(z)]
    }

    /// Latent covariance `[[s1, s12], [s12, s2]]` at `z`.
    pub fn latent_covariance(&self, z: f64) -> [[f64; 2]; 2] {
        let c = (self.covariance)(z);
        [[(self.variance[0])(z), c], [c, (self.variance[1])(z)]]
    }

    /// True covariance of the observed outputs: noise variance added on the
    /// diagonal. Indices are 0-based.
    pub fn observed_covariance(&self, z: f64, k: usize, l: usize) -> f64 {
        let s = self.latent_covariance(z);
        if k == l {
            s[k][k] + self.noise_variance[k]
        } else {
            s[k][l]
        }
    }

    /// Lower-triangular factor `L` with `L L' = S(z)`.
    fn factor(&self, z: f64) -> Result<[[f64; 2]; 2]> {
        let [[s1, s12], [_, s2]] = self.latent_covariance(z);
        if !(s1 >= 0.0 && s2 >= 0.0 && s12 * s12 <= s1 * s2 * (1.0 + 1e-12)) {
            return Err(Error::NonPsdAtTemperature { z });
        }
        let l11 = s1.sqrt();
        let l21 = if l11 > 0.0 { s12 / l11 } else { 0.0 };
        let l22 = (s2 - l21 * l21).max(0.0).sqrt();
        Ok([[l11, 0.0], [l21, l22]])
    }
}

fn logistic_cold(z: f64, centre: f64, scale: f64) -> f64 {
    1.0 / (1.0 + ((z - centre) / scale).exp())
}

fn shipped_means() -> [ScalarFn; 2] {
    [
        Arc::new(|z| 4.05 - 0.010 * z),
        Arc::new(|z| 6.20 - 0.015 * z + 0.0003 * z * z),
    ]
}

/// Built-in scenarios.
///
/// A: variances and correlation step down through a logistic transition
/// centred at 3 C (scale 2 C),
/// `s1 = 0.010 + 0.030 L`, `s2 = 0.008 + 0.024 L`, `rho = 0.15 + 0.65 L`.
///
/// B: exponential decay from the cold end,
/// `s1 = 0.012 + 0.03 e^{-(z+5)/9}`, `s2 = 0.010 + 0.02 e^{-(z+5)/10}`,
/// `rho = 0.85 e^{-(z+5)/12} - 0.15`.
///
/// Both use `s12 = rho sqrt(s1 s2)`, means `m1 = 4.05 - 0.01 z` and
/// `m2 = 6.2 - 0.015 z + 0.0003 z^2`, noise variances 0.02 and 0.017 and an
/// AR(1) coefficient of 0.8.
pub fn scenario_functions(name: &str) -> Result<ScenarioSpec> {
    let (variance, rho): ([ScalarFn; 2], ScalarFn) = match name {
        "A" | "a" => (
            [
                Arc::new(|z| 0.010 + 0.030 * logistic_cold(z, 3.0, 2.0)),
                Arc::new(|z| 0.008 + 0.024 * logistic_cold(z, 3.0, 2.0)),
            ],
            Arc::new(|z| 0.15 + 0.65 * logistic_cold(z, 3.0, 2.0)),
        ),
        "B" | "b" => (
            [
                Arc::new(|z| 0.012 + 0.03 * (-(z + 5.0) / 9.0).exp()),
                Arc::new(|z| 0.010 + 0.02 * (-(z + 5.0) / 10.0).exp()),
            ],
            Arc::new(|z| 0.85 * (-(z + 5.0) / 12.0).exp() - 0.15),
        ),
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    let (v1, v2) = (variance[0].clone(), variance[1].clone());
    let covariance: ScalarFn = Arc::new(move |z| rho(z) * (v1(z) * v2(z)).sqrt());
    ScenarioSpec::custom(
        name.to_uppercase(),
        shipped_means(),
        variance,
        covariance,
        NOISE_VARIANCES,
        DEFAULT_AR_COEFFICIENT,
        CHECK_RANGE,
    )
}

/// Scenario with temperature-independent latent covariance.
pub fn constant_scenario(s1: f64, s2: f64, s12: f64) -> Result<ScenarioSpec> {
    ScenarioSpec::custom(
        "constant",
        shipped_means(),
        [Arc::new(move |_| s1), Arc::new(move |_| s2)],
        Arc::new(move |_| s12),
        NOISE_VARIANCES,
        DEFAULT_AR_COEFFICIENT,
        CHECK_RANGE,
    )
}

/// Stationary AR(1) path of length `n` with marginal variance `variance`.
pub fn simulate_ar1<R: Rng + ?Sized>(n: usize, phi: f64, variance: f64, rng: &mut R) -> Vec<f64> {
    let innovation_sd = (variance * (1.0 - phi * phi)).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0;
    for t in 0..n {
        let e: f64 = StandardNormal.sample(rng);
        prev = if t == 0 {
            variance.sqrt() * e
        } else {
            phi * prev + innovation_sd * e
        };
        out.push(prev);
    }
    out
}

/// Simulates two observed channels over a temperature track.
pub fn simulate_outputs<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    temperatures: &TemperatureSeries,
    rng: &mut R,
) -> Result<ConfoundedSeries> {
    let n = temperatures.values.len();
    if let Some(z) = temperatures.values.iter().find(|z| !z.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "temperatures",
            reason: format!("non-finite temperature {z}"),
        });
    }
    let phi = spec.ar_coefficient;
    let nu = spec.noise_variance;
    let innovation_sd = [
        (nu[0] * (1.0 - phi * phi)).sqrt(),
        (nu[1] * (1.0 - phi * phi)).sqrt(),
    ];
    let mut outputs = Array2::zeros((n, 2));
    let mut delta = [0.0; 2];
    for (t, &z) in temperatures.values.iter().enumerate() {
        let l = spec.factor(z)?;
        let m = spec.mean(z);
        let e: [f64; 2] = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let latent = [
            m[0] + l[0][0] * e[0],
            m[1] + l[1][0] * e[0] + l[1][1] * e[1],
        ];
        for j in 0..2 {
            let u: f64 = StandardNormal.sample(rng);
            delta[j] = if t == 0 {
                nu[j].sqrt() * u
            } else {
                phi * delta[j] + innovation_sd[j] * u
            };
            outputs[[t, j]] = latent[j] + delta[j];
        }
    }
    ConfoundedSeries::new(
        temperatures.timestamps.clone(),
        outputs,
        temperatures.values.clone(),
    )?
    .with_labels(vec!["y1".into(), "y2".into()])
}

/// Covariance entry scored by the study; `Pooled` averages the other three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyStatistic {
    Var1,
    Var2,
    Cov12,
    Pooled,
}

impl StudyStatistic {
    pub const SCORED: [StudyStatistic; 3] = [
        StudyStatistic::Var1,
        StudyStatistic::Var2,
        StudyStatistic::Cov12,
    ];

    /// 0-based matrix entry, `None` for the pooled statistic.
    pub fn entry(self) -> Option<(usize, usize)> {
        match self {
            StudyStatistic::Var1 => Some((0, 0)),
            StudyStatistic::Var2 => Some((1, 1)),
            StudyStatistic::Cov12 => Some((0, 1)),
            StudyStatistic::Pooled => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StudyStatistic::Var1 => "var1",
            StudyStatistic::Var2 => "var2",
            StudyStatistic::Cov12 => "cov12",
            StudyStatistic::Pooled => "all",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoverageStudyConfig {
    pub scenario: ScenarioSpec,
    pub temperature: TemperatureModel,
    pub days: usize,
    pub samples_per_day: usize,
    pub estimator: EstimatorConfig,
    pub modes: Vec<BlockMode>,
    pub span: BlockSpan,
    pub replicates: usize,
    pub levels: Vec<f64>,
    pub datasets: usize,
    pub grid: EvaluationGrid,
    pub seed: u64,
}

/// Shared study grid: `count` points across the analytic temperature range
/// of the simulated days, pulled in by `margin` at both ends.
pub fn study_grid(
    model: &TemperatureModel,
    days: usize,
    count: usize,
    margin: f64,
) -> Result<EvaluationGrid> {
    let (lo, hi) = model.bounds(days);
    EvaluationGrid::linspace(lo + margin, hi - margin, count)
}

/// Coverage of one (mode, level, statistic) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub mode: BlockMode,
    pub level: f64,
    pub statistic: StudyStatistic,
    pub per_grid: Vec<f64>,
    pub average: f64,
    /// Datasets excluded for this mode because estimation failed.
    pub n_fail: usize,
}

impl CoverageCell {
    fn new(
        mode: BlockMode,
        level: f64,
        statistic: StudyStatistic,
        per_grid: Vec<f64>,
        n_fail: usize,
    ) -> Self {
        let average = per_grid.iter().sum::<f64>() / per_grid.len() as f64;
        Self {
            mode,
            level,
            statistic,
            per_grid,
            average,
            n_fail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFailure {
    pub dataset: usize,
    pub mode: BlockMode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub mean_method: String,
    pub bandwidth: f64,
    pub replicates: usize,
    pub datasets: usize,
    pub days: usize,
    pub samples_per_day: usize,
    pub seed: u64,
    pub grid: EvaluationGrid,
    pub cells: Vec<CoverageCell>,
    pub failures: Vec<DatasetFailure>,
}

impl CoverageReport {
    pub fn cell(
        &self,
        mode: BlockMode,
        level: f64,
        statistic: StudyStatistic,
    ) -> Option<&CoverageCell> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.level == level && c.statistic == statistic)
    }

    /// Flat table: one row per grid point plus an `average` row per cell,
    /// preceded by `#` header lines describing the run.
    pub fn to_delimited(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# scenario={}\n", self.scenario));
        out.push_str(&format!("# mean_method={}\n", self.mean_method));
        out.push_str(&format!("# bandwidth={}\n", self.bandwidth));
        out.push_str(&format!("# replicates={}\n", self.replicates));
        out.push_str(&format!("# datasets={}\n", self.datasets));
        out.push_str(&format!("# days={}\n", self.days));
        out.push_str(&format!("# samples_per_day={}\n", self.samples_per_day));
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str("scenario,mode,level,statistic,grid_z,coverage,n_fail\n");
        for cell in &self.cells {
            let prefix = format!(
                "{},{},{},{}",
                self.scenario,
                cell.mode.as_str(),
                cell.level,
                cell.statistic.as_str()
            );
            for (z, c) in self.grid.points().iter().zip(&cell.per_grid) {
                out.push_str(&format!("{prefix},{z},{c},{}\n", cell.n_fail));
            }
            out.push_str(&format!(
                "{prefix},average,{},{}\n",
                cell.average, cell.n_fail
            ));
        }
        out
    }
}

/// Hits per (level, statistic, grid point) for one dataset and mode.
type Hits = Vec<bool>;

fn score_dataset(config: &CoverageStudyConfig, r: usize) -> Vec<std::result::Result<Hits, String>> {
    let modes = config.modes.len();
    let fail_all = |e: Error| vec![Err(e.to_string()); modes];
    let mut rng = substream(derive_seed(config.seed, &[0]), r as u64);
    let series = match simulate_temperature(
        &config.temperature,
        config.days,
        config.samples_per_day,
        &mut rng,
    )
    .and_then(|temps| simulate_outputs(&config.scenario, &temps, &mut rng))
    {
        Ok(s) => s,
        Err(e) => return fail_all(e),
    };
    let estimator = match ConditionalEstimator::new(&series, &config.estimator, &config.grid) {
        Ok(e) => e,
        Err(e) => return fail_all(e),
    };
    let point = match estimator.estimate() {
        Ok(p) => p,
        Err(e) => return fail_all(e),
    };
    let g_len = config.grid.len();
    let truth: Vec<Vec<f64>> = StudyStatistic::SCORED
        .iter()
        .map(|s| {
            let (k, l) = s.entry().expect("scored entry");
            config
                .grid
                .points()
                .iter()
                .map(|&z| config.scenario.observed_covariance(z, k, l))
                .collect()
        })
        .collect();
    config
        .modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let plan = build_block_plan(&series, mode, config.span).map_err(|e| e.to_string())?;
            let seed = derive_seed(config.seed, &[1, r as u64, mi as u64]);
            let ensemble = bootstrap_ensemble(&estimator, &plan, config.replicates, seed)
                .map_err(|e| e.to_string())?;
            let mut hits = Vec::with_capacity(config.levels.len() * 3 * g_len);
            for &level in &config.levels {
                let bands = ensemble_bands(
                    &point,
                    &ensemble,
                    FieldKind::Covariance,
                    1.0 - level,
                    BandMethod::Normal,
                )
                .map_err(|e| e.to_string())?;
                for (si, stat) in StudyStatistic::SCORED.iter().enumerate() {
                    let (k, l) = stat.entry().expect("scored entry");
                    let band = bands
                        .iter()
                        .find(|b| b.statistic.k == k && b.statistic.l == l)
                        .expect("band for every upper-triangle entry");
                    for (pt, &t) in band.points.iter().zip(&truth[si]) {
                        hits.push(pt.is_some_and(|pt| pt.contains(t)));
                    }
                }
            }
            Ok(hits)
        })
        .collect()
}

/// Simulates `datasets` independent years, builds bootstrap bands for every
/// mode and level and scores them against the scenario's truth. Dataset `r`
/// uses its own random substream, so the report does not depend on the
/// number of workers.
pub fn run_coverage_study(config: &CoverageStudyConfig) -> Result<CoverageReport> {
    if config.datasets == 0 {
        return Err(Error::InvalidParameter {
            name: "datasets",
            reason: "need at least one dataset".into(),
        });
    }
    if config.modes.is_empty() || config.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::InvalidParameter {
            name: "levels",
            reason: "need at least one mode and levels in (0, 1)".into(),
        });
    }
    config.temperature.validate()?;
    let results: Vec<Vec<std::result::Result<Hits, String>>> = (0..config.datasets)
        .into_par_iter()
        .map(|r| score_dataset(config, r))
        .collect();

    let g_len = config.grid.len();
    let stats = StudyStatistic::SCORED.len();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut any_ok = false;
    for (mi, &mode) in config.modes.iter().enumerate() {
        let mut counts = vec![0usize; config.levels.len() * stats * g_len];
        let mut ok = 0usize;
        for (r, per_mode) in results.iter().enumerate() {
            match &per_mode[mi] {
                Ok(hits) => {
                    ok += 1;
                    for (c, &h) in counts.iter_mut().zip(hits) {
                        *c += h as usize;
                    }
                }
                Err(reason) => failures.push(DatasetFailure {
                    dataset: r,
                    mode,
                    reason: reason.clone(),
                }),
            }
        }
        any_ok |= ok > 0;
        let n_fail = config.datasets - ok;
        let rate = |hits: usize, trials: usize| {
            if trials > 0 {
                hits as f64 / trials as f64
            } else {
                f64::NAN
            }
        };
        for (li, &level) in config.levels.iter().enumerate() {
            let block = &counts[li * stats * g_len..(li + 1) * stats * g_len];
            for (si, &statistic) in StudyStatistic::SCORED.iter().enumerate() {
                let per_grid: Vec<f64> = block[si * g_len..(si + 1) * g_len]
                    .iter()
                    .map(|&c| rate(c, ok))
                    .collect();
                cells.push(CoverageCell::new(mode, level, statistic, per_grid, n_fail));
            }
            let pooled: Vec<f64> = (0..g_len)
                .map(|g| rate((0..stats).map(|si| block[si * g_len + g]).sum(), ok * stats))
                .collect();
            cells.push(CoverageCell::new(
                mode,
                level,
                StudyStatistic::Pooled,
                pooled,
                n_fail,
            ));
        }
    }
    if !any_ok {
        return Err(Error::AllDatasetsFailed);
    }
    failures.sort_by_key(|f| (f.dataset, f.mode.as_str()));
    Ok(CoverageReport {
        scenario: config.scenario.name().to_string(),
        mean_method: config.estimator.mean_method.as_str().to_string(),
        bandwidth: config.estimator.kernel.bandwidth(),
        replicates: config.replicates,
        datasets: config.datasets,
        days: config.days,
        samples_per_day: config.samples_per_day,
        seed: config.seed,
        grid: config.grid.clone(),
        cells,
        failures,
    })
}
