//! Kernel estimators of the conditional mean and the conditional covariance.
//!
//! The conditional covariance at a confounder value `z` is the kernel-weighted
//! average of residual outer products,
//!
//! ```text
//! S(z; h) = sum_i K_h(z_i - z) r_i r_i' / sum_i K_h(z_i - z),   r_i = x_i - m(z_i)
//! ```
//!
//! All estimators here are written against per-row multiplicities ("counts").
//! A plain estimate uses unit counts, a block-bootstrap replicate uses the
//! number of times each row was drawn, and a cross-validation fold uses zero
//! for held-out rows. Since every estimator is a ratio of weighted sums over
//! rows, this gives the same result as materialising the resampled series.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{
    ConfoundedSeries, CovarianceField, EvaluationGrid, FieldKind, Gap, MeanField, MeanMethod,
};
use crate::error::{Error, Result};

/// Raw kernel weight sums at or below `n * WEIGHT_FLOOR` are degenerate.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Variances at or below this fraction of the channel's largest variance
/// leave the correlation undefined.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Relative determinant threshold of the local-linear normal equations.
const SINGULAR_TOL: f64 = 1e-10;

/// Kernel matrices above this many entries are evaluated on the fly.
const DENSE_LIMIT: usize = 1 << 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
}

impl KernelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Epanechnikov => "epanechnikov",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            _ => Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("unknown kernel `{s}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidParameter {
                name: "bandwidth",
                reason: format!("must be positive and finite, got {bandwidth}"),
            });
        }
        Ok(Self { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Unnormalised kernel weight `K_h(u)`.
    #[inline]
    pub fn weight(&self, u: f64) -> f64 {
        let s = u / self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => (-0.5 * s * s).exp(),
            KernelFamily::Epanechnikov => (1.0 - s * s).max(0.0),
        }
    }
}

pub fn kernel_weight(spec: &KernelSpec, u: f64) -> f64 {
    spec.weight(u)
}

/// Where the conditional mean is evaluated before residuals are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanEvaluation {
    /// At every observed confounder value.
    Exact,
    /// On this many equally spaced nodes across the observed range, then
    /// linearly interpolated to each observation.
    Gridded(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kernel: KernelSpec,
    pub mean_kernel: KernelSpec,
    pub mean_method: MeanMethod,
    pub mean_evaluation: MeanEvaluation,
}

impl EstimatorConfig {
    /// Same kernel for mean and covariance, exact mean evaluation.
    pub fn new(kernel: KernelSpec, mean_method: MeanMethod) -> Self {
        Self {
            kernel,
            mean_kernel: kernel,
            mean_method,
            mean_evaluation: MeanEvaluation::Exact,
        }
    }

    pub fn with_mean_kernel(mut self, kernel: KernelSpec) -> Self {
        self.mean_kernel = kernel;
        self
    }

    pub fn with_mean_evaluation(mut self, evaluation: MeanEvaluation) -> Self {
        self.mean_evaluation = evaluation;
        self
    }
}

/// Sum with eight independent accumulators so the loop vectorises.
#[inline]
fn lane_sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = a.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Column-major copy of an `n x p` matrix.
fn columns(x: ndarray::ArrayView2<'_, f64>) -> Vec<f64> {
    x.t().iter().copied().collect()
}

/// Kernel weights between a fixed set of targets and the observed confounder
/// values, precomputed when asked and small enough.
struct KernelRows {
    targets: Vec<f64>,
    spec: KernelSpec,
    n: usize,
    dense: Option<Vec<f64>>,
}

impl KernelRows {
    fn new(targets: Vec<f64>, z: &[f64], spec: KernelSpec, precompute: bool) -> Self {
        let n = z.len();
        let dense = (precompute && targets.len() * n <= DENSE_LIMIT).then(|| {
            let mut k = Vec::with_capacity(targets.len() * n);
            for &t in &targets {
                k.extend(z.iter().map(|&zj| spec.weight(zj - t)));
            }
            k
        });
        Self {
            targets,
            spec,
            n,
            dense,
        }
    }

    /// Writes `count_j * K(z_j - target_t)` for every row into `out`.
    #[inline]
    fn fill(&self, t: usize, data: &Weighted<'_>, out: &mut [f64]) {
        match &self.dense {
            Some(k) => {
                let row = &k[t * self.n..(t + 1) * self.n];
                for (o, (&kj, &c)) in out.iter_mut().zip(row.iter().zip(data.counts)) {
                    *o = c * kj;
                }
            }
            None => {
                let target = self.targets[t];
                for (o, (&zj, &c)) in out.iter_mut().zip(data.z.iter().zip(data.counts)) {
                    *o = if c == 0.0 {
                        0.0
                    } else {
                        c * self.spec.weight(zj - target)
                    };
                }
            }
        }
    }
}

/// Observations under row multiplicities. `cols` holds the channels one
/// after another, each of length `n`.
struct Weighted<'a> {
    z: &'a [f64],
    cols: &'a [f64],
    counts: &'a [f64],
    total: f64,
}

impl<'a> Weighted<'a> {
    fn new(z: &'a [f64], cols: &'a [f64], counts: &'a [f64]) -> Self {
        Self {
            z,
            cols,
            counts,
            total: lane_sum(counts),
        }
    }

    fn n(&self) -> usize {
        self.z.len()
    }

    fn col(&self, c: usize) -> &[f64] {
        let n = self.n();
        &self.cols[c * n..(c + 1) * n]
    }

    fn floor(&self) -> f64 {
        self.total * WEIGHT_FLOOR
    }
}

/// Work buffers for local fits: per-row weights and per-channel lane
/// accumulators.
struct Scratch {
    w: Vec<f64>,
    d: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            w: vec![0.0; n],
            d: Vec::new(),
        }
    }
}

enum LocalFit {
    Fitted,
    Degenerate,
    Singular,
}

const LANES: usize = 8;

fn lane_total(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Local mean at target `t` of `rows`, written to `out`. The weighted sums
/// are accumulated in one sweep over the rows.
fn fit_local(
    method: MeanMethod,
    rows: &KernelRows,
    t: usize,
    data: &Weighted<'_>,
    s: &mut Scratch,
    out: &mut [f64],
) -> LocalFit {
    rows.fill(t, data, &mut s.w);
    let target = rows.targets[t];
    let n = data.n();
    let p = out.len();
    let linear = method == MeanMethod::LocalLinear;
    let mut s0 = [0.0; LANES];
    let mut s1 = [0.0; LANES];
    let mut s2 = [0.0; LANES];
    s.d.clear();
    s.d.resize(2 * p * LANES, 0.0);
    let (t0, t1) = s.d.split_at_mut(p * LANES);
    let body = n - n % LANES;
    for base in (0..body).step_by(LANES) {
        let w: &[f64; LANES] = s.w[base..base + LANES].try_into().unwrap();
        let mut wd = [0.0; LANES];
        for k in 0..LANES {
            s0[k] += w[k];
        }
        if linear {
            let z = &data.z[base..base + LANES];
            for k in 0..LANES {
                let d = z[k] - target;
                wd[k] = w[k] * d;
                s1[k] += wd[k];
                s2[k] += wd[k] * d;
            }
        }
        for c in 0..p {
            let x = &data.cols[c * n + base..c * n + base + LANES];
            let a0 = &mut t0[c * LANES..(c + 1) * LANES];
            for k in 0..LANES {
                a0[k] += w[k] * x[k];
            }
            if linear {
                let a1 = &mut t1[c * LANES..(c + 1) * LANES];
                for k in 0..LANES {
                    a1[k] += wd[k] * x[k];
                }
            }
        }
    }
    for j in body..n {
        let k = j - body;
        let w = s.w[j];
        let d = data.z[j] - target;
        s0[k] += w;
        s1[k] += w * d;
        s2[k] += w * d * d;
        for c in 0..p {
            t0[c * LANES + k] += w * data.cols[c * n + j];
            t1[c * LANES + k] += w * d * data.cols[c * n + j];
        }
    }
    let lane = |a: &[f64]| lane_total(a.try_into().unwrap());
    let s0 = lane_total(&s0);
    if s0 <= data.floor() {
        return LocalFit::Degenerate;
    }
    if !linear {
        for (c, o) in out.iter_mut().enumerate() {
            *o = lane(&t0[c * LANES..(c + 1) * LANES]) / s0;
        }
        return LocalFit::Fitted;
    }
    let (s1, s2) = (lane_total(&s1), lane_total(&s2));
    let det = s0 * s2 - s1 * s1;
    if !(det > SINGULAR_TOL * s0 * s2) {
        return LocalFit::Singular;
    }
    for (c, o) in out.iter_mut().enumerate() {
        let a = lane(&t0[c * LANES..(c + 1) * LANES]);
        let b = lane(&t1[c * LANES..(c + 1) * LANES]);
        *o = (s2 * a - s1 * b) / det;
    }
    LocalFit::Fitted
}

fn fit_error(fit: LocalFit, z: f64) -> Option<Error> {
    match fit {
        LocalFit::Fitted => None,
        LocalFit::Degenerate => Some(Error::DegenerateWeights { z }),
        LocalFit::Singular => Some(Error::SingularLocalFit { z }),
    }
}

/// Upper-triangle residual outer products as `p (p + 1) / 2` columns. Rows
/// with zero multiplicity are left at zero.
fn outer_columns(residuals: &[f64], p: usize, counts: &[f64]) -> Vec<f64> {
    let n = counts.len();
    let mut out = vec![0.0; p * (p + 1) / 2 * n];
    let mut e = 0;
    for k in 0..p {
        for l in k..p {
            let (rk, rl) = (
                &residuals[k * n..(k + 1) * n],
                &residuals[l * n..(l + 1) * n],
            );
            let dst = &mut out[e * n..(e + 1) * n];
            for j in 0..n {
                if counts[j] != 0.0 {
                    dst[j] = rk[j] * rl[j];
                }
            }
            e += 1;
        }
    }
    out
}

/// Kernel-weighted averages of outer-product columns at each target,
/// written as full symmetric matrices.
fn weighted_outer_average(
    rows: &KernelRows,
    outer: &Weighted<'_>,
    p: usize,
) -> Result<Array3<f64>> {
    let g_len = rows.targets.len();
    let mut values = Array3::zeros((g_len, p, p));
    let mut w = vec![0.0; outer.n()];
    let floor = outer.floor();
    for g in 0..g_len {
        rows.fill(g, outer, &mut w);
        let total = lane_sum(&w);
        if total <= floor {
            return Err(Error::DegenerateWeights { z: rows.targets[g] });
        }
        let mut e = 0;
        for k in 0..p {
            for l in k..p {
                let v = lane_dot(&w, outer.col(e)) / total;
                values[[g, k, l]] = v;
                values[[g, l, k]] = v;
                e += 1;
            }
        }
    }
    Ok(values)
}

enum MeanTargets {
    Exact(KernelRows),
    Gridded {
        rows: KernelRows,
        /// Per observation: lower node index and interpolation fraction.
        interp: Vec<(usize, f64)>,
    },
}

/// Conditional mean and covariance estimator bound to one series and grid,
/// evaluated under arbitrary row multiplicities.
pub struct ConditionalEstimator {
    z: Vec<f64>,
    /// Outputs, column-major.
    x: Vec<f64>,
    p: usize,
    config: EstimatorConfig,
    grid: EvaluationGrid,
    mean: MeanTargets,
    cov_rows: KernelRows,
}

impl ConditionalEstimator {
    pub fn new(
        series: &ConfoundedSeries,
        config: &EstimatorConfig,
        grid: &EvaluationGrid,
    ) -> Result<Self> {
        series.validate()?;
        let z = series.confounder().to_vec();
        let x = columns(series.outputs());
        let (lo, hi) = series.confounder_range();
        let mean = match config.mean_evaluation {
            MeanEvaluation::Gridded(nodes) if nodes >= 2 && hi > lo => {
                let step = (hi - lo) / (nodes - 1) as f64;
                let targets: Vec<f64> = (0..nodes).map(|i| lo + step * i as f64).collect();
                let interp = z
                    .iter()
                    .map(|&zj| {
                        let s = (zj - lo) / step;
                        let i0 = (s.floor() as usize).min(nodes - 2);
                        (i0, (s - i0 as f64).clamp(0.0, 1.0))
                    })
                    .collect();
                MeanTargets::Gridded {
                    rows: KernelRows::new(targets, &z, config.mean_kernel, true),
                    interp,
                }
            }
            MeanEvaluation::Gridded(nodes) if nodes < 2 => {
                return Err(Error::InvalidParameter {
                    name: "mean-grid",
                    reason: format!("needs at least 2 nodes, got {nodes}"),
                })
            }
            _ => MeanTargets::Exact(KernelRows::new(z.clone(), &z, config.mean_kernel, true)),
        };
        let cov_rows = KernelRows::new(grid.points().to_vec(), &z, config.kernel, true);
        Ok(Self {
            z,
            x,
            p: series.p(),
            config: *config,
            grid: grid.clone(),
            mean,
            cov_rows,
        })
    }

    pub fn grid(&self) -> &EvaluationGrid {
        &self.grid
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }

    /// Residual columns for the rows with positive multiplicity; other rows
    /// are left at zero.
    fn residuals(&self, data: &Weighted<'_>) -> Result<Vec<f64>> {
        let (n, p) = (self.z.len(), self.p);
        let mut resid = vec![0.0; n * p];
        let mut scratch = Scratch::new(n);
        let mut m = vec![0.0; p];
        let method = self.config.mean_method;
        match &self.mean {
            MeanTargets::Exact(rows) => {
                for j in 0..n {
                    if data.counts[j] == 0.0 {
                        continue;
                    }
                    if let Some(e) = fit_error(
                        fit_local(method, rows, j, data, &mut scratch, &mut m),
                        self.z[j],
                    ) {
                        return Err(e);
                    }
                    for c in 0..p {
                        resid[c * n + j] = self.x[c * n + j] - m[c];
                    }
                }
            }
            MeanTargets::Gridded { rows, interp } => {
                let nodes = rows.targets.len();
                let mut node_means = vec![0.0; nodes * p];
                let mut node_err: Vec<Option<Error>> = Vec::with_capacity(nodes);
                for t in 0..nodes {
                    let fit = fit_local(
                        method,
                        rows,
                        t,
                        data,
                        &mut scratch,
                        &mut node_means[t * p..(t + 1) * p],
                    );
                    node_err.push(fit_error(fit, rows.targets[t]));
                }
                for j in 0..n {
                    if data.counts[j] == 0.0 {
                        continue;
                    }
                    let (i0, f) = interp[j];
                    for (node, weight) in [(i0, 1.0 - f), (i0 + 1, f)] {
                        if weight > 0.0 {
                            if let Some(e) = &node_err[node] {
                                return Err(e.clone());
                            }
                        }
                    }
                    for c in 0..p {
                        let lo = node_means[i0 * p + c];
                        let hi = node_means[(i0 + 1) * p + c];
                        let fitted = if f == 0.0 {
                            lo
                        } else if f == 1.0 {
                            hi
                        } else {
                            lo + f * (hi - lo)
                        };
                        resid[c * n + j] = self.x[c * n + j] - fitted;
                    }
                }
            }
        }
        Ok(resid)
    }

    /// Conditional covariance field under the given row multiplicities.
    /// The mean is re-fitted under the same multiplicities.
    pub fn estimate_weighted(&self, counts: &[f64]) -> Result<CovarianceField> {
        if counts.len() != self.z.len() {
            return Err(Error::MismatchedLengths {
                what: format!("{} counts for {} rows", counts.len(), self.z.len()),
            });
        }
        let data = Weighted::new(&self.z, &self.x, counts);
        if !(data.total > 0.0) {
            return Err(Error::EmptySeries);
        }
        let resid = self.residuals(&data)?;
        let outer = outer_columns(&resid, self.p, counts);
        let values = weighted_outer_average(
            &self.cov_rows,
            &Weighted::new(&self.z, &outer, counts),
            self.p,
        )?;
        CovarianceField::new(
            self.grid.clone(),
            values,
            self.config.kernel.bandwidth(),
            FieldKind::Covariance,
            Vec::new(),
        )
    }

    /// Point estimate on the original series (unit multiplicities).
    pub fn estimate(&self) -> Result<CovarianceField> {
        self.estimate_weighted(&vec![1.0; self.z.len()])
    }
}

/// Conditional mean at every observed confounder value.
pub fn estimate_mean(
    series: &ConfoundedSeries,
    spec: &KernelSpec,
    method: MeanMethod,
) -> Result<MeanField> {
    series.validate()?;
    let (n, p) = (series.n(), series.p());
    let z = series.confounder();
    let x = columns(series.outputs());
    let ones = vec![1.0; n];
    let data = Weighted::new(z, &x, &ones);
    let rows = KernelRows::new(z.to_vec(), z, *spec, false);
    let mut fitted = Array2::zeros((n, p));
    let mut scratch = Scratch::new(n);
    let mut out = vec![0.0; p];
    for (i, &zi) in z.iter().enumerate() {
        if let Some(e) = fit_error(
            fit_local(method, &rows, i, &data, &mut scratch, &mut out),
            zi,
        ) {
            return Err(e);
        }
        fitted
            .row_mut(i)
            .iter_mut()
            .zip(&out)
            .for_each(|(f, &v)| *f = v);
    }
    Ok(MeanField {
        fitted,
        method,
        bandwidth: spec.bandwidth(),
    })
}

/// Conditional covariance on `grid` from residuals against a fitted mean.
pub fn estimate_conditional_covariance(
    series: &ConfoundedSeries,
    mean: &MeanField,
    spec: &KernelSpec,
    grid: &EvaluationGrid,
) -> Result<CovarianceField> {
    series.validate()?;
    let (n, p) = (series.n(), series.p());
    if mean.fitted.dim() != (n, p) {
        return Err(Error::MismatchedLengths {
            what: format!("mean field {:?} for a {n}x{p} series", mean.fitted.dim()),
        });
    }
    let z = series.confounder();
    let residuals: Vec<f64> = columns(series.outputs())
        .iter()
        .zip(columns(mean.fitted.view()))
        .map(|(x, m)| x - m)
        .collect();
    let ones = vec![1.0; n];
    let outer = outer_columns(&residuals, p, &ones);
    let rows = KernelRows::new(grid.points().to_vec(), z, *spec, false);
    let values = weighted_outer_average(&rows, &Weighted::new(z, &outer, &ones), p)?;
    CovarianceField::new(
        grid.clone(),
        values,
        spec.bandwidth(),
        FieldKind::Covariance,
        Vec::new(),
    )
}

fn variance_floors(field: &CovarianceField) -> Vec<f64> {
    let p = field.p();
    (0..p)
        .map(|k| {
            let max = (0..field.grid().len())
                .map(|g| field.entry(g, k, k))
                .fold(0.0_f64, f64::max);
            VARIANCE_FLOOR * max
        })
        .collect()
}

/// Correlation field in which entries with a variance at or below the floor
/// are NaN and recorded as gaps.
pub fn correlation_with_gaps(field: &CovarianceField) -> Result<CovarianceField> {
    if field.kind() != FieldKind::Covariance {
        return Err(Error::InvalidParameter {
            name: "field",
            reason: "expected a covariance field".into(),
        });
    }
    let p = field.p();
    let floors = variance_floors(field);
    let g_len = field.grid().len();
    let mut values = Array3::zeros((g_len, p, p));
    let mut gaps = Vec::new();
    for g in 0..g_len {
        let sd: Vec<Option<f64>> = (0..p)
            .map(|k| {
                let v = field.entry(g, k, k);
                (v > floors[k]).then(|| v.sqrt())
            })
            .collect();
        for (k, s) in sd.iter().enumerate() {
            if s.is_none() {
                gaps.push(Gap {
                    grid_index: g,
                    channel: k,
                });
            }
        }
        for k in 0..p {
            values[[g, k, k]] = 1.0;
            for l in k + 1..p {
                let r = match (sd[k], sd[l]) {
                    (Some(a), Some(b)) => field.entry(g, k, l) / (a * b),
                    _ => f64::NAN,
                };
                values[[g, k, l]] = r;
                values[[g, l, k]] = r;
            }
        }
    }
    CovarianceField::new(
        field.grid().clone(),
        values,
        field.bandwidth(),
        FieldKind::Correlation,
        gaps,
    )
}

/// Correlation field; fails at the first variance below the floor.
pub fn covariance_to_correlation(field: &CovarianceField) -> Result<CovarianceField> {
    let corr = correlation_with_gaps(field)?;
    if let Some(gap) = corr.gaps().first() {
        return Err(Error::VarianceFloorHit {
            z: field.grid().points()[gap.grid_index],
            channel: gap.channel + 1,
        });
    }
    Ok(corr)
}

/// Inverse of the correlation conversion given the variances, shape `(G, p)`.
pub fn correlation_to_covariance(
    corr: &CovarianceField,
    variances: &Array2<f64>,
) -> Result<CovarianceField> {
    let (g_len, p) = (corr.grid().len(), corr.p());
    if variances.dim() != (g_len, p) {
        return Err(Error::MismatchedLengths {
            what: format!(
                "variances {:?} for a {g_len}-point, {p}-channel field",
                variances.dim()
            ),
        });
    }
    let values = Array3::from_shape_fn((g_len, p, p), |(g, k, l)| {
        if k == l {
            variances[[g, k]]
        } else {
            corr.entry(g, k, l) * (variances[[g, k]] * variances[[g, l]]).sqrt()
        }
    });
    CovarianceField::new(
        corr.grid().clone(),
        values,
        corr.bandwidth(),
        FieldKind::Covariance,
        Vec::new(),
    )
}

/// Outcome of cross-validated bandwidth selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub bandwidth: f64,
    /// Per candidate, in input order; `None` marks a degenerate candidate.
    pub scores: Vec<(f64, Option<f64>)>,
}

/// K-fold cross-validation score of one bandwidth: the summed squared
/// Frobenius distance between held-out residual outer products and the
/// covariance predicted from the remaining folds.
pub fn cv_score(
    series: &ConfoundedSeries,
    spec: &KernelSpec,
    mean_method: MeanMethod,
    folds: usize,
) -> Result<f64> {
    let (n, p) = (series.n(), series.p());
    if folds < 2 || folds > n {
        return Err(Error::InvalidParameter {
            name: "folds",
            reason: format!("must lie in [2, {n}], got {folds}"),
        });
    }
    let z = series.confounder();
    let x = columns(series.outputs());
    let fold_of = |i: usize| i * folds / n;
    let mean_rows = KernelRows::new(z.to_vec(), z, *spec, false);
    let mut scratch = Scratch::new(n);
    let mut m = vec![0.0; p];
    let mut score = 0.0;
    for f in 0..folds {
        let counts: Vec<f64> = (0..n)
            .map(|i| if fold_of(i) == f { 0.0 } else { 1.0 })
            .collect();
        let held: Vec<usize> = (0..n).filter(|&i| fold_of(i) == f).collect();
        let train = Weighted::new(z, &x, &counts);
        // residuals of every row against the training-fold mean
        let mut resid = vec![0.0; n * p];
        for j in 0..n {
            if let Some(e) = fit_error(
                fit_local(mean_method, &mean_rows, j, &train, &mut scratch, &mut m),
                z[j],
            ) {
                return Err(e);
            }
            for c in 0..p {
                resid[c * n + j] = x[c * n + j] - m[c];
            }
        }
        let outer = outer_columns(&resid, p, &counts);
        let held_z: Vec<f64> = held.iter().map(|&i| z[i]).collect();
        let cov_rows = KernelRows::new(held_z, z, *spec, false);
        let predicted = weighted_outer_average(&cov_rows, &Weighted::new(z, &outer, &counts), p)?;
        for (h, &i) in held.iter().enumerate() {
            for k in 0..p {
                let rk = resid[k * n + i];
                for l in 0..p {
                    let d = rk * resid[l * n + i] - predicted[[h, k, l]];
                    score += d * d;
                }
            }
        }
    }
    Ok(score)
}

/// Picks the candidate bandwidth with the lowest cross-validation score.
/// Ties (within 1e-12 relative) go to the larger bandwidth.
pub fn select_bandwidth_cv(
    series: &ConfoundedSeries,
    candidates: &[f64],
    family: KernelFamily,
    mean_method: MeanMethod,
    folds: usize,
) -> Result<BandwidthSelection> {
    series.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidParameter {
            name: "candidates",
            reason: "no bandwidth candidates".into(),
        });
    }
    let specs = candidates
        .iter()
        .map(|&h| KernelSpec::new(family, h))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(specs.len());
    for spec in &specs {
        let score = match cv_score(series, spec, mean_method, folds) {
            Ok(s) => Some(s),
            Err(e) if e.is_estimation_failure() => None,
            Err(e) => return Err(e),
        };
        scores.push((spec.bandwidth(), score));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0));
    let mut best: Option<(f64, f64)> = None;
    for i in order {
        if let (h, Some(s)) = scores[i] {
            match best {
                Some((_, b)) if !(s < b * (1.0 - 1e-12)) => {}
                _ => best = Some((h, s)),
            }
        }
    }
    let (bandwidth, _) = best.ok_or(Error::AllCandidatesDegenerate)?;
    Ok(BandwidthSelection { bandwidth, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn series(z: Vec<f64>, x: Array2<f64>) -> ConfoundedSeries {
        let n = z.len();
        ConfoundedSeries::new((0..n as i64).collect(), x, z).unwrap()
    }

    #[test]
    fn kernel_values() {
        let g = KernelSpec::gaussian(1.5).unwrap();
        assert_eq!(kernel_weight(&g, 0.0), 1.0);
        let e = KernelSpec::new(KernelFamily::Epanechnikov, 2.0).unwrap();
        assert_eq!(kernel_weight(&e, 3.0), 0.0);
        let g1 = KernelSpec::gaussian(1.0).unwrap();
        assert!((kernel_weight(&g1, 1.0) - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::gaussian(f64::INFINITY).is_err());
    }

    #[test]
    fn identical_confounders_give_sample_mean() {
        let s = series(
            vec![2.0; 4],
            array![[1.0, 0.0], [2.0, 4.0], [3.0, 2.0], [6.0, 2.0]],
        );
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let m = estimate_mean(&s, &spec, MeanMethod::NadarayaWatson).unwrap();
        for row in m.fitted.rows() {
            assert!((row[0] - 3.0).abs() < 1e-14 && (row[1] - 2.0).abs() < 1e-14);
        }
        // the local-linear design has no spread in z
        assert!(matches!(
            estimate_mean(&s, &spec, MeanMethod::LocalLinear),
            Err(Error::SingularLocalFit { .. })
        ));
    }

    #[test]
    fn constant_outputs_give_constant_mean() {
        let s = series(
            vec![0.0, 1.0, 2.5, 3.0, 7.0],
            Array2::from_elem((5, 2), 4.25),
        );
        let spec = KernelSpec::gaussian(1.0).unwrap();
        for method in [MeanMethod::NadarayaWatson, MeanMethod::LocalLinear] {
            let m = estimate_mean(&s, &spec, method).unwrap();
            assert!(m.fitted.iter().all(|&v| (v - 4.25).abs() < 1e-12));
        }
    }

    #[test]
    fn local_linear_reproduces_lines() {
        let z = vec![-1.0, 0.3, 0.9, 2.2, 4.0];
        let x = Array2::from_shape_fn((5, 1), |(i, _)| 2.0 * z[i]);
        let s = series(z.clone(), x);
        for h in [0.5, 1.5, 10.0, 1e4] {
            let m = estimate_mean(
                &s,
                &KernelSpec::gaussian(h).unwrap(),
                MeanMethod::LocalLinear,
            )
            .unwrap();
            for (i, zi) in z.iter().enumerate() {
                assert!((m.fitted[[i, 0]] - 2.0 * zi).abs() < 1e-8, "h={h}");
            }
        }
    }

    #[test]
    fn degenerate_weights_reported() {
        let s = series(vec![0.0, 1.0, 2.0], array![[1.0], [2.0], [3.0]]);
        let spec = KernelSpec::new(KernelFamily::Epanechnikov, 0.5).unwrap();
        let m = estimate_mean(&s, &spec, MeanMethod::NadarayaWatson).unwrap();
        let grid = EvaluationGrid::new(vec![0.0, 10.0]).unwrap();
        let err = estimate_conditional_covariance(&s, &m, &spec, &grid).unwrap_err();
        assert_eq!(err, Error::DegenerateWeights { z: 10.0 });
    }

    #[test]
    fn zero_residuals_give_zero_field() {
        let s = series(
            vec![0.0, 1.0, 2.0],
            array![[1.0, 5.0], [2.0, 6.0], [3.0, 7.0]],
        );
        let mean = MeanField {
            fitted: s.outputs().to_owned(),
            method: MeanMethod::NadarayaWatson,
            bandwidth: 1.0,
        };
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let grid = EvaluationGrid::linspace(0.0, 2.0, 4).unwrap();
        let f = estimate_conditional_covariance(&s, &mean, &spec, &grid).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_weights_give_biased_sample_covariance() {
        let x = array![[1.0, 2.0], [2.0, 1.0], [4.0, 5.0], [5.0, 4.0]];
        let s = series(vec![3.0; 4], x.clone());
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let m = estimate_mean(&s, &spec, MeanMethod::NadarayaWatson).unwrap();
        let grid = EvaluationGrid::new(vec![3.0]).unwrap();
        let f = estimate_conditional_covariance(&s, &m, &spec, &grid).unwrap();
        // means 3, 3; deviations (-2,-1),(-1,-2),(1,2),(2,1)
        assert!((f.entry(0, 0, 0) - 2.5).abs() < 1e-14);
        assert!((f.entry(0, 1, 1) - 2.5).abs() < 1e-14);
        assert!((f.entry(0, 0, 1) - 2.0).abs() < 1e-14);
    }

    fn field_of(matrices: Vec<Array2<f64>>) -> CovarianceField {
        let g = matrices.len();
        let p = matrices[0].nrows();
        let values = Array3::from_shape_fn((g, p, p), |(i, k, l)| matrices[i][[k, l]]);
        let grid = EvaluationGrid::linspace(0.0, 1.0, g).unwrap();
        CovarianceField::new(grid, values, 1.0, FieldKind::Covariance, vec![]).unwrap()
    }

    #[test]
    fn correlation_conversion() {
        let f = field_of(vec![
            array![[4.0, 2.0], [2.0, 4.0]],
            array![[3.0, 0.0], [0.0, 2.0]],
        ]);
        let r = covariance_to_correlation(&f).unwrap();
        assert_eq!(r.entry(0, 0, 1), 0.5);
        assert_eq!(r.entry(1, 0, 1), 0.0);
        assert_eq!(r.entry(1, 0, 0), 1.0);
        assert!(r.invariant_violation().is_none());
    }

    #[test]
    fn variance_floor_hit() {
        let f = field_of(vec![
            array![[4.0, 0.0], [0.0, 1.0]],
            array![[0.0, 0.0], [0.0, 1.0]],
        ]);
        let err = covariance_to_correlation(&f).unwrap_err();
        assert_eq!(err, Error::VarianceFloorHit { z: 1.0, channel: 1 });
        let r = correlation_with_gaps(&f).unwrap();
        assert_eq!(
            r.gaps(),
            &[Gap {
                grid_index: 1,
                channel: 0
            }]
        );
        assert!(r.entry(1, 0, 1).is_nan());
        assert_eq!(r.entry(0, 0, 1), 0.0);
    }

    #[test]
    fn correlation_round_trip() {
        let f = field_of(vec![
            array![[4.0, 1.3], [1.3, 0.7]],
            array![[0.02, -0.011], [-0.011, 0.017]],
        ]);
        let r = covariance_to_correlation(&f).unwrap();
        let back = correlation_to_covariance(&r, &f.variances()).unwrap();
        for g in 0..2 {
            let (a, b) = (f.entry(g, 0, 1), back.entry(g, 0, 1));
            assert!((a - b).abs() <= 1e-10 * a.abs());
        }
    }

    #[test]
    fn cv_single_candidate_and_ties() {
        let z: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let x = Array2::from_shape_fn((20, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let s = series(z.clone(), x);
        let sel = select_bandwidth_cv(
            &s,
            &[1.5],
            KernelFamily::Gaussian,
            MeanMethod::NadarayaWatson,
            4,
        )
        .unwrap();
        assert_eq!(sel.bandwidth, 1.5);
        assert!(sel.scores[0].1.unwrap() > 0.0);

        // constant outputs: every score is exactly zero
        let flat = series(z, Array2::from_elem((20, 2), 1.0));
        let sel = select_bandwidth_cv(
            &flat,
            &[0.8, 3.0, 1.2],
            KernelFamily::Gaussian,
            MeanMethod::NadarayaWatson,
            4,
        )
        .unwrap();
        assert_eq!(sel.bandwidth, 3.0);
    }

    #[test]
    fn cv_all_degenerate() {
        let z: Vec<f64> = (0..8).map(|i| i as f64 * 10.0).collect();
        let s = series(z, Array2::from_shape_fn((8, 1), |(i, _)| i as f64));
        let err = select_bandwidth_cv(
            &s,
            &[0.5],
            KernelFamily::Epanechnikov,
            MeanMethod::NadarayaWatson,
            4,
        )
        .unwrap_err();
        assert_eq!(err, Error::AllCandidatesDegenerate);
    }

    #[test]
    fn gridded_mean_close_to_exact() {
        let n = 400;
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            z[i] * 0.1 + (j as f64) + ((i * 31 + j * 17) % 13) as f64 / 13.0
        });
        let times: Vec<i64> = (0..n as i64).collect();
        let s = ConfoundedSeries::new(times, x, z).unwrap();
        let grid = EvaluationGrid::spanning(&s, 20).unwrap();
        let base =
            EstimatorConfig::new(KernelSpec::gaussian(1.5).unwrap(), MeanMethod::LocalLinear);
        let exact = ConditionalEstimator::new(&s, &base, &grid)
            .unwrap()
            .estimate()
            .unwrap();
        let gridded = ConditionalEstimator::new(
            &s,
            &base.with_mean_evaluation(MeanEvaluation::Gridded(256)),
            &grid,
        )
        .unwrap()
        .estimate()
        .unwrap();
        for (a, b) in exact.values().iter().zip(gridded.values()) {
            assert!((a - b).abs() < 1e-4 * exact.entry(0, 0, 0), "{a} {b}");
        }
    }
}
