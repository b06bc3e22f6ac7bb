//! Shared data model: observation series, evaluation grids, matrix fields,
//! block plans and confidence bands.
//!
//! Everything here is immutable after construction. Storage is 0-based;
//! errors and exports report 1-based rows and channels.

use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cells that were missing in the raw input. Only ingestion-stage series
/// carry a mask; estimation requires a dense series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingMask {
    pub outputs: Array2<bool>,
    pub confounder: Vec<bool>,
}

impl MissingMask {
    pub fn any(&self) -> bool {
        self.outputs.iter().any(|&m| m) || self.confounder.iter().any(|&m| m)
    }
}

/// `n` timestamped observations of a `p`-dimensional output paired with a
/// scalar confounder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundedSeries {
    timestamps: Vec<i64>,
    outputs: Array2<f64>,
    confounder: Vec<f64>,
    labels: Vec<String>,
    missing: Option<MissingMask>,
}

impl ConfoundedSeries {
    /// Builds a dense series; every cell must be finite.
    pub fn new(timestamps: Vec<i64>, outputs: Array2<f64>, confounder: Vec<f64>) -> Result<Self> {
        let series = Self::assemble(timestamps, outputs, confounder, None)?;
        series.validate()?;
        Ok(series)
    }

    /// Builds an ingestion-stage series. Non-finite cells are allowed only
    /// where the mask is set.
    pub fn with_missing(
        timestamps: Vec<i64>,
        outputs: Array2<f64>,
        confounder: Vec<f64>,
        mask: MissingMask,
    ) -> Result<Self> {
        if mask.outputs.dim() != outputs.dim() || mask.confounder.len() != confounder.len() {
            return Err(Error::MismatchedLengths {
                what: "missing mask does not match the data".into(),
            });
        }
        let series = Self::assemble(timestamps, outputs, confounder, Some(mask))?;
        series.check_cells(true)?;
        Ok(series)
    }

    fn assemble(
        timestamps: Vec<i64>,
        outputs: Array2<f64>,
        confounder: Vec<f64>,
        missing: Option<MissingMask>,
    ) -> Result<Self> {
        let (n, p) = outputs.dim();
        if confounder.len() != n || timestamps.len() != n {
            return Err(Error::MismatchedLengths {
                what: format!(
                    "{n} output rows, {} confounder values, {} timestamps",
                    confounder.len(),
                    timestamps.len()
                ),
            });
        }
        if n == 0 || p == 0 {
            return Err(Error::EmptySeries);
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotoneTime { row: i + 2 });
        }
        let labels = (1..=p).map(|j| format!("x{j}")).collect();
        Ok(Self {
            timestamps,
            outputs,
            confounder,
            labels,
            missing,
        })
    }

    /// Replaces the output channel labels.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.p() {
            return Err(Error::MismatchedLengths {
                what: format!("{} labels for {} outputs", labels.len(), self.p()),
            });
        }
        self.labels = labels;
        Ok(self)
    }

    // Column index 1 is the confounder, outputs follow.
    fn check_cells(&self, allow_masked: bool) -> Result<()> {
        let masked_output = |i: usize, j: usize| {
            allow_masked && self.missing.as_ref().is_some_and(|m| m.outputs[[i, j]])
        };
        let masked_z =
            |i: usize| allow_masked && self.missing.as_ref().is_some_and(|m| m.confounder[i]);
        for (i, row) in self.outputs.rows().into_iter().enumerate() {
            if !self.confounder[i].is_finite() && !masked_z(i) {
                return Err(Error::NonFiniteValue {
                    row: i + 1,
                    column: 1,
                });
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() && !masked_output(i, j) {
                    return Err(Error::NonFiniteValue {
                        row: i + 1,
                        column: j + 2,
                    });
                }
            }
        }
        Ok(())
    }

    /// Full check for estimation use: structure plus dense finite cells.
    pub fn validate(&self) -> Result<()> {
        self.check_cells(false)
    }

    pub fn n(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn p(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn outputs(&self) -> ArrayView2<'_, f64> {
        self.outputs.view()
    }

    pub fn output_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.outputs.row(i)
    }

    pub fn confounder(&self) -> &[f64] {
        &self.confounder
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn missing(&self) -> Option<&MissingMask> {
        self.missing.as_ref()
    }

    /// Smallest and largest confounder value.
    pub fn confounder_range(&self) -> (f64, f64) {
        self.confounder
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| {
                (lo.min(z), hi.max(z))
            })
    }
}

/// Checks every invariant of a series, including density.
pub fn validate_series(series: &ConfoundedSeries) -> Result<&ConfoundedSeries> {
    series.validate()?;
    Ok(series)
}

/// Strictly increasing confounder values at which fields are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    points: Vec<f64>,
}

impl EvaluationGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        if let Some(z) = points.iter().find(|z| !z.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite grid point {z}")));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(
                "points must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// `count` equally spaced points from `min` to `max` inclusive.
    pub fn linspace(min: f64, max: f64, count: usize) -> Result<Self> {
        match count {
            0 => Err(Error::InvalidGrid("grid needs at least one point".into())),
            1 => Self::new(vec![min]),
            _ => {
                let step = (max - min) / (count - 1) as f64;
                let mut points: Vec<f64> = (0..count).map(|g| min + step * g as f64).collect();
                points[count - 1] = max;
                Self::new(points)
            }
        }
    }

    /// `count` equally spaced points across the observed confounder range.
    pub fn spanning(series: &ConfoundedSeries, count: usize) -> Result<Self> {
        let (lo, hi) = series.confounder_range();
        Self::linspace(lo, hi, count)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Covariance,
    Correlation,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Covariance => "covariance",
            FieldKind::Correlation => "correlation",
        }
    }
}

/// A correlation entry left undefined because a variance fell below the floor.
/// Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub grid_index: usize,
    pub channel: usize,
}

/// Symmetric `p x p` matrices on an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceField {
    grid: EvaluationGrid,
    values: Array3<f64>,
    bandwidth: f64,
    kind: FieldKind,
    gaps: Vec<Gap>,
}

impl CovarianceField {
    /// `values` has shape `(G, p, p)`. Gap entries must hold NaN.
    pub fn new(
        grid: EvaluationGrid,
        values: Array3<f64>,
        bandwidth: f64,
        kind: FieldKind,
        gaps: Vec<Gap>,
    ) -> Result<Self> {
        let (g, p, q) = values.dim();
        if g != grid.len() || p != q {
            return Err(Error::MismatchedLengths {
                what: format!(
                    "field of shape {:?} on a grid of {}",
                    values.dim(),
                    grid.len()
                ),
            });
        }
        Ok(Self {
            grid,
            values,
            bandwidth,
            kind,
            gaps,
        })
    }

    pub fn grid(&self) -> &EvaluationGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn matrix(&self, g: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(0), g)
    }

    pub fn entry(&self, g: usize, k: usize, l: usize) -> f64 {
        self.values[[g, k, l]]
    }

    /// Values of entry `(k, l)` across the grid.
    pub fn series(&self, k: usize, l: usize) -> Vec<f64> {
        (0..self.grid.len())
            .map(|g| self.values[[g, k, l]])
            .collect()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn gaps(&self) -> &[Gap] {
        &self.gaps
    }

    pub fn p(&self) -> usize {
        self.values.dim().1
    }

    /// Diagonal entries, shape `(G, p)`.
    pub fn variances(&self) -> Array2<f64> {
        let (g, p, _) = self.values.dim();
        Array2::from_shape_fn((g, p), |(i, k)| self.values[[i, k, k]])
    }

    /// Returns a description of the first violated invariant, if any.
    pub fn invariant_violation(&self) -> Option<String> {
        let p = self.p();
        for g in 0..self.grid.len() {
            let m = self.matrix(g);
            if m.iter().any(|v| v.is_nan()) && self.kind == FieldKind::Covariance {
                return Some(format!("NaN entry at grid index {g}"));
            }
            for k in 0..p {
                for l in 0..k {
                    let (a, b) = (m[[k, l]], m[[l, k]]);
                    if a.is_nan() && b.is_nan() {
                        continue;
                    }
                    if (a - b).abs() > 1e-12 {
                        return Some(format!("asymmetric at grid index {g} ({k}, {l})"));
                    }
                }
            }
            match self.kind {
                FieldKind::Covariance => {
                    let trace: f64 = (0..p).map(|k| m[[k, k]]).sum();
                    let min_eig = min_eigenvalue(m);
                    if min_eig < -1e-10 * trace.abs() {
                        return Some(format!("not PSD at grid index {g}: {min_eig}"));
                    }
                }
                FieldKind::Correlation => {
                    for k in 0..p {
                        if (m[[k, k]] - 1.0).abs() > 1e-12 {
                            return Some(format!("diagonal not unit at grid index {g}"));
                        }
                        for l in 0..p {
                            let r = m[[k, l]];
                            if !r.is_nan() && r.abs() > 1.0 + 1e-12 {
                                return Some(format!("|r| > 1 at grid index {g}"));
                            }
                        }
                    }
                }
            }
        }
        None
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: ArrayView2<'_, f64>) -> f64 {
    let p = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(p, p, |i, j| m[[i, j]]);
    dm.symmetric_eigenvalues().min()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMethod {
    NadarayaWatson,
    LocalLinear,
}

impl MeanMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MeanMethod::NadarayaWatson => "nadaraya-watson",
            MeanMethod::LocalLinear => "local-linear",
        }
    }
}

impl std::str::FromStr for MeanMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nadaraya-watson" | "nw" => Ok(MeanMethod::NadarayaWatson),
            "local-linear" | "ll" => Ok(MeanMethod::LocalLinear),
            _ => Err(Error::InvalidParameter {
                name: "mean-method",
                reason: format!("unknown method `{s}`"),
            }),
        }
    }
}

/// Fitted conditional means `m(z_i)`, aligned row-for-row with a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanField {
    pub fitted: Array2<f64>,
    pub method: MeanMethod,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockMode {
    Disjoint,
    Moving,
}

impl BlockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockMode::Disjoint => "disjoint",
            BlockMode::Moving => "moving",
        }
    }
}

impl std::str::FromStr for BlockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" | "block" => Ok(BlockMode::Disjoint),
            "moving" => Ok(BlockMode::Moving),
            _ => Err(Error::InvalidParameter {
                name: "mode",
                reason: format!("unknown block mode `{s}`"),
            }),
        }
    }
}

/// Row-index blocks used for resampling. Blocks are stored as 0-based
/// half-open ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub(crate) blocks: Vec<Range<usize>>,
    pub(crate) mode: BlockMode,
    pub(crate) span: usize,
    pub(crate) n: usize,
}

impl BlockPlan {
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Blocks as 1-based row indices.
    pub fn blocks_one_based(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| (b.start + 1..b.end + 1).collect())
            .collect()
    }

    pub fn mode(&self) -> BlockMode {
        self.mode
    }

    pub fn span(&self) -> usize {
        self.span
    }

    /// Number of rows of the series the plan was built on.
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn mean_block_len(&self) -> f64 {
        let total: usize = self.blocks.iter().map(|b| b.len()).sum();
        total as f64 / self.blocks.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandMethod {
    /// Estimate plus or minus a normal quantile times the bootstrap SD.
    Normal,
    /// Empirical quantiles of the replicate values.
    Percentile,
}

/// Which entry of which field a band refers to; `k`, `l` are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statistic {
    pub kind: FieldKind,
    pub k: usize,
    pub l: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub estimate: f64,
    pub boot_sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BandPoint {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Pointwise confidence band. `None` points are gaps (undefined estimate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub grid: EvaluationGrid,
    pub statistic: Statistic,
    pub points: Vec<Option<BandPoint>>,
    pub alpha: f64,
    pub replicates: usize,
    pub method: BandMethod,
}
