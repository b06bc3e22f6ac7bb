//! CSV ingestion, gap filling and result exports.

use std::fs;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    BandMethod, BlockMode, ConfidenceBand, ConfoundedSeries, CovarianceField, FieldKind,
    MissingMask,
};
use crate::error::{Error, Result};

/// Which CSV columns hold time, the confounder and the outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub time_column: String,
    pub confounder_column: String,
    pub output_columns: Vec<String>,
}

impl ColumnMap {
    pub fn new(
        time_column: impl Into<String>,
        confounder_column: impl Into<String>,
        output_columns: Vec<String>,
    ) -> Result<Self> {
        let map = Self {
            time_column: time_column.into(),
            confounder_column: confounder_column.into(),
            output_columns,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_columns.is_empty() {
            return Err(Error::InvalidParameter {
                name: "output_columns",
                reason: "need at least one output column".into(),
            });
        }
        let mut names: Vec<&str> = self.all().collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter {
                name: "columns",
                reason: format!("column `{}` mapped twice", w[0]),
            });
        }
        Ok(())
    }

    fn all(&self) -> impl Iterator<Item = &str> {
        [self.time_column.as_str(), self.confounder_column.as_str()]
            .into_iter()
            .chain(self.output_columns.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFormat {
    /// RFC 3339 / ISO-8601 date-times; values without an offset are UTC.
    Iso8601,
    /// Integer seconds since 1970-01-01T00:00:00Z.
    Epoch,
}

impl std::str::FromStr for TimeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iso8601" | "iso" => Ok(TimeFormat::Iso8601),
            "epoch" => Ok(TimeFormat::Epoch),
            _ => Err(Error::InvalidParameter {
                name: "time-format",
                reason: format!("unknown time format `{s}`"),
            }),
        }
    }
}

/// Parses one timestamp cell to epoch seconds.
pub fn parse_time(cell: &str, format: TimeFormat) -> Option<i64> {
    let cell = cell.trim();
    match format {
        TimeFormat::Epoch => cell.parse::<i64>().ok().or_else(|| {
            let v = cell.parse::<f64>().ok()?;
            (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
        }),
        TimeFormat::Iso8601 => {
            if let Ok(t) = DateTime::parse_from_rfc3339(cell) {
                return Some(t.timestamp());
            }
            for f in [
                "%Y-%m-%dT%H:%M:%S%.f",
                "%Y-%m-%d %H:%M:%S%.f",
                "%Y-%m-%dT%H:%M",
                "%Y-%m-%d %H:%M",
            ] {
                if let Ok(t) = NaiveDateTime::parse_from_str(cell, f) {
                    return Some(t.and_utc().timestamp());
                }
            }
            NaiveDate::parse_from_str(cell, "%Y-%m-%d").ok().map(|d| {
                d.and_hms_opt(0, 0, 0)
                    .expect("midnight")
                    .and_utc()
                    .timestamp()
            })
        }
    }
}

fn parse_value(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a sensor table. Empty or non-numeric value cells become missing
/// (NaN plus a mask bit); rows are sorted by time.
pub fn read_dataset<R: Read>(
    reader: R,
    map: &ColumnMap,
    format: TimeFormat,
) -> Result<ConfoundedSeries> {
    map.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let time_idx = position(&map.time_column)?;
    let z_idx = position(&map.confounder_column)?;
    let out_idx = map
        .output_columns
        .iter()
        .map(|c| position(c))
        .collect::<Result<Vec<_>>>()?;
    let p = out_idx.len();

    let mut rows: Vec<(i64, f64, Vec<f64>)> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let t = parse_time(cell(time_idx), format).ok_or_else(|| Error::UnparseableCell {
            row,
            column: map.time_column.clone(),
        })?;
        let z = parse_value(cell(z_idx)).unwrap_or(f64::NAN);
        let x = out_idx
            .iter()
            .map(|&i| parse_value(cell(i)).unwrap_or(f64::NAN))
            .collect();
        rows.push((t, z, x));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateTimestamp(w[0].0));
    }
    let n = rows.len();
    let timestamps: Vec<i64> = rows.iter().map(|r| r.0).collect();
    let confounder: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let outputs = Array2::from_shape_fn((n, p), |(i, j)| rows[i].2[j]);
    let mask = MissingMask {
        outputs: outputs.mapv(|v| v.is_nan()),
        confounder: confounder.iter().map(|v| v.is_nan()).collect(),
    };
    ConfoundedSeries::with_missing(timestamps, outputs, confounder, mask)?
        .with_labels(map.output_columns.clone())
}

pub fn load_dataset(path: &Path, map: &ColumnMap, format: TimeFormat) -> Result<ConfoundedSeries> {
    let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_dataset(file, map, format)
}

/// Fills the missing cells of one column: linear in time between observed
/// neighbours, nearest observed value beyond the first and last.
fn fill_column(t: &[i64], values: &mut [f64], missing: &[bool], name: &str) -> Result<()> {
    let observed: Vec<usize> = (0..values.len()).filter(|&i| !missing[i]).collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::ColumnAllMissing(name.to_string())),
    };
    for i in 0..first {
        values[i] = values[first];
    }
    for i in last + 1..values.len() {
        values[i] = values[last];
    }
    for w in observed.windows(2) {
        let (a, b) = (w[0], w[1]);
        let span = (t[b] - t[a]) as f64;
        for i in a + 1..b {
            let f = (t[i] - t[a]) as f64 / span;
            values[i] = values[a] + f * (values[b] - values[a]);
        }
    }
    Ok(())
}

/// Dense copy of a series with every masked cell filled.
pub fn fill_missing_linear(series: &ConfoundedSeries) -> Result<ConfoundedSeries> {
    let t = series.timestamps();
    let mut outputs = series.outputs().to_owned();
    let mut confounder = series.confounder().to_vec();
    if let Some(mask) = series.missing() {
        for (j, name) in series.labels().iter().enumerate() {
            let mut col = outputs.column(j).to_vec();
            let miss = mask.outputs.column(j).to_vec();
            fill_column(t, &mut col, &miss, name)?;
            outputs
                .column_mut(j)
                .iter_mut()
                .zip(col)
                .for_each(|(o, v)| *o = v);
        }
        fill_column(t, &mut confounder, &mask.confounder, "confounder")?;
    }
    ConfoundedSeries::new(t.to_vec(), outputs, confounder)?.with_labels(series.labels().to_vec())
}

/// One `(z, k, l)` row of an export. `k <= l` are 1-based; `None` marks a
/// gap or an absent column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub z: f64,
    pub k: usize,
    pub l: usize,
    pub estimate: Option<f64>,
    pub sd: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Long-format table of an estimate with optional band columns, ordered by
/// grid point then entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportTable {
    pub rows: Vec<ExportRow>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ExportTable {
    /// Upper-triangle entries of a field, no band columns.
    pub fn from_field(field: &CovarianceField) -> Self {
        let p = field.p();
        let mut rows = Vec::new();
        for (g, &z) in field.grid().points().iter().enumerate() {
            for k in 0..p {
                for l in k..p {
                    rows.push(ExportRow {
                        z,
                        k: k + 1,
                        l: l + 1,
                        estimate: finite(field.entry(g, k, l)),
                        sd: None,
                        lower: None,
                        upper: None,
                    });
                }
            }
        }
        Self { rows }
    }

    /// Rows from bands sharing one grid. Bands are ordered by entry.
    pub fn from_bands(bands: &[ConfidenceBand]) -> Result<Self> {
        let first = bands.first().ok_or(Error::InvalidParameter {
            name: "bands",
            reason: "nothing to export".into(),
        })?;
        if bands.iter().any(|b| b.grid != first.grid) {
            return Err(Error::GridMismatch);
        }
        let mut order: Vec<&ConfidenceBand> = bands.iter().collect();
        order.sort_by_key(|b| (b.statistic.k, b.statistic.l));
        let mut rows = Vec::new();
        for (g, &z) in first.grid.points().iter().enumerate() {
            for b in &order {
                let pt = b.points[g];
                rows.push(ExportRow {
                    z,
                    k: b.statistic.k + 1,
                    l: b.statistic.l + 1,
                    estimate: pt.map(|p| p.estimate),
                    sd: pt.map(|p| p.boot_sd),
                    lower: pt.map(|p| p.lower),
                    upper: pt.map(|p| p.upper),
                });
            }
        }
        Ok(Self { rows })
    }

    /// Distinct grid points in row order.
    pub fn grid(&self) -> Vec<f64> {
        let mut grid: Vec<f64> = Vec::new();
        for r in &self.rows {
            if grid.last() != Some(&r.z) {
                grid.push(r.z);
            }
        }
        grid
    }

    fn entries(&self) -> Vec<(usize, usize)> {
        let z0 = self.rows.first().map(|r| r.z);
        self.rows
            .iter()
            .take_while(|r| Some(r.z) == z0)
            .map(|r| (r.k, r.l))
            .collect()
    }

    fn has_band(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.sd.is_some() || r.lower.is_some() || r.upper.is_some())
    }

    /// Comma-separated text with header `z,k,l,estimate,sd,lower,upper`.
    pub fn to_delimited(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("z,k,l,estimate,sd,lower,upper\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.z,
                r.k,
                r.l,
                cell(r.estimate),
                cell(r.sd),
                cell(r.lower),
                cell(r.upper)
            ));
        }
        out
    }

    pub fn from_delimited(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let expected = ["z", "k", "l", "estimate", "sd", "lower", "upper"];
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::Malformed(format!("unexpected header {:?}", headers)));
        }
        let mut rows = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |c: usize| Error::UnparseableCell {
                row: r + 1,
                column: expected[c].to_string(),
            };
            let num = |c: usize| -> Result<Option<f64>> {
                let s = record.get(c).unwrap_or("");
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| bad(c))
                }
            };
            let index = |c: usize| -> Result<usize> {
                record.get(c).unwrap_or("").parse().map_err(|_| bad(c))
            };
            rows.push(ExportRow {
                z: num(0)?.ok_or_else(|| bad(0))?,
                k: index(1)?,
                l: index(2)?,
                estimate: num(3)?,
                sd: num(4)?,
                lower: num(5)?,
                upper: num(6)?,
            });
        }
        Ok(Self { rows })
    }
}

/// Run description stored alongside structured exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub kind: FieldKind,
    pub bandwidth: f64,
    pub replicates: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub mode: Option<BlockMode>,
    pub band_method: Option<BandMethod>,
    pub version: String,
}

impl ExportMetadata {
    pub fn for_field(kind: FieldKind, bandwidth: f64) -> Self {
        Self {
            kind,
            bandwidth,
            replicates: None,
            alpha: None,
            seed: None,
            mode: None,
            band_method: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

type Packed = Vec<Vec<Option<f64>>>;

/// Structured document: grid, per-grid upper-triangle payloads packed row
/// by row, metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StructuredDoc {
    metadata: ExportMetadata,
    grid: Vec<f64>,
    entries: Vec<(usize, usize)>,
    estimate: Packed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sd: Option<Packed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<Packed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<Packed>,
}

pub fn to_structured(table: &ExportTable, metadata: &ExportMetadata) -> Result<String> {
    let grid = table.grid();
    let entries = table.entries();
    if table.rows.len() != grid.len() * entries.len() {
        return Err(Error::Malformed(
            "table is not a full grid x entry product".into(),
        ));
    }
    let pack = |f: fn(&ExportRow) -> Option<f64>| -> Packed {
        table
            .rows
            .chunks(entries.len())
            .map(|c| c.iter().map(f).collect())
            .collect()
    };
    let band = table.has_band();
    let doc = StructuredDoc {
        metadata: metadata.clone(),
        grid,
        estimate: pack(|r| r.estimate),
        sd: band.then(|| pack(|r| r.sd)),
        lower: band.then(|| pack(|r| r.lower)),
        upper: band.then(|| pack(|r| r.upper)),
        entries,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub fn from_structured(text: &str) -> Result<(ExportTable, ExportMetadata)> {
    let doc: StructuredDoc = serde_json::from_str(text)?;
    let e = doc.entries.len();
    let shaped = |m: &Packed| m.len() == doc.grid.len() && m.iter().all(|r| r.len() == e);
    let optional = [&doc.sd, &doc.lower, &doc.upper];
    if !shaped(&doc.estimate)
        || optional
            .iter()
            .any(|m| m.as_ref().is_some_and(|m| !shaped(m)))
    {
        return Err(Error::Malformed(
            "payload shape does not match grid and entries".into(),
        ));
    }
    let at = |m: &Option<Packed>, g: usize, i: usize| m.as_ref().and_then(|m| m[g][i]);
    let mut rows = Vec::with_capacity(doc.grid.len() * e);
    for (g, &z) in doc.grid.iter().enumerate() {
        for (i, &(k, l)) in doc.entries.iter().enumerate() {
            rows.push(ExportRow {
                z,
                k,
                l,
                estimate: doc.estimate[g][i],
                sd: at(&doc.sd, g, i),
                lower: at(&doc.lower, g, i),
                upper: at(&doc.upper, g, i),
            });
        }
    }
    Ok((ExportTable { rows }, doc.metadata))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Delimited,
    Structured,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Delimited => "csv",
            ExportFormat::Structured => "json",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delimited" | "csv" => Ok(ExportFormat::Delimited),
            "structured" | "json" => Ok(ExportFormat::Structured),
            _ => Err(Error::InvalidParameter {
                name: "format",
                reason: format!("unknown export format `{s}`"),
            }),
        }
    }
}

/// Serialises a table in the given format.
pub fn render_export(
    table: &ExportTable,
    metadata: &ExportMetadata,
    format: ExportFormat,
) -> Result<String> {
    match format {
        ExportFormat::Delimited => Ok(table.to_delimited()),
        ExportFormat::Structured => to_structured(table, metadata),
    }
}

pub fn export_field(
    path: &Path,
    table: &ExportTable,
    metadata: &ExportMetadata,
    format: ExportFormat,
) -> Result<()> {
    let text = render_export(table, metadata, format)?;
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Reads a file written by [`export_field`]. Delimited files carry no
/// metadata.
pub fn read_export(
    path: &Path,
    format: ExportFormat,
) -> Result<(ExportTable, Option<ExportMetadata>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    match format {
        ExportFormat::Delimited => Ok((ExportTable::from_delimited(&text)?, None)),
        ExportFormat::Structured => from_structured(&text).map(|(t, m)| (t, Some(m))),
    }
}
