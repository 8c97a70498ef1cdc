//! Datasets of `(z, x, y)` rows, CSV ingestion with range filters, and
//! per-level moment curves with confidence bands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path as FsPath;

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linear::{ConditionalMoments, LinearModelParams};
use crate::report::format_f64;
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no rows")]
    NoRows,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {0} has a non-finite value")]
    NonFinite(usize),
    #[error("need at least 2 bins with 2 or more rows, found {0}")]
    InsufficientBins(usize),
    #[error("bootstrap needs at least 2 resamples")]
    TooFewResamples,
    #[error("bin width must be positive, got {0}")]
    BadWidth(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    fn from_csv(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        DataError::Malformed {
            line,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub z: f64,
    pub x: f64,
    pub y: f64,
}

/// Non-empty collection of finite `(z, x, y)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Row>,
    unit_ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn from_rows(rows: Vec<Row>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::NoRows);
        }
        if let Some(i) = rows
            .iter()
            .position(|r| !(r.z.is_finite() && r.x.is_finite() && r.y.is_finite()))
        {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            rows,
            unit_ids: None,
        })
    }

    pub fn with_unit_ids(mut self, ids: Vec<String>) -> Self {
        assert_eq!(ids.len(), self.rows.len(), "one unit id per row");
        self.unit_ids = Some(ids);
        self
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn unit_ids(&self) -> Option<&[String]> {
        self.unit_ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds `c` to every `x`.
    pub fn shift_x(&self, c: f64) -> Dataset {
        let rows = self.rows.iter().map(|r| Row { x: r.x + c, ..*r }).collect();
        Dataset {
            rows,
            unit_ids: self.unit_ids.clone(),
        }
    }

    /// SHA-256 over the bit patterns of every row.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.z.to_bits().to_le_bytes());
            h.update(r.x.to_bits().to_le_bytes());
            h.update(r.y.to_bits().to_le_bytes());
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// `z,x,y` CSV (with a leading `unit_id` column when ids are present).
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 48);
        match &self.unit_ids {
            Some(ids) => {
                s.push_str("unit_id,z,x,y\n");
                for (id, r) in ids.iter().zip(&self.rows) {
                    let _ = writeln!(
                        s,
                        "{id},{},{},{}",
                        format_f64(r.z),
                        format_f64(r.x),
                        format_f64(r.y)
                    );
                }
            }
            None => {
                s.push_str("z,x,y\n");
                for r in &self.rows {
                    let _ = writeln!(
                        s,
                        "{},{},{}",
                        format_f64(r.z),
                        format_f64(r.x),
                        format_f64(r.y)
                    );
                }
            }
        }
        s
    }
}

/// Which CSV columns hold `z`, `x`, `y` (and optionally a unit id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub z: String,
    pub x: String,
    pub y: String,
    pub unit_id: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            z: "z".into(),
            x: "x".into(),
            y: "y".into(),
            unit_id: None,
        }
    }
}

/// Keep rows with `min <= column <= max`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeFilter {
    pub column: String,
    pub min: f64,
    pub max: f64,
}

impl RangeFilter {
    pub fn new(column: impl Into<String>, min: f64, max: f64) -> Self {
        Self {
            column: column.into(),
            min,
            max,
        }
    }

    /// Parses `column:min:max`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut it = s.rsplitn(3, ':');
        let max = it.next()?.parse().ok()?;
        let min = it.next()?.parse().ok()?;
        let column = it.next()?.to_string();
        Some(Self { column, min, max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub kept: usize,
    pub dropped: usize,
}

pub fn ingest(
    path: impl AsRef<FsPath>,
    columns: &ColumnMap,
    filters: &[RangeFilter],
) -> Result<(Dataset, IngestReport), DataError> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, columns, filters)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    columns: &ColumnMap,
    filters: &[RangeFilter],
) -> Result<(Dataset, IngestReport), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(DataError::from_csv)?.clone();
    if headers.is_empty() {
        return Err(DataError::NoRows);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    };
    let (iz, ix, iy) = (col(&columns.z)?, col(&columns.x)?, col(&columns.y)?);
    let iid = columns.unit_id.as_deref().map(col).transpose()?;
    let filter_cols: Vec<(usize, &RangeFilter)> = filters
        .iter()
        .map(|f| Ok((col(&f.column)?, f)))
        .collect::<Result<_, DataError>>()?;

    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(DataError::from_csv)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |i: usize| -> Result<f64, DataError> {
            let field = rec.get(i).unwrap_or("");
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Malformed {
                    line,
                    message: format!(
                        "`{field}` in column `{}` is not a finite number",
                        &headers[i]
                    ),
                })
        };
        let mut keep = true;
        for &(i, f) in &filter_cols {
            let v = num(i)?;
            if v < f.min || v > f.max {
                keep = false;
                break;
            }
        }
        if !keep {
            dropped += 1;
            continue;
        }
        rows.push(Row {
            z: num(iz)?,
            x: num(ix)?,
            y: num(iy)?,
        });
        if let Some(i) = iid {
            ids.push(rec.get(i).unwrap_or("").to_string());
        }
    }
    let kept = rows.len();
    let mut d = Dataset::from_rows(rows)?;
    if iid.is_some() {
        d = d.with_unit_ids(ids);
    }
    Ok((d, IngestReport { kept, dropped }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binning {
    /// One bin per distinct `z` value.
    ExactLevels,
    /// Bins `[origin + k w, origin + (k+1) w)`.
    Width { width: f64, origin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentBin {
    /// Level (exact binning) or bin centre.
    pub z: f64,
    /// Mean `z` of the rows in the bin.
    pub z_mean: f64,
    pub n: usize,
    pub mean_x: Interval,
    pub mean_y: Interval,
    pub var_x: Interval,
    pub var_y: Interval,
    pub cov_xy: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurve {
    pub bins: Vec<MomentBin>,
    pub n_boot: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleMoments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov_xy: f64,
}

fn sample_moments<'a>(rows: impl Iterator<Item = &'a Row> + Clone) -> SampleMoments {
    let n = rows.clone().count() as f64;
    let (sx, sy) = rows
        .clone()
        .fold((0.0, 0.0), |(a, b), r| (a + r.x, b + r.y));
    let (mx, my) = (sx / n, sy / n);
    let (mut vxx, mut vyy, mut vxy) = (0.0, 0.0, 0.0);
    for r in rows {
        let (dx, dy) = (r.x - mx, r.y - my);
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
    }
    let denom = n - 1.0;
    SampleMoments {
        mean_x: mx,
        mean_y: my,
        var_x: vxx / denom,
        var_y: vyy / denom,
        cov_xy: vxy / denom,
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of `values` at the given two-sided level.
pub fn percentile_interval(values: &mut [f64], level: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(values, a), quantile_sorted(values, 1.0 - a))
}

fn bin_key(z: f64, binning: Binning) -> i64 {
    match binning {
        Binning::ExactLevels => ordered_bits(z),
        Binning::Width { width, origin } => ((z - origin) / width).floor() as i64,
    }
}

/// Maps a float to an integer with the same total order.
fn ordered_bits(v: f64) -> i64 {
    let b = v.to_bits() as i64;
    b ^ (((b >> 63) as u64) >> 1) as i64
}

/// Per-bin sample moments. Mean intervals are `+-1.96` standard errors;
/// variance and covariance intervals are percentile bootstraps within the bin.
pub fn moment_curve(
    d: &Dataset,
    binning: Binning,
    n_boot: usize,
    seed: u64,
) -> Result<MomentCurve, DataError> {
    if let Binning::Width { width, .. } = binning {
        if !(width > 0.0 && width.is_finite()) {
            return Err(DataError::BadWidth(width));
        }
    }
    if n_boot < 2 {
        return Err(DataError::TooFewResamples);
    }
    let mut groups: BTreeMap<i64, Vec<Row>> = BTreeMap::new();
    for r in d.rows() {
        groups.entry(bin_key(r.z, binning)).or_default().push(*r);
    }
    let groups: Vec<(i64, Vec<Row>)> = groups.into_iter().filter(|(_, g)| g.len() >= 2).collect();
    if groups.len() < 2 {
        return Err(DataError::InsufficientBins(groups.len()));
    }
    let bins = groups
        .par_iter()
        .enumerate()
        .map(|(bin_idx, (key, rows))| {
            let n = rows.len();
            let m = sample_moments(rows.iter());
            let z_mean = rows.iter().map(|r| r.z).sum::<f64>() / n as f64;
            let z = match binning {
                Binning::ExactLevels => rows[0].z,
                Binning::Width { width, origin } => origin + (*key as f64 + 0.5) * width,
            };
            let mut r = rng::stream(seed, bin_idx as u64);
            let mut bx = Vec::with_capacity(n_boot);
            let mut by = Vec::with_capacity(n_boot);
            let mut bc = Vec::with_capacity(n_boot);
            let mut buf = vec![rows[0]; n];
            for _ in 0..n_boot {
                for slot in buf.iter_mut() {
                    *slot = rows[r.random_range(0..n)];
                }
                let bm = sample_moments(buf.iter());
                bx.push(bm.var_x);
                by.push(bm.var_y);
                bc.push(bm.cov_xy);
            }
            let band = |v: &mut Vec<f64>, est: f64| {
                let (lower, upper) = percentile_interval(v, 0.95);
                Interval {
                    estimate: est,
                    lower,
                    upper,
                }
            };
            let mean_iv = |mean: f64, var: f64| {
                let half = 1.96 * (var / n as f64).sqrt();
                Interval {
                    estimate: mean,
                    lower: mean - half,
                    upper: mean + half,
                }
            };
            MomentBin {
                z,
                z_mean,
                n,
                mean_x: mean_iv(m.mean_x, m.var_x),
                mean_y: mean_iv(m.mean_y, m.var_y),
                var_x: band(&mut bx, m.var_x),
                var_y: band(&mut by, m.var_y),
                cov_xy: band(&mut bc, m.cov_xy),
            }
        })
        .collect();
    Ok(MomentCurve { bins, n_boot, seed })
}

/// The five observable moment panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    MeanX,
    MeanY,
    VarX,
    VarY,
    CovXY,
}

impl Panel {
    pub const ALL: [Panel; 5] = [
        Panel::MeanX,
        Panel::MeanY,
        Panel::VarX,
        Panel::VarY,
        Panel::CovXY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Panel::MeanX => "mean_x",
            Panel::MeanY => "mean_y",
            Panel::VarX => "var_x",
            Panel::VarY => "var_y",
            Panel::CovXY => "cov_xy",
        }
    }

    pub fn observed(self, b: &MomentBin) -> Interval {
        match self {
            Panel::MeanX => b.mean_x,
            Panel::MeanY => b.mean_y,
            Panel::VarX => b.var_x,
            Panel::VarY => b.var_y,
            Panel::CovXY => b.cov_xy,
        }
    }

    pub fn predicted(self, m: &ConditionalMoments) -> f64 {
        match self {
            Panel::MeanX => m.mean_x,
            Panel::MeanY => m.mean_y,
            Panel::VarX => m.var_x,
            Panel::VarY => m.var_y,
            Panel::CovXY => m.cov_xy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayRow {
    pub bin: MomentBin,
    pub full: Option<ConditionalMoments>,
    pub reduced: Option<ConditionalMoments>,
}

/// Observed moments next to the model predictions at each bin's mean `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayTable {
    pub rows: Vec<OverlayRow>,
}

pub fn overlay(
    full: Option<&LinearModelParams>,
    reduced: Option<&LinearModelParams>,
    curve: &MomentCurve,
) -> OverlayTable {
    let rows = curve
        .bins
        .iter()
        .map(|b| OverlayRow {
            bin: b.clone(),
            full: full.map(|p| p.raw_moments(b.z_mean)),
            reduced: reduced.map(|p| p.raw_moments(b.z_mean)),
        })
        .collect();
    OverlayTable { rows }
}

impl OverlayTable {
    /// One CSV per panel: `z,n,estimate,lower,upper[,full][,reduced]`.
    pub fn panel_csv(&self, panel: Panel) -> String {
        let has_full = self.rows.iter().any(|r| r.full.is_some());
        let has_reduced = self.rows.iter().any(|r| r.reduced.is_some());
        let mut s = String::from("z,n,estimate,lower,upper");
        if has_full {
            s.push_str(",full");
        }
        if has_reduced {
            s.push_str(",reduced");
        }
        s.push('\n');
        for r in &self.rows {
            let iv = panel.observed(&r.bin);
            let _ = write!(
                s,
                "{},{},{},{},{}",
                format_f64(r.bin.z),
                r.bin.n,
                format_f64(iv.estimate),
                format_f64(iv.lower),
                format_f64(iv.upper)
            );
            if let Some(m) = &r.full {
                let _ = write!(s, ",{}", format_f64(panel.predicted(m)));
            }
            if let Some(m) = &r.reduced {
                let _ = write!(s, ",{}", format_f64(panel.predicted(m)));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<panel>.csv` for all five panels into `dir`.
    pub fn write_panels(
        &self,
        dir: impl AsRef<FsPath>,
    ) -> Result<Vec<std::path::PathBuf>, DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        Panel::ALL
            .iter()
            .map(|&p| {
                let path = dir.join(format!("{}.csv", p.name()));
                std::fs::write(&path, self.panel_csv(p))?;
                Ok(path)
            })
            .collect()
    }
}
