//! Time-series tables, chronological splits, sliding windows, train-split
//! standardisation and MSE/MAE metrics.
//!
//! Split layout follows the usual ETT protocol: validation and test windows
//! take their lookback context from the rows just before the split border, so
//! a split with target rows `[start, end)` yields windows whose inputs begin
//! as early as `start - L`.

use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows in one 30-day month of hourly data.
const HOURS_PER_MONTH: usize = 30 * 24;
/// Floor for the train-split std in [`standardize`].
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<String>,
    /// Row-major `[rows, channels]`.
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
    /// Non-fatal notes raised while loading (e.g. re-sorted rows).
    pub warnings: Vec<String>,
}

impl SeriesTable {
    pub fn new(timestamps: Vec<String>, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 || values.len() != timestamps.len() * c {
            return Err(Error::Data(format!(
                "{} values for {} rows x {c} channels",
                values.len(),
                timestamps.len()
            )));
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
            warnings: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.channels();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.channels() + c]
    }

    /// Writes `timestamp,<channels..>` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for r in 0..self.rows() {
            let mut rec = vec![self.timestamps[r].clone()];
            rec.extend(self.row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Timestamp column name; the first column when unset.
    pub timestamp_column: Option<String>,
    /// Fill missing cells with the previous row's value instead of failing.
    pub impute_forward: bool,
}

/// Sort key for a timestamp cell: numbers sort numerically, date-times
/// chronologically.
fn timestamp_key(raw: &str) -> Option<f64> {
    if let Ok(v) = raw.trim().parse::<f64>() {
        return Some(v);
    }
    const FORMATS: [&str; 5] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y/%m/%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
    ];
    let s = raw.trim();
    for f in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t.and_utc().timestamp() as f64);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc().timestamp() as f64)
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("null")
}

/// Reads a comma-separated file with a header row. Rows come back sorted by
/// timestamp; duplicate timestamps are rejected.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<SeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let ts_col = match &options.timestamp_column {
        Some(name) => header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!("timestamp column '{name}' not in header {header:?}"))
        })?,
        None => 0,
    };
    let channel_cols: Vec<usize> = (0..header.len()).filter(|&i| i != ts_col).collect();
    if channel_cols.is_empty() {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let channel_names: Vec<String> = channel_cols.iter().map(|&i| header[i].clone()).collect();

    let mut rows: Vec<(f64, String, Vec<f64>)> = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let raw_ts = rec[ts_col].trim().to_string();
        let key = timestamp_key(&raw_ts)
            .ok_or_else(|| Error::Data(format!("line {line}: unparseable timestamp '{raw_ts}'")))?;
        let mut vals = Vec::with_capacity(channel_cols.len());
        for (k, &col) in channel_cols.iter().enumerate() {
            let cell = &rec[col];
            if is_missing(cell) {
                match (&prev, options.impute_forward) {
                    (Some(p), true) => vals.push(p[k]),
                    (None, true) => {
                        return Err(Error::Data(format!(
                            "line {line}: missing value in '{}' with no earlier row to fill from",
                            channel_names[k]
                        )))
                    }
                    (_, false) => {
                        return Err(Error::Data(format!(
                            "line {line}: missing value in column '{}' (enable forward imputation to fill)",
                            channel_names[k]
                        )))
                    }
                }
            } else {
                let v = cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "line {line}: malformed number '{cell}' in column '{}'",
                        channel_names[k]
                    ))
                })?;
                vals.push(v);
            }
        }
        prev = Some(vals.clone());
        rows.push((key, raw_ts, vals));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let mut warnings = Vec::new();
    if rows.windows(2).any(|w| w[0].0 > w[1].0) {
        let msg = format!("{}: rows were not in timestamp order; sorted", path.display());
        log::warn!("{msg}");
        warnings.push(msg);
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate timestamp '{}'", w[1].1)));
    }
    let mut timestamps = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * channel_names.len());
    for (_, ts, v) in rows {
        timestamps.push(ts);
        values.extend(v);
    }
    let mut table = SeriesTable::new(timestamps, values, channel_names)?;
    table.warnings = warnings;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    /// Hourly ETT: 12/4/4 months.
    Etth,
    /// 15-minute ETT: 4x the hourly borders.
    Ettm,
    Weather,
    Electricity,
    Traffic,
    /// Fractional train/val split; test takes the rest.
    Custom { train: f64, val: f64 },
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "etth" | "etth1" | "etth2" => DatasetKind::Etth,
            "ettm" | "ettm1" | "ettm2" => DatasetKind::Ettm,
            "weather" => DatasetKind::Weather,
            "electricity" | "ecl" => DatasetKind::Electricity,
            "traffic" => DatasetKind::Traffic,
            "custom" => DatasetKind::Custom { train: 0.7, val: 0.1 },
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset kind '{other}'; valid: etth, ettm, weather, electricity, traffic, custom"
                )))
            }
        })
    }
}

/// Target-row borders of the three splits: train `[0, train_end)`, val
/// `[train_end, val_end)`, test `[val_end, test_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn new(train_end: usize, val_end: usize, test_end: usize, rows: usize) -> Result<Self> {
        if !(0 < train_end && train_end <= val_end && val_end <= test_end && test_end <= rows) {
            return Err(Error::Data(format!(
                "split borders {train_end}/{val_end}/{test_end} invalid for {rows} rows"
            )));
        }
        Ok(Self {
            train_end,
            val_end,
            test_end,
        })
    }

    /// Row range that windows of `split` may read: the context-inclusive start
    /// and the exclusive end.
    pub fn span(&self, split: Split, lookback: usize) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end.saturating_sub(lookback), self.val_end),
            Split::Test => (self.val_end.saturating_sub(lookback), self.test_end),
        }
    }

    /// Input windows of length `lookback` that fit in the split's span, i.e.
    /// the number of forecast origins. Independent of the horizon; this is
    /// the dataset-size convention used in benchmark tables.
    pub fn lookback_windows(&self, split: Split, lookback: usize) -> usize {
        let (s, e) = self.span(split, lookback);
        (e - s + 1).saturating_sub(lookback)
    }

    /// Supervised `(x, y)` pairs with the full target inside the split.
    pub fn window_count(&self, split: Split, lookback: usize, horizon: usize) -> usize {
        let (s, e) = self.span(split, lookback);
        window_count(e - s, lookback, horizon)
    }
}

/// `len - L - T + 1` windows at stride 1, or 0.
pub fn window_count(len: usize, lookback: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(lookback + horizon)
}

/// Standard borders for a dataset family.
pub fn standard_splits(rows: usize, kind: DatasetKind) -> Result<SplitSpec> {
    match kind {
        DatasetKind::Etth | DatasetKind::Ettm => {
            let scale = if kind == DatasetKind::Ettm { 4 } else { 1 };
            let m = HOURS_PER_MONTH * scale;
            let (a, b, c) = (12 * m, 16 * m, 20 * m);
            if rows < c {
                return Err(Error::Data(format!(
                    "{kind:?} split needs at least {c} rows, table has {rows}"
                )));
            }
            SplitSpec::new(a, b, c, rows)
        }
        DatasetKind::Weather | DatasetKind::Electricity | DatasetKind::Traffic => fractional(rows, 0.7, 0.1),
        DatasetKind::Custom { train, val } => fractional(rows, train, val),
    }
}

/// `train = floor(rows*train)`, `test = floor(rows*(1-train-val))`, val gets
/// the remainder.
fn fractional(rows: usize, train: f64, val: f64) -> Result<SplitSpec> {
    if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
        return Err(Error::Config(format!("bad split fractions train={train} val={val}")));
    }
    let n_train = (rows as f64 * train).floor() as usize;
    let n_test = (rows as f64 * (1.0 - train - val) + 1e-9).floor() as usize;
    let n_val = rows - n_train - n_test;
    SplitSpec::new(n_train, n_train + n_val, rows, rows)
}

/// One supervised sample: `x` covers rows `[origin - L, origin)`, `y` covers
/// `[origin, origin + T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSample {
    pub origin: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowSample {
    pub fn input_rows(&self) -> std::ops::Range<usize> {
        self.origin - self.lookback..self.origin
    }

    pub fn target_rows(&self) -> std::ops::Range<usize> {
        self.origin..self.origin + self.horizon
    }
}

/// Every window of `split` at the given stride, in chronological order.
pub fn windows(
    spec: &SplitSpec,
    split: Split,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("window stride must be positive".into()));
    }
    let (s, e) = spec.span(split, lookback);
    let n = window_count(e - s, lookback, horizon);
    if n == 0 {
        return Err(Error::Data(format!(
            "{split:?} split spans {} rows but one window needs L+T = {} rows",
            e - s,
            lookback + horizon
        )));
    }
    Ok((0..n)
        .step_by(stride)
        .map(|i| WindowSample {
            origin: s + i + lookback,
            lookback,
            horizon,
        })
        .collect())
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics of rows `[0, train_end)` only; population std floored at
    /// [`STD_FLOOR`].
    pub fn fit(table: &SeriesTable, train_end: usize) -> Result<(Self, Vec<String>)> {
        if train_end == 0 || train_end > table.rows() {
            return Err(Error::Data(format!(
                "train split of {train_end} rows invalid for table of {}",
                table.rows()
            )));
        }
        let c = table.channels();
        let n = train_end as f64;
        let mut mean = vec![0.0; c];
        for r in 0..train_end {
            for (m, v) in mean.iter_mut().zip(table.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in 0..train_end {
            for ((s, v), m) in var.iter_mut().zip(table.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut warnings = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    let msg = format!(
                        "channel '{}' has zero variance on the train split; std floored at {STD_FLOOR:e}",
                        table.channel_names[k]
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Ok((Self { mean, std }, warnings))
    }

    pub fn apply(&self, table: &SeriesTable) -> SeriesTable {
        let c = table.channels();
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect();
        SeriesTable {
            values,
            ..table.clone()
        }
    }

    pub fn invert(&self, table: &SeriesTable) -> SeriesTable {
        let c = table.channels();
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect();
        SeriesTable {
            values,
            ..table.clone()
        }
    }
}

/// Z-scores the whole table with train-split statistics.
pub fn standardize(table: &SeriesTable, spec: &SplitSpec) -> Result<(SeriesTable, Standardizer)> {
    let (stats, mut warnings) = Standardizer::fit(table, spec.train_end)?;
    let mut out = stats.apply(table);
    out.warnings.append(&mut warnings);
    Ok((out, stats))
}

/// Mean squared and mean absolute error over every element of every window.
pub fn mse_mae(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::shape(
            "mse_mae",
            format!("{} predictions vs {} targets", preds.len(), targets.len()),
        ));
    }
    let mut acc = MetricAccumulator::default();
    for (p, t) in preds.iter().zip(targets) {
        acc.add(p, t)?;
    }
    acc.finish()
}

/// Running sums for MSE/MAE.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &[f64], target: &[f64]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape(
                "mse_mae",
                format!("prediction has {} values, target {}", pred.len(), target.len()),
            ));
        }
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += pred.len();
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.sq += other.sq;
        self.abs += other.abs;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::Data("no elements to score".into()));
        }
        let n = self.count as f64;
        Ok((self.sq / n, self.abs / n))
    }
}

/// A standardised table with its borders; produces batches of windows.
#[derive(Debug, Clone)]
pub struct WindowedData {
    values: Arc<Vec<f64>>,
    pub channels: usize,
    pub rows: usize,
    pub spec: SplitSpec,
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowedData {
    pub fn new(table: &SeriesTable, spec: SplitSpec, lookback: usize, horizon: usize) -> Self {
        Self {
            values: Arc::new(table.values.clone()),
            channels: table.channels(),
            rows: table.rows(),
            spec,
            lookback,
            horizon,
        }
    }

    pub fn windows(&self, split: Split) -> Result<Vec<WindowSample>> {
        windows(&self.spec, split, self.lookback, self.horizon, 1)
    }

    fn rows_of(&self, range: std::ops::Range<usize>) -> &[f64] {
        &self.values[range.start * self.channels..range.end * self.channels]
    }

    pub fn input(&self, w: &WindowSample) -> &[f64] {
        self.rows_of(w.input_rows())
    }

    pub fn target(&self, w: &WindowSample) -> &[f64] {
        self.rows_of(w.target_rows())
    }

    /// `x: [B, L, C]`, `y: [B, T, C]`.
    pub fn batch(&self, ws: &[WindowSample]) -> Result<(Tensor, Tensor)> {
        let (l, t, c) = (self.lookback, self.horizon, self.channels);
        let mut x = Vec::with_capacity(ws.len() * l * c);
        let mut y = Vec::with_capacity(ws.len() * t * c);
        for w in ws {
            x.extend_from_slice(self.input(w));
            y.extend_from_slice(self.target(w));
        }
        Ok((
            Tensor::new(&[ws.len(), l, c], x)?,
            Tensor::new(&[ws.len(), t, c], y)?,
        ))
    }
}
