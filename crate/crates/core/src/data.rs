//! OHLC ingestion, look-ahead labeling, chronological split, min-max scaling
//! and sliding-window sample construction.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::FeatureMap;

/// Number of price features carried per row (open, high, low, close).
pub const NUM_FEATURES: usize = 4;

/// Column index of `High` inside a feature row.
pub const HIGH: usize = 1;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["Open", "High", "Low", "Close"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("header is missing required column '{0}'")]
    MissingColumn(&'static str),
    #[error("no usable rows ({dropped} dropped as missing or non-numeric)")]
    NoUsableRows { dropped: usize },
    #[error("too few rows: {rows} rows cannot be labeled with horizon {horizon}")]
    TooFewRows { rows: usize, horizon: usize },
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("train fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("split of {rows} rows at fraction {fraction} leaves an empty partition")]
    EmptyPartition { rows: usize, fraction: f64 },
    #[error("cannot fit normalization on an empty frame")]
    EmptyFrame,
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("frame of {rows} rows is shorter than window length {window_len}")]
    FrameShorterThanWindow { rows: usize, window_len: usize },
}

/// One cleaned input row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub date: String,
    pub time: String,
    pub index: String,
}

impl RawRow {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [self.open, self.high, self.low, self.close]
    }
}

/// Rows in file order, with the count of rows rejected while loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawFrame {
    pub rows: Vec<RawRow>,
    pub dropped: usize,
}

impl RawFrame {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Columns that exist only between labeling and feature selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RowExtras {
    pub date: String,
    pub time: String,
    pub index: String,
    /// `High` observed `horizon` rows later.
    pub high_ahead: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledRow {
    pub features: [f64; NUM_FEATURES],
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub rows: Vec<LabeledRow>,
    pub horizon: usize,
    /// Present right after labeling; `select_features` removes it.
    pub extras: Option<Vec<RowExtras>>,
}

impl LabeledFrame {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.rows.iter().map(|r| r.label)
    }

    fn slice(&self, range: std::ops::Range<usize>) -> LabeledFrame {
        LabeledFrame {
            rows: self.rows[range.clone()].to_vec(),
            horizon: self.horizon,
            extras: self.extras.as_ref().map(|e| e[range].to_vec()),
        }
    }
}

/// Per-feature extremes of the training partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; NUM_FEATURES],
    pub max: [f64; NUM_FEATURES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: FeatureMap,
    pub label: u8,
}

/// Windowed samples, each a `NUM_FEATURES x window_len` map.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub window_len: usize,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples
            .first()
            .map(|s| s.window.channels())
            .unwrap_or(NUM_FEATURES)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Fraction of label-1 samples; 0 for an empty set.
    pub fn positive_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        pos as f64 / self.samples.len() as f64
    }

    /// Chronological split: the first `len - tail` samples and the last `tail`.
    pub fn split_tail(&self, tail: usize) -> (SampleSet, SampleSet) {
        let cut = self.samples.len().saturating_sub(tail);
        (
            SampleSet {
                samples: self.samples[..cut].to_vec(),
                window_len: self.window_len,
            },
            SampleSet {
                samples: self.samples[cut..].to_vec(),
                window_len: self.window_len,
            },
        )
    }
}

/// Loads an OHLC CSV file. See [`parse_ohlc_csv`].
pub fn load_ohlc_csv(path: impl AsRef<Path>) -> Result<RawFrame, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_ohlc_csv(file).map_err(|e| match e {
        DataError::Unreadable { reason, .. } => DataError::Unreadable {
            path: path.display().to_string(),
            reason,
        },
        other => other,
    })
}

/// Parses OHLC CSV text. Column names are matched case-insensitively;
/// `Date`, `Time` and `Index` are kept when present. Rows whose four prices
/// are not all finite numbers are dropped and counted.
pub fn parse_ohlc_csv<R: Read>(reader: R) -> Result<RawFrame, DataError> {
    let unreadable = |e: csv::Error| DataError::Unreadable {
        path: "<input>".into(),
        reason: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(unreadable)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
    };
    let mut price_cols = [0usize; NUM_FEATURES];
    for (slot, name) in price_cols.iter_mut().zip(FEATURE_NAMES) {
        *slot = find(name).ok_or(DataError::MissingColumn(name))?;
    }
    let (date_col, time_col, index_col) = (find("Date"), find("Time"), find("Index"));

    let mut frame = RawFrame::default();
    for record in rdr.records() {
        let record = record.map_err(unreadable)?;
        let mut prices = [0.0; NUM_FEATURES];
        let ok = price_cols.iter().zip(prices.iter_mut()).all(|(&col, out)| {
            match record.get(col).map(str::parse::<f64>) {
                Some(Ok(v)) if v.is_finite() => {
                    *out = v;
                    true
                }
                _ => false,
            }
        });
        if !ok {
            frame.dropped += 1;
            continue;
        }
        let text = |col: Option<usize>| {
            col.and_then(|c| record.get(c))
                .unwrap_or_default()
                .to_string()
        };
        frame.rows.push(RawRow {
            open: prices[0],
            high: prices[1],
            low: prices[2],
            close: prices[3],
            date: text(date_col),
            time: text(time_col),
            index: text(index_col),
        });
    }
    if frame.rows.is_empty() {
        return Err(DataError::NoUsableRows {
            dropped: frame.dropped,
        });
    }
    Ok(frame)
}

/// Labels row `i` with 1 iff `high[i + horizon] > high[i]`, then drops the
/// final `horizon` rows, which have no future value.
pub fn label_high15(frame: &RawFrame, horizon: usize) -> Result<LabeledFrame, DataError> {
    if horizon == 0 {
        return Err(DataError::ZeroHorizon);
    }
    let n = frame.rows.len();
    if n <= horizon {
        return Err(DataError::TooFewRows { rows: n, horizon });
    }
    let kept = n - horizon;
    let mut rows = Vec::with_capacity(kept);
    let mut extras = Vec::with_capacity(kept);
    for (row, ahead) in frame.rows.iter().zip(&frame.rows[horizon..]) {
        rows.push(LabeledRow {
            features: row.features(),
            label: u8::from(ahead.high > row.high),
        });
        extras.push(RowExtras {
            date: row.date.clone(),
            time: row.time.clone(),
            index: row.index.clone(),
            high_ahead: ahead.high,
        });
    }
    Ok(LabeledFrame {
        rows,
        horizon,
        extras: Some(extras),
    })
}

/// Keeps only the four price features and the label.
pub fn select_features(frame: LabeledFrame) -> LabeledFrame {
    LabeledFrame {
        extras: None,
        ..frame
    }
}

/// Chronological split: the first `floor(n * train_fraction)` rows train.
pub fn split_train_test(
    frame: &LabeledFrame,
    train_fraction: f64,
) -> Result<(LabeledFrame, LabeledFrame), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let n = frame.len();
    let cut = floor_fraction(n, train_fraction);
    if cut == 0 || cut == n {
        return Err(DataError::EmptyPartition {
            rows: n,
            fraction: train_fraction,
        });
    }
    Ok((frame.slice(0..cut), frame.slice(cut..n)))
}

/// `floor(n * fraction)` in real arithmetic; absorbs representation error
/// such as `10 * 0.7 = 7.000000000000001` or `30 * 0.7 = 20.999999999999996`.
pub(crate) fn floor_fraction(n: usize, fraction: f64) -> usize {
    let product = n as f64 * fraction;
    let rounded = product.round();
    if (product - rounded).abs() <= 1e-9 * product.abs().max(1.0) {
        rounded as usize
    } else {
        product.floor() as usize
    }
}

pub fn fit_minmax(train: &LabeledFrame) -> Result<NormStats, DataError> {
    let first = train.rows.first().ok_or(DataError::EmptyFrame)?;
    let mut stats = NormStats {
        min: first.features,
        max: first.features,
    };
    for row in &train.rows[1..] {
        for (f, &x) in row.features.iter().enumerate() {
            stats.min[f] = stats.min[f].min(x);
            stats.max[f] = stats.max[f].max(x);
        }
    }
    Ok(stats)
}

/// `(x - min) / (max - min)` per feature, unclipped. A constant feature
/// (`max == min`) maps to 0.
pub fn apply_minmax(frame: &LabeledFrame, stats: &NormStats) -> LabeledFrame {
    let rows = frame
        .rows
        .iter()
        .map(|row| {
            let mut features = row.features;
            for (f, x) in features.iter_mut().enumerate() {
                *x = scale(*x, stats.min[f], stats.max[f]);
            }
            LabeledRow {
                features,
                label: row.label,
            }
        })
        .collect();
    LabeledFrame {
        rows,
        horizon: frame.horizon,
        extras: frame.extras.clone(),
    }
}

#[inline]
fn scale(x: f64, min: f64, max: f64) -> f64 {
    let range = max - min;
    if range == 0.0 {
        0.0
    } else {
        (x - min) / range
    }
}

/// Stride-1 windows of `window_len` consecutive rows, labeled by their last row.
pub fn make_windows(frame: &LabeledFrame, window_len: usize) -> Result<SampleSet, DataError> {
    if window_len == 0 {
        return Err(DataError::ZeroWindow);
    }
    if frame.len() < window_len {
        return Err(DataError::FrameShorterThanWindow {
            rows: frame.len(),
            window_len,
        });
    }
    let samples = frame
        .rows
        .windows(window_len)
        .map(|rows| {
            let mut data = vec![0.0; NUM_FEATURES * window_len];
            for (t, row) in rows.iter().enumerate() {
                for (f, &x) in row.features.iter().enumerate() {
                    data[f * window_len + t] = x;
                }
            }
            Sample {
                window: FeatureMap::from_vec(NUM_FEATURES, window_len, data)
                    .expect("window values come from finite prices"),
                label: rows[window_len - 1].label,
            }
        })
        .collect();
    Ok(SampleSet {
        samples,
        window_len,
    })
}

/// Options for the whole preprocessing chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub horizon: usize,
    pub window_len: usize,
    pub train_fraction: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            horizon: 15,
            window_len: 32,
            train_fraction: 0.7,
        }
    }
}

/// Everything the preprocessing chain produces.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: SampleSet,
    pub test: SampleSet,
    pub stats: NormStats,
    pub summary: PrepareSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub rows_labeled: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_windows: usize,
    pub test_windows: usize,
    pub train_positive_fraction: f64,
    pub test_positive_fraction: f64,
    pub options: PipelineOptions,
}

/// Rebuilds both partitions with previously fitted statistics.
pub fn prepare_with_stats(
    raw: &RawFrame,
    options: &PipelineOptions,
    stats: &NormStats,
) -> Result<(SampleSet, SampleSet), DataError> {
    let labeled = select_features(label_high15(raw, options.horizon)?);
    let (train, test) = split_train_test(&labeled, options.train_fraction)?;
    Ok((
        make_windows(&apply_minmax(&train, stats), options.window_len)?,
        make_windows(&apply_minmax(&test, stats), options.window_len)?,
    ))
}

/// label -> select -> split -> fit on train -> scale both -> window both.
pub fn prepare(raw: &RawFrame, options: &PipelineOptions) -> Result<Prepared, DataError> {
    let labeled = select_features(label_high15(raw, options.horizon)?);
    let (train, test) = split_train_test(&labeled, options.train_fraction)?;
    let stats = fit_minmax(&train)?;
    let train_windows = make_windows(&apply_minmax(&train, &stats), options.window_len)?;
    let test_windows = make_windows(&apply_minmax(&test, &stats), options.window_len)?;
    let summary = PrepareSummary {
        rows_read: raw.len() + raw.dropped,
        rows_dropped: raw.dropped,
        rows_labeled: labeled.len(),
        train_rows: train.len(),
        test_rows: test.len(),
        train_windows: train_windows.len(),
        test_windows: test_windows.len(),
        train_positive_fraction: train_windows.positive_fraction(),
        test_positive_fraction: test_windows.positive_fraction(),
        options: *options,
    };
    Ok(Prepared {
        train: train_windows,
        test: test_windows,
        stats,
        summary,
    })
}
