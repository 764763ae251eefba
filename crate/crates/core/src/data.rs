//! CSV ingestion, chronological splits, standardization and sliding windows.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];
pub const ETT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "valid" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}'; expected train, val or test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn range(&self, name: SplitName) -> Range<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

/// Per-channel standardization statistics from the train range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.to_owned();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        Ok(out)
    }

    pub fn inverse(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.to_owned();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        Ok(out)
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.nrows() != self.mean.len() || self.std.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "scaler has {} channels, data has {}",
                self.mean.len(),
                x.nrows()
            )));
        }
        Ok(())
    }
}

/// A multivariate series stored channel-major (`C x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    names: Vec<String>,
    splits: Option<Splits>,
    scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} channel names for {} channels",
                names.len(),
                values.nrows()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in channel {} at row {}",
                pos / values.ncols().max(1),
                pos % values.ncols().max(1)
            )));
        }
        Ok(Dataset {
            values,
            names,
            splits: None,
            scaler: None,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    /// Chronological split by `ratios` (train, val, test). Each split must
    /// hold at least `lookback + horizon` rows.
    pub fn split(&self, ratios: [f64; 3], lookback: usize, horizon: usize) -> Result<Dataset> {
        if ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
        }
        let sum: f64 = ratios.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum} > 1")));
        }
        let n = self.len();
        let count = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
        let train_end = count(ratios[0]);
        let val_end = train_end + count(ratios[1]);
        let test_end = if (sum - 1.0).abs() <= 1e-9 {
            n
        } else {
            (val_end + count(ratios[2])).min(n)
        };
        let splits = Splits {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..test_end,
        };
        let need = lookback + horizon;
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let len = splits.range(name).len();
            if len < need {
                return Err(Error::Config(format!(
                    "{name} split has {len} rows, needs at least lookback + horizon = {need} (series length {n})"
                )));
            }
        }
        Ok(Dataset {
            splits: Some(splits),
            ..self.clone()
        })
    }

    /// Fits the scaler on the train range and applies it to every row.
    pub fn standardize(&self) -> Result<Dataset> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Config("standardize needs split boundaries".into()))?;
        let train = self.values.slice(s![.., splits.train.clone()]);
        let len = train.ncols() as f64;
        let mut mean = Vec::with_capacity(self.channels());
        let mut std = Vec::with_capacity(self.channels());
        for (c, row) in train.axis_iter(Axis(0)).enumerate() {
            let m = row.sum() / len;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len;
            if !(var > 0.0) {
                return Err(Error::Data(format!(
                    "channel '{}' has zero variance over the train split",
                    self.names[c]
                )));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        self.standardize_with(Scaler { mean, std })
    }

    /// Applies previously fitted statistics.
    pub fn standardize_with(&self, scaler: Scaler) -> Result<Dataset> {
        let values = scaler.transform(self.values.view())?;
        Ok(Dataset {
            values,
            names: self.names.clone(),
            splits: self.splits.clone(),
            scaler: Some(scaler),
        })
    }

    /// Sliding `(lookback, horizon)` windows whose targets lie inside the
    /// split. Validation and test inputs may reach back into earlier rows.
    pub fn windows(&self, split: SplitName, lookback: usize, horizon: usize, stride: usize) -> Result<Windows<'_>> {
        let splits = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Config("windows need split boundaries".into()))?;
        let range = splits.range(split);
        self.windows_in(range, split == SplitName::Train, lookback, horizon, stride)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{split} split: {m}")),
                other => other,
            })
    }

    fn windows_in(
        &self,
        range: Range<usize>,
        self_contained: bool,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Windows<'_>> {
        if stride == 0 || lookback == 0 || horizon == 0 {
            return Err(Error::Config("lookback, horizon and stride must be positive".into()));
        }
        let begin = if self_contained {
            range.start
        } else {
            range.start.saturating_sub(lookback)
        };
        let usable = range.end.saturating_sub(begin);
        if usable < lookback + horizon {
            return Err(Error::Config(format!(
                "{usable} usable rows cannot hold a window of {lookback} + {horizon}"
            )));
        }
        let starts = (begin..=range.end - lookback - horizon).step_by(stride).collect();
        Ok(Windows {
            values: self.values.view(),
            starts,
            lookback,
            horizon,
        })
    }

    /// The last `lookback` rows, for forecasting beyond the data.
    pub fn tail(&self, lookback: usize) -> Result<ArrayView2<'_, f64>> {
        if self.len() < lookback {
            return Err(Error::Data(format!(
                "need {lookback} rows of history, data has {}",
                self.len()
            )));
        }
        Ok(self.values.slice(s![.., self.len() - lookback..]))
    }
}

/// Input and target of one training example, as views into the series.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub start: usize,
    pub input: ArrayView2<'a, f64>,
    pub target: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct Windows<'a> {
    values: ArrayView2<'a, f64>,
    starts: Vec<usize>,
    lookback: usize,
    horizon: usize,
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn get(&self, i: usize) -> Sample<'a> {
        let start = self.starts[i];
        let mid = start + self.lookback;
        Sample {
            start,
            input: self.values.slice_move(s![.., start..mid]),
            target: self.values.slice_move(s![.., mid..mid + self.horizon]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'a>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Parses a CSV with a header row. A first column named `date` is skipped.
pub fn parse_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let skip_first = headers
        .get(0)
        .is_some_and(|h| h.eq_ignore_ascii_case("date"));
    let first = usize::from(skip_first);
    let names: Vec<String> = headers.iter().skip(first).map(String::from).collect();
    if names.is_empty() {
        return Err(Error::Data("no value columns in header".into()));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::Data(format!(
                "ragged row at line {line}: expected {} fields",
                headers.len()
            )),
            _ => Error::Data(format!("line {line}: {e}")),
        })?;
        for (c, cell) in record.iter().skip(first).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "unparseable cell '{cell}' at line {line}, column '{}'",
                    names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite cell '{cell}' at line {line}, column '{}'",
                    names[c]
                )));
            }
            columns[c].push(v);
        }
    }
    let n = columns[0].len();
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((names.len(), n), flat)
        .map_err(|e| Error::Data(format!("inconsistent columns: {e}")))?;
    Dataset::new(values, names)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(file)
}

/// Writes a `C x T` forecast as `T` rows with one column per channel.
pub fn write_forecast_csv<W: Write>(out: W, names: &[String], forecast: ArrayView2<f64>) -> Result<()> {
    if names.len() != forecast.nrows() {
        return Err(Error::Shape(format!(
            "{} names for {} channels",
            names.len(),
            forecast.nrows()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Data(format!("writing forecast: {e}"));
    w.write_record(names).map_err(io)?;
    for col in forecast.axis_iter(Axis(1)) {
        w.write_record(col.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing forecast: {e}")))?;
    Ok(())
}

/// Deterministic synthetic series of period-48 and period-6 sines plus
/// Gaussian noise, one channel.
pub fn synthetic_two_band(len: usize, noise_std: f64, seed: u64) -> Dataset {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let tau = 2.0 * std::f64::consts::PI;
    let series: Array1<f64> = (0..len)
        .map(|t| {
            let t = t as f64;
            (tau * t / 48.0).sin() + 0.5 * (tau * t / 6.0).sin() + noise.sample(&mut rng)
        })
        .collect();
    Dataset::new(series.insert_axis(Axis(0)), vec!["s".to_string()]).expect("finite synthetic data")
}
