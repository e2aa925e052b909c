use chrono::{DateTime, Utc};

use super::{AlignedSeries, DataError, Ticker};

/// Floor used for the standard deviation of a flat normalization block.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Channels per ticker: open, high, low, close, volume, return.
pub const CHANNELS: usize = 6;
pub const FEATURE_COLUMNS: usize = CHANNELS * 3;

/// Forward block z-score.
///
/// The series is cut into consecutive blocks of `block` samples starting at
/// index 0. Values in block `k + 1` are normalized with the mean and
/// (population) standard deviation of block `k`; block 0 has no predecessor
/// and is dropped, so the output has `len - block` entries and `out[j]`
/// corresponds to `series[j + block]`.
pub fn rolling_zscore(series: &[f64], block: usize) -> Result<Vec<f64>, DataError> {
    if block == 0 || series.len() < 2 * block {
        return Err(DataError::Length {
            needed: 2 * block.max(1),
            have: series.len(),
        });
    }
    let mut out = Vec::with_capacity(series.len() - block);
    let mut start = 0;
    while start + block < series.len() {
        let stats = &series[start..start + block];
        let mean = stats.iter().sum::<f64>() / block as f64;
        let var = stats.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / block as f64;
        let mut std = var.sqrt();
        if std < ZSCORE_EPS {
            log::debug!("flat normalization block at index {start}; using eps std");
            std = ZSCORE_EPS;
        }
        let next_end = (start + 2 * block).min(series.len());
        out.extend(
            series[start + block..next_end]
                .iter()
                .map(|x| (x - mean) / std),
        );
        start += block;
    }
    Ok(out)
}

/// Normalized features for every bar of a series.
///
/// Columns are, for each ticker in `[BTC, BTCUP, BTCDOWN]`, the channels
/// `[open, high, low, close, volume, return]`. The return of bar 0 is taken
/// as 0. Block boundaries are anchored at bar 0, so extending the series at
/// the end never changes existing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    block: usize,
    rows: usize,
    /// Row-major `rows x 18`; row `r` is bar `r + block`.
    data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(aligned: &AlignedSeries, block: usize) -> Result<Self, DataError> {
        let n = aligned.len();
        if block == 0 || n < 2 * block {
            return Err(DataError::Length {
                needed: 2 * block.max(1),
                have: n,
            });
        }
        let rows = n - block;
        let mut data = vec![0.0; rows * FEATURE_COLUMNS];
        for ticker in Ticker::ALL {
            let candles = &aligned.candles[ticker.index()];
            let mut ret = Vec::with_capacity(n);
            ret.push(0.0);
            ret.extend_from_slice(&aligned.returns[ticker.index()]);
            let raw: [Vec<f64>; CHANNELS] = [
                candles.iter().map(|c| c.open).collect(),
                candles.iter().map(|c| c.high).collect(),
                candles.iter().map(|c| c.low).collect(),
                candles.iter().map(|c| c.close).collect(),
                candles.iter().map(|c| c.volume).collect(),
                ret,
            ];
            for (ch, series) in raw.iter().enumerate() {
                let z = rolling_zscore(series, block)?;
                let col = ticker.index() * CHANNELS + ch;
                for (r, v) in z.into_iter().enumerate() {
                    data[r * FEATURE_COLUMNS + col] = v;
                }
            }
        }
        Ok(Self { block, rows, data })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// First bar index with a normalized row.
    pub fn first_bar(&self) -> usize {
        self.block
    }

    /// Earliest anchor bar for a window of `lookback` rows.
    pub fn first_anchor(&self, lookback: usize) -> usize {
        self.block + lookback - 1
    }

    pub fn row(&self, bar: usize) -> &[f64] {
        let r = bar - self.block;
        &self.data[r * FEATURE_COLUMNS..(r + 1) * FEATURE_COLUMNS]
    }

    /// The `lookback` rows ending at bar `anchor` (oldest first), contiguous.
    pub fn window_slice(&self, anchor: usize, lookback: usize) -> Result<&[f64], DataError> {
        if lookback == 0 || anchor + 1 < self.block + lookback || anchor >= self.block + self.rows {
            return Err(DataError::InsufficientHistory {
                needed: self.block + lookback,
                have: anchor + 1,
            });
        }
        let first = anchor + 1 - lookback - self.block;
        Ok(&self.data[first * FEATURE_COLUMNS..(anchor + 1 - self.block) * FEATURE_COLUMNS])
    }

    pub fn window(&self, anchor: usize, lookback: usize) -> Result<FeatureWindow, DataError> {
        Ok(FeatureWindow {
            rows: lookback,
            data: self.window_slice(anchor, lookback)?.to_vec(),
            anchor,
        })
    }
}

/// `rows x 18` normalized input, oldest row first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub rows: usize,
    pub data: Vec<f64>,
    /// Bar index of the most recent row.
    pub anchor: usize,
}

impl FeatureWindow {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * FEATURE_COLUMNS + col]
    }
}

/// Feature window ending with the bar that opens at `t`.
pub fn build_features(
    aligned: &AlignedSeries,
    t: DateTime<Utc>,
    lookback: usize,
    block: usize,
) -> Result<FeatureWindow, DataError> {
    let anchor = aligned
        .index_of(t)
        .ok_or_else(|| DataError::Range(format!("{t} is not in the series")))?;
    if anchor + 1 < lookback + block {
        return Err(DataError::InsufficientHistory {
            needed: lookback + block,
            have: anchor + 1,
        });
    }
    // only bars up to the anchor can influence the window
    let table = FeatureTable::new(&aligned.slice(0..anchor + 1), block)?;
    table.window(anchor, lookback)
}
