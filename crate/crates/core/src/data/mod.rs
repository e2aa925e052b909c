//! Hourly OHLCV ingestion, alignment across BTC / BTCUP / BTCDOWN, feature
//! windows and walk-forward splits.

#[cfg(feature = "http")]
mod binance;
mod features;
mod fetch;
pub mod synthetic;

use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "http")]
pub use binance::BinanceClient;
pub use features::{
    build_features, rolling_zscore, FeatureTable, FeatureWindow, CHANNELS, FEATURE_COLUMNS,
    ZSCORE_EPS,
};
pub use fetch::{cache_path, fetch_cached, fetch_klines, FetchError, KlineSource, RetryPolicy};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: timestamp {time} does not follow the previous row")]
    Order { line: usize, time: DateTime<Utc> },
    #[error("out of range: {0}")]
    Range(String),
    #[error("{} missing hour(s), first {:?}", missing.len(), missing.first())]
    Gap { missing: Vec<DateTime<Utc>> },
    #[error("series of length {have} is shorter than {needed}")]
    Length { needed: usize, have: usize },
    #[error("need {needed} periods of history, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("requested time range is empty")]
    EmptyRange,
    #[error(transparent)]
    Fetch(#[from] FetchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ticker {
    Btc,
    Up,
    Down,
}

impl Ticker {
    pub const ALL: [Ticker; 3] = [Ticker::Btc, Ticker::Up, Ticker::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn default_symbol(self) -> &'static str {
        match self {
            Ticker::Btc => "BTCUSDT",
            Ticker::Up => "BTCUPUSDT",
            Ticker::Down => "BTCDOWNUSDT",
        }
    }
}

/// One hourly bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candle {
    pub open_time: DateTime<Utc>,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Candle {
    pub fn validate(&self) -> Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(format!("non-positive price in {self:?}"));
        }
        if !(self.volume.is_finite() && self.volume >= 0.0) {
            return Err(format!("negative volume {}", self.volume));
        }
        let lo = self.open.min(self.close);
        let hi = self.open.max(self.close);
        if !(self.low <= lo && hi <= self.high) {
            return Err(format!(
                "low {} / high {} do not bracket open {} and close {}",
                self.low, self.high, self.open, self.close
            ));
        }
        Ok(())
    }

    /// Flat bar at `price` with zero volume, used for forward-filling.
    pub fn flat(open_time: DateTime<Utc>, price: f64) -> Self {
        Self {
            open_time,
            open: price,
            high: price,
            low: price,
            close: price,
            volume: 0.0,
        }
    }
}

pub(crate) fn is_hour_aligned(t: DateTime<Utc>) -> bool {
    t.minute() == 0 && t.second() == 0 && t.timestamp_subsec_nanos() == 0
}

/// Parse an ISO-8601 UTC timestamp (with or without seconds) or epoch millis.
pub fn parse_time(s: &str) -> Result<DateTime<Utc>, String> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let body = s.strip_suffix('Z').unwrap_or(s);
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(body, fmt) {
            return Ok(Utc.from_utc_datetime(&t));
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(body, "%Y-%m-%d") {
        return Ok(Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight")));
    }
    if let Ok(ms) = s.parse::<i64>() {
        if let Some(t) = Utc.timestamp_millis_opt(ms).single() {
            return Ok(t);
        }
    }
    Err(format!("unrecognised timestamp `{s}`"))
}

pub fn format_time(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Validate a candle sequence: each bar valid, hour-aligned, strictly
/// increasing. `line_offset` maps index to a 1-based line for messages.
pub(crate) fn validate_candles(candles: &[Candle], line_offset: usize) -> Result<(), DataError> {
    for (i, c) in candles.iter().enumerate() {
        let line = i + line_offset;
        c.validate().map_err(DataError::Range)?;
        if !is_hour_aligned(c.open_time) {
            return Err(DataError::Parse {
                line,
                msg: format!("{} is not hour-aligned", c.open_time),
            });
        }
        if i > 0 && c.open_time <= candles[i - 1].open_time {
            return Err(DataError::Order {
                line,
                time: c.open_time,
            });
        }
    }
    Ok(())
}

/// Read `open_time,open,high,low,close,volume` rows.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<Candle>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_candles(file)
}

pub fn read_candles(reader: impl std::io::Read) -> Result<Vec<Candle>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() < 6 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected 6 fields, found {}", rec.len()),
            });
        }
        let open_time = parse_time(&rec[0]).map_err(|msg| DataError::Parse { line, msg })?;
        let mut num = [0.0; 5];
        for (k, slot) in num.iter_mut().enumerate() {
            *slot = rec[k + 1].parse::<f64>().map_err(|e| DataError::Parse {
                line,
                msg: format!("field {}: {e}", k + 2),
            })?;
        }
        out.push(Candle {
            open_time,
            open: num[0],
            high: num[1],
            low: num[2],
            close: num[3],
            volume: num[4],
        });
    }
    validate_candles(&out, 2)?;
    Ok(out)
}

pub fn write_csv(path: impl AsRef<Path>, candles: &[Candle]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut buf = Vec::new();
    write_candles(&mut buf, candles).map_err(io_err)?;
    std::fs::write(path, buf).map_err(io_err)
}

pub fn write_candles(mut w: impl std::io::Write, candles: &[Candle]) -> std::io::Result<()> {
    writeln!(w, "open_time,open,high,low,close,volume")?;
    for c in candles {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            format_time(c.open_time),
            c.open,
            c.high,
            c.low,
            c.close,
            c.volume
        )?;
    }
    Ok(())
}

/// Three tickers on one hourly grid.
///
/// Index `i` refers to the bar opening at `timestamps[i]`; its close price is
/// the price "at" decision time `timestamps[i] + 1h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSeries {
    pub timestamps: Vec<DateTime<Utc>>,
    /// Indexed by [`Ticker::index`].
    pub candles: [Vec<Candle>; 3],
    /// Simple close-to-close returns; `returns[k][j]` is the return of bar `j + 1`.
    pub returns: [Vec<f64>; 3],
    /// Hours that were forward-filled during alignment.
    #[serde(default)]
    pub filled: Vec<DateTime<Utc>>,
}

fn simple_returns(candles: &[Candle]) -> Vec<f64> {
    candles
        .windows(2)
        .map(|w| w[1].close / w[0].close - 1.0)
        .collect()
}

impl AlignedSeries {
    /// Build from three candle arrays that already share the same grid.
    pub fn from_candles(
        btc: Vec<Candle>,
        up: Vec<Candle>,
        down: Vec<Candle>,
    ) -> Result<Self, DataError> {
        align(&btc, &up, &down, false)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn closes(&self, ticker: Ticker) -> Vec<f64> {
        self.candles[ticker.index()]
            .iter()
            .map(|c| c.close)
            .collect()
    }

    pub fn close(&self, ticker: Ticker, i: usize) -> f64 {
        self.candles[ticker.index()][i].close
    }

    /// (BTCUP, BTCDOWN) closes at bar `i`.
    pub fn pair_prices(&self, i: usize) -> [f64; 2] {
        [self.close(Ticker::Up, i), self.close(Ticker::Down, i)]
    }

    /// Return of bar `i` (`i >= 1`).
    pub fn return_at(&self, ticker: Ticker, i: usize) -> f64 {
        self.returns[ticker.index()][i - 1]
    }

    /// Time at which bar `i` closes.
    pub fn decision_time(&self, i: usize) -> DateTime<Utc> {
        self.timestamps[i] + Duration::hours(1)
    }

    pub fn index_of(&self, open_time: DateTime<Utc>) -> Option<usize> {
        self.timestamps.binary_search(&open_time).ok()
    }

    /// Bars with `start <= open_time <= end_inclusive`.
    pub fn range_between(
        &self,
        start: DateTime<Utc>,
        end_inclusive: DateTime<Utc>,
    ) -> Range<usize> {
        let lo = self.timestamps.partition_point(|t| *t < start);
        let hi = self.timestamps.partition_point(|t| *t <= end_inclusive);
        lo..hi.max(lo)
    }

    /// SHA-256 over every timestamp and OHLCV value, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (i, t) in self.timestamps.iter().enumerate() {
            h.update(t.timestamp().to_le_bytes());
            for series in &self.candles {
                let c = &series[i];
                for v in [c.open, c.high, c.low, c.close, c.volume] {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn slice(&self, range: Range<usize>) -> AlignedSeries {
        let candles = [
            self.candles[0][range.clone()].to_vec(),
            self.candles[1][range.clone()].to_vec(),
            self.candles[2][range.clone()].to_vec(),
        ];
        let returns = [
            simple_returns(&candles[0]),
            simple_returns(&candles[1]),
            simple_returns(&candles[2]),
        ];
        let timestamps = self.timestamps[range].to_vec();
        let (first, last) = (timestamps.first().copied(), timestamps.last().copied());
        let filled = self
            .filled
            .iter()
            .copied()
            .filter(|t| Some(*t) >= first && Some(*t) <= last)
            .collect();
        AlignedSeries {
            timestamps,
            candles,
            returns,
            filled,
        }
    }
}

/// Put the three tickers on their common hourly span.
///
/// Missing interior hours are an error unless `gap_fill` is set, in which
/// case the previous bar's close is carried forward as a flat zero-volume
/// bar and the hour is recorded in [`AlignedSeries::filled`].
pub fn align(
    btc: &[Candle],
    up: &[Candle],
    down: &[Candle],
    gap_fill: bool,
) -> Result<AlignedSeries, DataError> {
    let inputs = [btc, up, down];
    for c in inputs {
        validate_candles(c, 1)?;
    }
    if inputs.iter().any(|c| c.is_empty()) {
        return Err(DataError::EmptyRange);
    }
    let start = inputs
        .iter()
        .map(|c| c[0].open_time)
        .max()
        .expect("three inputs");
    let end = inputs
        .iter()
        .map(|c| c[c.len() - 1].open_time)
        .min()
        .expect("three inputs");
    if end < start {
        return Err(DataError::Range("tickers do not overlap".into()));
    }
    let n = ((end - start).num_hours() + 1) as usize;
    let grid: Vec<DateTime<Utc>> = (0..n).map(|h| start + Duration::hours(h as i64)).collect();

    let mut candles: [Vec<Candle>; 3] = Default::default();
    let mut missing = Vec::new();
    for (k, src) in inputs.iter().enumerate() {
        let mut j = src.partition_point(|c| c.open_time < start);
        let out = &mut candles[k];
        for &t in &grid {
            if j < src.len() && src[j].open_time == t {
                out.push(src[j]);
                j += 1;
            } else {
                // every input begins at or before `start`, so some earlier bar exists
                let prev = match out.last() {
                    Some(c) => c.close,
                    None => src[j - 1].close,
                };
                out.push(Candle::flat(t, prev));
                missing.push(t);
            }
        }
    }
    missing.sort();
    missing.dedup();
    if !missing.is_empty() && !gap_fill {
        return Err(DataError::Gap { missing });
    }
    if !missing.is_empty() {
        log::warn!("forward-filled {} hour(s) during alignment", missing.len());
    }
    let returns = [
        simple_returns(&candles[0]),
        simple_returns(&candles[1]),
        simple_returns(&candles[2]),
    ];
    Ok(AlignedSeries {
        timestamps: grid,
        candles,
        returns,
        filled: missing,
    })
}

/// Train / test date ranges, both inclusive of their end hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_start: DateTime<Utc>,
    pub train_end: DateTime<Utc>,
    pub test_start: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.train_end < self.train_start || self.test_end < self.test_start {
            return Err(DataError::Range(format!("inverted range in {self:?}")));
        }
        if self.test_start <= self.train_end {
            return Err(DataError::Range(format!(
                "test start {} is not after train end {}",
                self.test_start, self.train_end
            )));
        }
        Ok(())
    }

    /// The three walk-forward periods used for the BLVT study.
    pub fn blvt_periods() -> [SplitSpec; 3] {
        let h = |y, m, d, hh| Utc.with_ymd_and_hms(y, m, d, hh, 0, 0).unwrap();
        let start = h(2020, 5, 15, 0);
        [
            SplitSpec {
                train_start: start,
                train_end: h(2021, 7, 3, 23),
                test_start: h(2021, 7, 4, 0),
                test_end: h(2021, 9, 1, 23),
            },
            SplitSpec {
                train_start: start,
                train_end: h(2021, 9, 1, 23),
                test_start: h(2021, 9, 2, 0),
                test_end: h(2021, 10, 31, 23),
            },
            SplitSpec {
                train_start: start,
                train_end: h(2021, 10, 31, 23),
                test_start: h(2021, 11, 1, 0),
                test_end: h(2021, 12, 30, 23),
            },
        ]
    }

    pub fn train_range(&self, aligned: &AlignedSeries) -> Result<Range<usize>, DataError> {
        self.range_in(aligned, self.train_start, self.train_end)
    }

    pub fn test_range(&self, aligned: &AlignedSeries) -> Result<Range<usize>, DataError> {
        self.range_in(aligned, self.test_start, self.test_end)
    }

    fn range_in(
        &self,
        aligned: &AlignedSeries,
        a: DateTime<Utc>,
        b: DateTime<Utc>,
    ) -> Result<Range<usize>, DataError> {
        self.validate()?;
        let (first, last) = match (aligned.timestamps.first(), aligned.timestamps.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(DataError::EmptyRange),
        };
        if a < first || b > last {
            return Err(DataError::Range(format!(
                "{a} .. {b} is outside the dataset span {first} .. {last}"
            )));
        }
        let r = aligned.range_between(a, b);
        if r.is_empty() {
            return Err(DataError::EmptyRange);
        }
        Ok(r)
    }
}

/// Disjoint train and test subsets for one walk-forward period.
pub fn split(
    aligned: &AlignedSeries,
    spec: &SplitSpec,
) -> Result<(AlignedSeries, AlignedSeries), DataError> {
    let train = spec.train_range(aligned)?;
    let test = spec.test_range(aligned)?;
    Ok((aligned.slice(train), aligned.slice(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 5, 15, 0, 0, 0).unwrap() + Duration::hours(h)
    }

    fn bars(n: usize, skip: Option<usize>) -> Vec<Candle> {
        (0..n)
            .filter(|i| Some(*i) != skip)
            .map(|i| Candle::flat(t(i as i64), 100.0 + i as f64))
            .collect()
    }

    #[test]
    fn csv_row_maps_fields() {
        let text =
            "open_time,open,high,low,close,volume\n2020-05-15T00:00Z,9800,9850,9790,9820,12.5\n";
        let c = read_candles(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].close, 9820.0);
        assert_eq!(c[0].volume, 12.5);
        assert_eq!(c[0].open_time, t(0));
    }

    #[test]
    fn csv_errors() {
        let dup = "open_time,open,high,low,close,volume\n\
                   2020-05-15T00:00Z,1,1,1,1,1\n2020-05-15T00:00Z,1,1,1,1,1\n";
        assert!(matches!(
            read_candles(dup.as_bytes()),
            Err(DataError::Order { line: 3, .. })
        ));
        let bad = "open_time,open,high,low,close,volume\n2020-05-15T00:00Z,10,9,11,10,1\n";
        assert!(matches!(
            read_candles(bad.as_bytes()),
            Err(DataError::Range(_))
        ));
        let neg = "open_time,open,high,low,close,volume\n2020-05-15T00:00Z,-1,1,-1,1,1\n";
        assert!(matches!(
            read_candles(neg.as_bytes()),
            Err(DataError::Range(_))
        ));
        let junk = "open_time,open,high,low,close,volume\n2020-05-15T00:00Z,x,1,1,1,1\n";
        assert!(matches!(
            read_candles(junk.as_bytes()),
            Err(DataError::Parse { line: 2, .. })
        ));
        let off = "open_time,open,high,low,close,volume\n2020-05-15T00:30Z,1,1,1,1,1\n";
        assert!(matches!(
            read_candles(off.as_bytes()),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let c = bars(5, None);
        write_csv(&path, &c).unwrap();
        assert_eq!(ingest_csv(&path).unwrap(), c);
    }

    #[test]
    fn timestamp_formats() {
        assert_eq!(parse_time("2020-05-15T00:00:00Z").unwrap(), t(0));
        assert_eq!(parse_time("2020-05-15 01:00").unwrap(), t(1));
        assert_eq!(parse_time("1589500800000").unwrap(), t(0));
        assert!(parse_time("2021-30-12 23:00").is_err());
    }

    #[test]
    fn align_identical_grids() {
        let a = align(&bars(100, None), &bars(100, None), &bars(100, None), false).unwrap();
        assert_eq!(a.len(), 100);
        for k in 0..3 {
            assert_eq!(a.returns[k].len(), 99);
        }
    }

    #[test]
    fn align_intersects_span() {
        let long = bars(110, None);
        let late: Vec<Candle> = bars(110, None).into_iter().skip(5).collect();
        let a = align(&long, &late, &bars(100, None), false).unwrap();
        assert_eq!(a.timestamps.first(), Some(&t(5)));
        assert_eq!(a.timestamps.last(), Some(&t(99)));
    }

    #[test]
    fn align_gap_handling() {
        let up = bars(100, Some(50));
        let err = align(&bars(100, None), &up, &bars(100, None), false).unwrap_err();
        match err {
            DataError::Gap { missing } => assert_eq!(missing, vec![t(50)]),
            e => panic!("unexpected {e}"),
        }
        let a = align(&bars(100, None), &up, &bars(100, None), true).unwrap();
        assert_eq!(a.filled, vec![t(50)]);
        assert_eq!(a.close(Ticker::Up, 50), a.close(Ticker::Up, 49));
    }

    #[test]
    fn return_by_hand() {
        let mut c = bars(2, None);
        c[0] = Candle::flat(t(0), 100.0);
        c[1] = Candle::flat(t(1), 110.0);
        let a = align(&c, &c, &c, false).unwrap();
        assert!((a.return_at(Ticker::Btc, 1) - 0.10).abs() < 1e-15);
    }

    #[test]
    fn blvt_periods_walk_forward() {
        let p = SplitSpec::blvt_periods();
        for s in &p {
            s.validate().unwrap();
            let days = (s.test_end - s.test_start).num_days();
            assert!((57..=61).contains(&days), "{days}");
        }
        assert_eq!(
            p[0].train_end,
            Utc.with_ymd_and_hms(2021, 7, 3, 23, 0, 0).unwrap()
        );
        assert_eq!(
            p[2].test_end,
            Utc.with_ymd_and_hms(2021, 12, 30, 23, 0, 0).unwrap()
        );
        for w in p.windows(2) {
            assert_eq!(w[1].train_start, w[0].train_start);
            assert_eq!(w[1].train_end, w[0].test_end);
            assert_eq!(w[1].test_start, w[0].test_end + Duration::hours(1));
        }
    }

    #[test]
    fn split_disjoint_and_returns_commute() {
        let a = align(&bars(200, None), &bars(200, None), &bars(200, None), false).unwrap();
        let spec = SplitSpec {
            train_start: t(0),
            train_end: t(119),
            test_start: t(120),
            test_end: t(199),
        };
        let (train, test) = split(&a, &spec).unwrap();
        assert_eq!(train.len(), 120);
        assert_eq!(test.len(), 80);
        assert!(train.timestamps.last() < test.timestamps.first());
        for j in 1..test.len() {
            assert_eq!(
                test.return_at(Ticker::Up, j),
                a.return_at(Ticker::Up, 120 + j)
            );
        }
        let bad = SplitSpec {
            test_start: t(100),
            ..spec
        };
        assert!(matches!(split(&a, &bad), Err(DataError::Range(_))));
        let outside = SplitSpec {
            test_end: t(500),
            ..spec
        };
        assert!(matches!(split(&a, &outside), Err(DataError::Range(_))));
    }
}
