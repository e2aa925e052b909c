//! Paginated hourly kline download with a local CSV cache.

use std::path::{Path, PathBuf};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, TimeZone, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ingest_csv, validate_candles, write_csv, Candle, DataError};

/// Klines per request; the exchange maximum.
pub const PAGE_LIMIT: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FetchError {
    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited by the server")]
    RateLimited,
    #[error("rate limit persisted after {0} retries")]
    RateLimit(u32),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("malformed kline payload: {0}")]
    Payload(String),
}

/// One GET of the klines endpoint. Implementations return the raw JSON body.
pub trait KlineSource {
    fn fetch_page(
        &self,
        symbol: &str,
        start_ms: i64,
        end_ms: i64,
        limit: usize,
    ) -> Result<String, FetchError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: StdDuration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: StdDuration::from_millis(500),
        }
    }
}

fn get_with_retry(
    source: &dyn KlineSource,
    retry: &RetryPolicy,
    symbol: &str,
    start_ms: i64,
    end_ms: i64,
) -> Result<String, FetchError> {
    let mut attempt = 0;
    loop {
        match source.fetch_page(symbol, start_ms, end_ms, PAGE_LIMIT) {
            Err(FetchError::RateLimited) if attempt < retry.max_retries => {
                let delay = retry.base_delay * 2u32.pow(attempt);
                log::warn!("rate limited on {symbol}; retrying in {delay:?}");
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(FetchError::RateLimited) => return Err(FetchError::RateLimit(attempt)),
            other => return other,
        }
    }
}

fn num(v: &serde_json::Value) -> Result<f64, FetchError> {
    match v {
        serde_json::Value::String(s) => s
            .parse()
            .map_err(|e| FetchError::Payload(format!("{s}: {e}"))),
        serde_json::Value::Number(n) => {
            n.as_f64().ok_or_else(|| FetchError::Payload(n.to_string()))
        }
        other => Err(FetchError::Payload(other.to_string())),
    }
}

/// Parse the exchange's `[[openTime, "o", "h", "l", "c", "v", ...], ...]` body.
pub(crate) fn parse_klines(body: &str) -> Result<Vec<Candle>, FetchError> {
    let rows: Vec<Vec<serde_json::Value>> =
        serde_json::from_str(body).map_err(|e| FetchError::Payload(e.to_string()))?;
    rows.iter()
        .map(|row| {
            if row.len() < 6 {
                return Err(FetchError::Payload(format!("short row {row:?}")));
            }
            let ms = row[0]
                .as_i64()
                .ok_or_else(|| FetchError::Payload(format!("open time {}", row[0])))?;
            let open_time = Utc
                .timestamp_millis_opt(ms)
                .single()
                .ok_or_else(|| FetchError::Payload(format!("open time {ms}")))?;
            Ok(Candle {
                open_time,
                open: num(&row[1])?,
                high: num(&row[2])?,
                low: num(&row[3])?,
                close: num(&row[4])?,
                volume: num(&row[5])?,
            })
        })
        .collect()
}

/// All hourly candles with `start <= open_time < end`.
///
/// Fails with [`DataError::Gap`] when the server skips hours inside the range.
pub fn fetch_klines(
    source: &dyn KlineSource,
    retry: &RetryPolicy,
    symbol: &str,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<Vec<Candle>, DataError> {
    if end <= start {
        return Err(DataError::EmptyRange);
    }
    let mut out: Vec<Candle> = Vec::new();
    let mut cursor = start;
    while cursor < end {
        let body = get_with_retry(
            source,
            retry,
            symbol,
            cursor.timestamp_millis(),
            end.timestamp_millis() - 1,
        )?;
        let page = parse_klines(&body)?;
        let Some(last) = page.last() else { break };
        let next = last.open_time + Duration::hours(1);
        out.extend(
            page.into_iter()
                .filter(|c| c.open_time >= cursor && c.open_time < end),
        );
        if next <= cursor {
            break;
        }
        cursor = next;
    }
    validate_candles(&out, 1)?;
    let mut missing = Vec::new();
    let mut expected = start;
    let mut it = out.iter().peekable();
    while expected < end {
        if it.peek().map(|c| c.open_time) == Some(expected) {
            it.next();
        } else {
            missing.push(expected);
        }
        expected += Duration::hours(1);
    }
    if !missing.is_empty() {
        return Err(DataError::Gap { missing });
    }
    Ok(out)
}

/// `<dir>/<symbol>_1h.csv`
pub fn cache_path(dir: &Path, symbol: &str) -> PathBuf {
    dir.join(format!("{symbol}_1h.csv"))
}

fn digest_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".sha256");
    PathBuf::from(p)
}

fn file_digest(path: &Path) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    Some(hex::encode(Sha256::digest(&bytes)))
}

/// Fetch through the CSV cache. A cache file is reused when its recorded
/// digest matches and it covers `[start, end)`; otherwise the range is
/// downloaded and the cache rewritten. Returns the candles and whether the
/// network was used.
pub fn fetch_cached(
    source: &dyn KlineSource,
    retry: &RetryPolicy,
    dir: &Path,
    symbol: &str,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<(Vec<Candle>, bool), DataError> {
    let path = cache_path(dir, symbol);
    let recorded = std::fs::read_to_string(digest_path(&path)).ok();
    if let (Some(recorded), Some(actual)) = (recorded, file_digest(&path)) {
        if recorded.trim() == actual {
            let cached = ingest_csv(&path)?;
            let covers = cached.first().is_some_and(|c| c.open_time <= start)
                && cached
                    .last()
                    .is_some_and(|c| c.open_time >= end - Duration::hours(1));
            if covers {
                let hit: Vec<Candle> = cached
                    .into_iter()
                    .filter(|c| c.open_time >= start && c.open_time < end)
                    .collect();
                return Ok((hit, false));
            }
        }
    }
    let candles = fetch_klines(source, retry, symbol, start, end)?;
    write_csv(&path, &candles)?;
    let digest = file_digest(&path).unwrap_or_default();
    std::fs::write(digest_path(&path), digest).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok((candles, true))
}
