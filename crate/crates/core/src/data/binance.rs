use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::fetch::{FetchError, KlineSource};

/// Blocking client for the public spot klines endpoint.
///
/// Requests are serialized through a mutex and spaced by `min_interval`.
pub struct BinanceClient {
    base_url: String,
    agent: ureq::Agent,
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl BinanceClient {
    pub const DEFAULT_BASE: &'static str = "https://api.binance.com";

    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            base_url: base_url.into(),
            agent,
            min_interval: Duration::from_millis(250),
            last: Mutex::new(None),
        }
    }
}

impl Default for BinanceClient {
    fn default() -> Self {
        Self::new(Self::DEFAULT_BASE)
    }
}

impl KlineSource for BinanceClient {
    fn fetch_page(
        &self,
        symbol: &str,
        start_ms: i64,
        end_ms: i64,
        limit: usize,
    ) -> Result<String, FetchError> {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let wait = self.min_interval.saturating_sub(prev.elapsed());
            std::thread::sleep(wait);
        }
        let url = format!("{}/api/v3/klines", self.base_url.trim_end_matches('/'));
        let res = self
            .agent
            .get(&url)
            .query("symbol", symbol)
            .query("interval", "1h")
            .query("startTime", start_ms.to_string())
            .query("endTime", end_ms.to_string())
            .query("limit", limit.to_string())
            .call();
        *last = Some(Instant::now());
        match res {
            Ok(mut resp) => resp
                .body_mut()
                .read_to_string()
                .map_err(|e| FetchError::Network(e.to_string())),
            Err(ureq::Error::StatusCode(429)) | Err(ureq::Error::StatusCode(418)) => {
                Err(FetchError::RateLimited)
            }
            Err(ureq::Error::StatusCode(400)) => Err(FetchError::UnknownSymbol(symbol.to_string())),
            Err(e) => Err(FetchError::Network(e.to_string())),
        }
    }
}
