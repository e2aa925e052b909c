//! Seeded synthetic market: a mean-reverting (OU) underlying in log price
//! and a pair of leverage-mimicking tokens rebalanced every hour.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{align, AlignedSeries, Candle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub hours: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
    /// Hourly mean-reversion speed of the underlying's log price.
    pub theta: f64,
    /// Hourly volatility of the underlying's log price.
    pub sigma: f64,
    pub leverage: f64,
    /// Per-token tracking noise, as a fraction of the token's hourly volatility.
    pub tracking_noise: f64,
    pub btc0: f64,
    pub up0: f64,
    pub down0: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            hours: 5000,
            seed: 7,
            start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
            theta: 0.1,
            sigma: 0.006,
            leverage: 3.0,
            tracking_noise: 0.1,
            btc0: 30_000.0,
            up0: 50.0,
            down0: 0.01,
        }
    }
}

/// BTC, UP and DOWN candles on one hourly grid.
pub fn generate_candles(cfg: &SyntheticConfig) -> [Vec<Candle>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shock = Normal::new(0.0, 1.0).expect("unit normal");
    let mean_log = cfg.btc0.ln();
    let token_vol = cfg.leverage * cfg.sigma;

    let mut log_btc = mean_log;
    let mut close = [cfg.btc0, cfg.up0, cfg.down0];
    let mut out: [Vec<Candle>; 3] = Default::default();
    for h in 0..cfg.hours {
        let t = cfg.start + Duration::hours(h as i64);
        let open = close;
        if h > 0 {
            let next =
                log_btc + cfg.theta * (mean_log - log_btc) + cfg.sigma * shock.sample(&mut rng);
            let r = (next - log_btc).exp() - 1.0;
            log_btc = next;
            let noise_u = cfg.tracking_noise * token_vol * shock.sample(&mut rng);
            let noise_d = cfg.tracking_noise * token_vol * shock.sample(&mut rng);
            close = [
                log_btc.exp(),
                open[1] * (1.0 + cfg.leverage * r + noise_u).max(0.05),
                open[2] * (1.0 - cfg.leverage * r + noise_d).max(0.05),
            ];
        }
        for k in 0..3 {
            let wick = 0.3 * cfg.sigma * if k == 0 { 1.0 } else { cfg.leverage };
            let hi = open[k].max(close[k]) * (1.0 + (wick * shock.sample(&mut rng)).abs());
            let lo = open[k].min(close[k]) * (1.0 - (wick * shock.sample(&mut rng)).abs().min(0.5));
            let volume = 1000.0 * (0.3 * shock.sample(&mut rng)).exp();
            out[k].push(Candle {
                open_time: t,
                open: open[k],
                high: hi,
                low: lo,
                close: close[k],
                volume,
            });
        }
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> AlignedSeries {
    let [btc, up, down] = generate_candles(cfg);
    align(&btc, &up, &down, false).expect("synthetic candles are valid and gap-free")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Ticker;
    use crate::neutral::estimate_beta;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SyntheticConfig {
            hours: 500,
            ..Default::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert_eq!(a.len(), 500);
        for k in 0..3 {
            assert!(a.candles[k].iter().all(|c| c.validate().is_ok()));
        }
    }

    #[test]
    fn tokens_negatively_related() {
        let a = generate(&SyntheticConfig::default());
        let up = a.closes(Ticker::Up);
        let down = a.closes(Ticker::Down);
        let mut negative = 0;
        let windows = (48..a.len()).step_by(48).count();
        for end in (48..a.len()).step_by(48) {
            let est = estimate_beta(&up[..end], &down[..end], 48).unwrap();
            if est.beta < 0.0 {
                negative += 1;
            }
        }
        assert!(
            negative as f64 > 0.9 * windows as f64,
            "{negative}/{windows}"
        );
    }
}
