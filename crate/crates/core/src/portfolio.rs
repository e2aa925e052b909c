//! Two-asset portfolio accounting with trading and management fees.
//!
//! Index 0 is asset A (BTCUP in this crate), index 1 is asset B (BTCDOWN).
//! The portfolio holds no cash: every reallocation sells exactly one asset
//! and spends the proceeds on the other, which gives the trading-fee
//! shrinkage factor a closed form.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Pair = [f64; 2];

const SECONDS_PER_DAY: i64 = 86_400;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortfolioError {
    #[error("weights {0:?} violate the long-only/budget constraints")]
    InvalidWeights(Pair),
    #[error("prices must be positive and finite, got {0:?}")]
    InvalidPrice(Pair),
    #[error("fee rate {0} outside [0, 1)")]
    InvalidFee(f64),
    #[error("shrinkage denominator {0} is not positive")]
    Degenerate(f64),
    #[error("iterative shrinkage did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("new time {new} is not after {prev}")]
    TimeOrder {
        prev: DateTime<Utc>,
        new: DateTime<Utc>,
    },
}

/// Trading fee `c` (charged on both legs) and daily management fee `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeeSchedule {
    pub trading_fee: f64,
    pub management_fee: f64,
    /// UTC hour at which the management fee is charged.
    #[serde(default)]
    pub management_hour: u32,
}

impl FeeSchedule {
    pub const fn none() -> Self {
        Self {
            trading_fee: 0.0,
            management_fee: 0.0,
            management_hour: 0,
        }
    }

    /// Binance leveraged-token schedule: 0.075% per trade, 0.01% per day.
    pub const fn blvt() -> Self {
        Self {
            trading_fee: 0.00075,
            management_fee: 0.0001,
            management_hour: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PortfolioError> {
        for rate in [self.trading_fee, self.management_fee] {
            if !(0.0..1.0).contains(&rate) {
                return Err(PortfolioError::InvalidFee(rate));
            }
        }
        if self.management_hour > 23 {
            return Err(PortfolioError::InvalidFee(self.management_hour as f64));
        }
        Ok(())
    }

    pub fn is_free(&self) -> bool {
        self.trading_fee == 0.0 && self.management_fee == 0.0
    }

    /// Multiplier `(1 - m)^k` for the management fee over `(prev, new]`.
    pub fn management_factor(&self, prev: DateTime<Utc>, new: DateTime<Utc>) -> f64 {
        if self.management_fee == 0.0 {
            return 1.0;
        }
        let k = management_crossings(prev, new, self.management_hour);
        (1.0 - self.management_fee).powi(k as i32)
    }
}

/// The two fee settings used in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeeScheme {
    #[serde(alias = "nofee", alias = "no_fee")]
    None,
    Fee,
}

impl FeeScheme {
    pub const ALL: [FeeScheme; 2] = [FeeScheme::None, FeeScheme::Fee];

    pub fn schedule(self) -> FeeSchedule {
        match self {
            FeeScheme::None => FeeSchedule::none(),
            FeeScheme::Fee => FeeSchedule::blvt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeeScheme::None => "none",
            FeeScheme::Fee => "fee",
        }
    }
}

impl std::fmt::Display for FeeScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeeScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nofee" | "no_fee" | "no-fee" => Ok(FeeScheme::None),
            "fee" | "fees" | "blvt" => Ok(FeeScheme::Fee),
            other => Err(format!(
                "unknown fee scheme `{other}` (expected none or fee)"
            )),
        }
    }
}

/// Number of `hour:00` UTC instants in the half-open interval `(prev, new]`.
pub fn management_crossings(prev: DateTime<Utc>, new: DateTime<Utc>, hour: u32) -> i64 {
    let offset = hour as i64 * 3600;
    let day = |t: DateTime<Utc>| (t.timestamp() - offset).div_euclid(SECONDS_PER_DAY);
    (day(new) - day(prev)).max(0)
}

pub fn validate_weights(w: Pair) -> Result<(), PortfolioError> {
    let ok =
        w.iter().all(|x| x.is_finite() && *x >= 0.0) && (w[0] + w[1] - 1.0).abs() <= WEIGHT_TOL;
    if ok {
        Ok(())
    } else {
        Err(PortfolioError::InvalidWeights(w))
    }
}

fn validate_prices(y: Pair) -> Result<(), PortfolioError> {
    if y.iter().all(|p| p.is_finite() && *p > 0.0) {
        Ok(())
    } else {
        Err(PortfolioError::InvalidPrice(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub weights: Pair,
    pub value: f64,
    pub prices: Pair,
    pub volumes: Pair,
    pub time: DateTime<Utc>,
}

impl PortfolioState {
    /// A position of `value` split by `weights` at `prices`, with no fee.
    pub fn new(
        value: f64,
        weights: Pair,
        prices: Pair,
        time: DateTime<Utc>,
    ) -> Result<Self, PortfolioError> {
        validate_weights(weights)?;
        validate_prices(prices)?;
        Ok(Self {
            weights,
            value,
            prices,
            volumes: [
                value * weights[0] / prices[0],
                value * weights[1] / prices[1],
            ],
            time,
        })
    }

    /// Buy into `weights` from `cash`, paying the buy-side trading fee.
    ///
    /// Returns the state and the entry return `(1 - c) - 1`.
    pub fn enter(
        cash: f64,
        weights: Pair,
        prices: Pair,
        time: DateTime<Utc>,
        fees: &FeeSchedule,
    ) -> Result<(Self, f64), PortfolioError> {
        fees.validate()?;
        let state = Self::new(cash * (1.0 - fees.trading_fee), weights, prices, time)?;
        Ok((state, -fees.trading_fee))
    }
}

/// Portfolio after prices move but before any trade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntermediateState {
    pub value_prime: f64,
    pub weights_prime: Pair,
    pub volumes: Pair,
}

pub fn apply_price_move(
    state: &PortfolioState,
    new_prices: Pair,
) -> Result<IntermediateState, PortfolioError> {
    validate_prices(new_prices)?;
    let a = [
        new_prices[0] * state.volumes[0],
        new_prices[1] * state.volumes[1],
    ];
    let value_prime = a[0] + a[1];
    Ok(IntermediateState {
        value_prime,
        weights_prime: [a[0] / value_prime, a[1] / value_prime],
        volumes: state.volumes,
    })
}

/// Closed-form shrinkage factor μ for moving from `w_prime` to `w_target`
/// at trading fee `c`.
///
/// The sold asset is the one whose weight falls (`w'_A > w_A` sells A).
pub fn shrinkage(w_prime: Pair, w_target: Pair, c: f64) -> Result<f64, PortfolioError> {
    if !(0.0..1.0).contains(&c) {
        return Err(PortfolioError::InvalidFee(c));
    }
    if c == 0.0 || w_prime == w_target {
        return Ok(1.0);
    }
    let (sell, buy) = if w_prime[0] > w_target[0] {
        (0, 1)
    } else {
        (1, 0)
    };
    let keep = 1.0 - c;
    let num = keep + c * (w_prime[buy] - w_prime[sell] * keep);
    let den = keep + c * (w_target[buy] - w_target[sell] * keep);
    if den <= 0.0 {
        return Err(PortfolioError::Degenerate(den));
    }
    Ok(num / den)
}

/// Reference solver for the shrinkage factor, valid for any number of
/// assets without cash.
///
/// Iterates the fee balance `1 - μ = c·Σ sold + c/(1-c)·Σ bought` where the
/// sold/bought amounts are `(w'_i - μ w_i)^+` and `(μ w_i - w'_i)^+`. It does
/// not assume which asset is sold, so it checks [`shrinkage`] independently.
pub fn shrinkage_iterative_oracle(
    w_prime: &[f64],
    w_target: &[f64],
    c: f64,
) -> Result<f64, PortfolioError> {
    const MAX_ITER: usize = 10_000;
    if !(0.0..1.0).contains(&c) {
        return Err(PortfolioError::InvalidFee(c));
    }
    let mut mu = 1.0;
    for _ in 0..MAX_ITER {
        let mut sold = 0.0;
        let mut bought = 0.0;
        for (wp, w) in w_prime.iter().zip(w_target) {
            let d = wp - mu * w;
            if d > 0.0 {
                sold += d;
            } else {
                bought -= d;
            }
        }
        let next = 1.0 - c * sold - c / (1.0 - c) * bought;
        if (next - mu).abs() < 1e-14 {
            return Ok(next);
        }
        mu = next;
    }
    Err(PortfolioError::NonConvergence(MAX_ITER))
}

/// Management fee over `(prev_time, new_time]`.
pub fn apply_management_fee(
    value: f64,
    prev_time: DateTime<Utc>,
    new_time: DateTime<Utc>,
    schedule: &FeeSchedule,
) -> Result<f64, PortfolioError> {
    if new_time <= prev_time {
        return Err(PortfolioError::TimeOrder {
            prev: prev_time,
            new: new_time,
        });
    }
    Ok(value * schedule.management_factor(prev_time, new_time))
}

/// Detailed outcome of one period close.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reallocation {
    pub state: PortfolioState,
    pub period_return: f64,
    pub mu: f64,
    pub intermediate: IntermediateState,
}

/// Price move, trade to `w_target` and management fee for the period ending
/// at `new_time`. Returns the new state and the period return `R_t`.
pub fn reallocate(
    state: &PortfolioState,
    w_target: Pair,
    new_prices: Pair,
    new_time: DateTime<Utc>,
    schedule: &FeeSchedule,
) -> Result<(PortfolioState, f64), PortfolioError> {
    let r = reallocate_detailed(state, w_target, new_prices, new_time, schedule)?;
    Ok((r.state, r.period_return))
}

pub fn reallocate_detailed(
    state: &PortfolioState,
    w_target: Pair,
    new_prices: Pair,
    new_time: DateTime<Utc>,
    schedule: &FeeSchedule,
) -> Result<Reallocation, PortfolioError> {
    validate_weights(w_target)?;
    schedule.validate()?;
    let inter = apply_price_move(state, new_prices)?;
    let mu = shrinkage(inter.weights_prime, w_target, schedule.trading_fee)?;
    let value = apply_management_fee(mu * inter.value_prime, state.time, new_time, schedule)?;
    let next = PortfolioState {
        weights: w_target,
        value,
        prices: new_prices,
        volumes: [
            value * w_target[0] / new_prices[0],
            value * w_target[1] / new_prices[1],
        ],
        time: new_time,
    };
    Ok(Reallocation {
        state: next,
        period_return: value / state.value - 1.0,
        mu,
        intermediate: inter,
    })
}
