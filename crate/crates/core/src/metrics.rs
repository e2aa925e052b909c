//! Performance measures over a per-period return series.
//!
//! Sharpe is per period (hourly here), uses the Bessel-corrected standard
//! deviation and omits the risk-free rate. fAPV starts from a value of 1. MDD
//! is the usual running-peak drawdown on the value curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Volatility below this is treated as zero.
pub const MIN_VOLATILITY: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sharpe needs at least 2 returns, got {0}")]
    TooShort(usize),
    #[error("return series has zero volatility (std = {0:e})")]
    ZeroVolatility(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sharpe: f64,
    pub fapv: f64,
    pub mdd: f64,
}

/// Sample mean and Bessel-corrected standard deviation.
pub fn mean_std(returns: &[f64]) -> Result<(f64, f64), MetricsError> {
    let n = returns.len();
    if n < 2 {
        return Err(MetricsError::TooShort(n));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let ss: f64 = returns.iter().map(|r| (r - mean) * (r - mean)).sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

pub fn sharpe(returns: &[f64]) -> Result<f64, MetricsError> {
    let (mean, std) = mean_std(returns)?;
    if std < MIN_VOLATILITY {
        return Err(MetricsError::ZeroVolatility(std));
    }
    Ok(mean / std)
}

/// Final accumulated portfolio value, Π(1 + R_t). Empty series gives 1.
pub fn fapv(returns: &[f64]) -> f64 {
    returns.iter().fold(1.0, |acc, r| acc * (1.0 + r))
}

/// Maximum drawdown of a positive value curve, in [0, 1].
pub fn mdd(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        if v > peak {
            peak = v;
        }
        worst = worst.max((peak - v) / peak);
    }
    worst
}

/// Value curve starting at `initial`, one entry per return plus the start.
pub fn value_curve(initial: f64, returns: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut v = initial;
    out.push(v);
    for r in returns {
        v *= 1.0 + r;
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe(&[0.01, -0.01]).unwrap(), 0.0);
        assert!((sharpe(&[0.01, 0.02, 0.03]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            sharpe(&[0.05, 0.05]),
            Err(MetricsError::ZeroVolatility(_))
        ));
        assert_eq!(sharpe(&[0.1]), Err(MetricsError::TooShort(1)));
    }

    #[test]
    fn fapv_examples() {
        assert!((fapv(&[0.10, -0.10]) - 0.99).abs() < 1e-12);
        assert_eq!(fapv(&[]), 1.0);
        assert_eq!(fapv(&[1.0]), 2.0);
    }

    #[test]
    fn mdd_examples() {
        assert!((mdd(&[1.0, 1.2, 0.9, 1.1]) - 0.25).abs() < 1e-12);
        assert_eq!(mdd(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(mdd(&[1.0, 0.5]), 0.5);
    }

    proptest! {
        #[test]
        fn sharpe_scale_invariant(
            rs in prop::collection::vec(-0.05f64..0.05, 3..40),
            k in 0.01f64..100.0,
        ) {
            if let Ok(s) = sharpe(&rs) {
                let scaled: Vec<f64> = rs.iter().map(|r| r * k).collect();
                let s2 = sharpe(&scaled).unwrap();
                prop_assert!((s - s2).abs() < 1e-9 * (1.0 + s.abs()));
            }
        }

        #[test]
        fn fapv_concatenation(
            a in prop::collection::vec(-0.2f64..0.2, 0..30),
            b in prop::collection::vec(-0.2f64..0.2, 0..30),
        ) {
            let joined: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
            let lhs = fapv(&joined);
            let rhs = fapv(&a) * fapv(&b);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn mdd_scale_invariant_and_zero_iff_monotone(
            vs in prop::collection::vec(0.1f64..10.0, 1..40),
            k in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = vs.iter().map(|v| v * k).collect();
            prop_assert!((mdd(&vs) - mdd(&scaled)).abs() < 1e-12);
            let monotone = vs.windows(2).all(|w| w[1] >= w[0]);
            prop_assert_eq!(mdd(&vs) == 0.0, monotone);
        }
    }
}
