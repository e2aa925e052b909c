//! Training objectives evaluated on plain `f64` trajectories.
//!
//! These are the reference definitions. The trainer evaluates the same
//! quantities on the autodiff tape (`training::objective`) and its tests
//! check both routes agree.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError};
use crate::portfolio::{self, FeeSchedule, Pair, PortfolioError, PortfolioState};

/// Smallest UP weight accepted by the model-beta division.
pub const MIN_UP_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error("UP weight {0:e} below the division guard")]
    DivisionGuard(f64),
    #[error("trajectory arrays disagree: {0}")]
    Shape(String),
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Baseline,
    L1,
    L2,
}

impl std::str::FromStr for LossVariant {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "bl" | "ns" => Ok(Self::Baseline),
            "l1" | "svc1" => Ok(Self::L1),
            "l2" | "svc2" => Ok(Self::L2),
            other => Err(LossError::Config(format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Margin around the market beta, in [0, 1].
    pub gamma: f64,
    /// Penalty weight.
    pub xi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl LossConfig {
    pub const fn baseline() -> Self {
        Self {
            variant: LossVariant::Baseline,
            gamma: 0.0,
            xi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LossError::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(LossError::Config(format!(
                "xi {} must be finite and >= 0",
                self.xi
            )));
        }
        Ok(())
    }

    /// Effective penalty weight (zero for the baseline variant).
    pub fn penalty_weight(&self) -> f64 {
        match self.variant {
            LossVariant::Baseline => 0.0,
            _ => self.xi,
        }
    }
}

/// One simulated segment: decisions, market data and the resulting path.
///
/// `prices` and `times` have one more entry than `weights`: the last entry
/// marks the close of the period following the final decision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub weights: Vec<Pair>,
    pub prices: Vec<Pair>,
    pub times: Vec<DateTime<Utc>>,
    pub beta_market: Vec<f64>,
    /// Volumes held after the reallocation at each decision.
    pub volumes: Vec<Pair>,
    pub returns: Vec<f64>,
}

impl TrajectoryBatch {
    /// Simulate a portfolio that starts at value 1 already holding
    /// `weights[0]`, trades to each following decision, and is marked to
    /// market (no trade) at the final close.
    pub fn simulate(
        weights: Vec<Pair>,
        prices: Vec<Pair>,
        times: Vec<DateTime<Utc>>,
        beta_market: Vec<f64>,
        fees: &FeeSchedule,
    ) -> Result<Self, LossError> {
        let t = weights.len();
        if t < 2 || prices.len() != t + 1 || times.len() != t + 1 || beta_market.len() != t {
            return Err(LossError::Shape(format!(
                "T={t}, prices={}, times={}, beta={}",
                prices.len(),
                times.len(),
                beta_market.len()
            )));
        }
        let mut state = PortfolioState::new(1.0, weights[0], prices[0], times[0])?;
        let mut volumes = Vec::with_capacity(t);
        let mut returns = Vec::with_capacity(t);
        for k in 0..t {
            volumes.push(state.volumes);
            let target = if k + 1 < t {
                weights[k + 1]
            } else {
                portfolio::apply_price_move(&state, prices[k + 1])?.weights_prime
            };
            let (next, r) =
                portfolio::reallocate(&state, target, prices[k + 1], times[k + 1], fees)?;
            returns.push(r);
            state = next;
        }
        Ok(Self {
            weights,
            prices,
            times,
            beta_market,
            volumes,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Negative Sharpe ratio of the trajectory's returns.
pub fn loss_baseline(batch: &TrajectoryBatch) -> Result<f64, LossError> {
    Ok(-metrics::sharpe(&batch.returns)?)
}

/// Beta implied by an allocation: `-(y_u w_d) / (y_d w_u)`.
pub fn beta_model(w: Pair, y: Pair) -> Result<f64, LossError> {
    if w[0] < MIN_UP_WEIGHT {
        return Err(LossError::DivisionGuard(w[0]));
    }
    Ok(-(y[0] * w[1]) / (y[1] * w[0]))
}

/// `(C1, C2)`; both are non-negative exactly when the model beta lies in
/// `[(1+γ)β, (1-γ)β]`.
pub fn margin_terms(beta_model: f64, beta_market: f64, gamma: f64) -> (f64, f64) {
    (
        beta_model - (1.0 + gamma) * beta_market,
        (1.0 - gamma) * beta_market - beta_model,
    )
}

pub(crate) fn a1(c1: f64, c2: f64) -> f64 {
    (-c1 * c2).max(0.0)
}

pub(crate) fn a2(c1: f64, c2: f64) -> f64 {
    (-c1).max(0.0).powi(2) + (-c2).max(0.0).powi(2)
}

/// Volume-scaled product hinge `max(0, -v_u² C1 C2)`.
pub fn hl1(w: Pair, y: Pair, v_up: f64, beta_market: f64, gamma: f64) -> Result<f64, LossError> {
    let (c1, c2) = margin_terms(beta_model(w, y)?, beta_market, gamma);
    Ok(v_up * v_up * a1(c1, c2))
}

/// Volume-scaled squared hinge `max(0, -v_u C1)² + max(0, -v_u C2)²`.
pub fn hl2(w: Pair, y: Pair, v_up: f64, beta_market: f64, gamma: f64) -> Result<f64, LossError> {
    let (c1, c2) = margin_terms(beta_model(w, y)?, beta_market, gamma);
    Ok(v_up * v_up * a2(c1, c2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sharpe: f64,
    /// Mean penalty over the trajectory, before multiplying by ξ.
    pub penalty: f64,
    pub total: f64,
}

pub fn loss_breakdown(
    batch: &TrajectoryBatch,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    let sr = metrics::sharpe(&batch.returns)?;
    let penalty = match cfg.variant {
        LossVariant::Baseline => 0.0,
        variant => {
            let mut sum = 0.0;
            for k in 0..batch.len() {
                let args = (
                    batch.weights[k],
                    batch.prices[k],
                    batch.volumes[k][0],
                    batch.beta_market[k],
                    cfg.gamma,
                );
                sum += match variant {
                    LossVariant::L1 => hl1(args.0, args.1, args.2, args.3, args.4)?,
                    _ => hl2(args.0, args.1, args.2, args.3, args.4)?,
                };
            }
            sum / batch.len() as f64
        }
    };
    Ok(LossBreakdown {
        sharpe: sr,
        penalty,
        total: -sr + cfg.penalty_weight() * penalty,
    })
}

/// `-SR_T + ξ · mean_t HL(w_t; γ)` with HL chosen by the variant.
pub fn loss_combined(batch: &TrajectoryBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(loss_breakdown(batch, cfg)?.total)
}
