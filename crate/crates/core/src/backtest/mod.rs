//! Walk-forward evaluation of learned and model-free strategies.

pub mod report;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AlignedSeries, DataError, FeatureTable, Ticker};
use crate::metrics::{self, MetricsError, MetricsRow};
use crate::neutral::{estimate_beta, neutral_weights};
use crate::nn::model::{self, Params};
use crate::portfolio::{self, FeeSchedule, FeeScheme, Pair, PortfolioError, PortfolioState};

pub use report::{report_table, MissingCellError, ReportError, SummaryTable};

/// Estimation window for the covariance and beta benchmarks.
pub const DEFAULT_WINDOW: usize = 48;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("covariance denominator {0:e} is degenerate")]
    DegenerateCovariance(f64),
    #[error("strategy {0} needs a checkpoint")]
    MissingCheckpoint(StrategyKind),
    #[error("checkpoint trained through {trained_until}, not before test start {test_start}")]
    Leakage {
        trained_until: DateTime<Utc>,
        test_start: DateTime<Utc>,
    },
    #[error("test span needs {needed} bars of history before it, has {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("test span {0:?} is too short or out of range")]
    Span(Range<usize>),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Shape(#[from] model::ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "SVC1")]
    Svc1,
    #[serde(rename = "SVC2")]
    Svc2,
    #[serde(rename = "NWP")]
    Nwp,
    #[serde(rename = "EWP")]
    Ewp,
    #[serde(rename = "GMVP")]
    Gmvp,
    #[serde(rename = "BTC")]
    BtcHold,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Ns,
        StrategyKind::Svc1,
        StrategyKind::Svc2,
        StrategyKind::Nwp,
        StrategyKind::Ewp,
        StrategyKind::Gmvp,
        StrategyKind::BtcHold,
    ];

    pub fn is_learned(self) -> bool {
        matches!(
            self,
            StrategyKind::Ns | StrategyKind::Svc1 | StrategyKind::Svc2
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Ns => "NS",
            StrategyKind::Svc1 => "SVC1",
            StrategyKind::Svc2 => "SVC2",
            StrategyKind::Nwp => "NWP",
            StrategyKind::Ewp => "EWP",
            StrategyKind::Gmvp => "GMVP",
            StrategyKind::BtcHold => "BTC",
        }
    }

    /// Training loss variant behind a learned kind.
    pub fn loss_variant(self) -> Option<crate::losses::LossVariant> {
        use crate::losses::LossVariant;
        match self {
            StrategyKind::Ns => Some(LossVariant::Baseline),
            StrategyKind::Svc1 => Some(LossVariant::L1),
            StrategyKind::Svc2 => Some(LossVariant::L2),
            _ => None,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ns" | "baseline" => Ok(StrategyKind::Ns),
            "svc1" | "l1" => Ok(StrategyKind::Svc1),
            "svc2" | "l2" => Ok(StrategyKind::Svc2),
            "nwp" => Ok(StrategyKind::Nwp),
            "ewp" => Ok(StrategyKind::Ewp),
            "gmvp" => Ok(StrategyKind::Gmvp),
            "btc" | "btc_hold" | "btc-hold" | "hold" => Ok(StrategyKind::BtcHold),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// A trained allocator and the data it may have seen.
#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub params: Arc<Params>,
    pub lookback: usize,
    pub norm_block: usize,
    /// Open time of the last training bar.
    pub trained_until: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub model: Option<LearnedModel>,
    /// Window for the GMVP covariance and the NWP beta.
    pub window: usize,
}

impl Strategy {
    pub fn benchmark(kind: StrategyKind) -> Self {
        Self {
            kind,
            model: None,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn learned(kind: StrategyKind, model: LearnedModel) -> Self {
        Self {
            kind,
            model: Some(model),
            window: DEFAULT_WINDOW,
        }
    }

    /// Bars needed before the first decision.
    fn history_needed(&self) -> usize {
        match (self.kind, &self.model) {
            (StrategyKind::Gmvp, _) => self.window,
            (StrategyKind::Nwp, _) => self.window - 1,
            (_, Some(m)) => m.norm_block + m.lookback - 1,
            _ => 0,
        }
    }
}

pub const fn ewp_weights() -> Pair {
    [0.5, 0.5]
}

/// Long-only two-asset minimum-variance weights from the return windows.
///
/// Uses the Bessel-corrected sample covariance; the unconstrained optimum is
/// clipped to `[0, 1]`.
pub fn gmvp_weights(up: &[f64], down: &[f64]) -> Result<Pair, BacktestError> {
    let n = up.len().min(down.len());
    if n < 2 {
        return Err(BacktestError::DegenerateCovariance(0.0));
    }
    let (mu, md) = (
        up.iter().sum::<f64>() / n as f64,
        down.iter().sum::<f64>() / n as f64,
    );
    let (mut suu, mut sdd, mut sud) = (0.0, 0.0, 0.0);
    for (u, d) in up.iter().zip(down) {
        suu += (u - mu) * (u - mu);
        sdd += (d - md) * (d - md);
        sud += (u - mu) * (d - md);
    }
    let k = 1.0 / (n - 1) as f64;
    gmvp_from_cov(suu * k, sdd * k, sud * k)
}

/// Closed form `w_u = (σ_d² − σ_ud) / (σ_u² + σ_d² − 2σ_ud)`, clipped.
pub fn gmvp_from_cov(var_up: f64, var_down: f64, cov: f64) -> Result<Pair, BacktestError> {
    let den = var_up + var_down - 2.0 * cov;
    if !den.is_finite() || den < 1e-15 {
        return Err(BacktestError::DegenerateCovariance(den));
    }
    let w = ((var_down - cov) / den).clamp(0.0, 1.0);
    Ok([w, 1.0 - w])
}

/// Outcome of one strategy over one test span.
///
/// Step 0 is the entry at the first test close (return `-c` under fees);
/// each later step is one held hour. `values` starts at the initial 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: StrategyKind,
    pub period: String,
    pub fee_scheme: FeeScheme,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub metrics: MetricsRow,
    pub times: Vec<DateTime<Utc>>,
    /// Target (UP, DOWN) weights per decision; BTC hold logs (0, 0).
    pub weights: Vec<Pair>,
    pub returns: Vec<f64>,
    pub values: Vec<f64>,
    /// Decisions where the neutral construction fell back to held weights.
    pub fallbacks: usize,
}

/// Flat JSON view of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub strategy: StrategyKind,
    pub period: String,
    pub fee_scheme: FeeScheme,
    pub sharpe: f64,
    pub fapv: f64,
    pub mdd: f64,
    pub n_steps: usize,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

impl BacktestReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            strategy: self.strategy,
            period: self.period.clone(),
            fee_scheme: self.fee_scheme,
            sharpe: self.metrics.sharpe,
            fapv: self.metrics.fapv,
            mdd: self.metrics.mdd,
            n_steps: self.returns.len(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }

    /// Hourly returns after entry, the series the Sharpe ratio is taken on.
    pub fn holding_returns(&self) -> &[f64] {
        &self.returns[1..]
    }
}

struct Allocator<'a> {
    strategy: &'a Strategy,
    series: &'a AlignedSeries,
    up: Vec<f64>,
    down: Vec<f64>,
    learned: Option<Vec<Pair>>,
    first_bar: usize,
    fallbacks: usize,
}

impl<'a> Allocator<'a> {
    fn new(
        strategy: &'a Strategy,
        series: &'a AlignedSeries,
        test: &Range<usize>,
    ) -> Result<Self, BacktestError> {
        let learned = match (strategy.kind.is_learned(), &strategy.model) {
            (false, _) => None,
            (true, None) => return Err(BacktestError::MissingCheckpoint(strategy.kind)),
            (true, Some(m)) => {
                let features = FeatureTable::new(series, m.norm_block)?;
                let windows = test
                    .clone()
                    .take(test.len() - 1)
                    .map(|a| features.window_slice(a, m.lookback))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(model::predict(&m.params, &windows, m.lookback)?)
            }
        };
        Ok(Self {
            strategy,
            series,
            up: series.closes(Ticker::Up),
            down: series.closes(Ticker::Down),
            learned,
            first_bar: test.start,
            fallbacks: 0,
        })
    }

    fn weights(&mut self, bar: usize, prev: Option<Pair>) -> Result<Pair, BacktestError> {
        let window = self.strategy.window;
        Ok(match self.strategy.kind {
            StrategyKind::Ewp | StrategyKind::BtcHold => ewp_weights(),
            StrategyKind::Gmvp => {
                let r = |t: Ticker| {
                    (bar + 1 - window..=bar)
                        .map(|i| self.series.return_at(t, i))
                        .collect::<Vec<_>>()
                };
                gmvp_weights(&r(Ticker::Up), &r(Ticker::Down))?
            }
            StrategyKind::Nwp => {
                let est = estimate_beta(&self.up[..=bar], &self.down[..=bar], window);
                match est.and_then(|e| neutral_weights(e.beta, self.up[bar], self.down[bar])) {
                    Ok(w) => w,
                    Err(e) => {
                        self.fallbacks += 1;
                        log::debug!("NWP fallback at bar {bar}: {e}");
                        prev.unwrap_or(ewp_weights())
                    }
                }
            }
            _ => self.learned.as_ref().expect("learned weights precomputed")[bar - self.first_bar],
        })
    }
}

/// Hourly walk-forward over the bars `test` of `series`.
///
/// The strategy buys in at the close of `test.start` from a value of 1,
/// rebalances at every following close and is marked to market at the close
/// of the last test bar. Data before `test.start` is used only for lookbacks.
/// A flat value curve (zero volatility) is reported with a Sharpe of 0.
pub fn run_backtest(
    strategy: &Strategy,
    series: &AlignedSeries,
    test: Range<usize>,
    fees: FeeScheme,
    period: &str,
) -> Result<BacktestReport, BacktestError> {
    if test.len() < 3 || test.end > series.len() {
        return Err(BacktestError::Span(test));
    }
    let needed = strategy.history_needed();
    if test.start < needed {
        return Err(BacktestError::InsufficientHistory {
            needed,
            have: test.start,
        });
    }
    if let Some(m) = &strategy.model {
        let test_start = series.timestamps[test.start];
        if m.trained_until >= test_start {
            return Err(BacktestError::Leakage {
                trained_until: m.trained_until,
                test_start,
            });
        }
    }
    let schedule = fees.schedule();
    let (times, weights, returns, fallbacks) = if strategy.kind == StrategyKind::BtcHold {
        hold_btc(series, &test)
    } else {
        rebalance(strategy, series, &test, &schedule)?
    };
    let values = metrics::value_curve(1.0, &returns);
    let sharpe = match metrics::sharpe(&returns[1..]) {
        Ok(s) => s,
        Err(MetricsError::ZeroVolatility(std)) => {
            log::warn!(
                "{} on {period}: flat value curve (std {std:e}), Sharpe reported as 0",
                strategy.kind
            );
            0.0
        }
        Err(e) => return Err(e.into()),
    };
    let row = MetricsRow {
        sharpe,
        fapv: *values.last().expect("non-empty curve"),
        mdd: metrics::mdd(&values),
    };
    Ok(BacktestReport {
        strategy: strategy.kind,
        period: period.to_string(),
        fee_scheme: fees,
        seed: strategy.model.as_ref().map(|m| m.params.seed),
        config_hash: None,
        metrics: row,
        times,
        weights,
        returns,
        values,
        fallbacks,
    })
}

type Path4 = (Vec<DateTime<Utc>>, Vec<Pair>, Vec<f64>, usize);

/// BTC bought without fees at the first test close and held.
fn hold_btc(series: &AlignedSeries, test: &Range<usize>) -> Path4 {
    let btc = series.closes(Ticker::Btc);
    let mut times = vec![series.decision_time(test.start)];
    let mut returns = vec![0.0];
    for i in test.start + 1..test.end {
        times.push(series.decision_time(i));
        returns.push(btc[i] / btc[i - 1] - 1.0);
    }
    let weights = vec![[0.0, 0.0]; times.len()];
    (times, weights, returns, 0)
}

fn rebalance(
    strategy: &Strategy,
    series: &AlignedSeries,
    test: &Range<usize>,
    schedule: &FeeSchedule,
) -> Result<Path4, BacktestError> {
    let mut alloc = Allocator::new(strategy, series, test)?;
    let start = test.start;
    let w0 = alloc.weights(start, None)?;
    let (mut state, entry) = PortfolioState::enter(
        1.0,
        w0,
        series.pair_prices(start),
        series.decision_time(start),
        schedule,
    )?;
    let mut times = vec![state.time];
    let mut weights = vec![w0];
    let mut returns = vec![entry];
    let last = test.end - 1;
    for bar in start + 1..=last {
        let prices = series.pair_prices(bar);
        let target = if bar < last {
            alloc.weights(bar, Some(state.weights))?
        } else {
            portfolio::apply_price_move(&state, prices)?.weights_prime
        };
        let (next, r) =
            portfolio::reallocate(&state, target, prices, series.decision_time(bar), schedule)?;
        times.push(next.time);
        weights.push(target);
        returns.push(r);
        state = next;
    }
    Ok((times, weights, returns, alloc.fallbacks))
}
