//! Sharpe-trained LSTM allocation for a BTCUP/BTCDOWN token pair.
//!
//! Modules, bottom up: [`metrics`] and [`portfolio`] (fee-aware accounting),
//! [`neutral`] (market beta and neutral weights), [`losses`] (training
//! objectives), [`data`] (candles, alignment, features, synthetic markets),
//! [`nn`] (autodiff tape, LSTM allocator, Adam, checkpoints), [`training`]
//! (segments, optimization loop, grid search) and [`backtest`] (walk-forward
//! evaluation and summary tables). [`exec`] switches data-parallel loops
//! between rayon and a sequential fallback.

pub mod backtest;
pub mod data;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod neutral;
pub mod nn;
pub mod portfolio;
pub mod training;

pub use exec::Exec;
