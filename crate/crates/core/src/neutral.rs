//! Market beta between the UP and DOWN token prices and the neutral weights
//! that cancel first-order exposure to DOWN price moves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::portfolio::Pair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeutralError {
    #[error("need {needed} samples for the beta window, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("regressor variance {0:e} is too small")]
    DegenerateRegressor(f64),
    #[error("beta {0} is not negative: no long-only neutral position")]
    Infeasible(f64),
    #[error("prices must be positive, got {0:?}")]
    InvalidPrice(Pair),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    pub beta: f64,
    pub alpha: f64,
    pub window: usize,
}

/// OLS fit of `up = alpha + beta * down` over the last `window` samples.
pub fn estimate_beta(
    prices_up: &[f64],
    prices_down: &[f64],
    window: usize,
) -> Result<BetaEstimate, NeutralError> {
    let have = prices_up.len().min(prices_down.len());
    if window < 2 || have < window {
        return Err(NeutralError::InsufficientData {
            needed: window.max(2),
            have,
        });
    }
    let ys = &prices_up[prices_up.len() - window..];
    let xs = &prices_down[prices_down.len() - window..];
    let n = window as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        sxx += dx * dx;
        sxy += dx * (y - my);
    }
    let var = sxx / n;
    if var < 1e-15 {
        return Err(NeutralError::DegenerateRegressor(var));
    }
    let beta = sxy / sxx;
    Ok(BetaEstimate {
        beta,
        alpha: my - beta * mx,
        window,
    })
}

/// Weights `(w_u, w_d)` with `w_d / w_u = -beta * y_d / y_u` and `w_u + w_d = 1`.
pub fn neutral_weights(beta: f64, y_up: f64, y_down: f64) -> Result<Pair, NeutralError> {
    if !(y_up > 0.0 && y_down > 0.0) {
        return Err(NeutralError::InvalidPrice([y_up, y_down]));
    }
    if beta >= 0.0 || !beta.is_finite() {
        return Err(NeutralError::Infeasible(beta));
    }
    let w_up = 1.0 / (1.0 - beta * y_down / y_up);
    Ok([w_up, 1.0 - w_up])
}
