//! Overlapping training segments over a prepared series.

use chrono::{DateTime, Utc};

use super::{TrainConfig, TrainError};
use crate::data::{AlignedSeries, FeatureTable, Ticker};
use crate::losses::{LossError, TrajectoryBatch};
use crate::neutral::estimate_beta;
use crate::portfolio::{FeeSchedule, Pair};

/// Everything the trainer needs about a series, precomputed once.
///
/// A decision point is a bar index `a`: the model sees the feature window
/// ending at `a`, trades at the close of `a` and is marked at the close of
/// `a + 1`. Segment `s` covers decisions `anchors[s..s + seq_len]`.
#[derive(Debug, Clone)]
pub struct SegmentSet {
    pub features: FeatureTable,
    pub lookback: usize,
    pub seq_len: usize,
    /// Usable decision bars, consecutive.
    pub anchors: Vec<usize>,
    /// Market beta per usable decision.
    pub beta: Vec<f64>,
    /// (UP, DOWN) close per bar of the series.
    pub prices: Vec<Pair>,
    /// Decision time (bar close) per bar of the series.
    pub times: Vec<DateTime<Utc>>,
}

impl SegmentSet {
    pub fn num_segments(&self) -> usize {
        self.anchors.len() + 1 - self.seq_len
    }

    /// Decision bars of segment `s`.
    pub fn segment_anchors(&self, s: usize) -> &[usize] {
        &self.anchors[s..s + self.seq_len]
    }

    /// Feature window (oldest row first) for usable decision `k`.
    pub fn window(&self, k: usize) -> &[f64] {
        self.features
            .window_slice(self.anchors[k], self.lookback)
            .expect("usable anchors have full windows")
    }

    /// Simulate segment `s` under `weights` (one pair per decision).
    pub fn materialize(
        &self,
        s: usize,
        weights: Vec<Pair>,
        fees: &FeeSchedule,
    ) -> Result<TrajectoryBatch, LossError> {
        let first = self.anchors[s];
        let bars = first..first + self.seq_len + 1;
        TrajectoryBatch::simulate(
            weights,
            self.prices[bars.clone()].to_vec(),
            self.times[bars].to_vec(),
            self.beta[s..s + self.seq_len].to_vec(),
            fees,
        )
    }
}

/// Build stride-1 segments of `cfg.seq_len` decisions over `series`.
///
/// Usable decisions are bars with a full feature window, a full beta window
/// and a following bar to be marked at.
pub fn make_trajectories(
    series: &AlignedSeries,
    cfg: &TrainConfig,
) -> Result<SegmentSet, TrainError> {
    let n = series.len();
    let first = (cfg.norm_block + cfg.lookback - 1).max(cfg.beta_window - 1);
    let usable = (n.saturating_sub(1)).saturating_sub(first);
    if usable < cfg.seq_len {
        return Err(TrainError::InsufficientHistory {
            needed: first + 1 + cfg.seq_len,
            have: n,
        });
    }
    let features = FeatureTable::new(series, cfg.norm_block)?;
    let anchors: Vec<usize> = (first..first + usable).collect();
    let up = series.closes(Ticker::Up);
    let down = series.closes(Ticker::Down);
    let beta = anchors
        .iter()
        .map(|&a| estimate_beta(&up[..=a], &down[..=a], cfg.beta_window).map(|e| e.beta))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SegmentSet {
        features,
        lookback: cfg.lookback,
        seq_len: cfg.seq_len,
        anchors,
        beta,
        prices: (0..n).map(|i| series.pair_prices(i)).collect(),
        times: (0..n).map(|i| series.decision_time(i)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};

    fn cfg() -> TrainConfig {
        TrainConfig {
            seq_len: 32,
            ..TrainConfig::default()
        }
    }

    fn series(n: usize) -> AlignedSeries {
        generate(&SyntheticConfig {
            hours: n,
            ..Default::default()
        })
    }

    #[test]
    fn hundred_usable_steps_give_69_segments() {
        let c = cfg();
        let first = (c.norm_block + c.lookback - 1).max(c.beta_window - 1);
        let set = make_trajectories(&series(first + 1 + 100), &c).unwrap();
        assert_eq!(set.anchors.len(), 100);
        assert_eq!(set.num_segments(), 69);
    }

    #[test]
    fn too_short_is_insufficient_history() {
        let c = cfg();
        let first = (c.norm_block + c.lookback - 1).max(c.beta_window - 1);
        let err = make_trajectories(&series(first + 1 + 31), &c).unwrap_err();
        assert!(matches!(err, TrainError::InsufficientHistory { .. }));
    }

    #[test]
    fn neighbouring_segments_share_anchors() {
        let set = make_trajectories(&series(300), &cfg()).unwrap();
        let a = set.segment_anchors(5);
        let b = set.segment_anchors(6);
        assert_eq!(a[1..], b[..31]);
    }

    #[test]
    fn windows_end_at_their_anchor() {
        let s = series(300);
        let c = cfg();
        let set = make_trajectories(&s, &c).unwrap();
        let k = 10;
        let w = set.window(k);
        assert_eq!(w.len(), c.lookback * crate::data::FEATURE_COLUMNS);
        assert_eq!(
            &w[w.len() - crate::data::FEATURE_COLUMNS..],
            set.features.row(set.anchors[k])
        );
    }
}
