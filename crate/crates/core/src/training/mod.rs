//! Trajectory assembly, the optimization loop and the seeded grid search.

pub mod grid;
pub mod objective;
pub mod segments;

use std::time::Instant;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, AlignedSeries, DataError, SplitSpec};
use crate::exec::Exec;
use crate::losses::{self, LossConfig, LossError};
use crate::neutral::NeutralError;
use crate::nn::model::{self, init_params, ModelSpec, Params};
use crate::nn::{AdamState, Tensor};
use crate::portfolio::{FeeScheme, Pair};

pub use grid::{grid_search, GridOutcome, GridSpec, RunRecord, SummaryRow};
pub use objective::{chunk_loss, chunk_objective, ChunkResult};
pub use segments::{make_trajectories, SegmentSet};

/// Values searched by the hyperparameter study.
pub mod search_grid {
    pub const BATCH_SIZE: [usize; 4] = [64, 128, 256, 512];
    pub const EPOCHS: [usize; 4] = [80, 100, 120, 140];
    pub const BASE_LR: [f64; 7] = [1e-5, 3e-5, 5e-5, 1e-4, 3e-4, 5e-4, 1e-3];
    pub const WEIGHT_DECAY: [f64; 5] = [0.0, 1e-4, 3e-4, 5e-4, 1e-3];
    pub const GAMMA: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    pub const XI: [f64; 10] = [1e-6, 3e-6, 5e-6, 1e-5, 3e-5, 5e-5, 1e-4, 3e-4, 5e-4, 1e-3];
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least {needed} bars for one segment, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("beta estimation failed: {0}")]
    Neutral(#[from] NeutralError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("training data reaches {last}, not before test start {test_start}")]
    Leakage {
        last: DateTime<Utc>,
        test_start: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub fee_scheme: FeeScheme,
    pub seed: u64,
    /// Decisions per training segment.
    pub seq_len: usize,
    /// Feature window length (rows fed to the LSTM, oldest first).
    pub lookback: usize,
    /// Bars in the market beta regression.
    pub beta_window: usize,
    /// Block length of the feature z-score.
    pub norm_block: usize,
    pub hidden: usize,
    /// Segments per tape; chunks of a batch are evaluated independently.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::baseline(),
            batch_size: 64,
            epochs: 80,
            base_lr: 1e-3,
            weight_decay: 0.0,
            fee_scheme: FeeScheme::None,
            seed: 0,
            seq_len: 32,
            lookback: 48,
            beta_window: 48,
            norm_block: 12,
            hidden: model::DEFAULT_HIDDEN,
            chunk: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let checks: [(bool, String); 10] = [
            (
                self.batch_size >= 1,
                format!("batch_size {} < 1", self.batch_size),
            ),
            (self.epochs >= 1, format!("epochs {} < 1", self.epochs)),
            (
                self.base_lr > 0.0 && self.base_lr <= 1.0,
                format!("base_lr {} outside (0, 1]", self.base_lr),
            ),
            (
                (0.0..1.0).contains(&self.weight_decay),
                format!("weight_decay {} outside [0, 1)", self.weight_decay),
            ),
            (self.seq_len >= 2, format!("seq_len {} < 2", self.seq_len)),
            (
                self.lookback >= 1,
                format!("lookback {} < 1", self.lookback),
            ),
            (
                self.beta_window >= 2,
                format!("beta_window {} < 2", self.beta_window),
            ),
            (
                self.norm_block >= 1,
                format!("norm_block {} < 1", self.norm_block),
            ),
            (self.hidden >= 1, format!("hidden {} < 1", self.hidden)),
            (self.chunk >= 1, format!("chunk {} < 1", self.chunk)),
        ];
        match checks.into_iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::Config(msg)),
            None => Ok(()),
        }
    }

    /// True when every searched hyperparameter is one of the searched values.
    pub fn on_search_grid(&self) -> bool {
        let has = |set: &[f64], v: f64| {
            set.iter()
                .any(|x| (x - v).abs() <= 1e-12 * x.abs().max(1e-300))
        };
        let penalty_ok = match self.loss.variant {
            losses::LossVariant::Baseline => true,
            _ => has(&search_grid::GAMMA, self.loss.gamma) && has(&search_grid::XI, self.loss.xi),
        };
        search_grid::BATCH_SIZE.contains(&self.batch_size)
            && search_grid::EPOCHS.contains(&self.epochs)
            && has(&search_grid::BASE_LR, self.base_lr)
            && has(&search_grid::WEIGHT_DECAY, self.weight_decay)
            && penalty_ok
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::with_hidden(self.hidden)
    }

    /// Stable hash of every field except the seed.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Loss on the full training set after an epoch (row 0 is before training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
    /// Mean of the minibatch losses seen during the epoch.
    pub batch_loss: f64,
    /// Mean segment loss with the end-of-epoch parameters.
    pub loss: f64,
    pub sharpe: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: TrainConfig,
    pub params: Params,
    pub epochs: Vec<EpochLog>,
    pub segments: usize,
    pub steps: usize,
    /// Open time of the last bar the model was trained on.
    pub trained_until: DateTime<Utc>,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn initial_loss(&self) -> f64 {
        self.epochs[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().expect("epoch log is never empty").loss
    }
}

/// Mean loss, Sharpe and penalty over all segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub loss: f64,
    pub sharpe: f64,
    pub penalty: f64,
}

const PREDICT_BATCH: usize = 512;

/// Allocations at every usable decision of `set`.
pub fn predict_all(set: &SegmentSet, params: &Params, exec: Exec) -> Vec<Pair> {
    let blocks: Vec<usize> = (0..set.anchors.len()).step_by(PREDICT_BATCH).collect();
    exec.map(&blocks, |&start| {
        let end = (start + PREDICT_BATCH).min(set.anchors.len());
        let windows: Vec<&[f64]> = (start..end).map(|k| set.window(k)).collect();
        model::predict(params, &windows, set.lookback).expect("segment windows match the model")
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Evaluate the objective on every segment with the reference loss code.
pub fn evaluate(
    set: &SegmentSet,
    params: &Params,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<LossSummary, TrainError> {
    let weights = predict_all(set, params, exec);
    let fees = cfg.fee_scheme.schedule();
    let rows = exec.map_range(set.num_segments(), |s| {
        let batch = set.materialize(s, weights[s..s + set.seq_len].to_vec(), &fees)?;
        losses::loss_breakdown(&batch, &cfg.loss)
    });
    let n = rows.len() as f64;
    let mut out = LossSummary {
        loss: 0.0,
        sharpe: 0.0,
        penalty: 0.0,
    };
    for r in rows {
        let r = r?;
        out.loss += r.total / n;
        out.sharpe += r.sharpe / n;
        out.penalty += r.penalty / n;
    }
    Ok(out)
}

/// Train a fresh model on `series` (all of it is training data).
pub fn train(
    series: &AlignedSeries,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<RunResult, TrainError> {
    let started = Instant::now();
    cfg.validate()?;
    let set = make_trajectories(series, cfg)?;
    let n_seg = set.num_segments();
    let fees = cfg.fee_scheme.schedule();
    let batches_per_epoch = n_seg.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut params = init_params(cfg.model_spec(), cfg.seed);
    let mut opt = AdamState::new(&params, cfg.base_lr, cfg.weight_decay, total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_seg).collect();

    let init = evaluate(&set, &params, cfg, exec)?;
    let mut epochs = vec![EpochLog {
        epoch: 0,
        lr: opt.current_lr(),
        batch_loss: init.loss,
        loss: init.loss,
        sharpe: init.sharpe,
        penalty: init.penalty,
    }];
    log::info!(
        "training {} segments, {} steps, config {}",
        n_seg,
        total_steps,
        cfg.config_hash()
    );

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(cfg.chunk).collect();
            let scale = batch.len() as f64;
            let results = exec.map(&chunks, |segs| {
                objective::chunk_objective(&set, &params, segs, &cfg.loss, &fees, scale)
            });
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let r = r.map_err(|e| match e {
                    LossError::Metrics(_) | LossError::DivisionGuard(_) => TrainError::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    },
                    other => TrainError::Loss(other),
                })?;
                loss += r.loss;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let grads = grads.expect("batches are non-empty");
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            opt.step(&mut params, &grads);
            batch_loss_sum += loss;
        }
        if !params.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: batches_per_epoch - 1,
                loss: f64::NAN,
            });
        }
        let eval = evaluate(&set, &params, cfg, exec)?;
        let row = EpochLog {
            epoch,
            lr: opt.current_lr(),
            batch_loss: batch_loss_sum / batches_per_epoch as f64,
            loss: eval.loss,
            sharpe: eval.sharpe,
            penalty: eval.penalty,
        };
        log::debug!(
            "epoch {epoch}: loss {:.6} sharpe {:.5}",
            row.loss,
            row.sharpe
        );
        epochs.push(row);
    }

    Ok(RunResult {
        config: cfg.clone(),
        params,
        epochs,
        segments: n_seg,
        steps: total_steps,
        trained_until: *series.timestamps.last().expect("series is non-empty"),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Hard check that no training bar opens at or after `test_start`.
pub fn check_no_leakage(
    train: &AlignedSeries,
    test_start: DateTime<Utc>,
) -> Result<(), TrainError> {
    match train.timestamps.last() {
        Some(&last) if last >= test_start => Err(TrainError::Leakage { last, test_start }),
        _ => Ok(()),
    }
}

/// Train on the training span of one walk-forward period.
pub fn train_period(
    full: &AlignedSeries,
    spec: &SplitSpec,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<RunResult, TrainError> {
    let (train_part, _) = data::split(full, spec)?;
    check_no_leakage(&train_part, spec.test_start)?;
    train(&train_part, cfg, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};
    use crate::losses::LossVariant;

    fn tiny(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 2,
            base_lr: 1e-3,
            seed,
            seq_len: 8,
            lookback: 8,
            beta_window: 24,
            norm_block: 6,
            hidden: 4,
            chunk: 4,
            ..TrainConfig::default()
        }
    }

    fn series() -> AlignedSeries {
        generate(&SyntheticConfig {
            hours: 160,
            ..Default::default()
        })
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let s = series();
        let a = train(&s, &tiny(3), Exec::Sequential).unwrap();
        let b = train(&s, &tiny(3), Exec::Parallel).unwrap();
        assert_eq!(
            crate::nn::checkpoint::to_bytes(&a.params),
            crate::nn::checkpoint::to_bytes(&b.params)
        );
        let c = train(&s, &tiny(4), Exec::Sequential).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_xi_penalty_variant_matches_baseline() {
        let s = series();
        let base = train(&s, &tiny(1), Exec::Sequential).unwrap();
        let mut cfg = tiny(1);
        cfg.loss = LossConfig {
            variant: LossVariant::L1,
            gamma: 0.3,
            xi: 0.0,
        };
        let l1 = train(&s, &cfg, Exec::Sequential).unwrap();
        let a: Vec<f64> = base.epochs.iter().map(|e| e.loss).collect();
        let b: Vec<f64> = l1.epochs.iter().map(|e| e.loss).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny(0);
        cfg.loss.gamma = 1.5;
        assert!(matches!(
            train(&series(), &cfg, Exec::Sequential),
            Err(TrainError::Config(_))
        ));
        let mut cfg = tiny(0);
        cfg.seq_len = 1;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn search_grid_membership() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.on_search_grid());
        cfg.epochs = 20;
        assert!(!cfg.on_search_grid());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = tiny(1);
        let mut b = tiny(2);
        assert_eq!(a.config_hash(), b.config_hash());
        b.base_lr = 3e-4;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn leakage_is_a_hard_error() {
        let s = series();
        let inside = s.timestamps[100];
        assert!(matches!(
            check_no_leakage(&s, inside),
            Err(TrainError::Leakage { .. })
        ));
        let after = *s.timestamps.last().unwrap() + chrono::Duration::hours(1);
        assert!(check_no_leakage(&s, after).is_ok());
    }

    #[test]
    fn divergence_reported() {
        let mut cfg = tiny(0);
        cfg.base_lr = 1.0;
        cfg.epochs = 30;
        cfg.loss = LossConfig {
            variant: LossVariant::L2,
            gamma: 0.0,
            xi: f64::MAX,
        };
        match train(&series(), &cfg, Exec::Sequential) {
            Err(TrainError::Divergence { .. }) => {}
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|r| r.final_loss())
            ),
        }
    }
}
