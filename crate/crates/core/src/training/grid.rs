//! Hyperparameter grid with repeated seeds, scored by walk-forward tests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{train_period, EpochLog, RunResult, TrainConfig, TrainError};
use crate::backtest::{
    report, run_backtest, BacktestError, BacktestReport, LearnedModel, Strategy, StrategyKind,
};
use crate::data::{AlignedSeries, SplitSpec};
use crate::exec::Exec;
use crate::losses::LossVariant;
use crate::metrics::MetricsRow;
use crate::nn::checkpoint;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid is empty: {0}")]
    Empty(String),
    #[error("seeds must be distinct, got {0:?}")]
    Seed(Vec<u64>),
    #[error("invalid grid: {0}")]
    Config(String),
    #[error("run directory {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Axes of the search. `None` keeps the base value; `Some(vec![])` is an
/// empty (invalid) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub batch_size: Option<Vec<usize>>,
    pub epochs: Option<Vec<usize>>,
    pub base_lr: Option<Vec<f64>>,
    pub weight_decay: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub xi: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub max_configs: Option<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            batch_size: None,
            epochs: None,
            base_lr: None,
            weight_decay: None,
            gamma: None,
            xi: None,
            seeds: vec![0, 1, 2, 3, 4],
            max_configs: None,
        }
    }
}

fn axis<T: Copy>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>, GridError> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(GridError::Empty(format!("axis `{name}` has no values"))),
        Some(v) => Ok(v.clone()),
    }
}

impl GridSpec {
    /// Cartesian product in a fixed order, deduplicated, truncated to
    /// `max_configs`. Penalty axes are ignored for the baseline loss.
    pub fn configs(&self) -> Result<Vec<TrainConfig>, GridError> {
        let b = &self.base;
        let penalty = b.loss.variant != LossVariant::Baseline;
        let gammas = if penalty {
            axis("gamma", &self.gamma, b.loss.gamma)?
        } else {
            vec![b.loss.gamma]
        };
        let xis = if penalty {
            axis("xi", &self.xi, b.loss.xi)?
        } else {
            vec![b.loss.xi]
        };
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for &batch_size in &axis("batch_size", &self.batch_size, b.batch_size)? {
            for &epochs in &axis("epochs", &self.epochs, b.epochs)? {
                for &base_lr in &axis("base_lr", &self.base_lr, b.base_lr)? {
                    for &weight_decay in &axis("weight_decay", &self.weight_decay, b.weight_decay)?
                    {
                        for &gamma in &gammas {
                            for &xi in &xis {
                                let mut c = b.clone();
                                c.batch_size = batch_size;
                                c.epochs = epochs;
                                c.base_lr = base_lr;
                                c.weight_decay = weight_decay;
                                c.loss.gamma = gamma;
                                c.loss.xi = xi;
                                c.seed = 0;
                                c.validate().map_err(|e| GridError::Config(e.to_string()))?;
                                if seen.insert(c.config_hash()) {
                                    out.push(c);
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(max) = self.max_configs {
            out.truncate(max);
        }
        if out.is_empty() {
            return Err(GridError::Empty("no configurations".into()));
        }
        Ok(out)
    }

    pub fn validate_seeds(&self) -> Result<(), GridError> {
        if self.seeds.is_empty() {
            return Err(GridError::Empty("no seeds".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(GridError::Seed(self.seeds.clone()));
        }
        Ok(())
    }
}

/// A named walk-forward period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub name: String,
    pub split: SplitSpec,
}

impl Period {
    pub fn blvt() -> Vec<Period> {
        SplitSpec::blvt_periods()
            .into_iter()
            .enumerate()
            .map(|(k, split)| Period {
                name: format!("Period {}", k + 1),
                split,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMetrics {
    pub period: String,
    pub metrics: MetricsRow,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub periods: Vec<PeriodMetrics>,
    /// Mean test Sharpe across periods; `None` when the run failed.
    pub avg_sharpe: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_hash: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub mean: f64,
    pub std: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// One per (config, seed), in config-major order.
    pub runs: Vec<RunRecord>,
    /// Ranked by mean average Sharpe, best first; configs with no completed
    /// run come last.
    pub summary: Vec<SummaryRow>,
    /// Runs loaded from an existing run directory instead of recomputed.
    pub resumed: usize,
}

impl GridOutcome {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("rank,run_hash,loss,gamma,xi,batch_size,epochs,base_lr,weight_decay,mean,std,completed,failed\n");
        for (k, r) in self.summary.iter().enumerate() {
            let c = &r.config;
            out.push_str(&format!(
                "{},{},{:?},{},{},{},{},{},{},{:.6},{:.6},{},{}\n",
                k + 1,
                r.run_hash,
                c.loss.variant,
                c.loss.gamma,
                c.loss.xi,
                c.batch_size,
                c.epochs,
                c.base_lr,
                c.weight_decay,
                r.mean,
                r.std,
                r.completed,
                r.failed
            ));
        }
        out
    }
}

/// Hash of a config together with the data and periods it is evaluated on.
pub fn run_hash(cfg: &TrainConfig, data_digest: &str, periods: &[Period]) -> String {
    let mut h = Sha256::new();
    h.update(cfg.config_hash().as_bytes());
    h.update(data_digest.as_bytes());
    h.update(
        serde_json::to_string(periods)
            .expect("periods serialize")
            .as_bytes(),
    );
    hex::encode(&h.finalize()[..8])
}

/// Learned strategy for a finished training run.
pub fn learned_strategy(result: &RunResult) -> Strategy {
    let kind = match result.config.loss.variant {
        LossVariant::Baseline => StrategyKind::Ns,
        LossVariant::L1 => StrategyKind::Svc1,
        LossVariant::L2 => StrategyKind::Svc2,
    };
    Strategy::learned(
        kind,
        LearnedModel {
            params: Arc::new(result.params.clone()),
            lookback: result.config.lookback,
            norm_block: result.config.norm_block,
            trained_until: result.trained_until,
        },
    )
}

/// Backtest a trained run on a period's test span of `full`.
pub fn test_run(
    full: &AlignedSeries,
    period: &Period,
    result: &RunResult,
) -> Result<BacktestReport, BacktestError> {
    let test = period.split.test_range(full)?;
    let mut rep = run_backtest(
        &learned_strategy(result),
        full,
        test,
        result.config.fee_scheme,
        &period.name,
    )?;
    rep.config_hash = Some(result.config.config_hash());
    Ok(rep)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-epoch training log as CSV.
pub fn epoch_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,batch_loss,loss,sharpe,penalty\n");
    for e in epochs {
        out.push_str(&format!(
            "{},{:e},{:.10},{:.10},{:.10},{:.10e}\n",
            e.epoch, e.lr, e.batch_loss, e.loss, e.sharpe, e.penalty
        ));
    }
    out
}

enum Job {
    Done(Box<RunRecord>),
    Failed(String),
}

fn run_one(
    full: &AlignedSeries,
    periods: &[Period],
    cfg: &TrainConfig,
    dir: Option<&Path>,
    exec: Exec,
) -> Result<Job, GridError> {
    let mut out = Vec::new();
    for (k, period) in periods.iter().enumerate() {
        let result = match train_period(full, &period.split, cfg, exec) {
            Ok(r) => r,
            Err(e @ (TrainError::Config(_) | TrainError::Leakage { .. })) => {
                return Err(GridError::Config(e.to_string()));
            }
            Err(e) => return Ok(Job::Failed(format!("{}: {e}", period.name))),
        };
        let rep = match test_run(full, period, &result) {
            Ok(r) => r,
            Err(e) => return Ok(Job::Failed(format!("{}: {e}", period.name))),
        };
        if let Some(dir) = dir {
            let ckpt = dir.join(format!("period{}.ckpt", k + 1));
            checkpoint::save(&ckpt, &result.params).map_err(|e| GridError::Io {
                path: ckpt.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
            let log = dir.join(format!("period{}_loss.csv", k + 1));
            std::fs::write(&log, epoch_csv(&result.epochs)).map_err(io_err(&log))?;
        }
        out.push(PeriodMetrics {
            period: period.name.clone(),
            metrics: rep.metrics,
            final_loss: result.final_loss(),
        });
    }
    let avg = out.iter().map(|p| p.metrics.sharpe).sum::<f64>() / out.len() as f64;
    Ok(Job::Done(Box::new(RunRecord {
        run_hash: String::new(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        config: cfg.clone(),
        periods: out,
        avg_sharpe: Some(avg),
        error: None,
    })))
}

/// Train and test every (config, seed) pair.
///
/// With `runs_dir`, each run writes `runs_dir/<run-hash>/<seed>/` (config
/// echo, checkpoints, loss logs, `metrics.json`) and runs whose
/// `metrics.json` already exists are loaded instead of recomputed. Failed
/// runs are recorded and excluded from the summary statistics.
pub fn grid_search(
    full: &AlignedSeries,
    periods: &[Period],
    grid: &GridSpec,
    runs_dir: Option<&Path>,
    exec: Exec,
) -> Result<GridOutcome, GridError> {
    grid.validate_seeds()?;
    if periods.is_empty() {
        return Err(GridError::Empty("no periods".into()));
    }
    let configs = grid.configs()?;
    let digest = full.digest();
    let jobs: Vec<(usize, TrainConfig, String)> = configs
        .iter()
        .enumerate()
        .flat_map(|(k, c)| {
            let hash = run_hash(c, &digest, periods);
            grid.seeds.iter().map(move |&seed| {
                let mut cfg = c.clone();
                cfg.seed = seed;
                (k, cfg, hash.clone())
            })
        })
        .collect();

    let results = exec.map(
        &jobs,
        |(_, cfg, hash)| -> Result<(RunRecord, bool), GridError> {
            let dir = runs_dir.map(|r| r.join(hash).join(cfg.seed.to_string()));
            if let Some(dir) = &dir {
                let metrics = dir.join("metrics.json");
                if let Ok(text) = std::fs::read_to_string(&metrics) {
                    if let Ok(rec) = serde_json::from_str::<RunRecord>(&text) {
                        if rec.run_hash == *hash && rec.seed == cfg.seed {
                            return Ok((rec, true));
                        }
                    }
                }
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                let echo = dir.join("config.json");
                let json = serde_json::to_string_pretty(cfg).expect("config serializes");
                std::fs::write(&echo, json).map_err(io_err(&echo))?;
            }
            let mut rec = match run_one(full, periods, cfg, dir.as_deref(), exec)? {
                Job::Done(rec) => *rec,
                Job::Failed(msg) => {
                    log::warn!("run {hash}/{} failed: {msg}", cfg.seed);
                    RunRecord {
                        run_hash: String::new(),
                        config_hash: cfg.config_hash(),
                        seed: cfg.seed,
                        config: cfg.clone(),
                        periods: Vec::new(),
                        avg_sharpe: None,
                        error: Some(msg),
                    }
                }
            };
            rec.run_hash = hash.clone();
            if let Some(dir) = &dir {
                let path = dir.join("metrics.json");
                let json = serde_json::to_string_pretty(&rec).expect("record serializes");
                std::fs::write(&path, json).map_err(io_err(&path))?;
            }
            Ok((rec, false))
        },
    );

    let mut runs = Vec::with_capacity(jobs.len());
    let mut resumed = 0;
    for r in results {
        let (rec, loaded) = r?;
        resumed += loaded as usize;
        runs.push(rec);
    }

    let mut summary: Vec<SummaryRow> = configs
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mine: Vec<&RunRecord> = jobs
                .iter()
                .zip(&runs)
                .filter(|((j, _, _), _)| *j == k)
                .map(|(_, r)| r)
                .collect();
            let ok: Vec<f64> = mine.iter().filter_map(|r| r.avg_sharpe).collect();
            let (mean, std) = if ok.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                report::mean_std(&ok)
            };
            SummaryRow {
                run_hash: mine[0].run_hash.clone(),
                config_hash: c.config_hash(),
                config: c.clone(),
                mean,
                std,
                completed: ok.len(),
                failed: mine.len() - ok.len(),
            }
        })
        .collect();
    summary.sort_by(|a, b| match (a.mean.is_nan(), b.mean.is_nan()) {
        (false, false) => b.mean.total_cmp(&a.mean),
        (x, y) => x.cmp(&y),
    });
    Ok(GridOutcome {
        runs,
        summary,
        resumed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};
    use chrono::Duration;

    fn base() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs: 1,
            seq_len: 8,
            lookback: 8,
            beta_window: 24,
            norm_block: 6,
            hidden: 3,
            chunk: 8,
            ..TrainConfig::default()
        }
    }

    fn setup() -> (AlignedSeries, Vec<Period>) {
        let s = generate(&SyntheticConfig {
            hours: 260,
            ..Default::default()
        });
        let t = |i: usize| s.timestamps[i];
        let period = Period {
            name: "synthetic".into(),
            split: SplitSpec {
                train_start: t(0),
                train_end: t(199),
                test_start: t(200),
                test_end: t(259),
            },
        };
        (s, vec![period])
    }

    #[test]
    fn bookkeeping_and_resume() {
        let (s, periods) = setup();
        let grid = GridSpec {
            base: base(),
            base_lr: Some(vec![1e-3, 3e-4]),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = grid_search(&s, &periods, &grid, Some(dir.path()), Exec::Parallel).unwrap();
        assert_eq!(out.runs.len(), 10);
        assert_eq!(out.summary.len(), 2);
        assert_eq!(out.resumed, 0);
        assert!(out.summary.iter().all(|r| r.completed == 5 && r.std > 0.0));
        let run_dir = dir.path().join(&out.runs[0].run_hash).join("0");
        for f in [
            "config.json",
            "metrics.json",
            "period1.ckpt",
            "period1_loss.csv",
        ] {
            assert!(run_dir.join(f).exists(), "{f}");
        }
        let again = grid_search(&s, &periods, &grid, Some(dir.path()), Exec::Sequential).unwrap();
        assert_eq!(again.resumed, 10);
        assert_eq!(again.runs, out.runs);
    }

    #[test]
    fn seeds_must_differ() {
        let (s, periods) = setup();
        let grid = GridSpec {
            base: base(),
            seeds: vec![7, 7, 7],
            ..Default::default()
        };
        assert!(matches!(
            grid_search(&s, &periods, &grid, None, Exec::Sequential),
            Err(GridError::Seed(_))
        ));
    }

    #[test]
    fn empty_axis_is_empty_grid() {
        let grid = GridSpec {
            base: base(),
            epochs: Some(vec![]),
            ..Default::default()
        };
        assert!(matches!(grid.configs(), Err(GridError::Empty(_))));
    }

    #[test]
    fn penalty_axes_collapse_for_baseline_and_budget_applies() {
        let mut grid = GridSpec {
            base: base(),
            gamma: Some(vec![0.1, 0.2]),
            xi: Some(vec![1e-5, 1e-4]),
            ..Default::default()
        };
        assert_eq!(grid.configs().unwrap().len(), 1);
        grid.base.loss.variant = LossVariant::L1;
        assert_eq!(grid.configs().unwrap().len(), 4);
        grid.max_configs = Some(3);
        assert_eq!(grid.configs().unwrap().len(), 3);
    }

    #[test]
    fn failed_runs_are_counted_not_fatal() {
        let (s, mut periods) = setup();
        // a test span too short to backtest fails the run, not the grid
        periods[0].split.test_end = periods[0].split.test_start + Duration::hours(1);
        let grid = GridSpec {
            base: base(),
            seeds: vec![1, 2],
            ..Default::default()
        };
        let out = grid_search(&s, &periods, &grid, None, Exec::Sequential).unwrap();
        assert_eq!(out.summary[0].failed, 2);
        assert_eq!(out.summary[0].completed, 0);
        assert!(out.runs.iter().all(|r| r.error.is_some()));
    }
}
