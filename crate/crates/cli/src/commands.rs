//! fetch, train, backtest, grid and report.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pairfolio::backtest::report::{report_table, ReportError, SummaryTable};
use pairfolio::backtest::{run_backtest, BacktestReport, LearnedModel, Strategy, StrategyKind};
use pairfolio::data::synthetic::generate_candles;
use pairfolio::data::{
    align, cache_path, fetch_cached, ingest_csv, write_csv, AlignedSeries, BinanceClient,
    DataError, FetchError, RetryPolicy,
};
use pairfolio::nn::checkpoint;
use pairfolio::portfolio::FeeScheme;
use pairfolio::training::grid::{epoch_csv, grid_search, run_hash, GridError, Period};
use pairfolio::training::{train_period, TrainConfig, TrainError};
use pairfolio::Exec;
use serde::Serialize;

use crate::config::{Config, DataSource};
use crate::manifest::RunManifest;
use crate::{create_dir, write_file, CliError};

/// A loaded configuration and where it came from.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: Config,
    pub config_path: Option<PathBuf>,
    pub exec: Exec,
}

impl Ctx {
    pub fn new(cfg: Config, config_path: Option<PathBuf>) -> Self {
        Self {
            cfg,
            config_path,
            exec: Exec::Parallel,
        }
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.config_path.as_deref(), &self.cfg)
    }
}

fn data_err(e: DataError) -> CliError {
    match e {
        DataError::Fetch(FetchError::UnknownSymbol(s)) => {
            CliError::Config(format!("unknown symbol `{s}`"))
        }
        other => CliError::Runtime(other.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Leakage { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn grid_err(e: GridError) -> CliError {
    match e {
        GridError::Io { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// Download (or generate) the three ticker CSVs into the data directory.
pub fn cmd_fetch(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let d = &ctx.cfg.data;
    let dir = create_dir(&d.dir)?;
    let mut manifest = ctx.manifest("fetch");
    let mut written = Vec::new();
    match d.source {
        DataSource::Synthetic => {
            let candles = generate_candles(&d.synthetic());
            for (symbol, c) in d.symbols().into_iter().zip(candles.iter()) {
                let path = cache_path(&dir, symbol);
                write_csv(&path, c).map_err(data_err)?;
                log::info!("{symbol}: {} synthetic rows", c.len());
                written.push(path);
            }
        }
        DataSource::Binance => {
            let client = BinanceClient::new(d.base_url.clone());
            for symbol in d.symbols() {
                let (c, network) = fetch_cached(
                    &client,
                    &RetryPolicy::default(),
                    &dir,
                    symbol,
                    d.start,
                    d.end,
                )
                .map_err(data_err)?;
                log::info!(
                    "{symbol}: {} rows ({})",
                    c.len(),
                    if network { "downloaded" } else { "cache hit" }
                );
                written.push(cache_path(&dir, symbol));
            }
        }
    }
    for p in &written {
        manifest.add(&dir, p);
    }
    manifest.write(&dir)?;
    Ok(written)
}

/// Aligned series from the cached CSVs.
pub fn load_series(cfg: &Config) -> Result<AlignedSeries, CliError> {
    let mut tickers = Vec::with_capacity(3);
    for symbol in cfg.data.symbols() {
        let path = cache_path(&cfg.data.dir, symbol);
        if !path.exists() {
            return Err(CliError::Runtime(format!(
                "missing data file {} (run `pairfolio fetch` first)",
                path.display()
            )));
        }
        tickers.push(ingest_csv(&path).map_err(data_err)?);
    }
    align(&tickers[0], &tickers[1], &tickers[2], cfg.data.gap_fill).map_err(data_err)
}

/// `runs_dir/<run-hash>/<seed>` for a training configuration.
pub fn run_dir(cfg: &Config, train: &TrainConfig, data_digest: &str) -> PathBuf {
    cfg.runs_dir
        .join(run_hash(train, data_digest, &cfg.periods()))
        .join(train.seed.to_string())
}

pub fn checkpoint_path(dir: &Path, period_index: usize) -> PathBuf {
    dir.join(format!("period{}.ckpt", period_index + 1))
}

#[derive(Debug, Serialize)]
struct PeriodTraining<'a> {
    period: &'a str,
    segments: usize,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    checkpoint: PathBuf,
    loss_log: PathBuf,
}

/// Train `cfg.train` on every period; returns the run directory.
pub fn cmd_train(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let full = load_series(cfg)?;
    let digest = full.digest();
    let dir = create_dir(&run_dir(cfg, &cfg.train, &digest))?;
    let mut manifest = ctx.manifest("train");
    manifest.data_digest = Some(digest);

    let echo = dir.join("config.json");
    write_file(
        &echo,
        serde_json::to_string_pretty(&cfg.train).expect("config serializes"),
    )?;
    manifest.add(&dir, &echo);

    let periods = cfg.periods();
    let mut summary = Vec::new();
    for (k, period) in periods.iter().enumerate() {
        let result = train_period(&full, &period.split, &cfg.train, ctx.exec).map_err(train_err)?;
        log::info!(
            "{}: loss {:.5} -> {:.5} in {:.1}s",
            period.name,
            result.initial_loss(),
            result.final_loss(),
            result.wall_clock_secs
        );
        let ckpt = checkpoint_path(&dir, k);
        checkpoint::save(&ckpt, &result.params).map_err(|e| CliError::io(&ckpt, e))?;
        let log_path = dir.join(format!("period{}_loss.csv", k + 1));
        write_file(&log_path, epoch_csv(&result.epochs))?;
        manifest.add(&dir, &ckpt);
        manifest.add(&dir, &log_path);
        summary.push((period.name.clone(), result, ckpt, log_path));
    }
    let rows: Vec<PeriodTraining> = summary
        .iter()
        .map(|(name, r, ckpt, log_path)| PeriodTraining {
            period: name,
            segments: r.segments,
            steps: r.steps,
            initial_loss: r.initial_loss(),
            final_loss: r.final_loss(),
            checkpoint: ckpt.strip_prefix(&dir).unwrap_or(ckpt).to_path_buf(),
            loss_log: log_path
                .strip_prefix(&dir)
                .unwrap_or(log_path)
                .to_path_buf(),
        })
        .collect();
    let train_json = dir.join("train.json");
    write_file(
        &train_json,
        serde_json::to_string_pretty(&rows).expect("summary serializes"),
    )?;
    manifest.add(&dir, &train_json);
    manifest.write(&dir)?;
    Ok(dir)
}

struct Job {
    kind: StrategyKind,
    fees: FeeScheme,
    period: usize,
    seed: Option<u64>,
    model: Option<LearnedModel>,
}

fn report_name(r: &BacktestReport, period_index: usize) -> String {
    let mut name = format!("{}_{}_p{}", r.strategy, r.fee_scheme, period_index + 1);
    if let Some(seed) = r.seed {
        name.push_str(&format!("_s{seed}"));
    }
    name + ".json"
}

fn table_err(e: ReportError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_summary(
    dir: &Path,
    table: &SummaryTable,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    let csv = dir.join("summary.csv");
    write_file(&csv, table.to_csv())?;
    let txt = dir.join("summary.txt");
    write_file(&txt, table.to_text())?;
    manifest.add(dir, &csv);
    manifest.add(dir, &txt);
    Ok(())
}

/// Backtest every configured strategy, period, fee scheme and seed.
///
/// Learned strategies read `period{k}.ckpt` from the run directory of the
/// training configuration they correspond to; a missing file is an error
/// naming the expected path. Returns the output directory.
pub fn cmd_backtest(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let bt = &cfg.backtest;
    if bt.strategies.is_empty() || bt.fee_schemes.is_empty() {
        return Err(CliError::Config(
            "backtest needs at least one strategy and fee scheme".into(),
        ));
    }
    let full = load_series(cfg)?;
    let digest = full.digest();
    let periods = cfg.periods();
    let seeds = if bt.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        bt.seeds.clone()
    };

    let mut jobs = Vec::new();
    for &kind in &bt.strategies {
        for &fees in &bt.fee_schemes {
            for (k, period) in periods.iter().enumerate() {
                let Some(_) = kind.loss_variant() else {
                    jobs.push(Job {
                        kind,
                        fees,
                        period: k,
                        seed: None,
                        model: None,
                    });
                    continue;
                };
                for &seed in &seeds {
                    let train = cfg.learned_config(kind, fees, seed).expect("learned kind");
                    let path = checkpoint_path(&run_dir(cfg, &train, &digest), k);
                    if !path.exists() {
                        return Err(CliError::Runtime(format!(
                            "missing checkpoint for {kind} ({fees}, seed {seed}, {}): {}",
                            period.name,
                            path.display()
                        )));
                    }
                    let params = checkpoint::load(&path).map_err(|e| CliError::io(&path, e))?;
                    if params.spec != train.model_spec() {
                        return Err(CliError::Runtime(format!(
                            "{}: model shape {:?} does not match the configured {:?}",
                            path.display(),
                            params.spec,
                            train.model_spec()
                        )));
                    }
                    let train_range = period.split.train_range(&full).map_err(data_err)?;
                    jobs.push(Job {
                        kind,
                        fees,
                        period: k,
                        seed: Some(seed),
                        model: Some(LearnedModel {
                            params: Arc::new(params),
                            lookback: train.lookback,
                            norm_block: train.norm_block,
                            trained_until: full.timestamps[train_range.end - 1],
                        }),
                    });
                }
            }
        }
    }

    let results = ctx.exec.map(&jobs, |job| {
        let period = &periods[job.period];
        let mut strategy = match &job.model {
            Some(m) => Strategy::learned(job.kind, m.clone()),
            None => Strategy::benchmark(job.kind),
        };
        strategy.window = bt.window;
        let test = period.split.test_range(&full).map_err(data_err)?;
        let mut rep =
            run_backtest(&strategy, &full, test, job.fees, &period.name).map_err(|e| {
                CliError::Runtime(format!(
                    "{} / {} / {}: {e}",
                    job.kind, period.name, job.fees
                ))
            })?;
        rep.seed = job.seed;
        if let Some(seed) = job.seed {
            let train = cfg
                .learned_config(job.kind, job.fees, seed)
                .expect("learned kind");
            rep.config_hash = Some(train.config_hash());
        }
        Ok::<_, CliError>(rep)
    });

    let dir = create_dir(&cfg.output_dir.join("backtest"))?;
    let report_dir = create_dir(&dir.join("reports"))?;
    let mut manifest = ctx.manifest("backtest");
    manifest.data_digest = Some(digest);
    let mut reports = Vec::with_capacity(results.len());
    for (job, r) in jobs.iter().zip(results) {
        let rep = r?;
        let path = report_dir.join(report_name(&rep, job.period));
        write_file(
            &path,
            serde_json::to_string_pretty(&rep).expect("report serializes"),
        )?;
        manifest.add(&dir, &path);
        reports.push(rep);
    }
    let table = report_table(&reports).map_err(table_err)?;
    write_summary(&dir, &table, &mut manifest)?;
    manifest.write(&dir)?;
    Ok(dir)
}

/// Rebuild the summary table from a directory of backtest reports.
pub fn cmd_report(ctx: &Ctx, reports_dir: &Path) -> Result<PathBuf, CliError> {
    let entries = std::fs::read_dir(reports_dir).map_err(|e| CliError::io(reports_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let rep: BacktestReport = serde_json::from_str(&text).map_err(|e| CliError::io(p, e))?;
        reports.push(rep);
    }
    let table = report_table(&reports).map_err(table_err)?;
    let dir = create_dir(&ctx.cfg.output_dir.join("report"))?;
    let mut manifest = ctx.manifest("report");
    write_summary(&dir, &table, &mut manifest)?;
    manifest.write(&dir)?;
    Ok(dir)
}

/// Grid search over the configured axes and seeds; returns the output
/// directory holding the ranked summary.
pub fn cmd_grid(ctx: &Ctx) -> Result<PathBuf, CliError> {
    let cfg = &ctx.cfg;
    let spec = cfg.grid_spec();
    spec.validate_seeds().map_err(grid_err)?;
    spec.configs().map_err(grid_err)?;
    let full = load_series(cfg)?;
    let digest = full.digest();
    let periods: Vec<Period> = cfg.periods();
    let outcome =
        grid_search(&full, &periods, &spec, Some(&cfg.runs_dir), ctx.exec).map_err(grid_err)?;
    log::info!("{} runs, {} resumed", outcome.runs.len(), outcome.resumed);

    for rec in &outcome.runs {
        let run = cfg.runs_dir.join(&rec.run_hash).join(rec.seed.to_string());
        let mut m = ctx.manifest("grid");
        m.data_digest = Some(digest.clone());
        let mut files: Vec<PathBuf> = std::fs::read_dir(&run)
            .map_err(|e| CliError::io(&run, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .is_some_and(|n| n != crate::manifest::FILE_NAME)
            })
            .collect();
        files.sort();
        for f in &files {
            m.add(&run, f);
        }
        m.write(&run)?;
    }

    let dir = create_dir(&cfg.output_dir.join("grid"))?;
    let mut manifest = ctx.manifest("grid");
    manifest.data_digest = Some(digest);
    let summary = dir.join("summary.csv");
    write_file(&summary, outcome.summary_csv())?;
    let runs = dir.join("runs.json");
    write_file(
        &runs,
        serde_json::to_string_pretty(&outcome.runs).expect("runs serialize"),
    )?;
    manifest.add(&dir, &summary);
    manifest.add(&dir, &runs);
    manifest.write(&dir)?;
    Ok(dir)
}
