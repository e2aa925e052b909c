use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pairfolio::backtest::StrategyKind;
use pairfolio::losses::LossVariant;
use pairfolio::portfolio::FeeScheme;
use pairfolio_cli::{
    cmd_backtest, cmd_fetch, cmd_grid, cmd_report, cmd_train, init_pool, CliError, Config, Ctx,
};

#[derive(Parser, Debug)]
#[command(
    name = "pairfolio",
    version,
    about = "Train, backtest and compare allocators for a BTCUP/BTCDOWN pair"
)]
struct Cli {
    /// TOML configuration file; defaults apply to every missing key.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Directory of the cached ticker CSVs.
    #[arg(long, global = true, env = pairfolio_cli::DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Root of the per-run directories (checkpoints, loss logs).
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    /// Root of the command outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override any config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download (or generate) hourly candles for the three tickers.
    Fetch(FetchArgs),
    /// Train one configuration on every walk-forward period.
    Train(TrainArgs),
    /// Backtest strategies on the test spans and tabulate the results.
    Backtest(BacktestArgs),
    /// Hyperparameter grid with repeated seeds.
    Grid(GridArgs),
    /// Rebuild the summary table from saved backtest reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct FetchArgs {
    /// `binance` or `synthetic`.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    start: Option<String>,
    #[arg(long)]
    end: Option<String>,
    #[arg(long)]
    btc_symbol: Option<String>,
    #[arg(long)]
    up_symbol: Option<String>,
    #[arg(long)]
    down_symbol: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `baseline`, `l1` or `l2`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    /// `none` or `fee`.
    #[arg(long)]
    fees: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args, Debug)]
struct BacktestArgs {
    /// Comma-separated strategies (ns, svc1, svc2, nwp, ewp, gmvp, btc).
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Comma-separated fee schemes.
    #[arg(long, value_delimiter = ',')]
    fees: Option<Vec<String>>,
    /// Comma-separated seeds of the learned strategies.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    max_configs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory of report JSON files; defaults to `<out>/backtest/reports`.
    #[arg(long)]
    reports: Option<PathBuf>,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_value(p: &std::path::Path) -> String {
    quoted(&p.to_string_lossy())
}

fn push<T: ToString>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn parse_list<T: std::str::FromStr>(values: &[String], what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    values
        .iter()
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| CliError::Config(format!("{what} `{s}`: {e}")))
        })
        .collect()
}

fn array(items: impl IntoIterator<Item = String>) -> String {
    format!("[{}]", items.into_iter().collect::<Vec<_>>().join(", "))
}

/// Flags as `key=value` overrides, applied after `--set`.
fn overrides(cli: &Cli) -> Result<Vec<String>, CliError> {
    let mut o = cli.set.clone();
    push(&mut o, "data.dir", cli.data_dir.as_deref().map(path_value));
    push(&mut o, "runs_dir", cli.runs_dir.as_deref().map(path_value));
    push(&mut o, "output_dir", cli.out.as_deref().map(path_value));
    push(&mut o, "workers", cli.workers);
    match &cli.command {
        Command::Fetch(a) => {
            push(&mut o, "data.source", a.source.as_deref().map(quoted));
            push(&mut o, "data.start", a.start.as_deref().map(quoted));
            push(&mut o, "data.end", a.end.as_deref().map(quoted));
            push(
                &mut o,
                "data.btc_symbol",
                a.btc_symbol.as_deref().map(quoted),
            );
            push(&mut o, "data.up_symbol", a.up_symbol.as_deref().map(quoted));
            push(
                &mut o,
                "data.down_symbol",
                a.down_symbol.as_deref().map(quoted),
            );
        }
        Command::Train(a) => {
            if let Some(loss) = &a.loss {
                let v: LossVariant = loss.parse().map_err(|e| CliError::Config(format!("{e}")))?;
                let name = serde_json::to_value(v).expect("variant serializes");
                push(&mut o, "train.loss.variant", name.as_str().map(quoted));
            }
            if let Some(fees) = &a.fees {
                let f: FeeScheme = fees
                    .parse()
                    .map_err(|e| CliError::Config(format!("fee scheme: {e}")))?;
                push(&mut o, "train.fee_scheme", Some(quoted(f.as_str())));
            }
            push(&mut o, "train.loss.gamma", a.gamma.map(toml_float));
            push(&mut o, "train.loss.xi", a.xi.map(toml_float));
            push(&mut o, "train.seed", a.seed);
            push(&mut o, "train.epochs", a.epochs);
            push(&mut o, "train.batch_size", a.batch_size);
            push(&mut o, "train.base_lr", a.lr.map(toml_float));
            push(&mut o, "train.weight_decay", a.weight_decay.map(toml_float));
        }
        Command::Backtest(a) => {
            if let Some(s) = &a.strategies {
                let kinds: Vec<StrategyKind> = parse_list(s, "strategy")?;
                push(
                    &mut o,
                    "backtest.strategies",
                    Some(array(kinds.iter().map(|k| quoted(k.as_str())))),
                );
            }
            if let Some(f) = &a.fees {
                let schemes: Vec<FeeScheme> = parse_list(f, "fee scheme")?;
                push(
                    &mut o,
                    "backtest.fee_schemes",
                    Some(array(schemes.iter().map(|f| quoted(f.as_str())))),
                );
            }
            if let Some(seeds) = &a.seeds {
                push(
                    &mut o,
                    "backtest.seeds",
                    Some(array(seeds.iter().map(u64::to_string))),
                );
            }
        }
        Command::Grid(a) => {
            push(&mut o, "grid.max_configs", a.max_configs);
            if let Some(seeds) = &a.seeds {
                push(
                    &mut o,
                    "grid.seeds",
                    Some(array(seeds.iter().map(u64::to_string))),
                );
            }
        }
        Command::Report(_) => {}
    }
    Ok(o)
}

/// A float literal TOML will not read back as an integer.
fn toml_float(x: f64) -> String {
    toml::Value::Float(x).to_string()
}

/// Echo a command's summary, then its output directory on the last line.
fn print_summary(dir: &std::path::Path, file: &str) {
    if let Ok(text) = std::fs::read_to_string(dir.join(file)) {
        println!("{}", text.trim_end());
    }
    println!("{}", dir.display());
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref(), &overrides(cli)?)?;
    init_pool(cfg.workers);
    let ctx = Ctx::new(cfg, cli.config.clone());
    match &cli.command {
        Command::Fetch(_) => {
            for p in cmd_fetch(&ctx)? {
                println!("{}", p.display());
            }
        }
        Command::Train(_) => println!("{}", cmd_train(&ctx)?.display()),
        Command::Backtest(_) => print_summary(&cmd_backtest(&ctx)?, "summary.txt"),
        Command::Grid(_) => print_summary(&cmd_grid(&ctx)?, "summary.csv"),
        Command::Report(a) => {
            let dir = a
                .reports
                .clone()
                .unwrap_or_else(|| ctx.cfg.output_dir.join("backtest").join("reports"));
            print_summary(&cmd_report(&ctx, &dir)?, "summary.txt");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
