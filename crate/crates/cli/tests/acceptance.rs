//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every verdict is printed
//! even when the others pass. Exits non-zero if any criterion fails; a
//! criterion whose inputs are unavailable is reported as SKIP.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use pairfolio::backtest::{gmvp_weights, run_backtest, BacktestReport, Strategy, StrategyKind};
use pairfolio::data::synthetic::{generate, SyntheticConfig};
use pairfolio::data::{align, AlignedSeries, Candle, SplitSpec, Ticker};
use pairfolio::losses::{beta_model, hl1, hl2, LossConfig, LossVariant};
use pairfolio::metrics::{fapv, mdd, sharpe};
use pairfolio::nn::{init_params, ModelSpec};
use pairfolio::portfolio::{
    reallocate, shrinkage, shrinkage_iterative_oracle, FeeSchedule, FeeScheme, Pair, PortfolioState,
};
use pairfolio::training::grid::{learned_strategy, Period};
use pairfolio::training::{chunk_loss, chunk_objective, make_trajectories, train, TrainConfig};
use pairfolio::Exec;
use pairfolio_cli::{cmd_grid, cmd_train, Config, Ctx, DataSource, DATA_DIR_ENV};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Verdict;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn random_pair(rng: &mut ChaCha8Rng) -> Pair {
    let a: f64 = rng.random_range(0.0..=1.0);
    [a, 1.0 - a]
}

fn fee_oracle() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let wp = random_pair(&mut rng);
        let w = random_pair(&mut rng);
        let c = rng.random_range(0.0..0.1);
        let closed = shrinkage(wp, w, c).unwrap();
        let oracle = shrinkage_iterative_oracle(&wp, &w, c).unwrap();
        worst = worst.max((closed - oracle).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-10 && secs < 5.0,
        format!("max |closed - iterative| = {worst:.2e} over 10000 cases in {secs:.2}s (tol 1e-10, < 5s)"),
    )
}

fn accounting_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t0 = Utc.with_ymd_and_hms(2021, 7, 4, 0, 0, 0).unwrap();
    let fees = FeeSchedule::blvt();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p0 = rng.random_range(0.5..2.0);
        let mut prices = [rng.random_range(1.0..100.0), rng.random_range(0.001..1.0)];
        let mut state = PortfolioState::new(p0, random_pair(&mut rng), prices, t0).unwrap();
        let mut compounded = p0;
        for t in 1..=500 {
            for p in &mut prices {
                *p *= 1.0 + rng.random_range(-0.05..0.05);
            }
            let (next, r) = reallocate(
                &state,
                random_pair(&mut rng),
                prices,
                t0 + Duration::hours(t),
                &fees,
            )
            .unwrap();
            compounded *= 1.0 + r;
            state = next;
        }
        worst = worst.max((state.value - compounded).abs() / state.value.abs());
    }
    verdict(
        worst <= 1e-12,
        format!("max relative gap {worst:.2e} over 1000 x 500-step trajectories (tol 1e-12)"),
    )
}

fn gradient_integrity() -> Verdict {
    let started = Instant::now();
    let series = generate(&SyntheticConfig {
        hours: 300,
        seed: 11,
        ..Default::default()
    });
    let base = TrainConfig {
        seq_len: 8,
        hidden: 8,
        lookback: 12,
        norm_block: 6,
        beta_window: 24,
        fee_scheme: FeeScheme::Fee,
        ..TrainConfig::default()
    };
    let set = make_trajectories(&series, &base).unwrap();
    let params = init_params(ModelSpec::with_hidden(base.hidden), 3);
    let fees = FeeScheme::Fee.schedule();
    let segs = [0, 17, 60, 120];
    let losses = [
        ("L_BL", LossConfig::baseline()),
        (
            "L1",
            LossConfig {
                variant: LossVariant::L1,
                gamma: 0.1,
                xi: 1e-3,
            },
        ),
        (
            "L2",
            LossConfig {
                variant: LossVariant::L2,
                gamma: 0.1,
                xi: 1e-3,
            },
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (_, loss) in &losses {
        let r = chunk_objective(&set, &params, &segs, loss, &fees, segs.len() as f64).unwrap();
        let flat: Vec<f64> = r
            .grads
            .iter()
            .flat_map(|g| g.data.iter().copied())
            .collect();
        let picks = rand::seq::index::sample(&mut rng, params.num_params(), 64);
        for k in picks {
            // gradients here are ~1e-5 against an O(1) loss; a smaller step
            // is dominated by cancellation in the loss evaluation
            let h = 1e-5;
            let mut p = params.clone();
            p.flat_set(k, params.flat_get(k) + h);
            let up = chunk_loss(&set, &p, &segs, loss, &fees, segs.len() as f64).unwrap();
            p.flat_set(k, params.flat_get(k) - h);
            let down = chunk_loss(&set, &p, &segs, loss, &fees, segs.len() as f64).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let err = (flat[k] - numeric).abs() / flat[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} on {checked} parameters (3 losses x 64, fees on) in {secs:.1}s (tol 1e-4, < 60s)"),
    )
}

fn series_from(btc: &[f64], up: &[f64], down: &[f64]) -> AlignedSeries {
    let t0 = Utc.with_ymd_and_hms(2021, 7, 4, 0, 0, 0).unwrap();
    let mk = |p: &[f64]| -> Vec<Candle> {
        p.iter()
            .enumerate()
            .map(|(i, &x)| Candle::flat(t0 + Duration::hours(i as i64), x))
            .collect()
    };
    align(&mk(btc), &mk(up), &mk(down), false).unwrap()
}

fn neutral_invariant() -> Verdict {
    let n = 1100;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut down = vec![1.0];
    for i in 1..n {
        let prev: f64 = down[i - 1];
        down.push((prev * (1.0 + rng.random_range(-0.02..0.02))).clamp(0.5, 1.5));
    }
    let up: Vec<f64> = down.iter().map(|d| 2.0 - 0.7 * d).collect();
    let s = series_from(&down, &up, &down);
    let test = 60..1061;
    let rep = run_backtest(
        &Strategy::benchmark(StrategyKind::Nwp),
        &s,
        test,
        FeeScheme::None,
        "linear",
    )
    .unwrap();
    let steps = rep.values.len() - 2;
    let worst = rep.values[1..]
        .windows(2)
        .map(|w| (w[1] / w[0] - 1.0).abs())
        .fold(0.0, f64::max);
    verdict(
        worst < 1e-9 && rep.metrics.mdd < 1e-8 && steps == 1000,
        format!(
            "{steps} steps, max per-step change {worst:.2e} (tol 1e-9), mdd {:.2e} (tol 1e-8), {} fallbacks",
            rep.metrics.mdd, rep.fallbacks
        ),
    )
}

fn penalty_margin() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let (mut inside, mut outside) = (0, 0);
    for i in 0..100_000 {
        let beta_mkt: f64 = -rng.random_range(0.05..3.0);
        let gamma: f64 = rng.random_range(0.0..=1.0);
        let (lo, hi) = ((1.0 + gamma) * beta_mkt, (1.0 - gamma) * beta_mkt);
        let target = if i % 2 == 0 {
            rng.random_range(lo..=hi)
        } else if rng.random_bool(0.5) {
            lo - rng.random_range(1e-6..2.0)
        } else {
            (hi + rng.random_range(1e-6..2.0)).min(-1e-3)
        };
        let y: Pair = [rng.random_range(1.0..100.0), rng.random_range(0.001..1.0)];
        let ratio = -target * y[1] / y[0];
        let w: Pair = [1.0 / (1.0 + ratio), ratio / (1.0 + ratio)];
        let v_up = rng.random_range(0.01..10.0);
        let bm = beta_model(w, y).unwrap();
        let is_inside = lo <= bm && bm <= hi;
        let a = hl1(w, y, v_up, beta_mkt, gamma).unwrap();
        let b = hl2(w, y, v_up, beta_mkt, gamma).unwrap();
        let ok = if is_inside {
            a == 0.0 && b == 0.0
        } else {
            a > 0.0 && b > 0.0
        };
        violations += usize::from(!ok);
        if is_inside {
            inside += 1;
        } else {
            outside += 1;
        }
    }
    let example = hl2([0.5, 0.5], [3.0, 2.0], 2.0, -1.0, 0.1).unwrap();
    verdict(
        violations == 0 && (example - 0.64).abs() <= 1e-12,
        format!("{violations} violations over {inside} inside / {outside} outside triples; HL2 example = {example:.15}"),
    )
}

fn gmvp_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let su: f64 = rng.random_range(0.001..0.05);
        let sd: f64 = rng.random_range(0.001..0.05);
        let rho: f64 = rng.random_range(-0.99..0.99);
        let n = 48;
        let (mut up, mut down) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let (z1, z2): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            up.push(su * z1);
            down.push(sd * (rho * z1 + (1.0 - rho * rho).sqrt() * z2));
        }
        let w = gmvp_weights(&up, &down).unwrap();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let (mu, md) = (mean(&up), mean(&down));
        let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / (n - 1) as f64
        };
        let (vu, vd, c) = (
            cov(&up, mu, &up, mu),
            cov(&down, md, &down, md),
            cov(&up, mu, &down, md),
        );
        let var = |x: f64| x * x * vu + (1.0 - x) * (1.0 - x) * vd + 2.0 * x * (1.0 - x) * c;
        let best = (0..=1000)
            .map(|k| k as f64 / 1000.0)
            .min_by(|a, b| var(*a).total_cmp(&var(*b)))
            .unwrap();
        worst = worst.max((w[0] - best).abs());
    }
    verdict(
        worst <= 1e-3 + 1e-12,
        format!("max |closed - grid minimizer| = {worst:.2e} over 1000 windows (tol 1e-3)"),
    )
}

fn metric_units() -> Verdict {
    let s = sharpe(&[0.01, 0.02, 0.03]).unwrap();
    let d = mdd(&[1.0, 1.2, 0.9, 1.1]);
    let f = fapv(&[0.10, -0.10]);
    verdict(
        (s - 2.0).abs() <= 1e-12 && (d - 0.25).abs() <= 1e-12 && (f - 0.99).abs() <= 1e-12,
        format!("sharpe {s:.15}, mdd {d:.15}, fapv {f:.15} (tol 1e-12)"),
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Scaled model used by the learning experiment.
fn scaled_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        epochs: 20,
        base_lr: 1e-3,
        fee_scheme: FeeScheme::None,
        seed,
        seq_len: 16,
        lookback: 16,
        beta_window: 48,
        norm_block: 12,
        hidden: 8,
        ..TrainConfig::default()
    }
}

fn learned_test(
    train_part: &AlignedSeries,
    full: &AlignedSeries,
    test: std::ops::Range<usize>,
    cfg: &TrainConfig,
) -> (BacktestReport, f64) {
    let started = Instant::now();
    let result = train(train_part, cfg, Exec::Parallel).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let rep = run_backtest(
        &learned_strategy(&result),
        full,
        test,
        cfg.fee_scheme,
        "test",
    )
    .unwrap();
    (rep, secs)
}

fn scaled_learning() -> Verdict {
    const TRAIN: usize = 4000;
    const TEST: usize = 1000;
    const SEEDS: u64 = 5;
    const GAMMA: f64 = 0.2;
    const XI_CANDIDATES: [f64; 3] = [1e-5, 1e-4, 1e-3];
    const HOLDOUT: usize = 1000;

    let full = generate(&SyntheticConfig {
        hours: TRAIN + TEST,
        ..Default::default()
    });
    let train_part = full.slice(0..TRAIN);
    let test = TRAIN..TRAIN + TEST;
    let bench = |kind| {
        run_backtest(
            &Strategy::benchmark(kind),
            &full,
            test.clone(),
            FeeScheme::None,
            "test",
        )
        .unwrap()
        .metrics
    };
    let (ewp, gmvp) = (bench(StrategyKind::Ewp), bench(StrategyKind::Gmvp));

    let mut ns = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..SEEDS {
        let (rep, secs) = learned_test(&train_part, &full, test.clone(), &scaled_config(seed));
        slowest = slowest.max(secs);
        ns.push(rep.metrics);
    }
    let ns_sharpe = median(ns.iter().map(|m| m.sharpe).collect());
    let ns_mdd = median(ns.iter().map(|m| m.mdd).collect());

    // xi is chosen on the training span only: fit on its head, score MDD on its tail
    let inner = train_part.slice(0..TRAIN - HOLDOUT);
    let holdout = TRAIN - HOLDOUT..TRAIN;
    let svc = |xi: f64, seed: u64| {
        let mut cfg = scaled_config(seed);
        cfg.loss = LossConfig {
            variant: LossVariant::L1,
            gamma: GAMMA,
            xi,
        };
        cfg
    };
    let mut best = (f64::INFINITY, XI_CANDIDATES[0]);
    for &xi in &XI_CANDIDATES {
        let (rep, _) = learned_test(&inner, &train_part, holdout.clone(), &svc(xi, 0));
        if rep.metrics.mdd < best.0 {
            best = (rep.metrics.mdd, xi);
        }
    }
    let xi = best.1;
    let svc_mdd = median(
        (0..SEEDS)
            .map(|seed| {
                learned_test(&train_part, &full, test.clone(), &svc(xi, seed))
                    .0
                    .metrics
                    .mdd
            })
            .collect(),
    );

    let ok =
        slowest < 600.0 && ns_sharpe > ewp.sharpe && ns_sharpe > gmvp.sharpe && svc_mdd <= ns_mdd;
    verdict(
        ok,
        format!(
            "NS median sharpe {ns_sharpe:.4} vs EWP {:.4} / GMVP {:.4}; slowest NS fit {slowest:.0}s (< 600s); \
             SVC1 (gamma {GAMMA}, xi {xi:e}) median mdd {svc_mdd:.4} vs NS {ns_mdd:.4}",
            ewp.sharpe, gmvp.sharpe
        ),
    )
}

fn archival_replication() -> Verdict {
    let Some(dir) = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from) else {
        return Verdict::Skip(format!(
            "set {DATA_DIR_ENV} to a directory of cached 1h CSVs to run"
        ));
    };
    let mut cfg = Config::default();
    cfg.data.dir = dir.clone();
    let missing: Vec<String> = cfg
        .data
        .symbols()
        .iter()
        .map(|s| pairfolio::data::cache_path(&dir, s))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Verdict::Skip(format!("no archival data ({} missing)", missing.join(", ")));
    }
    let full = match pairfolio_cli::commands::load_series(&cfg) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(format!("cannot load archival data: {e}")),
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [StrategyKind::Nwp, StrategyKind::Ewp, StrategyKind::Gmvp] {
        let mut total = 0.0;
        for split in SplitSpec::blvt_periods() {
            let test = match split.test_range(&full) {
                Ok(t) => t,
                Err(e) => {
                    return Verdict::Fail(format!("archival data does not cover the periods: {e}"))
                }
            };
            match run_backtest(
                &Strategy::benchmark(kind),
                &full,
                test,
                FeeScheme::None,
                "p",
            ) {
                Ok(r) => total += r.metrics.sharpe,
                Err(e) => return Verdict::Fail(format!("{kind}: {e}")),
            }
        }
        let avg = total / 3.0;
        ok &= avg.abs() < 0.02;
        notes.push(format!("{kind} {avg:+.4}"));
    }
    let mut worst: f64 = 0.0;
    for split in SplitSpec::blvt_periods() {
        let test = split.test_range(&full).expect("checked above");
        let ratio = full.close(Ticker::Btc, test.end - 1) / full.close(Ticker::Btc, test.start);
        let rep = run_backtest(
            &Strategy::benchmark(StrategyKind::BtcHold),
            &full,
            test,
            FeeScheme::None,
            "p",
        )
        .unwrap();
        worst = worst.max((rep.metrics.fapv - ratio).abs());
    }
    ok &= worst <= 1e-12;
    verdict(
        ok,
        format!("average no-fee sharpe {} (|.| < 0.02); BTC hold fapv vs close ratio max gap {worst:.1e}", notes.join(", ")),
    )
}

fn determinism() -> Verdict {
    let root = std::env::temp_dir().join(format!("pairfolio-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let mut cfg = Config::default();
    cfg.data.dir = root.join("data");
    cfg.data.source = DataSource::Synthetic;
    cfg.data.start = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
    cfg.data.end = Utc.with_ymd_and_hms(2021, 2, 10, 0, 0, 0).unwrap();
    cfg.runs_dir = root.join("runs");
    cfg.output_dir = root.join("out");
    let h = |d, hh| Utc.with_ymd_and_hms(2021, 1, d, hh, 0, 0).unwrap();
    cfg.periods = vec![Period {
        name: "P1".into(),
        split: SplitSpec {
            train_start: h(1, 0),
            train_end: h(24, 23),
            test_start: h(25, 0),
            test_end: h(31, 23),
        },
    }];
    cfg.train = TrainConfig {
        epochs: 2,
        hidden: 4,
        lookback: 8,
        seq_len: 8,
        norm_block: 6,
        beta_window: 24,
        seed: 7,
        ..TrainConfig::default()
    };
    cfg.grid.seeds = vec![0, 1, 2, 3, 4];
    let ctx = Ctx::new(cfg, None);
    let outcome = (|| {
        pairfolio_cli::cmd_fetch(&ctx)?;
        let first = cmd_train(&ctx)?;
        let a = std::fs::read(first.join("period1.ckpt"))
            .map_err(|e| pairfolio_cli::CliError::io(&first, e))?;
        std::fs::remove_dir_all(&first).map_err(|e| pairfolio_cli::CliError::io(&first, e))?;
        let second = cmd_train(&ctx)?;
        let b = std::fs::read(second.join("period1.ckpt"))
            .map_err(|e| pairfolio_cli::CliError::io(&second, e))?;
        let grid = cmd_grid(&ctx)?;
        let summary = std::fs::read_to_string(grid.join("summary.csv"))
            .map_err(|e| pairfolio_cli::CliError::io(&grid, e))?;
        Ok::<_, pairfolio_cli::CliError>((a, b, summary))
    })();
    let _ = std::fs::remove_dir_all(&root);
    let (a, b, summary) = match outcome {
        Ok(x) => x,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let row = summary.lines().nth(1).unwrap_or_default();
    let std: f64 = row
        .split(',')
        .nth(10)
        .and_then(|s| s.parse().ok())
        .unwrap_or(f64::NAN);
    verdict(
        a == b && std > 0.0,
        format!(
            "checkpoints {} ({} bytes); grid std over 5 seeds {std:.4}",
            if a == b { "byte-identical" } else { "differ" },
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("fee-model oracle equivalence", fee_oracle),
        ("accounting identity", accounting_identity),
        ("gradient integrity", gradient_integrity),
        ("neutral-position invariant", neutral_invariant),
        ("penalty margin property", penalty_margin),
        ("GMVP correctness", gmvp_correctness),
        ("metric units", metric_units),
        ("scaled learning experiment", scaled_learning),
        ("archival replication (optional)", archival_replication),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = (k + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let (tag, detail) = match check() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!(
            "[{tag}] {id:>2}. {name}: {detail} [{:.1}s]",
            started.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
