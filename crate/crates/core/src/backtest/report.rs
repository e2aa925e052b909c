//! Cross-period, cross-seed summary of backtest reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BacktestReport, StrategyKind};
use crate::metrics::MetricsRow;
use crate::portfolio::FeeScheme;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("missing report for {strategy} / {period} / {fee_scheme}{}", seed.map(|s| format!(" / seed {s}")).unwrap_or_default())]
pub struct MissingCellError {
    pub strategy: StrategyKind,
    pub period: String,
    pub fee_scheme: FeeScheme,
    pub seed: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error(transparent)]
    MissingCell(#[from] MissingCellError),
    #[error("duplicate report for {strategy} / {period} / {fee_scheme} / seed {seed:?}")]
    Duplicate {
        strategy: StrategyKind,
        period: String,
        fee_scheme: FeeScheme,
        seed: Option<u64>,
    },
    #[error("no reports to summarize")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: StrategyKind,
    pub fee_scheme: FeeScheme,
    /// Seed whose breakdown is shown (median by average Sharpe).
    pub shown_seed: Option<u64>,
    pub seeds: usize,
    /// One entry per period, in [`SummaryTable::periods`] order.
    pub cells: Vec<MetricsRow>,
    /// Mean over seeds of the cross-period average Sharpe.
    pub avg_sharpe: f64,
    /// Standard deviation of that average across seeds (learned kinds only).
    pub avg_sharpe_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub periods: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

type Cell = (StrategyKind, FeeScheme, String, Option<u64>);

/// Mean and Bessel-corrected standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Summarize a complete (strategy x period x fee scheme) grid.
///
/// Learned strategies may carry several seeds; every seed must cover every
/// period. Each row shows the per-period breakdown of its median seed and the
/// mean ± std of the cross-period average Sharpe across seeds.
pub fn report_table(reports: &[BacktestReport]) -> Result<SummaryTable, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut cells: BTreeMap<Cell, MetricsRow> = BTreeMap::new();
    for r in reports {
        let key = (r.strategy, r.fee_scheme, r.period.clone(), r.seed);
        if cells.insert(key, r.metrics).is_some() {
            return Err(ReportError::Duplicate {
                strategy: r.strategy,
                period: r.period.clone(),
                fee_scheme: r.fee_scheme,
                seed: r.seed,
            });
        }
    }
    let periods: Vec<String> = reports
        .iter()
        .map(|r| r.period.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let strategies: BTreeSet<StrategyKind> = reports.iter().map(|r| r.strategy).collect();
    let schemes: BTreeSet<FeeScheme> = reports.iter().map(|r| r.fee_scheme).collect();

    let mut rows = Vec::new();
    for &scheme in &schemes {
        for &strategy in &strategies {
            let seeds: BTreeSet<Option<u64>> = cells
                .keys()
                .filter(|(s, f, _, _)| *s == strategy && *f == scheme)
                .map(|k| k.3)
                .collect();
            if seeds.is_empty() {
                return Err(MissingCellError {
                    strategy,
                    period: periods[0].clone(),
                    fee_scheme: scheme,
                    seed: None,
                }
                .into());
            }
            let mut per_seed: Vec<(Option<u64>, f64, Vec<MetricsRow>)> = Vec::new();
            for &seed in &seeds {
                let mut row = Vec::with_capacity(periods.len());
                for p in &periods {
                    let cell =
                        cells
                            .get(&(strategy, scheme, p.clone(), seed))
                            .ok_or_else(|| MissingCellError {
                                strategy,
                                period: p.clone(),
                                fee_scheme: scheme,
                                seed,
                            })?;
                    row.push(*cell);
                }
                let avg = row.iter().map(|m| m.sharpe).sum::<f64>() / row.len() as f64;
                per_seed.push((seed, avg, row));
            }
            let avgs: Vec<f64> = per_seed.iter().map(|x| x.1).collect();
            let (mean, std) = mean_std(&avgs);
            per_seed.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let (shown_seed, _, shown) = per_seed.swap_remove((per_seed.len() - 1) / 2);
            rows.push(SummaryRow {
                strategy,
                fee_scheme: scheme,
                shown_seed,
                seeds: seeds.len(),
                cells: shown,
                avg_sharpe: mean,
                avg_sharpe_std: strategy.is_learned().then_some(std),
            });
        }
    }
    Ok(SummaryTable { periods, rows })
}

impl SummaryTable {
    pub fn row(&self, strategy: StrategyKind, scheme: FeeScheme) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.fee_scheme == scheme)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,fee_scheme,seeds,shown_seed");
        for p in &self.periods {
            let _ = write!(out, ",{p} sharpe,{p} fapv,{p} mdd");
        }
        out.push_str(",avg_sharpe,avg_sharpe_std\n");
        for r in &self.rows {
            let seed = r.shown_seed.map(|s| s.to_string()).unwrap_or_default();
            let _ = write!(out, "{},{},{},{}", r.strategy, r.fee_scheme, r.seeds, seed);
            for c in &r.cells {
                let _ = write!(out, ",{:.6},{:.6},{:.6}", c.sharpe, c.fapv, c.mdd);
            }
            let std = r
                .avg_sharpe_std
                .map(|s| format!("{s:.6}"))
                .unwrap_or_default();
            let _ = writeln!(out, ",{:.6},{}", r.avg_sharpe, std);
        }
        out
    }

    /// Fixed-width table with three decimals, one block per fee scheme.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header_cells: Vec<String> = self
            .periods
            .iter()
            .map(|p| format!("{:^24}", p.chars().take(24).collect::<String>()))
            .collect();
        let schemes: BTreeSet<FeeScheme> = self.rows.iter().map(|r| r.fee_scheme).collect();
        for scheme in schemes {
            let _ = writeln!(out, "fee scheme: {scheme}");
            let _ = writeln!(out, "{:<6}|{}| avg sharpe", "", header_cells.join("|"));
            let sub = vec![format!("{:>8}{:>8}{:>8}", "Sharpe", "fAPV", "MDD"); self.periods.len()];
            let _ = writeln!(out, "{:<6}|{}|", "", sub.join("|"));
            for r in self.rows.iter().filter(|r| r.fee_scheme == scheme) {
                let cells: Vec<String> = r
                    .cells
                    .iter()
                    .map(|c| format!("{:>8.3}{:>8.3}{:>8.3}", c.sharpe, c.fapv, c.mdd))
                    .collect();
                let avg = match r.avg_sharpe_std {
                    Some(s) => format!("{:.3} ± {:.3}", r.avg_sharpe, s),
                    None => format!("{:.3}", r.avg_sharpe),
                };
                let _ = writeln!(
                    out,
                    "{:<6}|{}| {}",
                    r.strategy.as_str(),
                    cells.join("|"),
                    avg
                );
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(
        strategy: StrategyKind,
        period: &str,
        fee: FeeScheme,
        seed: Option<u64>,
        sharpe: f64,
    ) -> BacktestReport {
        BacktestReport {
            strategy,
            period: period.to_string(),
            fee_scheme: fee,
            seed,
            config_hash: None,
            metrics: MetricsRow {
                sharpe,
                fapv: 1.0,
                mdd: 0.0,
            },
            times: Vec::new(),
            weights: Vec::new(),
            returns: Vec::new(),
            values: Vec::new(),
            fallbacks: 0,
        }
    }

    #[test]
    fn benchmark_averages_match_reference_summary() {
        // per-period Sharpe ratios of the reference breakdown tables
        let breakdown = [
            (
                StrategyKind::Nwp,
                FeeScheme::None,
                [0.003, -0.016, -0.001],
                -0.005,
            ),
            (
                StrategyKind::Ewp,
                FeeScheme::None,
                [-0.006, -0.009, 0.026],
                0.004,
            ),
            (
                StrategyKind::Gmvp,
                FeeScheme::None,
                [-0.004, -0.017, 0.019],
                -0.001,
            ),
            (
                StrategyKind::BtcHold,
                FeeScheme::None,
                [0.041, 0.024, -0.028],
                0.012,
            ),
            (
                StrategyKind::Nwp,
                FeeScheme::Fee,
                [0.000, -0.019, -0.005],
                -0.008,
            ),
            (
                StrategyKind::Ewp,
                FeeScheme::Fee,
                [-0.012, -0.015, 0.018],
                -0.003,
            ),
            (
                StrategyKind::Gmvp,
                FeeScheme::Fee,
                [-0.013, -0.025, 0.009],
                -0.010,
            ),
            (
                StrategyKind::BtcHold,
                FeeScheme::Fee,
                [0.041, 0.024, -0.028],
                0.012,
            ),
        ];
        let mut reports = Vec::new();
        for (kind, fee, sharpes, _) in &breakdown {
            for (k, s) in sharpes.iter().enumerate() {
                reports.push(rep(*kind, &format!("Period {}", k + 1), *fee, None, *s));
            }
        }
        let table = report_table(&reports).unwrap();
        assert_eq!(table.periods.len(), 3);
        for (kind, fee, _, avg) in breakdown {
            let row = table.row(kind, fee).unwrap();
            assert!(
                (row.avg_sharpe - avg).abs() <= 0.0005 + 1e-12,
                "{kind} {fee}: {}",
                row.avg_sharpe
            );
            assert_eq!(row.avg_sharpe_std, None);
        }
    }

    #[test]
    fn learned_rows_use_median_seed_and_seed_spread() {
        let mut reports = Vec::new();
        for (seed, base) in [(1, 0.01), (2, 0.03), (3, 0.02)] {
            for p in ["1", "2"] {
                reports.push(rep(StrategyKind::Ns, p, FeeScheme::None, Some(seed), base));
            }
        }
        let table = report_table(&reports).unwrap();
        let row = &table.rows[0];
        assert_eq!(row.shown_seed, Some(3));
        assert!((row.avg_sharpe - 0.02).abs() < 1e-15);
        assert!((row.avg_sharpe_std.unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn identical_seeds_have_zero_spread() {
        let reports: Vec<_> = (0..5)
            .map(|s| rep(StrategyKind::Svc1, "1", FeeScheme::Fee, Some(s), 0.04))
            .collect();
        assert_eq!(
            report_table(&reports).unwrap().rows[0].avg_sharpe_std,
            Some(0.0)
        );
    }

    #[test]
    fn missing_cell_detected() {
        let reports = vec![
            rep(StrategyKind::Ewp, "1", FeeScheme::None, None, 0.0),
            rep(StrategyKind::Ewp, "2", FeeScheme::None, None, 0.0),
            rep(StrategyKind::Gmvp, "1", FeeScheme::None, None, 0.0),
        ];
        match report_table(&reports) {
            Err(ReportError::MissingCell(e)) => {
                assert_eq!(e.strategy, StrategyKind::Gmvp);
                assert_eq!(e.period, "2");
            }
            other => panic!("{other:?}"),
        }
        let reports = vec![
            rep(StrategyKind::Ewp, "1", FeeScheme::None, None, 0.0),
            rep(StrategyKind::Gmvp, "1", FeeScheme::Fee, None, 0.0),
        ];
        assert!(matches!(
            report_table(&reports),
            Err(ReportError::MissingCell(_))
        ));
    }

    #[test]
    fn single_cell_table() {
        let table =
            report_table(&[rep(StrategyKind::Ewp, "1", FeeScheme::None, None, 0.1)]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.to_csv().lines().count(), 2);
        assert!(table.to_text().contains("EWP"));
    }
}
