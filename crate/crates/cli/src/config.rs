//! Declarative run configuration: one TOML file, individual keys overridable
//! from the command line.

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use pairfolio::backtest::{StrategyKind, DEFAULT_WINDOW};
use pairfolio::data::synthetic::SyntheticConfig;
use pairfolio::data::Ticker;
use pairfolio::portfolio::FeeScheme;
use pairfolio::training::grid::{GridSpec, Period};
use pairfolio::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that overrides `data.dir`.
pub const DATA_DIR_ENV: &str = "PAIRFOLIO_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Binance,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub source: DataSource,
    pub base_url: String,
    pub btc_symbol: String,
    pub up_symbol: String,
    pub down_symbol: String,
    /// First open time, inclusive.
    pub start: DateTime<Utc>,
    /// Last open time, exclusive.
    pub end: DateTime<Utc>,
    /// Forward-fill isolated missing hours instead of rejecting the data.
    pub gap_fill: bool,
    /// Seed of the generated market when `source = "synthetic"`.
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            source: DataSource::Binance,
            base_url: "https://api.binance.com".into(),
            btc_symbol: Ticker::Btc.default_symbol().into(),
            up_symbol: Ticker::Up.default_symbol().into(),
            down_symbol: Ticker::Down.default_symbol().into(),
            start: Utc.with_ymd_and_hms(2020, 5, 15, 0, 0, 0).unwrap(),
            end: Utc.with_ymd_and_hms(2021, 12, 31, 0, 0, 0).unwrap(),
            gap_fill: false,
            synthetic_seed: 7,
        }
    }
}

impl DataConfig {
    pub fn symbols(&self) -> [&str; 3] {
        [&self.btc_symbol, &self.up_symbol, &self.down_symbol]
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let hours = (self.end - self.start).num_hours().max(0) as usize;
        SyntheticConfig {
            hours,
            seed: self.synthetic_seed,
            start: self.start,
            ..SyntheticConfig::default()
        }
    }
}

/// Loss settings for a penalized strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyParams {
    pub gamma: f64,
    pub xi: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            xi: 3e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub strategies: Vec<StrategyKind>,
    pub fee_schemes: Vec<FeeScheme>,
    /// Seeds of the learned strategies; empty means `train.seed` only.
    pub seeds: Vec<u64>,
    /// Window of the GMVP covariance and the NWP beta.
    pub window: usize,
    pub svc1: PenaltyParams,
    pub svc2: PenaltyParams,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            strategies: StrategyKind::ALL.to_vec(),
            fee_schemes: FeeScheme::ALL.to_vec(),
            seeds: Vec::new(),
            window: DEFAULT_WINDOW,
            svc1: PenaltyParams::default(),
            svc2: PenaltyParams::default(),
        }
    }
}

/// Grid axes; the base configuration is the `train` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub batch_size: Option<Vec<usize>>,
    pub epochs: Option<Vec<usize>>,
    pub base_lr: Option<Vec<f64>>,
    pub weight_decay: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub xi: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub max_configs: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        Self {
            batch_size: g.batch_size,
            epochs: g.epochs,
            base_lr: g.base_lr,
            weight_decay: g.weight_decay,
            gamma: g.gamma,
            xi: g.xi,
            seeds: g.seeds,
            max_configs: g.max_configs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub runs_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Worker threads for training chunks, grid runs and backtest jobs.
    pub workers: Option<usize>,
    pub data: DataConfig,
    /// Walk-forward periods; empty means the three BLVT periods.
    pub periods: Vec<Period>,
    pub train: TrainConfig,
    pub backtest: BacktestConfig,
    pub grid: GridConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
            output_dir: PathBuf::from("out"),
            workers: None,
            data: DataConfig::default(),
            periods: Vec::new(),
            train: TrainConfig::default(),
            backtest: BacktestConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl Config {
    /// Parse TOML text, apply `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings) and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Config = root
            .try_into()
            .map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for s in self.data.symbols() {
            if s.is_empty()
                || !s
                    .chars()
                    .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
            {
                return Err(CliError::Config(format!("unknown symbol `{s}`")));
            }
        }
        if self.data.end <= self.data.start {
            return Err(CliError::Config(format!(
                "data range {} .. {} is empty",
                self.data.start, self.data.end
            )));
        }
        for p in &self.periods {
            p.split
                .validate()
                .map_err(|e| CliError::Config(format!("period `{}`: {e}", p.name)))?;
        }
        if self.backtest.window < 2 {
            return Err(CliError::Config(
                "backtest.window must be at least 2".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn periods(&self) -> Vec<Period> {
        if self.periods.is_empty() {
            Period::blvt()
        } else {
            self.periods.clone()
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        let g = &self.grid;
        GridSpec {
            base: self.train.clone(),
            batch_size: g.batch_size.clone(),
            epochs: g.epochs.clone(),
            base_lr: g.base_lr.clone(),
            weight_decay: g.weight_decay.clone(),
            gamma: g.gamma.clone(),
            xi: g.xi.clone(),
            seeds: g.seeds.clone(),
            max_configs: g.max_configs,
        }
    }

    /// Training configuration behind a learned strategy's checkpoints.
    pub fn learned_config(
        &self,
        kind: StrategyKind,
        fees: FeeScheme,
        seed: u64,
    ) -> Option<TrainConfig> {
        let variant = kind.loss_variant()?;
        let mut cfg = self.train.clone();
        cfg.loss.variant = variant;
        let penalty = match kind {
            StrategyKind::Svc1 => Some(self.backtest.svc1),
            StrategyKind::Svc2 => Some(self.backtest.svc2),
            _ => None,
        };
        match penalty {
            Some(p) => {
                cfg.loss.gamma = p.gamma;
                cfg.loss.xi = p.xi;
            }
            None => {
                cfg.loss.gamma = 0.0;
                cfg.loss.xi = 0.0;
            }
        }
        cfg.fee_scheme = fees;
        cfg.seed = seed;
        Some(cfg)
    }

    /// Effective configuration as canonical JSON.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Set `a.b.c = value` in a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pairfolio::losses::LossVariant;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::from_toml("", &[]).unwrap(), Config::default());
    }

    #[test]
    fn example_config_spells_out_the_defaults() {
        let text = include_str!("../../../pairfolio.example.toml");
        assert_eq!(Config::from_toml(text, &[]).unwrap(), Config::default());
    }

    #[test]
    fn overrides_replace_keys() {
        let text = "[train]\nepochs = 3\n[train.loss]\nvariant = \"l1\"\n";
        let cfg = Config::from_toml(
            text,
            &[
                "train.loss.gamma=0.2".into(),
                "train.loss.xi=3e-5".into(),
                "data.source=synthetic".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.variant, LossVariant::L1);
        assert_eq!(cfg.train.loss.gamma, 0.2);
        assert_eq!(cfg.train.loss.xi, 3e-5);
        assert_eq!(cfg.data.source, DataSource::Synthetic);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in [
            "train.loss.gamma=1.5",
            "data.up_symbol=btc-up",
            "train.nonsense=1",
            "workers=0",
        ] {
            let err = Config::from_toml("", &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}");
        }
        assert_eq!(
            Config::from_toml("not toml [", &[])
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn learned_config_follows_strategy() {
        let cfg = Config::default();
        let c = cfg
            .learned_config(StrategyKind::Svc1, FeeScheme::Fee, 4)
            .unwrap();
        assert_eq!(
            (c.loss.variant, c.loss.gamma, c.loss.xi),
            (LossVariant::L1, 0.2, 3e-5)
        );
        assert_eq!((c.fee_scheme, c.seed), (FeeScheme::Fee, 4));
        let ns = cfg
            .learned_config(StrategyKind::Ns, FeeScheme::None, 0)
            .unwrap();
        assert_eq!(ns.loss, pairfolio::losses::LossConfig::baseline());
        assert!(cfg
            .learned_config(StrategyKind::Ewp, FeeScheme::None, 0)
            .is_none());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
