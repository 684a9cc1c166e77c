//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 3                  # optional: generator seed and first controller seed
//! horizon = 24
//! forecaster = "ar_linear"  # or "seasonal_naive"
//! seeds = [0, 1, 2, 3, 4]   # RL training seeds
//! out = "out"
//! robustness = false        # same as --robustness
//! smoke = false             # same as --smoke
//!
//! [data]
//! train_frac = 0.5
//! [data.generator]          # either this table ...
//! days = 60
//! [data.csv]                # ... or this one
//! train = "train.csv"
//! test = "test.csv"
//! shifted_test = "test_shifted.csv"   # optional
//!
//! [robustness_shift]
//! demand_mean_scale = 1.3
//!
//! [battery]
//! capacity_kwh = 10.0
//!
//! [ppo]
//! total_env_steps = 300000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::ComparisonConfig;
use crate::data::{self, DemandShift, ExogenousSeries, GeneratorConfig};
use crate::env::BatteryParams;
use crate::error::{Error, Result};
use crate::forecast::ForecasterKind;
use crate::ppo::PpoConfig;

/// Env-step budget used by `--smoke`.
pub const SMOKE_ENV_STEPS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub shifted_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub csv: Option<CsvPaths>,
    /// Used only with the generator.
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_train_frac() -> f64 {
    0.5
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: Some(GeneratorConfig::default()),
            csv: None,
            train_frac: default_train_frac(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub horizon: usize,
    pub forecaster: ForecasterKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub robustness_shift: DemandShift,
    pub battery: BatteryParams,
    pub ppo: PpoConfig,
    /// Same as `--robustness`.
    pub robustness: bool,
    /// Same as `--smoke`.
    pub smoke: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            horizon: 24,
            forecaster: ForecasterKind::ArLinear,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            robustness_shift: DemandShift {
                demand_mean_scale: 1.3,
                demand_shape_skew: 0.0,
            },
            battery: BatteryParams::default(),
            ppo: PpoConfig {
                total_env_steps: 300_000,
                ..PpoConfig::default()
            },
            robustness: false,
            smoke: false,
        }
    }
}

/// Train and test series, plus the shifted test when one was requested.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: ExogenousSeries,
    pub test: ExogenousSeries,
    pub shifted_test: Option<ExogenousSeries>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_seed();
        if cfg.smoke {
            cfg.apply_smoke();
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sets the root seed: generator seed `s`, controller seeds `s, s+1, ...`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            if let Some(g) = self.data.generator.as_mut() {
                g.seed = s;
            }
            let n = self.seeds.len().max(1) as u64;
            self.seeds = (s..s + n).collect();
        }
    }

    /// Shrinks training budgets for quick end-to-end runs.
    pub fn apply_smoke(&mut self) {
        self.smoke = true;
        self.ppo.total_env_steps = self.ppo.total_env_steps.min(SMOKE_ENV_STEPS);
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.generator, &self.data.csv) {
            (Some(g), None) => g.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of [data.generator] and [data.csv] must be given".into(),
                ))
            }
        }
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(Error::Config("data.train_frac must lie in (0, 1)".into()));
        }
        self.comparison().validate()
    }

    pub fn comparison(&self) -> ComparisonConfig {
        ComparisonConfig {
            params: self.battery,
            horizon: self.horizon,
            forecaster: self.forecaster,
            ppo: self.ppo.clone(),
            seeds: self.seeds.clone(),
        }
    }

    /// Loads or generates the datasets. The shifted test comes from the CSV
    /// source when given, otherwise from the generator with
    /// `robustness_shift` applied and the same split.
    pub fn datasets(&self, with_shifted: bool) -> Result<Datasets> {
        self.validate()?;
        if let Some(csv) = &self.data.csv {
            let shifted_test = match (&csv.shifted_test, with_shifted) {
                (Some(p), true) => Some(data::load_csv(p)?),
                (None, true) => {
                    return Err(Error::Config(
                        "robustness run with CSV data needs data.csv.shifted_test".into(),
                    ))
                }
                _ => None,
            };
            return Ok(Datasets {
                train: data::load_csv(&csv.train)?,
                test: data::load_csv(&csv.test)?,
                shifted_test,
            });
        }
        let gen = self.data.generator.as_ref().expect("validated");
        let (train, test) = data::split(&data::generate(gen)?, self.data.train_frac)?;
        let shifted_test = if with_shifted {
            let shifted = data::generate(&gen.with_shift(Some(self.robustness_shift)))?;
            Some(data::split(&shifted, self.data.train_frac)?.1)
        } else {
            None
        };
        Ok(Datasets {
            train,
            test,
            shifted_test,
        })
    }

    /// Training split only; for CSV sources the test file is not read.
    pub fn train_series(&self) -> Result<ExogenousSeries> {
        self.validate()?;
        match &self.data.csv {
            Some(csv) => data::load_csv(&csv.train),
            None => Ok(self.datasets(false)?.train),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn csv_source_replaces_generator() {
        let cfg = RunConfig::from_toml("[data.csv]\ntrain = \"a.csv\"\ntest = \"b.csv\"\n").unwrap();
        assert!(cfg.data.generator.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn both_sources_rejected() {
        let cfg =
            RunConfig::from_toml("[data.csv]\ntrain = \"a\"\ntest = \"b\"\n[data.generator]\ndays = 3\n").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn root_seed_fans_out() {
        let cfg = RunConfig::from_toml("seed = 10\nseeds = [0, 0, 0]\n").unwrap();
        assert_eq!(cfg.seeds, vec![10, 11, 12]);
        assert_eq!(cfg.data.generator.unwrap().seed, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("horizn = 3\n").is_err());
        assert!(RunConfig::from_toml("[ppo]\nclip = 0.1\n").is_err());
    }

    #[test]
    fn nested_tables_parse() {
        let cfg = RunConfig::from_toml("horizon = 12\n[ppo]\ntotal_env_steps = 5000\n[battery]\ncapacity_kwh = 5.0\n")
            .unwrap();
        assert_eq!(cfg.horizon, 12);
        assert_eq!(cfg.ppo.total_env_steps, 5000);
        assert_eq!(cfg.ppo.clip_eps, 0.2);
        assert_eq!(cfg.battery.capacity_kwh, 5.0);
    }

    #[test]
    fn flag_equivalents() {
        let cfg = RunConfig::from_toml("smoke = true\nrobustness = true\n").unwrap();
        assert!(cfg.robustness);
        assert_eq!(cfg.ppo.total_env_steps, SMOKE_ENV_STEPS);
    }
}
