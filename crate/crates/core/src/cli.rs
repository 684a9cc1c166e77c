//! Command-line front end: `gen-data`, `train` and `compare`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, write_action_logs, TrainedControllers};
use crate::config::RunConfig;
use crate::data::{self, ExogenousSeries};
use crate::error::{Error, Result};
use crate::forecast::ForecasterModel;
use crate::mpc::{self, Forecaster};
use crate::ppo::{self, RlAgent};

#[derive(Debug, Parser)]
#[command(
    name = "bms-bench",
    version,
    about = "Battery management benchmark: RL vs MPC vs baselines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed: generator seed and first controller seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// MPC horizon in steps.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reduced training budgets for quick runs.
    #[arg(long, global = true)]
    pub smoke: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Rl,
    Forecaster,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/test CSVs (and a shifted test with --robustness).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        robustness: bool,
    },
    /// Train the RL agents or the forecaster on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: Which,
    },
    /// Evaluate every controller on the test split.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Also evaluate on the demand-shifted test set.
        #[arg(long)]
        robustness: bool,
        /// Train controllers instead of loading checkpoints from --out.
        #[arg(long)]
        train: bool,
        /// Write the first MPC plan as CSV.
        #[arg(long)]
        dump_plan: bool,
    },
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    seeds: Vec<u64>,
    data_seed: Option<u64>,
    outputs: Vec<ManifestEntry>,
}

struct Outputs {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn path(&mut self, name: &str, seed: Option<u64>) -> PathBuf {
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            seed,
        });
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, seed: Option<u64>, text: &str) -> Result<()> {
        let path = self.path(name, seed);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn finish(self, command: &str, cfg: &RunConfig) -> Result<()> {
        let manifest = Manifest {
            command: command.to_string(),
            seeds: cfg.seeds.clone(),
            data_seed: cfg.data.generator.as_ref().map(|g| g.seed),
            outputs: self.entries,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(h) = common.horizon {
        cfg.horizon = h;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if common.smoke {
        cfg.apply_smoke();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn agent_file(seed: u64) -> String {
    format!("agent_seed{seed}.json")
}

pub fn curve_file(seed: u64) -> String {
    format!("learning_curve_seed{seed}.csv")
}

pub const FORECASTER_FILE: &str = "forecaster.json";

fn summary(name: &str, s: &ExogenousSeries) -> String {
    let n = s.len() as f64;
    format!(
        "{name}: {} rows, mean price {:.4}, mean demand {:.4}",
        s.len(),
        s.prices().iter().sum::<f64>() / n,
        s.demands().iter().sum::<f64>() / n
    )
}

pub fn gen_data(common: &Common, robustness: bool) -> Result<()> {
    let cfg = resolve(common)?;
    let robustness = robustness || cfg.robustness;
    let sets = cfg.datasets(robustness)?;
    let mut out = Outputs::new(&cfg.out)?;
    let seed = cfg.data.generator.as_ref().map(|g| g.seed);
    let mut files = vec![("train.csv", &sets.train), ("test.csv", &sets.test)];
    if let Some(s) = &sets.shifted_test {
        files.push(("test_shifted.csv", s));
    }
    for (name, series) in files {
        data::write_csv(series, out.path(name, seed))?;
        println!("{}", summary(name, series));
    }
    out.finish("gen-data", &cfg)
}

fn train_rl(
    cfg: &RunConfig,
    train: &ExogenousSeries,
    out: &mut Outputs,
) -> Result<Vec<(RlAgent, Vec<ppo::LearningPoint>)>> {
    let mut agents = Vec::new();
    for &seed in &cfg.seeds {
        let pcfg = ppo::PpoConfig {
            seed,
            ..cfg.ppo.clone()
        };
        let res = ppo::train(train, &cfg.battery, &pcfg)?;
        res.agent.save(out.path(&agent_file(seed), Some(seed)))?;
        ppo::write_learning_curve(&res.curve, out.path(&curve_file(seed), Some(seed)))?;
        let last = res.curve.last().map_or(f64::NAN, |p| p.mean_episode_cost);
        println!(
            "seed {seed}: {} env steps, final mean episode cost {last:.4}",
            res.agent.env_steps
        );
        agents.push((res.agent, res.curve));
    }
    Ok(agents)
}

pub fn train(common: &Common, which: Which) -> Result<()> {
    let cfg = resolve(common)?;
    let train = cfg.train_series()?;
    let mut out = Outputs::new(&cfg.out)?;
    match which {
        Which::Rl => {
            train_rl(&cfg, &train, &mut out)?;
        }
        Which::Forecaster => {
            let model = ForecasterModel::fit(&train, cfg.forecaster)?;
            model.save(out.path(FORECASTER_FILE, None))?;
            println!("{:?} forecaster fitted on {} rows", model.kind, model.train_rows);
        }
    }
    out.finish("train", &cfg)
}

fn load_trained(cfg: &RunConfig, train: &ExogenousSeries) -> Result<TrainedControllers> {
    let dir = &cfg.out;
    let missing = |path: PathBuf, which: &str| Error::MissingCheckpoint {
        path,
        hint: format!("bms-bench train --which {which} --out {}", dir.display()),
    };
    let fpath = dir.join(FORECASTER_FILE);
    if !fpath.exists() {
        return Err(missing(fpath, "forecaster"));
    }
    let forecaster = ForecasterModel::load(&fpath)?;
    let mut agents = Vec::new();
    for &seed in &cfg.seeds {
        let p = dir.join(agent_file(seed));
        if !p.exists() {
            return Err(missing(p, "rl"));
        }
        agents.push(RlAgent::load(&p)?);
    }
    Ok(TrainedControllers {
        forecaster,
        agents,
        curves: Vec::new(),
        baseline: bench::BaselinePolicy::from_train(train),
    })
}

pub fn compare(common: &Common, robustness: bool, train_now: bool, dump_plan: bool) -> Result<()> {
    let cfg = resolve(common)?;
    let robustness = robustness || cfg.robustness;
    let sets = cfg.datasets(robustness)?;
    let mut out = Outputs::new(&cfg.out)?;
    let trained = if train_now {
        let forecaster = ForecasterModel::fit(&sets.train, cfg.forecaster)?;
        forecaster.save(out.path(FORECASTER_FILE, None))?;
        let (agents, curves) = train_rl(&cfg, &sets.train, &mut out)?.into_iter().unzip();
        TrainedControllers {
            forecaster,
            agents,
            curves,
            baseline: bench::BaselinePolicy::from_train(&sets.train),
        }
    } else {
        load_trained(&cfg, &sets.train)?
    };
    let comparison = cfg.comparison();

    // Rows are appended as they finish so a failure leaves partial results.
    let partial = out.path("report_partial.jsonl", None);
    fs::write(&partial, "").map_err(|e| Error::io(&partial, e))?;
    let mut sink = |row: &bench::ControllerRow| {
        if let Ok(line) = serde_json::to_string(row) {
            use std::io::Write;
            if let Ok(mut f) = fs::OpenOptions::new().append(true).open(&partial) {
                let _ = writeln!(f, "{line}");
            }
        }
    };
    let eval = bench::evaluate(&sets.train, &sets.test, &trained, &comparison, &mut sink)?;
    for name in ["report.json", "report.txt", "report_costs.csv"] {
        out.path(name, None);
    }
    eval.report.write(&cfg.out, "report")?;
    write_action_logs(&eval.logs, out.path("actions.csv", None))?;
    print!("{}", eval.report.to_table());

    if dump_plan {
        let run = mpc::receding_horizon_run(
            &sets.test,
            Forecaster::Model {
                model: &trained.forecaster,
                warmup: Some(&sets.train),
            },
            &cfg.battery,
            cfg.horizon,
            cfg.battery.default_soc0(),
        )?;
        mpc::write_plan_csv(&run.first_plan, &run.first_problem, out.path("plan_first.csv", None))?;
    }

    if let Some(shifted) = &sets.shifted_test {
        let (rob, _, shifted_eval) = bench::robustness_from(&sets.train, &sets.test, shifted, &trained, &comparison)?;
        out.write("robustness.json", None, &rob.to_json()?)?;
        out.write("robustness.txt", None, &rob.to_table())?;
        for name in ["report_shifted.json", "report_shifted.txt", "report_shifted_costs.csv"] {
            out.path(name, None);
        }
        shifted_eval.report.write(&cfg.out, "report_shifted")?;
        write_action_logs(&shifted_eval.logs, out.path("actions_shifted.csv", None))?;
        println!();
        print!("{}", rob.to_table());
    }
    out.finish("compare", &cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, robustness } => gen_data(&common, robustness),
        Command::Train { common, which } => train(&common, which),
        Command::Compare {
            common,
            robustness,
            train,
            dump_plan,
        } => compare(&common, robustness, train, dump_plan),
    }
}

/// Process exit code for an error: 1 for bad input or configuration, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}
