//! Controller comparison: RL, MPC with a fitted forecaster, MPC with oracle
//! forecasts, the mean-price threshold baseline, the idle battery and the
//! full-horizon optimum, evaluated on one test series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{format_timestamp, ExogenousSeries};
use crate::env::{self, Action, BatteryParams, EnvState, Trajectory};
use crate::error::{Error, Result};
use crate::forecast::{forecast_error, ForecastErrors, ForecasterKind, ForecasterModel};
use crate::mpc::{self, Forecaster};
use crate::ppo::{self, PpoConfig, RlAgent};

pub const REPORT_SCHEMA: &str = "bms-bench/report/v1";

/// Threshold rule: discharge above the mean training price, charge otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePolicy {
    pub mean_train_price: f64,
}

impl BaselinePolicy {
    pub fn from_train(train: &ExogenousSeries) -> Self {
        let p = train.prices();
        Self {
            mean_train_price: p.iter().sum::<f64>() / p.len() as f64,
        }
    }
}

/// A price equal to the mean takes the charge branch.
pub fn baseline_act(state: &EnvState, policy: &BaselinePolicy, params: &BatteryParams) -> Action {
    let tol = env::LATTICE_TOL;
    if state.price > policy.mean_train_price {
        if state.soc > params.soc_min + tol {
            Action(-params.a_max)
        } else {
            Action::IDLE
        }
    } else if state.soc < params.soc_max - tol {
        Action(params.a_max)
    } else {
        Action::IDLE
    }
}

/// `(cost - gt) / gt` as a fraction.
pub fn optimality_gap(cost: f64, gt_cost: f64) -> Result<f64> {
    if !(gt_cost > 0.0) {
        return Err(Error::Domain(format!(
            "optimality gap needs a positive ground-truth cost, got {gt_cost}"
        )));
    }
    Ok((cost - gt_cost) / gt_cost)
}

/// Gap in percent rounded to two decimals.
pub fn gap_percent(gap: f64) -> f64 {
    (gap * 1e4).round() / 100.0
}

/// Mean and 95% half-width `t_{0.975, n-1} * s / sqrt(n)`.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Size(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / n.sqrt()))
}

pub fn median(durations: &[Duration]) -> Duration {
    if durations.is_empty() {
        return Duration::ZERO;
    }
    let mut d = durations.to_vec();
    d.sort();
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        (d[m - 1] + d[m]) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Rl,
    Mpc,
    MpcExact,
    Baseline,
    GroundTruth,
    NoBms,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Rl,
        ControllerKind::Mpc,
        ControllerKind::MpcExact,
        ControllerKind::Baseline,
        ControllerKind::GroundTruth,
        ControllerKind::NoBms,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Rl => "RL",
            ControllerKind::Mpc => "MPC",
            ControllerKind::MpcExact => "MPC (exact model)",
            ControllerKind::Baseline => "Baseline",
            ControllerKind::GroundTruth => "Ground truth",
            ControllerKind::NoBms => "No BMS",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ControllerKind::Rl => "rl",
            ControllerKind::Mpc => "mpc",
            ControllerKind::MpcExact => "mpc_exact",
            ControllerKind::Baseline => "baseline",
            ControllerKind::GroundTruth => "ground_truth",
            ControllerKind::NoBms => "no_bms",
        }
    }

    pub fn uses_battery(self) -> bool {
        self != ControllerKind::NoBms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRow {
    pub controller: ControllerKind,
    pub label: String,
    /// Mean over seeds for seeded controllers.
    pub total_cost: f64,
    pub ci_half_width: Option<f64>,
    /// Fraction; absent when the ground-truth cost is not positive.
    pub optimality_gap: Option<f64>,
    pub optimality_gap_pct: Option<f64>,
    /// Wall time of one full test pass (mean over seeds).
    pub testing_time_s: f64,
    pub decision_time_median_s: f64,
    pub train_samples_used: u64,
    pub per_seed_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub train_rows: usize,
    pub test_rows: usize,
    pub test_start: String,
    pub test_end: String,
}

impl DatasetMeta {
    fn of(train: &ExogenousSeries, test: &ExogenousSeries) -> Self {
        Self {
            train_rows: train.len(),
            test_rows: test.len(),
            test_start: format_timestamp(&test.timestamps()[0]),
            test_end: format_timestamp(&test.timestamps()[test.len() - 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub dataset: DatasetMeta,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    pub soc0: f64,
    pub params: BatteryParams,
    pub rows: Vec<ControllerRow>,
}

/// Requested actions of one controller pass, kept for re-simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLog {
    pub controller: ControllerKind,
    pub seed: Option<u64>,
    pub soc0: f64,
    pub actions: Vec<f64>,
    pub cost: f64,
}

impl EvalReport {
    pub fn row(&self, kind: ControllerKind) -> &ControllerRow {
        self.rows
            .iter()
            .find(|r| r.controller == kind)
            .expect("every report holds all controllers")
    }

    pub fn gap(&self, kind: ControllerKind) -> Option<f64> {
        self.row(kind).optimality_gap
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>10} {:>9} {:>10} {:>10} {:>12}",
            "Controller", "Cost", "95% CI", "Gap %", "Data used", "Test s", "Median us"
        );
        for r in &self.rows {
            let ci = r.ci_half_width.map_or("-".to_string(), |h| format!("{h:.4}"));
            let gap = r.optimality_gap_pct.map_or("n/a".to_string(), |g| format!("{g:.2}"));
            let _ = writeln!(
                out,
                "{:<18} {:>12.4} {:>10} {:>9} {:>10} {:>10.4} {:>12.1}",
                r.label,
                r.total_cost,
                ci,
                gap,
                r.train_samples_used,
                r.testing_time_s,
                r.decision_time_median_s * 1e6
            );
        }
        out
    }

    /// `controller,seed,total_cost,optimality_gap_pct`, one row per run.
    pub fn costs_csv(&self) -> String {
        let mut out = String::from("controller,seed,total_cost,optimality_gap_pct\n");
        let gt = self.row(ControllerKind::GroundTruth).total_cost;
        for r in &self.rows {
            let seeded = r.controller == ControllerKind::Rl;
            for (i, c) in r.per_seed_costs.iter().enumerate() {
                let seed = if seeded {
                    self.seeds[i].to_string()
                } else {
                    String::new()
                };
                let gap = optimality_gap(*c, gt).map_or(String::new(), |g| (g * 100.0).to_string());
                let _ = writeln!(out, "{},{},{},{}", r.controller.key(), seed, c, gap);
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let put = |name: String, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put(format!("{stem}.json"), self.to_json()?)?;
        put(format!("{stem}.txt"), self.to_table())?;
        put(format!("{stem}_costs.csv"), self.costs_csv())
    }
}

/// `controller,seed,t,action`, one row per step.
pub fn write_action_logs(logs: &[ActionLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("controller,seed,t,action\n");
    for log in logs {
        let seed = log.seed.map_or(String::new(), |s| s.to_string());
        for (t, a) in log.actions.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", log.controller.key(), seed, t, a);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub params: BatteryParams,
    pub horizon: usize,
    pub forecaster: ForecasterKind,
    pub ppo: PpoConfig,
    pub seeds: Vec<u64>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            params: BatteryParams::default(),
            horizon: 24,
            forecaster: ForecasterKind::ArLinear,
            ppo: PpoConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.ppo.validate()?;
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Everything fitted on the training split.
#[derive(Debug, Clone)]
pub struct TrainedControllers {
    pub forecaster: ForecasterModel,
    pub agents: Vec<RlAgent>,
    pub curves: Vec<Vec<ppo::LearningPoint>>,
    pub baseline: BaselinePolicy,
}

pub fn train_controllers(train: &ExogenousSeries, config: &ComparisonConfig) -> Result<TrainedControllers> {
    config.validate()?;
    let forecaster = ForecasterModel::fit(train, config.forecaster)?;
    let mut agents = Vec::with_capacity(config.seeds.len());
    let mut curves = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let cfg = PpoConfig {
            seed,
            ..config.ppo.clone()
        };
        log::info!("training RL agent, seed {seed}, {} env steps", cfg.total_env_steps);
        let out = ppo::train(train, &config.params, &cfg)?;
        agents.push(out.agent);
        curves.push(out.curve);
    }
    Ok(TrainedControllers {
        forecaster,
        agents,
        curves,
        baseline: BaselinePolicy::from_train(train),
    })
}

/// Greedy RL pass with per-decision timing (encode, forward, arg-max).
pub fn rl_pass(
    agent: &RlAgent,
    series: &ExogenousSeries,
    params: &BatteryParams,
    soc0: f64,
) -> Result<(Trajectory, Vec<Duration>)> {
    let mut times = Vec::with_capacity(series.len());
    let traj = env::rollout(
        |s| {
            let started = Instant::now();
            let a = agent.act_greedy(s)?;
            times.push(started.elapsed());
            Ok(a)
        },
        series,
        params,
        soc0,
    )?;
    Ok((traj, times))
}

fn timed_rollout<P>(
    mut policy: P,
    series: &ExogenousSeries,
    params: &BatteryParams,
    soc0: f64,
) -> Result<(Trajectory, Vec<Duration>)>
where
    P: FnMut(&EnvState) -> Result<Action>,
{
    let mut times = Vec::with_capacity(series.len());
    let traj = env::rollout(
        |s| {
            let started = Instant::now();
            let a = policy(s);
            times.push(started.elapsed());
            a
        },
        series,
        params,
        soc0,
    )?;
    Ok((traj, times))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub logs: Vec<ActionLog>,
}

/// Evaluates already-trained controllers on `test`. `train` supplies the
/// forecaster's lag history and the dataset metadata. Each finished row is
/// handed to `sink` before the next controller runs.
pub fn evaluate(
    train: &ExogenousSeries,
    test: &ExogenousSeries,
    trained: &TrainedControllers,
    config: &ComparisonConfig,
    mut sink: impl FnMut(&ControllerRow),
) -> Result<Evaluation> {
    config.validate()?;
    let params = &config.params;
    let soc0 = params.default_soc0();
    let gt = mpc::ground_truth(test, params, soc0)?;
    let gap_of = |c: f64| optimality_gap(c, gt.cost).ok();
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut push = |rows: &mut Vec<ControllerRow>, row: ControllerRow| {
        sink(&row);
        rows.push(row);
    };
    let make_row = |kind: ControllerKind, costs: Vec<f64>, test_s: f64, median_s: f64, samples: u64| {
        let (mean, ci) = if costs.len() >= 2 {
            let (m, h) = confidence_interval(&costs).expect("n >= 2");
            (m, Some(h))
        } else {
            (costs[0], None)
        };
        let gap = gap_of(mean);
        ControllerRow {
            controller: kind,
            label: kind.label().to_string(),
            total_cost: mean,
            ci_half_width: ci,
            optimality_gap: gap,
            optimality_gap_pct: gap.map(gap_percent),
            testing_time_s: test_s,
            decision_time_median_s: median_s,
            train_samples_used: samples,
            per_seed_costs: costs,
        }
    };

    // RL, one pass per seed.
    let mut costs = Vec::new();
    let mut all_times = Vec::new();
    let mut total_s = 0.0;
    for agent in &trained.agents {
        let started = Instant::now();
        let (traj, times) = rl_pass(agent, test, params, soc0)?;
        total_s += started.elapsed().as_secs_f64();
        costs.push(traj.total_cost());
        logs.push(ActionLog {
            controller: ControllerKind::Rl,
            seed: Some(agent.seed),
            soc0,
            actions: traj.actions(),
            cost: traj.total_cost(),
        });
        all_times.extend(times);
    }
    let samples = trained.agents.first().map_or(0, |a| a.env_steps);
    let n = trained.agents.len().max(1) as f64;
    push(
        &mut rows,
        make_row(
            ControllerKind::Rl,
            costs,
            total_s / n,
            median(&all_times).as_secs_f64(),
            samples,
        ),
    );

    // MPC with the fitted forecaster, then with oracle forecasts.
    for (kind, fc, samples) in [
        (
            ControllerKind::Mpc,
            Forecaster::Model {
                model: &trained.forecaster,
                warmup: Some(train),
            },
            trained.forecaster.train_rows as u64,
        ),
        (ControllerKind::MpcExact, Forecaster::Oracle, 0),
    ] {
        let started = Instant::now();
        let run = mpc::receding_horizon_run(test, fc, params, config.horizon, soc0)?;
        let total = started.elapsed().as_secs_f64();
        logs.push(ActionLog {
            controller: kind,
            seed: None,
            soc0,
            actions: run.trajectory.actions(),
            cost: run.total_cost,
        });
        push(
            &mut rows,
            make_row(
                kind,
                vec![run.total_cost],
                total,
                median(&run.decision_times).as_secs_f64(),
                samples,
            ),
        );
    }

    // Threshold baseline.
    let started = Instant::now();
    let (traj, times) = timed_rollout(|s| Ok(baseline_act(s, &trained.baseline, params)), test, params, soc0)?;
    let total = started.elapsed().as_secs_f64();
    logs.push(ActionLog {
        controller: ControllerKind::Baseline,
        seed: None,
        soc0,
        actions: traj.actions(),
        cost: traj.total_cost(),
    });
    push(
        &mut rows,
        make_row(
            ControllerKind::Baseline,
            vec![traj.total_cost()],
            total,
            median(&times).as_secs_f64(),
            train.len() as u64,
        ),
    );

    logs.push(ActionLog {
        controller: ControllerKind::GroundTruth,
        seed: None,
        soc0,
        actions: gt.actions.clone(),
        cost: gt.cost,
    });
    let gt_s = gt.solve_time.as_secs_f64();
    push(
        &mut rows,
        make_row(ControllerKind::GroundTruth, vec![gt.cost], gt_s, gt_s, 0),
    );

    let idle = env::rollout(|_| Ok(Action::IDLE), test, params, soc0)?;
    logs.push(ActionLog {
        controller: ControllerKind::NoBms,
        seed: None,
        soc0,
        actions: idle.actions(),
        cost: idle.total_cost(),
    });
    push(
        &mut rows,
        make_row(ControllerKind::NoBms, vec![idle.total_cost()], 0.0, 0.0, 0),
    );

    Ok(Evaluation {
        report: EvalReport {
            schema: REPORT_SCHEMA.to_string(),
            dataset: DatasetMeta::of(train, test),
            seeds: trained.agents.iter().map(|a| a.seed).collect(),
            horizon: config.horizon,
            soc0,
            params: *params,
            rows,
        },
        logs,
    })
}

/// Trains every controller on `train` and evaluates on `test`.
pub fn run_comparison(
    train: &ExogenousSeries,
    test: &ExogenousSeries,
    config: &ComparisonConfig,
) -> Result<(TrainedControllers, Evaluation)> {
    let trained = train_controllers(train, config)?;
    let eval = evaluate(train, test, &trained, config, |_| {})?;
    Ok((trained, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDelta {
    pub controller: ControllerKind,
    /// Shifted minus unshifted gap, as a fraction.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRmse {
    pub price: f64,
    pub demand: f64,
}

impl From<&ForecastErrors> for ForecastRmse {
    fn from(e: &ForecastErrors) -> Self {
        Self {
            price: e.price_rmse(),
            demand: e.demand_rmse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub unshifted: EvalReport,
    pub shifted: EvalReport,
    pub gap_deltas: Vec<GapDelta>,
    pub forecast_rmse_unshifted: ForecastRmse,
    pub forecast_rmse_shifted: ForecastRmse,
}

impl RobustnessReport {
    pub fn delta(&self, kind: ControllerKind) -> Option<f64> {
        self.gap_deltas
            .iter()
            .find(|d| d.controller == kind)
            .and_then(|d| d.delta)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("Unshifted test\n");
        out.push_str(&self.unshifted.to_table());
        out.push_str("\nShifted test\n");
        out.push_str(&self.shifted.to_table());
        out.push_str("\nGap change (percentage points)\n");
        for d in &self.gap_deltas {
            let v = d.delta.map_or("n/a".to_string(), |v| format!("{:+.2}", v * 100.0));
            let _ = writeln!(out, "{:<18} {:>9}", d.controller.label(), v);
        }
        let _ = writeln!(
            out,
            "\nForecast RMSE price {:.5} -> {:.5}, demand {:.5} -> {:.5}",
            self.forecast_rmse_unshifted.price,
            self.forecast_rmse_shifted.price,
            self.forecast_rmse_unshifted.demand,
            self.forecast_rmse_shifted.demand
        );
        out
    }
}

/// Evaluates the same trained controllers on an unshifted and a shifted test
/// series and reports the change in each controller's gap.
pub fn robustness_from(
    train: &ExogenousSeries,
    test: &ExogenousSeries,
    shifted_test: &ExogenousSeries,
    trained: &TrainedControllers,
    config: &ComparisonConfig,
) -> Result<(RobustnessReport, Evaluation, Evaluation)> {
    let base = evaluate(train, test, trained, config, |_| {})?;
    let shifted = evaluate(train, shifted_test, trained, config, |_| {})?;
    let gap_deltas = ControllerKind::ALL
        .iter()
        .map(|&k| GapDelta {
            controller: k,
            delta: match (shifted.report.gap(k), base.report.gap(k)) {
                (Some(s), Some(u)) => Some(s - u),
                _ => None,
            },
        })
        .collect();
    let rmse_u = forecast_error(&trained.forecaster, test, config.horizon, Some(train))?;
    let rmse_s = forecast_error(&trained.forecaster, shifted_test, config.horizon, Some(train))?;
    Ok((
        RobustnessReport {
            unshifted: base.report.clone(),
            shifted: shifted.report.clone(),
            gap_deltas,
            forecast_rmse_unshifted: (&rmse_u).into(),
            forecast_rmse_shifted: (&rmse_s).into(),
        },
        base,
        shifted,
    ))
}

pub fn run_robustness(
    train: &ExogenousSeries,
    test: &ExogenousSeries,
    shifted_test: &ExogenousSeries,
    config: &ComparisonConfig,
) -> Result<RobustnessReport> {
    let trained = train_controllers(train, config)?;
    Ok(robustness_from(train, test, shifted_test, &trained, config)?.0)
}
