//! Finite-horizon battery scheduling and its receding-horizon execution.
//!
//! The horizon problem minimizes `sum_k price_k * (E * a_k + demand_k)` under
//! `soc_{k+1} = soc_k + a_k`, `soc_min <= soc_k <= soc_max` and
//! `|a_k| <= a_max`. When the initial SOC and the bounds lie on the lattice
//! `soc_min + j * a_max`, the linear program has an optimal vertex in which
//! every `a_k` is one of `{-a_max, 0, +a_max}`, so a backward dynamic program
//! over the lattice solves it exactly in `O(T * levels * 3)`.
//!
//! There is no terminal SOC constraint: plans drain the battery towards the
//! end of the horizon whenever that pays.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::ExogenousSeries;
use crate::env::{self, Action, BatteryParams, DiscreteAction, Trajectory};
use crate::error::{Error, Result};
use crate::forecast::{ForecastHorizon, ForecasterModel};

/// Relative tolerance under which two plan costs count as tied.
const TIE_TOL: f64 = 1e-12;

/// Candidate order for tie-breaking: idle, then discharge, then charge.
const TIE_ORDER: [DiscreteAction; 3] = [DiscreteAction::Idle, DiscreteAction::Discharge, DiscreteAction::Charge];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonProblem {
    pub prices_hat: Vec<f64>,
    pub demands_hat: Vec<f64>,
    pub soc0: f64,
    pub params: BatteryParams,
}

impl HorizonProblem {
    pub fn new(prices_hat: Vec<f64>, demands_hat: Vec<f64>, soc0: f64, params: BatteryParams) -> Self {
        Self {
            prices_hat,
            demands_hat,
            soc0,
            params,
        }
    }

    pub fn from_forecast(f: &ForecastHorizon, soc0: f64, params: BatteryParams) -> Self {
        Self::new(f.prices_hat.clone(), f.demands_hat.clone(), soc0, params)
    }

    /// Number of decision steps (`T + 1`).
    pub fn len(&self) -> usize {
        self.prices_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices_hat.is_empty()
    }

    /// Cost of an action sequence under this problem's forecasts.
    pub fn cost_of(&self, actions: &[f64]) -> f64 {
        self.prices_hat
            .iter()
            .zip(&self.demands_hat)
            .zip(actions)
            .map(|((p, d), a)| p * (self.params.energy(*a) + d))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPlan {
    pub actions: Vec<f64>,
    pub steps: Vec<DiscreteAction>,
    pub predicted_cost: f64,
    /// SOC before each action plus the final SOC (`T + 2` entries).
    pub soc_path: Vec<f64>,
}

/// Solves the horizon problem exactly over the SOC lattice.
pub fn solve_horizon(problem: &HorizonProblem) -> Result<HorizonPlan> {
    let params = &problem.params;
    params.validate()?;
    let len = problem.len();
    if len == 0 || problem.demands_hat.len() != len {
        return Err(Error::Size(format!(
            "horizon arrays must be non-empty and equal length, got {} prices and {} demands",
            len,
            problem.demands_hat.len()
        )));
    }
    if problem
        .prices_hat
        .iter()
        .chain(&problem.demands_hat)
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput("non-finite forecast in horizon problem".into()));
    }
    let start = params.level_of(problem.soc0)?;
    let n = params.n_levels();

    let mut steps = Vec::with_capacity(len);
    if params.is_disabled() {
        steps.resize(len, DiscreteAction::Idle);
    } else {
        // value[k * n + j]: optimal battery-only cost from step k at level j.
        let mut value = vec![0.0; (len + 1) * n];
        let mut choice = vec![DiscreteAction::Idle; len * n];
        let step_energy = params.energy(params.a_max);
        for k in (0..len).rev() {
            let price = problem.prices_hat[k];
            for j in 0..n {
                let mut best = f64::INFINITY;
                let mut best_action = DiscreteAction::Idle;
                for action in TIE_ORDER {
                    let (next, energy) = match action {
                        DiscreteAction::Idle => (j, 0.0),
                        DiscreteAction::Discharge if j > 0 => (j - 1, -step_energy),
                        DiscreteAction::Charge if j + 1 < n => (j + 1, step_energy),
                        _ => continue,
                    };
                    let cand = price * energy + value[(k + 1) * n + next];
                    if cand < best - TIE_TOL * (1.0 + best.abs().min(f64::MAX)) {
                        best = cand;
                        best_action = action;
                    }
                }
                value[k * n + j] = best;
                choice[k * n + j] = best_action;
            }
        }
        let mut j = start;
        for k in 0..len {
            let action = choice[k * n + j];
            steps.push(action);
            j = match action {
                DiscreteAction::Idle => j,
                DiscreteAction::Discharge => j - 1,
                DiscreteAction::Charge => j + 1,
            };
        }
    }

    let actions: Vec<f64> = steps.iter().map(|s| s.to_action(params).0).collect();
    let mut soc_path = Vec::with_capacity(len + 1);
    let mut level = start;
    soc_path.push(problem.soc0);
    for s in &steps {
        level = match s {
            DiscreteAction::Idle => level,
            DiscreteAction::Discharge => level - 1,
            DiscreteAction::Charge => level + 1,
        };
        soc_path.push(if params.is_disabled() {
            problem.soc0
        } else {
            params.soc_at(level)
        });
    }
    Ok(HorizonPlan {
        predicted_cost: problem.cost_of(&actions),
        actions,
        steps,
        soc_path,
    })
}

/// Where the receding-horizon controller gets its forecasts.
#[derive(Debug, Clone, Copy)]
pub enum Forecaster<'a> {
    /// True future prices and demands.
    Oracle,
    /// A fitted model; `warmup` is history that precedes the evaluated series
    /// and feeds the model's lags.
    Model {
        model: &'a ForecasterModel,
        warmup: Option<&'a ExogenousSeries>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecedingHorizonRun {
    pub trajectory: Trajectory,
    pub total_cost: f64,
    /// Wall time of each decision (forecast plus solve).
    pub decision_times: Vec<Duration>,
    /// Plan computed at the first decision, with the forecasts it used.
    pub first_plan: HorizonPlan,
    pub first_problem: HorizonProblem,
}

/// Re-plans at every step and applies only the first action of each plan.
/// Lead 0 always uses the observed price and demand; the horizon is
/// truncated at the end of the series.
pub fn receding_horizon_run(
    series: &ExogenousSeries,
    forecaster: Forecaster<'_>,
    params: &BatteryParams,
    horizon: usize,
    soc0: f64,
) -> Result<RecedingHorizonRun> {
    if horizon < 1 {
        return Err(Error::Config("MPC horizon must be >= 1".into()));
    }
    let (history, offset) = match forecaster {
        Forecaster::Model { warmup: Some(w), .. } => (Some(w.concat(series)?), w.len()),
        Forecaster::Model { warmup: None, .. } => (Some(series.clone()), 0),
        Forecaster::Oracle => (None, 0),
    };
    let last = series.len() - 1;
    let mut decision_times = Vec::with_capacity(series.len());
    let mut first: Option<(HorizonPlan, HorizonProblem)> = None;

    let trajectory = env::rollout(
        |state| {
            let started = Instant::now();
            let h = horizon.min(last - state.t);
            let mut fc = if h == 0 {
                ForecastHorizon {
                    prices_hat: vec![state.price],
                    demands_hat: vec![state.demand],
                    origin_t: state.t,
                }
            } else {
                match (forecaster, &history) {
                    (Forecaster::Model { model, .. }, Some(hist)) => {
                        model.predict_horizon(hist, offset + state.t, h)?
                    }
                    _ => ForecastHorizon::oracle(series, state.t, h)?,
                }
            };
            fc.prices_hat[0] = state.price;
            fc.demands_hat[0] = state.demand;
            let problem = HorizonProblem::from_forecast(&fc, state.soc, *params);
            let plan = solve_horizon(&problem)?;
            decision_times.push(started.elapsed());
            let action = Action(plan.actions[0]);
            if first.is_none() {
                first = Some((plan, problem));
            }
            Ok(action)
        },
        series,
        params,
        soc0,
    )?;
    let (first_plan, first_problem) = first.expect("series has at least one step");
    Ok(RecedingHorizonRun {
        total_cost: trajectory.total_cost(),
        trajectory,
        decision_times,
        first_plan,
        first_problem,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Realized cost of the optimal plan, simulated through the environment.
    pub cost: f64,
    pub actions: Vec<f64>,
    pub plan: HorizonPlan,
    pub solve_time: Duration,
}

/// Optimal cost with perfect knowledge of the whole series.
pub fn ground_truth(series: &ExogenousSeries, params: &BatteryParams, soc0: f64) -> Result<GroundTruth> {
    let started = Instant::now();
    let problem = HorizonProblem::new(series.prices().to_vec(), series.demands().to_vec(), soc0, *params);
    let plan = solve_horizon(&problem)?;
    let solve_time = started.elapsed();
    let traj = env::replay(&plan.actions, series, params, soc0)?;
    Ok(GroundTruth {
        cost: traj.total_cost(),
        actions: plan.actions.clone(),
        plan,
        solve_time,
    })
}

/// Writes `t,action,soc,price_hat,demand_hat`, one row per plan step.
pub fn write_plan_csv(plan: &HorizonPlan, problem: &HorizonProblem, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "t,action,soc,price_hat,demand_hat")?;
        for k in 0..plan.actions.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                k, plan.actions[k], plan.soc_path[k], problem.prices_hat[k], problem.demands_hat[k]
            )?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
