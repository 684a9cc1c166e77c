//! Deterministic battery simulator.
//!
//! Actions are SOC fractions per step: applying `a` moves `a * capacity_kwh`
//! kWh through the battery meter. Grid energy is `demand + a * E` and may be
//! negative, in which case the export is paid at the same price.

use serde::{Deserialize, Serialize};

use crate::data::ExogenousSeries;
use crate::error::{Error, Result};

/// Tolerance used to decide whether a SOC value sits on the action lattice.
pub const LATTICE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryParams {
    pub capacity_kwh: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// Largest SOC change per step. Zero disables the battery.
    pub a_max: f64,
    pub step_hours: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            capacity_kwh: 10.0,
            soc_min: 0.2,
            soc_max: 0.8,
            a_max: 0.1,
            step_hours: 1.0,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<()> {
        let BatteryParams {
            capacity_kwh,
            soc_min,
            soc_max,
            a_max,
            step_hours,
        } = *self;
        if ![capacity_kwh, soc_min, soc_max, a_max, step_hours]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidParams("non-finite battery parameter".into()));
        }
        if capacity_kwh <= 0.0 || step_hours <= 0.0 {
            return Err(Error::InvalidParams(
                "capacity_kwh and step_hours must be positive".into(),
            ));
        }
        if !(0.0 <= soc_min && soc_min < soc_max && soc_max <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "need 0 <= soc_min < soc_max <= 1, got [{soc_min}, {soc_max}]"
            )));
        }
        if a_max < 0.0 || a_max > soc_max - soc_min + LATTICE_TOL {
            return Err(Error::InvalidParams(format!(
                "a_max {a_max} must lie in [0, soc_max - soc_min]"
            )));
        }
        if a_max > 0.0 {
            let span = (soc_max - soc_min) / a_max;
            if (span - span.round()).abs() > LATTICE_TOL * span.max(1.0) {
                return Err(Error::Alignment(format!(
                    "soc range {} is not an integer multiple of a_max {a_max}",
                    soc_max - soc_min
                )));
            }
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.a_max == 0.0
    }

    /// Number of SOC lattice points `soc_min + k * a_max` within the bounds.
    pub fn n_levels(&self) -> usize {
        if self.is_disabled() {
            1
        } else {
            ((self.soc_max - self.soc_min) / self.a_max).round() as usize + 1
        }
    }

    pub fn soc_at(&self, level: usize) -> f64 {
        if self.is_disabled() || level == 0 {
            self.soc_min
        } else if level + 1 == self.n_levels() {
            self.soc_max
        } else {
            self.soc_min + level as f64 * self.a_max
        }
    }

    /// Lattice index of `soc`, or an alignment error when it is off-lattice.
    pub fn level_of(&self, soc: f64) -> Result<usize> {
        if !soc.is_finite() || soc < self.soc_min - LATTICE_TOL || soc > self.soc_max + LATTICE_TOL {
            return Err(Error::Alignment(format!(
                "soc {soc} outside [{}, {}]",
                self.soc_min, self.soc_max
            )));
        }
        if self.is_disabled() {
            return Ok(0);
        }
        let k = (soc - self.soc_min) / self.a_max;
        let level = k.round();
        if (k - level).abs() > LATTICE_TOL {
            return Err(Error::Alignment(format!(
                "soc {soc} is not on the lattice soc_min + k * {}",
                self.a_max
            )));
        }
        Ok(level as usize)
    }

    /// Midpoint of the SOC range snapped down to the lattice.
    pub fn default_soc0(&self) -> f64 {
        self.soc_at((self.n_levels() - 1) / 2)
    }

    /// kWh moved by an action of size `a`.
    pub fn energy(&self, a: f64) -> f64 {
        a * self.capacity_kwh
    }
}

/// MDP state `(SOC, price, demand, hour, weekend)` at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub soc: f64,
    pub price: f64,
    pub demand: f64,
    pub hour: u8,
    pub is_weekend: bool,
    pub t: usize,
}

impl EnvState {
    /// State at step `t` with the exogenous fields read from `series`.
    pub fn at(series: &ExogenousSeries, t: usize, soc: f64) -> Result<Self> {
        if t >= series.len() {
            return Err(Error::SeriesExhausted { t, len: series.len() });
        }
        Ok(Self {
            soc,
            price: series.price(t),
            demand: series.demand(t),
            hour: series.hour(t),
            is_weekend: series.is_weekend(t),
            t,
        })
    }
}

/// Continuous SOC change requested for one step.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Action(pub f64);

impl Action {
    pub const IDLE: Action = Action(0.0);

    pub fn value(self) -> f64 {
        self.0
    }
}

/// The three-way action set used by the learned and rule-based controllers.
/// Index order is the policy-head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscreteAction {
    Discharge = 0,
    Idle = 1,
    Charge = 2,
}

impl DiscreteAction {
    pub const ALL: [DiscreteAction; 3] = [Self::Discharge, Self::Idle, Self::Charge];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn to_action(self, params: &BatteryParams) -> Action {
        match self {
            Self::Discharge => Action(-params.a_max),
            Self::Idle => Action::IDLE,
            Self::Charge => Action(params.a_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    /// SOC change actually applied after clamping to the bounds and rate limit.
    pub effective_a: f64,
    /// kWh bought from the grid this step; negative means export.
    pub grid_energy: f64,
    /// True when `next_state` lies past the end of the series.
    pub done: bool,
}

/// Advances one step. The requested action is clamped so the SOC stays inside
/// `[soc_min, soc_max]`, and the reward charges only the energy actually
/// moved.
pub fn step(state: &EnvState, action: Action, params: &BatteryParams, series: &ExogenousSeries) -> Result<StepOutcome> {
    if state.t >= series.len() {
        return Err(Error::SeriesExhausted {
            t: state.t,
            len: series.len(),
        });
    }
    if !action.0.is_finite() || !state.soc.is_finite() || !state.price.is_finite() || !state.demand.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite step input: soc={}, a={}, price={}, demand={}",
            state.soc, action.0, state.price, state.demand
        )));
    }
    let effective_a = action
        .0
        .clamp(params.soc_min - state.soc, params.soc_max - state.soc)
        .clamp(-params.a_max, params.a_max);
    let mut next_soc = state.soc + effective_a;
    if !params.is_disabled() {
        // Keep long rollouts from drifting off the lattice through rounding.
        let k = ((next_soc - params.soc_min) / params.a_max).round();
        if k >= 0.0 && (k as usize) < params.n_levels() {
            let snapped = params.soc_at(k as usize);
            if (snapped - next_soc).abs() < LATTICE_TOL {
                next_soc = snapped;
            }
        }
    }
    let grid_energy = state.demand + params.energy(effective_a);
    let reward = -(state.price * grid_energy);

    let next_t = state.t + 1;
    let done = next_t >= series.len();
    let next_state = if done {
        EnvState {
            soc: next_soc,
            t: next_t,
            ..*state
        }
    } else {
        EnvState::at(series, next_t, next_soc)?
    };
    Ok(StepOutcome {
        next_state,
        reward,
        effective_a,
        grid_energy,
        done,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: Action,
    pub effective_a: f64,
    pub reward: f64,
    pub grid_energy: f64,
}

/// One pass of a controller over a series: one transition per series entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub soc0: f64,
    pub final_soc: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Total cost, the negated sum of rewards.
    pub fn total_cost(&self) -> f64 {
        -self.transitions.iter().map(|t| t.reward).sum::<f64>()
    }

    /// Requested actions, in order.
    pub fn actions(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.action.0).collect()
    }

    pub fn effective_actions(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.effective_a).collect()
    }
}

/// Runs `policy` from `soc0` over every entry of `series`.
pub fn rollout<P>(mut policy: P, series: &ExogenousSeries, params: &BatteryParams, soc0: f64) -> Result<Trajectory>
where
    P: FnMut(&EnvState) -> Result<Action>,
{
    params.validate()?;
    params.level_of(soc0)?;
    if series.is_empty() {
        return Err(Error::Size("empty series".into()));
    }
    let mut state = EnvState::at(series, 0, soc0)?;
    let mut transitions = Vec::with_capacity(series.len());
    loop {
        let action = policy(&state)?;
        if !action.0.is_finite() || action.0.abs() > params.a_max + LATTICE_TOL {
            return Err(Error::InvalidAction {
                a: action.0,
                a_max: params.a_max,
            });
        }
        let out = step(&state, action, params, series)?;
        transitions.push(Transition {
            state,
            action,
            effective_a: out.effective_a,
            reward: out.reward,
            grid_energy: out.grid_energy,
        });
        state = out.next_state;
        if out.done {
            break;
        }
    }
    Ok(Trajectory {
        transitions,
        soc0,
        final_soc: state.soc,
    })
}

/// Open-loop replay of a logged action sequence.
pub fn replay(actions: &[f64], series: &ExogenousSeries, params: &BatteryParams, soc0: f64) -> Result<Trajectory> {
    if actions.len() != series.len() {
        return Err(Error::Size(format!(
            "{} actions for a series of {} steps",
            actions.len(),
            series.len()
        )));
    }
    rollout(|s| Ok(Action(actions[s.t])), series, params, soc0)
}

/// Cost with the battery idle: `sum_t price_t * demand_t`.
pub fn no_bms_cost(series: &ExogenousSeries) -> f64 {
    series.prices().iter().zip(series.demands()).map(|(p, d)| p * d).sum()
}
