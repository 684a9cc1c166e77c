//! Price and demand forecasters used by the receding-horizon controller.
//!
//! Two models share one contract: `seasonal_naive` repeats the value one
//! season back; `ar_linear` is a joint linear autoregression whose features
//! are lags {1, 2, 24, 168} of both channels plus hour-of-day (sin/cos) and a
//! weekend flag, fitted by least squares on standardized values. Multi-step
//! forecasts are recursive: predictions are fed back as later lags.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use chrono::{Datelike, Duration, Timelike, Weekday};
use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ExogenousSeries;
use crate::error::{Error, Result};

pub const FORECASTER_SCHEMA: &str = "bms-bench/forecaster/v1";
pub const AR_LAGS: [usize; 4] = [1, 2, 24, 168];
pub const RIDGE_FALLBACK: f64 = 1e-6;
const CHANNELS: usize = 2;
const PRICE: usize = 0;
const DEMAND: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    SeasonalNaive,
    ArLinear,
}

impl std::str::FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seasonal_naive" => Ok(Self::SeasonalNaive),
            "ar_linear" => Ok(Self::ArLinear),
            other => Err(Error::Config(format!(
                "unknown forecaster kind {other:?} (expected seasonal_naive or ar_linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub sd: f64,
}

impl ChannelStats {
    /// Mean and population standard deviation. A constant channel gets
    /// `sd = 1` so standardization stays defined.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            mean,
            sd: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// A fitted forecaster. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterModel {
    pub schema: String,
    pub kind: ForecasterKind,
    pub season_length: usize,
    pub lags: Vec<usize>,
    /// Standardization statistics, price then demand.
    pub norm: [ChannelStats; 2],
    /// Regression coefficients per channel (empty for seasonal naive).
    pub coefficients: [Vec<f64>; 2],
    pub fitted: bool,
    /// Rows of history used for fitting.
    pub train_rows: usize,
}

/// `T + 1` values per channel for lead times `0..=T` from origin `origin_t`.
/// Lead 0 carries the observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastHorizon {
    pub prices_hat: Vec<f64>,
    pub demands_hat: Vec<f64>,
    pub origin_t: usize,
}

impl ForecastHorizon {
    /// True future values, the exact-model forecast.
    pub fn oracle(series: &ExogenousSeries, origin: usize, horizon: usize) -> Result<Self> {
        let end = origin + horizon;
        if end >= series.len() {
            return Err(Error::SeriesExhausted {
                t: end,
                len: series.len(),
            });
        }
        Ok(Self {
            prices_hat: series.prices()[origin..=end].to_vec(),
            demands_hat: series.demands()[origin..=end].to_vec(),
            origin_t: origin,
        })
    }

    pub fn len(&self) -> usize {
        self.prices_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices_hat.is_empty()
    }
}

fn feature_count(lags: &[usize]) -> usize {
    1 + CHANNELS * lags.len() + 3
}

/// Calendar features for an hour of day and weekend flag.
fn calendar(hour: u32, weekend: bool) -> [f64; 3] {
    let angle = 2.0 * PI * hour as f64 / 24.0;
    [angle.sin(), angle.cos(), if weekend { 1.0 } else { 0.0 }]
}

impl ForecasterModel {
    /// Fits a model on `history`.
    pub fn fit(history: &ExogenousSeries, kind: ForecasterKind) -> Result<Self> {
        Self::fit_with_season(history, kind, 24)
    }

    pub fn fit_with_season(history: &ExogenousSeries, kind: ForecasterKind, season_length: usize) -> Result<Self> {
        if season_length == 0 {
            return Err(Error::Config("season_length must be >= 1".into()));
        }
        let lags: Vec<usize> = match kind {
            ForecasterKind::SeasonalNaive => vec![season_length],
            ForecasterKind::ArLinear => AR_LAGS.to_vec(),
        };
        let depth = *lags.iter().max().expect("non-empty lag set");
        let required = 2 * season_length + depth;
        if history.len() < required {
            return Err(Error::Size(format!(
                "insufficient history for {kind:?}: {} rows, need at least {required}",
                history.len()
            )));
        }
        let norm = [ChannelStats::of(history.prices()), ChannelStats::of(history.demands())];
        let mut model = Self {
            schema: FORECASTER_SCHEMA.to_string(),
            kind,
            season_length,
            lags,
            norm,
            coefficients: [Vec::new(), Vec::new()],
            fitted: false,
            train_rows: history.len(),
        };
        if kind == ForecasterKind::ArLinear {
            model.coefficients = model.fit_ar(history)?;
        }
        model.fitted = true;
        Ok(model)
    }

    fn fit_ar(&self, history: &ExogenousSeries) -> Result<[Vec<f64>; 2]> {
        let depth = *self.lags.iter().max().expect("non-empty lag set");
        let z = self.standardize(history);
        let p = feature_count(&self.lags);
        let rows = history.len() - depth;
        let mut x = DMatrix::<f64>::zeros(rows, p);
        let mut targets = [DVector::<f64>::zeros(rows), DVector::<f64>::zeros(rows)];
        let mut feats = vec![0.0; p];
        for (r, tau) in (depth..history.len()).enumerate() {
            self.features_into(&z, tau, history.hour(tau) as u32, history.is_weekend(tau), &mut feats);
            for (c, v) in feats.iter().enumerate() {
                x[(r, c)] = *v;
            }
            targets[PRICE][r] = z[PRICE][tau];
            targets[DEMAND][r] = z[DEMAND][tau];
        }
        let xtx = x.transpose() * &x;
        let chol = match xtx.clone().cholesky().filter(|c| well_conditioned(c.l_dirty())) {
            Some(c) => c,
            None => {
                warn!("singular normal equations; refitting with ridge penalty {RIDGE_FALLBACK}");
                let ridge = xtx + DMatrix::<f64>::identity(p, p) * RIDGE_FALLBACK;
                ridge
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("ridge-regularized normal equations not positive definite".into()))?
            }
        };
        let solve = |y: &DVector<f64>| -> Vec<f64> { chol.solve(&(x.transpose() * y)).iter().copied().collect() };
        Ok([solve(&targets[PRICE]), solve(&targets[DEMAND])])
    }

    fn standardize(&self, series: &ExogenousSeries) -> [Vec<f64>; 2] {
        [
            series.prices().iter().map(|&v| self.norm[PRICE].z(v)).collect(),
            series.demands().iter().map(|&v| self.norm[DEMAND].z(v)).collect(),
        ]
    }

    /// Regression features for target index `tau` from standardized buffers.
    /// Lags reaching before the buffer start contribute the channel mean (0).
    fn features_into(&self, z: &[Vec<f64>; 2], tau: usize, hour: u32, weekend: bool, out: &mut [f64]) {
        out[0] = 1.0;
        let mut i = 1;
        for channel in z {
            for &lag in &self.lags {
                out[i] = if lag <= tau { channel[tau - lag] } else { 0.0 };
                i += 1;
            }
        }
        out[i..i + 3].copy_from_slice(&calendar(hour, weekend));
    }

    fn ensure_fitted(&self) -> Result<()> {
        if self.fitted {
            Ok(())
        } else {
            Err(Error::State("forecaster used before fitting".into()))
        }
    }

    /// Forecasts lead times `0..=horizon` from origin `t`, using only
    /// `history[..=t]`.
    pub fn predict_horizon(&self, history: &ExogenousSeries, t: usize, horizon: usize) -> Result<ForecastHorizon> {
        self.ensure_fitted()?;
        if horizon < 1 {
            return Err(Error::Config("forecast horizon must be >= 1".into()));
        }
        if t >= history.len() {
            return Err(Error::SeriesExhausted { t, len: history.len() });
        }
        let depth = *self.lags.iter().max().expect("non-empty lag set");
        let start = (t + 1).saturating_sub(depth);
        let mut raw = [
            history.prices()[start..=t].to_vec(),
            history.demands()[start..=t].to_vec(),
        ];
        let mut prices_hat = Vec::with_capacity(horizon + 1);
        let mut demands_hat = Vec::with_capacity(horizon + 1);
        prices_hat.push(history.price(t));
        demands_hat.push(history.demand(t));

        match self.kind {
            ForecasterKind::SeasonalNaive => {
                for _ in 1..=horizon {
                    let len = raw[PRICE].len();
                    let src = len.checked_sub(self.season_length).unwrap_or(len - 1);
                    let next = [raw[PRICE][src], raw[DEMAND][src]];
                    prices_hat.push(next[PRICE]);
                    demands_hat.push(next[DEMAND]);
                    raw[PRICE].push(next[PRICE]);
                    raw[DEMAND].push(next[DEMAND]);
                }
            }
            ForecasterKind::ArLinear => {
                let mut z = [
                    raw[PRICE].iter().map(|&v| self.norm[PRICE].z(v)).collect::<Vec<_>>(),
                    raw[DEMAND].iter().map(|&v| self.norm[DEMAND].z(v)).collect::<Vec<_>>(),
                ];
                let mut feats = vec![0.0; feature_count(&self.lags)];
                let origin_ts = history.timestamps()[t];
                for k in 1..=horizon {
                    let ts = origin_ts + Duration::hours(k as i64);
                    let weekend = matches!(ts.weekday(), Weekday::Sat | Weekday::Sun);
                    let tau = z[PRICE].len();
                    self.features_into(&z, tau, ts.hour(), weekend, &mut feats);
                    for c in 0..CHANNELS {
                        let zhat: f64 = feats.iter().zip(&self.coefficients[c]).map(|(f, w)| f * w).sum();
                        let value = (self.norm[c].mean + self.norm[c].sd * zhat).max(0.0);
                        if c == PRICE {
                            prices_hat.push(value);
                        } else {
                            demands_hat.push(value);
                        }
                    }
                    z[PRICE].push(self.norm[PRICE].z(prices_hat[k]));
                    z[DEMAND].push(self.norm[DEMAND].z(demands_hat[k]));
                }
            }
        }
        Ok(ForecastHorizon {
            prices_hat,
            demands_hat,
            origin_t: t,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if model.schema != FORECASTER_SCHEMA {
            return Err(Error::Serde(format!(
                "unsupported forecaster schema {:?} (expected {FORECASTER_SCHEMA})",
                model.schema
            )));
        }
        Ok(model)
    }
}

/// Rejects Cholesky factors with a pivot ratio below 1e-7 (condition number
/// of the normal matrix above ~1e14).
fn well_conditioned(l: &DMatrix<f64>) -> bool {
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min.is_finite() && min / max > 1e-7
}

/// Mean absolute and root-mean-square errors per channel and lead time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastErrors {
    /// Indexed `[channel][lead]`, channel 0 = price, 1 = demand.
    pub mae: [Vec<f64>; 2],
    pub rmse: [Vec<f64>; 2],
    pub n_origins: usize,
}

impl ForecastErrors {
    /// RMSE pooled over lead times `1..=T` for one channel (0 = price, 1 = demand).
    pub fn pooled_rmse(&self, channel: usize) -> f64 {
        let leads = &self.rmse[channel][1..];
        (leads.iter().map(|r| r * r).sum::<f64>() / leads.len() as f64).sqrt()
    }

    pub fn price_rmse(&self) -> f64 {
        self.pooled_rmse(PRICE)
    }

    pub fn demand_rmse(&self) -> f64 {
        self.pooled_rmse(DEMAND)
    }
}

/// Evaluates a forecast source over every origin of `test` with a full
/// horizon ahead. `warmup`, when given, is history preceding `test`.
pub fn forecast_error(
    model: &ForecasterModel,
    test: &ExogenousSeries,
    horizon: usize,
    warmup: Option<&ExogenousSeries>,
) -> Result<ForecastErrors> {
    let (history, offset) = match warmup {
        Some(w) => (w.concat(test)?, w.len()),
        None => (test.clone(), 0),
    };
    errors_from(test, horizon, |t| model.predict_horizon(&history, offset + t, horizon))
}

/// Errors of arbitrary per-origin forecasts against `test`.
pub fn errors_from<F>(test: &ExogenousSeries, horizon: usize, mut forecast: F) -> Result<ForecastErrors>
where
    F: FnMut(usize) -> Result<ForecastHorizon>,
{
    if test.len() <= horizon {
        return Err(Error::Size(format!(
            "test series of {} rows is shorter than horizon {horizon} + 1",
            test.len()
        )));
    }
    let n_origins = test.len() - horizon;
    let mut abs = [vec![0.0; horizon + 1], vec![0.0; horizon + 1]];
    let mut sq = [vec![0.0; horizon + 1], vec![0.0; horizon + 1]];
    for t in 0..n_origins {
        let f = forecast(t)?;
        for k in 0..=horizon {
            let errs = [
                f.prices_hat[k] - test.price(t + k),
                f.demands_hat[k] - test.demand(t + k),
            ];
            for c in 0..CHANNELS {
                abs[c][k] += errs[c].abs();
                sq[c][k] += errs[c] * errs[c];
            }
        }
    }
    let n = n_origins as f64;
    let mae = abs.map(|v| v.into_iter().map(|s| s / n).collect());
    let rmse = sq.map(|v| v.into_iter().map(|s| (s / n).sqrt()).collect());
    Ok(ForecastErrors { mae, rmse, n_origins })
}
