//! Hourly price/demand series: CSV ingestion, a seeded synthetic generator
//! and chronological train/test splitting.
//!
//! CSV schema (header required):
//!
//! ```text
//! timestamp,price,demand
//! 2017-07-01T00:00:00,0.1032,1.84
//! ```
//!
//! Timestamps are ISO-8601 on the hour and strictly hourly. Prices are in
//! currency per kWh, demand in kWh per step.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:00:00";
const PARSE_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Minimum length of each side of a train/test split (one 24-step horizon plus
/// the current step).
pub const MIN_SPLIT_LEN: usize = 25;

/// Aligned hourly exogenous inputs: prices, demands and calendar features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousSeries {
    timestamps: Vec<NaiveDateTime>,
    prices: Vec<f64>,
    demands: Vec<f64>,
    hours: Vec<u8>,
    weekend: Vec<bool>,
}

impl ExogenousSeries {
    /// Builds a series, deriving hour-of-day and weekend flags from the
    /// timestamps. Row errors report the CSV line the row would occupy
    /// (header on line 1).
    pub fn new(timestamps: Vec<NaiveDateTime>, prices: Vec<f64>, demands: Vec<f64>) -> Result<Self> {
        if timestamps.len() != prices.len() || prices.len() != demands.len() {
            return Err(Error::Size(format!(
                "column lengths differ: {} timestamps, {} prices, {} demands",
                timestamps.len(),
                prices.len(),
                demands.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(Error::Size(format!(
                "series needs at least 2 rows, got {}",
                timestamps.len()
            )));
        }
        for i in 0..timestamps.len() {
            let line = i + 2;
            let ts = timestamps[i];
            if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
                return Err(Error::TimestampAlignment {
                    line,
                    msg: format!("{ts} is not on the hour"),
                });
            }
            if i > 0 {
                let delta = ts - timestamps[i - 1];
                if delta != Duration::hours(1) {
                    let kind = if delta <= Duration::zero() {
                        "duplicate or out-of-order"
                    } else {
                        "gap before"
                    };
                    return Err(Error::TimestampAlignment {
                        line,
                        msg: format!("{kind} timestamp {ts} (previous {})", timestamps[i - 1]),
                    });
                }
            }
            check_value("price", prices[i], line)?;
            check_value("demand", demands[i], line)?;
        }
        let hours = timestamps.iter().map(|t| t.hour() as u8).collect();
        let weekend = timestamps.iter().map(is_weekend).collect();
        Ok(Self {
            timestamps,
            prices,
            demands,
            hours,
            weekend,
        })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn demands(&self) -> &[f64] {
        &self.demands
    }

    pub fn hours(&self) -> &[u8] {
        &self.hours
    }

    pub fn weekend_flags(&self) -> &[bool] {
        &self.weekend
    }

    pub fn price(&self, t: usize) -> f64 {
        self.prices[t]
    }

    pub fn demand(&self, t: usize) -> f64 {
        self.demands[t]
    }

    pub fn hour(&self, t: usize) -> u8 {
        self.hours[t]
    }

    pub fn is_weekend(&self, t: usize) -> bool {
        self.weekend[t]
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() || end - start < 2 {
            return Err(Error::Size(format!(
                "invalid slice [{start}, {end}) of series with {} rows",
                self.len()
            )));
        }
        Ok(Self {
            timestamps: self.timestamps[start..end].to_vec(),
            prices: self.prices[start..end].to_vec(),
            demands: self.demands[start..end].to_vec(),
            hours: self.hours[start..end].to_vec(),
            weekend: self.weekend[start..end].to_vec(),
        })
    }

    /// Appends `other`, which must start exactly one hour after `self` ends.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut timestamps = self.timestamps.clone();
        timestamps.extend_from_slice(&other.timestamps);
        let mut prices = self.prices.clone();
        prices.extend_from_slice(&other.prices);
        let mut demands = self.demands.clone();
        demands.extend_from_slice(&other.demands);
        Self::new(timestamps, prices, demands)
    }

    /// Copy with every demand multiplied by `factor`.
    pub fn with_scaled_demand(&self, factor: f64) -> Result<Self> {
        let demands = self.demands.iter().map(|d| d * factor).collect();
        Self::new(self.timestamps.clone(), self.prices.clone(), demands)
    }
}

fn check_value(name: &str, v: f64, line: usize) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Validation {
            line,
            msg: format!("{name} {v} is not finite"),
        });
    }
    if v < 0.0 {
        return Err(Error::Validation {
            line,
            msg: format!("negative {name} {v}"),
        });
    }
    Ok(())
}

fn is_weekend(ts: &NaiveDateTime) -> bool {
    matches!(ts.weekday(), Weekday::Sat | Weekday::Sun)
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str, line: usize) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), PARSE_FORMAT).map_err(|e| Error::Parse {
        line,
        msg: format!("bad timestamp {s:?}: {e}"),
    })
}

/// Reads a `timestamp,price,demand` CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<ExogenousSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<ExogenousSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols != ["timestamp", "price", "demand"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `timestamp,price,demand`, got `{}`", cols.join(",")),
        });
    }

    let mut timestamps = Vec::new();
    let mut prices = Vec::new();
    let mut demands = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let ts = parse_timestamp(&record[0], line)?;
        let price = parse_number(&record[1], "price", line)?;
        let demand = parse_number(&record[2], "demand", line)?;
        check_value("price", price, line)?;
        check_value("demand", demand, line)?;
        if let Some(prev) = timestamps.last() {
            let delta = ts - *prev;
            if delta != Duration::hours(1) {
                return Err(Error::TimestampAlignment {
                    line,
                    msg: if delta <= Duration::zero() {
                        format!("duplicate or out-of-order timestamp {ts}")
                    } else {
                        format!("missing hour(s) between {prev} and {ts}")
                    },
                });
            }
        }
        timestamps.push(ts);
        prices.push(price);
        demands.push(demand);
    }
    ExogenousSeries::new(timestamps, prices, demands)
}

fn parse_number(s: &str, name: &str, line: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {name} value {s:?}"),
    })
}

/// Writes the series in the CSV schema. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(series: &ExogenousSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv_to(series, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv_to<W: Write>(series: &ExogenousSeries, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "timestamp,price,demand")?;
    for i in 0..series.len() {
        writeln!(
            w,
            "{},{},{}",
            format_timestamp(&series.timestamps[i]),
            series.prices[i],
            series.demands[i]
        )?;
    }
    Ok(())
}

/// Demand distribution shift applied on top of the base generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandShift {
    /// Multiplies every demand value.
    pub demand_mean_scale: f64,
    /// Second-harmonic skew of the daily demand shape, in (-1, 1). Zero keeps
    /// the shape.
    #[serde(default)]
    pub demand_shape_skew: f64,
}

impl Default for DemandShift {
    fn default() -> Self {
        Self {
            demand_mean_scale: 1.0,
            demand_shape_skew: 0.0,
        }
    }
}

/// Parameters of the synthetic price/demand generator.
///
/// Price: `price_base + price_daily_amp * sin(2*pi*(h - 12)/24)` plus noise,
/// which peaks at 18:00 and bottoms at 06:00. Demand:
/// `demand_base + demand_daily_amp * sin(2*pi*(h - 8)/24)` scaled by
/// `demand_weekend_scale` on weekends, plus noise. Noisy values are
/// truncated at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub days: usize,
    /// First timestamp, `YYYY-MM-DD` at 00:00.
    pub start_date: NaiveDate,
    pub price_base: f64,
    pub price_daily_amp: f64,
    pub price_noise_sd: f64,
    pub demand_base: f64,
    pub demand_daily_amp: f64,
    pub demand_weekend_scale: f64,
    pub demand_noise_sd: f64,
    pub shift: Option<DemandShift>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            days: 60,
            start_date: NaiveDate::from_ymd_opt(2017, 7, 1).expect("valid date"),
            price_base: 0.10,
            price_daily_amp: 0.04,
            price_noise_sd: 0.008,
            demand_base: 1.5,
            demand_daily_amp: 0.6,
            demand_weekend_scale: 0.8,
            demand_noise_sd: 0.15,
            shift: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("price_base", self.price_base),
            ("price_daily_amp", self.price_daily_amp),
            ("price_noise_sd", self.price_noise_sd),
            ("demand_base", self.demand_base),
            ("demand_daily_amp", self.demand_daily_amp),
            ("demand_weekend_scale", self.demand_weekend_scale),
            ("demand_noise_sd", self.demand_noise_sd),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.days < 1 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        if self.price_base > 0.0 && self.price_daily_amp >= self.price_base {
            return Err(Error::Config("price_daily_amp must be < price_base".into()));
        }
        if self.demand_base > 0.0 && self.demand_daily_amp >= self.demand_base {
            return Err(Error::Config("demand_daily_amp must be < demand_base".into()));
        }
        if let Some(shift) = &self.shift {
            if !(shift.demand_mean_scale.is_finite() && shift.demand_mean_scale > 0.0) {
                return Err(Error::Config("shift.demand_mean_scale must be > 0".into()));
            }
            if !(shift.demand_shape_skew.abs() < 1.0) {
                return Err(Error::Config("shift.demand_shape_skew must lie in (-1, 1)".into()));
            }
        }
        Ok(())
    }

    /// Same configuration with the shift replaced.
    pub fn with_shift(&self, shift: Option<DemandShift>) -> Self {
        Self { shift, ..self.clone() }
    }
}

/// Generates a synthetic series. Prices and demands draw noise from separate
/// ChaCha streams, so a demand shift never perturbs the prices.
pub fn generate(config: &GeneratorConfig) -> Result<ExogenousSeries> {
    config.validate()?;
    let n = config.days * 24;
    let start = config.start_date.and_hms_opt(0, 0, 0).expect("midnight is valid");

    let mut price_rng = ChaCha8Rng::seed_from_u64(config.seed);
    price_rng.set_stream(1);
    let mut demand_rng = ChaCha8Rng::seed_from_u64(config.seed);
    demand_rng.set_stream(2);

    let shift = config.shift.unwrap_or_default();
    let mut timestamps = Vec::with_capacity(n);
    let mut prices = Vec::with_capacity(n);
    let mut demands = Vec::with_capacity(n);
    for i in 0..n {
        let ts = start + Duration::hours(i as i64);
        let h = ts.hour() as f64;

        let zp: f64 = StandardNormal.sample(&mut price_rng);
        let price = config.price_base
            + config.price_daily_amp * (2.0 * PI * (h - 12.0) / 24.0).sin()
            + config.price_noise_sd * zp;

        let zd: f64 = StandardNormal.sample(&mut demand_rng);
        let weekend_scale = if is_weekend(&ts) {
            config.demand_weekend_scale
        } else {
            1.0
        };
        let phase = 2.0 * PI * (h - 8.0) / 24.0;
        let base_demand =
            (config.demand_base + config.demand_daily_amp * phase.sin()) * weekend_scale + config.demand_noise_sd * zd;
        let demand =
            base_demand.max(0.0) * shift.demand_mean_scale * (1.0 + shift.demand_shape_skew * (2.0 * phase).sin());

        timestamps.push(ts);
        prices.push(price.max(0.0));
        demands.push(demand.max(0.0));
    }
    ExogenousSeries::new(timestamps, prices, demands)
}

/// Chronological split: the first `round(len * train_frac)` rows train, the
/// rest test.
pub fn split(series: &ExogenousSeries, train_frac: f64) -> Result<(ExogenousSeries, ExogenousSeries)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let n = series.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    if n_train < MIN_SPLIT_LEN || n - n_train < MIN_SPLIT_LEN {
        return Err(Error::Size(format!(
            "split of {n} rows at {train_frac} gives ({n_train}, {}); each part needs >= {MIN_SPLIT_LEN}",
            n - n_train
        )));
    }
    Ok((series.slice(0, n_train)?, series.slice(n_train, n)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s, 0).unwrap()
    }

    fn flat_config(days: usize) -> GeneratorConfig {
        GeneratorConfig {
            days,
            price_daily_amp: 0.0,
            price_noise_sd: 0.0,
            demand_daily_amp: 0.0,
            demand_noise_sd: 0.0,
            demand_weekend_scale: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn two_row_file_parses_with_calendar_fields() {
        let csv = "timestamp,price,demand\n2017-07-01T22:00:00,0.1,2.5\n2017-07-01T23:00:00,0.2,3\n";
        let s = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.hours(), &[22, 23]);
        // 2017-07-01 was a Saturday.
        assert_eq!(s.weekend_flags(), &[true, true]);
        assert_eq!(s.prices(), &[0.1, 0.2]);
    }

    #[test]
    fn missing_hour_is_an_alignment_error() {
        let csv = "timestamp,price,demand\n2017-07-03T00:00:00,0.1,1\n2017-07-03T02:00:00,0.1,1\n";
        match read_csv(csv.as_bytes()) {
            Err(Error::TimestampAlignment { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_timestamp_is_an_alignment_error() {
        let csv = "timestamp,price,demand\n2017-07-03T00:00:00,0.1,1\n2017-07-03T00:00:00,0.1,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes()),
            Err(Error::TimestampAlignment { .. })
        ));
    }

    #[test]
    fn negative_values_fail_validation() {
        let csv = "timestamp,price,demand\n2017-07-03T00:00:00,0.1,1\n2017-07-03T01:00:00,-0.1,1\n";
        match read_csv(csv.as_bytes()) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_its_line() {
        let csv = "timestamp,price,demand\n2017-07-03T00:00:00,0.1,1\n2017-07-03T01:00:00,abc,1\n";
        match read_csv(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_header = "time,price,demand\n";
        assert!(matches!(
            read_csv(bad_header.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let s = generate(&GeneratorConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn flat_generator_is_constant() {
        let s = generate(&flat_config(3)).unwrap();
        assert!(s.prices().iter().all(|&p| p == 0.10));
        assert!(s.demands().iter().all(|&d| d == 1.5));
    }

    #[test]
    fn generator_is_reproducible() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GeneratorConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().prices(), generate(&other).unwrap().prices());
    }

    #[test]
    fn shift_scales_demand_and_keeps_prices() {
        let base = GeneratorConfig {
            days: 30,
            ..Default::default()
        };
        let shifted = base.with_shift(Some(DemandShift {
            demand_mean_scale: 1.3,
            demand_shape_skew: 0.0,
        }));
        let a = generate(&base).unwrap();
        let b = generate(&shifted).unwrap();
        assert_eq!(a.prices(), b.prices());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ratio = mean(b.demands()) / mean(a.demands());
        assert!((ratio / 1.3 - 1.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn split_is_chronological_and_lossless() {
        let s = generate(&GeneratorConfig {
            days: 5,
            ..Default::default()
        })
        .unwrap()
        .slice(0, 100)
        .unwrap();
        let (train, test) = split(&s, 0.7).unwrap();
        assert_eq!((train.len(), test.len()), (70, 30));
        assert!(train.timestamps().last().unwrap() < test.timestamps().first().unwrap());
        assert_eq!(train.concat(&test).unwrap(), s);
    }

    #[test]
    fn split_rejects_short_series() {
        let s = generate(&flat_config(1)).unwrap();
        assert!(matches!(split(&s, 0.5), Err(Error::Size(_))));
        assert!(matches!(split(&s, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_amplitude_above_base() {
        let cfg = GeneratorConfig {
            price_daily_amp: 0.2,
            ..Default::default()
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn concat_requires_contiguity() {
        let a = ExogenousSeries::new(
            vec![ts("2017-07-01T00:00:00"), ts("2017-07-01T01:00:00")],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        assert!(a.concat(&a).is_err());
    }
}
