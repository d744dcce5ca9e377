//! Feature pipeline: gap filling, smoothing, scaling, calendar, lags and
//! rolling statistics, in that order.
//!
//! Scaling statistics come from the training split only and are applied
//! unchanged to later records, so test values may leave [0, 1].

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};

use super::timeseries::{Record, TimeSeries};
use crate::error::{Error, Result};

pub const VARIABLES: [&str; 4] = ["inflow", "demand", "temp", "precip"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub cadence_s: i64,
    /// Runs of missing records spanning this long or longer stay missing.
    pub max_gap_s: i64,
    pub smoothing_window: usize,
    pub lags: Vec<usize>,
    /// Rolling windows in records (7 and 30 days at hourly cadence).
    pub rolling_windows: Vec<usize>,
    /// Records strictly before this instant form the training split; `None`
    /// uses every record.
    pub train_end: Option<DateTime<Utc>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            cadence_s: 3600,
            max_gap_s: 6 * 3600,
            smoothing_window: 3,
            lags: vec![1, 6, 12, 24],
            rolling_windows: vec![7 * 24, 30 * 24],
            train_end: None,
        }
    }
}

/// Min-max for flows, mean/std for weather.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scaling {
    MinMax { min: f64, max: f64 },
    ZScore { mean: f64, std: f64 },
}

impl Scaling {
    /// Degenerate ranges map every value to 0.5 (min-max) or 0 (z-score).
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Scaling::MinMax { min, max } => {
                if max > min {
                    (x - min) / (max - min)
                } else {
                    0.5
                }
            }
            Scaling::ZScore { mean, std } => {
                if std > 0.0 {
                    (x - mean) / std
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match *self {
            Scaling::MinMax { min, max } => max <= min,
            Scaling::ZScore { std, .. } => std <= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub inflow: Scaling,
    pub demand: Scaling,
    pub temp: Scaling,
    pub precip: Scaling,
}

/// One node's engineered features on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub timestamps: Vec<DateTime<Utc>>,
    /// False where a long gap left the record missing.
    pub valid: Vec<bool>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeries {
    pub nodes: BTreeMap<String, FeatureTable>,
    pub stats: NormalizationStats,
    /// (node, timestamp) of records left missing.
    pub flagged: Vec<(String, DateTime<Utc>)>,
    pub warnings: Vec<String>,
}

/// A record slot on the uniform grid; `None` where a long gap was not filled.
pub type Slot = Option<Record>;

/// Put one node's records on the cadence grid, filling short gaps linearly.
pub fn regularize(records: &[Record], config: &PreprocessConfig) -> Result<Vec<(DateTime<Utc>, Slot)>> {
    if config.cadence_s <= 0 {
        return Err(Error::InvalidParameter("cadence must be positive".into()));
    }
    let cadence = Duration::seconds(config.cadence_s);
    let mut out: Vec<(DateTime<Utc>, Slot)> = Vec::with_capacity(records.len());
    for pair in records.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        out.push((a.timestamp, Some(a)));
        let span = (b.timestamp - a.timestamp).num_seconds();
        let steps = span / config.cadence_s;
        if steps <= 1 {
            continue;
        }
        let missing = steps - 1;
        let fill = missing * config.cadence_s < config.max_gap_s;
        for k in 1..=missing {
            let ts = a.timestamp + cadence * k as i32;
            let slot = fill.then(|| {
                let w = k as f64 / steps as f64;
                let lerp = |x: f64, y: f64| x + w * (y - x);
                Record {
                    timestamp: ts,
                    inflow_m3s: lerp(a.inflow_m3s, b.inflow_m3s),
                    temp_c: lerp(a.temp_c, b.temp_c),
                    precip_mm: lerp(a.precip_mm, b.precip_mm),
                    demand_m3s: lerp(a.demand_m3s, b.demand_m3s),
                }
            });
            out.push((ts, slot));
        }
    }
    if let Some(last) = records.last() {
        out.push((last.timestamp, Some(*last)));
    }
    Ok(out)
}

fn raw_vars(r: &Record) -> [f64; 4] {
    [r.inflow_m3s, r.demand_m3s, r.temp_c, r.precip_mm]
}

/// Trailing mean over up to `window` consecutive present values.
fn smooth(slots: &[Option<[f64; 4]>], window: usize) -> Vec<Option<[f64; 4]>> {
    let mut out = Vec::with_capacity(slots.len());
    for i in 0..slots.len() {
        let Some(_) = slots[i] else {
            out.push(None);
            continue;
        };
        let mut acc = [0.0; 4];
        let mut n = 0.0;
        for j in (0..=i).rev().take(window.max(1)) {
            let Some(v) = slots[j] else { break };
            for k in 0..4 {
                acc[k] += v[k];
            }
            n += 1.0;
        }
        out.push(Some(acc.map(|x| x / n)));
    }
    out
}

fn season(month: u32) -> f64 {
    match month {
        12 | 1 | 2 => 0.0,
        3..=5 => 1.0,
        6..=8 => 2.0,
        _ => 3.0,
    }
}

fn fit_stats(values: &[[f64; 4]], warnings: &mut Vec<String>) -> Result<NormalizationStats> {
    if values.is_empty() {
        return Err(Error::Empty("training split has no valid records".into()));
    }
    let col = |k: usize| values.iter().map(move |v| v[k]);
    let minmax = |k: usize| Scaling::MinMax {
        min: col(k).fold(f64::INFINITY, f64::min),
        max: col(k).fold(f64::NEG_INFINITY, f64::max),
    };
    let zscore = |k: usize| {
        let n = values.len() as f64;
        let mean = col(k).sum::<f64>() / n;
        let var = col(k).map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Scaling::ZScore { mean, std: var.sqrt() }
    };
    let stats = NormalizationStats {
        inflow: minmax(0),
        demand: minmax(1),
        temp: zscore(2),
        precip: zscore(3),
    };
    for (name, s) in VARIABLES.iter().zip([stats.inflow, stats.demand, stats.temp, stats.precip]) {
        if s.is_degenerate() {
            let msg = format!("degenerate range for {name}; scaled values set to a constant");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(stats)
}

fn column_names(config: &PreprocessConfig) -> Vec<String> {
    let mut cols: Vec<String> = VARIABLES.iter().map(|v| v.to_string()).collect();
    cols.extend(["hour", "day", "month", "season"].map(String::from));
    for v in VARIABLES {
        for l in &config.lags {
            cols.push(format!("{v}_lag{l}"));
        }
    }
    for v in VARIABLES {
        for w in &config.rolling_windows {
            cols.push(format!("{v}_mean{w}"));
            cols.push(format!("{v}_std{w}"));
        }
    }
    cols
}

struct Smoothed {
    grid: BTreeMap<String, (Vec<DateTime<Utc>>, Vec<Option<[f64; 4]>>)>,
    flagged: Vec<(String, DateTime<Utc>)>,
}

fn smoothed(series: &TimeSeries, config: &PreprocessConfig) -> Result<Smoothed> {
    let mut grid = BTreeMap::new();
    let mut flagged = Vec::new();
    for (node, records) in &series.nodes {
        let slots = regularize(records, config)?;
        let times: Vec<DateTime<Utc>> = slots.iter().map(|(t, _)| *t).collect();
        let raw: Vec<Option<[f64; 4]>> = slots.iter().map(|(_, s)| s.as_ref().map(raw_vars)).collect();
        for (t, s) in &slots {
            if s.is_none() {
                flagged.push((node.clone(), *t));
            }
        }
        grid.insert(node.clone(), (times, smooth(&raw, config.smoothing_window)));
    }
    Ok(Smoothed { grid, flagged })
}

/// Fit scaling on the training split and build features.
pub fn preprocess(series: &TimeSeries, config: &PreprocessConfig) -> Result<FeatureSeries> {
    let sm = smoothed(series, config)?;
    let mut warnings = Vec::new();
    let train: Vec<[f64; 4]> = sm
        .grid
        .values()
        .flat_map(|(times, vals)| {
            times
                .iter()
                .zip(vals)
                .filter(|(t, _)| config.train_end.is_none_or(|end| **t < end))
                .filter_map(|(_, v)| *v)
        })
        .collect();
    let stats = fit_stats(&train, &mut warnings)?;
    build(sm, config, stats, warnings)
}

/// Build features with previously fitted statistics.
pub fn preprocess_with_stats(series: &TimeSeries, config: &PreprocessConfig, stats: &NormalizationStats) -> Result<FeatureSeries> {
    let sm = smoothed(series, config)?;
    build(sm, config, stats.clone(), Vec::new())
}

fn build(sm: Smoothed, config: &PreprocessConfig, stats: NormalizationStats, warnings: Vec<String>) -> Result<FeatureSeries> {
    let columns = column_names(config);
    let scalers = [stats.inflow, stats.demand, stats.temp, stats.precip];
    let mut nodes = BTreeMap::new();
    for (node, (times, vals)) in sm.grid {
        let scaled: Vec<Option<[f64; 4]>> = vals
            .iter()
            .map(|v| v.map(|v| [0, 1, 2, 3].map(|k| scalers[k].apply(v[k]))))
            .collect();
        let n = times.len();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(columns.len());
            let cur = scaled[i];
            row.extend(cur.unwrap_or([f64::NAN; 4]));
            let t = times[i];
            row.extend([t.hour() as f64, t.day() as f64, t.month() as f64, season(t.month())]);
            for k in 0..4 {
                for &l in &config.lags {
                    row.push(if i >= l { scaled[i - l].map_or(f64::NAN, |v| v[k]) } else { f64::NAN });
                }
            }
            for k in 0..4 {
                for &w in &config.rolling_windows {
                    if i + 1 < w {
                        row.extend([f64::NAN, f64::NAN]);
                        continue;
                    }
                    let window: Vec<f64> = scaled[i + 1 - w..=i].iter().filter_map(|v| v.map(|v| v[k])).collect();
                    if window.is_empty() {
                        row.extend([f64::NAN, f64::NAN]);
                        continue;
                    }
                    let m = window.iter().sum::<f64>() / window.len() as f64;
                    let var = window.iter().map(|x| (x - m).powi(2)).sum::<f64>() / window.len() as f64;
                    row.extend([m, var.sqrt()]);
                }
            }
            rows.push(row);
        }
        nodes.insert(
            node,
            FeatureTable {
                valid: scaled.iter().map(Option::is_some).collect(),
                timestamps: times,
                columns: columns.clone(),
                rows,
            },
        );
    }
    Ok(FeatureSeries {
        nodes,
        stats,
        flagged: sm.flagged,
        warnings,
    })
}

/// `timestamp,node_id,valid,<features...>`; missing values are empty cells.
pub fn write_features(features: &FeatureSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let Some(first) = features.nodes.values().next() else {
        return Err(Error::Empty("feature series".into()));
    };
    let mut header = vec!["timestamp".to_string(), "node_id".into(), "valid".into()];
    header.extend(first.columns.iter().cloned());
    w.write_record(&header)?;
    for (node, table) in &features.nodes {
        for ((t, valid), row) in table.timestamps.iter().zip(&table.valid).zip(&table.rows) {
            let mut rec = vec![t.to_rfc3339(), node.clone(), valid.to_string()];
            rec.extend(row.iter().map(|x| if x.is_nan() { String::new() } else { x.to_string() }));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
