//! Per-node driver records read from CSV.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkTopology;

pub const COLUMNS: [&str; 6] = ["timestamp", "node_id", "inflow_m3s", "temp_c", "precip_mm", "demand_m3s"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub timestamp: DateTime<Utc>,
    pub inflow_m3s: f64,
    pub temp_c: f64,
    /// mm/h
    pub precip_mm: f64,
    pub demand_m3s: f64,
}

/// Records per node id, each strictly increasing in time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub nodes: BTreeMap<String, Vec<Record>>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.nodes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// ISO-8601 with an offset, or without one (read as UTC).
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|n| n.and_utc())
}

/// Parse CSV text. With a topology, node ids must belong to it.
pub fn parse_timeseries(text: &str, source: &str, topology: Option<&NetworkTopology>) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let position = |name: &str| header.iter().position(|h| h == name);
    for col in COLUMNS {
        if position(col).is_none() {
            return Err(Error::MissingColumn(col.into()));
        }
    }
    if let Some(extra) = header.iter().find(|h| !COLUMNS.contains(h)) {
        return Err(Error::Schema {
            path: source.into(),
            reason: format!("unexpected column {extra:?}"),
        });
    }
    let idx: Vec<usize> = COLUMNS.iter().map(|c| position(c).expect("checked")).collect();
    let mut series = TimeSeries::default();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let at = |reason: String| Error::Schema {
            path: source.into(),
            reason: format!("data row {}: {reason}", line + 1),
        };
        let timestamp = parse_timestamp(field(0)).ok_or_else(|| at(format!("bad timestamp {:?}", field(0))))?;
        let node = field(1).to_string();
        if let Some(topo) = topology {
            if topo.node_index(&node).is_none() {
                return Err(Error::UnknownNode(node));
            }
        }
        let num = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| at(format!("{} is not a number: {:?}", COLUMNS[k], field(k))))
        };
        let record = Record {
            timestamp,
            inflow_m3s: num(2)?,
            temp_c: num(3)?,
            precip_mm: num(4)?,
            demand_m3s: num(5)?,
        };
        let list = series.nodes.entry(node.clone()).or_default();
        if let Some(prev) = list.last() {
            if record.timestamp <= prev.timestamp {
                return Err(Error::NonMonotoneTimestamps {
                    node,
                    at: record.timestamp.to_rfc3339(),
                });
            }
        }
        list.push(record);
    }
    Ok(series)
}

pub fn load_timeseries(path: &Path, topology: Option<&NetworkTopology>) -> Result<TimeSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_timeseries(&text, &path.display().to_string(), topology)
}

pub fn write_timeseries(series: &TimeSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    w.write_record(COLUMNS)?;
    for (node, records) in &series.nodes {
        for r in records {
            w.write_record([
                r.timestamp.to_rfc3339(),
                node.clone(),
                r.inflow_m3s.to_string(),
                r.temp_c.to_string(),
                r.precip_mm.to_string(),
                r.demand_m3s.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
