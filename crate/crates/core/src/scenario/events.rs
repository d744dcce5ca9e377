//! Scripted scenarios: a horizon, a seed and a schedule of context events.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::ContextEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Steps per episode.
    pub horizon: u64,
    pub seed: u64,
    /// Std of forecast perturbation, in scaled feature units.
    #[serde(default)]
    pub forecast_noise: f64,
    #[serde(default)]
    pub events: Vec<ContextEvent>,
}

impl Scenario {
    pub fn quiet(horizon: u64, seed: u64) -> Self {
        Self {
            name: "quiet".into(),
            horizon,
            seed,
            forecast_noise: 0.0,
            events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("scenario horizon must be positive".into()));
        }
        if !(self.forecast_noise >= 0.0) {
            return Err(Error::InvalidParameter("forecast_noise must be nonnegative".into()));
        }
        for e in &self.events {
            e.validate()?;
            if e.t >= self.horizon {
                return Err(Error::InvalidParameter(format!(
                    "event {} at t={} lies outside the horizon {}",
                    e.kind, e.t, self.horizon
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Events pending at step `t`: started at or before `t`, not yet expired.
pub fn schedule_events(scenario: &Scenario, t: u64) -> Vec<ContextEvent> {
    scenario.events.iter().filter(|e| e.is_pending(t)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::EventKind;

    fn ev(t: u64, kind: EventKind, severity: f64, duration: u64) -> ContextEvent {
        ContextEvent {
            t,
            kind,
            severity,
            duration,
            region: None,
            text: String::new(),
        }
    }

    #[test]
    fn delivery_windows() {
        let mut s = Scenario::quiet(300, 1);
        assert!((0..300).all(|t| schedule_events(&s, t).is_empty()));
        s.events.push(ev(100, EventKind::Drought, 0.4, 50));
        assert!(schedule_events(&s, 99).is_empty());
        assert_eq!(schedule_events(&s, 100).len(), 1);
        assert_eq!(schedule_events(&s, 149).len(), 1);
        assert!(schedule_events(&s, 150).is_empty());
        s.events.push(ev(120, EventKind::Flood, 0.8, 10));
        assert_eq!(schedule_events(&s, 125).len(), 2);
    }

    #[test]
    fn parse_and_validate() {
        let text = r#"{"horizon": 48, "seed": 3, "events": [
            {"t": 4, "kind": "storm_approaching", "severity": 0.5, "duration": 6, "region": null, "text": "heavy rain expected"}
        ]}"#;
        let s = Scenario::from_json_str(text).unwrap();
        assert_eq!(s.events[0].kind, EventKind::StormApproaching);
        let bad = text.replace("\"t\": 4", "\"t\": 48");
        assert!(Scenario::from_json_str(&bad).is_err());
        let unknown = text.replace("storm_approaching", "meteor");
        assert!(Scenario::from_json_str(&unknown).is_err());
    }
}
