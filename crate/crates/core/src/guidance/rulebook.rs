//! Event × mode → directive templates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::directive::{ContextEvent, EventKind, GuidanceDirective, Mode, Trigger, WireWeights};
use crate::error::{Error, Result};
use crate::murmuration::CoordinationWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleEntry {
    pub weights: CoordinationWeights,
    pub gamma_human: f64,
}

/// Complete table of templates. Construction fails if any (kind, mode) pair
/// is missing, so lookups never fail at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    entries: BTreeMap<(EventKind, Mode), RuleEntry>,
}

#[derive(Serialize, Deserialize)]
struct RawEntry {
    kind: EventKind,
    mode: Mode,
    weights: WireWeights,
    gamma_human: f64,
}

#[derive(Serialize, Deserialize)]
struct RawRulebook {
    entries: Vec<RawEntry>,
}

/// Weights applied when nothing better is available during an emergency.
pub fn emergency_entry() -> RuleEntry {
    RuleEntry {
        weights: CoordinationWeights::new(0.1, 0.8, 0.1).expect("on simplex"),
        gamma_human: 0.05,
    }
}

impl Default for Rulebook {
    fn default() -> Self {
        use EventKind as K;
        use Mode::*;
        let rows: [(K, Mode, [f64; 3], f64); 27] = [
            (K::None, Strategic, [0.6, 0.1, 0.3], 0.0),
            (K::None, Tactical, [0.6, 0.1, 0.3], 0.0),
            (K::None, Operational, [0.6, 0.1, 0.3], 0.0),
            (K::Drought, Strategic, [0.6, 0.1, 0.3], 0.15),
            (K::Drought, Tactical, [0.7, 0.1, 0.2], 0.15),
            (K::Drought, Operational, [0.8, 0.1, 0.1], 0.15),
            (K::Flood, Strategic, [0.4, 0.4, 0.2], 0.05),
            (K::Flood, Tactical, [0.2, 0.6, 0.2], 0.05),
            (K::Flood, Operational, [0.1, 0.8, 0.1], 0.05),
            (K::StormApproaching, Strategic, [0.4, 0.4, 0.2], 0.05),
            (K::StormApproaching, Tactical, [0.2, 0.6, 0.2], 0.05),
            (K::StormApproaching, Operational, [0.1, 0.8, 0.1], 0.05),
            (K::Contamination, Strategic, [0.4, 0.5, 0.1], 0.1),
            (K::Contamination, Tactical, [0.3, 0.6, 0.1], 0.1),
            (K::Contamination, Operational, [0.2, 0.7, 0.1], 0.1),
            (K::WinterStorm, Strategic, [0.5, 0.3, 0.2], 0.1),
            (K::WinterStorm, Tactical, [0.3, 0.5, 0.2], 0.1),
            (K::WinterStorm, Operational, [0.2, 0.7, 0.1], 0.1),
            (K::Heatwave, Strategic, [0.6, 0.1, 0.3], 0.1),
            (K::Heatwave, Tactical, [0.7, 0.1, 0.2], 0.1),
            (K::Heatwave, Operational, [0.8, 0.1, 0.1], 0.1),
            (K::Maintenance, Strategic, [0.5, 0.2, 0.3], 0.2),
            (K::Maintenance, Tactical, [0.5, 0.2, 0.3], 0.2),
            (K::Maintenance, Operational, [0.4, 0.4, 0.2], 0.2),
            (K::Regulatory, Strategic, [0.5, 0.1, 0.4], 0.0),
            (K::Regulatory, Tactical, [0.5, 0.1, 0.4], 0.0),
            (K::Regulatory, Operational, [0.4, 0.2, 0.4], 0.0),
        ];
        let entries = rows
            .into_iter()
            .map(|(k, m, [a, s, c], g)| {
                let weights = CoordinationWeights::new(a, s, c).expect("built-in template on simplex");
                ((k, m), RuleEntry { weights, gamma_human: g })
            })
            .collect();
        Self { entries }
    }
}

impl Rulebook {
    pub fn from_entries(entries: BTreeMap<(EventKind, Mode), RuleEntry>) -> Result<Self> {
        for kind in EventKind::ALL {
            for mode in Mode::ALL {
                let Some(e) = entries.get(&(kind, mode)) else {
                    return Err(Error::RulebookGap {
                        kind: kind.to_string(),
                        mode: mode.to_string(),
                    });
                };
                if !(0.0..=1.0).contains(&e.gamma_human) {
                    return Err(Error::InvalidParameter(format!("rulebook gamma_human {} for {kind}/{mode}", e.gamma_human)));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawRulebook = serde_json::from_str(text)?;
        let mut entries = BTreeMap::new();
        for r in raw.entries {
            let weights = CoordinationWeights::new(r.weights.align, r.weights.sep, r.weights.coh)?;
            entries.insert(
                (r.kind, r.mode),
                RuleEntry {
                    weights,
                    gamma_human: r.gamma_human,
                },
            );
        }
        Self::from_entries(entries)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let raw = RawRulebook {
            entries: self
                .entries
                .iter()
                .map(|(&(kind, mode), e)| RawEntry {
                    kind,
                    mode,
                    weights: WireWeights {
                        align: e.weights.align(),
                        sep: e.weights.sep(),
                        coh: e.weights.coh(),
                    },
                    gamma_human: e.gamma_human,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("rulebook serializes")
    }

    pub fn entry(&self, kind: EventKind, mode: Mode) -> RuleEntry {
        self.entries[&(kind, mode)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(EventKind, Mode), &RuleEntry)> {
        self.entries.iter()
    }
}

/// The event that dominates a set: highest severity, earliest listed on ties.
/// Events tagged `none` never dominate.
pub fn dominant_event(events: &[ContextEvent]) -> Option<&ContextEvent> {
    let mut best: Option<&ContextEvent> = None;
    for e in events.iter().filter(|e| e.kind != EventKind::None) {
        if best.is_none_or(|b| e.severity > b.severity) {
            best = Some(e);
        }
    }
    best
}

/// Deterministic translation of the dominant event into a directive
/// (unstamped; see [`GuidanceDirective::stamped`]).
pub fn translate_context(events: &[ContextEvent], mode: Mode, rulebook: &Rulebook) -> GuidanceDirective {
    let (kind, trigger) = match dominant_event(events) {
        Some(e) => (
            e.kind,
            Some(Trigger {
                kind: e.kind,
                severity: e.severity,
            }),
        ),
        None => (EventKind::None, None),
    };
    let entry = rulebook.entry(kind, mode);
    GuidanceDirective::new(entry.weights, entry.gamma_human, format!("template {kind}/{mode}"))
        .expect("rulebook entries are validated")
        .stamped(mode, 0, 0)
        .with_trigger(trigger)
}
