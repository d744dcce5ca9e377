//! Guidance directives, the context events that trigger them, and the wire
//! format external providers speak.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::murmuration::CoordinationWeights;

/// Largest |Σκ − 1| that parse_directive repairs by renormalizing.
pub const RENORMALIZE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Drought,
    Flood,
    StormApproaching,
    Contamination,
    WinterStorm,
    Heatwave,
    Maintenance,
    Regulatory,
    None,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Drought,
        EventKind::Flood,
        EventKind::StormApproaching,
        EventKind::Contamination,
        EventKind::WinterStorm,
        EventKind::Heatwave,
        EventKind::Maintenance,
        EventKind::Regulatory,
        EventKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Drought => "drought",
            EventKind::Flood => "flood",
            EventKind::StormApproaching => "storm_approaching",
            EventKind::Contamination => "contamination",
            EventKind::WinterStorm => "winter_storm",
            EventKind::Heatwave => "heatwave",
            EventKind::Maintenance => "maintenance",
            EventKind::Regulatory => "regulatory",
            EventKind::None => "none",
        }
    }

    /// Tags under which shaping rewards holding water back.
    pub fn is_drought_type(self) -> bool {
        matches!(self, EventKind::Drought | EventKind::Heatwave)
    }

    /// Tags under which shaping rewards drawing levels down ahead of inflow.
    pub fn is_flood_type(self) -> bool {
        matches!(self, EventKind::Flood | EventKind::StormApproaching | EventKind::WinterStorm)
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Strategic,
    Tactical,
    Operational,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Strategic, Mode::Tactical, Mode::Operational];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Strategic => "strategic",
            Mode::Tactical => "tactical",
            Mode::Operational => "operational",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tagged contextual event. `t` and `duration` are in simulation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub t: u64,
    pub kind: EventKind,
    pub severity: f64,
    pub duration: u64,
    #[serde(default)]
    pub region: Option<String>,
    #[serde(default)]
    pub text: String,
}

impl ContextEvent {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::InvalidParameter(format!(
                "event {} at t={} has severity {} outside [0, 1]",
                self.kind, self.t, self.severity
            )));
        }
        Ok(())
    }

    pub fn is_pending(&self, t: u64) -> bool {
        t >= self.t && t < self.t.saturating_add(self.duration)
    }
}

/// The event a directive answers, kept for reward shaping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub kind: EventKind,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDirective {
    pub weights: CoordinationWeights,
    pub gamma_human_hat: f64,
    pub rationale: String,
    pub mode: Mode,
    pub issued_at: u64,
    pub ttl_steps: u64,
    #[serde(default)]
    pub trigger: Option<Trigger>,
}

impl GuidanceDirective {
    pub fn new(weights: CoordinationWeights, gamma_human_hat: f64, rationale: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma_human_hat) {
            return Err(Error::InvalidParameter(format!("gamma_human {gamma_human_hat} outside [0, 1]")));
        }
        Ok(Self {
            weights,
            gamma_human_hat,
            rationale: rationale.into(),
            mode: Mode::Strategic,
            issued_at: 0,
            ttl_steps: 0,
            trigger: None,
        })
    }

    pub fn stamped(mut self, mode: Mode, issued_at: u64, ttl_steps: u64) -> Self {
        self.mode = mode;
        self.issued_at = issued_at;
        self.ttl_steps = ttl_steps;
        self
    }

    pub fn with_trigger(mut self, trigger: Option<Trigger>) -> Self {
        self.trigger = trigger;
        self
    }

    pub fn is_live(&self, t: u64) -> bool {
        t >= self.issued_at && t < self.issued_at.saturating_add(self.ttl_steps)
    }

    pub fn to_wire(&self) -> WireDirective {
        WireDirective {
            weights: WireWeights {
                align: self.weights.align(),
                sep: self.weights.sep(),
                coh: self.weights.coh(),
            },
            gamma_human: self.gamma_human_hat,
            rationale: self.rationale.clone(),
        }
    }

    pub fn to_wire_json(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("directive serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireWeights {
    pub align: f64,
    pub sep: f64,
    pub coh: f64,
}

/// `{"weights": {"align", "sep", "coh"}, "gamma_human", "rationale"}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDirective {
    pub weights: WireWeights,
    pub gamma_human: f64,
    pub rationale: String,
}

/// Parse and validate a provider reply. The result is stamped as a strategic
/// directive at t = 0 with no lifetime; callers restamp it.
pub fn parse_directive(raw: &str) -> Result<GuidanceDirective> {
    let doc: serde_json::Value = serde_json::from_str(&escape_controls_in_strings(raw.trim())).map_err(|e| Error::MalformedDirective(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::MalformedDirective("top level is not an object".into()))?;
    let weights = obj
        .get("weights")
        .ok_or_else(|| Error::MissingField("weights".into()))?
        .as_object()
        .ok_or_else(|| Error::MalformedDirective("weights is not an object".into()))?;
    let number = |map: &serde_json::Map<String, serde_json::Value>, key: &str| -> Result<f64> {
        map.get(key)
            .ok_or_else(|| Error::MissingField(key.into()))?
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::MalformedDirective(format!("{key} is not a finite number")))
    };
    let align = number(weights, "align")?;
    let sep = number(weights, "sep")?;
    let coh = number(weights, "coh")?;
    let gamma = number(obj, "gamma_human")?;
    let rationale = match obj.get("rationale") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::MalformedDirective("rationale is not a string".into())),
        None => return Err(Error::MissingField("rationale".into())),
    };
    let weights = CoordinationWeights::renormalized(align, sep, coh, RENORMALIZE_TOLERANCE)?;
    let clamped = gamma.clamp(0.0, 1.0);
    if clamped != gamma {
        log::warn!("gamma_human {gamma} clamped to {clamped}");
    }
    GuidanceDirective::new(weights, clamped, rationale)
}

/// Providers often wrap long strings across lines; JSON forbids raw control
/// characters inside string literals, so escape them before parsing.
fn escape_controls_in_strings(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut in_string = false;
    let mut escaped = false;
    for c in raw.chars() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            } else if c.is_control() {
                match c {
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    _ => out.push_str(&format!("\\u{:04x}", c as u32)),
                }
                continue;
            }
        } else if c == '"' {
            in_string = true;
        }
        out.push(c);
    }
    out
}
