//! Temporal mode selection.

use serde::{Deserialize, Serialize};

use super::directive::{ContextEvent, EventKind, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeConfig {
    /// Pending events at or above this severity force operational mode.
    pub emergency_threshold: f64,
    pub tactical_period_s: f64,
    pub strategic_period_s: f64,
    pub ttl_strategic_s: f64,
    pub ttl_tactical_s: f64,
    pub ttl_operational_s: f64,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            emergency_threshold: 0.7,
            tactical_period_s: 4.0 * 3600.0,
            strategic_period_s: 24.0 * 3600.0,
            ttl_strategic_s: 24.0 * 3600.0,
            ttl_tactical_s: 4.0 * 3600.0,
            ttl_operational_s: 600.0,
        }
    }
}

impl ModeConfig {
    /// Directive lifetime in whole steps, at least one.
    pub fn ttl_steps(&self, mode: Mode, dt_s: f64) -> u64 {
        let ttl = match mode {
            Mode::Strategic => self.ttl_strategic_s,
            Mode::Tactical => self.ttl_tactical_s,
            Mode::Operational => self.ttl_operational_s,
        };
        ((ttl / dt_s).ceil() as u64).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeDecision {
    Issue(Mode),
    /// Keep the current directive until it expires.
    Hold,
}

/// True when the step starting at `t·dt_s` contains a multiple of `period_s`.
fn at_boundary(t: u64, dt_s: f64, period_s: f64) -> bool {
    let start = t as f64 * dt_s;
    let phase = start.rem_euclid(period_s);
    phase == 0.0 || phase + dt_s > period_s
}

pub fn select_mode(t: u64, dt_s: f64, pending: &[ContextEvent], config: &ModeConfig) -> ModeDecision {
    let active = pending.iter().filter(|e| e.kind != EventKind::None);
    if pending
        .iter()
        .any(|e| e.kind != EventKind::None && e.severity >= config.emergency_threshold)
    {
        return ModeDecision::Issue(Mode::Operational);
    }
    if active.count() > 0 && at_boundary(t, dt_s, config.tactical_period_s) {
        return ModeDecision::Issue(Mode::Tactical);
    }
    if at_boundary(t, dt_s, config.strategic_period_s) {
        return ModeDecision::Issue(Mode::Strategic);
    }
    ModeDecision::Hold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, severity: f64) -> ContextEvent {
        ContextEvent {
            t: 0,
            kind,
            severity,
            duration: 1000,
            region: None,
            text: String::new(),
        }
    }

    #[test]
    fn decisions() {
        let c = ModeConfig::default();
        assert_eq!(select_mode(7, 3600.0, &[ev(EventKind::Flood, 0.9)], &c), ModeDecision::Issue(Mode::Operational));
        assert_eq!(select_mode(48, 3600.0, &[], &c), ModeDecision::Issue(Mode::Strategic));
        assert_eq!(select_mode(13, 3600.0, &[], &c), ModeDecision::Hold);
        assert_eq!(select_mode(12, 3600.0, &[ev(EventKind::Drought, 0.3)], &c), ModeDecision::Issue(Mode::Tactical));
        assert_eq!(select_mode(12, 3600.0, &[ev(EventKind::None, 0.9)], &c), ModeDecision::Hold);
    }

    #[test]
    fn sub_hour_steps() {
        let c = ModeConfig::default();
        assert_eq!(select_mode(24, 600.0, &[ev(EventKind::Drought, 0.3)], &c), ModeDecision::Issue(Mode::Tactical));
        assert_eq!(select_mode(25, 600.0, &[ev(EventKind::Drought, 0.3)], &c), ModeDecision::Hold);
        assert_eq!(c.ttl_steps(Mode::Operational, 600.0), 1);
        assert_eq!(c.ttl_steps(Mode::Operational, 3600.0), 1);
        assert_eq!(c.ttl_steps(Mode::Tactical, 3600.0), 4);
        assert_eq!(c.ttl_steps(Mode::Strategic, 600.0), 144);
    }
}
