//! Context-driven guidance: which coordination weights and efficiency
//! corrections apply at each step, and the reward agents are trained on.

mod directive;
mod modes;
mod provider;
mod reward;
mod rulebook;

pub use directive::{parse_directive, ContextEvent, EventKind, GuidanceDirective, Mode, Trigger, WireDirective, WireWeights, RENORMALIZE_TOLERANCE};
pub use modes::{select_mode, ModeConfig, ModeDecision};
pub use provider::{BuiltinProvider, CommandProvider, GuidanceProvider, GuidanceRequest, PROVIDER_ENV};
pub use reward::{compute_reward, event_alignment_score, update_efficiency_estimate, RewardBreakdown, RewardConfig};
pub use rulebook::{dominant_event, emergency_entry, translate_context, RuleEntry, Rulebook};

use crate::murmuration::CoordinationWeights;

/// Where the directive in force came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveSource {
    Rulebook,
    Provider,
    Cached,
    Emergency,
}

/// One directive change, for replay checks and logs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirectiveRecord {
    pub t: u64,
    pub source: DirectiveSource,
    pub directive: GuidanceDirective,
}

/// Single writer of the directive in force. Call [`GuidanceController::update`]
/// once per step; readers take [`GuidanceController::current`].
pub struct GuidanceController {
    rulebook: Rulebook,
    provider: Box<dyn GuidanceProvider>,
    modes: ModeConfig,
    dt_s: f64,
    current: Option<GuidanceDirective>,
    last_valid: Option<GuidanceDirective>,
    history: Vec<DirectiveRecord>,
    fallbacks: usize,
}

impl GuidanceController {
    pub fn new(rulebook: Rulebook, provider: Box<dyn GuidanceProvider>, modes: ModeConfig, dt_s: f64) -> Self {
        Self {
            rulebook,
            provider,
            modes,
            dt_s,
            current: None,
            last_valid: None,
            history: Vec::new(),
            fallbacks: 0,
        }
    }

    pub fn builtin(rulebook: Rulebook, modes: ModeConfig, dt_s: f64) -> Self {
        let provider = Box::new(BuiltinProvider::new(rulebook.clone()));
        Self::new(rulebook, provider, modes, dt_s)
    }

    /// Directive in force, `None` when nothing live has been issued.
    pub fn current(&self) -> Option<&GuidanceDirective> {
        self.current.as_ref()
    }

    /// Weights in force; defaults when no directive is live.
    pub fn weights(&self) -> CoordinationWeights {
        self.current.as_ref().map_or_else(CoordinationWeights::default, |d| d.weights)
    }

    pub fn history(&self) -> &[DirectiveRecord] {
        &self.history
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    pub fn update(&mut self, t: u64, pending: &[ContextEvent], levels: &[f64]) -> Option<&GuidanceDirective> {
        if self.current.as_ref().is_some_and(|d| !d.is_live(t)) {
            self.current = None;
        }
        let ModeDecision::Issue(mode) = select_mode(t, self.dt_s, pending, &self.modes) else {
            return self.current.as_ref();
        };
        let ttl = self.modes.ttl_steps(mode, self.dt_s);
        let trigger = dominant_event(pending).map(|e| Trigger {
            kind: e.kind,
            severity: e.severity,
        });
        let (directive, source) = if mode == Mode::Operational {
            // pre-computed: no provider round trip during an emergency
            (translate_context(pending, mode, &self.rulebook), DirectiveSource::Rulebook)
        } else {
            self.query(t, mode, pending, levels)
        };
        let directive = directive.stamped(mode, t, ttl).with_trigger(trigger);
        if matches!(source, DirectiveSource::Rulebook | DirectiveSource::Provider) {
            self.last_valid = Some(directive.clone());
        }
        let changed = self.current.as_ref() != Some(&directive);
        self.current = Some(directive.clone());
        if changed {
            self.history.push(DirectiveRecord { t, source, directive });
        }
        self.current.as_ref()
    }

    fn query(&mut self, t: u64, mode: Mode, pending: &[ContextEvent], levels: &[f64]) -> (GuidanceDirective, DirectiveSource) {
        let w = self.weights();
        let request = GuidanceRequest {
            t,
            mode,
            events: pending.to_vec(),
            levels: levels.to_vec(),
            current_weights: WireWeights {
                align: w.align(),
                sep: w.sep(),
                coh: w.coh(),
            },
        };
        let reply = self.provider.request(&request).and_then(|raw| parse_directive(&raw));
        match reply {
            Ok(d) => (d, DirectiveSource::Provider),
            Err(e) => {
                self.fallbacks += 1;
                log::warn!("guidance provider {} failed at t={t}: {e}; falling back", self.provider.name());
                match &self.last_valid {
                    Some(cached) => (cached.clone(), DirectiveSource::Cached),
                    None => {
                        let e = emergency_entry();
                        let d = GuidanceDirective::new(e.weights, e.gamma_human, "pre-computed emergency weights")
                            .expect("emergency entry is valid");
                        (d, DirectiveSource::Emergency)
                    }
                }
            }
        }
    }
}
