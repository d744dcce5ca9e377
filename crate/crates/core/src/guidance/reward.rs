//! Per-node reward and the directive-aware efficiency estimate.

use serde::{Deserialize, Serialize};

use super::directive::{GuidanceDirective, Mode};
use crate::network::{ReservoirNode, ReservoirState};
use crate::uncertainty::channel_efficiency;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Multiplies each node's `flood_weight` to give λ_flood.
    pub flood_penalty: f64,
    /// Multiplies each node's `op_cost` to give c_op.
    pub op_cost_scale: f64,
    pub gain_strategic: f64,
    pub gain_tactical: f64,
    pub gain_operational: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            flood_penalty: 2.0,
            op_cost_scale: 1.0,
            gain_strategic: 0.5,
            gain_tactical: 1.0,
            gain_operational: 2.0,
        }
    }
}

impl RewardConfig {
    pub fn gain(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Strategic => self.gain_strategic,
            Mode::Tactical => self.gain_tactical,
            Mode::Operational => self.gain_operational,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub safety: f64,
    pub supply: f64,
    pub eco: f64,
    pub shaped: f64,
    pub total: f64,
}

fn capped_ratio(flow: f64, requirement: f64) -> f64 {
    if requirement <= 0.0 {
        1.0
    } else {
        (flow / requirement).clamp(0.0, 1.0)
    }
}

/// How well the level sits for the event the directive answers, in [0, 1]:
/// fuller is better under drought tags, emptier is better under flood tags.
pub fn event_alignment_score(node: &ReservoirNode, h: f64, directive: &GuidanceDirective) -> f64 {
    let Some(trigger) = directive.trigger else { return 0.0 };
    let span = (node.h_safe - node.h_min).max(f64::EPSILON);
    if trigger.kind.is_drought_type() {
        ((h - node.h_min) / span).clamp(0.0, 1.0)
    } else if trigger.kind.is_flood_type() {
        ((node.h_safe - h) / span).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// R = r_safety + r_supply + r_eco + R_shaped for one node after a step.
pub fn compute_reward(
    node: &ReservoirNode,
    state: &ReservoirState,
    q_out: f64,
    demand: f64,
    eco_share: f64,
    directive: Option<&GuidanceDirective>,
    config: &RewardConfig,
) -> RewardBreakdown {
    let lambda_flood = config.flood_penalty * node.flood_weight;
    let safety = if state.h > node.h_safe { -lambda_flood } else { 0.0 };
    let supply = capped_ratio(q_out, demand);
    let eco = capped_ratio(q_out, eco_share);
    let op = config.op_cost_scale * node.op_cost * q_out;
    let bonus = directive.map_or(0.0, |d| {
        let severity = d.trigger.map_or(0.0, |t| t.severity);
        config.gain(d.mode) * severity * event_alignment_score(node, state.h, d)
    });
    let shaped = bonus - op;
    RewardBreakdown {
        safety,
        supply,
        eco,
        shaped,
        total: safety + supply + eco + shaped,
    }
}

/// α̂ = min(1, max(ε, α_nominal·(1 − γ_env − γ̂_human))) with γ̂_human taken
/// from the live directive, zero without one.
pub fn update_efficiency_estimate(alpha_nominal: f64, gamma_env: f64, directive: Option<&GuidanceDirective>, epsilon_floor: f64) -> f64 {
    let gamma_human = directive.map_or(0.0, |d| d.gamma_human_hat);
    channel_efficiency(alpha_nominal, gamma_env, gamma_human, epsilon_floor)
}
