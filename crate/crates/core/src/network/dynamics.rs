use std::collections::VecDeque;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::topology::{NetworkTopology, ReleaseTarget};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamFactory, StreamRng};
use crate::uncertainty;

/// ω_i: temperature °C, precipitation mm/h, relative humidity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeatherVector {
    pub temp_c: f64,
    pub precip_mm: f64,
    pub humidity: f64,
}

impl WeatherVector {
    pub const DIM: usize = 3;

    pub fn new(temp_c: f64, precip_mm: f64, humidity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&humidity) {
            return Err(Error::InvalidParameter(format!("humidity {humidity} outside [0, 1]")));
        }
        if !(precip_mm >= 0.0) {
            return Err(Error::InvalidParameter(format!("precipitation {precip_mm} negative")));
        }
        Ok(Self {
            temp_c,
            precip_mm,
            humidity,
        })
    }

    pub fn distance(&self, other: &WeatherVector) -> f64 {
        let dt = self.temp_c - other.temp_c;
        let dp = self.precip_mm - other.precip_mm;
        let dh = self.humidity - other.humidity;
        (dt * dt + dp * dp + dh * dh).sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.temp_c, self.precip_mm, self.humidity]
    }
}

/// s_i(t) = [h, q_in, q_out, ω, d]. Flows in m³/s, level in m.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReservoirState {
    pub h: f64,
    pub q_in: f64,
    pub q_out: f64,
    pub weather: WeatherVector,
    pub demand: f64,
}

impl ReservoirState {
    pub const DIM: usize = 4 + WeatherVector::DIM;

    pub fn at_level(h: f64) -> Self {
        Self {
            h,
            ..Default::default()
        }
    }
}

/// Per-node releases a_{i→k} in m³/s, one entry per release slot of the node
/// (see [`NetworkTopology::release_slots`]).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionSet {
    pub releases: Vec<Vec<f64>>,
}

impl ActionSet {
    pub fn zeros(topology: &NetworkTopology) -> Self {
        Self {
            releases: (0..topology.len())
                .map(|i| vec![0.0; topology.release_slots(i).len()])
                .collect(),
        }
    }

    /// q_out,i = Σ_k a_{i→k}
    pub fn total(&self, i: usize) -> f64 {
        self.releases[i].iter().sum()
    }

    pub fn validate(&self, topology: &NetworkTopology) -> Result<()> {
        if self.releases.len() != topology.len() {
            return Err(Error::ActionShape(format!(
                "{} nodes in action set, {} in topology",
                self.releases.len(),
                topology.len()
            )));
        }
        for (i, rel) in self.releases.iter().enumerate() {
            let node = topology.node(i);
            if rel.len() != topology.release_slots(i).len() {
                return Err(Error::ActionShape(format!(
                    "node {:?} has {} release slots, got {}",
                    node.id,
                    topology.release_slots(i).len(),
                    rel.len()
                )));
            }
            for &a in rel {
                if !(0.0..=node.a_max).contains(&a) {
                    return Err(Error::ActionOutOfRange {
                        node: node.id.clone(),
                        value: a,
                        a_max: node.a_max,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Result of one Euler step.
#[derive(Debug, Clone)]
pub struct DynamicsStep {
    pub states: Vec<ReservoirState>,
    /// η_i drawn this step, m³/s.
    pub level_noise: Vec<f64>,
    /// Volume sent through outlets this step, m³.
    pub exported_m3: f64,
}

/// Explicit Euler step of the level dynamics:
///
/// h_i' = h_i + Δt/A_i · (Σ_up f_ji − Σ_down f_ik + q_ext,i + η_i)
///
/// `departures[e]` is the flow debited from the source of edge `e` this step
/// and `arrivals[e]` the flow credited to its target (already delayed).
/// Outlet releases leave the network unchanged in magnitude. Weather and
/// demand are carried over; the caller refreshes them.
#[allow(clippy::too_many_arguments)]
pub fn step_dynamics(
    topology: &NetworkTopology,
    states: &[ReservoirState],
    actions: &ActionSet,
    departures: &[f64],
    arrivals: &[f64],
    q_ext: &[f64],
    sigma_eta: f64,
    dt_s: f64,
    level_rngs: &mut [StreamRng],
) -> Result<DynamicsStep> {
    if !(dt_s > 0.0) {
        return Err(Error::InvalidTimeStep(dt_s));
    }
    let n = topology.len();
    let m = topology.edges().len();
    if states.len() != n || q_ext.len() != n || level_rngs.len() != n {
        return Err(Error::Dimension("per-node inputs must match node count".into()));
    }
    if departures.len() != m || arrivals.len() != m {
        return Err(Error::Dimension("per-edge flows must match edge count".into()));
    }
    actions.validate(topology)?;

    let mut next = states.to_vec();
    let mut level_noise = vec![0.0; n];
    let mut exported_m3 = 0.0;
    for i in 0..n {
        let inflow: f64 = topology.upstream_edges(i).iter().map(|&e| arrivals[e]).sum();
        let mut outflow: f64 = topology.downstream_edges(i).iter().map(|&e| departures[e]).sum();
        for (slot, target) in topology.release_slots(i).iter().enumerate() {
            if *target == ReleaseTarget::Outlet {
                let a = actions.releases[i][slot];
                outflow += a;
                exported_m3 += a * dt_s;
            }
        }
        let eta = if sigma_eta > 0.0 {
            let z: f64 = StandardNormal.sample(&mut level_rngs[i]);
            sigma_eta * z
        } else {
            0.0
        };
        level_noise[i] = eta;
        let area = topology.node(i).surface_area_m2;
        let s = &mut next[i];
        s.h = states[i].h + dt_s / area * (inflow - outflow + q_ext[i] + eta);
        s.q_in = inflow;
        s.q_out = actions.total(i);
    }
    Ok(DynamicsStep {
        states: next,
        level_noise,
        exported_m3,
    })
}

/// Which flow is debited from the releasing reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDebit {
    /// The realized transfer f_ik, exactly as the level equation is written.
    #[default]
    RealizedTransfer,
    /// The commanded release a_{i→k}; channel losses leave the system.
    CommandedRelease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Euler step, seconds.
    pub dt_s: f64,
    /// Transfer noise scale as a fraction of the release scale.
    pub sigma_base: f64,
    /// Level noise, m³/s.
    pub sigma_eta: f64,
    /// Reference flow for transfer noise; `None` uses each release's own magnitude.
    pub release_scale: Option<f64>,
    pub debit: SourceDebit,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_s: 3600.0,
            sigma_base: 0.05,
            sigma_eta: 0.0,
            release_scale: None,
            debit: SourceDebit::RealizedTransfer,
        }
    }
}

/// Per-step record of what the simulator did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub departures: Vec<f64>,
    pub arrivals: Vec<f64>,
    pub level_noise: Vec<f64>,
    pub clamp_events: usize,
}

/// Stateful network instance: levels, in-flight channel volumes, and the
/// per-node and per-channel noise streams.
#[derive(Debug, Clone)]
pub struct Simulator {
    topology: Arc<NetworkTopology>,
    config: SimConfig,
    states: Vec<ReservoirState>,
    pipes: Vec<VecDeque<f64>>,
    level_rngs: Vec<StreamRng>,
    transfer_rngs: Vec<StreamRng>,
    exported_m3: f64,
    clamp_events: usize,
    step: u64,
}

impl Simulator {
    pub fn new(
        topology: Arc<NetworkTopology>,
        initial: Vec<ReservoirState>,
        config: SimConfig,
        streams: &StreamFactory,
    ) -> Result<Self> {
        if initial.len() != topology.len() {
            return Err(Error::Dimension("initial states must match node count".into()));
        }
        if !(config.dt_s > 0.0) {
            return Err(Error::InvalidTimeStep(config.dt_s));
        }
        if !(config.sigma_base >= 0.0 && config.sigma_eta >= 0.0) {
            return Err(Error::InvalidParameter("noise scales must be nonnegative".into()));
        }
        let level_rngs = topology
            .nodes()
            .iter()
            .map(|n| streams.stream(Purpose::LevelNoise, &n.id))
            .collect();
        let transfer_rngs = topology
            .edges()
            .iter()
            .map(|c| streams.stream(Purpose::TransferNoise, &c.id()))
            .collect();
        let pipes = topology
            .edges()
            .iter()
            .map(|c| VecDeque::from(vec![0.0; c.delay_steps]))
            .collect();
        Ok(Self {
            topology,
            config,
            states: initial,
            pipes,
            level_rngs,
            transfer_rngs,
            exported_m3: 0.0,
            clamp_events: 0,
            step: 0,
        })
    }

    pub fn topology(&self) -> &Arc<NetworkTopology> {
        &self.topology
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn states(&self) -> &[ReservoirState] {
        &self.states
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// Overwrite the exogenous parts of the state (weather, demand).
    pub fn set_drivers(&mut self, weather: &[WeatherVector], demand: &[f64]) {
        for ((s, w), d) in self.states.iter_mut().zip(weather).zip(demand) {
            s.weather = *w;
            s.demand = *d;
        }
    }

    pub fn exported_m3(&self) -> f64 {
        self.exported_m3
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn in_flight_m3(&self) -> f64 {
        self.pipes.iter().flatten().sum::<f64>() * self.config.dt_s
    }

    /// Σ A_i h_i + in-flight + exported, m³.
    pub fn total_volume_m3(&self) -> f64 {
        let stored: f64 = self
            .topology
            .nodes()
            .iter()
            .zip(&self.states)
            .map(|(n, s)| n.surface_area_m2 * s.h)
            .sum();
        stored + self.in_flight_m3() + self.exported_m3
    }

    /// Realize transfers with the given per-edge efficiencies, advance the
    /// channel delay lines and integrate one step.
    pub fn step(&mut self, actions: &ActionSet, alphas: &[f64], q_ext: &[f64]) -> Result<StepReport> {
        let topo = Arc::clone(&self.topology);
        actions.validate(&topo)?;
        let m = topo.edges().len();
        if alphas.len() != m {
            return Err(Error::Dimension("one efficiency per edge required".into()));
        }
        let mut departures = vec![0.0; m];
        let mut arrivals = vec![0.0; m];
        let mut clamps = 0;
        for i in 0..topo.len() {
            for (slot, target) in topo.release_slots(i).iter().enumerate() {
                let ReleaseTarget::Edge(e) = *target else {
                    continue;
                };
                let a = actions.releases[i][slot];
                let draw = uncertainty::sample_transfer(
                    a,
                    alphas[e],
                    self.config.sigma_base,
                    self.config.release_scale,
                    &mut self.transfer_rngs[e],
                );
                clamps += usize::from(draw.clamped);
                departures[e] = match self.config.debit {
                    SourceDebit::RealizedTransfer => draw.flow,
                    SourceDebit::CommandedRelease => a,
                };
                let pipe = &mut self.pipes[e];
                pipe.push_back(draw.flow);
                arrivals[e] = pipe.pop_front().unwrap_or(0.0);
            }
        }
        let out = step_dynamics(
            &topo,
            &self.states,
            actions,
            &departures,
            &arrivals,
            q_ext,
            self.config.sigma_eta,
            self.config.dt_s,
            &mut self.level_rngs,
        )?;
        self.states = out.states;
        self.exported_m3 += out.exported_m3;
        self.clamp_events += clamps;
        self.step += 1;
        Ok(StepReport {
            departures,
            arrivals,
            level_noise: out.level_noise,
            clamp_events: clamps,
        })
    }
}

/// Constraint breaches in one snapshot. Levels are reported, never clamped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// h > h_safe
    pub flood_risk: Vec<usize>,
    /// h > h_max
    pub above_max: Vec<usize>,
    /// h < h_min
    pub below_min: Vec<usize>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.flood_risk.is_empty() && self.above_max.is_empty() && self.below_min.is_empty()
    }
}

pub fn check_constraints(topology: &NetworkTopology, states: &[ReservoirState]) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (i, (node, s)) in topology.nodes().iter().zip(states).enumerate() {
        if s.h > node.h_safe {
            report.flood_risk.push(i);
        }
        if s.h > node.h_max {
            report.above_max.push(i);
        }
        if s.h < node.h_min {
            report.below_min.push(i);
        }
    }
    report
}
