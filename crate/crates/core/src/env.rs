//! Multi-agent episodes over a reservoir network.
//!
//! One agent per reservoir. Each step the guidance controller (if any) is
//! updated, every agent observes its own state, delayed neighbor states and a
//! noisy weather forecast, the releases are applied to the simulator and the
//! per-node rewards come back.

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agents::network::{Observation, EDGE_DIM, STATE_DIM, WEATHER_DIM};
use crate::error::{Error, Result};
use crate::guidance::{
    compute_reward, update_efficiency_estimate, CommandProvider, GuidanceController, GuidanceDirective, Mode, ModeConfig, RewardBreakdown,
    RewardConfig, Rulebook,
};
use crate::murmuration::{adaptive_radius, coordination_weights, CoordinationContext, CoordinationParams, CoordinationWeights};
use crate::network::{ActionSet, NetworkTopology, ReservoirState, SimConfig, Simulator, WeatherVector};
use crate::rng::{Purpose, StreamFactory, StreamRng};
use crate::scenario::{generate_drivers, schedule_events, DriverTable, Scenario, SyntheticParams};
use crate::uncertainty::{channel_efficiency, env_loss, human_loss, UncertaintyParams};

const TEMP_SCALE_C: f64 = 40.0;
const PRECIP_SCALE_MM: f64 = 10.0;
const DISTANCE_SCALE_KM: f64 = 100.0;

/// How directives are produced during an episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GuidanceSetting {
    /// No directives: default weights, no efficiency correction, no shaping.
    #[default]
    Off,
    /// Mode switching with the built-in rulebook.
    Builtin,
    /// Mode switching with an external command; rulebook for emergencies.
    Command { command: String, timeout_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub uncertainty: UncertaintyParams,
    pub coordination: CoordinationParams,
    pub reward: RewardConfig,
    pub modes: ModeConfig,
    pub synthetic: SyntheticParams,
    pub guidance: GuidanceSetting,
    /// Ecological flow share per region member, m³/s.
    pub eco_flow_m3s: f64,
    /// Initial levels are drawn uniformly from this range, m.
    pub initial_level: [f64; 2],
    /// Scale releases down when they would empty a reservoir below h_min.
    pub cap_releases_by_storage: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            uncertainty: UncertaintyParams::default(),
            coordination: CoordinationParams::default(),
            reward: RewardConfig::default(),
            modes: ModeConfig::default(),
            synthetic: SyntheticParams::default(),
            guidance: GuidanceSetting::Off,
            eco_flow_m3s: 3.0,
            initial_level: [4.0, 6.0],
            cap_releases_by_storage: true,
        }
    }
}

/// Static facts about one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub node: usize,
    pub id: String,
    /// (neighbor node, connecting edge)
    pub neighbors: Vec<(usize, usize)>,
    pub n_actions: usize,
    pub a_max: f64,
    /// Other members of the ecological region.
    pub region_others: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum DriverSource {
    Synthetic,
    Table(Arc<DriverTable>),
}

pub struct Environment {
    topology: Arc<NetworkTopology>,
    config: EnvConfig,
    rulebook: Rulebook,
    scenario: Scenario,
    drivers: DriverSource,
    agents: Vec<AgentSpec>,
    flow_scale: f64,
    history: usize,
    horizon_forecast: usize,
}

impl Environment {
    /// `window` and `forecast` fix the observation layout (K and H).
    pub fn new(
        topology: Arc<NetworkTopology>,
        config: EnvConfig,
        rulebook: Rulebook,
        scenario: Scenario,
        drivers: DriverSource,
        window: usize,
        forecast: usize,
    ) -> Result<Self> {
        config.uncertainty.validate()?;
        config.coordination.validate()?;
        scenario.validate()?;
        if topology.is_empty() {
            return Err(Error::Empty("topology".into()));
        }
        if !(config.initial_level[0] <= config.initial_level[1]) {
            return Err(Error::InvalidParameter("initial_level range is reversed".into()));
        }
        if let DriverSource::Table(t) = &drivers {
            if t.steps() == 0 || t.inflow[0].len() != topology.len() {
                return Err(Error::Dimension("driver table does not match the topology".into()));
            }
        }
        let agents = (0..topology.len())
            .map(|i| AgentSpec {
                node: i,
                id: topology.node(i).id.clone(),
                neighbors: topology.neighbors(i),
                n_actions: topology.release_slots(i).len(),
                a_max: topology.node(i).a_max,
                region_others: topology.region_members(i).iter().copied().filter(|&j| j != i).collect(),
            })
            .collect();
        let flow_scale = topology.nodes().iter().map(|n| n.a_max).fold(0.0, f64::max);
        Ok(Self {
            topology,
            config,
            rulebook,
            scenario,
            drivers,
            agents,
            flow_scale,
            history: window,
            horizon_forecast: forecast,
        })
    }

    pub fn topology(&self) -> &Arc<NetworkTopology> {
        &self.topology
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn flow_scale(&self) -> f64 {
        self.flow_scale
    }

    pub fn horizon(&self) -> usize {
        self.scenario.horizon as usize
    }

    /// Start an episode whose randomness all derives from `factory`.
    pub fn episode(&self, factory: &StreamFactory) -> Result<Episode<'_>> {
        let n = self.topology.len();
        let steps = self.horizon() + self.horizon_forecast + 1;
        let drivers = match &self.drivers {
            DriverSource::Synthetic => generate_drivers(&self.topology, &self.config.synthetic, &self.scenario.events, steps, factory),
            DriverSource::Table(t) => (**t).clone(),
        };
        let mut init_rng = factory.stream(Purpose::Synthetic, "initial-levels");
        let [lo, hi] = self.config.initial_level;
        let mut initial: Vec<ReservoirState> = (0..n)
            .map(|_| ReservoirState::at_level(if hi > lo { init_rng.random_range(lo..hi) } else { lo }))
            .collect();
        let (_, w0, d0) = drivers.at(0);
        for i in 0..n {
            initial[i].weather = w0[i];
            initial[i].demand = d0[i];
        }
        let sim = Simulator::new(Arc::clone(&self.topology), initial.clone(), self.config.sim.clone(), factory)?;
        let dt = self.config.sim.dt_s;
        let guidance = match &self.config.guidance {
            GuidanceSetting::Off => None,
            GuidanceSetting::Builtin => Some(GuidanceController::builtin(self.rulebook.clone(), self.config.modes, dt)),
            GuidanceSetting::Command { command, timeout_ms } => {
                let provider = CommandProvider::from_command_line(command, Duration::from_millis(*timeout_ms))?;
                Some(GuidanceController::new(self.rulebook.clone(), Box::new(provider), self.config.modes, dt))
            }
        };
        Ok(Episode {
            env: self,
            sim,
            drivers,
            guidance,
            t: 0,
            observed: None,
            states: vec![initial],
            totals: Vec::new(),
            injection: self.agents.iter().map(|a| vec![0.0; 3 * a.n_actions]).collect(),
            forecast_rng: factory.stream(Purpose::Forecast, "forecast"),
            contexts: Vec::new(),
        })
    }
}

/// Everything reported after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub breakdown: Vec<RewardBreakdown>,
    /// Releases actually applied, after the storage cap.
    pub releases: Vec<Vec<f64>>,
    /// (align, sep, coh) per agent at the applied releases.
    pub losses: Vec<[f64; 3]>,
    pub states: Vec<ReservoirState>,
    /// h > h_safe per node after the step.
    pub flood: Vec<bool>,
    pub mode: Option<Mode>,
    pub weights: CoordinationWeights,
    pub done: bool,
}

pub struct Episode<'a> {
    env: &'a Environment,
    sim: Simulator,
    drivers: DriverTable,
    guidance: Option<GuidanceController>,
    t: usize,
    observed: Option<usize>,
    /// State at the start of every step so far.
    states: Vec<Vec<ReservoirState>>,
    /// Applied total release per node at every completed step.
    totals: Vec<Vec<f64>>,
    injection: Vec<Vec<f64>>,
    forecast_rng: StreamRng,
    contexts: Vec<CoordinationContext>,
}

fn features(s: &ReservoirState, h_max: f64, flow_scale: f64) -> [f64; STATE_DIM] {
    [
        s.h / h_max,
        s.q_in / flow_scale,
        s.q_out / flow_scale,
        s.weather.temp_c / TEMP_SCALE_C,
        s.weather.precip_mm / PRECIP_SCALE_MM,
        s.weather.humidity,
        s.demand / flow_scale,
    ]
}

impl<'a> Episode<'a> {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.env.horizon()
    }

    pub fn states(&self) -> &[ReservoirState] {
        self.sim.states()
    }

    pub fn directive(&self) -> Option<&GuidanceDirective> {
        self.guidance.as_ref().and_then(|g| g.current())
    }

    pub fn guidance(&self) -> Option<&GuidanceController> {
        self.guidance.as_ref()
    }

    pub fn weights(&self) -> CoordinationWeights {
        self.guidance.as_ref().map_or_else(CoordinationWeights::default, |g| g.weights())
    }

    /// Coordination contexts of the last observation, one per agent.
    pub fn contexts(&self) -> &[CoordinationContext] {
        &self.contexts
    }

    fn delayed(&self, t: usize, tau: usize) -> Option<usize> {
        t.checked_sub(tau)
    }

    /// Update guidance for the current step and build every agent's view.
    pub fn observe(&mut self) -> Result<Vec<Observation>> {
        let t = self.t;
        let env = self.env;
        let topo = &env.topology;
        let fs = env.flow_scale;
        if self.observed != Some(t) {
            if let Some(g) = &mut self.guidance {
                let pending = schedule_events(&env.scenario, t as u64);
                let levels: Vec<f64> = self.sim.states().iter().map(|s| s.h).collect();
                g.update(t as u64, &pending, &levels);
            }
            self.observed = Some(t);
        }
        let directive = self.guidance.as_ref().and_then(|g| g.current()).cloned();
        let kappa = directive.as_ref().map_or_else(CoordinationWeights::default, |d| d.weights);
        let cur = &self.states[t];
        let k_window = env.history;
        let h_fc = env.horizon_forecast;
        let mut out = Vec::with_capacity(env.agents.len());
        let mut contexts = Vec::with_capacity(env.agents.len());
        for spec in &env.agents {
            let i = spec.node;
            let node = topo.node(i);
            let own = features(&cur[i], node.h_max, fs).to_vec();

            let mut neighbors = Vec::with_capacity(spec.neighbors.len() * (STATE_DIM + EDGE_DIM));
            let mut nb_totals = Vec::with_capacity(spec.neighbors.len());
            let mut nb_weather = Vec::with_capacity(spec.neighbors.len());
            let mut nb_levels = Vec::with_capacity(spec.neighbors.len());
            for &(j, e) in &spec.neighbors {
                let ch = &topo.edges()[e];
                let tau = ch.delay_steps.max(1);
                let past = self.delayed(t, tau);
                let sj = &self.states[past.unwrap_or(0)][j];
                neighbors.extend(features(sj, topo.node(j).h_max, fs));
                let g_env = env_loss(&cur[i].weather, &sj.weather, &env.config.uncertainty.env_loss);
                let alpha_hat = update_efficiency_estimate(ch.alpha_nominal, g_env, directive.as_ref(), env.config.uncertainty.epsilon_floor);
                neighbors.extend([alpha_hat, ch.distance_km / DISTANCE_SCALE_KM]);
                nb_totals.push(past.map_or(0.0, |p| self.totals[p][j]) / fs);
                nb_weather.push((ch.distance_km, sj.weather));
                nb_levels.push(sj.h);
            }

            let mut history = vec![0.0; k_window * STATE_DIM];
            for k in 0..k_window {
                // row k holds step t − (K − 1 − k)
                if let Some(step) = t.checked_sub(k_window - 1 - k) {
                    let f = features(&self.states[step][i], node.h_max, fs);
                    history[k * STATE_DIM..(k + 1) * STATE_DIM].copy_from_slice(&f);
                }
            }

            let mut forecast = Vec::with_capacity(h_fc * WEATHER_DIM);
            for k in 1..=h_fc {
                let (_, w, _) = self.drivers.at(t + k);
                let w = w[i];
                for x in [w.temp_c / TEMP_SCALE_C, w.precip_mm / PRECIP_SCALE_MM, w.humidity] {
                    let z: f64 = StandardNormal.sample(&mut self.forecast_rng);
                    forecast.push(x + env.scenario.forecast_noise * z);
                }
            }

            let weights = if nb_weather.is_empty() {
                Vec::new()
            } else {
                coordination_weights(&cur[i].weather, &nb_weather, &env.config.coordination)?
            };
            let rho = if nb_levels.is_empty() {
                env.config.coordination.rho_base
            } else {
                adaptive_radius(&nb_levels, &env.config.coordination)?
            };
            let region_size = spec.region_others.len() + 1;
            let other_region_outflows = spec
                .region_others
                .iter()
                .map(|&j| t.checked_sub(1).map_or(0.0, |p| self.totals[p][j]) / fs)
                .collect();
            contexts.push(CoordinationContext {
                neighbor_totals: nb_totals,
                weights,
                rho,
                other_region_outflows,
                f_eco: env.config.eco_flow_m3s * region_size as f64 / fs,
                region_size,
                lambda_eco: env.config.coordination.lambda_eco,
                target: env.config.coordination.cohesion_target,
                kappa,
            });
            out.push(Observation {
                own,
                neighbors,
                history,
                forecast,
                injection: self.injection[i].clone(),
            });
        }
        self.contexts = contexts;
        Ok(out)
    }

    /// Apply one release vector per agent (m³/s per slot).
    pub fn step(&mut self, releases: Vec<Vec<f64>>) -> Result<StepOutcome> {
        let t = self.t;
        if self.is_done() {
            return Err(Error::InvalidParameter("episode already finished".into()));
        }
        if self.observed != Some(t) {
            self.observe()?;
        }
        let env = self.env;
        let topo = Arc::clone(&env.topology);
        let cfg = &env.config;
        let dt = cfg.sim.dt_s;
        let mut actions = ActionSet { releases };
        actions.validate(&topo)?;
        let (inflow, weather, demand) = {
            let (q, w, d) = self.drivers.at(t);
            (q.to_vec(), w.to_vec(), d.to_vec())
        };
        if cfg.cap_releases_by_storage {
            for (i, r) in actions.releases.iter_mut().enumerate() {
                let node = topo.node(i);
                let total: f64 = r.iter().sum();
                let available = ((self.sim.states()[i].h - node.h_min).max(0.0) * node.surface_area_m2 / dt + inflow[i]).max(0.0);
                if total > available && total > 0.0 {
                    let k = available / total;
                    r.iter_mut().for_each(|a| *a *= k);
                }
            }
        }
        let alphas: Vec<f64> = (0..topo.edges().len())
            .map(|e| {
                let (i, j) = topo.edge_endpoints(e);
                let g_env = env_loss(&weather[i], &weather[j], &cfg.uncertainty.env_loss);
                let g_h = human_loss(demand[i], demand[j], &cfg.uncertainty.human_loss, None);
                channel_efficiency(topo.edges()[e].alpha_nominal, g_env, g_h, cfg.uncertainty.epsilon_floor)
            })
            .collect();

        let fs = env.flow_scale;
        let mut losses = Vec::with_capacity(env.agents.len());
        for (spec, ctx) in env.agents.iter().zip(&self.contexts) {
            let own: Vec<f64> = actions.releases[spec.node].iter().map(|a| a / fs).collect();
            let l = ctx.evaluate(&own);
            losses.push([l.align, l.sep, l.coh]);
            let inj = &mut self.injection[spec.node];
            let m = spec.n_actions;
            inj[..m].copy_from_slice(&l.grad_align);
            inj[m..2 * m].copy_from_slice(&l.grad_sep);
            inj[2 * m..].copy_from_slice(&l.grad_coh);
        }

        self.sim.step(&actions, &alphas, &inflow)?;
        let directive = self.directive().cloned();
        let states = self.sim.states().to_vec();
        let mut rewards = Vec::with_capacity(states.len());
        let mut breakdown = Vec::with_capacity(states.len());
        let mut flood = Vec::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            let node = topo.node(i);
            let q_out: f64 = actions.releases[i].iter().sum();
            let b = compute_reward(node, s, q_out, demand[i], cfg.eco_flow_m3s, directive.as_ref(), &cfg.reward);
            rewards.push(b.total);
            breakdown.push(b);
            flood.push(s.h > node.h_safe);
        }
        self.totals.push(actions.releases.iter().map(|r| r.iter().sum()).collect());
        self.t += 1;
        let (_, w, d) = self.drivers.at(self.t);
        let (w, d) = (w.to_vec(), d.to_vec());
        self.sim.set_drivers(&w, &d);
        self.states.push(self.sim.states().to_vec());
        Ok(StepOutcome {
            rewards,
            breakdown,
            releases: actions.releases,
            losses,
            states,
            flood,
            mode: directive.as_ref().map(|d| d.mode),
            weights: directive.as_ref().map_or_else(CoordinationWeights::default, |d| d.weights),
            done: self.is_done(),
        })
    }

    /// Current weather per node (for tools that inspect the drivers).
    pub fn weather(&self) -> Vec<WeatherVector> {
        self.sim.states().iter().map(|s| s.weather).collect()
    }
}
