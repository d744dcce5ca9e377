//! Oracles shared by the integration tests and the acceptance run. Each
//! function measures; callers decide what counts as a pass.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use murmur::agents::{ppo_loss, AgentNet, NetworkSizes, Observation, PenaltyContext, Sample, TrainHyperparams};
use murmur::agents::network::{EDGE_DIM, STATE_DIM, WEATHER_DIM};
use murmur::autodiff::{Grads, ParamStore};
use murmur::murmuration::{
    alignment_loss, cohesion_loss, separation_loss, CohesionTarget, CoordinationContext, CoordinationWeights, LossGrad,
};
use murmur::nn::Activation;
use murmur::rng::StreamFactory;
use murmur::uncertainty::predicted_cascade_variance;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Terminal perturbation of a chain as an explicit sum: the error injected
/// at hop k reaches the end scaled by α_k ⋯ α_n. Independent of the library
/// recursion.
pub fn chain_variance_by_sum(alphas: &[f64], sigma: f64, samples: usize, seed: u64) -> f64 {
    let n = alphas.len();
    let mut tail = vec![1.0; n];
    for k in (0..n).rev() {
        tail[k] = alphas[k] * if k + 1 < n { tail[k + 1] } else { 1.0 };
    }
    let mut r = rng(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let x: f64 = tail.iter().map(|t| sigma * t * normal(&mut r)).sum();
        sum += x;
        sum_sq += x * x;
    }
    let m = samples as f64;
    (sum_sq - sum * sum / m) / (m - 1.0)
}

pub fn closed_form(alphas: &[f64], sigma: f64) -> f64 {
    predicted_cascade_variance(alphas, sigma, 0.0).expect("valid chain")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checks: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.checks += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Align,
    Sep,
    Coh,
}

/// Central differences of one coordination loss against its analytic
/// gradient on random instances.
pub fn coordination_loss_fd(kind: LossKind, instances: usize, seed: u64) -> FdReport {
    let mut r = rng(seed);
    let mut report = FdReport::default();
    let h = 1e-6;
    for _ in 0..instances {
        let m = r.random_range(1..=3);
        let k = r.random_range(1..=5);
        let own: Vec<f64> = (0..m).map(|_| r.random_range(0.0..0.6)).collect();
        let totals: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.2)).collect();
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
        let rho = r.random_range(0.1..0.8);
        let others: Vec<f64> = (0..r.random_range(0..4)).map(|_| r.random_range(0.0..0.5)).collect();
        let f_eco = r.random_range(0.1..2.0);
        let size = others.len() + 1;
        let lambda = r.random_range(0.5..2.0);
        let target = if r.random_bool(0.5) {
            CohesionTarget::PerMemberShare
        } else {
            CohesionTarget::Collective
        };
        let eval = |a: &[f64]| -> LossGrad {
            match kind {
                LossKind::Align => alignment_loss(a, &totals, &weights),
                LossKind::Sep => separation_loss(a, &totals, rho),
                LossKind::Coh => cohesion_loss(a, &others, f_eco, size, lambda, target),
            }
        };
        let g = eval(&own).grad;
        for j in 0..m {
            let mut up = own.clone();
            let mut dn = own.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (eval(&up).value - eval(&dn).value) / (2.0 * h);
            report.record(g[j], fd, 1e-6);
        }
    }
    report
}

/// Smooth everywhere, so finite differences are meaningful.
pub fn fd_sizes() -> NetworkSizes {
    NetworkSizes {
        gnn: vec![5, 4],
        lstm_hidden: 3,
        window: 2,
        horizon: 2,
        policy: vec![6, 5],
        value: vec![5],
        injection_hidden: 4,
        activation: Activation::Tanh,
        xi: 0.3,
        injection: true,
        init_std: 0.5,
    }
}

pub fn random_observation(r: &mut ChaCha20Rng, sizes: &NetworkSizes, n_neighbors: usize, n_actions: usize) -> Observation {
    let mut v = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    Observation {
        own: v(STATE_DIM),
        neighbors: v(n_neighbors * (STATE_DIM + EDGE_DIM)),
        history: v(sizes.window * STATE_DIM),
        forecast: v(sizes.horizon * WEATHER_DIM),
        injection: v(3 * n_actions),
    }
}

fn random_context(r: &mut ChaCha20Rng, n_neighbors: usize) -> CoordinationContext {
    let raw: Vec<f64> = (0..n_neighbors.max(1)).map(|_| r.random_range(0.1..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let a: f64 = r.random_range(0.05..0.9);
    let s = r.random_range(0.05..(1.0 - a).max(0.06));
    let kappa = CoordinationWeights::renormalized(a, s, (1.0 - a - s).max(0.0), 0.2).expect("near simplex");
    CoordinationContext {
        neighbor_totals: (0..raw.len()).map(|_| r.random_range(0.0..1.0)).collect(),
        weights: raw.iter().map(|w| w / z).collect(),
        rho: r.random_range(0.1..0.6),
        other_region_outflows: (0..2).map(|_| r.random_range(0.0..0.5)).collect(),
        f_eco: r.random_range(0.1..1.0),
        region_size: 3,
        lambda_eco: 1.0,
        target: CohesionTarget::PerMemberShare,
        kappa,
    }
}

/// Random network plus a minibatch whose stored log-probabilities put the
/// ratios either well inside or well outside the clip band.
pub fn ppo_instance(seed: u64) -> (AgentNet, ParamStore, Vec<Sample>, TrainHyperparams) {
    let mut r = rng(seed);
    let sizes = fd_sizes();
    let n_neighbors = r.random_range(0..=3);
    let n_actions = r.random_range(1..=2);
    let mut store = ParamStore::new();
    let net = AgentNet::new(&mut store, &StreamFactory::new(seed), "fd", n_neighbors, n_actions, 20.0, &sizes).unwrap();
    for p in store.params_mut() {
        for x in &mut p.data {
            *x += 0.3 * normal(&mut r);
        }
    }
    let hyper = TrainHyperparams {
        beta_mur: 0.05,
        ..Default::default()
    };
    let mut samples = Vec::new();
    for _ in 0..r.random_range(2..=5) {
        let obs = random_observation(&mut r, &sizes, n_neighbors, n_actions);
        let u: Vec<f64> = (0..n_actions).map(|_| r.random_range(-1.5..1.5)).collect();
        samples.push(Sample {
            obs,
            u,
            log_prob: 0.0,
            reward: 0.0,
            value: 0.0,
            advantage: r.random_range(-2.0..2.0),
            ret: r.random_range(-3.0..3.0),
            penalty: Some(PenaltyContext {
                context: random_context(&mut r, n_neighbors),
                flow_scale: 20.0,
                multiplier: [1.0, 2.0, 4.0][r.random_range(0..3)],
            }),
        });
    }
    // current log-probabilities, then offsets away from the clip kinks
    for s in &mut samples {
        let mut t = murmur::autodiff::Tape::new(&store);
        let heads = net.forward(&mut t, &[&s.obs]).unwrap();
        let lp = t.gaussian_log_prob(heads.mean, heads.log_std, s.u.clone()).unwrap();
        let offset = if r.random_bool(0.7) {
            r.random_range(-0.1..0.1)
        } else if r.random_bool(0.5) {
            0.6
        } else {
            -0.6
        };
        s.log_prob = t.scalar(lp) + offset;
    }
    (net, store, samples, hyper)
}

/// Full objective gradient against central differences.
///
/// The critic reads a detached encoding, so the policy objective (clipped
/// surrogate plus the coordination penalty through the injection mixer) is
/// checked over every parameter with the value term off, and the value loss
/// is checked over the critic's own parameters. Each instance gets a random
/// direction plus single coordinates in the mixer, the mean head and the
/// critic. Relative error uses a floor of 1e-3 of the gradient's largest
/// entry so coordinates near zero are not judged on truncation noise.
pub fn ppo_objective_fd(instances: usize, seed: u64) -> FdReport {
    let mut report = FdReport::default();
    let h = 1e-5;
    for k in 0..instances {
        let (net, store, samples, hyper) = ppo_instance(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let refs: Vec<&Sample> = samples.iter().collect();
        let policy_only = TrainHyperparams {
            value_coef: 0.0,
            ..hyper
        };
        let mut r = rng(seed ^ ((k as u64) << 7));
        for (hp, critic) in [(&policy_only, false), (&hyper, true)] {
            let mut grads = Grads::zeros_like(&store);
            ppo_loss(&net, &store, &refs, hp, Some(&mut grads)).unwrap();
            let g = grads.flat();
            let loss_at = |s: &ParamStore| ppo_loss(&net, s, &refs, hp, None).unwrap().0;
            let in_scope: Vec<bool> = store
                .params()
                .iter()
                .flat_map(|p| std::iter::repeat_n(!critic || p.name.contains(".value."), p.data.len()))
                .collect();
            let floor = 1e-3 * g.iter().zip(&in_scope).filter(|(_, s)| **s).map(|(x, _)| x.abs()).fold(1e-9, f64::max);

            let mut dir: Vec<f64> = in_scope.iter().map(|&s| if s { normal(&mut r) } else { 0.0 }).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|x| *x /= norm);
            let shifted = |sign: f64| {
                let mut s = store.clone();
                for (j, d) in dir.iter().enumerate() {
                    *s.scalar_mut(j) += sign * h * d;
                }
                s
            };
            let fd = (loss_at(&shifted(1.0)) - loss_at(&shifted(-1.0))) / (2.0 * h);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            report.record(an, fd, floor);

            let mut offset = 0;
            for p in store.params() {
                let probe = if critic {
                    p.name.contains(".value.")
                } else {
                    p.name.contains(".inject.") || p.name.contains(".pi.mean.")
                };
                if probe {
                    let j = offset + r.random_range(0..p.data.len());
                    let mut up = store.clone();
                    let mut dn = store.clone();
                    *up.scalar_mut(j) += h;
                    *dn.scalar_mut(j) -= h;
                    let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
                    report.record(g[j], fd, floor);
                }
                offset += p.data.len();
            }
        }
    }
    report
}

/// Six-node ring with a chord, every channel lossless, no outlets.
pub fn closed_network(delays: [usize; 7]) -> murmur::network::NetworkTopology {
    use murmur::network::{build_topology, EdgeSpec, NodeSpec, TopologySpec};
    let pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)];
    let spec = TopologySpec {
        nodes: (0..6)
            .map(|i| NodeSpec {
                id: format!("v{i}"),
                ..Default::default()
            })
            .collect(),
        edges: pairs
            .iter()
            .zip(delays)
            .map(|(&(a, b), d)| EdgeSpec {
                from: format!("v{a}"),
                to: format!("v{b}"),
                alpha_nominal: Some(1.0),
                delay_steps: Some(d),
                ..Default::default()
            })
            .collect(),
        ..Default::default()
    };
    build_topology(&spec).expect("valid ring")
}

/// Largest relative drift of stored plus in-transit volume over `steps`
/// random release steps. The in-transit ledger is kept here from the
/// per-step departures and arrivals, not read back from the simulator.
pub fn closed_network_drift(steps: usize, seed: u64) -> f64 {
    use murmur::network::{ActionSet, ReservoirState, SimConfig, Simulator};
    use std::sync::Arc;
    let mut r = rng(seed);
    let delays = [1, 2, 1, 3, 1, 2, 4].map(|d: usize| d + r.random_range(0..2));
    let topo = Arc::new(closed_network(delays));
    let config = SimConfig {
        sigma_base: 0.0,
        sigma_eta: 0.0,
        ..Default::default()
    };
    let init: Vec<ReservoirState> = (0..6).map(|_| ReservoirState::at_level(r.random_range(3.0..7.0))).collect();
    let dt = config.dt_s;
    let mut sim = Simulator::new(Arc::clone(&topo), init, config, &StreamFactory::new(seed)).unwrap();
    let stored = |sim: &Simulator| -> f64 {
        topo.nodes().iter().zip(sim.states()).map(|(n, s)| n.surface_area_m2 * s.h).sum()
    };
    let v0 = stored(&sim);
    let mut in_transit = 0.0;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let releases = (0..topo.len())
            .map(|i| {
                let a_max = topo.node(i).a_max;
                topo.release_slots(i).iter().map(|_| r.random_range(0.0..a_max)).collect()
            })
            .collect();
        let rep = sim.step(&ActionSet { releases }, &vec![1.0; topo.edges().len()], &[0.0; 6]).unwrap();
        in_transit += dt * (rep.departures.iter().sum::<f64>() - rep.arrivals.iter().sum::<f64>());
        worst = worst.max(((stored(&sim) + in_transit - v0) / v0).abs());
    }
    worst
}

/// Weight triples printed with the guidance templates, by (event, mode).
pub fn printed_templates() -> Vec<(murmur::guidance::EventKind, murmur::guidance::Mode, [f64; 3])> {
    use murmur::guidance::{EventKind as K, Mode as M};
    vec![
        (K::Drought, M::Strategic, [0.6, 0.1, 0.3]),
        (K::StormApproaching, M::Tactical, [0.2, 0.6, 0.2]),
        (K::Flood, M::Operational, [0.1, 0.8, 0.1]),
        (K::Drought, M::Operational, [0.8, 0.1, 0.1]),
        (K::Contamination, M::Operational, [0.2, 0.7, 0.1]),
    ]
}

pub const DROUGHT_PAYLOAD: &str = "{\n  \"weights\": {\"align\": 0.7, \"sep\": 0.1, \"coh\": 0.2},\n  \"gamma_human\": 0.15,\n  \"rationale\": \"Dry season ahead: move \n               together and keep storage.\"\n}";

pub const WET_PAYLOAD: &str = "{\n  \"weights\": {\"align\": 0.4, \"sep\": 0.4, \"coh\": 0.2},\n  \"gamma_human\": 0.05,\n  \"rationale\": \"Heavy inflow expected: let \n               some basins draw down early \n               while others hold.\"\n}";

/// Every (event, mode) pair of the default rulebook through translation and
/// the wire format, plus the printed triples and both example payloads.
/// Returns a description of each mismatch.
pub fn template_mismatches() -> Vec<String> {
    use murmur::guidance::{parse_directive, translate_context, ContextEvent, EventKind, Mode, Rulebook};
    let rb = Rulebook::default();
    let mut bad = Vec::new();
    let event = |kind| ContextEvent {
        t: 0,
        kind,
        severity: 0.5,
        duration: 10,
        region: None,
        text: String::new(),
    };
    let mut pairs = 0;
    for kind in EventKind::ALL {
        for mode in Mode::ALL {
            pairs += 1;
            let entry = rb.entry(kind, mode);
            let d = translate_context(&[event(kind)], mode, &rb);
            if d.weights != entry.weights || d.gamma_human_hat != entry.gamma_human {
                bad.push(format!("{kind}/{mode}: translated {:?}", d.weights.as_array()));
            }
            match parse_directive(&d.to_wire_json()) {
                Ok(p) if p.weights == d.weights && p.gamma_human_hat == d.gamma_human_hat => {}
                other => bad.push(format!("{kind}/{mode}: wire round trip gave {other:?}")),
            }
        }
    }
    if pairs != 27 {
        bad.push(format!("{pairs} pairs"));
    }
    for (kind, mode, w) in printed_templates() {
        let got = translate_context(&[event(kind)], mode, &rb).weights.as_array();
        if got != w {
            bad.push(format!("{kind}/{mode}: {got:?}, printed {w:?}"));
        }
    }
    for (name, raw, w, g) in [
        ("drought payload", DROUGHT_PAYLOAD, [0.7, 0.1, 0.2], 0.15),
        ("wet payload", WET_PAYLOAD, [0.4, 0.4, 0.2], 0.05),
    ] {
        match parse_directive(raw) {
            Ok(d) if d.weights.as_array() == w && d.gamma_human_hat == g => {}
            other => bad.push(format!("{name}: {other:?}")),
        }
    }
    bad
}

/// Property run over `cases` draws: efficiencies stay in [ε, 1], sampled
/// releases in [0, a_max], accepted directive weights on the simplex.
pub fn clamp_totality(cases: u32, seed: u64) -> Result<(), String> {
    use murmur::agents::network::squash;
    use murmur::guidance::{parse_directive, RENORMALIZE_TOLERANCE};
    use murmur::murmuration::SIMPLEX_TOLERANCE;
    use murmur::uncertainty::channel_efficiency;
    use proptest::prelude::*;
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

    let sizes = NetworkSizes::default();
    let (n_neighbors, n_actions, a_max) = (2, 2, 20.0);
    let mut store = ParamStore::new();
    let net = AgentNet::new(&mut store, &StreamFactory::new(seed), "clamp", n_neighbors, n_actions, a_max, &sizes).unwrap();
    let obs_len = STATE_DIM + n_neighbors * (STATE_DIM + EDGE_DIM) + sizes.window * STATE_DIM + sizes.horizon * WEATHER_DIM + 3 * n_actions;

    let mut seed_bytes = [0u8; 32];
    seed_bytes[..8].copy_from_slice(&seed.to_le_bytes());
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &seed_bytes),
    );
    let strategy = (
        (1e-6..=1.0f64, -20.0..20.0f64, -20.0..20.0f64, 1e-9..=1.0f64),
        (proptest::collection::vec(-50.0..50.0f64, obs_len), any::<u64>(), -1e12..1e12f64, 1e-3..1e3f64),
        ((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 0.9..1.1f64, -1.0..2.0f64),
    );
    runner
        .run(&strategy, |((alpha, g_env, g_hum, eps), (flat, draw_seed, u, a_cap), ((a, s, c), scale, gamma))| {
            let e = channel_efficiency(alpha, g_env, g_hum, eps);
            prop_assert!(e >= eps && e <= 1.0, "efficiency {e} outside [{eps}, 1]");

            let x = squash(u, a_cap);
            prop_assert!((0.0..=a_cap).contains(&x), "squash({u}) = {x}");
            let mut it = flat.into_iter();
            let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<f64>>();
            let obs = Observation {
                own: take(STATE_DIM),
                neighbors: take(n_neighbors * (STATE_DIM + EDGE_DIM)),
                history: take(sizes.window * STATE_DIM),
                forecast: take(sizes.horizon * WEATHER_DIM),
                injection: take(3 * n_actions),
            };
            let mut r = rng(draw_seed);
            let act = net.act(&store, &obs, &mut r, false).unwrap();
            for &q in act.releases.iter().chain(&act.mean_releases) {
                prop_assert!((0.0..=a_max).contains(&q), "release {q} outside [0, {a_max}]");
            }

            let z = a + s + c;
            let (a, s, c) = if z > 0.0 { (a / z * scale, s / z * scale, c / z * scale) } else { (0.0, 0.0, 0.0) };
            let raw = format!(r#"{{"weights":{{"align":{a:?},"sep":{s:?},"coh":{c:?}}},"gamma_human":{gamma:?},"rationale":""}}"#);
            match parse_directive(&raw) {
                Ok(d) => {
                    let w = d.weights.as_array();
                    prop_assert!(w.iter().all(|k| (0.0..=1.0).contains(k)), "{w:?}");
                    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE, "{w:?}");
                    prop_assert!((0.0..=1.0).contains(&d.gamma_human_hat));
                }
                Err(_) => prop_assert!(((a + s + c) - 1.0).abs() > RENORMALIZE_TOLERANCE * 0.999, "rejected {raw}"),
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
pub struct TimeoutRun {
    pub steps: usize,
    pub horizon: usize,
    /// Weights in force at every step with a flood pending.
    pub flood_weights: Vec<[f64; 3]>,
    pub fallbacks: usize,
    pub sources: Vec<murmur::guidance::DirectiveSource>,
}

/// A full episode whose external provider never answers in time: a
/// moderate flood (queried, so the provider must time out) followed by a
/// severe one (emergency mode).
pub fn provider_timeout_run(command: &str, timeout_ms: u64) -> murmur::Result<TimeoutRun> {
    use murmur::env::{DriverSource, EnvConfig, Environment, GuidanceSetting};
    use murmur::guidance::{ContextEvent, EventKind, Rulebook};
    use murmur::network::{build_topology, TopologySpec};
    use murmur::scenario::Scenario;
    use std::sync::Arc;

    let flood = |t, severity, duration| ContextEvent {
        t,
        kind: EventKind::Flood,
        severity,
        duration,
        region: None,
        text: "flood warning".into(),
    };
    let scenario = Scenario {
        events: vec![flood(0, 0.5, 6), flood(8, 0.9, 4)],
        ..Scenario::quiet(14, 3)
    };
    let config = EnvConfig {
        guidance: GuidanceSetting::Command {
            command: command.into(),
            timeout_ms,
        },
        ..EnvConfig::default()
    };
    let sizes = NetworkSizes::default();
    let topo = Arc::new(build_topology(&TopologySpec::grid(2, 2))?);
    let env = Environment::new(topo, config, Rulebook::default(), scenario, DriverSource::Synthetic, sizes.window, sizes.horizon)?;
    let factory = StreamFactory::new(3);
    let mut ep = env.episode(&factory)?;
    let mut flood_weights = Vec::new();
    let mut steps = 0;
    while !ep.is_done() {
        let t = ep.t() as u64;
        ep.observe()?;
        if env.scenario().events.iter().any(|e| e.is_pending(t)) {
            flood_weights.push(ep.weights().as_array());
        }
        let releases = env.agents().iter().map(|a| vec![0.0; a.n_actions]).collect();
        ep.step(releases)?;
        steps += 1;
    }
    let g = ep.guidance().expect("guidance on");
    Ok(TimeoutRun {
        steps,
        horizon: env.horizon(),
        flood_weights,
        fallbacks: g.fallbacks(),
        sources: g.history().iter().map(|r| r.source).collect(),
    })
}
