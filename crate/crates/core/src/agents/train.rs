//! Rollouts and the episode loop: collect U episodes, then one PPO update per
//! agent.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{AgentNet, NetworkSizes};
use super::ppo::{compute_gae, ppo_update, PenaltyContext, Sample, TrainHyperparams, UpdateDiagnostics};
use crate::autodiff::ParamStore;
use crate::env::{AgentSpec, Environment};
use crate::error::{Error, Result};
use crate::guidance::Mode;
use crate::metrics::learning_curve_cv;
use crate::nn::Adam;
use crate::rng::{Purpose, StreamFactory};

pub struct Agent {
    pub spec: AgentSpec,
    pub net: AgentNet,
    pub store: ParamStore,
    pub adam: Adam,
}

/// One agent per node, each with its own parameters and optimizer.
pub fn build_agents(env: &Environment, sizes: &NetworkSizes, hyper: &TrainHyperparams, factory: &StreamFactory) -> Result<Vec<Agent>> {
    env.agents()
        .iter()
        .map(|spec| {
            let mut store = ParamStore::new();
            let net = AgentNet::new(&mut store, factory, &spec.id, spec.neighbors.len(), spec.n_actions, spec.a_max, sizes)?;
            let adam = Adam::new(&store, hyper.adam());
            Ok(Agent {
                spec: spec.clone(),
                net,
                store,
                adam,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RolloutOptions {
    /// Act with the mean action instead of sampling.
    pub deterministic: bool,
    /// Keep per-step rows for a trajectory file.
    pub record: bool,
    /// Keep training samples (with advantages and returns filled in).
    pub collect: bool,
}

/// One row per (step, node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub node: String,
    pub h: f64,
    pub h_safe: f64,
    pub q_in: f64,
    pub q_out: f64,
    pub demand: f64,
    pub reward: f64,
    pub flood: bool,
    pub mode: Option<Mode>,
    pub kappa_align: f64,
    pub kappa_sep: f64,
    pub kappa_coh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Mean over agents of the undiscounted episode return.
    pub return_mean: f64,
    pub safety_rate: f64,
    /// (step, node) pairs above the safe level.
    pub flood_steps: usize,
    pub loss_align: f64,
    pub loss_sep: f64,
    pub loss_coh: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub stats: EpisodeStats,
    /// Per agent, in step order.
    pub samples: Vec<Vec<Sample>>,
    pub trajectory: Vec<StepRecord>,
    /// `totals[t][i]`: applied total release of agent i at step t.
    pub totals: Vec<Vec<f64>>,
}

pub fn rollout(env: &Environment, agents: &[Agent], factory: &StreamFactory, hyper: &TrainHyperparams, opts: RolloutOptions) -> Result<Rollout> {
    let mut ep = env.episode(factory)?;
    let mut rngs: Vec<_> = agents.iter().map(|a| factory.stream(Purpose::Policy, &a.spec.id)).collect();
    let n = agents.len();
    let mut out = Rollout {
        samples: vec![Vec::new(); if opts.collect { n } else { 0 }],
        ..Default::default()
    };
    let mut returns = vec![0.0; n];
    let mut loss_sum = [0.0; 3];
    let mut safe_pairs = 0usize;
    let mut pairs = 0usize;
    let topo = env.topology();
    while !ep.is_done() {
        let t = ep.t();
        let obs = ep.observe()?;
        let mut releases = Vec::with_capacity(n);
        let mut draws = Vec::with_capacity(n);
        for (k, agent) in agents.iter().enumerate() {
            let a = agent.net.act(&agent.store, &obs[k], &mut rngs[k], opts.deterministic)?;
            releases.push(a.releases.clone());
            draws.push(a);
        }
        let contexts = if opts.collect { ep.contexts().to_vec() } else { Vec::new() };
        let step = ep.step(releases)?;
        let multiplier = hyper.mode_multipliers.get(step.mode);
        for k in 0..n {
            returns[k] += step.rewards[k];
            for (acc, l) in loss_sum.iter_mut().zip(step.losses[k]) {
                *acc += l;
            }
        }
        pairs += n;
        safe_pairs += step.flood.iter().filter(|f| !**f).count();
        out.stats.flood_steps += step.flood.iter().filter(|f| **f).count();
        out.totals.push(step.releases.iter().map(|r| r.iter().sum()).collect());
        if opts.record {
            let w = step.weights.as_array();
            for (i, s) in step.states.iter().enumerate() {
                out.trajectory.push(StepRecord {
                    step: t,
                    node: topo.node(i).id.clone(),
                    h: s.h,
                    h_safe: topo.node(i).h_safe,
                    q_in: s.q_in,
                    q_out: s.q_out,
                    demand: s.demand,
                    reward: step.rewards[i],
                    flood: step.flood[i],
                    mode: step.mode,
                    kappa_align: w[0],
                    kappa_sep: w[1],
                    kappa_coh: w[2],
                });
            }
        }
        if opts.collect {
            for (k, (draw, o)) in draws.into_iter().zip(obs).enumerate() {
                let penalty = (hyper.beta_mur > 0.0).then(|| PenaltyContext {
                    context: contexts[k].clone(),
                    flow_scale: env.flow_scale(),
                    multiplier,
                });
                out.samples[k].push(Sample {
                    obs: o,
                    u: draw.u,
                    log_prob: draw.log_prob_gaussian,
                    reward: step.rewards[k],
                    value: draw.value,
                    advantage: 0.0,
                    ret: 0.0,
                    penalty,
                });
            }
        }
    }
    if opts.collect {
        // the horizon truncates the episode, so bootstrap from V(s_T)
        let last = ep.observe()?;
        for (k, agent) in agents.iter().enumerate() {
            let bootstrap = agent.net.values(&agent.store, &[&last[k]])?[0];
            let s = &mut out.samples[k];
            let rewards: Vec<f64> = s.iter().map(|x| x.reward).collect();
            let values: Vec<f64> = s.iter().map(|x| x.value).collect();
            let gae = compute_gae(&rewards, &values, bootstrap, hyper.gamma, hyper.gae_lambda)?;
            for (x, (a, r)) in s.iter_mut().zip(gae.advantages.into_iter().zip(gae.returns)) {
                x.advantage = a;
                x.ret = r;
            }
        }
    }
    let steps = ep.t();
    let denom = (steps * n).max(1) as f64;
    out.stats.steps = steps;
    out.stats.return_mean = returns.iter().sum::<f64>() / n as f64;
    out.stats.safety_rate = if pairs == 0 { 1.0 } else { safe_pairs as f64 / pairs as f64 };
    out.stats.loss_align = loss_sum[0] / denom;
    out.stats.loss_sep = loss_sum[1] / denom;
    out.stats.loss_coh = loss_sum[2] / denom;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Parallel rollout workers; results do not depend on it.
    pub workers: usize,
    /// Trailing window for the logged coefficient of variation.
    pub cv_window: usize,
    pub hyper: TrainHyperparams,
    pub sizes: NetworkSizes,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed: 0,
            workers: 1,
            cv_window: 100,
            hyper: TrainHyperparams::default(),
            sizes: NetworkSizes::desk(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub return_mean: f64,
    /// Over the trailing window (shorter at the start); `None` when undefined.
    pub cv: Option<f64>,
    pub safety_rate: f64,
    pub loss_align: f64,
    pub loss_sep: f64,
    pub loss_coh: f64,
    pub flood_steps: usize,
}

pub struct TrainOutcome {
    pub agents: Vec<Agent>,
    pub log: Vec<EpisodeLog>,
    pub updates: Vec<UpdateDiagnostics>,
    /// Updates rejected for non-finite gradients (parameters left unchanged).
    pub rejected_updates: usize,
}

/// Factory for episode `e` of a run seeded with `seed`.
pub fn episode_factory(seed: u64, e: usize) -> StreamFactory {
    StreamFactory::new(seed).fork(e as u64)
}

fn rollout_block(env: &Environment, agents: &[Agent], cfg: &TrainConfig, block: &[usize]) -> Result<Vec<Rollout>> {
    let opts = RolloutOptions {
        collect: true,
        ..Default::default()
    };
    let run = |e: usize| rollout(env, agents, &episode_factory(cfg.seed, e), &cfg.hyper, opts);
    if cfg.workers <= 1 || block.len() <= 1 {
        return block.iter().map(|&e| run(e)).collect();
    }
    let workers = cfg.workers.min(block.len());
    let mut slots: Vec<Option<Result<Rollout>>> = (0..block.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                scope.spawn(move || {
                    (w..block.len())
                        .step_by(workers)
                        .map(|k| (k, run(block[k])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("rollout worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every episode assigned")).collect()
}

/// Run the whole training loop. Episode `e` always sees the same drivers,
/// noise and exploration for a given seed, whatever the worker count.
pub fn train(env: &Environment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.hyper.validate()?;
    cfg.sizes.validate()?;
    if cfg.cv_window == 0 {
        return Err(Error::InvalidParameter("cv_window must be positive".into()));
    }
    let master = StreamFactory::new(cfg.seed);
    let mut agents = build_agents(env, &cfg.sizes, &cfg.hyper, &master)?;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut returns = Vec::with_capacity(cfg.episodes);
    let mut updates = Vec::new();
    let mut rejected = 0;
    let u = cfg.hyper.update_every;
    let mut start = 0;
    while start < cfg.episodes {
        let block: Vec<usize> = (start..(start + u).min(cfg.episodes)).collect();
        let rollouts = rollout_block(env, &agents, cfg, &block)?;
        let mut batches: Vec<Vec<Sample>> = vec![Vec::new(); agents.len()];
        for (&e, r) in block.iter().zip(rollouts) {
            returns.push(r.stats.return_mean);
            let window = cfg.cv_window.min(returns.len());
            log.push(EpisodeLog {
                episode: e,
                return_mean: r.stats.return_mean,
                cv: learning_curve_cv(&returns, window)?,
                safety_rate: r.stats.safety_rate,
                loss_align: r.stats.loss_align,
                loss_sep: r.stats.loss_sep,
                loss_coh: r.stats.loss_coh,
                flood_steps: r.stats.flood_steps,
            });
            for (b, s) in batches.iter_mut().zip(r.samples) {
                b.extend(s);
            }
        }
        if block.len() == u {
            let last = *block.last().expect("nonempty block");
            let shuffle = master.fork(last as u64);
            for (agent, mut batch) in agents.iter_mut().zip(batches) {
                let mut rng = shuffle.stream(Purpose::Shuffle, &agent.spec.id);
                match ppo_update(&agent.net, &mut agent.store, &mut agent.adam, &mut batch, &cfg.hyper, &mut rng) {
                    Ok(d) => updates.push(d),
                    Err(Error::NonFiniteGradient(p)) => {
                        log::warn!("update after episode {last} for {} rejected: non-finite gradient in {p}", agent.spec.id);
                        rejected += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        start += block.len();
    }
    Ok(TrainOutcome {
        agents,
        log,
        updates,
        rejected_updates: rejected,
    })
}

pub const TRAIN_LOG_HEADER: &str = "episode,return_mean,cv,safety_rate,loss_align,loss_sep,loss_coh";

/// Rust's shortest round-trip float formatting keeps logs bit-exact.
pub fn write_train_log(path: &Path, log: &[EpisodeLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from(TRAIN_LOG_HEADER);
    body.push('\n');
    for r in log {
        let cv = r.cv.map_or_else(|| "undefined".to_string(), |c| c.to_string());
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.episode, r.return_mean, cv, r.safety_rate, r.loss_align, r.loss_sep, r.loss_coh
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub const TRAJECTORY_HEADER: &str = "step,node,h,h_safe,q_in,q_out,demand,reward,flood,mode,kappa_align,kappa_sep,kappa_coh";

pub fn write_trajectory(path: &Path, rows: &[StepRecord]) -> Result<()> {
    let mut body = String::from(TRAJECTORY_HEADER);
    body.push('\n');
    for r in rows {
        let mode = r.mode.map_or("none", |m| m.as_str());
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.node,
            r.h,
            r.h_safe,
            r.q_in,
            r.q_out,
            r.demand,
            r.reward,
            u8::from(r.flood),
            mode,
            r.kappa_align,
            r.kappa_sep,
            r.kappa_coh
        ));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StepRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TRAJECTORY_HEADER {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            reason: format!("expected header {TRAJECTORY_HEADER}"),
        });
    }
    let bad = |line: usize, what: &str| Error::Schema {
        path: path.to_path_buf(),
        reason: format!("row {line}: bad {what}"),
    };
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(k + 2, what));
        let mode = match &rec[9] {
            "none" => None,
            m => Some(Mode::ALL.into_iter().find(|x| x.as_str() == m).ok_or_else(|| bad(k + 2, "mode"))?),
        };
        rows.push(StepRecord {
            step: rec[0].parse().map_err(|_| bad(k + 2, "step"))?,
            node: rec[1].to_string(),
            h: num(2, "h")?,
            h_safe: num(3, "h_safe")?,
            q_in: num(4, "q_in")?,
            q_out: num(5, "q_out")?,
            demand: num(6, "demand")?,
            reward: num(7, "reward")?,
            flood: &rec[8] == "1",
            mode,
            kappa_align: num(10, "kappa_align")?,
            kappa_sep: num(11, "kappa_sep")?,
            kappa_coh: num(12, "kappa_coh")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DriverSource, EnvConfig};
    use crate::guidance::Rulebook;
    use crate::network::{build_topology, TopologySpec};
    use crate::scenario::Scenario;
    use std::sync::Arc;

    fn small_env() -> Environment {
        let topo = Arc::new(build_topology(&TopologySpec::grid(2, 2)).unwrap());
        let sizes = NetworkSizes::desk();
        Environment::new(
            topo,
            EnvConfig::default(),
            Rulebook::default(),
            Scenario::quiet(8, 0),
            DriverSource::Synthetic,
            sizes.window,
            sizes.horizon,
        )
        .unwrap()
    }

    fn cfg(workers: usize) -> TrainConfig {
        TrainConfig {
            episodes: 6,
            seed: 9,
            workers,
            hyper: TrainHyperparams {
                batch_size: 16,
                epochs: 2,
                update_every: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn workers_do_not_change_results() {
        let env = small_env();
        let a = train(&env, &cfg(1)).unwrap();
        let b = train(&env, &cfg(3)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.updates.len(), 3 * 4);
        for (x, y) in a.agents.iter().zip(&b.agents) {
            assert_eq!(x.store, y.store);
        }
    }

    #[test]
    fn single_partial_block_skips_the_update() {
        let env = small_env();
        let out = train(
            &env,
            &TrainConfig {
                episodes: 1,
                ..cfg(1)
            },
        )
        .unwrap();
        assert!(out.updates.is_empty());
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn trajectory_round_trips() {
        let env = small_env();
        let agents = build_agents(&env, &NetworkSizes::desk(), &TrainHyperparams::default(), &StreamFactory::new(1)).unwrap();
        let r = rollout(
            &env,
            &agents,
            &StreamFactory::new(2),
            &TrainHyperparams::default(),
            RolloutOptions {
                record: true,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trajectory.csv");
        write_trajectory(&p, &r.trajectory).unwrap();
        assert_eq!(read_trajectory(&p).unwrap(), r.trajectory);
    }
}
