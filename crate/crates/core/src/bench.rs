//! Decision-step timing across grid sizes.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agents::{build_agents, NetworkSizes, TrainHyperparams};
use crate::env::{DriverSource, EnvConfig, Environment};
use crate::error::{Error, Result};
use crate::guidance::Rulebook;
use crate::network::{build_topology, TopologySpec};
use crate::rng::{Purpose, StreamFactory};
use crate::scenario::Scenario;

/// Grid shapes used for each node count: as square as possible, rows ≤ cols.
pub fn grid_shape(nodes: usize) -> (usize, usize) {
    let mut rows = (nodes as f64).sqrt().floor() as usize;
    while rows > 1 && nodes % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), nodes / rows.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeResult {
    pub nodes: usize,
    pub median_step_ms: f64,
    /// Process peak resident set so far; `None` where the platform hides it.
    pub peak_mem_mb: Option<f64>,
    /// FNV-1a over the bits of every applied release, for determinism checks.
    pub trace_digest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub sizes: Vec<SizeResult>,
    /// Least-squares slope of ln(time) against ln(nodes).
    pub slope: f64,
    /// time(n_{k+1}) / time(n_k) for consecutive sizes.
    pub ratios: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
}

/// Peak resident set size from `/proc/self/status`.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Sizes are timed in this many interleaved rounds so a transient slowdown of
/// the host lands on every size instead of one.
pub const ROUNDS: usize = 3;

struct SizeRun {
    nodes: usize,
    times: Vec<f64>,
    digest: u64,
}

fn time_size(n: usize, steps: usize, seed: u64, sizes: &NetworkSizes, factory: &StreamFactory) -> Result<SizeRun> {
    let (rows, cols) = grid_shape(n);
    let topo = Arc::new(build_topology(&TopologySpec::grid(rows, cols))?);
    let env = Environment::new(
        topo,
        EnvConfig::default(),
        Rulebook::default(),
        Scenario::quiet(steps as u64, seed),
        DriverSource::Synthetic,
        sizes.window,
        sizes.horizon,
    )?;
    let agents = build_agents(&env, sizes, &TrainHyperparams::default(), factory)?;
    let ep_factory = factory.fork(n as u64);
    let mut ep = env.episode(&ep_factory)?;
    let mut rngs: Vec<_> = agents.iter().map(|a| ep_factory.stream(Purpose::Policy, &a.spec.id)).collect();
    let mut times = Vec::with_capacity(steps);
    let mut digest = 0xcbf2_9ce4_8422_2325u64;
    while !ep.is_done() {
        let start = Instant::now();
        let obs = ep.observe()?;
        let mut releases = Vec::with_capacity(agents.len());
        for (k, a) in agents.iter().enumerate() {
            releases.push(a.net.act(&a.store, &obs[k], &mut rngs[k], false)?.releases);
        }
        let out = ep.step(releases)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        for x in out.releases.iter().flatten() {
            for b in x.to_bits().to_le_bytes() {
                digest ^= u64::from(b);
                digest = digest.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    Ok(SizeRun {
        nodes: env.topology().len(),
        times,
        digest,
    })
}

/// Time `steps` decision steps (observe, act for every agent, advance the
/// simulator) with freshly initialized policies at each node count. The
/// reported time is the median over all steps of all rounds.
pub fn scaling_benchmark(node_counts: &[usize], steps: usize, seed: u64, sizes: &NetworkSizes) -> Result<ScalingReport> {
    if node_counts.len() < 2 || steps == 0 {
        return Err(Error::InvalidParameter("need at least two sizes and one step".into()));
    }
    let factory = StreamFactory::new(seed);
    let mut runs: Vec<Option<SizeRun>> = node_counts.iter().map(|_| None).collect();
    for _ in 0..ROUNDS {
        for (slot, &n) in runs.iter_mut().zip(node_counts) {
            let run = time_size(n, steps, seed, sizes, &factory)?;
            match slot {
                None => *slot = Some(run),
                Some(prev) => {
                    if prev.digest != run.digest {
                        return Err(Error::InvalidParameter(format!("non-repeatable trace at {n} nodes")));
                    }
                    prev.times.extend(run.times);
                }
            }
        }
    }
    let results: Vec<SizeResult> = runs
        .into_iter()
        .flatten()
        .map(|mut r| SizeResult {
            nodes: r.nodes,
            median_step_ms: median(&mut r.times),
            peak_mem_mb: peak_rss_mb(),
            trace_digest: r.digest,
        })
        .collect();
    let xs: Vec<f64> = results.iter().map(|r| r.nodes as f64).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.median_step_ms).collect();
    Ok(ScalingReport {
        slope: log_log_slope(&xs, &ys),
        ratios: ys.windows(2).map(|w| w[1] / w[0]).collect(),
        sizes: results,
        steps,
        seed,
    })
}

impl ScalingReport {
    /// CSV `nodes,median_step_ms,peak_mem_mb,slope`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nodes,median_step_ms,peak_mem_mb,slope\n");
        for r in &self.sizes {
            let mem = r.peak_mem_mb.map_or_else(|| "unavailable".to_string(), |m| format!("{m:.1}"));
            s.push_str(&format!("{},{:.4},{},{:.4}\n", r.nodes, r.median_step_ms, mem, self.slope));
        }
        s
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(grid_shape(100), (10, 10));
        assert_eq!(grid_shape(200), (10, 20));
        assert_eq!(grid_shape(400), (20, 20));
        assert_eq!(grid_shape(800), (25, 32));
        assert_eq!(grid_shape(7), (1, 7));
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((log_log_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn traces_repeat() {
        let s = NetworkSizes::desk();
        let a = scaling_benchmark(&[4, 8], 3, 7, &s).unwrap();
        let b = scaling_benchmark(&[4, 8], 3, 7, &s).unwrap();
        let d = |r: &ScalingReport| r.sizes.iter().map(|x| x.trace_digest).collect::<Vec<_>>();
        assert_eq!(d(&a), d(&b));
    }
}
