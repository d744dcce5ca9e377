use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use murmur::agents::checkpoint::Checkpoint;
use murmur::agents::train::{episode_factory, read_trajectory, write_trajectory, write_train_log};
use murmur::agents::{build_agents, rollout, train, RolloutOptions, TrainConfig};
use murmur::bench::scaling_benchmark;
use murmur::config::{Manifest, RunConfig};
use murmur::env::GuidanceSetting;
use murmur::guidance::PROVIDER_ENV;
use murmur::metrics::{learning_curve_cv, TrajectoryMetrics};
use murmur::network::{build_topology, TopologySpec};
use murmur::rng::{Purpose, StreamFactory};
use murmur::scenario::{load_timeseries, preprocess, write_features, PreprocessConfig};
use murmur::uncertainty::{monte_carlo_cascade_variance, predicted_cascade_variance, UncertaintyParams};

/// Per-call timeout for the external provider when only the command is given.
const PROVIDER_TIMEOUT_ENV: &str = "MURMUR_GUIDANCE_TIMEOUT_MS";
const DEFAULT_PROVIDER_TIMEOUT_MS: u64 = 2000;
const Q_C_BINS: usize = 8;

#[derive(Parser)]
#[command(name = "murmur", version, about = "Coordinated reservoir release control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll a policy (fresh or from a checkpoint) through a scenario.
    Simulate(SimulateArgs),
    /// Train one agent per reservoir.
    Train(TrainArgs),
    /// Metrics of an existing trajectory.
    Eval(EvalArgs),
    /// Per-step decision time across grid sizes.
    BenchScaling(BenchArgs),
    /// Analytic cascade variance against Monte Carlo.
    ValidateVariance(VarianceArgs),
    /// Clean and featurize a time-series CSV.
    Ingest(IngestArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Act with the policy mean.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    episodes: Option<usize>,
    /// Parallel rollout workers; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = Q_C_BINS)]
    bins: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 400, 800])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    /// Number of hops.
    #[arg(long)]
    chain: usize,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma_eta: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict node ids to this topology.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// RFC 3339 end of the training split used for normalization.
    #[arg(long)]
    train_end: Option<String>,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

/// One JSON object on stderr; exit 2 for bad input, 1 for failures at run time.
fn report(e: &anyhow::Error) -> ExitCode {
    use murmur::Error as E;
    let (kind, path, code) = match e.downcast_ref::<E>() {
        Some(E::Io { path, .. }) => ("io", Some(path.display().to_string()), 2),
        Some(E::Schema { path, .. }) => ("schema", Some(path.display().to_string()), 2),
        Some(E::Json(_) | E::Csv(_) | E::MissingColumn(_) | E::NonMonotoneTimestamps { .. } | E::UnknownNode(_)) => ("input", None, 2),
        Some(
            E::InvalidParameter(_)
            | E::InvalidNode { .. }
            | E::InvalidEdge { .. }
            | E::DanglingEndpoint { .. }
            | E::DuplicateNode(_)
            | E::Cycle(_)
            | E::NotAChain(_)
            | E::RulebookGap { .. }
            | E::OffSimplex { .. },
        ) => ("config", None, 2),
        Some(_) => ("runtime", None, 1),
        None => ("config", None, 2),
    };
    let mut body = json!({"error": kind, "message": format!("{e:#}")});
    if let Some(p) = path {
        body["path"] = json!(p);
    }
    eprintln!("{body}");
    ExitCode::from(code)
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate(a) => {
            let cfg = load_config(&a.run)?;
            simulate(cfg, &a, &a.run.out)
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.run)?;
            if let Some(n) = a.episodes {
                cfg.episodes = n;
            }
            train_cmd(cfg, a.workers, &a.run.out)
        }
        Command::Eval(a) => eval(&a),
        Command::BenchScaling(a) => bench(&a),
        Command::ValidateVariance(a) => validate_variance(&a),
        Command::Ingest(a) => ingest(&a),
        Command::Rerun(a) => rerun(&a),
    }
}

fn load_config(run: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    apply_provider_override(&mut cfg);
    Ok(cfg)
}

/// The provider command in the environment replaces the configured one
/// whenever guidance is on.
fn apply_provider_override(cfg: &mut RunConfig) {
    let Ok(command) = std::env::var(PROVIDER_ENV) else { return };
    if command.trim().is_empty() || cfg.env.guidance == GuidanceSetting::Off {
        return;
    }
    let timeout_ms = std::env::var(PROVIDER_TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_PROVIDER_TIMEOUT_MS);
    cfg.env.guidance = GuidanceSetting::Command { command, timeout_ms };
}

fn prepare_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| murmur::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, args: serde_json::Value) -> anyhow::Result<String> {
    let hash = cfg.hash()?;
    Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config_hash: hash.clone(),
        config: cfg.clone(),
        args,
    }
    .save(&out.join("manifest.json"))?;
    Ok(hash)
}

fn simulate(cfg: RunConfig, a: &SimulateArgs, out: &Path) -> anyhow::Result<()> {
    prepare_out(out)?;
    let run = cfg.clone().load()?;
    let env = run.environment()?;
    let master = StreamFactory::new(cfg.seed);
    let mut agents = build_agents(&env, &cfg.sizes, &cfg.hyper, &master)?;
    if let Some(p) = &a.checkpoint {
        Checkpoint::load(p)?.restore(&mut agents)?;
    }
    let opts = RolloutOptions {
        deterministic: a.deterministic,
        record: true,
        collect: false,
    };
    let r = rollout(&env, &agents, &master.fork(0), &cfg.hyper, opts)?;
    write_trajectory(&out.join("trajectory.csv"), &r.trajectory)?;
    let metrics = TrajectoryMetrics::from_records(&r.trajectory, Q_C_BINS)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_manifest(
        out,
        "simulate",
        &cfg,
        json!({"checkpoint": a.checkpoint, "deterministic": a.deterministic}),
    )?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn train_cmd(cfg: RunConfig, workers: usize, out: &Path) -> anyhow::Result<()> {
    prepare_out(out)?;
    let run = cfg.clone().load()?;
    let env = run.environment()?;
    let tc = TrainConfig {
        episodes: cfg.episodes,
        seed: cfg.seed,
        workers: workers.max(1),
        cv_window: cfg.cv_window,
        hyper: cfg.hyper,
        sizes: cfg.sizes.clone(),
    };
    let outcome = train(&env, &tc)?;
    write_train_log(&out.join("train_log.csv"), &outcome.log)?;
    let hash = write_manifest(out, "train", &cfg, json!({"episodes": cfg.episodes}))?;
    Checkpoint::capture(&outcome.agents, &cfg.sizes, &hash).save(&out.join("checkpoint.json"))?;

    // one greedy episode past the training range
    let eval = rollout(
        &env,
        &outcome.agents,
        &episode_factory(cfg.seed, cfg.episodes),
        &cfg.hyper,
        RolloutOptions {
            deterministic: true,
            record: true,
            collect: false,
        },
    )?;
    write_trajectory(&out.join("trajectory.csv"), &eval.trajectory)?;
    let returns: Vec<f64> = outcome.log.iter().map(|l| l.return_mean).collect();
    let window = cfg.cv_window.min(returns.len());
    let cv = if window == 0 { None } else { learning_curve_cv(&returns, window)? };
    let metrics = json!({
        "episodes": cfg.episodes,
        "updates": outcome.updates.len(),
        "rejected_updates": outcome.rejected_updates,
        "final_cv": cv,
        "evaluation": TrajectoryMetrics::from_records(&eval.trajectory, Q_C_BINS)?,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let rows = read_trajectory(&a.trajectory)?;
    let metrics = TrajectoryMetrics::from_records(&rows, a.bins)?;
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn bench(a: &BenchArgs) -> anyhow::Result<()> {
    let report = scaling_benchmark(&a.sizes, a.steps, a.seed, &murmur::agents::NetworkSizes::desk())?;
    if let Some(out) = &a.out {
        prepare_out(out)?;
        report.write(&out.join("bench.csv"), &out.join("bench.json"))?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn validate_variance(a: &VarianceArgs) -> anyhow::Result<()> {
    if a.chain == 0 {
        bail!(murmur::Error::InvalidParameter("chain needs at least one hop".into()));
    }
    let alphas = vec![a.alpha; a.chain];
    let topo = build_topology(&TopologySpec::chain(&alphas))?;
    let params = UncertaintyParams {
        sigma_base: a.sigma,
        sigma_eta: a.sigma_eta,
        ..Default::default()
    };
    params.validate()?;
    let analytic = predicted_cascade_variance(&alphas, a.sigma, a.sigma_eta)?;
    let mut rng = StreamFactory::new(a.seed).stream(Purpose::Oracle, "cascade");
    let mc = monte_carlo_cascade_variance(&topo, &params, a.samples, &mut rng)?;
    let rel = (mc.variance - analytic).abs() / analytic;
    println!("hops,alpha,sigma_base,analytic_variance,empirical_variance,relative_error");
    println!("{},{},{},{},{},{}", a.chain, a.alpha, a.sigma, analytic, mc.variance, rel);
    Ok(())
}

fn ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let topo = match &a.topology {
        Some(p) => Some(build_topology(&TopologySpec::from_path(p)?)?),
        None => None,
    };
    let series = load_timeseries(&a.input, topo.as_ref())?;
    let train_end = match &a.train_end {
        Some(s) => Some(
            murmur::scenario::parse_timestamp(s)
                .ok_or_else(|| murmur::Error::InvalidParameter(format!("cannot parse --train-end {s:?}")))?,
        ),
        None => None,
    };
    let cfg = PreprocessConfig {
        train_end,
        ..Default::default()
    };
    let features = preprocess(&series, &cfg)?;
    prepare_out(&a.out)?;
    write_features(&features, &a.out.join("features.csv"))?;
    write_json(&a.out.join("normalization.json"), &features.stats)?;
    for w in &features.warnings {
        log::warn!("{w}");
    }
    println!(
        "{}",
        json!({"nodes": features.nodes.len(), "flagged": features.flagged, "warnings": features.warnings})
    );
    Ok(())
}

fn rerun(a: &RerunArgs) -> anyhow::Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let version = env!("CARGO_PKG_VERSION");
    if m.version != version {
        log::warn!("manifest written by version {}, running {version}", m.version);
    }
    let cfg = m.config.clone();
    let hash = cfg.hash()?;
    if hash != m.config_hash {
        bail!(murmur::Error::Schema {
            path: a.manifest.clone(),
            reason: "referenced files changed since the manifest was written".into(),
        });
    }
    match m.command.as_str() {
        "train" => train_cmd(cfg, a.workers, &a.out),
        "simulate" => {
            let args = SimulateArgs {
                run: RunArgs {
                    config: a.manifest.clone(),
                    seed: None,
                    out: a.out.clone(),
                },
                checkpoint: m.args.get("checkpoint").and_then(|v| v.as_str()).map(PathBuf::from),
                deterministic: m.args.get("deterministic").and_then(|v| v.as_bool()).unwrap_or(false),
            };
            simulate(cfg, &args, &a.out)
        }
        other => bail!(murmur::Error::Schema {
            path: a.manifest.clone(),
            reason: format!("cannot rerun command {other:?}"),
        }),
    }
}
