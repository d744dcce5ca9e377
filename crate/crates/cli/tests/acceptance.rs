//! One PASS/FAIL line per acceptance criterion. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 4 6`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use murmur::agents::train::episode_factory;
use murmur::agents::{rollout, train, RolloutOptions, TrainConfig};
use murmur::bench::scaling_benchmark;
use murmur::config::RunConfig;
use murmur::metrics::learning_curve_cv;
use murmur::network::{build_topology, TopologySpec};
use murmur::rng::{Purpose, StreamFactory};
use murmur::uncertainty::{compound_efficiency, monte_carlo_cascade_variance, UncertaintyParams};
use support::{chain_variance_by_sum, closed_form, LossKind};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn variance_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut case = 0u64;
    for n in [2, 5, 10, 20] {
        for alpha in [1.0, 0.93, 0.7] {
            for sigma in [0.05, 0.07] {
                case += 1;
                let alphas = vec![alpha; n];
                let exact = closed_form(&alphas, sigma);
                let topo = build_topology(&TopologySpec::chain(&alphas)).expect("chain");
                let params = UncertaintyParams {
                    sigma_base: sigma,
                    ..Default::default()
                };
                let mut rng = StreamFactory::new(case).stream(Purpose::Oracle, "acceptance");
                let lib = monte_carlo_cascade_variance(&topo, &params, 100_000, &mut rng).expect("mc");
                let by_sum = chain_variance_by_sum(&alphas, sigma, 100_000, case);
                for v in [lib.variance, by_sum] {
                    worst = worst.max((v - exact).abs() / exact);
                }
            }
        }
    }
    let std10 = closed_form(&[1.0; 10], 0.07).sqrt();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 0.05 && (std10 - 0.22).abs() <= 0.02 && secs < 30.0,
        format!("24 cases, worst relative error {worst:.4}; lossless n=10 std {std10:.4}; {secs:.1}s"),
    )
}

fn compound() -> Verdict {
    let c14 = compound_efficiency(&[0.93; 14]);
    let c15 = compound_efficiency(&[0.93; 15]);
    let ok = [c14, c15].iter().all(|c| (0.33..=0.37).contains(c));
    verdict(ok, format!("0.93^14 = {c14:.4}, 0.93^15 = {c15:.4}"))
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst_coord: f64 = 0.0;
    for (kind, seed) in [(LossKind::Align, 1), (LossKind::Sep, 2), (LossKind::Coh, 3)] {
        worst_coord = worst_coord.max(support::coordination_loss_fd(kind, 100, seed).max_rel_err);
    }
    let full = support::ppo_objective_fd(100, 11);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_coord < 1e-5 && full.max_rel_err < 1e-4 && secs < 60.0,
        format!(
            "coordination losses {worst_coord:.2e}, full objective {:.2e} over {} checks; {secs:.1}s",
            full.max_rel_err, full.checks
        ),
    )
}

fn conservation() -> Verdict {
    let drift = support::closed_network_drift(10_000, 5);
    verdict(drift < 1e-9, format!("max relative drift {drift:.2e} over 1e4 steps"))
}

fn clamps() -> Verdict {
    let start = Instant::now();
    let r = support::clamp_totality(100_000, 23);
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(()) => verdict(true, format!("1e5 draws; {secs:.1}s")),
        Err(e) => verdict(false, e),
    }
}

fn templates() -> Verdict {
    let bad = support::template_mismatches();
    if bad.is_empty() {
        verdict(true, "27 rulebook pairs, 5 printed triples, 2 payloads".into())
    } else {
        verdict(false, bad.join("; "))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn training() -> Verdict {
    let start = Instant::now();
    let base = RunConfig::from_path(&configs().join("grid3.json")).expect("grid3 config");
    let mut improved = 0;
    let mut steadier = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let mut cv = [None; 2];
        for (k, beta) in [0.05, 0.0].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.hyper.beta_mur = beta;
            let run = cfg.clone().load().expect("load");
            let env = run.environment().expect("env");
            let tc = TrainConfig {
                episodes: cfg.episodes,
                seed,
                workers: 1,
                cv_window: cfg.cv_window,
                hyper: cfg.hyper,
                sizes: cfg.sizes.clone(),
            };
            let out = train(&env, &tc).expect("train");
            let r: Vec<f64> = out.log.iter().map(|l| l.return_mean).collect();
            if k == 0 {
                let (first, last) = (mean(&r[..100]), mean(&r[r.len() - 100..]));
                improved += usize::from(last > first);
                lines.push(format!("seed {seed}: first {first:.2} last {last:.2}"));
            }
            cv[k] = learning_curve_cv(&r, 100).expect("cv");
        }
        if let [Some(on), Some(off)] = cv {
            steadier += usize::from(on < off);
            lines.push(format!("cv {on:.4} vs {off:.4}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        improved >= 4 && steadier >= 4 && secs < 3600.0,
        format!("(a) {improved}/5 improved, (b) {steadier}/5 lower cv with penalty; {secs:.0}s [{}]", lines.join(", ")),
    )
}

fn guidance_ablation() -> Verdict {
    let start = Instant::now();
    let mut totals = Vec::new();
    for name in ["guided", "static"] {
        let (mut floods, mut safety) = (0usize, 0.0);
        for seed in 1..=5u64 {
            let mut cfg = RunConfig::from_path(&configs().join(format!("{name}.json"))).expect("config");
            cfg.seed = seed;
            let run = cfg.clone().load().expect("load");
            let env = run.environment().expect("env");
            let tc = TrainConfig {
                episodes: cfg.episodes,
                seed,
                workers: 1,
                cv_window: cfg.cv_window,
                hyper: cfg.hyper,
                sizes: cfg.sizes.clone(),
            };
            let out = train(&env, &tc).expect("train");
            let opts = RolloutOptions {
                deterministic: true,
                ..Default::default()
            };
            let r = rollout(&env, &out.agents, &episode_factory(seed, cfg.episodes), &cfg.hyper, opts).expect("rollout");
            floods += r.stats.flood_steps;
            safety += r.stats.safety_rate / 5.0;
        }
        totals.push((floods, safety));
    }
    let [(gf, gs), (sf, ss)] = [totals[0], totals[1]];
    let secs = start.elapsed().as_secs_f64();
    verdict(
        gs > ss && gf < sf,
        format!("guided safety {gs:.4} floods {gf}; static safety {ss:.4} floods {sf}; {secs:.0}s"),
    )
}

fn scaling() -> Verdict {
    let start = Instant::now();
    let report = scaling_benchmark(&[100, 200, 400, 800], 50, 0, &murmur::agents::NetworkSizes::desk()).expect("bench");
    let secs = start.elapsed().as_secs_f64();
    let ok = report.ratios.iter().all(|r| *r < 2.5) && (0.8..=1.3).contains(&report.slope) && secs < 600.0;
    let times: Vec<String> = report.sizes.iter().map(|s| format!("{}:{:.2}ms", s.nodes, s.median_step_ms)).collect();
    verdict(
        ok,
        format!("{}; ratios {:?}; slope {:.3}; {secs:.0}s", times.join(" "), report.ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(), report.slope),
    )
}

fn provider_timeout() -> Verdict {
    match support::provider_timeout_run("sleep 5", 200) {
        Ok(run) => {
            let ok = run.steps == run.horizon
                && run.fallbacks >= 1
                && !run.flood_weights.is_empty()
                && run.flood_weights.iter().all(|w| *w == [0.1, 0.8, 0.1]);
            verdict(ok, format!("{} of {} steps, {} fallbacks, sources {:?}", run.steps, run.horizon, run.fallbacks, run.sources))
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn murmur(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_murmur")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn cli_determinism() -> Verdict {
    let run = || -> Result<Vec<String>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
        let grid = configs().join("grid3.json");
        let guided = configs().join("guided.json");
        let (grid, guided) = (grid.to_str().unwrap(), guided.to_str().unwrap());
        let mut diffs = Vec::new();
        for (name, args) in [
            ("train", vec!["train", "--config", grid, "--episodes", "10", "--seed", "1"]),
            ("simulate", vec!["simulate", "--config", guided, "--seed", "2"]),
        ] {
            let (a, b, c) = (d(&format!("{name}-a")), d(&format!("{name}-b")), d(&format!("{name}-c")));
            for out in [&a, &b] {
                let mut full = args.clone();
                full.extend(["--out", out.as_str()]);
                murmur(&full)?;
            }
            let manifest = format!("{a}/manifest.json");
            murmur(&["rerun", "--manifest", &manifest, "--out", &c])?;
            for f in ["trajectory.csv", "train_log.csv", "metrics.json"] {
                let pa = Path::new(&a).join(f);
                if !pa.exists() {
                    continue;
                }
                let bytes = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
                let first = bytes(&pa)?;
                if first != bytes(&Path::new(&b).join(f))? || first != bytes(&Path::new(&c).join(f))? {
                    diffs.push(format!("{name}/{f}"));
                }
            }
        }
        Ok(diffs)
    };
    match run() {
        Ok(d) if d.is_empty() => verdict(true, "train and simulate repeated and rerun from manifest: identical bytes".into()),
        Ok(d) => verdict(false, format!("differs: {}", d.join(", "))),
        Err(e) => verdict(false, e),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("variance oracle", variance_oracle),
        ("compound efficiency", compound),
        ("gradient suite", gradients),
        ("conservation", conservation),
        ("clamp totality", clamps),
        ("template fidelity", templates),
        ("training", training),
        ("guidance ablation", guidance_ablation),
        ("scaling", scaling),
        ("provider timeout", provider_timeout),
        ("cli determinism", cli_determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let v = check();
        failed += usize::from(!v.pass);
        println!("{} {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
