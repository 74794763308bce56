mod config;
mod experiments;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::{RawConfig, Resolver};
use epsem::par::{configure_threads, current_threads, ExecMode};
use experiments::{resolve_run, run, Command};

/// Sources hashed into the manifest as the code version.
const SOURCES: [&str; 14] = [
    include_str!("../../core/src/appfiber.rs"),
    include_str!("../../core/src/expr.rs"),
    include_str!("../../core/src/harness.rs"),
    include_str!("../../core/src/measure.rs"),
    include_str!("../../core/src/model/mod.rs"),
    include_str!("../../core/src/model/presets.rs"),
    include_str!("../../core/src/noise.rs"),
    include_str!("../../core/src/par.rs"),
    include_str!("../../core/src/quad.rs"),
    include_str!("../../core/src/scheme.rs"),
    include_str!("../../core/src/stats.rs"),
    include_str!("config.rs"),
    include_str!("experiments.rs"),
    include_str!("main.rs"),
];

#[derive(Parser, Debug)]
#[command(name = "epsem", version, about = "Monte Carlo experiments for eps-Euler-Maruyama jump SDE schemes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (also read from EPSEM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Monte Carlo paths (samples for `wasserstein`).
    #[arg(long, global = true)]
    paths: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Exit with status 2 when an acceptance check fails.
    #[arg(long, global = true)]
    assert: bool,
    /// Config file in the sectioned key-value format.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Also write the driving noise of every path to noise.csv (simulate only).
    #[arg(long, global = true)]
    dump_noise: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate paths and write them as CSV or JSON.
    Simulate(SimulateArgs),
    /// Strong sup-error against a coupled fine reference.
    StrongError(StrongArgs),
    /// Weak error through the Feynman-Kac source term.
    WeakError(WeakArgs),
    /// Wasserstein distance between small jumps and their Gaussian substitute.
    Wasserstein(WassersteinArgs),
    /// Strong-error floor of the subordinator model.
    LowerBound(LowerBoundArgs),
    /// Renormalised angle histograms for the fibre model.
    FiberPdf(FiberArgs),
    /// Re-run an experiment from its manifest.json.
    Replay { manifest: PathBuf },
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    eps_rule: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    lambda_star: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    x0: Option<String>,
    /// csv or json.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct StrongArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    p_norms: Option<String>,
    #[arg(long)]
    n_grid: Option<String>,
    #[arg(long)]
    n_max: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    eps_rule: Option<String>,
}

#[derive(Args, Debug)]
struct WeakArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    eps_grid: Option<String>,
    #[arg(long)]
    n_with: Option<String>,
    #[arg(long)]
    n_without: Option<String>,
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    t0: Option<String>,
    #[arg(long)]
    x0: Option<String>,
}

#[derive(Args, Debug)]
struct WassersteinArgs {
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    f: Option<String>,
    #[arg(long)]
    eps_grid: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    inner_ratio: Option<String>,
    #[arg(long)]
    bootstrap: Option<String>,
    #[arg(long)]
    t0: Option<String>,
    #[arg(long)]
    t1: Option<String>,
}

#[derive(Args, Debug)]
struct LowerBoundArgs {
    #[arg(long)]
    p_norms: Option<String>,
    #[arg(long)]
    n_grid: Option<String>,
    #[arg(long)]
    n_max: Option<String>,
}

#[derive(Args, Debug)]
struct FiberArgs {
    /// isotropic or strong_shear.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    /// Five comma-separated values.
    #[arg(long)]
    gammas: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    z_minus: Option<String>,
    #[arg(long)]
    z_plus: Option<String>,
    #[arg(long)]
    t_star: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    theta0: Option<String>,
    #[arg(long)]
    jumps: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    snapshots: Option<String>,
}

type Override<'a> = (&'static str, &'static str, &'a Option<String>);

fn overrides(cmd: &Cmd) -> Vec<Override<'_>> {
    match cmd {
        Cmd::Simulate(a) => vec![
            ("model", "preset", &a.preset),
            ("model", "rho", &a.rho),
            ("model", "alpha", &a.alpha),
            ("model", "x0", &a.x0),
            ("plan", "n", &a.n),
            ("plan", "eps", &a.eps),
            ("plan", "eps_rule", &a.eps_rule),
            ("plan", "variant", &a.variant),
            ("plan", "sampler", &a.sampler),
            ("plan", "lambda_star", &a.lambda_star),
            ("run", "out", &a.out),
        ],
        Cmd::StrongError(a) => vec![
            ("model", "preset", &a.preset),
            ("model", "rho", &a.rho),
            ("plan", "p_norms", &a.p_norms),
            ("plan", "n_grid", &a.n_grid),
            ("plan", "n_max", &a.n_max),
            ("plan", "eps", &a.eps),
            ("plan", "eps_rule", &a.eps_rule),
        ],
        Cmd::WeakError(a) => vec![
            ("model", "preset", &a.preset),
            ("model", "alpha", &a.alpha),
            ("plan", "eps_grid", &a.eps_grid),
            ("plan", "n_with", &a.n_with),
            ("plan", "n_without", &a.n_without),
            ("plan", "variants", &a.variants),
            ("plan", "t0", &a.t0),
            ("plan", "x0", &a.x0),
        ],
        Cmd::Wasserstein(a) => vec![
            ("model", "kernel", &a.kernel),
            ("model", "f", &a.f),
            ("plan", "eps_grid", &a.eps_grid),
            ("plan", "q", &a.q),
            ("plan", "inner_ratio", &a.inner_ratio),
            ("plan", "bootstrap", &a.bootstrap),
            ("plan", "t0", &a.t0),
            ("plan", "t1", &a.t1),
        ],
        Cmd::LowerBound(a) => vec![
            ("plan", "p_norms", &a.p_norms),
            ("plan", "n_grid", &a.n_grid),
            ("plan", "n_max", &a.n_max),
        ],
        Cmd::FiberPdf(a) => vec![
            ("model", "regime", &a.regime),
            ("model", "sigma", &a.sigma),
            ("model", "gammas", &a.gammas),
            ("model", "alpha", &a.alpha),
            ("model", "z_minus", &a.z_minus),
            ("model", "z_plus", &a.z_plus),
            ("model", "t_star", &a.t_star),
            ("model", "q", &a.q),
            ("model", "theta0", &a.theta0),
            ("model", "jumps", &a.jumps),
            ("plan", "n", &a.n),
            ("plan", "eps", &a.eps),
            ("plan", "snapshots", &a.snapshots),
        ],
        Cmd::Replay { .. } => vec![],
    }
}

fn command_of(cmd: &Cmd) -> Option<Command> {
    Some(match cmd {
        Cmd::Simulate(_) => Command::Simulate,
        Cmd::StrongError(_) => Command::StrongError,
        Cmd::WeakError(_) => Command::WeakError,
        Cmd::Wasserstein(_) => Command::Wasserstein,
        Cmd::LowerBound(_) => Command::LowerBound,
        Cmd::FiberPdf(_) => Command::FiberPdf,
        Cmd::Replay { .. } => return None,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn code_hash() -> String {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update(s.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `<parent>/<command>-<unix seconds>-seed<seed>`, suffixed on collision.
fn run_dir(parent: &Path, cmd: Command, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let base = format!("{}-{secs}-seed{seed}", cmd.name());
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(sha256_hex(contents.as_bytes()))
}

fn execute(cmd: Command, raw: RawConfig, global: &Global) -> Result<bool> {
    let started = Instant::now();
    let r = Resolver::new(raw);
    let settings = resolve_run(&r, cmd)?;
    let threads = match settings.threads {
        Some(t) => Some(t),
        None => match std::env::var("EPSEM_THREADS") {
            Ok(v) => Some(v.parse().context("EPSEM_THREADS must be a positive integer")?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            bail!("thread count must be positive");
        }
        configure_threads(t);
    }
    if global.dump_noise && cmd != Command::Simulate {
        bail!("--dump-noise is only available for simulate");
    }
    let mode = ExecMode::default();
    let outcome = run(cmd, &r, &settings, global.dump_noise, mode)?;
    let resolved = r.finish()?;

    let dir = run_dir(&global.out_dir, cmd, settings.seed)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert(
        outcome.report_name.to_string(),
        write(&dir, outcome.report_name, &outcome.report)?,
    );
    for (name, body) in &outcome.extra_files {
        artifacts.insert(name.clone(), write(&dir, name, body)?);
    }
    let mut summary = outcome.summary;
    let failed: Vec<&str> = outcome
        .assertions
        .iter()
        .filter(|a| !a.passed)
        .map(|a| a.name.as_str())
        .collect();
    if global.assert {
        summary["assertions"] = json!(outcome.assertions);
        summary["assertions_failed"] = json!(failed);
    }
    let summary_text = serde_json::to_string_pretty(&summary)? + "\n";
    artifacts.insert("summary.json".into(), write(&dir, "summary.json", &summary_text)?);
    let manifest = json!({
        "tool": "epsem",
        "version": env!("CARGO_PKG_VERSION"),
        "code_sha256": code_hash(),
        "subcommand": cmd.name(),
        "seed": settings.seed,
        "paths": settings.paths,
        "config": resolved,
        "config_text": config::render(&resolved),
        "artifacts": artifacts,
    });
    write(&dir, "manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    let timing: Value = json!({
        "threads": current_threads(),
        "total_seconds": started.elapsed().as_secs_f64(),
        "stages": outcome.timings.iter().map(|(k, v)| json!({ "stage": k, "seconds": v })).collect::<Vec<_>>(),
    });
    write(&dir, "timing.json", &(serde_json::to_string_pretty(&timing)? + "\n"))?;

    println!("{}", dir.display());
    for a in &outcome.assertions {
        if global.assert {
            println!("[{}] {} {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
        }
    }
    Ok(!global.assert || failed.is_empty())
}

fn load(global: &Global, cmd: &Cmd) -> Result<RawConfig> {
    let mut raw = match &global.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RawConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RawConfig::default(),
    };
    if let Some(s) = global.seed {
        raw.set_flag("run", "seed", "seed", s);
    }
    if let Some(p) = global.paths {
        raw.set_flag("run", "paths", "paths", p);
    }
    if let Some(t) = global.threads {
        raw.set_flag("run", "threads", "threads", t);
    }
    for (section, key, value) in overrides(cmd) {
        if let Some(v) = value {
            raw.set_flag(section, key, &key.replace('_', "-"), v);
        }
    }
    Ok(raw)
}

fn replay(manifest: &Path, global: &Global) -> Result<bool> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let m: Value = serde_json::from_str(&text)?;
    let cmd = Command::parse(m["subcommand"].as_str().context("manifest lacks subcommand")?)?;
    let resolved: BTreeMap<String, BTreeMap<String, String>> =
        serde_json::from_value(m["config"].clone()).context("manifest config is malformed")?;
    let mut raw = RawConfig::from_resolved(&resolved);
    if let Some(t) = global.threads {
        raw.set_flag("run", "threads", "threads", t);
    }
    execute(cmd, raw, global)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Replay { manifest } => replay(manifest, &cli.global),
        other => load(&cli.global, other).and_then(|raw| {
            execute(command_of(other).expect("not replay"), raw, &cli.global)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
