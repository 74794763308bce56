//! Resolution of configs into library calls, and the artifacts each
//! experiment writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use epsem::appfiber::{self, FiberParams};
use epsem::expr::Expr;
use epsem::harness::{
    empirical_wasserstein_check, lower_bound_check, run_strong_error, run_weak_error, EpsRule,
    ErrorReport, NRule, SpaceTimeFn, StrongErrorPlan, WassersteinPlan, WeakErrorPlan,
};
use epsem::measure::{CompensatorKernel, TruncatedStableSpec};
use epsem::model::presets::{self, CustomJump, CustomModelSpec};
use epsem::model::{RateHypotheses, SdeModel};
use epsem::noise::{JumpTimeSampler, NoiseGenerator};
use epsem::par::{map_chunks, ExecMode};
use epsem::scheme::{Scheme, SchemeConfig, Variant};
use epsem::stats::Z95;

use crate::config::Resolver;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    StrongError,
    WeakError,
    Wasserstein,
    LowerBound,
    FiberPdf,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::StrongError => "strong-error",
            Command::WeakError => "weak-error",
            Command::Wasserstein => "wasserstein",
            Command::LowerBound => "lower-bound",
            Command::FiberPdf => "fiber-pdf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "simulate" => Command::Simulate,
            "strong-error" => Command::StrongError,
            "weak-error" => Command::WeakError,
            "wasserstein" => Command::Wasserstein,
            "lower-bound" => Command::LowerBound,
            "fiber-pdf" => Command::FiberPdf,
            _ => bail!("unknown subcommand '{s}'"),
        })
    }

    fn default_paths(self) -> u64 {
        match self {
            Command::Simulate => 1,
            Command::StrongError | Command::LowerBound => 10_000,
            Command::WeakError => 1_000_000,
            Command::Wasserstein | Command::FiberPdf => 100_000,
        }
    }
}

/// Everything an experiment produced, ready to be written to disk.
pub struct Outcome {
    pub report_name: &'static str,
    pub report: String,
    pub summary: Value,
    pub assertions: Vec<Assertion>,
    pub timings: Vec<(String, f64)>,
    pub extra_files: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Assertion {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(OutFormat::Csv),
            "json" => Ok(OutFormat::Json),
            _ => Err(format!("expected csv or json, got '{s}'")),
        }
    }
}

impl std::fmt::Display for OutFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutFormat::Csv => "csv",
            OutFormat::Json => "json",
        })
    }
}

pub struct RunSettings {
    pub seed: u64,
    pub paths: u64,
    pub threads: Option<usize>,
    pub out: OutFormat,
}

pub fn resolve_run(r: &Resolver, cmd: Command) -> Result<RunSettings> {
    let seed = r.get::<u64>("run", "seed", 1)?;
    let paths = r.get::<u64>("run", "paths", cmd.default_paths())?;
    if paths == 0 {
        bail!("{}: [run] paths must be positive", r.origin("run", "paths"));
    }
    let threads = r.opt::<usize>("run", "threads")?;
    let out = if cmd == Command::Simulate {
        r.get::<OutFormat>("run", "out", OutFormat::Csv)?
    } else {
        OutFormat::Csv
    };
    Ok(RunSettings {
        seed,
        paths,
        threads,
        out,
    })
}

/// Fixed 17-significant-digit formatting for byte-stable CSV.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn pow2_list(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

// ---------------------------------------------------------------- models

/// `name{key=value,...}` for the kernel presets.
pub fn parse_kernel(spec: &str) -> Result<CompensatorKernel> {
    let spec = spec.trim();
    let (name, args) = match spec.split_once('{') {
        Some((n, rest)) => (
            n.trim(),
            rest.strip_suffix('}')
                .ok_or_else(|| anyhow!("kernel '{spec}': missing closing brace"))?,
        ),
        None => (spec, ""),
    };
    let mut kv = BTreeMap::new();
    for item in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("kernel '{spec}': expected key=value, got '{item}'"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|e| anyhow!("kernel '{spec}': {k}: {e}"))?;
        kv.insert(k.trim().to_string(), v);
    }
    let take = |kv: &mut BTreeMap<String, f64>, k: &str| -> Result<f64> {
        kv.remove(k)
            .ok_or_else(|| anyhow!("kernel '{spec}': missing parameter '{k}'"))
    };
    let kernel = match name {
        "truncated_stable" => {
            let (a, b) = (take(&mut kv, "alpha")?, take(&mut kv, "b")?);
            CompensatorKernel::truncated_stable_preset(a, b)?
        }
        "time_modulated_stable" => {
            let (a, b, rho) = (take(&mut kv, "alpha")?, take(&mut kv, "b")?, take(&mut kv, "rho")?);
            CompensatorKernel::time_modulated_stable(a, b, rho)?
        }
        "one_sided_stable" => {
            let (a, b) = (take(&mut kv, "alpha")?, take(&mut kv, "b")?);
            TruncatedStableSpec {
                asym_bounds: Some((0.0, b)),
                ..TruncatedStableSpec::new(a, b)
            }
            .build()?
        }
        "fiber_kernel" => CompensatorKernel::fiber_kernel(
            take(&mut kv, "alpha")?,
            take(&mut kv, "z_minus")?,
            take(&mut kv, "z_plus")?,
            take(&mut kv, "Tstar")?,
            take(&mut kv, "q")?,
        )?,
        _ => bail!(
            "unknown kernel '{name}' (expected truncated_stable, time_modulated_stable, one_sided_stable or fiber_kernel)"
        ),
    };
    if let Some(k) = kv.keys().next() {
        bail!("kernel '{spec}': unknown parameter '{k}'");
    }
    Ok(kernel)
}

fn expr(r: &Resolver, key: &str) -> Result<Option<Expr>> {
    match r.opt::<String>("model", key)? {
        Some(src) => Expr::parse(&src)
            .map(Some)
            .map_err(|e| anyhow!("{}: [model] {key}: {e}", r.origin("model", key))),
        None => Ok(None),
    }
}

fn resolve_fiber(r: &Resolver) -> Result<FiberParams> {
    let regime = r.get::<String>("model", "regime", "isotropic".into())?;
    let base = match regime.as_str() {
        "isotropic" => FiberParams::isotropic(),
        "strong_shear" => FiberParams::strong_shear(),
        _ => bail!(
            "{}: unknown fibre regime '{regime}' (isotropic or strong_shear)",
            r.origin("model", "regime")
        ),
    };
    let gammas = r.list::<f64>("model", "gammas", &base.gammas)?;
    let gammas: [f64; 5] = gammas
        .try_into()
        .map_err(|_| anyhow!("{}: gammas needs exactly 5 values", r.origin("model", "gammas")))?;
    let p = FiberParams {
        sigma: r.get("model", "sigma", base.sigma)?,
        gammas,
        alpha: r.get("model", "alpha", base.alpha)?,
        z_minus: r.get("model", "z_minus", base.z_minus)?,
        z_plus: r.get("model", "z_plus", base.z_plus)?,
        t_star: r.get("model", "t_star", base.t_star)?,
        q: r.get("model", "q", base.q)?,
        theta0: r.get("model", "theta0", base.theta0)?,
        horizon: r.get("model", "horizon", base.horizon)?,
        jumps: r.get("model", "jumps", base.jumps)?,
    };
    p.validate()?;
    Ok(p)
}

pub fn resolve_model(r: &Resolver, default_preset: &str) -> Result<SdeModel> {
    let preset = r.get::<String>("model", "preset", default_preset.into())?;
    let model = match preset.as_str() {
        "strong_p_sweep" => presets::strong_p_sweep()?,
        "low_integrability" => presets::low_integrability(r.get("model", "rho", 0.0)?)?,
        "weak_multiplicative" => presets::weak_multiplicative(r.get("model", "alpha", 1.5)?)?,
        "weak_arctan" => presets::weak_arctan()?,
        "subordinator_lower_bound" => presets::subordinator_lower_bound()?,
        "fiber" => appfiber::build_fiber_model(&resolve_fiber(r)?)?,
        "custom" => resolve_custom(r)?,
        _ => bail!(
            "{}: unknown preset '{preset}' (expected one of {:?}, fiber or custom)",
            r.origin("model", "preset"),
            presets::PRESET_NAMES
        ),
    };
    Ok(match r.opt::<f64>("model", "x0")? {
        Some(x0) if preset != "custom" => model.with_x0(x0),
        _ => model,
    })
}

fn resolve_custom(r: &Resolver) -> Result<SdeModel> {
    let need = |key: &str| -> Result<Expr> {
        expr(r, key)?.ok_or_else(|| anyhow!("custom model needs [model] {key}"))
    };
    let drift = need("drift")?;
    let diffusion = expr(r, "diffusion")?;
    let cbar = expr(r, "jump_cbar")?;
    let f = expr(r, "jump_f")?;
    let full = expr(r, "jump_c")?;
    let jump = match (cbar, f, full) {
        (None, None, None) => CustomJump::None,
        (Some(cbar), Some(f), full) => CustomJump::Multiplicative { cbar, f, full },
        (None, None, Some(c)) => CustomJump::General(c),
        _ => bail!("custom model: give jump_cbar and jump_f together, or jump_c alone"),
    };
    let kernel_spec = r.get::<String>("model", "kernel", "truncated_stable{alpha=0.5,b=1}".into())?;
    let kernel = parse_kernel(&kernel_spec)
        .with_context(|| format!("{}: [model] kernel", r.origin("model", "kernel")))?;
    let weak = match (expr(r, "phi")?, expr(r, "source_g")?, expr(r, "u_exact")?) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        (None, None, None) => None,
        _ => bail!("custom model: phi, source_g and u_exact go together"),
    };
    let spec = CustomModelSpec {
        name: r.get("model", "name", "custom".to_string())?,
        drift,
        diffusion,
        jump,
        kernel,
        x0: r.get("model", "x0", 0.0)?,
        horizon: r.get("model", "horizon", 1.0)?,
        rate_meta: RateHypotheses::new(r.get("model", "gamma", 1.0)?, r.get("model", "zeta", 1.0)?, 2)?,
        weak,
        density_coupling: true,
    };
    Ok(presets::custom_model(spec)?)
}

/// Explicit `eps` or a named rule, never both.
fn resolve_eps_rule(r: &Resolver, default: EpsRule) -> Result<EpsRule> {
    if r.has("plan", "eps") && r.has("plan", "eps_rule") {
        bail!(
            "conflicting eps ({}) and eps_rule ({}); give one of them",
            r.origin("plan", "eps"),
            r.origin("plan", "eps_rule")
        );
    }
    if let Some(e) = r.opt::<f64>("plan", "eps")? {
        return Ok(EpsRule::Explicit(e));
    }
    let name = r.get::<String>(
        "plan",
        "eps_rule",
        match default {
            EpsRule::BgRule => "bg_rule".into(),
            _ => "half_plus_inv_p".into(),
        },
    )?;
    match name.as_str() {
        "half_plus_inv_p" => Ok(EpsRule::HalfPlusInvP),
        "bg_rule" => Ok(EpsRule::BgRule),
        _ => bail!(
            "{}: unknown eps_rule '{name}' (half_plus_inv_p or bg_rule)",
            r.origin("plan", "eps_rule")
        ),
    }
}

fn n_rule(r: &Resolver, key: &str, default: NRule) -> Result<NRule> {
    let v = r.list::<f64>("plan", key, &[default.multiplier, default.scale, default.exponent])?;
    match v.as_slice() {
        [m, s, e] => Ok(NRule::new(*m, *s, *e)),
        _ => bail!(
            "{}: [plan] {key} needs multiplier, scale, exponent",
            r.origin("plan", key)
        ),
    }
}

// ---------------------------------------------------------------- reports

fn error_report_csv(reports: &[ErrorReport]) -> String {
    let mut s = String::from("label,abscissa,estimate,stderr,half_width95\n");
    for r in reports {
        for i in 0..r.abscissae.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.label,
                num(r.abscissae[i]),
                num(r.estimates[i]),
                num(r.std_errors[i] / Z95),
                num(r.std_errors[i])
            );
        }
    }
    s
}

fn slope_in(r: &ErrorReport, lo: f64, hi: f64) -> Assertion {
    let passed = r.fitted_slope.is_some_and(|s| s >= lo && s <= hi);
    Assertion::new(
        format!("{} slope", r.label),
        passed,
        format!("fitted {:?}, accepted [{lo:.3}, {hi:.3}]", r.fitted_slope),
    )
}

// ---------------------------------------------------------------- runners

pub fn run(cmd: Command, r: &Resolver, s: &RunSettings, dump_noise: bool, mode: ExecMode) -> Result<Outcome> {
    match cmd {
        Command::Simulate => simulate(r, s, dump_noise, mode),
        Command::StrongError => strong_error(r, s, mode),
        Command::WeakError => weak_error(r, s, mode),
        Command::Wasserstein => wasserstein(r, s, mode),
        Command::LowerBound => lower_bound(r, s, mode),
        Command::FiberPdf => fiber_pdf(r, s, mode),
    }
}

fn simulate(r: &Resolver, s: &RunSettings, dump_noise: bool, mode: ExecMode) -> Result<Outcome> {
    let start = Instant::now();
    let model = resolve_model(r, "strong_p_sweep")?;
    let n = r.get::<usize>("plan", "n", 16)?;
    let eps = resolve_eps_rule(r, EpsRule::HalfPlusInvP)?.resolve(&model, n, model.rate_meta().p);
    let variant = r.get::<Variant>("plan", "variant", Variant::WithSubstitute)?;
    let sampler = match r.get::<String>("plan", "sampler", "timechange".into())?.as_str() {
        "timechange" => JumpTimeSampler::TimeChange,
        "thinning" => JumpTimeSampler::Thinning {
            lambda_star: r
                .opt::<f64>("plan", "lambda_star")?
                .ok_or_else(|| anyhow!("sampler = thinning needs [plan] lambda_star"))?,
        },
        other => bail!("{}: unknown sampler '{other}'", r.origin("plan", "sampler")),
    };
    let cfg = SchemeConfig::new(n, eps, model.horizon(), variant)?;
    let scheme = Scheme::new(&model, cfg)?;
    let generator: NoiseGenerator = scheme.noise_generator()?.with_sampler(sampler)?;
    let seed = s.seed;
    let chunks = map_chunks(s.paths, mode, |range| -> Result<Vec<(Vec<f64>, bool, String)>> {
        let mut out = Vec::new();
        for path in range {
            let noise = generator.generate(seed, path)?;
            let p = scheme.simulate_path(&noise)?;
            let mut dump = String::new();
            if dump_noise {
                let mut buf = Vec::new();
                noise.write_csv(&mut buf)?;
                for line in String::from_utf8(buf)?.lines().skip(1) {
                    let _ = writeln!(dump, "{path},{line}");
                }
            }
            out.push((p.grid_values, p.divergent, dump));
        }
        Ok(out)
    });
    let mut report = String::new();
    let mut json_paths = Vec::new();
    let mut noise_csv = String::from("path_index,kind,index,time,value\n");
    let mut divergent = 0u64;
    let mut terminal = Vec::new();
    let mut path = 0u64;
    if s.out == OutFormat::Csv {
        report.push_str("path_index,t,x\n");
    }
    for chunk in chunks {
        for (values, div, dump) in chunk? {
            if div {
                divergent += 1;
            } else {
                terminal.push(*values.last().unwrap());
            }
            match s.out {
                OutFormat::Csv => {
                    for (i, v) in values.iter().enumerate() {
                        let _ = writeln!(report, "{path},{},{}", num(cfg.grid_time(i)), num(*v));
                    }
                }
                OutFormat::Json => json_paths.push(json!({
                    "path_index": path,
                    "t": (0..=n).map(|i| num(cfg.grid_time(i))).collect::<Vec<_>>(),
                    "x": values.iter().map(|v| num(*v)).collect::<Vec<_>>(),
                })),
            }
            noise_csv.push_str(&dump);
            path += 1;
        }
    }
    let (report_name, report) = match s.out {
        OutFormat::Csv => ("report.csv", report),
        OutFormat::Json => ("report.json", serde_json::to_string_pretty(&json_paths)? + "\n"),
    };
    let mean = if terminal.is_empty() {
        None
    } else {
        Some(terminal.iter().sum::<f64>() / terminal.len() as f64)
    };
    let mut extra = Vec::new();
    if dump_noise {
        extra.push(("noise.csv".to_string(), noise_csv));
    }
    Ok(Outcome {
        report_name,
        report,
        summary: json!({
            "model": model.name(),
            "n": n,
            "eps": eps,
            "variant": variant,
            "paths": s.paths,
            "divergent_paths": divergent,
            "terminal_mean": mean,
        }),
        assertions: vec![Assertion::new(
            "no divergent paths",
            divergent == 0,
            format!("{divergent} divergent"),
        )],
        timings: vec![("simulate".into(), start.elapsed().as_secs_f64())],
        extra_files: extra,
    })
}

fn strong_error(r: &Resolver, s: &RunSettings, mode: ExecMode) -> Result<Outcome> {
    let model = resolve_model(r, "strong_p_sweep")?;
    let low = model.name().starts_with("low_integrability");
    let p_norms = r.list::<u32>("plan", "p_norms", if low { &[2] } else { &[2, 4, 6] })?;
    let n_grid = r.list::<usize>(
        "plan",
        "n_grid",
        &if low { pow2_list(11, 15) } else { pow2_list(9, 14) },
    )?;
    let plan = StrongErrorPlan {
        p_norms,
        n_grid,
        n_max: r.get("plan", "n_max", 1usize << 17)?,
        eps_rule: resolve_eps_rule(r, EpsRule::HalfPlusInvP)?,
        mc_paths: s.paths,
        seed: s.seed,
        mode,
    };
    let eps_min = plan
        .eps_rule
        .resolve(&model, plan.n_max, *plan.p_norms.iter().min().unwrap());
    let reports = run_strong_error(&model, &plan)?;
    let mut assertions = Vec::new();
    for rep in &reports {
        let pred = rep.predicted_slope.unwrap_or(f64::NAN);
        let p: u32 = rep.label.trim_start_matches("p=").parse().unwrap_or(0);
        assertions.push(match p {
            2 => slope_in(rep, pred - 0.1, pred + 0.1),
            4 => slope_in(rep, pred - 0.08, pred + 0.08),
            _ => slope_in(rep, pred - 0.05, f64::INFINITY),
        });
    }
    let slopes: Vec<f64> = reports.iter().map(|r| r.fitted_slope.unwrap_or(f64::NAN)).collect();
    if slopes.len() > 1 {
        let ordered = slopes.windows(2).all(|w| w[0] > w[1]);
        assertions.push(Assertion::new(
            "slopes strictly decrease in p",
            ordered,
            format!("{slopes:?}"),
        ));
    }
    Ok(Outcome {
        report_name: "report.csv",
        report: error_report_csv(&reports),
        summary: json!({ "model": model.name(), "plan": plan, "eps_min": eps_min, "reports": reports }),
        assertions,
        timings: reports.iter().map(|r| (r.label.clone(), r.runtime_seconds)).collect(),
        extra_files: vec![],
    })
}

fn weak_error(r: &Resolver, s: &RunSettings, mode: ExecMode) -> Result<Outcome> {
    let model = resolve_model(r, "weak_multiplicative")?;
    let arctan = model.name() == "weak_arctan";
    let (eps_default, with_default, without_default) = if arctan {
        (vec![0.8, 0.6, 0.4], NRule::new(2.0, 10.0, 3.0), NRule::new(8.0, 10.0, 2.0))
    } else {
        (
            (2..=5).map(|k| 1.5f64.powi(-k)).collect(),
            NRule::new(6.0, 1.0, 1.5),
            NRule::new(24.0, 1.0, 0.5),
        )
    };
    let plan = WeakErrorPlan {
        eps_grid: r.list("plan", "eps_grid", &eps_default)?,
        n_with: n_rule(r, "n_with", with_default)?,
        n_without: n_rule(r, "n_without", without_default)?,
        variants: r.list(
            "plan",
            "variants",
            &[Variant::WithSubstitute, Variant::WithoutSubstitute],
        )?,
        start: (r.get("plan", "t0", 0.0)?, r.get("plan", "x0", 10.0)?),
        mc_paths: s.paths,
        seed: s.seed,
        mode,
    };
    let reports = run_weak_error(&model, &plan)?;
    let mut assertions = Vec::new();
    let find = |v: Variant| reports.iter().find(|r| r.label == v.as_str());
    if !arctan {
        if let Some(w) = find(Variant::WithSubstitute) {
            let p = w.predicted_slope.unwrap_or(f64::NAN);
            assertions.push(slope_in(w, p - 0.4, p + 0.4));
        }
        if let Some(w) = find(Variant::WithoutSubstitute) {
            let p = w.predicted_slope.unwrap_or(f64::NAN);
            assertions.push(slope_in(w, p - 0.25, p + 0.25));
        }
    }
    if let (Some(a), Some(b)) = (find(Variant::WithSubstitute), find(Variant::WithoutSubstitute)) {
        let i = a.estimates.len() - 1;
        let hw = a.std_errors[i].hypot(b.std_errors[i]);
        let passed = a.estimates[i] < b.estimates[i] + 2.0 * hw;
        assertions.push(Assertion::new(
            "with-substitute bias below without-substitute at the smallest eps",
            passed,
            format!(
                "{} vs {} + 2 x {hw} combined half-width",
                a.estimates[i], b.estimates[i]
            ),
        ));
    }
    let steps: Vec<Value> = plan
        .variants
        .iter()
        .map(|&v| json!({ "variant": v, "n": plan.eps_grid.iter().map(|&e| plan.steps(v, e)).collect::<Vec<_>>() }))
        .collect();
    Ok(Outcome {
        report_name: "report.csv",
        report: error_report_csv(&reports),
        summary: json!({ "model": model.name(), "plan": plan, "steps": steps, "reports": reports }),
        assertions,
        timings: reports.iter().map(|r| (r.label.clone(), r.runtime_seconds)).collect(),
        extra_files: vec![],
    })
}

fn wasserstein(r: &Resolver, s: &RunSettings, mode: ExecMode) -> Result<Outcome> {
    let kernel_spec = r.get::<String>("model", "kernel", "truncated_stable{alpha=0.5,b=1}".into())?;
    let kernel = parse_kernel(&kernel_spec)
        .with_context(|| format!("{}: [model] kernel", r.origin("model", "kernel")))?;
    let f_src = r.get::<String>("model", "f", "z".into())?;
    let f_expr = Expr::parse(&f_src).map_err(|e| anyhow!("{}: [model] f: {e}", r.origin("model", "f")))?;
    if f_expr.uses_x() {
        bail!("{}: [model] f may depend on t and z only", r.origin("model", "f"));
    }
    let f: SpaceTimeFn = Arc::new(move |t, z| f_expr.eval(t, 0.0, z));
    let base = WassersteinPlan::new(vec![0.2, 0.1, 0.05, 0.025], s.paths as usize, s.seed);
    let plan = WassersteinPlan {
        eps_grid: r.list("plan", "eps_grid", &base.eps_grid)?,
        t0: r.get("plan", "t0", base.t0)?,
        t1: r.get("plan", "t1", base.t1)?,
        q: r.get("plan", "q", base.q)?,
        inner_ratio: r.get("plan", "inner_ratio", base.inner_ratio)?,
        bootstrap: r.get("plan", "bootstrap", base.bootstrap)?,
        mode,
        ..base
    };
    let rep = empirical_wasserstein_check(&kernel, f, &plan)?;
    let mut report = String::from("eps,eps_inner,w,ci_lo,ci_hi,bound_ratio,variance\n");
    for row in &rep.rows {
        let _ = writeln!(
            report,
            "{},{},{},{},{},{},{}",
            num(row.eps),
            num(row.eps_inner),
            num(row.w),
            num(row.ci.0),
            num(row.ci.1),
            num(row.bound_ratio),
            num(row.variance)
        );
    }
    let assertions = vec![
        Assertion::new("W decreases with eps", rep.monotone, ""),
        Assertion::new(
            "W below C eps",
            rep.within_linear_bound,
            format!("C = {}", rep.fitted_constant),
        ),
    ];
    Ok(Outcome {
        report_name: "report.csv",
        report,
        summary: json!({ "kernel": kernel.name(), "f": f_src, "plan": plan, "report": rep }),
        assertions,
        timings: vec![("wasserstein".into(), rep.runtime_seconds)],
        extra_files: vec![],
    })
}

fn lower_bound(r: &Resolver, s: &RunSettings, mode: ExecMode) -> Result<Outcome> {
    let p_norms = r.list::<u32>("plan", "p_norms", &[2, 4])?;
    let n_grid = r.list::<usize>("plan", "n_grid", &pow2_list(6, 11))?;
    let n_max = r.get::<usize>("plan", "n_max", 1 << 15)?;
    let reports = lower_bound_check(&n_grid, n_max, &p_norms, s.paths, s.seed, mode)?;
    let inner: Vec<ErrorReport> = reports.iter().map(|r| r.report.clone()).collect();
    let assertions = reports
        .iter()
        .map(|r| {
            Assertion::new(
                format!("p={} exponent below 1/p + 0.1", r.p),
                r.passed,
                format!("exponent {} vs ceiling {}", r.exponent, r.ceiling),
            )
        })
        .collect();
    Ok(Outcome {
        report_name: "report.csv",
        report: error_report_csv(&inner),
        summary: json!({ "n_grid": n_grid, "n_max": n_max, "paths": s.paths, "reports": reports }),
        assertions,
        timings: inner.iter().map(|r| (r.label.clone(), r.runtime_seconds)).collect(),
        extra_files: vec![],
    })
}

/// Grid times covering both regimes: four up to `T*/2`, `T/8`, and five from
/// `2T*` to the horizon.
fn default_snapshots(params: &FiberParams, n: usize) -> Vec<f64> {
    let h = params.horizon / n as f64;
    let early = ((params.t_star / 2.0 / h).floor() as usize).max(1);
    let late = ((2.0 * params.t_star / h).ceil() as usize).min(n);
    let mut steps: Vec<usize> = (1..=4).map(|j| ((early * j) as f64 / 4.0).round() as usize).collect();
    steps.push(n / 8);
    steps.extend((0..=4).map(|j| late + (((n - late) * j) as f64 / 4.0).round() as usize));
    steps.retain(|&k| k >= 1);
    steps.sort_unstable();
    steps.dedup();
    steps.into_iter().map(|k| k as f64 * h).collect()
}

fn fiber_pdf(r: &Resolver, s: &RunSettings, mode: ExecMode) -> Result<Outcome> {
    let preset = r.get::<String>("model", "preset", "fiber".into())?;
    if preset != "fiber" {
        bail!("{}: fiber-pdf only runs the fiber preset", r.origin("model", "preset"));
    }
    let params = resolve_fiber(r)?;
    let n = r.get::<usize>("plan", "n", 256)?;
    let eps = r.get::<f64>("plan", "eps", 1.0 / n as f64)?;
    let snapshots = r.list::<f64>("plan", "snapshots", &default_snapshots(&params, n))?;
    let cfg = SchemeConfig::new(n, eps, params.horizon, Variant::WithSubstitute)?;
    let rep = appfiber::run_fiber_pdf(&params, cfg, s.paths, &snapshots, s.seed, mode)?;
    let noise_var = appfiber::noise_variance_curve(&params, &snapshots)?;
    let mut report = String::from("bin_center,density,snapshot_t\n");
    for snap in &rep.snapshots {
        for (c, d) in rep.bin_centers.iter().zip(&snap.density) {
            let _ = writeln!(report, "{},{},{}", num(*c), num(*d), num(snap.t));
        }
    }
    let mut assertions = Vec::new();
    if params.jumps {
        let (ts, h) = (params.t_star, params.horizon);
        for (name, lo, hi, accept) in [
            ("superdiffusive on [0, T*/2]", 0.0, ts / 2.0, (1.05, f64::INFINITY)),
            ("linear on [2T*, T]", 2.0 * ts, h, (0.8, 1.2)),
        ] {
            let count = rep.snapshots.iter().filter(|s| s.t >= lo && s.t <= hi).count();
            let e = rep.variance_exponent(lo, hi);
            assertions.push(match e {
                Some(e) if count >= 2 => Assertion::new(
                    name,
                    e > accept.0 && e <= accept.1,
                    format!("exponent {e} over {count} snapshots"),
                ),
                _ => Assertion::new(name, false, format!("needs two snapshots in [{lo}, {hi}]")),
            });
        }
        if let (Some(first), Some(last)) = (rep.snapshots.first(), rep.snapshots.last()) {
            assertions.push(Assertion::new(
                "kurtosis decreases over time",
                first.excess_kurtosis > last.excess_kurtosis,
                format!("{} at t={} vs {} at t={}", first.excess_kurtosis, first.t, last.excess_kurtosis, last.t),
            ));
        }
    } else {
        for snap in &rep.snapshots {
            assertions.push(Assertion::new(
                format!("Gaussian kurtosis at t={}", snap.t),
                snap.excess_kurtosis.abs() <= 0.1,
                format!("{}", snap.excess_kurtosis),
            ));
        }
    }
    let stats: Vec<Value> = rep
        .snapshots
        .iter()
        .zip(&noise_var)
        .map(|(snap, v)| json!({ "snapshot": snap, "noise_variance": v }))
        .collect();
    Ok(Outcome {
        report_name: "report.csv",
        report,
        summary: json!({
            "params": params,
            "n": rep.n,
            "eps": rep.eps,
            "paths": rep.paths,
            "excluded_paths": rep.excluded_paths,
            "snapshots": stats,
        }),
        assertions,
        timings: vec![("fiber-pdf".into(), rep.runtime_seconds)],
        extra_files: vec![],
    })
}
