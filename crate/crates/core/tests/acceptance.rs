//! End-to-end acceptance run at the documented experiment scales.
//!
//! Prints one `[PASS]`/`[FAIL]` line per criterion. The process fails when a
//! criterion outside `KNOWN_GAPS` fails; with `EPSEM_ACCEPTANCE_STRICT=1` any
//! failure is fatal. `EPSEM_ACCEPTANCE_ONLY=1,5` restricts the run.

use std::sync::Arc;
use std::time::Instant;

use epsem::appfiber::{empirical_noise_variance, noise_variance_curve, run_fiber_pdf, FiberParams};
use epsem::harness::{
    empirical_wasserstein_check, lower_bound_check, run_strong_error, run_weak_error, EpsRule,
    ErrorReport, NRule, StrongErrorPlan, WassersteinPlan, WeakErrorPlan,
};
use epsem::measure::{CompensatorKernel, Region, TruncatedStableSpec};
use epsem::model::arctan_sq_moment;
use epsem::model::presets::{
    low_integrability, strong_p_sweep, weak_arctan, weak_multiplicative,
};
use epsem::noise::{
    aggregate_to_coarser_grid, generate_noise, sample_jump_times_thinning,
    sample_jump_times_timechange, SeedStream, SubstreamTag,
};
use epsem::par::ExecMode;
use epsem::quad::{simpson, Quadrature};
use epsem::scheme::{SchemeConfig, Variant};
use epsem::stats::ks_two_sample;

/// Criteria known to miss their targets under the pinned plans.
const KNOWN_GAPS: [u32; 3] = [2, 3, 6];
const SEED: u64 = 1;

struct Check {
    name: String,
    passed: bool,
    detail: String,
}

type Criterion = (u32, &'static str, fn() -> Vec<Check>);

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn slope(r: &ErrorReport) -> f64 {
    r.fitted_slope.unwrap_or(f64::NAN)
}

fn pow2(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn mode() -> ExecMode {
    ExecMode::default()
}

fn criterion_1() -> Vec<Check> {
    let m = strong_p_sweep().unwrap();
    let n_max = 1usize << 17;
    let plan = StrongErrorPlan {
        p_norms: vec![2, 4, 6],
        n_grid: pow2(9, 14),
        n_max,
        eps_rule: EpsRule::Explicit(1.0 / n_max as f64),
        mc_paths: 10_000,
        seed: SEED,
        mode: mode(),
    };
    let r = run_strong_error(&m, &plan).unwrap();
    let (s2, s4, s6) = (slope(&r[0]), slope(&r[1]), slope(&r[2]));
    vec![
        check("p=2 slope in [0.40, 0.60]", (0.40..=0.60).contains(&s2), format!("{s2:.3}")),
        check("p=4 slope in [0.17, 0.33]", (0.17..=0.33).contains(&s4), format!("{s4:.3}")),
        check("p=6 slope >= 0.12", s6 >= 0.12, format!("{s6:.3}")),
        check("strict ordering", s2 > s4 && s4 > s6, format!("{s2:.3} > {s4:.3} > {s6:.3}")),
    ]
}

fn criterion_2() -> Vec<Check> {
    let run = |rho: f64| {
        let m = low_integrability(rho).unwrap();
        let plan = StrongErrorPlan {
            p_norms: vec![2],
            n_grid: pow2(11, 15),
            n_max: 1 << 17,
            eps_rule: EpsRule::HalfPlusInvP,
            mc_paths: 10_000,
            seed: SEED,
            mode: mode(),
        };
        slope(&run_strong_error(&m, &plan).unwrap()[0])
    };
    let (a, b) = (run(0.0), run(-0.75));
    vec![
        check("rho=0 slope in [0.4, 0.6]", (0.4..=0.6).contains(&a), format!("{a:.3}")),
        check("rho=-0.75 slope in [0.15, 0.35]", (0.15..=0.35).contains(&b), format!("{b:.3}")),
        check("gap >= 0.1", a - b >= 0.1, format!("{:.3}", a - b)),
    ]
}

/// `with < without + 2 combined half-widths` at grid index `i`.
fn bias_ordering(w: &ErrorReport, wo: &ErrorReport, i: usize) -> Check {
    let hw = w.std_errors[i].hypot(wo.std_errors[i]);
    check(
        format!("bias ordering at eps={:.4}", w.abscissae[i]),
        w.estimates[i] < wo.estimates[i] + 2.0 * hw,
        format!("{:.4} vs {:.4} (hw {:.4})", w.estimates[i], wo.estimates[i], hw),
    )
}

fn criterion_3() -> Vec<Check> {
    let m = weak_multiplicative(1.5).unwrap();
    let plan = WeakErrorPlan {
        eps_grid: (2..=5).map(|k| 1.5f64.powi(-k)).collect(),
        n_with: NRule::new(6.0, 1.0, 1.5),
        n_without: NRule::new(24.0, 1.0, 0.5),
        variants: vec![Variant::WithSubstitute, Variant::WithoutSubstitute],
        start: (0.0, 10.0),
        mc_paths: 1_000_000,
        seed: SEED,
        mode: mode(),
    };
    let r = run_weak_error(&m, &plan).unwrap();
    let (w, wo) = (slope(&r[0]), slope(&r[1]));
    vec![
        check("with-substitute slope in [1.1, 1.9]", (1.1..=1.9).contains(&w), format!("{w:.3}")),
        check("without-substitute slope in [0.25, 0.75]", (0.25..=0.75).contains(&wo), format!("{wo:.3}")),
        bias_ordering(&r[0], &r[1], plan.eps_grid.len() - 1),
    ]
}

/// Hybrid arctan variance and the source term against brute-force oracles.
fn arctan_oracles() -> Vec<Check> {
    let m = weak_arctan().unwrap();
    let mut worst: f64 = 0.0;
    for &x in &[-20.0, -7.3, -1.0, 0.4, 3.0, 20.0] {
        for &eps in &[1e-4, 1e-3, 1e-2, 0.1, 0.3] {
            let got = m.arctan_spatial_variance(eps, x).unwrap();
            let half = simpson(|z: f64| if z == 0.0 { 0.0 } else { (x * z).atan().powi(2) / z }, 0.0, eps, 1_000_000);
            worst = worst.max(rel_err(got, 2.0 * half));
        }
    }
    let mut worst_moment: f64 = 0.0;
    for &alpha in &[0.0, 0.5, 1.0, 1.5] {
        for &y in &[0.01, 0.3, 0.5, 1.7, 6.0] {
            let brute = simpson(
                |v: f64| if v == 0.0 { 0.0 } else { 8.0 * v.powi(8).atan().powi(2) * v.powf(-1.0 - 8.0 * alpha) },
                0.0,
                f64::powf(y, 0.125),
                1_000_000,
            );
            worst_moment = worst_moment.max(rel_err(arctan_sq_moment(alpha, y), brute));
        }
    }
    let spec = m.weak_spec().unwrap();
    let q = Quadrature::default();
    let mut worst_g: f64 = 0.0;
    for &x in &[0.0, 0.3, -1.7, 4.0, 10.0] {
        let jump = |z: f64| {
            let c = (x * z).atan();
            ((x + c).sin() - x.sin() - c * x.cos()) / z.abs()
        };
        let g = -2.0 * x * x.cos() + q.integrate_pieces(jump, &[-1.0, 0.0, 1.0]).unwrap();
        worst_g = worst_g.max((g - (spec.source_g)(0.5, x)).abs());
    }
    vec![
        check("variance evaluator vs 1e6-panel Simpson, rel 1e-5", worst < 1e-5, format!("worst {worst:.2e}")),
        check("hybrid moment vs brute Simpson, rel 1e-5", worst_moment < 1e-5, format!("worst {worst_moment:.2e}")),
        check("source term vs generator quadrature, 1e-5", worst_g < 1e-5, format!("worst {worst_g:.2e}")),
    ]
}

fn criterion_4() -> Vec<Check> {
    let m = weak_arctan().unwrap();
    let plan = WeakErrorPlan {
        eps_grid: vec![0.8, 0.6, 0.4],
        n_with: NRule::new(2.0, 10.0, 3.0),
        n_without: NRule::new(8.0, 10.0, 2.0),
        variants: vec![Variant::WithSubstitute, Variant::WithoutSubstitute],
        start: (0.0, 10.0),
        mc_paths: 1_000_000,
        seed: SEED,
        mode: mode(),
    };
    let r = run_weak_error(&m, &plan).unwrap();
    let mut checks: Vec<Check> = (0..plan.eps_grid.len()).map(|i| bias_ordering(&r[0], &r[1], i)).collect();
    checks.extend(arctan_oracles());
    checks
}

fn criterion_5() -> Vec<Check> {
    let k = CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap();
    let plan = WassersteinPlan::new(vec![0.2, 0.1, 0.05, 0.025], 100_000, SEED);
    let r = empirical_wasserstein_check(&k, Arc::new(|_, z| z), &plan).unwrap();
    let ws: Vec<String> = r.rows.iter().map(|row| format!("{:.2e}", row.w)).collect();
    vec![
        check("W2 monotone within CIs", r.monotone, ws.join(" > ")),
        check("W2 <= C eps", r.within_linear_bound, format!("C = {:.4}", r.fitted_constant)),
    ]
}

fn criterion_6() -> Vec<Check> {
    lower_bound_check(&pow2(6, 11), 1 << 15, &[2, 4], 10_000, SEED, mode())
        .unwrap()
        .into_iter()
        .map(|r| {
            check(
                format!("p={} exponent <= {:.2}", r.p, r.ceiling),
                r.passed,
                format!("{:.3}", r.exponent),
            )
        })
        .collect()
}

fn property_checks() -> Vec<Check> {
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for &alpha in &[0.0, 0.5, 1.0, 1.5, 1.9] {
        let closed = TruncatedStableSpec {
            asym_bounds: Some((2.0, 5.0)),
            ..TruncatedStableSpec::new(alpha, 5.0)
        }
        .build()
        .unwrap();
        let quad = CompensatorKernel::factorised(
            epsem::measure::TimeFactor::Constant,
            Arc::new(move |z: f64| z.abs().powf(-1.0 - alpha)),
            (-2.0, 5.0),
            alpha,
        )
        .unwrap();
        for &eps in &[0.01, 0.1, 0.5] {
            for &p in &[alpha + 0.5, 2.0_f64.max(alpha + 0.5), 4.0] {
                for region in [Region::Inside, Region::Outside] {
                    let a = closed.truncated_moment(0.0, eps, p, region).unwrap();
                    let b = quad.truncated_moment(0.0, eps, p, region).unwrap();
                    worst = worst.max(rel_err(a, b));
                }
            }
            let a = closed.tail_intensity(0.0, eps).unwrap();
            worst = worst.max(rel_err(a, quad.tail_intensity(0.0, eps).unwrap()));
        }
    }
    out.push(check("closed form vs quadrature, rel 1e-8", worst < 1e-8, format!("worst {worst:.2e}")));

    let mut worst: f64 = 0.0;
    for &alpha in &[0.0, 0.5, 1.0, 1.5, 1.9] {
        for &(zm, zp) in &[(1.0, 1.0), (0.0, 7.0), (2.0, 5.0)] {
            let k = TruncatedStableSpec {
                asym_bounds: Some((zm, zp)),
                ..TruncatedStableSpec::new(alpha, f64::max(zm, zp))
            }
            .build()
            .unwrap();
            for i in 1..=999 {
                let y = i as f64 / 1000.0;
                let x = k.jump_size_quantile(0.0, 0.05, y).unwrap();
                worst = worst.max((k.jump_size_cdf(0.0, 0.05, x).unwrap() - y).abs());
            }
        }
    }
    out.push(check("quantile/CDF round trip, 1e-10", worst < 1e-10, format!("worst {worst:.2e}")));

    let k = CompensatorKernel::fiber_kernel(1.5, 8.0, 8.0, 0.2, 1.5).unwrap();
    let (eps, seeds) = (0.5, 10_000u64);
    let lambda_star = k.tail_intensity(1.0, eps).unwrap();
    let (mut ca, mut cb, mut fa, mut fb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..seeds {
        let mut r = SeedStream::new(11, i, SubstreamTag::JumpTimes).rng();
        let a = sample_jump_times_timechange(&k, eps, 0.0, 1.0, &mut r).unwrap();
        let mut p = SeedStream::new(12, i, SubstreamTag::JumpTimes).rng();
        let mut u = SeedStream::new(12, i, SubstreamTag::Thinning).rng();
        let b = sample_jump_times_thinning(&k, eps, 0.0, 1.0, lambda_star, &mut p, &mut u).unwrap();
        ca.push(a.len() as f64);
        cb.push(b.len() as f64);
        fa.push(a.first().copied().unwrap_or(2.0));
        fb.push(b.first().copied().unwrap_or(2.0));
    }
    let (_, p_counts) = ks_two_sample(&ca, &cb);
    let (_, p_first) = ks_two_sample(&fa, &fb);
    out.push(check(
        "time change vs thinning KS, p > 0.01",
        p_counts > 0.01 && p_first > 0.01,
        format!("counts p={p_counts:.3}, first arrival p={p_first:.3}"),
    ));

    let m = strong_p_sweep().unwrap();
    let plan = |mode| StrongErrorPlan {
        p_norms: vec![2, 4],
        n_grid: vec![16, 32, 64],
        n_max: 256,
        eps_rule: EpsRule::HalfPlusInvP,
        mc_paths: 3000,
        seed: 5,
        mode,
    };
    let bytes = |mode| serde_json::to_string(&run_strong_error(&m, &plan(mode)).unwrap()).unwrap();
    let seq = bytes(ExecMode::Sequential);
    let k = CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.5).unwrap();
    let cfg = SchemeConfig::new(128, 0.01, 1.0, Variant::WithSubstitute).unwrap();
    let csv = |i| {
        let mut v = Vec::new();
        generate_noise(&k, &cfg, 9, i).unwrap().write_csv(&mut v).unwrap();
        v
    };
    out.push(check(
        "determinism: byte-equal reports and noise",
        seq == bytes(ExecMode::Sequential) && seq == bytes(ExecMode::Parallel) && csv(3) == csv(3),
        "",
    ));

    let mut ok = true;
    for n in [1usize, 7, 64, 1000] {
        let c = SchemeConfig::new(n, 0.1, 2.5, Variant::WithSubstitute).unwrap();
        for i in 0..=n {
            ok &= c.rho(c.grid_time(i)) == i && c.eta(c.grid_time(i)) == c.grid_time(i);
        }
        for j in 0..997 {
            let t = 2.5 * j as f64 / 997.0;
            let i = c.rho(t);
            ok &= c.grid_time(i) <= t + 1e-12 && (i == n || t < c.grid_time(i + 1));
        }
    }
    out.push(check("grid maps rho/eta", ok, ""));

    let mut noise = generate_noise(&k, &SchemeConfig::new(256, 0.05, 1.0, Variant::WithSubstitute).unwrap(), 4, 2).unwrap();
    noise.brownian_increments = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
    noise.substitute_weights = Some((0..256).map(|i| 1.0 + (i % 5) as f64).collect::<Vec<f64>>().into());
    let mut worst: f64 = 0.0;
    for (a, b) in [(2usize, 8usize), (4, 4), (16, 16)] {
        let two = aggregate_to_coarser_grid(&aggregate_to_coarser_grid(&noise, a).unwrap(), b).unwrap();
        let one = aggregate_to_coarser_grid(&noise, a * b).unwrap();
        ok &= two.jump_steps == one.jump_steps;
        for (x, y) in two
            .brownian_increments
            .iter()
            .chain(&two.substitute_gaussians)
            .zip(one.brownian_increments.iter().chain(&one.substitute_gaussians))
        {
            worst = worst.max((x - y).abs());
        }
    }
    out.push(check("aggregation Chasles identity", ok && worst < 1e-12, format!("worst {worst:.2e}")));
    out
}

fn criterion_7() -> Vec<Check> {
    let mut v = property_checks();
    v.extend(arctan_oracles().into_iter().take(2));
    v
}

fn criterion_8() -> Vec<Check> {
    let params = FiberParams::isotropic();
    let n = 256;
    let cfg = SchemeConfig::new(n, 1.0 / n as f64, params.horizon, Variant::WithSubstitute).unwrap();
    let times: Vec<f64> = [4, 8, 16, 24, 32, 104, 128, 192, 256]
        .iter()
        .map(|&k| k as f64 / n as f64)
        .collect();
    let rep = run_fiber_pdf(&params, cfg, 100_000, &times, SEED, mode()).unwrap();
    let mut out = Vec::new();

    let probe = [0.125, 0.5, 1.0];
    let empirical = empirical_noise_variance(&params, cfg, 100_000, &probe, 7, mode()).unwrap();
    let predicted = noise_variance_curve(&params, &probe).unwrap();
    let worst = empirical
        .iter()
        .zip(&predicted)
        .map(|((v, hw), p)| (v - p).abs() / hw)
        .fold(0.0, f64::max);
    out.push(check(
        "Var(L_t) quadrature vs empirical, 3 half-widths",
        worst <= 3.0,
        format!("worst {worst:.2} hw"),
    ));
    // Below T*, a 1/(q-1) prefactor would scale the curve by q/(q-1).
    let t = (params.t_star * n as f64).floor() / n as f64;
    let at_star = noise_variance_curve(&params, &[t]).unwrap()[0];
    let star = empirical_noise_variance(&params, cfg, 100_000, &[t], 7, mode()).unwrap()[0];
    let printed = at_star * params.q / (params.q - 1.0);
    out.push(check(
        "Var(L_t) near T* rejects the 1/(q-1) prefactor",
        (star.0 - at_star).abs() <= 3.0 * star.1 && (star.0 - printed).abs() > 3.0 * star.1,
        format!("empirical {:.3} +/- {:.3}, 1/q {at_star:.3}, 1/(q-1) {printed:.3}", star.0, star.1),
    ));

    // Constant diffusion: Var(theta_t) = gamma0 (t + Var L_t).
    let curve = noise_variance_curve(&params, &times).unwrap();
    let worst = rep
        .snapshots
        .iter()
        .zip(&curve)
        .map(|(s, v)| (s.variance - params.gammas[0] * (s.t + v)).abs() / s.variance_hw)
        .fold(0.0, f64::max);
    out.push(check("Var(theta_t) vs gamma0 (t + Var L_t), 3 half-widths", worst <= 3.0, format!("worst {worst:.2} hw")));

    let early = rep.variance_exponent(0.0, params.t_star / 2.0).unwrap_or(f64::NAN);
    let late = rep.variance_exponent(2.0 * params.t_star, params.horizon).unwrap_or(f64::NAN);
    out.push(check("superdiffusive before T*/2 (exponent > 1.05)", early > 1.05, format!("{early:.3}")));
    out.push(check("linear after 2T* (exponent in [0.8, 1.2])", (0.8..=1.2).contains(&late), format!("{late:.3}")));

    let k0 = rep.snapshot(0.125).unwrap().excess_kurtosis;
    let k1 = rep.snapshot(1.0).unwrap().excess_kurtosis;
    out.push(check("kurtosis decreases from t=0.125 to t=1", k0 > k1, format!("{k0:.2} -> {k1:.2}")));

    let g = run_fiber_pdf(&FiberParams::gaussian_control(0.5), cfg, 100_000, &[0.125, 1.0], 3, mode()).unwrap();
    let worst = g.snapshots.iter().map(|s| s.excess_kurtosis.abs()).fold(0.0, f64::max);
    out.push(check("Gaussian control |excess kurtosis| <= 0.1", worst <= 0.1, format!("{worst:.4}")));
    out
}

fn main() {
    let strict = std::env::var("EPSEM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<u32>> = std::env::var("EPSEM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "strong p-sweep", criterion_1),
        (2, "low time-integrability", criterion_2),
        (3, "weak error, multiplicative", criterion_3),
        (4, "weak error, arctan", criterion_4),
        (5, "Gaussian substitute in Wasserstein distance", criterion_5),
        (6, "Euler-Peano error floor", criterion_6),
        (7, "property suites", criterion_7),
        (8, "fibre qualitative suite", criterion_8),
    ];
    let mut unexpected = Vec::new();
    for (id, title, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let checks = run();
        let passed = checks.iter().all(|c| c.passed);
        let parts: Vec<String> = checks
            .iter()
            .map(|c| {
                let mark = if c.passed { "ok" } else { "FAILED" };
                if c.detail.is_empty() {
                    format!("{} {mark}", c.name)
                } else {
                    format!("{} {mark} ({})", c.name, c.detail)
                }
            })
            .collect();
        let gap = !passed && KNOWN_GAPS.contains(&id);
        println!(
            "[{}] criterion {id} {title}: {}; {:.1}s{}",
            if passed { "PASS" } else { "FAIL" },
            parts.join("; "),
            start.elapsed().as_secs_f64(),
            if gap { " [known gap]" } else { "" },
        );
        if !passed && (strict || !KNOWN_GAPS.contains(&id)) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("failing criteria: {unexpected:?}");
        std::process::exit(1);
    }
}
