//! Distributional checks on the noise generators: each sampler is compared
//! with an independent description of the law it should produce.

use std::sync::Arc;

use epsem::harness::{run_strong_error, EpsRule, StrongErrorPlan};
use epsem::measure::{CompensatorKernel, TimeFactor, TruncatedStableSpec};
use epsem::model::presets::{low_integrability, strong_p_sweep};
use epsem::noise::{
    generate_noise, sample_jump_sizes, sample_jump_times_thinning, sample_jump_times_timechange,
    SeedStream, SubstreamTag,
};
use epsem::par::ExecMode;
use epsem::scheme::{Scheme, SchemeConfig, Variant};
use epsem::stats::{ks_two_sample, poisson_gof_pvalue};

const SEEDS: u64 = 10_000;
const ALPHA: f64 = 0.01;

/// Asymptotic one-sample KS p-value, Stephens' small-sample correction.
fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..100 {
        let k = k as f64;
        p += 2.0 * if k as i64 % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

fn timechange(k: &CompensatorKernel, eps: f64, seed: u64) -> Vec<Vec<f64>> {
    timechange_n(k, eps, seed, SEEDS)
}

fn timechange_n(k: &CompensatorKernel, eps: f64, seed: u64, seeds: u64) -> Vec<Vec<f64>> {
    (0..seeds)
        .map(|i| {
            let mut rng = SeedStream::new(seed, i, SubstreamTag::JumpTimes).rng();
            sample_jump_times_timechange(k, eps, 0.0, 1.0, &mut rng).unwrap()
        })
        .collect()
}

fn thinning(k: &CompensatorKernel, eps: f64, lambda_star: f64, seed: u64, seeds: u64) -> Vec<Vec<f64>> {
    (0..seeds)
        .map(|i| {
            let mut prop = SeedStream::new(seed, i, SubstreamTag::JumpTimes).rng();
            let mut acc = SeedStream::new(seed, i, SubstreamTag::Thinning).rng();
            sample_jump_times_thinning(k, eps, 0.0, 1.0, lambda_star, &mut prop, &mut acc).unwrap()
        })
        .collect()
}

fn counts(paths: &[Vec<f64>]) -> Vec<f64> {
    paths.iter().map(|p| p.len() as f64).collect()
}

fn first_arrivals(paths: &[Vec<f64>]) -> Vec<f64> {
    paths.iter().map(|p| p.first().copied().unwrap_or(2.0)).collect()
}

fn check_samplers_agree(k: &CompensatorKernel, eps: f64, lambda_star: f64, seeds: u64) {
    let a = timechange_n(k, eps, 11, seeds);
    let b = thinning(k, eps, lambda_star, 12, seeds);
    let (d, p) = ks_two_sample(&counts(&a), &counts(&b));
    println!("{}: counts D={d:.4} p={p:.4}", k.name());
    assert!(p > ALPHA, "counts differ: D={d} p={p}");
    let (d, p) = ks_two_sample(&first_arrivals(&a), &first_arrivals(&b));
    println!("{}: first arrival D={d:.4} p={p:.4}", k.name());
    assert!(p > ALPHA, "first arrivals differ: D={d} p={p}");
}

#[test]
fn samplers_agree_on_capped_power_kernel() {
    let k = CompensatorKernel::fiber_kernel(1.5, 8.0, 8.0, 0.2, 1.5).unwrap();
    let eps = 0.5;
    let lambda_star = k.tail_intensity(1.0, eps).unwrap();
    check_samplers_agree(&k, eps, lambda_star, SEEDS);
}

#[test]
fn samplers_agree_on_custom_time_factor() {
    // No closed-form inverse: every arrival is a bisection over a
    // numerical time integral, so fewer seeds.
    let k = TruncatedStableSpec {
        kappa: Some(TimeFactor::Custom(Arc::new(|t: f64| 1.0 + (6.0 * t).sin().powi(2)))),
        ..TruncatedStableSpec::new(0.5, 1.0)
    }
    .build()
    .unwrap();
    let eps = 0.1;
    let lambda_star = 2.0 * k.tail_intensity(0.0, eps).unwrap();
    check_samplers_agree(&k, eps, lambda_star, 1000);
}

#[test]
fn jump_counts_are_poisson() {
    for (k, eps) in [
        (CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.75).unwrap(), 2.0),
        (CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap(), 0.05),
        (CompensatorKernel::fiber_kernel(0.5, 0.0, 7.0, 0.034, 1.125).unwrap(), 0.2),
    ] {
        let mean = k.cumulative_intensity(eps, 0.0, 1.0).unwrap();
        let n: Vec<u64> = timechange(&k, eps, 21).iter().map(|p| p.len() as u64).collect();
        let p = poisson_gof_pvalue(&n, mean);
        println!("{}: mean {mean:.3} chi-square p={p:.4}", k.name());
        assert!(p > ALPHA, "{}: p={p}", k.name());
    }
}

#[test]
fn jump_times_follow_power_time_factor() {
    // Given their number, the jump times are i.i.d. with density
    // proportional to t^rho, so F(t) = t^{rho+1}.
    let rho = -0.75;
    let k = CompensatorKernel::time_modulated_stable(0.5, 10.0, rho).unwrap();
    let times: Vec<f64> = timechange(&k, 1.0, 31).into_iter().take(2000).flatten().collect();
    assert!(times.len() > 5000);
    let p = ks_one_sample(&times, |t| t.clamp(0.0, 1.0).powf(rho + 1.0));
    println!("power time factor: {} times, p={p:.4}", times.len());
    assert!(p > ALPHA, "p={p}");
}

#[test]
fn jump_sizes_follow_conditional_law() {
    // Closed-form tail of |z|^{-1-alpha} on [-b, b] above eps.
    let (alpha, b, eps) = (0.5f64, 1.0f64, 0.05f64);
    let k = CompensatorKernel::truncated_stable_preset(alpha, b).unwrap();
    let mut rng = SeedStream::new(41, 0, SubstreamTag::JumpSizes).rng();
    let z = sample_jump_sizes(&k, eps, &vec![0.5; SEEDS as usize], &mut rng).unwrap();
    let side = eps.powf(-alpha) - b.powf(-alpha);
    let cdf = |x: f64| {
        if x < 0.0 {
            ((-x).powf(-alpha) - b.powf(-alpha)) / (2.0 * side)
        } else {
            0.5 + (eps.powf(-alpha) - x.powf(-alpha)) / (2.0 * side)
        }
    };
    let p = ks_one_sample(&z, cdf);
    println!("symmetric sizes: p={p:.4}");
    assert!(p > ALPHA, "p={p}");

    let k = CompensatorKernel::fiber_kernel(0.5, 0.0, 7.0, 0.034, 1.125).unwrap();
    let times: Vec<f64> = (0..SEEDS).map(|i| i as f64 / SEEDS as f64).collect();
    let z = sample_jump_sizes(&k, 0.2, &times, &mut rng).unwrap();
    let p = ks_one_sample(&z, |x| (0.2f64.powf(-0.5) - x.powf(-0.5)) / (0.2f64.powf(-0.5) - 7f64.powf(-0.5)));
    println!("one-sided sizes: p={p:.4}");
    assert!(p > ALPHA, "p={p}");
}

#[test]
fn noise_is_reproducible_and_order_independent() {
    let k = CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.5).unwrap();
    let cfg = SchemeConfig::new(128, 0.01, 1.0, Variant::WithSubstitute).unwrap();
    let forward: Vec<_> = (0..50).map(|i| generate_noise(&k, &cfg, 9, i).unwrap()).collect();
    let backward: Vec<_> = (0..50).rev().map(|i| generate_noise(&k, &cfg, 9, i).unwrap()).collect();
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
    }
    assert_ne!(forward[0], forward[1]);
}

#[test]
fn replaying_noise_reproduces_the_path() {
    let m = low_integrability(-0.5).unwrap();
    let cfg = SchemeConfig::new(256, 1.0 / 256.0, 1.0, Variant::WithSubstitute).unwrap();
    let scheme = Scheme::new(&m, cfg).unwrap();
    let gen = scheme.noise_generator().unwrap();
    let noise = gen.generate(3, 17).unwrap();
    let a = scheme.simulate_path(&noise).unwrap();
    let b = scheme.simulate_path(&gen.generate(3, 17).unwrap()).unwrap();
    assert_eq!(a.grid_values, b.grid_values);
}

#[test]
fn error_reports_are_deterministic_across_modes() {
    let m = strong_p_sweep().unwrap();
    let plan = |mode| StrongErrorPlan {
        p_norms: vec![2, 4],
        n_grid: vec![16, 32, 64],
        n_max: 256,
        eps_rule: EpsRule::HalfPlusInvP,
        mc_paths: 2500,
        seed: 5,
        mode,
    };
    let bytes = |mode| {
        serde_json::to_string(&run_strong_error(&m, &plan(mode)).unwrap()).unwrap()
    };
    let seq = bytes(ExecMode::Sequential);
    assert_eq!(seq, bytes(ExecMode::Sequential));
    assert_eq!(seq, bytes(ExecMode::Parallel));
}
