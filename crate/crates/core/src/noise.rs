//! Per-path randomness: Brownian increments, substitute Gaussians, and the
//! large-jump compound Poisson part (jump times and conditional sizes).
//!
//! Every path draws from its own substreams, addressed by
//! `(master_seed, path_index, tag)`, so adding paths or changing the thread
//! count never perturbs existing draws.

use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::measure::{CompensatorKernel, MeasureError, TimeFactor};
use crate::quad::{bisect_increasing, QuadError};
use crate::scheme::SchemeConfig;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("thinning bound violated: lambda({t}) = {lambda} > lambda_star = {lambda_star}")]
    ThinningBound {
        t: f64,
        lambda: f64,
        lambda_star: f64,
    },
    #[error("thinning bound must be positive and finite, got {0}")]
    BadThinningBound(f64),
    #[error("aggregation factor {factor} must be a power of two dividing the grid size {n}")]
    BadFactor { factor: usize, n: usize },
    #[error("substitute weights have length {got}, grid has {n} steps")]
    WeightLength { got: usize, n: usize },
}

pub type Result<T> = std::result::Result<T, NoiseError>;

/// Independent substreams of one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubstreamTag {
    Brownian = 0,
    Substitute = 1,
    JumpTimes = 2,
    JumpSizes = 3,
    Thinning = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    pub master_seed: u64,
    pub path_index: u64,
    pub tag: SubstreamTag,
}

impl SeedStream {
    pub fn new(master_seed: u64, path_index: u64, tag: SubstreamTag) -> Self {
        SeedStream {
            master_seed,
            path_index,
            tag,
        }
    }

    /// The ChaCha8 stream `8 * path_index + tag` under key `master_seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.path_index.wrapping_mul(8).wrapping_add(self.tag as u64));
        rng
    }
}

/// Algorithm used for the inhomogeneous Poisson jump times.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum JumpTimeSampler {
    #[default]
    TimeChange,
    Thinning { lambda_star: f64 },
}

/// Uniform on `(0, 1]`.
fn open_uniform<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Jump times on `(origin, horizon]` by inverting `s ↦ Lambda^eps(origin, s)`
/// at the arrivals of a unit-rate Poisson process.
pub fn sample_jump_times_timechange<R: Rng>(
    kernel: &CompensatorKernel,
    eps: f64,
    origin: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let total = kernel.cumulative_intensity(eps, origin, horizon)?;
    if total <= 0.0 {
        return Ok(Vec::new());
    }
    let spatial = kernel.spatial_tail(eps)?;
    let mut times = Vec::with_capacity((total * 1.2) as usize + 4);
    let mut arrival: f64 = Exp1.sample(rng);
    let mut prev = origin;
    let mut prev_mass = 0.0;
    while arrival < total {
        let t = match (kernel.time_factor(), spatial) {
            (Some(tf), Some(mass)) => tf.inverse_integral(origin, arrival / mass, horizon)?,
            _ => {
                // Λ(prev, s) = arrival - Λ(origin, prev): bracket from the last time.
                let target = arrival - prev_mass;
                let s = bisect_increasing(
                    |s| {
                        kernel
                            .cumulative_intensity(eps, prev, s)
                            .map_err(|_| QuadError::NonFinite { at: s })
                    },
                    target,
                    prev,
                    horizon,
                    1e-12,
                );
                match s {
                    Ok(s) => s,
                    Err(QuadError::NoBracket { .. }) => horizon,
                    Err(e) => return Err(MeasureError::from(e).into()),
                }
            }
        };
        if kernel.time_factor().is_none() || spatial.is_none() {
            prev_mass = arrival;
            prev = t;
        }
        if t > origin && times.last().is_none_or(|&l| t > l) {
            times.push(t.min(horizon));
        }
        let gap: f64 = Exp1.sample(rng);
        arrival += gap;
    }
    Ok(times)
}

/// Checks `lambda^eps(t) <= lambda_star` on a 1024-point grid of `[origin, horizon]`.
pub fn validate_thinning_bound(
    kernel: &CompensatorKernel,
    eps: f64,
    origin: f64,
    horizon: f64,
    lambda_star: f64,
) -> Result<()> {
    if !(lambda_star > 0.0 && lambda_star.is_finite()) {
        return Err(NoiseError::BadThinningBound(lambda_star));
    }
    const POINTS: usize = 1024;
    for k in 0..POINTS {
        let t = origin + (horizon - origin) * k as f64 / (POINTS - 1) as f64;
        let lambda = kernel.tail_intensity(t, eps)?;
        if lambda.is_nan() || lambda > lambda_star {
            return Err(NoiseError::ThinningBound {
                t,
                lambda,
                lambda_star,
            });
        }
    }
    Ok(())
}

/// Jump times by thinning a rate-`lambda_star` homogeneous process. Proposals
/// come from `proposals`, acceptance uniforms from `accept`.
pub fn sample_jump_times_thinning<R: Rng, S: Rng>(
    kernel: &CompensatorKernel,
    eps: f64,
    origin: f64,
    horizon: f64,
    lambda_star: f64,
    proposals: &mut R,
    accept: &mut S,
) -> Result<Vec<f64>> {
    let mut times = Vec::new();
    let mut t = origin;
    loop {
        let gap: f64 = Exp1.sample(proposals);
        t += gap / lambda_star;
        if t > horizon {
            break;
        }
        let lambda = kernel.tail_intensity(t, eps)?;
        if lambda > lambda_star {
            return Err(NoiseError::ThinningBound {
                t,
                lambda,
                lambda_star,
            });
        }
        if accept.random::<f64>() * lambda_star < lambda {
            times.push(t);
        }
    }
    Ok(times)
}

/// Conditional jump sizes `Q^eps_t(U)`, `U ~ Uniform(0, 1]`, one per time.
pub fn sample_jump_sizes<R: Rng>(
    kernel: &CompensatorKernel,
    eps: f64,
    jump_times: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    // A factorised kernel has a time-independent conditional law.
    let frozen = kernel.is_factorised();
    let mut sizes = Vec::with_capacity(jump_times.len());
    for &t in jump_times {
        let at = if frozen { 0.0 } else { t };
        let z = loop {
            let z = kernel.jump_size_quantile(at, eps, open_uniform(rng))?;
            if z.abs() > eps {
                break z;
            }
        };
        sizes.push(z);
    }
    Ok(sizes)
}

/// All randomness of one path on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    /// `W_{t_i} - W_{t_{i-1}}`; empty when the model has no diffusion.
    pub brownian_increments: Vec<f64>,
    /// Standard normals `xi_i`; empty when no substitute is needed.
    pub substitute_gaussians: Vec<f64>,
    pub jump_times: Vec<f64>,
    pub jump_sizes: Vec<f64>,
    /// Grid step `i` (1-based) containing each jump, `t in (t_{i-1}, t_i]`.
    pub jump_steps: Vec<u32>,
    /// Relative small-jump variances of the grid steps, used to merge
    /// substitute Gaussians consistently when the grid is coarsened.
    pub substitute_weights: Option<Arc<[f64]>>,
    pub eps: f64,
    pub seed: u64,
    pub path_index: u64,
    pub grid_n: usize,
    pub origin: f64,
    pub horizon: f64,
}

impl NoiseRealization {
    /// Jumps falling in step `i` as `(time, size)` index range.
    pub fn jumps_in_step(&self, i: usize) -> std::ops::Range<usize> {
        let lo = self.jump_steps.partition_point(|&s| (s as usize) < i);
        let hi = self.jump_steps.partition_point(|&s| (s as usize) <= i);
        lo..hi
    }

    /// Writes a `kind,index,time,value` CSV dump.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "kind,index,time,value")?;
        let h = (self.horizon - self.origin) / self.grid_n as f64;
        for (i, v) in self.brownian_increments.iter().enumerate() {
            let t = self.origin + (i + 1) as f64 * h;
            writeln!(w, "brownian,{},{:.16e},{:.16e}", i + 1, t, v)?;
        }
        for (i, v) in self.substitute_gaussians.iter().enumerate() {
            let t = self.origin + (i + 1) as f64 * h;
            writeln!(w, "substitute,{},{:.16e},{:.16e}", i + 1, t, v)?;
        }
        for (j, (t, z)) in self.jump_times.iter().zip(&self.jump_sizes).enumerate() {
            writeln!(w, "jump,{},{:.16e},{:.16e}", j + 1, t, z)?;
        }
        Ok(())
    }
}

fn step_of(t: f64, origin: f64, h: f64, n: usize) -> u32 {
    let k = ((t - origin) / h).ceil();
    k.clamp(1.0, n as f64) as u32
}

/// Reusable generator for one `(kernel, grid, eps)` combination.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    kernel: CompensatorKernel,
    n: usize,
    eps: f64,
    origin: f64,
    horizon: f64,
    sampler: JumpTimeSampler,
    brownian: bool,
    substitute: bool,
    weights: Option<Arc<[f64]>>,
}

impl NoiseGenerator {
    pub fn new(kernel: &CompensatorKernel, config: &SchemeConfig) -> Result<Self> {
        if config.eps > 0.0 || kernel.is_finite_activity() {
            kernel.tail_intensity(config.origin, config.eps)?;
        }
        Ok(NoiseGenerator {
            kernel: kernel.clone(),
            n: config.n,
            eps: config.eps,
            origin: config.origin,
            horizon: config.horizon,
            sampler: JumpTimeSampler::TimeChange,
            brownian: true,
            substitute: true,
            weights: None,
        })
    }

    pub fn with_sampler(mut self, sampler: JumpTimeSampler) -> Result<Self> {
        if let JumpTimeSampler::Thinning { lambda_star } = sampler {
            validate_thinning_bound(&self.kernel, self.eps, self.origin, self.horizon, lambda_star)?;
        }
        self.sampler = sampler;
        Ok(self)
    }

    /// Skips Brownian draws (models without diffusion).
    pub fn with_brownian(mut self, on: bool) -> Self {
        self.brownian = on;
        self
    }

    /// Skips substitute draws (schemes that neglect small jumps).
    pub fn with_substitute(mut self, on: bool) -> Self {
        self.substitute = on;
        self
    }

    pub fn with_weights(mut self, weights: Arc<[f64]>) -> Result<Self> {
        if weights.len() != self.n {
            return Err(NoiseError::WeightLength {
                got: weights.len(),
                n: self.n,
            });
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn grid_n(&self) -> usize {
        self.n
    }

    pub fn generate(&self, master_seed: u64, path_index: u64) -> Result<NoiseRealization> {
        let stream = |tag| SeedStream::new(master_seed, path_index, tag).rng();
        let h = (self.horizon - self.origin) / self.n as f64;

        let brownian_increments = if self.brownian {
            let sd = h.sqrt();
            let mut rng = stream(SubstreamTag::Brownian);
            (0..self.n)
                .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let substitute_gaussians = if self.substitute {
            let mut rng = stream(SubstreamTag::Substitute);
            (0..self.n)
                .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        } else {
            Vec::new()
        };

        let no_jumps = self.eps > 0.0 && self.kernel.spatial_tail(self.eps)? == Some(0.0);
        let jump_times = if no_jumps {
            Vec::new()
        } else {
            match self.sampler {
                JumpTimeSampler::TimeChange => sample_jump_times_timechange(
                    &self.kernel,
                    self.eps,
                    self.origin,
                    self.horizon,
                    &mut stream(SubstreamTag::JumpTimes),
                )?,
                JumpTimeSampler::Thinning { lambda_star } => sample_jump_times_thinning(
                    &self.kernel,
                    self.eps,
                    self.origin,
                    self.horizon,
                    lambda_star,
                    &mut stream(SubstreamTag::JumpTimes),
                    &mut stream(SubstreamTag::Thinning),
                )?,
            }
        };
        let jump_sizes = sample_jump_sizes(
            &self.kernel,
            self.eps,
            &jump_times,
            &mut stream(SubstreamTag::JumpSizes),
        )?;
        let jump_steps = jump_times
            .iter()
            .map(|&t| step_of(t, self.origin, h, self.n))
            .collect();

        Ok(NoiseRealization {
            brownian_increments,
            substitute_gaussians,
            jump_times,
            jump_sizes,
            jump_steps,
            substitute_weights: self.weights.clone(),
            eps: self.eps,
            seed: master_seed,
            path_index,
            grid_n: self.n,
            origin: self.origin,
            horizon: self.horizon,
        })
    }
}

/// One-shot generation for `(master_seed, path_index)`.
pub fn generate_noise(
    kernel: &CompensatorKernel,
    config: &SchemeConfig,
    master_seed: u64,
    path_index: u64,
) -> Result<NoiseRealization> {
    NoiseGenerator::new(kernel, config)?.generate(master_seed, path_index)
}

/// Merges blocks of `m` consecutive steps. Brownian increments are summed;
/// substitute Gaussians are combined as `Σ √w ξ / √Σ w` with the stored
/// weights (equal weights when none are stored), which is again standard
/// normal and reproduces the fine substitute sum exactly when the coarse
/// variance is the block sum of the fine variances.
pub fn aggregate_to_coarser_grid(noise: &NoiseRealization, m: usize) -> Result<NoiseRealization> {
    let n = noise.grid_n;
    if m == 0 || !m.is_power_of_two() || !n.is_multiple_of(m) {
        return Err(NoiseError::BadFactor { factor: m, n });
    }
    if m == 1 {
        return Ok(noise.clone());
    }
    let coarse_n = n / m;
    let brownian_increments = noise
        .brownian_increments
        .chunks(m)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    let substitute_gaussians = match &noise.substitute_weights {
        _ if noise.substitute_gaussians.is_empty() => Vec::new(),
        Some(w) => noise
            .substitute_gaussians
            .chunks(m)
            .zip(w.chunks(m))
            .map(|(xi, w)| merge_weighted(xi, w))
            .collect(),
        None => noise
            .substitute_gaussians
            .chunks(m)
            .map(|xi| xi.iter().sum::<f64>() / (m as f64).sqrt())
            .collect(),
    };
    let substitute_weights = noise
        .substitute_weights
        .as_ref()
        .map(|w| w.chunks(m).map(|c| c.iter().sum()).collect::<Vec<f64>>().into());
    let jump_steps = noise
        .jump_steps
        .iter()
        .map(|&s| (s as usize).div_ceil(m) as u32)
        .collect();
    Ok(NoiseRealization {
        brownian_increments,
        substitute_gaussians,
        jump_times: noise.jump_times.clone(),
        jump_sizes: noise.jump_sizes.clone(),
        jump_steps,
        substitute_weights,
        grid_n: coarse_n,
        ..noise.clone_header()
    })
}

fn merge_weighted(xi: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        xi.iter().zip(w).map(|(x, w)| w.sqrt() * x).sum::<f64>() / total.sqrt()
    } else {
        xi.iter().sum::<f64>() / (xi.len() as f64).sqrt()
    }
}

impl NoiseRealization {
    fn clone_header(&self) -> NoiseRealization {
        NoiseRealization {
            brownian_increments: Vec::new(),
            substitute_gaussians: Vec::new(),
            jump_times: Vec::new(),
            jump_sizes: Vec::new(),
            jump_steps: Vec::new(),
            substitute_weights: None,
            ..*self
        }
    }
}

/// Per-step time masses `∫_{t_{i-1}}^{t_i} phi` of a factorised kernel.
pub fn time_masses(tf: &TimeFactor, origin: f64, horizon: f64, n: usize) -> Result<Vec<f64>> {
    let h = (horizon - origin) / n as f64;
    (1..=n)
        .map(|i| {
            let (t0, t1) = (origin + (i - 1) as f64 * h, origin + i as f64 * h);
            Ok(tf.integral(t0, t1.min(horizon))?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::Variant;
    use crate::stats::Moments;

    fn config(n: usize, eps: f64) -> SchemeConfig {
        SchemeConfig::new(n, eps, 1.0, Variant::WithSubstitute).unwrap()
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = SeedStream::new(7, 3, SubstreamTag::Brownian).rng().random::<u64>();
        let b = SeedStream::new(7, 3, SubstreamTag::Brownian).rng().random::<u64>();
        let c = SeedStream::new(7, 3, SubstreamTag::Substitute).rng().random::<u64>();
        let d = SeedStream::new(7, 4, SubstreamTag::Brownian).rng().random::<u64>();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn empty_tail_gives_no_jumps() {
        let k = CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap();
        let noise = generate_noise(&k, &config(4, 1.0), 1, 0).unwrap();
        assert_eq!(noise.brownian_increments.len(), 4);
        assert_eq!(noise.substitute_gaussians.len(), 4);
        assert!(noise.jump_times.is_empty() && noise.jump_sizes.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let k = CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.75).unwrap();
        let a = generate_noise(&k, &config(64, 0.05), 11, 5).unwrap();
        let b = generate_noise(&k, &config(64, 0.05), 11, 5).unwrap();
        assert_eq!(a, b);
        assert!(!a.jump_times.is_empty());
        assert!(a.jump_times.windows(2).all(|w| w[0] < w[1]));
        assert!(a.jump_sizes.iter().all(|z| z.abs() > 0.05));
    }

    #[test]
    fn timechange_count_matches_cumulative_intensity() {
        let k = CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.75).unwrap();
        let eps = 1.0;
        let mean = k.cumulative_intensity(eps, 0.0, 1.0).unwrap();
        let m: Moments = (0..20_000u64)
            .map(|i| {
                let mut rng = SeedStream::new(3, i, SubstreamTag::JumpTimes).rng();
                sample_jump_times_timechange(&k, eps, 0.0, 1.0, &mut rng)
                    .unwrap()
                    .len() as f64
            })
            .collect();
        assert!((m.mean - mean).abs() < 3.0 * m.std_error(), "{} vs {mean}", m.mean);
    }

    #[test]
    fn thinning_rejects_bad_bound() {
        let k = CompensatorKernel::truncated_stable_preset(1.0, 1.0).unwrap();
        assert!(validate_thinning_bound(&k, 0.5, 0.0, 1.0, 1.9).is_err());
        assert!(validate_thinning_bound(&k, 0.5, 0.0, 1.0, 2.0).is_ok());
        let s = CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.5).unwrap();
        assert!(validate_thinning_bound(&s, 0.5, 0.0, 1.0, 1e6).is_err());
    }

    #[test]
    fn thinning_at_the_bound_accepts_everything() {
        let k = CompensatorKernel::truncated_stable_preset(1.0, 1.0).unwrap();
        let mut p1 = SeedStream::new(1, 0, SubstreamTag::JumpTimes).rng();
        let mut p2 = SeedStream::new(1, 0, SubstreamTag::JumpTimes).rng();
        let mut acc = SeedStream::new(1, 0, SubstreamTag::Thinning).rng();
        let thin = sample_jump_times_thinning(&k, 0.5, 0.0, 5.0, 2.0, &mut p1, &mut acc).unwrap();
        let mut t = 0.0;
        let mut direct = Vec::new();
        loop {
            let g: f64 = Exp1.sample(&mut p2);
            t += g / 2.0;
            if t > 5.0 {
                break;
            }
            direct.push(t);
        }
        assert_eq!(thin, direct);
    }

    #[test]
    fn sizes_use_the_quantile() {
        let k = CompensatorKernel::truncated_stable_preset(1.0, 1.0).unwrap();
        assert!((k.jump_size_quantile(0.3, 0.5, 0.75).unwrap() - 2.0 / 3.0).abs() < 1e-14);
        let mut rng = SeedStream::new(9, 0, SubstreamTag::JumpSizes).rng();
        let z = sample_jump_sizes(&k, 0.5, &vec![0.5; 10_000], &mut rng).unwrap();
        assert!(z.iter().all(|v| v.abs() > 0.5 && v.abs() <= 1.0));
        let m: Moments = z.iter().copied().collect();
        assert!(m.mean.abs() < 3.0 * m.std_error());
    }

    #[test]
    fn aggregation_identities() {
        let k = CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap();
        let noise = generate_noise(&k, &config(16, 0.1), 2, 0).unwrap();
        assert_eq!(aggregate_to_coarser_grid(&noise, 1).unwrap(), noise);
        let one = aggregate_to_coarser_grid(&noise, 16).unwrap();
        let w_t: f64 = noise.brownian_increments.iter().sum();
        assert_eq!(one.brownian_increments, vec![w_t]);
        assert!(one.jump_steps.iter().all(|&s| s == 1));
        assert!(aggregate_to_coarser_grid(&noise, 3).is_err());
        assert!(aggregate_to_coarser_grid(&noise, 32).is_err());
    }

    #[test]
    fn weighted_merge_reproduces_fine_sum() {
        let w = [0.5f64, 0.0, 2.0, 1.5];
        let xi = [0.3, -1.2, 0.7, 2.0];
        let fine: f64 = w.iter().zip(&xi).map(|(w, x)| w.sqrt() * x).sum();
        let total: f64 = w.iter().sum();
        assert!((total.sqrt() * merge_weighted(&xi, &w) - fine).abs() < 1e-14);
        assert_eq!(merge_weighted(&[1.0, 1.0], &[0.0, 0.0]), 2.0 / 2f64.sqrt());
    }

    #[test]
    fn jump_steps_match_grid() {
        let k = CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap();
        let noise = generate_noise(&k, &config(32, 0.01), 4, 1).unwrap();
        let h = 1.0 / 32.0;
        for (t, &s) in noise.jump_times.iter().zip(&noise.jump_steps) {
            assert!(*t > (s - 1) as f64 * h - 1e-15 && *t <= s as f64 * h + 1e-15);
        }
        let total: usize = (1..=32).map(|i| noise.jumps_in_step(i).len()).sum();
        assert_eq!(total, noise.jump_times.len());
    }
}
