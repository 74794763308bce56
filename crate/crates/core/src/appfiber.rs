//! Angular dynamics of a rigid fibre in 2D turbulence, driven by a
//! time-inhomogeneous truncated stable noise `L` with
//! `nu_s(dz) ds = (s ∧ T*)^{q-1} |z|^{-1-alpha} 1_{-z_- <= z <= z_+} dz ds`.
//!
//! The cumulative angle solves
//! `θ_t = θ_0 + ∫ (a(θ) + ¼ (b²)''(θ)) ds + ∫ b(θ⁻) dL_s`
//! with `a(θ) = (σ/2)(cos 2θ - 1)` and
//! `b² = γ₀ + γ₁ sin 2θ + γ₂ sin 4θ + γ₃ cos 2θ + γ₄ cos 4θ`.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::harness::{check_exclusions, HarnessError};
use crate::measure::{CompensatorKernel, MeasureError, Region};
use crate::model::{coef, real_fn, JumpSizeMap, JumpStructure, ModelError, RateHypotheses, SdeModel};
use crate::noise::NoiseError;
use crate::par::{try_map_chunks, ExecMode};
use crate::quad::{QuadError, Quadrature};
use crate::scheme::{Scheme, SchemeConfig, SchemeError, Variant};
use crate::stats::{ols, skew_kurtosis, Moments, Z95};

pub const HIST_BINS: usize = 401;
pub const HIST_RANGE: f64 = 10.0;
pub const MIN_PDF_PATHS: u64 = 10_000;
const POSITIVITY_GRID: usize = 10_000;

#[derive(Debug, Error)]
pub enum FiberError {
    #[error("invalid fibre parameters: {0}")]
    InvalidParameters(String),
    #[error("diffusion polynomial is negative at theta = {theta}: {value}")]
    NegativeDiffusion { theta: f64, value: f64 },
    #[error("snapshot t = {0} is not a time of the simulation grid")]
    OffGrid(f64),
    #[error("renormalised angle has zero variance at t = {0}")]
    ZeroVariance(f64),
    #[error("need at least {MIN_PDF_PATHS} paths, got {0}")]
    TooFewPaths(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

pub type Result<T> = std::result::Result<T, FiberError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiberParams {
    pub sigma: f64,
    pub gammas: [f64; 5],
    pub alpha: f64,
    pub z_minus: f64,
    pub z_plus: f64,
    pub t_star: f64,
    pub q: f64,
    pub theta0: f64,
    pub horizon: f64,
    /// When false the jump noise is switched off and only the Brownian part remains.
    pub jumps: bool,
}

impl FiberParams {
    /// No shear: `α = 3/2`, `z_- = z_+ = 8`, `T* = 0.2`, `q = 3/2`, constant diffusion.
    pub fn isotropic() -> Self {
        Self {
            sigma: 0.0,
            gammas: [0.5, 0.0, 0.0, 0.0, 0.0],
            alpha: 1.5,
            z_minus: 8.0,
            z_plus: 8.0,
            t_star: 0.2,
            q: 1.5,
            theta0: 0.0,
            horizon: 1.0,
            jumps: true,
        }
    }

    /// Strong shear `σ = 2.8`: `α = 1/2`, one-sided jumps up to 7, `T* = 0.034`, `q = 9/8`.
    pub fn strong_shear() -> Self {
        Self {
            sigma: 2.8,
            gammas: [1.0, 0.3, -0.1, 0.2, 0.05],
            alpha: 0.5,
            z_minus: 0.0,
            z_plus: 7.0,
            t_star: 0.034,
            q: 1.125,
            theta0: 0.0,
            horizon: 1.0,
            jumps: true,
        }
    }

    /// Brownian control `dθ = √γ₀ dW`.
    pub fn gaussian_control(gamma0: f64) -> Self {
        Self {
            gammas: [gamma0, 0.0, 0.0, 0.0, 0.0],
            jumps: false,
            ..Self::isotropic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma, self.alpha, self.z_minus, self.z_plus, self.t_star, self.q]
            .iter()
            .chain(self.gammas.iter())
            .all(|v| v.is_finite());
        if !finite || !self.theta0.is_finite() {
            return Err(FiberError::InvalidParameters("non-finite parameter".into()));
        }
        let bad = |msg: String| Err(FiberError::InvalidParameters(msg));
        if self.sigma < 0.0 {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return bad(format!("alpha must lie in (0, 2), got {}", self.alpha));
        }
        if self.z_minus < 0.0 || self.z_plus < 0.0 || self.z_minus.max(self.z_plus) == 0.0 {
            return bad(format!(
                "jump bounds must be >= 0 and not both zero, got ({}, {})",
                self.z_minus, self.z_plus
            ));
        }
        if self.t_star <= 0.0 {
            return bad(format!("T* must be positive, got {}", self.t_star));
        }
        if self.q <= 1.0 {
            return bad(format!("q must exceed 1, got {}", self.q));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        for k in 0..POSITIVITY_GRID {
            let theta = std::f64::consts::PI * k as f64 / POSITIVITY_GRID as f64;
            let value = diffusion_sq(&self.gammas, theta);
            if value < 0.0 {
                return Err(FiberError::NegativeDiffusion { theta, value });
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<CompensatorKernel> {
        if !self.jumps {
            return Ok(CompensatorKernel::zero());
        }
        Ok(CompensatorKernel::fiber_kernel(
            self.alpha,
            self.z_minus,
            self.z_plus,
            self.t_star,
            self.q,
        )?)
    }
}

/// `a(θ) = (σ/2)(cos 2θ - 1)`.
pub fn shear_drift(sigma: f64, theta: f64) -> f64 {
    0.5 * sigma * ((2.0 * theta).cos() - 1.0)
}

/// `b²(θ)`.
pub fn diffusion_sq(g: &[f64; 5], theta: f64) -> f64 {
    let (s2, c2) = (2.0 * theta).sin_cos();
    let (s4, c4) = (4.0 * theta).sin_cos();
    g[0] + g[1] * s2 + g[2] * s4 + g[3] * c2 + g[4] * c4
}

/// `(b²)''(θ)`.
pub fn diffusion_sq_second(g: &[f64; 5], theta: f64) -> f64 {
    let (s2, c2) = (2.0 * theta).sin_cos();
    let (s4, c4) = (4.0 * theta).sin_cos();
    -4.0 * g[1] * s2 - 16.0 * g[2] * s4 - 4.0 * g[3] * c2 - 16.0 * g[4] * c4
}

pub fn build_fiber_model(params: &FiberParams) -> Result<SdeModel> {
    params.validate()?;
    let FiberParams { sigma, gammas, .. } = *params;
    let b = move |theta: f64| diffusion_sq(&gammas, theta).max(0.0).sqrt();
    let b_max = gammas.iter().map(|g| g.abs()).sum::<f64>().sqrt();
    let jump = if params.jumps {
        JumpStructure::Multiplicative {
            cbar: real_fn(b),
            f: JumpSizeMap::Identity,
        }
    } else {
        JumpStructure::None
    };
    let meta = RateHypotheses::new(1.0, 1.0, 2)?.with_sublinear(b_max.max(f64::MIN_POSITIVE));
    let model = SdeModel::new(
        format!(
            "fiber{{sigma={sigma},alpha={},Tstar={},q={}}}",
            params.alpha, params.t_star, params.q
        ),
        coef(move |_, theta| shear_drift(sigma, theta) + 0.25 * diffusion_sq_second(&gammas, theta)),
        Some(coef(move |_, theta| b(theta))),
        jump,
        params.kernel()?,
        params.theta0,
        params.horizon,
        meta,
    )?;
    Ok(model.with_density_coupling(true))
}

/// The driving noise on its own: `dX = dL`, `X_0 = 0`.
pub fn build_noise_model(params: &FiberParams) -> Result<SdeModel> {
    params.validate()?;
    let meta = RateHypotheses::new(1.0, 1.0, 2)?.with_sublinear(1.0);
    Ok(SdeModel::new(
        "fiber_noise",
        coef(|_, _| 0.0),
        None,
        JumpStructure::Multiplicative {
            cbar: real_fn(|_| 1.0),
            f: JumpSizeMap::Identity,
        },
        params.kernel()?,
        0.0,
        params.horizon,
        meta,
    )?
    .with_density_coupling(true))
}

/// `Var(L_t) = ∫_0^t κ(s) ds · ∫ z² g(z) dz`, both factors by quadrature.
pub fn noise_variance_curve(params: &FiberParams, t_grid: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    if !params.jumps {
        return Ok(vec![0.0; t_grid.len()]);
    }
    let kernel = params.kernel()?;
    let moment = kernel
        .integrate_spatial(0.0, Region::Outside, |z| z * z)?
        .ok_or_else(|| FiberError::InvalidParameters("fibre kernel must factorise".into()))?;
    let kappa = |s: f64| s.min(params.t_star).powf(params.q - 1.0);
    let quad = Quadrature::default();
    t_grid
        .iter()
        .map(|&t| {
            if !(t >= 0.0 && t <= params.horizon) {
                return Err(FiberError::InvalidParameters(format!(
                    "t = {t} lies outside [0, {}]",
                    params.horizon
                )));
            }
            let knots = [0.0, t.min(params.t_star), t];
            Ok(quad.integrate_pieces(kappa, &knots)? * moment)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiberSnapshot {
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    /// 95% CLT half-width of `variance`.
    pub variance_hw: f64,
    pub skewness: f64,
    /// 95% batch-means half-width of `skewness`.
    pub skewness_hw: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_hw: f64,
    /// Samples falling outside the histogram range.
    pub outside: u64,
    #[serde(skip)]
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiberPdfReport {
    pub params: FiberParams,
    pub n: usize,
    pub eps: f64,
    pub paths: u64,
    pub excluded_paths: u64,
    pub bin_centers: Vec<f64>,
    pub snapshots: Vec<FiberSnapshot>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl FiberPdfReport {
    /// Local growth exponent of `Var(δθ_t)` over snapshots in `[t0, t1]`.
    pub fn variance_exponent(&self, t0: f64, t1: f64) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .snapshots
            .iter()
            .filter(|s| s.t >= t0 && s.t <= t1 && s.t > 0.0 && s.variance > 0.0)
            .map(|s| (s.t.ln(), s.variance.ln()))
            .unzip();
        ols(&x, &y).map(|f| f.slope)
    }

    pub fn snapshot(&self, t: f64) -> Option<&FiberSnapshot> {
        self.snapshots.iter().find(|s| (s.t - t).abs() < 1e-12)
    }
}

pub fn bin_centers() -> Vec<f64> {
    let w = 2.0 * HIST_RANGE / HIST_BINS as f64;
    (0..HIST_BINS)
        .map(|k| -HIST_RANGE + (k as f64 + 0.5) * w)
        .collect()
}

fn grid_indices(cfg: &SchemeConfig, times: &[f64]) -> Result<Vec<usize>> {
    let h = cfg.step_size();
    times
        .iter()
        .map(|&t| {
            let i = ((t - cfg.origin) / h).round();
            if i < 0.0 || i > cfg.n as f64 || (cfg.grid_time(i as usize) - t).abs() > 1e-9 * h.max(1.0) {
                Err(FiberError::OffGrid(t))
            } else {
                Ok(i as usize)
            }
        })
        .collect()
}

/// Increments `X_t - X_0` at the snapshot times, one vector per time, in path order.
/// Each inner vector is split into per-chunk batches.
fn snapshot_samples(
    model: &SdeModel,
    cfg: SchemeConfig,
    paths: u64,
    seed: u64,
    times: &[f64],
    mode: ExecMode,
) -> Result<(Vec<Vec<Vec<f64>>>, u64)> {
    let idx = grid_indices(&cfg, times)?;
    let scheme = Scheme::new(model, cfg)?;
    let generator = scheme.noise_generator()?;
    let x0 = model.x0();
    let partials = try_map_chunks(paths, mode, |range| -> Result<(Vec<Vec<f64>>, u64)> {
        let mut out = vec![Vec::with_capacity(range.end as usize - range.start as usize); idx.len()];
        let mut values = Vec::new();
        let mut excluded = 0;
        for path in range {
            let noise = generator.generate(seed, path)?;
            if !scheme.simulate_into(&noise, &mut values)? {
                excluded += 1;
                continue;
            }
            for (o, &i) in out.iter_mut().zip(&idx) {
                o.push(values[i] - x0);
            }
        }
        Ok((out, excluded))
    })?;
    let excluded = partials.iter().map(|p| p.1).sum();
    check_exclusions(excluded, paths)?;
    let mut by_time = vec![Vec::with_capacity(partials.len()); idx.len()];
    for (batch, _) in partials {
        for (dst, src) in by_time.iter_mut().zip(batch) {
            dst.push(src);
        }
    }
    Ok((by_time, excluded))
}

fn central_moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in xs {
        let d2 = (x - mean).powi(2);
        m2 += d2;
        m4 += d2 * d2;
    }
    (mean, m2 / n, m4 / n)
}

fn batch_half_width(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    Z95 * values.iter().copied().collect::<Moments>().std_error()
}

fn summarise(t: f64, batches: &[Vec<f64>]) -> Result<FiberSnapshot> {
    let all: Vec<f64> = batches.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let (mean, m2, m4) = central_moments(&all);
    let variance = m2 * n / (n - 1.0);
    if variance.is_nan() || variance <= 0.0 {
        return Err(FiberError::ZeroVariance(t));
    }
    let sd = variance.sqrt();
    let (skewness, excess_kurtosis) = skew_kurtosis(&all);
    let per_batch: Vec<(f64, f64)> = batches
        .iter()
        .filter(|b| b.len() >= 8)
        .map(|b| skew_kurtosis(b))
        .collect();
    let skew_b: Vec<f64> = per_batch.iter().map(|p| p.0).collect();
    let kurt_b: Vec<f64> = per_batch.iter().map(|p| p.1).collect();

    let w = 2.0 * HIST_RANGE / HIST_BINS as f64;
    let mut counts = vec![0u64; HIST_BINS];
    let mut outside = 0;
    for &x in &all {
        let y = x / sd;
        let k = ((y + HIST_RANGE) / w).floor();
        if k >= 0.0 && k < HIST_BINS as f64 {
            counts[k as usize] += 1;
        } else {
            outside += 1;
        }
    }
    Ok(FiberSnapshot {
        t,
        mean,
        variance,
        variance_hw: Z95 * ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        skewness,
        skewness_hw: batch_half_width(&skew_b),
        excess_kurtosis,
        kurtosis_hw: batch_half_width(&kurt_b),
        outside,
        density: counts.iter().map(|&c| c as f64 / (n * w)).collect(),
    })
}

/// Histograms of `δθ_t / sd(δθ_t)` at each snapshot time, plus moments.
pub fn run_fiber_pdf(
    params: &FiberParams,
    cfg: SchemeConfig,
    mc_paths: u64,
    snapshots: &[f64],
    seed: u64,
    mode: ExecMode,
) -> Result<FiberPdfReport> {
    if mc_paths < MIN_PDF_PATHS {
        return Err(FiberError::TooFewPaths(mc_paths));
    }
    if cfg.variant != Variant::WithSubstitute {
        return Err(FiberError::InvalidParameters(format!(
            "the fibre PDF uses the with-substitute scheme, got {}",
            cfg.variant
        )));
    }
    let start = Instant::now();
    let model = build_fiber_model(params)?;
    let (samples, excluded) = snapshot_samples(&model, cfg, mc_paths, seed, snapshots, mode)?;
    let snaps = snapshots
        .iter()
        .zip(&samples)
        .map(|(&t, b)| summarise(t, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(FiberPdfReport {
        params: *params,
        n: cfg.n,
        eps: cfg.eps,
        paths: mc_paths,
        excluded_paths: excluded,
        bin_centers: bin_centers(),
        snapshots: snaps,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Empirical `Var(L_t)` with 95% half-widths, simulated through [`build_noise_model`].
pub fn empirical_noise_variance(
    params: &FiberParams,
    cfg: SchemeConfig,
    mc_paths: u64,
    times: &[f64],
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<(f64, f64)>> {
    let model = build_noise_model(params)?;
    let (samples, _) = snapshot_samples(&model, cfg, mc_paths, seed, times, mode)?;
    Ok(samples
        .iter()
        .map(|b| {
            let all: Vec<f64> = b.iter().flatten().copied().collect();
            let n = all.len() as f64;
            let (_, m2, m4) = central_moments(&all);
            (m2 * n / (n - 1.0), Z95 * ((m4 - m2 * m2).max(0.0) / n).sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_coefficient_reduction() {
        let p = FiberParams {
            gammas: [0.7, 0.0, 0.0, 0.0, 0.0],
            ..FiberParams::isotropic()
        };
        let m = build_fiber_model(&p).unwrap();
        for theta in [-2.0, 0.0, 0.3, 1.7] {
            assert_eq!(m.drift(0.5, theta), 0.0);
            assert!((m.diffusion(0.5, theta) - 0.7f64.sqrt()).abs() < 1e-15);
            assert_eq!(diffusion_sq_second(&p.gammas, theta), 0.0);
            assert!((m.jump_coeff(0.5, theta, 2.0) - 2.0 * 0.7f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn shear_drift_vanishes_at_zero() {
        for sigma in [0.0, 1.0, 2.8, 10.0] {
            assert_eq!(shear_drift(sigma, 0.0), 0.0);
        }
    }

    #[test]
    fn second_derivative_matches_central_differences() {
        let g = FiberParams::strong_shear().gammas;
        let h = 1e-4;
        for k in 0..50 {
            let theta = -3.0 + 0.123 * k as f64;
            let fd = (diffusion_sq(&g, theta + h) - 2.0 * diffusion_sq(&g, theta)
                + diffusion_sq(&g, theta - h))
                / (h * h);
            assert!((fd - diffusion_sq_second(&g, theta)).abs() < 1e-6, "theta = {theta}");
        }
    }

    #[test]
    fn negative_diffusion_rejected() {
        let p = FiberParams {
            gammas: [0.1, 0.5, 0.0, 0.0, 0.0],
            ..FiberParams::isotropic()
        };
        assert!(matches!(
            build_fiber_model(&p),
            Err(FiberError::NegativeDiffusion { .. })
        ));
    }

    #[test]
    fn variance_curve_quadratic_kappa() {
        let p = FiberParams {
            q: 2.0,
            t_star: 1.0,
            alpha: 1.5,
            z_minus: 8.0,
            z_plus: 3.0,
            ..FiberParams::isotropic()
        };
        let moment = (8f64.powf(0.5) + 3f64.powf(0.5)) / 0.5;
        let v = noise_variance_curve(&p, &[0.0, 0.5]).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] / (0.125 * moment) - 1.0).abs() < 1e-8, "{}", v[1]);
    }

    #[test]
    fn variance_curve_linear_after_t_star() {
        let p = FiberParams::isotropic();
        let ts: Vec<f64> = (0..=10).map(|k| 0.3 + 0.07 * k as f64).collect();
        let v = noise_variance_curve(&p, &ts).unwrap();
        let slopes: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / 0.07).collect();
        for s in &slopes {
            assert!((s / slopes[0] - 1.0).abs() < 1e-8);
        }
        let all = noise_variance_curve(&p, &(0..=100).map(|k| k as f64 / 100.0).collect::<Vec<_>>()).unwrap();
        assert!(all.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn off_grid_snapshot_rejected() {
        let cfg = SchemeConfig::new(8, 0.1, 1.0, Variant::WithSubstitute).unwrap();
        assert!(matches!(grid_indices(&cfg, &[0.3]), Err(FiberError::OffGrid(_))));
        assert_eq!(grid_indices(&cfg, &[0.25, 1.0]).unwrap(), vec![2, 8]);
    }

    #[test]
    fn histogram_is_a_density() {
        let xs: Vec<f64> = (0..2000).map(|k| ((k as f64 + 0.5) / 2000.0 - 0.5) * 3.0).collect();
        let s = summarise(1.0, &[xs]).unwrap();
        let w = 2.0 * HIST_RANGE / HIST_BINS as f64;
        let total: f64 = s.density.iter().sum::<f64>() * w;
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(s.outside, 0);
        assert!(matches!(summarise(0.5, &[vec![1.0; 10]]), Err(FiberError::ZeroVariance(_))));
    }

    #[test]
    fn too_few_paths_rejected() {
        let cfg = SchemeConfig::new(8, 0.1, 1.0, Variant::WithSubstitute).unwrap();
        let r = run_fiber_pdf(&FiberParams::isotropic(), cfg, 100, &[1.0], 1, ExecMode::Sequential);
        assert!(matches!(r, Err(FiberError::TooFewPaths(100))));
    }
}
