//! Monte Carlo experiments: strong sup-errors against coupled references,
//! weak errors through Feynman–Kac with a source term, Wasserstein checks of
//! the Gaussian substitute, and log-log rate regression.

use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::measure::{CompensatorKernel, MeasureError, Region};
use crate::model::presets::subordinator_lower_bound;
use crate::model::{ModelError, SdeModel};
use crate::noise::{
    aggregate_to_coarser_grid, sample_jump_sizes, sample_jump_times_timechange, NoiseError,
    SeedStream, SubstreamTag,
};
use crate::par::{try_map_chunks, ExecMode};
use crate::scheme::{Scheme, SchemeConfig, SchemeError, Variant};
use crate::stats::{normal_quantile, ols, wasserstein_sorted, Moments, Z95};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{excluded} of {paths} paths diverged, above the 0.01% threshold")]
    TooManyExclusions { excluded: u64, paths: u64 },
    #[error("rate fit needs at least 3 positive points, got {0}")]
    TooFewPoints(usize),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Whether a fitted slope is read as `error ∝ n^{-slope}` or `error ∝ eps^{slope}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Abscissa {
    N,
    Eps,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub label: String,
    pub abscissa: Abscissa,
    pub abscissae: Vec<f64>,
    pub estimates: Vec<f64>,
    /// 95% CLT half-widths.
    pub std_errors: Vec<f64>,
    pub fitted_slope: Option<f64>,
    pub slope_ci: Option<(f64, f64)>,
    pub predicted_slope: Option<f64>,
    pub excluded_paths: u64,
    pub paths: u64,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl ErrorReport {
    fn new(label: String, abscissa: Abscissa, abscissae: Vec<f64>) -> Self {
        let len = abscissae.len();
        ErrorReport {
            label,
            abscissa,
            abscissae,
            estimates: vec![0.0; len],
            std_errors: vec![0.0; len],
            fitted_slope: None,
            slope_ci: None,
            predicted_slope: None,
            excluded_paths: 0,
            paths: 0,
            runtime_seconds: 0.0,
        }
    }

    /// Fits the slope over the points accepted by `keep`.
    fn fit(&mut self, keep: impl Fn(f64) -> bool) {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .abscissae
            .iter()
            .zip(&self.estimates)
            .filter(|(a, _)| keep(**a))
            .map(|(a, e)| (*a, *e))
            .unzip();
        match fit_rate(&x, &y, self.abscissa) {
            Ok(fit) => {
                self.fitted_slope = Some(fit.slope);
                self.slope_ci = Some(fit.ci);
            }
            Err(e) => warn!("{}: no slope fitted ({e})", self.label),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub ci: (f64, f64),
    pub points: usize,
    pub dropped: usize,
}

/// Least squares on `(log abscissa, log estimate)`; nonpositive estimates
/// are dropped with a warning.
pub fn fit_rate(abscissae: &[f64], estimates: &[f64], kind: Abscissa) -> Result<RateFit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut dropped = 0;
    for (&a, &e) in abscissae.iter().zip(estimates) {
        if e > 0.0 && e.is_finite() && a > 0.0 {
            x.push(a.ln());
            y.push(e.ln());
        } else {
            warn!("dropping point ({a}, {e}) from the rate fit");
            dropped += 1;
        }
    }
    if x.len() < 3 {
        return Err(HarnessError::TooFewPoints(x.len()));
    }
    let fit = ols(&x, &y).ok_or(HarnessError::TooFewPoints(x.len()))?;
    let (lo, hi) = fit.slope_ci(0.95);
    let (slope, ci) = match kind {
        Abscissa::N => (-fit.slope, (-hi, -lo)),
        Abscissa::Eps => (fit.slope, (lo, hi)),
    };
    Ok(RateFit {
        slope,
        ci,
        points: x.len(),
        dropped,
    })
}

pub(crate) fn check_exclusions(excluded: u64, paths: u64) -> Result<()> {
    if excluded * 10_000 > paths {
        return Err(HarnessError::TooManyExclusions { excluded, paths });
    }
    if excluded > 0 {
        warn!("{excluded} of {paths} paths diverged and were excluded");
    }
    Ok(())
}

/// How `eps_min` is tied to `n_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsRule {
    /// `n^{-(1/2 + gamma ∧ 2 zeta / (p (1 + zeta)))}`, at the smallest `p`.
    HalfPlusInvP,
    /// `n^{-(gamma ∧ 1/p) 2 / (2 - beta)}` with the Blumenthal–Getoor index.
    BgRule,
    Explicit(f64),
}

impl EpsRule {
    pub fn resolve(&self, model: &SdeModel, n_max: usize, p: u32) -> f64 {
        let meta = model.rate_meta();
        let n = n_max as f64;
        match *self {
            EpsRule::HalfPlusInvP => n.powf(-(0.5 + meta.predicted_strong_rate_for(p))),
            EpsRule::BgRule => {
                let beta = model.kernel().bg_index();
                n.powf(-meta.gamma.min(1.0 / p as f64) * 2.0 / (2.0 - beta))
            }
            EpsRule::Explicit(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongErrorPlan {
    pub p_norms: Vec<u32>,
    pub n_grid: Vec<usize>,
    pub n_max: usize,
    pub eps_rule: EpsRule,
    pub mc_paths: u64,
    pub seed: u64,
    #[serde(skip)]
    pub mode: ExecMode,
}

impl StrongErrorPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidPlan(m));
        if self.p_norms.is_empty() || self.p_norms.iter().any(|&p| p == 0 || p % 2 == 1) {
            return bad(format!("p_norms must be positive even integers, got {:?}", self.p_norms));
        }
        if !self.n_max.is_power_of_two() {
            return bad(format!("n_max = {} is not a power of two", self.n_max));
        }
        if self.n_grid.is_empty() {
            return bad("n_grid is empty".into());
        }
        for &n in &self.n_grid {
            if !n.is_power_of_two() || n > self.n_max {
                return bad(format!("n = {n} must be a power of two not above n_max"));
            }
        }
        if self.mc_paths == 0 {
            return bad("mc_paths must be positive".into());
        }
        Ok(())
    }
}

/// Sup-error of coarse paths against the `(n_max, eps_min)` reference, one
/// report per `p`.
pub fn run_strong_error(model: &SdeModel, plan: &StrongErrorPlan) -> Result<Vec<ErrorReport>> {
    plan.validate()?;
    if !model.is_multiplicative() {
        return Err(SchemeError::NotMultiplicative.into());
    }
    let start = Instant::now();
    let p_min = *plan.p_norms.iter().min().unwrap();
    let eps = plan.eps_rule.resolve(model, plan.n_max, p_min);
    info!(
        "strong error for {}: n_max = {}, eps_min = {eps:e}, {} paths",
        model.name(),
        plan.n_max,
        plan.mc_paths
    );
    let mut grid = plan.n_grid.clone();
    grid.sort_unstable_by(|a, b| b.cmp(a));
    grid.dedup();

    let ref_cfg = SchemeConfig::new(plan.n_max, eps, model.horizon(), Variant::EulerPeano)?;
    let reference = Scheme::new(model, ref_cfg)?;
    let generator = reference.noise_generator()?;
    let coarse: Vec<Scheme> = grid
        .iter()
        .map(|&n| {
            Scheme::new(
                model,
                SchemeConfig {
                    variant: Variant::WithSubstitute,
                    ..ref_cfg.with_n(n)?
                },
            )
        })
        .collect::<std::result::Result<_, _>>()?;
    let pn: Vec<f64> = plan.p_norms.iter().map(|&p| p as f64).collect();

    struct Partial {
        moments: Vec<Vec<Moments>>,
        excluded: u64,
    }
    let partials = try_map_chunks(plan.mc_paths, plan.mode, |range| -> Result<Partial> {
        let mut moments = vec![vec![Moments::default(); grid.len()]; pn.len()];
        let mut excluded = 0;
        let mut ref_values = Vec::new();
        let mut values = Vec::new();
        let mut sups = vec![0.0; grid.len()];
        'paths: for path in range {
            let noise = generator.generate(plan.seed, path)?;
            if !reference.simulate_into(&noise, &mut ref_values)? {
                excluded += 1;
                continue;
            }
            let mut level = noise;
            for (k, scheme) in coarse.iter().enumerate() {
                let n = grid[k];
                if level.grid_n != n {
                    level = aggregate_to_coarser_grid(&level, level.grid_n / n)?;
                }
                if !scheme.simulate_into(&level, &mut values)? {
                    excluded += 1;
                    continue 'paths;
                }
                let m = plan.n_max / n;
                sups[k] = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - ref_values[i * m]).abs())
                    .fold(0.0, f64::max);
            }
            for (a, &p) in pn.iter().enumerate() {
                for (k, &s) in sups.iter().enumerate() {
                    moments[a][k].push(s.powf(p));
                }
            }
        }
        Ok(Partial { moments, excluded })
    })?;

    let mut total = vec![vec![Moments::default(); grid.len()]; pn.len()];
    let mut excluded = 0;
    for part in &partials {
        excluded += part.excluded;
        for (a, row) in part.moments.iter().enumerate() {
            for (k, m) in row.iter().enumerate() {
                total[a][k].merge(m);
            }
        }
    }
    check_exclusions(excluded, plan.mc_paths)?;
    let runtime = start.elapsed().as_secs_f64();

    let ascending: Vec<usize> = grid.iter().rev().copied().collect();
    let mut reports = Vec::new();
    for (a, &p) in plan.p_norms.iter().enumerate() {
        let mut r = ErrorReport::new(
            format!("p={p}"),
            Abscissa::N,
            ascending.iter().map(|&n| n as f64).collect(),
        );
        for (j, &n) in ascending.iter().enumerate() {
            let k = grid.iter().position(|&g| g == n).unwrap();
            let m = &total[a][k];
            let norm = m.mean.powf(1.0 / pn[a]);
            let se = if m.mean > 0.0 {
                m.mean.powf(1.0 / pn[a] - 1.0) * m.std_error() / pn[a]
            } else {
                0.0
            };
            r.estimates[j] = norm;
            r.std_errors[j] = Z95 * se;
        }
        r.predicted_slope = Some(model.rate_meta().predicted_strong_rate_for(p));
        r.excluded_paths = excluded;
        r.paths = plan.mc_paths;
        r.runtime_seconds = runtime;
        let n_max = plan.n_max as f64;
        r.fit(|n| n < n_max);
        reports.push(r);
    }
    Ok(reports)
}

/// `n(eps) = multiplier * floor(scale * eps^{-exponent})`, at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NRule {
    pub multiplier: f64,
    pub scale: f64,
    pub exponent: f64,
}

impl NRule {
    pub fn new(multiplier: f64, scale: f64, exponent: f64) -> Self {
        NRule {
            multiplier,
            scale,
            exponent,
        }
    }

    pub fn steps(&self, eps: f64) -> usize {
        let n = self.multiplier * (self.scale * eps.powf(-self.exponent)).floor();
        (n as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakErrorPlan {
    pub eps_grid: Vec<f64>,
    /// Step rules for the with-substitute and without-substitute schemes.
    pub n_with: NRule,
    pub n_without: NRule,
    pub variants: Vec<Variant>,
    /// Starting point `(t, x)`.
    pub start: (f64, f64),
    pub mc_paths: u64,
    pub seed: u64,
    #[serde(skip)]
    pub mode: ExecMode,
}

impl WeakErrorPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidPlan(m));
        if self.eps_grid.is_empty() || self.eps_grid.iter().any(|&e| e.is_nan() || e <= 0.0) {
            return bad("eps_grid must hold positive values".into());
        }
        if self.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
            return bad("eps_grid must be strictly decreasing".into());
        }
        if self.variants.is_empty() {
            return bad("no scheme variants selected".into());
        }
        if self.mc_paths == 0 {
            return bad("mc_paths must be positive".into());
        }
        Ok(())
    }

    pub fn steps(&self, variant: Variant, eps: f64) -> usize {
        match variant {
            Variant::WithoutSubstitute => self.n_without.steps(eps),
            _ => self.n_with.steps(eps),
        }
    }
}

/// Composite Simpson 1/3 on a uniform grid; an odd panel count closes with
/// one trapezoid panel.
pub fn simpson_on_grid(values: &[f64], h: f64) -> f64 {
    let panels = values.len().saturating_sub(1);
    if panels == 0 {
        return 0.0;
    }
    let even = panels - panels % 2;
    let mut s = 0.0;
    for k in (0..even).step_by(2) {
        s += values[k] + 4.0 * values[k + 1] + values[k + 2];
    }
    let mut total = s * h / 3.0;
    if panels % 2 == 1 {
        total += 0.5 * h * (values[panels - 1] + values[panels]);
    }
    total
}

/// `|E[phi(X_T) - ∫_t^T G(s, X_s) ds] - u(t, x)|` per variant and eps.
pub fn run_weak_error(model: &SdeModel, plan: &WeakErrorPlan) -> Result<Vec<ErrorReport>> {
    plan.validate()?;
    let spec = model
        .weak_spec()
        .ok_or_else(|| HarnessError::InvalidPlan(format!("model '{}' has no weak-error spec", model.name())))?
        .clone();
    let (t, x) = plan.start;
    let model = model.clone().with_x0(x);
    let exact = (spec.u_exact)(t, x);
    let mut reports = Vec::new();
    for &variant in &plan.variants {
        let start = Instant::now();
        let mut r = ErrorReport::new(variant.to_string(), Abscissa::Eps, plan.eps_grid.clone());
        for (j, &eps) in plan.eps_grid.iter().enumerate() {
            let n = plan.steps(variant, eps);
            let cfg = SchemeConfig::new(n, eps, model.horizon(), variant)?.with_origin(t)?;
            let scheme = Scheme::new(&model, cfg)?;
            let generator = scheme.noise_generator()?;
            let h = cfg.step_size();
            info!("weak error {variant}: eps = {eps}, n = {n}");
            let partials = try_map_chunks(plan.mc_paths, plan.mode, |range| -> Result<(Moments, u64)> {
                let mut m = Moments::default();
                let mut excluded = 0;
                let mut values = Vec::new();
                let mut g = Vec::new();
                for path in range {
                    let noise = generator.generate(plan.seed, path)?;
                    if !scheme.simulate_into(&noise, &mut values)? {
                        excluded += 1;
                        continue;
                    }
                    g.clear();
                    g.extend(
                        values
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| (spec.source_g)(cfg.grid_time(i), v)),
                    );
                    let f = (spec.phi)(*values.last().unwrap()) - simpson_on_grid(&g, h);
                    m.push(f);
                }
                Ok((m, excluded))
            })?;
            let mut m = Moments::default();
            let mut excluded = 0;
            for (pm, ex) in &partials {
                m.merge(pm);
                excluded += ex;
            }
            check_exclusions(excluded, plan.mc_paths)?;
            r.estimates[j] = (m.mean - exact).abs();
            r.std_errors[j] = Z95 * m.std_error();
            r.excluded_paths += excluded;
        }
        r.paths = plan.mc_paths;
        r.predicted_slope = predicted_weak_slope(&model, variant);
        r.runtime_seconds = start.elapsed().as_secs_f64();
        r.fit(|_| true);
        reports.push(r);
    }
    Ok(reports)
}

/// `3 - beta` with the substitute, `2 - beta` without.
pub fn predicted_weak_slope(model: &SdeModel, variant: Variant) -> Option<f64> {
    let beta = model.kernel().bg_index();
    Some(match variant {
        Variant::WithoutSubstitute => 2.0 - beta,
        _ => 3.0 - beta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WassersteinPlan {
    pub eps_grid: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub samples: usize,
    pub q: f64,
    /// `eps_inner / eps`.
    pub inner_ratio: f64,
    pub bootstrap: usize,
    pub seed: u64,
    #[serde(skip)]
    pub mode: ExecMode,
}

impl WassersteinPlan {
    pub fn new(eps_grid: Vec<f64>, samples: usize, seed: u64) -> Self {
        WassersteinPlan {
            eps_grid,
            t0: 0.0,
            t1: 1.0,
            samples,
            q: 2.0,
            inner_ratio: 0.01,
            bootstrap: 200,
            seed,
            mode: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WassersteinRow {
    pub eps: f64,
    pub eps_inner: f64,
    pub w: f64,
    pub ci: (f64, f64),
    /// `(∫∫|F|^{q+2} nu / ∫∫ F² nu)^{1/q}`.
    pub bound_ratio: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WassersteinReport {
    pub q: f64,
    pub samples: usize,
    pub rows: Vec<WassersteinRow>,
    /// `W(eps_0) / eps_0` at the first grid point.
    pub fitted_constant: f64,
    pub monotone: bool,
    pub within_linear_bound: bool,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

pub type SpaceTimeFn = std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

fn space_time_integral(
    kernel: &CompensatorKernel,
    eps: f64,
    lo: f64,
    t0: f64,
    t1: f64,
    g: &(dyn Fn(f64, f64) -> f64 + Sync),
) -> Result<f64> {
    // ∫_{t0}^{t1} ∫_{lo < |z| <= eps} g(s, z) nu_s(dz) ds.
    let inner = |s: f64| -> std::result::Result<f64, MeasureError> {
        let all = kernel.integrate_region(s, eps, Region::Inside, |z| g(s, z))?;
        let core = if lo > 0.0 {
            kernel.integrate_region(s, lo, Region::Inside, |z| g(s, z))?
        } else {
            0.0
        };
        Ok(all - core)
    };
    let failed = std::cell::Cell::new(None);
    let v = crate::quad::simpson_refined(
        |s| match inner(s) {
            Ok(v) => v,
            Err(e) => {
                failed.set(Some(e));
                f64::NAN
            }
        },
        t0,
        t1,
        1e-9,
    );
    if let Some(e) = failed.into_inner() {
        return Err(e.into());
    }
    v.map_err(|e| HarnessError::Measure(e.into()))
}

/// Empirical `W_q` between the compensated small-jump integral
/// `∫_{t0}^{t1}∫_{B(eps)} F dÑ` (simulated as compound Poisson above
/// `eps_inner`) and the Gaussian of matching variance.
pub fn empirical_wasserstein_check(
    kernel: &CompensatorKernel,
    f: SpaceTimeFn,
    plan: &WassersteinPlan,
) -> Result<WassersteinReport> {
    let start = Instant::now();
    if plan.samples < 2 {
        return Err(HarnessError::InvalidPlan("need at least two samples".into()));
    }
    if !(plan.inner_ratio > 0.0 && plan.inner_ratio <= 0.01) {
        return Err(HarnessError::InvalidPlan(format!(
            "eps_inner / eps = {} is not small (must be at most 0.01)",
            plan.inner_ratio
        )));
    }
    if plan.eps_grid.len() < 2 || plan.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(HarnessError::InvalidPlan("eps_grid must be decreasing with at least 2 points".into()));
    }
    let q = plan.q;
    let mut rows = Vec::new();
    for (k, &eps) in plan.eps_grid.iter().enumerate() {
        let eps_inner = eps * plan.inner_ratio;
        let g = |s: f64, z: f64| f(s, z);
        let comp = space_time_integral(kernel, eps, eps_inner, plan.t0, plan.t1, &g)?;
        let band_var = space_time_integral(kernel, eps, eps_inner, plan.t0, plan.t1, &|s, z| f(s, z).powi(2))?;
        let full_var = space_time_integral(kernel, eps, 0.0, plan.t0, plan.t1, &|s, z| f(s, z).powi(2))?;
        let upper =
            space_time_integral(kernel, eps, 0.0, plan.t0, plan.t1, &|s, z| f(s, z).abs().powf(q + 2.0))?;
        let bound_ratio = if full_var > 0.0 { (upper / full_var).powf(1.0 / q) } else { 0.0 };

        let seed = plan.seed.wrapping_add(k as u64);
        let chunks = try_map_chunks(plan.samples as u64, plan.mode, |range| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity((range.end - range.start) as usize);
            for i in range {
                let mut times_rng = SeedStream::new(seed, i, SubstreamTag::JumpTimes).rng();
                let mut size_rng = SeedStream::new(seed, i, SubstreamTag::JumpSizes).rng();
                let times = sample_jump_times_timechange(kernel, eps_inner, plan.t0, plan.t1, &mut times_rng)?;
                let sizes = sample_jump_sizes(kernel, eps_inner, &times, &mut size_rng)?;
                let s: f64 = times
                    .iter()
                    .zip(&sizes)
                    .filter(|(_, z)| z.abs() <= eps)
                    .map(|(t, z)| f(*t, *z))
                    .sum();
                out.push(s - comp);
            }
            Ok(out)
        })?;
        let mut sample: Vec<f64> = chunks.into_iter().flatten().collect();
        sample.sort_by(f64::total_cmp);

        let m = sample.len();
        let sd = full_var.sqrt();
        let nodes: Vec<f64> = (0..m)
            .map(|i| sd * normal_quantile((i as f64 + 0.5) / m as f64))
            .collect();
        let w = wasserstein_sorted(&sample, &nodes, q);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB007);
        let mut boot: Vec<f64> = (0..plan.bootstrap)
            .map(|_| {
                let mut r: Vec<f64> = (0..m).map(|_| sample[rng.random_range(0..m)]).collect();
                r.sort_by(f64::total_cmp);
                wasserstein_sorted(&r, &nodes, q)
            })
            .collect();
        boot.sort_by(f64::total_cmp);
        let ci = if boot.is_empty() {
            (w, w)
        } else {
            let at = |p: f64| boot[((p * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
            (at(0.025), at(0.975))
        };
        info!("wasserstein eps = {eps}: W = {w:e}, band variance {band_var:e} of {full_var:e}");
        rows.push(WassersteinRow {
            eps,
            eps_inner,
            w,
            ci,
            bound_ratio,
            variance: full_var,
        });
    }
    let fitted_constant = rows[0].w / rows[0].eps;
    let monotone = rows.windows(2).all(|r| r[1].w <= r[0].w || r[1].ci.0 <= r[0].ci.1);
    let within_linear_bound = rows.iter().all(|r| r.ci.0 <= fitted_constant * r.eps);
    Ok(WassersteinReport {
        q,
        samples: plan.samples,
        rows,
        fitted_constant,
        monotone,
        within_linear_bound,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub p: u32,
    pub report: ErrorReport,
    pub exponent: f64,
    /// `1/p + 0.1`.
    pub ceiling: f64,
    pub passed: bool,
}

/// Strong error of the subordinator model, whose decay cannot beat `n^{-1/p}`.
/// One simulation serves every `p`.
pub fn lower_bound_check(
    n_grid: &[usize],
    n_max: usize,
    p_norms: &[u32],
    mc_paths: u64,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<LowerBoundReport>> {
    if n_grid.len() < 2 {
        return Err(HarnessError::InvalidPlan(
            "lower-bound check needs at least two grid sizes".into(),
        ));
    }
    let model = subordinator_lower_bound()?;
    let plan = StrongErrorPlan {
        p_norms: p_norms.to_vec(),
        n_grid: n_grid.to_vec(),
        n_max,
        eps_rule: EpsRule::Explicit(1.0 / n_max as f64),
        mc_paths,
        seed,
        mode,
    };
    run_strong_error(&model, &plan)?
        .into_iter()
        .zip(p_norms)
        .map(|(mut report, &p)| {
            report.predicted_slope = Some(1.0 / p as f64);
            let exponent = report.fitted_slope.ok_or(HarnessError::TooFewPoints(n_grid.len()))?;
            let ceiling = 1.0 / p as f64 + 0.1;
            Ok(LowerBoundReport {
                p,
                report,
                exponent,
                ceiling,
                passed: exponent <= ceiling,
            })
        })
        .collect()
}
