//! The epsilon Euler–Maruyama schemes on a uniform grid.
//!
//! Step `i` covers `(t_{i-1}, t_i]`. Coefficients are frozen at the state
//! `X_{t_{i-1}}`; the jump coefficient is evaluated at the exact jump time.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::measure::{CompensatorKernel, MeasureError};
use crate::model::{ArctanSqTable, JumpSizeMap, JumpStructure, ModelError, RealFn, SdeModel};
use crate::noise::{aggregate_to_coarser_grid, NoiseError, NoiseGenerator, NoiseRealization};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid scheme configuration: {0}")]
    InvalidConfig(String),
    #[error("grid coupling requires a multiplicative jump coefficient")]
    NotMultiplicative,
    #[error("reference grid {fine} is not a multiple of {coarse}")]
    Divisibility { coarse: usize, fine: usize },
    #[error("noise does not fit the scheme: {0}")]
    NoiseMismatch(String),
}

pub type Result<T> = std::result::Result<T, SchemeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WithSubstitute,
    WithoutSubstitute,
    /// Frozen-coefficient reference: the with-substitute scheme at reference
    /// parameters.
    EulerPeano,
}

impl Variant {
    pub fn uses_substitute(self) -> bool {
        !matches!(self, Variant::WithoutSubstitute)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::WithSubstitute => "with_substitute",
            Variant::WithoutSubstitute => "without_substitute",
            Variant::EulerPeano => "euler_peano",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_substitute" => Ok(Variant::WithSubstitute),
            "without_substitute" => Ok(Variant::WithoutSubstitute),
            "euler_peano" => Ok(Variant::EulerPeano),
            _ => Err(SchemeError::InvalidConfig(format!(
                "unknown variant '{s}' (expected with_substitute, without_substitute or euler_peano)"
            ))),
        }
    }
}

/// Discretisation parameters; the grid is `t_i = origin + i (T - origin) / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub n: usize,
    pub eps: f64,
    pub horizon: f64,
    pub origin: f64,
    pub variant: Variant,
}

impl SchemeConfig {
    pub fn new(n: usize, eps: f64, horizon: f64, variant: Variant) -> Result<Self> {
        SchemeConfig {
            n,
            eps,
            horizon,
            origin: 0.0,
            variant,
        }
        .checked()
    }

    pub fn with_origin(mut self, origin: f64) -> Result<Self> {
        self.origin = origin;
        self.checked()
    }

    pub fn with_n(mut self, n: usize) -> Result<Self> {
        self.n = n;
        self.checked()
    }

    fn checked(self) -> Result<Self> {
        if self.n == 0 {
            return Err(SchemeError::InvalidConfig("n must be positive".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(SchemeError::InvalidConfig(format!(
                "eps must be finite and nonnegative, got {}",
                self.eps
            )));
        }
        if !(self.origin >= 0.0 && self.horizon > self.origin && self.horizon.is_finite()) {
            return Err(SchemeError::InvalidConfig(format!(
                "need 0 <= origin < horizon, got [{}, {}]",
                self.origin, self.horizon
            )));
        }
        Ok(self)
    }

    /// Rejects `eps = 0` on infinite-activity kernels.
    pub fn validate_for(&self, kernel: &CompensatorKernel) -> Result<()> {
        if self.eps == 0.0 && !kernel.is_finite_activity() {
            return Err(SchemeError::InvalidConfig(format!(
                "eps = 0 needs a finite-activity kernel, '{}' has infinite activity",
                kernel.name()
            )));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.horizon - self.origin) / self.n as f64
    }

    pub fn grid_time(&self, i: usize) -> f64 {
        if i == self.n {
            self.horizon
        } else {
            self.origin + i as f64 * self.step_size()
        }
    }

    /// `rho(t) = floor((t - origin) n / (T - origin))`, exact on grid points.
    pub fn rho(&self, t: f64) -> usize {
        let u = (t - self.origin) / self.step_size();
        let r = u.round();
        let k = if (u - r).abs() <= 1e-9 * r.max(1.0) { r } else { u.floor() };
        k.clamp(0.0, self.n as f64) as usize
    }

    /// `eta(t) = t_{rho(t)}`.
    pub fn eta(&self, t: f64) -> f64 {
        self.grid_time(self.rho(t))
    }
}

/// One applied jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub step: usize,
    pub time: f64,
    pub size: f64,
    pub increment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// `X` at `t_0, ..., t_n`; `NaN` after a divergence.
    pub grid_values: Vec<f64>,
    pub jump_log: Option<Vec<JumpRecord>>,
    pub divergent: bool,
    pub config: SchemeConfig,
}

impl Path {
    pub fn terminal(&self) -> f64 {
        *self.grid_values.last().unwrap()
    }
}

/// Step integrals precomputed per grid.
#[derive(Clone)]
enum StepPlan {
    NoJumps,
    Multiplicative {
        cbar: RealFn,
        f: JumpSizeMap,
        comp: Vec<f64>,
        sd: Vec<f64>,
        var: Arc<[f64]>,
    },
    Arctan {
        masses: Arc<[f64]>,
        table: Arc<ArctanSqTable>,
        z_minus: f64,
        z_plus: f64,
    },
    Quadrature,
}

/// A scheme bound to a model and grid, with its per-step integrals cached.
#[derive(Clone)]
pub struct Scheme<'a> {
    model: &'a SdeModel,
    config: SchemeConfig,
    plan: StepPlan,
    log_jumps: bool,
}

impl fmt::Debug for Scheme<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scheme")
            .field("model", &self.model.name())
            .field("config", &self.config)
            .finish()
    }
}

impl<'a> Scheme<'a> {
    pub fn new(model: &'a SdeModel, config: SchemeConfig) -> Result<Self> {
        config.validate_for(model.kernel())?;
        let plan = Self::plan(model, &config)?;
        Ok(Scheme {
            model,
            config,
            plan,
            log_jumps: false,
        })
    }

    fn plan(model: &SdeModel, config: &SchemeConfig) -> Result<StepPlan> {
        let n = config.n;
        let eps = config.eps;
        match model.jump_structure() {
            JumpStructure::None => Ok(StepPlan::NoJumps),
            JumpStructure::Multiplicative { cbar, f } => {
                let mut comp = Vec::with_capacity(n);
                let mut var = Vec::with_capacity(n);
                for i in 1..=n {
                    let (c, v) = model
                        .multiplicative_step_masses(eps, config.grid_time(i - 1), config.grid_time(i))?
                        .unwrap();
                    comp.push(c);
                    var.push(v);
                }
                Ok(StepPlan::Multiplicative {
                    cbar: cbar.clone(),
                    f: f.clone(),
                    comp,
                    sd: var.iter().map(|v| v.sqrt()).collect(),
                    var: var.into(),
                })
            }
            JumpStructure::Arctan => {
                let kernel = model.kernel();
                let (Some(tf), Some(shape), true) = (
                    kernel.time_factor(),
                    kernel.stable_shape(),
                    model.compensator_vanishes(),
                ) else {
                    return Ok(StepPlan::Quadrature);
                };
                let masses: Vec<f64> = (1..=n)
                    .map(|i| tf.integral(config.grid_time(i - 1), config.grid_time(i)))
                    .collect::<std::result::Result<_, _>>()?;
                let reach = eps * shape.z_minus.max(shape.z_plus);
                let y_max = (reach * 4.0 * model.x0().abs().max(8.0)).max(1.0);
                Ok(StepPlan::Arctan {
                    masses: masses.into(),
                    table: Arc::new(ArctanSqTable::new(shape.alpha, y_max)),
                    z_minus: shape.z_minus,
                    z_plus: shape.z_plus,
                })
            }
            JumpStructure::General(_) => Ok(StepPlan::Quadrature),
        }
    }

    pub fn with_jump_log(mut self, on: bool) -> Self {
        self.log_jumps = on;
        self
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn model(&self) -> &SdeModel {
        self.model
    }

    /// Relative small-jump variances of the steps, when they do not depend
    /// on the state.
    pub fn substitute_weights(&self) -> Option<Arc<[f64]>> {
        match &self.plan {
            StepPlan::Multiplicative { var, .. } => Some(var.clone()),
            StepPlan::Arctan { masses, .. } => Some(masses.clone()),
            _ => None,
        }
    }

    /// A noise generator drawing exactly what this scheme consumes.
    pub fn noise_generator(&self) -> Result<NoiseGenerator> {
        let mut g = NoiseGenerator::new(self.model.kernel(), &self.config)?
            .with_brownian(self.model.has_diffusion())
            .with_substitute(self.config.variant.uses_substitute() && self.config.eps > 0.0);
        if let Some(w) = self.substitute_weights() {
            g = g.with_weights(w)?;
        }
        Ok(g)
    }

    /// `∫∫_{|z|>eps} c nu` over step `i` at frozen state `x`.
    fn compensator(&self, i: usize, x: f64) -> Result<f64> {
        match &self.plan {
            StepPlan::NoJumps | StepPlan::Arctan { .. } => Ok(0.0),
            StepPlan::Multiplicative { cbar, comp, .. } => {
                let c = comp[i - 1];
                Ok(if c == 0.0 { 0.0 } else { cbar(x) * c })
            }
            StepPlan::Quadrature => Ok(self.model.compensator_over_step(
                self.config.eps,
                x,
                self.config.grid_time(i - 1),
                self.config.grid_time(i),
            )?),
        }
    }

    /// Standard deviation of the Gaussian substitute on step `i` at state `x`.
    fn substitute_sd(&self, i: usize, x: f64) -> Result<f64> {
        if self.config.eps == 0.0 {
            return Ok(0.0);
        }
        match &self.plan {
            StepPlan::NoJumps => Ok(0.0),
            StepPlan::Multiplicative { cbar, sd, .. } => Ok(cbar(x).abs() * sd[i - 1]),
            StepPlan::Arctan {
                masses,
                table,
                z_minus,
                z_plus,
            } => {
                if x == 0.0 {
                    return Ok(0.0);
                }
                let ax = x.abs();
                let eps = self.config.eps;
                let side = |b: f64| table.eval(eps.min(b) * ax);
                let v = masses[i - 1] * ax.powf(table.alpha()) * (side(*z_minus) + side(*z_plus));
                Ok(v.max(0.0).sqrt())
            }
            StepPlan::Quadrature => Ok(self
                .model
                .small_jump_variance(
                    self.config.eps,
                    x,
                    self.config.grid_time(i - 1),
                    self.config.grid_time(i),
                )?
                .sqrt()),
        }
    }

    #[inline]
    fn jump_increment(&self, t: f64, x: f64, z: f64) -> f64 {
        match &self.plan {
            StepPlan::Multiplicative { cbar, f, .. } => cbar(x) * f.apply(z),
            StepPlan::Arctan { .. } => (x * z).atan(),
            _ => self.model.jump_coeff(t, x, z),
        }
    }

    fn step_core(
        &self,
        i: usize,
        x: f64,
        noise: &NoiseRealization,
        jumps: std::ops::Range<usize>,
        substitute: bool,
        log: Option<&mut Vec<JumpRecord>>,
    ) -> Result<f64> {
        let t0 = self.config.grid_time(i - 1);
        let h = self.config.step_size();
        let mut next = x + self.model.drift(t0, x) * h - self.compensator(i, x)?;
        if self.model.has_diffusion() {
            next += self.model.diffusion(t0, x) * noise.brownian_increments[i - 1];
        }
        if substitute {
            let sd = self.substitute_sd(i, x)?;
            if sd != 0.0 {
                next += sd * noise.substitute_gaussians[i - 1];
            }
        }
        let mut log = log;
        for j in jumps {
            let (t, z) = (noise.jump_times[j], noise.jump_sizes[j]);
            let inc = self.jump_increment(t, x, z);
            next += inc;
            if let Some(log) = log.as_deref_mut() {
                log.push(JumpRecord {
                    step: i,
                    time: t,
                    size: z,
                    increment: inc,
                });
            }
        }
        Ok(next)
    }

    pub fn step_with_substitute(&self, i: usize, x_prev: f64, noise: &NoiseRealization) -> Result<f64> {
        self.check_step(i, noise, true)?;
        self.step_core(i, x_prev, noise, noise.jumps_in_step(i), true, None)
    }

    pub fn step_without_substitute(
        &self,
        i: usize,
        x_prev: f64,
        noise: &NoiseRealization,
    ) -> Result<f64> {
        self.check_step(i, noise, false)?;
        self.step_core(i, x_prev, noise, noise.jumps_in_step(i), false, None)
    }

    /// The frozen-coefficient reference step.
    pub fn step_euler_peano(&self, i: usize, x_prev: f64, noise_fine: &NoiseRealization) -> Result<f64> {
        self.step_with_substitute(i, x_prev, noise_fine)
    }

    fn check_step(&self, i: usize, noise: &NoiseRealization, substitute: bool) -> Result<()> {
        if i == 0 || i > self.config.n {
            return Err(SchemeError::InvalidConfig(format!(
                "step index {i} outside 1..={}",
                self.config.n
            )));
        }
        self.check_noise(noise, substitute)
    }

    fn check_noise(&self, noise: &NoiseRealization, substitute: bool) -> Result<()> {
        if noise.grid_n != self.config.n {
            return Err(SchemeError::NoiseMismatch(format!(
                "noise grid has {} steps, scheme has {}",
                noise.grid_n, self.config.n
            )));
        }
        if noise.eps != self.config.eps {
            return Err(SchemeError::NoiseMismatch(format!(
                "noise drawn at eps = {}, scheme uses eps = {}",
                noise.eps, self.config.eps
            )));
        }
        if self.model.has_diffusion() && noise.brownian_increments.len() != self.config.n {
            return Err(SchemeError::NoiseMismatch("missing Brownian increments".into()));
        }
        let needs_xi = substitute && self.config.eps > 0.0 && !matches!(self.plan, StepPlan::NoJumps);
        if needs_xi && noise.substitute_gaussians.len() != self.config.n {
            return Err(SchemeError::NoiseMismatch("missing substitute Gaussians".into()));
        }
        Ok(())
    }

    /// Writes `X_{t_0..t_n}` into `out`; returns false if the path diverged
    /// (remaining values are `NaN`).
    pub fn simulate_into(&self, noise: &NoiseRealization, out: &mut Vec<f64>) -> Result<bool> {
        let substitute = self.config.variant.uses_substitute();
        self.check_noise(noise, substitute)?;
        self.run(noise, substitute, out, None)
    }

    fn run(
        &self,
        noise: &NoiseRealization,
        substitute: bool,
        out: &mut Vec<f64>,
        mut log: Option<&mut Vec<JumpRecord>>,
    ) -> Result<bool> {
        let n = self.config.n;
        out.clear();
        out.reserve(n + 1);
        let mut x = self.model.x0();
        out.push(x);
        let mut cursor = 0usize;
        for i in 1..=n {
            let start = cursor;
            while cursor < noise.jump_steps.len() && noise.jump_steps[cursor] as usize <= i {
                cursor += 1;
            }
            x = self.step_core(i, x, noise, start..cursor, substitute, log.as_deref_mut())?;
            if !x.is_finite() {
                out.resize(n + 1, f64::NAN);
                return Ok(false);
            }
            out.push(x);
        }
        Ok(true)
    }

    /// Simulates one path. Noise on a finer grid is aggregated first, which
    /// is only valid for multiplicative coefficients.
    pub fn simulate_path(&self, noise: &NoiseRealization) -> Result<Path> {
        let coarse;
        let noise = if noise.grid_n != self.config.n {
            let n = self.config.n;
            if !noise.grid_n.is_multiple_of(n) {
                return Err(SchemeError::Divisibility {
                    coarse: n,
                    fine: noise.grid_n,
                });
            }
            if !self.model.is_multiplicative() {
                return Err(SchemeError::NotMultiplicative);
            }
            coarse = aggregate_to_coarser_grid(noise, noise.grid_n / n)?;
            &coarse
        } else {
            noise
        };
        let substitute = self.config.variant.uses_substitute();
        self.check_noise(noise, substitute)?;
        let mut values = Vec::new();
        let mut log = self.log_jumps.then(Vec::new);
        let ok = self.run(noise, substitute, &mut values, log.as_mut())?;
        Ok(Path {
            grid_values: values,
            jump_log: log,
            divergent: !ok,
            config: self.config,
        })
    }
}

/// Checks the coupling preconditions between a coarse and a reference grid.
pub fn check_coupling(model: &SdeModel, coarse: &SchemeConfig, reference: &SchemeConfig) -> Result<usize> {
    if !model.is_multiplicative() && !matches!(model.jump_structure(), JumpStructure::None) {
        return Err(SchemeError::NotMultiplicative);
    }
    if !reference.n.is_multiple_of(coarse.n) {
        return Err(SchemeError::Divisibility {
            coarse: coarse.n,
            fine: reference.n,
        });
    }
    if coarse.eps != reference.eps {
        return Err(SchemeError::InvalidConfig(format!(
            "coupled grids must share eps, got {} and {}",
            coarse.eps, reference.eps
        )));
    }
    if coarse.horizon != reference.horizon || coarse.origin != reference.origin {
        return Err(SchemeError::InvalidConfig("coupled grids must share the time interval".into()));
    }
    Ok(reference.n / coarse.n)
}

/// Reference path on the fine grid and coarse path on the aggregated noise
/// of the same realization.
pub fn simulate_coupled_pair(
    model: &SdeModel,
    config_coarse: &SchemeConfig,
    config_ref: &SchemeConfig,
    shared_noise: &NoiseRealization,
) -> Result<(Path, Path)> {
    let m = check_coupling(model, config_coarse, config_ref)?;
    let reference = Scheme::new(model, *config_ref)?.simulate_path(shared_noise)?;
    let coarse_noise = aggregate_to_coarser_grid(shared_noise, m)?;
    let coarse = Scheme::new(model, *config_coarse)?.simulate_path(&coarse_noise)?;
    Ok((coarse, reference))
}
