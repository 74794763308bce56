//! Scalar jump SDEs
//! `dX = a(t,X) dt + b(t,X) dW + ∫ c(t,X⁻,z) Ñ(dt,dz)` and the integrals
//! their discretisations need: the large-jump compensator, the small-jump
//! variance, and the `psi_p` / `delta_p^n` rate diagnostics.

use std::fmt;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::measure::{CompensatorKernel, MeasureError, Region};
use crate::quad::{simpson, simpson_refined, QuadError};

pub mod presets;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("model invariant violated: {0}")]
    Invariant(String),
    #[error("invalid rate hypotheses: {0}")]
    RateHypotheses(String),
    #[error("psi_p needs a Lipschitz bound for the jump coefficient")]
    MissingLipschitzBound,
    #[error("integral diverges: {0}")]
    Divergent(String),
    #[error("invalid model parameters: {0}")]
    InvalidParameters(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Coefficient of `(t, x)`.
pub type Coef = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// Jump coefficient of `(t, x, z)`.
pub type JumpFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
/// Function of a single real.
pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn coef(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Coef {
    Arc::new(f)
}

pub fn real_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> RealFn {
    Arc::new(f)
}

/// The `f` in a multiplicative jump coefficient `c = cbar(x) f(z)`.
#[derive(Clone)]
pub enum JumpSizeMap {
    Identity,
    Custom(RealFn),
}

impl JumpSizeMap {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Self::Identity => z,
            Self::Custom(f) => f(z),
        }
    }
}

#[derive(Clone)]
pub enum JumpStructure {
    /// `c ≡ 0`.
    None,
    /// `c(t, x, z) = cbar(x) f(z)`.
    Multiplicative { cbar: RealFn, f: JumpSizeMap },
    /// `c(t, x, z) = arctan(x z)`.
    Arctan,
    General(JumpFn),
}

impl fmt::Debug for JumpStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "None"),
            Self::Multiplicative { f: JumpSizeMap::Identity, .. } => {
                write!(f, "Multiplicative(cbar(x) * z)")
            }
            Self::Multiplicative { .. } => write!(f, "Multiplicative(cbar(x) * f(z))"),
            Self::Arctan => write!(f, "Arctan"),
            Self::General(_) => write!(f, "General"),
        }
    }
}

impl JumpStructure {
    #[inline]
    pub fn eval(&self, t: f64, x: f64, z: f64) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Multiplicative { cbar, f } => cbar(x) * f.apply(z),
            Self::Arctan => (x * z).atan(),
            Self::General(c) => c(t, x, z),
        }
    }

    pub fn is_multiplicative(&self) -> bool {
        matches!(self, Self::Multiplicative { .. } | Self::None)
    }
}

/// Regularity metadata used to label expected convergence rates.
#[derive(Clone)]
pub struct RateHypotheses {
    /// Time-Hölder exponent of `a` and `b`.
    pub gamma: f64,
    /// Integrability exponent: `psi_p ∈ L^{1+zeta}`.
    pub zeta: f64,
    /// Target strong norm.
    pub p: u32,
    /// Constant `C_T` in `|c(t,x,z)| <= C_T |z| (1+|x|)`, when it holds.
    pub sublinear: Option<f64>,
    /// `Lbar_c(t, z)`: Lipschitz constant of `c` in `x`, maxed with `|c(t,0,z)|`.
    pub c_lip_bound: Option<Coef>,
}

impl fmt::Debug for RateHypotheses {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RateHypotheses")
            .field("gamma", &self.gamma)
            .field("zeta", &self.zeta)
            .field("p", &self.p)
            .field("sublinear", &self.sublinear)
            .field("c_lip_bound", &self.c_lip_bound.as_ref().map(|_| ".."))
            .finish()
    }
}

impl RateHypotheses {
    pub fn new(gamma: f64, zeta: f64, p: u32) -> Result<Self> {
        let h = Self {
            gamma,
            zeta,
            p,
            sublinear: None,
            c_lip_bound: None,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn with_sublinear(mut self, c_t: f64) -> Self {
        self.sublinear = Some(c_t);
        self
    }

    pub fn with_lip_bound(mut self, bound: Coef) -> Self {
        self.c_lip_bound = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ModelError::RateHypotheses(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(ModelError::RateHypotheses(format!(
                "zeta must lie in (0, 1], got {}",
                self.zeta
            )));
        }
        if self.p < 2 || !self.p.is_multiple_of(2) {
            return Err(ModelError::RateHypotheses(format!(
                "p must be an even integer >= 2, got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// `gamma ∧ 2 zeta / (p (1 + zeta))` for the stored `p`.
    pub fn predicted_strong_rate(&self) -> f64 {
        self.predicted_strong_rate_for(self.p)
    }

    pub fn predicted_strong_rate_for(&self, p: u32) -> f64 {
        let p = p as f64;
        self.gamma.min(2.0 * self.zeta / (p * (1.0 + self.zeta)))
    }
}

/// Closed-form Kolmogorov data for weak-error experiments.
#[derive(Clone)]
pub struct WeakErrorSpec {
    pub phi: RealFn,
    pub source_g: Coef,
    pub u_exact: Coef,
}

impl fmt::Debug for WeakErrorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("WeakErrorSpec { .. }")
    }
}

impl WeakErrorSpec {
    /// Checks `u(T, x) = phi(x)` on probe points.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        for k in 0..=40 {
            let x = -20.0 + k as f64;
            let (u, p) = ((self.u_exact)(horizon, x), (self.phi)(x));
            if (u - p).abs() > 1e-12 * p.abs().max(1.0) {
                return Err(ModelError::Invariant(format!(
                    "u(T, {x}) = {u} differs from phi({x}) = {p}"
                )));
            }
        }
        Ok(())
    }
}

/// An SDE together with its compensator family.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    drift: Coef,
    diffusion: Option<Coef>,
    jump: JumpStructure,
    kernel: Arc<CompensatorKernel>,
    x0: f64,
    horizon: f64,
    rate_meta: RateHypotheses,
    /// The (not numerically checkable) density condition behind the coupling
    /// argument; presets set it by construction.
    pub density_coupling: bool,
    weak: Option<WeakErrorSpec>,
    odd_compensator: bool,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("jump", &self.jump)
            .field("kernel", &self.kernel)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("rate_meta", &self.rate_meta)
            .finish()
    }
}

fn probe_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5EED_1234)
}

fn support_probe(rng: &mut ChaCha8Rng, support: (f64, f64)) -> f64 {
    support.0 + (support.1 - support.0) * rng.random::<f64>()
}

fn jump_is_odd(jump: &JumpStructure, kernel: &CompensatorKernel, horizon: f64) -> bool {
    let (_, hi) = kernel.support();
    let mut rng = probe_rng();
    let odd = |g: &dyn Fn(f64, f64, f64) -> f64, rng: &mut ChaCha8Rng| {
        (0..1000).all(|_| {
            let t = horizon * rng.random::<f64>();
            let x = 100.0 * (rng.random::<f64>() - 0.5);
            let z = hi * rng.random::<f64>();
            let (a, b) = (g(t, x, z), g(t, x, -z));
            (a + b).abs() <= 1e-13 * a.abs().max(b.abs()).max(1e-300)
        })
    };
    match jump {
        JumpStructure::None | JumpStructure::Arctan => true,
        JumpStructure::Multiplicative {
            f: JumpSizeMap::Identity,
            ..
        } => true,
        JumpStructure::Multiplicative {
            f: JumpSizeMap::Custom(f),
            ..
        } => odd(&|_, _, z| f(z), &mut rng),
        JumpStructure::General(c) => odd(&|t, x, z| c(t, x, z), &mut rng),
    }
}

/// Probe check that a general coefficient factorises as `cbar(x) f(z)`.
pub fn check_multiplicative(
    c: &JumpFn,
    cbar: &RealFn,
    f: &JumpSizeMap,
    support: (f64, f64),
    horizon: f64,
) -> Result<()> {
    let mut rng = probe_rng();
    for _ in 0..1000 {
        let t = horizon * rng.random::<f64>();
        let x = 100.0 * (rng.random::<f64>() - 0.5);
        let z = support_probe(&mut rng, support);
        let (full, prod) = (c(t, x, z), cbar(x) * f.apply(z));
        if (full - prod).abs() > 1e-12 * full.abs().max(1.0) {
            return Err(ModelError::Invariant(format!(
                "c({t}, {x}, {z}) = {full} but cbar(x) f(z) = {prod}"
            )));
        }
    }
    Ok(())
}

/// Upper end of the `[tau, .]` split in the hybrid arctan evaluator.
pub const ARCTAN_TAYLOR_SWITCH: f64 = 0.5;
pub const ARCTAN_SIMPSON_PANELS: usize = 100;

/// `∫_0^y arctan²(u) u^{-1-alpha} du`: order-11 Taylor polynomial of arctan,
/// squared and integrated exactly below `tau = 1/2`; composite Simpson with
/// 100 panels on `[tau, y]` above it.
pub fn arctan_sq_moment(alpha: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let taylor = |y: f64| {
        // y^{2-alpha} Σ_m c_m y^{2m}, where c_m collects the (j, k) cross terms
        // of the squared order-11 polynomial with j + k = m.
        let mut poly = 0.0;
        for m in (0..=10usize).rev() {
            let mut c = 0.0;
            for j in m.saturating_sub(5)..=m.min(5) {
                let k = m - j;
                c += 1.0 / ((2 * j + 1) * (2 * k + 1)) as f64;
            }
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            poly = poly * y * y + sign * c / ((2 * m + 2) as f64 - alpha);
        }
        y.powf(2.0 - alpha) * poly
    };
    if y < ARCTAN_TAYLOR_SWITCH {
        return taylor(y);
    }
    let tau = ARCTAN_TAYLOR_SWITCH;
    taylor(tau)
        + simpson(
            |u| u.atan().powi(2) * u.powf(-1.0 - alpha),
            tau,
            y,
            ARCTAN_SIMPSON_PANELS,
        )
}

/// Cubic Hermite interpolant of [`arctan_sq_moment`] on `[tau, y_max]`, with
/// node values from the hybrid evaluator and exact node derivatives
/// `arctan²(y) y^{-1-alpha}`. Arguments below `tau` or above `y_max` go
/// to the hybrid evaluator directly.
#[derive(Debug, Clone)]
pub struct ArctanSqTable {
    alpha: f64,
    step: f64,
    hi: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl ArctanSqTable {
    pub const STEP: f64 = 1.0 / 128.0;

    pub fn new(alpha: f64, y_max: f64) -> Self {
        let lo = ARCTAN_TAYLOR_SWITCH;
        let nodes = (((y_max - lo) / Self::STEP).ceil().max(1.0) as usize) + 1;
        let ys = (0..nodes).map(|k| lo + k as f64 * Self::STEP);
        let values = ys.clone().map(|y| arctan_sq_moment(alpha, y)).collect();
        let slopes = ys.map(|y| y.atan().powi(2) * y.powf(-1.0 - alpha)).collect();
        ArctanSqTable {
            alpha,
            step: Self::STEP,
            hi: lo + (nodes - 1) as f64 * Self::STEP,
            values,
            slopes,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, y: f64) -> f64 {
        if y < ARCTAN_TAYLOR_SWITCH || y >= self.hi {
            return arctan_sq_moment(self.alpha, y);
        }
        let u = (y - ARCTAN_TAYLOR_SWITCH) / self.step;
        let k = (u as usize).min(self.values.len() - 2);
        let s = u - k as f64;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.values[k]
            + h10 * self.step * self.slopes[k]
            + h01 * self.values[k + 1]
            + h11 * self.step * self.slopes[k + 1]
    }
}

fn clamp_variance(v: f64) -> f64 {
    if v < 0.0 {
        if v < -1e-14 {
            warn!("negative small-jump variance {v:e} clamped to zero");
        }
        0.0
    } else {
        v
    }
}

fn time_integral<F: Fn(f64) -> Result<f64>>(t0: f64, t1: f64, f: F) -> Result<f64> {
    if t1 <= t0 {
        return Ok(0.0);
    }
    let failed = std::cell::Cell::new(None);
    let v = simpson_refined(
        |s| match f(s) {
            Ok(v) => v,
            Err(e) => {
                failed.set(Some(e));
                f64::NAN
            }
        },
        t0,
        t1,
        1e-10,
    );
    if let Some(e) = failed.into_inner() {
        return Err(e);
    }
    Ok(v?)
}

/// Result of the `delta_p^n(eps)` estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaReport {
    pub value: f64,
    /// (path, step) samples dropped because `c` vanished on `B(eps)`.
    pub excluded: usize,
}

impl SdeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        drift: Coef,
        diffusion: Option<Coef>,
        jump: JumpStructure,
        kernel: CompensatorKernel,
        x0: f64,
        horizon: f64,
        rate_meta: RateHypotheses,
    ) -> Result<Self> {
        rate_meta.validate()?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::InvalidParameters(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !x0.is_finite() {
            return Err(ModelError::InvalidParameters(format!(
                "initial condition must be finite, got {x0}"
            )));
        }
        let odd_compensator = kernel.is_symmetric() && jump_is_odd(&jump, &kernel, horizon);
        let model = Self {
            name: name.into(),
            drift,
            diffusion,
            jump,
            kernel: Arc::new(kernel),
            x0,
            horizon,
            rate_meta,
            density_coupling: false,
            weak: None,
            odd_compensator,
        };
        model.check_sublinear()?;
        Ok(model)
    }

    pub fn with_weak_spec(mut self, spec: WeakErrorSpec) -> Result<Self> {
        spec.validate(self.horizon)?;
        self.weak = Some(spec);
        Ok(self)
    }

    pub fn with_density_coupling(mut self, flag: bool) -> Self {
        self.density_coupling = flag;
        self
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Probe check of `|c(t,x,z)| <= C_T |z| (1+|x|)` when declared.
    pub fn check_sublinear(&self) -> Result<()> {
        let Some(c_t) = self.rate_meta.sublinear else {
            return Ok(());
        };
        let mut rng = probe_rng();
        for _ in 0..1000 {
            let t = self.horizon * rng.random::<f64>();
            let x = 100.0 * (rng.random::<f64>() - 0.5);
            let z = support_probe(&mut rng, self.kernel.support());
            let c = self.jump_coeff(t, x, z).abs();
            let bound = c_t * z.abs() * (1.0 + x.abs());
            if c > bound * (1.0 + 1e-12) + 1e-12 {
                return Err(ModelError::Invariant(format!(
                    "|c({t}, {x}, {z})| = {c} exceeds the sublinear bound {bound}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn kernel(&self) -> &CompensatorKernel {
        &self.kernel
    }

    pub fn jump_structure(&self) -> &JumpStructure {
        &self.jump
    }

    pub fn rate_meta(&self) -> &RateHypotheses {
        &self.rate_meta
    }

    pub fn weak_spec(&self) -> Option<&WeakErrorSpec> {
        self.weak.as_ref()
    }

    pub fn is_multiplicative(&self) -> bool {
        self.jump.is_multiplicative()
    }

    /// Whether the large-jump compensator vanishes identically.
    pub fn compensator_vanishes(&self) -> bool {
        self.odd_compensator
    }

    #[inline]
    pub fn drift(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: f64) -> f64 {
        self.diffusion.as_ref().map_or(0.0, |b| b(t, x))
    }

    pub fn has_diffusion(&self) -> bool {
        self.diffusion.is_some()
    }

    #[inline]
    pub fn jump_coeff(&self, t: f64, x: f64, z: f64) -> f64 {
        self.jump.eval(t, x, z)
    }

    /// `(∫_{|z|>eps} f g, ∫_{B(eps)} f² g)` for a multiplicative coefficient
    /// on a factorised kernel.
    pub fn multiplicative_spatial(&self, eps: f64) -> Result<Option<(f64, f64)>> {
        let JumpStructure::Multiplicative { f, .. } = &self.jump else {
            return Ok(None);
        };
        if !self.kernel.is_factorised() {
            return Ok(None);
        }
        if let (Some(s), JumpSizeMap::Identity) = (self.kernel.stable_shape(), f) {
            let comp = if self.odd_compensator {
                0.0
            } else {
                s.signed_moment_outside(eps, 1)
            };
            return Ok(Some((comp, s.abs_moment(eps, 2.0, true)?)));
        }
        let comp = if self.odd_compensator {
            0.0
        } else {
            self.kernel
                .integrate_spatial(eps, Region::Outside, |z| f.apply(z))?
                .unwrap_or(0.0)
        };
        let var = self
            .kernel
            .integrate_spatial(eps, Region::Inside, |z| f.apply(z).powi(2))?
            .unwrap_or(0.0);
        Ok(Some((comp, var)))
    }

    /// Instantaneous compensator `∫_{|z|>eps} c(t, x, z) nu_t(dz)`.
    pub fn compensator_rate(&self, t: f64, eps: f64, x: f64) -> Result<f64> {
        if self.odd_compensator {
            return Ok(0.0);
        }
        match &self.jump {
            JumpStructure::None => Ok(0.0),
            JumpStructure::Multiplicative { cbar, f } => {
                if let Some((comp, _)) = self.multiplicative_spatial(eps)? {
                    let phi = self.kernel.time_factor().map_or(1.0, |tf| tf.value(t));
                    Ok(cbar(x) * phi * comp)
                } else {
                    let inner = self
                        .kernel
                        .integrate_region(t, eps, Region::Outside, |z| f.apply(z))?;
                    Ok(cbar(x) * inner)
                }
            }
            _ => Ok(self.kernel.integrate_region(t, eps, Region::Outside, |z| {
                self.jump.eval(t, x, z)
            })?),
        }
    }

    /// `a(eta_t, x) - ∫_{|z|>eps} c(t, x, z) nu_t(dz)`.
    pub fn corrected_drift(&self, eps: f64, eta_t: f64, t: f64, x: f64) -> Result<f64> {
        Ok(self.drift(eta_t, x) - self.compensator_rate(t, eps, x)?)
    }

    /// `∫_{t0}^{t1} ∫_{|z|>eps} c(s, x, z) nu_s(dz) ds`.
    pub fn compensator_over_step(&self, eps: f64, x: f64, t0: f64, t1: f64) -> Result<f64> {
        if self.odd_compensator || matches!(self.jump, JumpStructure::None) || t1 <= t0 {
            return Ok(0.0);
        }
        if let Some(tf) = self.kernel.time_factor() {
            let mass = tf.integral(t0, t1)?;
            match &self.jump {
                JumpStructure::Multiplicative { cbar, .. } => {
                    let (comp, _) = self.multiplicative_spatial(eps)?.unwrap();
                    return Ok(cbar(x) * mass * comp);
                }
                JumpStructure::Arctan => {
                    let inner = self
                        .kernel
                        .integrate_spatial(eps, Region::Outside, |z| (x * z).atan())?
                        .unwrap();
                    return Ok(mass * inner);
                }
                _ => {}
            }
        }
        time_integral(t0, t1, |s| self.compensator_rate(s, eps, x))
    }

    /// `∫_{t0}^{t1} ∫_{B(eps)} c²(s, x, z) nu_s(dz) ds`.
    pub fn small_jump_variance(&self, eps: f64, x: f64, t0: f64, t1: f64) -> Result<f64> {
        if t1 < t0 {
            return Err(MeasureError::BadInterval { t0, t1 }.into());
        }
        if t1 == t0 || eps == 0.0 {
            return Ok(0.0);
        }
        let v = match &self.jump {
            JumpStructure::None => 0.0,
            JumpStructure::Multiplicative { cbar, f } => {
                let c2 = cbar(x).powi(2);
                if c2 == 0.0 {
                    return Ok(0.0);
                }
                match (self.kernel.time_factor(), self.multiplicative_spatial(eps)?) {
                    (Some(tf), Some((_, var))) => c2 * tf.integral(t0, t1)? * var,
                    _ => {
                        c2 * time_integral(t0, t1, |s| {
                            Ok(self
                                .kernel
                                .integrate_region(s, eps, Region::Inside, |z| f.apply(z).powi(2))?)
                        })?
                    }
                }
            }
            JumpStructure::Arctan => match self.kernel.time_factor() {
                Some(tf) => tf.integral(t0, t1)? * self.arctan_spatial_variance(eps, x)?,
                None => time_integral(t0, t1, |s| {
                    Ok(self
                        .kernel
                        .integrate_region(s, eps, Region::Inside, |z| (x * z).atan().powi(2))?)
                })?,
            },
            JumpStructure::General(c) => time_integral(t0, t1, |s| {
                Ok(self
                    .kernel
                    .integrate_region(s, eps, Region::Inside, |z| c(s, x, z).powi(2))?)
            })?,
        };
        Ok(clamp_variance(v))
    }

    /// `(∫_{t0}^{t1}∫_{|z|>eps} f nu, ∫_{t0}^{t1}∫_{B(eps)} f² nu)` for a
    /// multiplicative coefficient `cbar(x) f(z)`.
    pub fn multiplicative_step_masses(
        &self,
        eps: f64,
        t0: f64,
        t1: f64,
    ) -> Result<Option<(f64, f64)>> {
        let JumpStructure::Multiplicative { f, .. } = &self.jump else {
            return Ok(None);
        };
        if t1 <= t0 {
            return Ok(Some((0.0, 0.0)));
        }
        if let (Some(tf), Some((comp, var))) =
            (self.kernel.time_factor(), self.multiplicative_spatial(eps)?)
        {
            let mass = tf.integral(t0, t1)?;
            let var = if eps == 0.0 { 0.0 } else { var };
            return Ok(Some((comp * mass, clamp_variance(var * mass))));
        }
        let comp = if self.odd_compensator {
            0.0
        } else {
            time_integral(t0, t1, |s| {
                Ok(self
                    .kernel
                    .integrate_region(s, eps, Region::Outside, |z| f.apply(z))?)
            })?
        };
        let var = if eps == 0.0 {
            0.0
        } else {
            time_integral(t0, t1, |s| {
                Ok(self
                    .kernel
                    .integrate_region(s, eps, Region::Inside, |z| f.apply(z).powi(2))?)
            })?
        };
        Ok(Some((comp, clamp_variance(var))))
    }

    /// `∫_{B(eps)} arctan²(x z) g(z) dz` for a factorised kernel, using the
    /// hybrid evaluator on stable shapes.
    pub fn arctan_spatial_variance(&self, eps: f64, x: f64) -> Result<f64> {
        if x == 0.0 {
            return Ok(0.0);
        }
        if let Some(s) = self.kernel.stable_shape() {
            let ax = x.abs();
            let side = |bound: f64| arctan_sq_moment(s.alpha, eps.min(bound) * ax);
            return Ok(ax.powf(s.alpha) * (side(s.z_minus) + side(s.z_plus)));
        }
        Ok(self
            .kernel
            .integrate_spatial(eps, Region::Inside, |z| (x * z).atan().powi(2))?
            .unwrap_or(0.0))
    }

    /// `psi_p(t) = (∫ Lbar_c² nu_t)^{p/2} + ∫ Lbar_c^p nu_t`.
    pub fn psi_p_evaluate(&self, t: f64, p: f64) -> Result<f64> {
        let bound = self
            .rate_meta
            .c_lip_bound
            .as_ref()
            .ok_or(ModelError::MissingLipschitzBound)?;
        let (lo, hi) = self.kernel.support();
        let whole = lo.abs().max(hi);
        let integrate = |q: f64| {
            self.kernel
                .integrate_region(t, whole, Region::Inside, |z| bound(t, z).abs().powf(q))
                .map_err(|e| ModelError::Divergent(format!("moment of order {q}: {e}")))
        };
        let l2 = integrate(2.0)?;
        let lp = integrate(p)?;
        if !(l2.is_finite() && lp.is_finite()) {
            return Err(ModelError::Divergent(format!("psi_p at t = {t}")));
        }
        Ok(l2.powf(p / 2.0) + lp)
    }

    /// `∫_{t0}^{t1} ∫_{B(eps)} |c(s, x, z)|^q nu_s(dz) ds`.
    pub fn inside_moment_over_step(
        &self,
        eps: f64,
        x: f64,
        t0: f64,
        t1: f64,
        q: f64,
    ) -> Result<f64> {
        if let (Some(tf), false) = (
            self.kernel.time_factor(),
            matches!(self.jump, JumpStructure::General(_)),
        ) {
            let mass = tf.integral(t0, t1)?;
            let inner = self
                .kernel
                .integrate_spatial(eps, Region::Inside, |z| self.jump.eval(t0, x, z).abs().powf(q))?
                .unwrap();
            return Ok(mass * inner);
        }
        time_integral(t0, t1, |s| {
            Ok(self.kernel.integrate_region(s, eps, Region::Inside, |z| {
                self.jump.eval(s, x, z).abs().powf(q)
            })?)
        })
    }

    /// Monte Carlo estimate of `delta_p^n(eps)` from sampled states, where
    /// `states[path][k]` is the state at the left end of step `k + 1`.
    pub fn delta_diagnostic(&self, eps: f64, n: usize, states: &[Vec<f64>]) -> Result<DeltaReport> {
        let p = self.rate_meta.p as f64;
        let h = self.horizon / n as f64;
        let mut excluded = 0usize;
        let mut total = 0.0;

        // For multiplicative coefficients on factorised kernels the time mass
        // cancels and the ratio is |cbar(x)|^p times a spatial constant.
        let spatial_ratio = match (&self.jump, self.kernel.is_factorised()) {
            (JumpStructure::Multiplicative { f, .. }, true) => {
                let num = self
                    .kernel
                    .integrate_spatial(eps, Region::Inside, |z| f.apply(z).abs().powf(p + 2.0))?
                    .unwrap();
                let den = self
                    .kernel
                    .integrate_spatial(eps, Region::Inside, |z| f.apply(z).powi(2))?
                    .unwrap();
                Some((num, den))
            }
            _ => None,
        };

        for k in 0..n {
            let (t0, t1) = (k as f64 * h, (k + 1) as f64 * h);
            let mut sum = 0.0;
            let mut count = 0usize;
            for path in states {
                let x = path[k];
                let ratio = match (&self.jump, spatial_ratio) {
                    (JumpStructure::Multiplicative { cbar, .. }, Some((num, den))) => {
                        let cb = cbar(x).abs();
                        if cb == 0.0 || den <= 0.0 {
                            None
                        } else {
                            Some(cb.powf(p) * num / den)
                        }
                    }
                    _ => {
                        let den = self.inside_moment_over_step(eps, x, t0, t1, 2.0)?;
                        if den > 0.0 {
                            Some(self.inside_moment_over_step(eps, x, t0, t1, p + 2.0)? / den)
                        } else {
                            None
                        }
                    }
                };
                match ratio {
                    Some(r) => {
                        sum += r.powf(1.0 / p);
                        count += 1;
                    }
                    None => excluded += 1,
                }
            }
            if count > 0 {
                total += (sum / count as f64).powi(2);
            }
        }
        if excluded > 0 {
            warn!("delta diagnostic: {excluded} (path, step) samples excluded, c vanishes on B(eps)");
        }
        Ok(DeltaReport {
            value: total.sqrt(),
            excluded,
        })
    }
}
