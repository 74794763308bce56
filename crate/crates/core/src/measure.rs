//! Time-inhomogeneous compensator families `nu_t(dz)`.
//!
//! A [`CompensatorKernel`] is either *factorised*, `nu_t(dz) = phi(t) g(z) dz`,
//! or fully general with a density `k(t, z)`. Truncated stable shapes
//! `|z|^{-1-alpha}` on `[-z_minus, z_plus]` carry closed forms for tail
//! masses, moments, the conditional CDF and its quantile; everything else
//! falls back to adaptive quadrature and bisection.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::quad::{bisect_increasing, simpson_refined, QuadError, Quadrature};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("eps must be positive (got {0})")]
    NonPositiveEps(f64),
    #[error("quantile level must lie in (0, 1] (got {0})")]
    LevelOutOfRange(f64),
    #[error("no mass outside B({eps}): conditional jump law undefined")]
    EmptyTail { eps: f64 },
    #[error("time interval [{t0}, {t1}] is not ordered")]
    BadInterval { t0: f64, t1: f64 },
    #[error("time factor is not integrable on [{t0}, {t1}]")]
    NonIntegrable { t0: f64, t1: f64 },
    #[error("integral diverges: {0}")]
    Divergent(String),
    #[error("invalid kernel parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

pub type Result<T> = std::result::Result<T, MeasureError>;

pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type SpaceFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type DensityFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Multiplicative time modulation `phi(t)` of a factorised kernel.
#[derive(Clone)]
pub enum TimeFactor {
    Constant,
    /// `phi(t) = t^rho`.
    Power { rho: f64 },
    /// `phi(t) = (t ∧ t_star)^exponent`.
    CappedPower { t_star: f64, exponent: f64 },
    Custom(TimeFn),
}

impl fmt::Debug for TimeFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant => write!(f, "Constant"),
            Self::Power { rho } => write!(f, "Power {{ rho: {rho} }}"),
            Self::CappedPower { t_star, exponent } => {
                write!(f, "CappedPower {{ t_star: {t_star}, exponent: {exponent} }}")
            }
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl TimeFactor {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Power { rho } => t.powf(*rho),
            Self::CappedPower { t_star, exponent } => t.min(*t_star).powf(*exponent),
            Self::Custom(f) => f(t),
        }
    }

    pub fn has_closed_integral(&self) -> bool {
        !matches!(self, Self::Custom(_))
    }

    /// Antiderivative from 0, when it exists in closed form.
    fn primitive(&self, s: f64) -> Option<f64> {
        match self {
            Self::Constant => Some(s),
            Self::Power { rho } => {
                let k = rho + 1.0;
                Some(s.powf(k) / k)
            }
            Self::CappedPower { t_star, exponent } => {
                let k = exponent + 1.0;
                if s <= *t_star {
                    Some(s.powf(k) / k)
                } else {
                    Some(t_star.powf(k) / k + t_star.powf(*exponent) * (s - t_star))
                }
            }
            Self::Custom(_) => None,
        }
    }

    /// `∫_{t0}^{t1} phi(s) ds`.
    pub fn integral(&self, t0: f64, t1: f64) -> Result<f64> {
        if t1 < t0 || t0 < 0.0 {
            return Err(MeasureError::BadInterval { t0, t1 });
        }
        if t0 == t1 {
            return Ok(0.0);
        }
        match self {
            Self::Constant => Ok(t1 - t0),
            Self::Power { rho } => {
                if *rho <= -1.0 && t0 == 0.0 {
                    return Err(MeasureError::NonIntegrable { t0, t1 });
                }
                if (*rho + 1.0).abs() < 1e-15 {
                    return Ok((t1 / t0).ln());
                }
                let k = rho + 1.0;
                Ok((t1.powf(k) - t0.powf(k)) / k)
            }
            Self::CappedPower { exponent, .. } => {
                if *exponent <= -1.0 && t0 == 0.0 {
                    return Err(MeasureError::NonIntegrable { t0, t1 });
                }
                Ok(self.primitive(t1).unwrap() - self.primitive(t0).unwrap())
            }
            Self::Custom(f) => {
                let v = simpson_refined(|s| f(s), t0, t1, 1e-12)
                    .map_err(|_| MeasureError::NonIntegrable { t0, t1 })?;
                Ok(v)
            }
        }
    }

    /// Solves `∫_{origin}^{s} phi = mass` for `s`, capped at `horizon`.
    pub fn inverse_integral(&self, origin: f64, mass: f64, horizon: f64) -> Result<f64> {
        match self {
            Self::Constant => Ok((origin + mass).min(horizon)),
            Self::Power { rho } if (*rho + 1.0).abs() > 1e-15 => {
                let k = rho + 1.0;
                let base = origin.powf(k) / k + mass;
                Ok((k * base).powf(1.0 / k).min(horizon))
            }
            Self::CappedPower { t_star, exponent } if *exponent > -1.0 => {
                let k = exponent + 1.0;
                let target = self.primitive(origin).unwrap() + mass;
                let at_star = t_star.powf(k) / k;
                let s = if target <= at_star {
                    (k * target).powf(1.0 / k)
                } else {
                    t_star + (target - at_star) / t_star.powf(*exponent)
                };
                Ok(s.min(horizon))
            }
            _ => {
                let s = bisect_increasing(
                    |s| self.integral(origin, s).map_err(|_| QuadError::NonFinite { at: s }),
                    mass,
                    origin,
                    horizon,
                    1e-12,
                );
                match s {
                    Ok(s) => Ok(s),
                    Err(QuadError::NoBracket { .. }) => Ok(horizon),
                    Err(e) => Err(e.into()),
                }
            }
        }
    }
}

/// `|z|^{-1-alpha}` on `[-z_minus, z_plus]`, with `alpha` in `[0, 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableShape {
    pub alpha: f64,
    pub z_minus: f64,
    pub z_plus: f64,
}

/// `∫_lo^hi z^{k-1-alpha} dz` for `0 <= lo <= hi`.
fn power_integral(lo: f64, hi: f64, k: f64, alpha: f64) -> Result<f64> {
    if hi <= lo {
        return Ok(0.0);
    }
    let e = k - alpha;
    if lo == 0.0 {
        if e <= 0.0 {
            return Err(MeasureError::Divergent(format!(
                "moment of order {k} at the origin for index {alpha}"
            )));
        }
        return Ok(hi.powf(e) / e);
    }
    if e.abs() < 1e-14 {
        Ok((hi / lo).ln())
    } else {
        Ok((hi.powf(e) - lo.powf(e)) / e)
    }
}

impl StableShape {
    pub fn symmetric(alpha: f64, b: f64) -> Self {
        Self {
            alpha,
            z_minus: b,
            z_plus: b,
        }
    }

    pub fn density(&self, z: f64) -> f64 {
        if z == 0.0 || z < -self.z_minus || z > self.z_plus {
            0.0
        } else {
            z.abs().powf(-1.0 - self.alpha)
        }
    }

    fn branch_masses(&self, eps: f64) -> (f64, f64) {
        let a = self.alpha;
        let m = |bound: f64| power_integral(eps, bound, 0.0, a).unwrap_or(0.0);
        (m(self.z_minus), m(self.z_plus))
    }

    pub fn tail_mass(&self, eps: f64) -> f64 {
        let (n, p) = self.branch_masses(eps);
        n + p
    }

    pub fn abs_moment(&self, eps: f64, p: f64, inside: bool) -> Result<f64> {
        let a = self.alpha;
        let side = |bound: f64| -> Result<f64> {
            if inside {
                power_integral(0.0, eps.min(bound), p, a)
            } else {
                power_integral(eps, bound, p, a)
            }
        };
        Ok(side(self.z_minus)? + side(self.z_plus)?)
    }

    /// `∫_{|z|>eps} z^k g(z) dz` for integer `k`, keeping the sign of `z^k`.
    pub fn signed_moment_outside(&self, eps: f64, k: i32) -> f64 {
        let a = self.alpha;
        let pos = power_integral(eps, self.z_plus, k as f64, a).unwrap_or(0.0);
        let neg = power_integral(eps, self.z_minus, k as f64, a).unwrap_or(0.0);
        if k % 2 == 0 {
            pos + neg
        } else {
            pos - neg
        }
    }

    /// Conditional CDF `G^eps(x)` of a jump given `|z| > eps`.
    pub fn conditional_cdf(&self, eps: f64, x: f64) -> f64 {
        let (mn, mp) = self.branch_masses(eps);
        let total = mn + mp;
        if total <= 0.0 {
            return f64::NAN;
        }
        let a = self.alpha;
        let acc = if x < -eps {
            let lo = (-x).min(self.z_minus);
            if -x >= self.z_minus {
                0.0
            } else {
                power_integral(lo, self.z_minus, 0.0, a).unwrap_or(0.0)
            }
        } else if x <= eps {
            mn
        } else {
            mn + power_integral(eps, x.min(self.z_plus), 0.0, a).unwrap_or(0.0)
        };
        (acc / total).clamp(0.0, 1.0)
    }

    /// Quantile `Q^eps(y) = inf{x : y <= G^eps(x)}`, generalising the two
    /// symmetric branches by renormalising each side with its own mass.
    pub fn quantile(&self, eps: f64, y: f64) -> f64 {
        let (mn, mp) = self.branch_masses(eps);
        let total = mn + mp;
        let a = self.alpha;
        let p_neg = mn / total;
        if y <= p_neg && mn > 0.0 {
            let m = y * total;
            if a == 0.0 {
                -self.z_minus * (-m).exp()
            } else {
                -(a * m + self.z_minus.powf(-a)).powf(-1.0 / a)
            }
        } else {
            let r = ((y - p_neg) * total).max(0.0);
            if a == 0.0 {
                (eps * r.exp()).min(self.z_plus)
            } else {
                (eps.powf(-a) - a * r).max(self.z_plus.powf(-a)).powf(-1.0 / a)
            }
        }
    }
}

/// Which part of the jump space an integral runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// `B(eps) = {|z| <= eps}`.
    Inside,
    /// `{|z| > eps}`.
    Outside,
}

#[derive(Clone)]
enum Shape {
    Factorised {
        time_factor: TimeFactor,
        spatial: SpaceFn,
        stable: Option<StableShape>,
    },
    General(DensityFn),
}

/// Family of compensator measures `nu_t(dz)` with a Lebesgue density.
#[derive(Clone)]
pub struct CompensatorKernel {
    shape: Shape,
    support: (f64, f64),
    bg_index: f64,
    quad: Quadrature,
    name: String,
}

impl fmt::Debug for CompensatorKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompensatorKernel")
            .field("name", &self.name)
            .field("support", &self.support)
            .field("bg_index", &self.bg_index)
            .field("time_factor", &self.time_factor())
            .field("stable", &self.stable_shape())
            .finish()
    }
}

/// Parameters for a (possibly asymmetric, possibly time-modulated) truncated
/// stable kernel `kappa(t)|z|^{-1-alpha} 1_{[-z_minus, z_plus]}`.
#[derive(Debug, Clone)]
pub struct TruncatedStableSpec {
    pub alpha: f64,
    pub b_trunc: f64,
    pub kappa: Option<TimeFactor>,
    pub asym_bounds: Option<(f64, f64)>,
}

impl TruncatedStableSpec {
    pub fn new(alpha: f64, b_trunc: f64) -> Self {
        Self {
            alpha,
            b_trunc,
            kappa: None,
            asym_bounds: None,
        }
    }

    pub fn build(&self) -> Result<CompensatorKernel> {
        CompensatorKernel::truncated_stable(self)
    }
}

impl CompensatorKernel {
    pub fn truncated_stable(spec: &TruncatedStableSpec) -> Result<Self> {
        let (z_minus, z_plus) = spec.asym_bounds.unwrap_or((spec.b_trunc, spec.b_trunc));
        if !(0.0..2.0).contains(&spec.alpha) {
            return Err(MeasureError::InvalidParameters(format!(
                "alpha must lie in [0, 2), got {}",
                spec.alpha
            )));
        }
        if !(z_minus >= 0.0 && z_plus >= 0.0) || z_minus + z_plus <= 0.0 {
            return Err(MeasureError::InvalidParameters(format!(
                "truncation bounds must be nonnegative and not both zero, got ({z_minus}, {z_plus})"
            )));
        }
        let shape = StableShape {
            alpha: spec.alpha,
            z_minus,
            z_plus,
        };
        let time_factor = spec.kappa.clone().unwrap_or(TimeFactor::Constant);
        let name = match (&spec.kappa, spec.asym_bounds) {
            (None, None) => format!("truncated_stable{{alpha={},b={}}}", spec.alpha, spec.b_trunc),
            _ => format!("stable{{alpha={},z_minus={z_minus},z_plus={z_plus}}}", spec.alpha),
        };
        Ok(Self {
            shape: Shape::Factorised {
                time_factor,
                spatial: Arc::new(move |z| shape.density(z)),
                stable: Some(shape),
            },
            support: (-z_minus, z_plus),
            bg_index: spec.alpha,
            quad: Quadrature::default(),
            name,
        })
    }

    /// `phi(t) g(z)` with `g` supported on `support`.
    pub fn factorised(
        time_factor: TimeFactor,
        spatial: SpaceFn,
        support: (f64, f64),
        bg_index: f64,
    ) -> Result<Self> {
        check_support(support)?;
        Ok(Self {
            shape: Shape::Factorised {
                time_factor,
                spatial,
                stable: None,
            },
            support,
            bg_index,
            quad: Quadrature::default(),
            name: "factorised".into(),
        })
    }

    /// Fully general density `k(t, z)`.
    pub fn general(density: DensityFn, support: (f64, f64), bg_index: f64) -> Result<Self> {
        check_support(support)?;
        Ok(Self {
            shape: Shape::General(density),
            support,
            bg_index,
            quad: Quadrature::default(),
            name: "general".into(),
        })
    }

    /// Kernel with no jumps at all.
    pub fn zero() -> Self {
        Self {
            shape: Shape::Factorised {
                time_factor: TimeFactor::Constant,
                spatial: Arc::new(|_| 0.0),
                stable: None,
            },
            support: (-1.0, 1.0),
            bg_index: 0.0,
            quad: Quadrature::default(),
            name: "zero".into(),
        }
    }

    pub fn truncated_stable_preset(alpha: f64, b: f64) -> Result<Self> {
        TruncatedStableSpec::new(alpha, b).build()
    }

    /// `t^rho |z|^{-1-alpha}` on `[-b, b]`.
    pub fn time_modulated_stable(alpha: f64, b: f64, rho: f64) -> Result<Self> {
        let mut k = TruncatedStableSpec {
            kappa: Some(TimeFactor::Power { rho }),
            ..TruncatedStableSpec::new(alpha, b)
        }
        .build()?;
        k.name = format!("time_modulated_stable{{alpha={alpha},b={b},rho={rho}}}");
        Ok(k)
    }

    /// `(t ∧ t_star)^{q-1} |z|^{-1-alpha}` on `[-z_minus, z_plus]`.
    pub fn fiber_kernel(alpha: f64, z_minus: f64, z_plus: f64, t_star: f64, q: f64) -> Result<Self> {
        if t_star <= 0.0 || q <= 0.0 {
            return Err(MeasureError::InvalidParameters(format!(
                "fiber kernel needs t_star > 0 and q > 0, got ({t_star}, {q})"
            )));
        }
        let mut k = TruncatedStableSpec {
            alpha,
            b_trunc: z_minus.max(z_plus),
            kappa: Some(TimeFactor::CappedPower {
                t_star,
                exponent: q - 1.0,
            }),
            asym_bounds: Some((z_minus, z_plus)),
        }
        .build()?;
        k.name = format!(
            "fiber_kernel{{alpha={alpha},z_minus={z_minus},z_plus={z_plus},Tstar={t_star},q={q}}}"
        );
        Ok(k)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_quadrature(mut self, quad: Quadrature) -> Self {
        self.quad = quad;
        self
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn bg_index(&self) -> f64 {
        self.bg_index
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quad
    }

    pub fn time_factor(&self) -> Option<&TimeFactor> {
        match &self.shape {
            Shape::Factorised { time_factor, .. } => Some(time_factor),
            Shape::General(_) => None,
        }
    }

    pub fn stable_shape(&self) -> Option<&StableShape> {
        match &self.shape {
            Shape::Factorised { stable, .. } => stable.as_ref(),
            Shape::General(_) => None,
        }
    }

    pub fn is_factorised(&self) -> bool {
        matches!(self.shape, Shape::Factorised { .. })
    }

    pub fn is_time_homogeneous(&self) -> bool {
        matches!(
            self.shape,
            Shape::Factorised {
                time_factor: TimeFactor::Constant,
                ..
            }
        )
    }

    /// Whether `g(-z) = g(z)` holds (checked structurally for stable shapes,
    /// by probing otherwise).
    pub fn is_symmetric(&self) -> bool {
        if let Some(s) = self.stable_shape() {
            return s.z_minus == s.z_plus;
        }
        if self.support.0 != -self.support.1 {
            return false;
        }
        let b = self.support.1;
        (1..=64).all(|k| {
            let z = b * k as f64 / 65.0;
            let t = 0.5;
            let (l, r) = (self.density(t, -z), self.density(t, z));
            (l - r).abs() <= 1e-12 * l.abs().max(r.abs()).max(1e-300)
        })
    }

    pub fn density(&self, t: f64, z: f64) -> f64 {
        if z < self.support.0 || z > self.support.1 {
            return 0.0;
        }
        match &self.shape {
            Shape::Factorised {
                time_factor,
                spatial,
                ..
            } => time_factor.value(t) * spatial(z),
            Shape::General(k) => k(t, z),
        }
    }

    /// Spatial density `g` of a factorised kernel.
    pub fn spatial_density(&self, z: f64) -> Option<f64> {
        match &self.shape {
            Shape::Factorised { spatial, .. } => {
                if z < self.support.0 || z > self.support.1 {
                    Some(0.0)
                } else {
                    Some(spatial(z))
                }
            }
            Shape::General(_) => None,
        }
    }

    /// Whether `nu_t` has finite total mass (so `eps = 0` is admissible).
    pub fn is_finite_activity(&self) -> bool {
        if self.stable_shape().is_some() {
            return false;
        }
        match self.integrate_region(0.5, 0.0, Region::Outside, |_| 1.0) {
            Ok(v) => v.is_finite(),
            Err(_) => false,
        }
    }

    fn region_pieces(&self, eps: f64, region: Region) -> Vec<(f64, f64)> {
        let (lo, hi) = self.support;
        match region {
            Region::Outside => {
                let mut v = Vec::with_capacity(2);
                if lo < -eps {
                    v.push((lo, -eps));
                }
                if hi > eps {
                    v.push((eps, hi));
                }
                v
            }
            Region::Inside => {
                let mut v = Vec::with_capacity(2);
                let l = lo.max(-eps);
                let h = hi.min(eps);
                if l < 0.0 {
                    v.push((l, 0.0));
                }
                if h > 0.0 {
                    v.push((0.0, h));
                }
                v
            }
        }
    }

    fn integrate_density<F: Fn(f64) -> f64>(
        &self,
        eps: f64,
        region: Region,
        dens: F,
    ) -> Result<f64> {
        let mut sum = 0.0;
        for (a, b) in self.region_pieces(eps, region) {
            sum += self.quad.integrate(&dens, a, b)?;
        }
        Ok(sum)
    }

    /// `∫_{region} h(z) nu_t(dz)` by quadrature.
    pub fn integrate_region<H: Fn(f64) -> f64>(
        &self,
        t: f64,
        eps: f64,
        region: Region,
        h: H,
    ) -> Result<f64> {
        match &self.shape {
            Shape::Factorised {
                time_factor,
                spatial,
                ..
            } => {
                let phi = time_factor.value(t);
                if phi == 0.0 {
                    return Ok(0.0);
                }
                Ok(phi * self.integrate_density(eps, region, |z| h(z) * spatial(z))?)
            }
            Shape::General(k) => self.integrate_density(eps, region, |z| h(z) * k(t, z)),
        }
    }

    /// `∫_{region} h(z) g(z) dz` for a factorised kernel.
    pub fn integrate_spatial<H: Fn(f64) -> f64>(
        &self,
        eps: f64,
        region: Region,
        h: H,
    ) -> Result<Option<f64>> {
        match &self.shape {
            Shape::Factorised { spatial, .. } => Ok(Some(
                self.integrate_density(eps, region, |z| h(z) * spatial(z))?,
            )),
            Shape::General(_) => Ok(None),
        }
    }

    fn check_eps(&self, eps: f64) -> Result<()> {
        if eps > 0.0 || (eps == 0.0 && self.stable_shape().is_none()) {
            Ok(())
        } else {
            Err(MeasureError::NonPositiveEps(eps))
        }
    }

    /// Spatial tail mass `∫_{|z|>eps} g` of a factorised kernel.
    pub fn spatial_tail(&self, eps: f64) -> Result<Option<f64>> {
        self.check_eps(eps)?;
        if let Some(s) = self.stable_shape() {
            return Ok(Some(s.tail_mass(eps)));
        }
        self.integrate_spatial(eps, Region::Outside, |_| 1.0)
    }

    /// `lambda^eps(t) = nu_t({|z| > eps})`.
    pub fn tail_intensity(&self, t: f64, eps: f64) -> Result<f64> {
        self.check_eps(eps)?;
        if let Some(s) = self.stable_shape() {
            let phi = self.time_factor().map_or(1.0, |f| f.value(t));
            return Ok(phi * s.tail_mass(eps));
        }
        self.integrate_region(t, eps, Region::Outside, |_| 1.0)
    }

    /// `Lambda^eps(t0, t1) = ∫_{t0}^{t1} lambda^eps(s) ds`.
    pub fn cumulative_intensity(&self, eps: f64, t0: f64, t1: f64) -> Result<f64> {
        self.check_eps(eps)?;
        if t1 < t0 || t0 < 0.0 {
            return Err(MeasureError::BadInterval { t0, t1 });
        }
        if t0 == t1 {
            return Ok(0.0);
        }
        match &self.shape {
            Shape::Factorised { time_factor, .. } => {
                let mass = self.spatial_tail(eps)?.unwrap_or(0.0);
                if mass == 0.0 {
                    return Ok(0.0);
                }
                Ok(mass * time_factor.integral(t0, t1)?)
            }
            Shape::General(_) => {
                let v = simpson_refined(
                    |s| self.tail_intensity(s, eps).unwrap_or(f64::NAN),
                    t0,
                    t1,
                    1e-12,
                )
                .map_err(|_| MeasureError::NonIntegrable { t0, t1 })?;
                Ok(v)
            }
        }
    }

    /// `∫_{region} |z|^p nu_t(dz)`.
    pub fn truncated_moment(&self, t: f64, eps: f64, p: f64, region: Region) -> Result<f64> {
        if p < 0.0 {
            return Err(MeasureError::InvalidParameters(format!(
                "moment order must be nonnegative, got {p}"
            )));
        }
        if eps < 0.0 {
            return Err(MeasureError::NonPositiveEps(eps));
        }
        if region == Region::Outside {
            self.check_eps(eps)?;
        }
        if let Some(s) = self.stable_shape() {
            let phi = self.time_factor().map_or(1.0, |f| f.value(t));
            if phi == 0.0 {
                return Ok(0.0);
            }
            return Ok(phi * s.abs_moment(eps, p, region == Region::Inside)?);
        }
        self.integrate_region(t, eps, region, |z| z.abs().powf(p))
    }

    /// Conditional CDF of a jump at time `t` given `|z| > eps`.
    pub fn jump_size_cdf(&self, t: f64, eps: f64, x: f64) -> Result<f64> {
        let tail = self.tail_intensity(t, eps)?;
        if tail <= 0.0 {
            return Err(MeasureError::EmptyTail { eps });
        }
        if let Some(s) = self.stable_shape() {
            return Ok(s.conditional_cdf(eps, x));
        }
        let (lo, hi) = self.support;
        let x = x.clamp(lo, hi);
        let mut acc = 0.0;
        for (a, b) in self.region_pieces(eps, Region::Outside) {
            if x <= a {
                continue;
            }
            acc += self
                .quad
                .integrate(|z| self.density(t, z), a, x.min(b))?;
        }
        Ok((acc / tail).clamp(0.0, 1.0))
    }

    /// Conditional quantile `Q^eps(y)` at time `t`.
    pub fn jump_size_quantile(&self, t: f64, eps: f64, y: f64) -> Result<f64> {
        if !(y > 0.0 && y <= 1.0) {
            return Err(MeasureError::LevelOutOfRange(y));
        }
        self.check_eps(eps)?;
        if let Some(s) = self.stable_shape() {
            if s.tail_mass(eps) <= 0.0 {
                return Err(MeasureError::EmptyTail { eps });
            }
            return Ok(s.quantile(eps, y));
        }
        let tail = self.tail_intensity(t, eps)?;
        if tail <= 0.0 {
            return Err(MeasureError::EmptyTail { eps });
        }
        let (lo, hi) = self.support;
        let x = bisect_increasing(
            |x| {
                self.jump_size_cdf(t, eps, x)
                    .map_err(|_| QuadError::NonFinite { at: x })
            },
            y,
            lo,
            hi,
            1e-12,
        )?;
        // The CDF is flat on [-eps, eps]; report the left edge of the jump.
        if x > -eps && x <= eps && lo < -eps {
            Ok(-eps)
        } else {
            Ok(x)
        }
    }
}

fn check_support(support: (f64, f64)) -> Result<()> {
    let (lo, hi) = support;
    if lo <= 0.0 && hi >= 0.0 && lo < hi && lo.is_finite() && hi.is_finite() {
        Ok(())
    } else {
        Err(MeasureError::InvalidParameters(format!(
            "support must be a finite interval containing 0, got ({lo}, {hi})"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn tail_intensity_cauchy_case() {
        let k = CompensatorKernel::truncated_stable_preset(1.0, 1.0).unwrap();
        assert!(close(k.tail_intensity(0.3, 0.5).unwrap(), 2.0, 1e-14));
        assert_eq!(k.tail_intensity(0.3, 1.0).unwrap(), 0.0);
        assert!(k.tail_intensity(0.3, 0.0).is_err());
        assert!(k.tail_intensity(0.3, -1.0).is_err());
    }

    #[test]
    fn quantile_branches() {
        let k = CompensatorKernel::truncated_stable_preset(1.0, 1.0).unwrap();
        assert!(close(k.jump_size_quantile(0.0, 0.5, 0.75).unwrap(), 2.0 / 3.0, 1e-14));
        assert!(close(k.jump_size_quantile(0.0, 0.5, 1.0).unwrap(), 1.0, 1e-14));
        assert!(close(k.jump_size_quantile(0.0, 0.5, 0.5).unwrap(), -0.5, 1e-14));
        assert!(k.jump_size_quantile(0.0, 0.5, 0.0).is_err());
        assert!(k.jump_size_quantile(0.0, 0.5, 1.5).is_err());
        assert!(matches!(
            k.jump_size_quantile(0.0, 1.0, 0.5),
            Err(MeasureError::EmptyTail { .. })
        ));
    }

    #[test]
    fn quantile_matches_symmetric_formula() {
        let (alpha, eps, b) = (0.7_f64, 0.05_f64, 3.0_f64);
        let k = CompensatorKernel::truncated_stable_preset(alpha, b).unwrap();
        let d = eps.powf(-alpha) - b.powf(-alpha);
        for &y in &[0.01, 0.2, 0.49, 0.51, 0.8, 0.999] {
            let want = if y <= 0.5 {
                -(2.0 * y * d + b.powf(-alpha)).powf(-1.0 / alpha)
            } else {
                ((1.0 - 2.0 * y) * d + eps.powf(-alpha)).powf(-1.0 / alpha)
            };
            assert!(close(k.jump_size_quantile(0.0, eps, y).unwrap(), want, 1e-12));
        }
    }

    #[test]
    fn zero_alpha_uses_log_forms() {
        let k = CompensatorKernel::truncated_stable_preset(0.0, 1.0).unwrap();
        assert!(close(k.tail_intensity(0.0, 0.1).unwrap(), 2.0 * 10f64.ln(), 1e-14));
        let q = k.jump_size_quantile(0.0, 0.1, 0.75).unwrap();
        assert!(close(q, 0.1 * 10f64.sqrt(), 1e-13));
        let s = k.stable_shape().unwrap();
        assert!(close(s.conditional_cdf(0.1, q), 0.75, 1e-13));
    }

    #[test]
    fn cumulative_intensity_power_factor() {
        let k = CompensatorKernel::time_modulated_stable(0.5, 10.0, -0.75).unwrap();
        let tail = k.tail_intensity(1.0, 1.0).unwrap();
        let v = k.cumulative_intensity(1.0, 0.0, 1.0).unwrap();
        assert!(close(v, 4.0 * tail, 1e-13));
        assert_eq!(k.cumulative_intensity(1.0, 0.4, 0.4).unwrap(), 0.0);
        let bad = CompensatorKernel::time_modulated_stable(0.5, 10.0, -1.0).unwrap();
        assert!(matches!(
            bad.cumulative_intensity(1.0, 0.0, 1.0),
            Err(MeasureError::NonIntegrable { .. })
        ));
        assert!(bad.cumulative_intensity(1.0, 0.5, 1.0).is_ok());
    }

    #[test]
    fn inner_moment_closed_form() {
        let k = CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap();
        let v = k.truncated_moment(0.0, 0.1, 2.0, Region::Inside).unwrap();
        assert!(close(v, 2.0 * 0.1f64.powf(1.5) / 1.5, 1e-14));
        assert_eq!(k.truncated_moment(0.0, 0.0, 2.0, Region::Inside).unwrap(), 0.0);
    }

    #[test]
    fn general_kernel_quantile_by_bisection() {
        let dens: DensityFn = Arc::new(|_, z: f64| z.abs().powf(-2.0));
        let k = CompensatorKernel::general(dens, (-1.0, 1.0), 1.0).unwrap();
        assert!(close(k.tail_intensity(0.0, 0.5).unwrap(), 2.0, 1e-10));
        let q = k.jump_size_quantile(0.0, 0.5, 0.75).unwrap();
        assert!((q - 2.0 / 3.0).abs() < 1e-9, "{q}");
        assert!((k.jump_size_quantile(0.0, 0.5, 0.5).unwrap() + 0.5).abs() < 1e-9);
    }

    #[test]
    fn finite_activity_detection() {
        let stable = CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap();
        assert!(!stable.is_finite_activity());
        let dens: DensityFn = Arc::new(|_, _| 1.0);
        let unif = CompensatorKernel::general(dens, (-1.0, 1.0), 0.0).unwrap();
        assert!(unif.is_finite_activity());
        assert!(close(unif.tail_intensity(0.0, 0.0).unwrap(), 2.0, 1e-12));
    }

    #[test]
    fn capped_power_inverse() {
        let f = TimeFactor::CappedPower {
            t_star: 0.2,
            exponent: 0.5,
        };
        for &s in &[0.05, 0.2, 0.7] {
            let m = f.integral(0.0, s).unwrap();
            assert!(close(f.inverse_integral(0.0, m, 1.0).unwrap(), s, 1e-12));
        }
        let g = TimeFactor::Custom(Arc::new(|t| 1.0 + t));
        let m = g.integral(0.1, 0.6).unwrap();
        assert!(close(m, 0.5 + 0.5 * (0.36 - 0.01), 1e-11));
        assert!((g.inverse_integral(0.1, m, 1.0).unwrap() - 0.6).abs() < 1e-10);
    }
}
