//! Ready-made models for the experiments, plus user models built from
//! coefficient expressions.

use std::sync::Arc;

use super::{
    check_multiplicative, coef, real_fn, Coef, JumpFn, JumpSizeMap, JumpStructure, ModelError,
    RateHypotheses, RealFn, Result, SdeModel, WeakErrorSpec,
};
use crate::expr::Expr;
use crate::measure::{CompensatorKernel, TruncatedStableSpec};

pub const PRESET_NAMES: [&str; 5] = [
    "strong_p_sweep",
    "low_integrability",
    "weak_multiplicative",
    "weak_arctan",
    "subordinator_lower_bound",
];

fn abs_z_bound() -> Coef {
    coef(|_, z| z.abs())
}

/// `dX = cos X dt + ∫ sin(X⁻) z Ñ(dt,dz)`, `nu = |z|^{-3/2} 1_{|z|<=1}`, `X_0 = 0`.
pub fn strong_p_sweep() -> Result<SdeModel> {
    let kernel = CompensatorKernel::truncated_stable_preset(0.5, 1.0)?;
    let meta = RateHypotheses::new(1.0, 1.0, 2)?
        .with_sublinear(1.0)
        .with_lip_bound(abs_z_bound());
    Ok(SdeModel::new(
        "strong_p_sweep",
        coef(|_, x| x.cos()),
        None,
        JumpStructure::Multiplicative {
            cbar: real_fn(f64::sin),
            f: JumpSizeMap::Identity,
        },
        kernel,
        0.0,
        1.0,
        meta,
    )?
    .with_density_coupling(true))
}

/// Integrability exponent `zeta` of `s ↦ s^rho`, capped at one.
pub fn zeta_for_rho(rho: f64) -> Result<f64> {
    if rho <= -1.0 || rho > 0.0 {
        return Err(ModelError::InvalidParameters(format!(
            "rho must lie in (-1, 0], got {rho}"
        )));
    }
    Ok(if rho == 0.0 {
        1.0
    } else {
        (1.0 / rho.abs() - 1.0).min(1.0)
    })
}

/// `dX = sin X dt + ∫ cos(X⁻) z Ñ(dt,dz)`, `nu_s = s^rho |z|^{-3/2} 1_{|z|<=10}`,
/// `X_0 = 1`.
pub fn low_integrability(rho: f64) -> Result<SdeModel> {
    let zeta = zeta_for_rho(rho)?;
    let kernel = CompensatorKernel::time_modulated_stable(0.5, 10.0, rho)?;
    let meta = RateHypotheses::new(1.0, zeta, 2)?
        .with_sublinear(1.0)
        .with_lip_bound(abs_z_bound());
    Ok(SdeModel::new(
        format!("low_integrability{{rho={rho}}}"),
        coef(|_, x| x.sin()),
        None,
        JumpStructure::Multiplicative {
            cbar: real_fn(f64::cos),
            f: JumpSizeMap::Identity,
        },
        kernel,
        1.0,
        1.0,
        meta,
    )?
    .with_density_coupling(true))
}

/// Source term for `u = (1 - e^{T-t}/2) x²` under `a = -2x`, `c = sin(x) z`
/// and the `b`-truncated stable kernel of index `alpha`.
pub fn weak_multiplicative_source(alpha: f64, b: f64, horizon: f64) -> Coef {
    let m2 = 2.0 * b.powf(2.0 - alpha) / (2.0 - alpha);
    coef(move |t, x| {
        let e = (horizon - t).exp();
        let a = 1.0 - 0.5 * e;
        0.5 * x * x * e - 4.0 * a * x * x + a * x.sin().powi(2) * m2
    })
}

/// `dX = -2X dt + ∫ sin(X⁻) z Ñ(dt,dz)`, `nu = |z|^{-1-alpha} 1_{|z|<=10}`,
/// `X_0 = 10`, with `u(t,x) = (1 - e^{T-t}/2) x²`.
pub fn weak_multiplicative(alpha: f64) -> Result<SdeModel> {
    let horizon = 1.0;
    let kernel = CompensatorKernel::truncated_stable_preset(alpha, 10.0)?;
    let meta = RateHypotheses::new(1.0, 1.0, 2)?
        .with_sublinear(1.0)
        .with_lip_bound(abs_z_bound());
    let weak = WeakErrorSpec {
        phi: real_fn(|x| 0.5 * x * x),
        source_g: weak_multiplicative_source(alpha, 10.0, horizon),
        u_exact: coef(move |t, x| (1.0 - 0.5 * (horizon - t).exp()) * x * x),
    };
    SdeModel::new(
        format!("weak_multiplicative{{alpha={alpha}}}"),
        coef(|_, x| -2.0 * x),
        None,
        JumpStructure::Multiplicative {
            cbar: real_fn(f64::sin),
            f: JumpSizeMap::Identity,
        },
        kernel,
        10.0,
        horizon,
        meta,
    )?
    .with_density_coupling(true)
    .with_weak_spec(weak)
}

/// Source term for `u = sin x` under `a = -2x`, `c = arctan(x z)` and
/// `nu = |z|^{-1} 1_{|z|<=1}`.
pub fn weak_arctan_source() -> Coef {
    coef(|_, x| {
        -2.0 * x * x.cos()
            + 2.0 * x.sin() * (std::f64::consts::LN_2 - ((x * x + 1.0).sqrt() + 1.0).ln())
    })
}

/// `dX = -2X dt + ∫ arctan(z X⁻) Ñ(dt,dz)`, `nu = |z|^{-1} 1_{|z|<=1}`,
/// `X_0 = 10`, with `u(t,x) = sin x`.
pub fn weak_arctan() -> Result<SdeModel> {
    let kernel = CompensatorKernel::truncated_stable_preset(0.0, 1.0)?;
    let meta = RateHypotheses::new(1.0, 1.0, 2)?
        .with_sublinear(1.0)
        .with_lip_bound(abs_z_bound());
    let weak = WeakErrorSpec {
        phi: real_fn(f64::sin),
        source_g: weak_arctan_source(),
        u_exact: coef(|_, x| x.sin()),
    };
    SdeModel::new(
        "weak_arctan",
        coef(|_, x| -2.0 * x),
        None,
        JumpStructure::Arctan,
        kernel,
        10.0,
        1.0,
        meta,
    )?
    .with_density_coupling(true)
    .with_weak_spec(weak)
}

/// `X_t = 1 + ∫ X⁻ dL` for the one-sided truncated stable subordinator
/// `nu = z^{-3/2} 1_{0<z<=1}`; written with a compensated measure the drift
/// is `x ∫_0^1 z nu(dz) = 2x`.
pub fn subordinator_lower_bound() -> Result<SdeModel> {
    let alpha = 0.5;
    let kernel = TruncatedStableSpec {
        asym_bounds: Some((0.0, 1.0)),
        ..TruncatedStableSpec::new(alpha, 1.0)
    }
    .build()?
    .with_name("one_sided_stable{alpha=0.5,b=1}");
    let mean_jump = 1.0 / (1.0 - alpha);
    let meta = RateHypotheses::new(1.0, 1.0, 2)?
        .with_sublinear(1.0)
        .with_lip_bound(abs_z_bound());
    Ok(SdeModel::new(
        "subordinator_lower_bound",
        coef(move |_, x| mean_jump * x),
        None,
        JumpStructure::Multiplicative {
            cbar: real_fn(|x| x),
            f: JumpSizeMap::Identity,
        },
        kernel,
        1.0,
        1.0,
        meta,
    )?
    .with_density_coupling(true))
}

/// Jump coefficient of a user model.
#[derive(Debug, Clone)]
pub enum CustomJump {
    None,
    /// `c = cbar(x) f(z)`; `full`, when given, is probe-checked against the product.
    Multiplicative {
        cbar: Expr,
        f: Expr,
        full: Option<Expr>,
    },
    General(Expr),
}

/// User model assembled from coefficient expressions in `t`, `x`, `z`.
#[derive(Debug, Clone)]
pub struct CustomModelSpec {
    pub name: String,
    pub drift: Expr,
    pub diffusion: Option<Expr>,
    pub jump: CustomJump,
    pub kernel: CompensatorKernel,
    pub x0: f64,
    pub horizon: f64,
    pub rate_meta: RateHypotheses,
    /// `(phi(x), G(t,x), u(t,x))`.
    pub weak: Option<(Expr, Expr, Expr)>,
    pub density_coupling: bool,
}

fn tx(e: Expr) -> Coef {
    Arc::new(move |t, x| e.eval(t, x, 0.0))
}

pub fn custom_model(spec: CustomModelSpec) -> Result<SdeModel> {
    let jump = match spec.jump {
        CustomJump::None => JumpStructure::None,
        CustomJump::Multiplicative { cbar, f, full } => {
            if cbar.uses_t() || cbar.uses_z() {
                return Err(ModelError::InvalidParameters(format!(
                    "jump_cbar may only depend on x: '{cbar}'"
                )));
            }
            if f.uses_t() || f.uses_x() {
                return Err(ModelError::InvalidParameters(format!(
                    "jump_f may only depend on z: '{f}'"
                )));
            }
            let cbar_fn: RealFn = Arc::new(move |x| cbar.eval(0.0, x, 0.0));
            let f_map = if f.source() == "z" {
                JumpSizeMap::Identity
            } else {
                JumpSizeMap::Custom(Arc::new(move |z| f.eval(0.0, 0.0, z)))
            };
            if let Some(full) = full {
                let c: JumpFn = Arc::new(move |t, x, z| full.eval(t, x, z));
                check_multiplicative(&c, &cbar_fn, &f_map, spec.kernel.support(), spec.horizon)?;
            }
            JumpStructure::Multiplicative {
                cbar: cbar_fn,
                f: f_map,
            }
        }
        CustomJump::General(c) => JumpStructure::General(Arc::new(move |t, x, z| c.eval(t, x, z))),
    };
    let model = SdeModel::new(
        spec.name,
        tx(spec.drift),
        spec.diffusion.map(tx),
        jump,
        spec.kernel,
        spec.x0,
        spec.horizon,
        spec.rate_meta,
    )?
    .with_density_coupling(spec.density_coupling);
    match spec.weak {
        Some((phi, g, u)) => model.with_weak_spec(WeakErrorSpec {
            phi: Arc::new(move |x| phi.eval(0.0, x, 0.0)),
            source_g: tx(g),
            u_exact: tx(u),
        }),
        None => Ok(model),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::Quadrature;

    #[test]
    fn presets_build_and_label_rates() {
        let m = strong_p_sweep().unwrap();
        assert!((m.rate_meta().predicted_strong_rate_for(2) - 0.5).abs() < 1e-15);
        assert!((m.rate_meta().predicted_strong_rate_for(4) - 0.25).abs() < 1e-15);
        assert!((m.rate_meta().predicted_strong_rate_for(6) - 1.0 / 6.0).abs() < 1e-15);
        let l = low_integrability(-0.75).unwrap();
        assert!((l.rate_meta().predicted_strong_rate() - 0.25).abs() < 1e-12);
        assert!(low_integrability(-1.0).is_err());
        assert!(weak_multiplicative(1.5).is_ok());
        assert!(weak_arctan().is_ok());
        assert!(subordinator_lower_bound().is_ok());
    }

    #[test]
    fn symmetric_presets_have_vanishing_compensator() {
        assert!(strong_p_sweep().unwrap().compensator_vanishes());
        assert!(weak_arctan().unwrap().compensator_vanishes());
        assert!(!subordinator_lower_bound().unwrap().compensator_vanishes());
    }

    #[test]
    fn multiplicative_source_solves_kolmogorov_equation() {
        // G = du/dt + L u with the generator applied by finite differences
        // in t and quadrature over the jump measure.
        let alpha = 1.5;
        let m = weak_multiplicative(alpha).unwrap();
        let spec = m.weak_spec().unwrap();
        let u = |t: f64, x: f64| (spec.u_exact)(t, x);
        let q = Quadrature::default();
        for &(t, x) in &[(0.0, 10.0), (0.3, -2.5), (0.7, 0.4)] {
            let h = 1e-5;
            let du_dt = (u(t + h, x) - u(t - h, x)) / (2.0 * h);
            let du_dx = 2.0 * (1.0 - 0.5 * (1.0 - t).exp()) * x;
            let jump = |z: f64| {
                let c = x.sin() * z;
                let incr = if z.abs() < 1e-3 {
                    (1.0 - 0.5 * (1.0 - t).exp()) * c * c
                } else {
                    u(t, x + c) - u(t, x) - c * du_dx
                };
                incr * z.abs().powf(-1.0 - alpha)
            };
            let jumps = q.integrate_pieces(jump, &[-10.0, 0.0, 10.0]).unwrap();
            let g = du_dt - 2.0 * x * du_dx + jumps;
            let want = (spec.source_g)(t, x);
            assert!((g - want).abs() < 1e-5 * want.abs().max(1.0), "{g} vs {want}");
        }
    }

    #[test]
    fn arctan_source_solves_kolmogorov_equation() {
        let m = weak_arctan().unwrap();
        let spec = m.weak_spec().unwrap();
        let q = Quadrature::default();
        for &x in &[0.0, 0.3, -1.7, 10.0] {
            let jump = |z: f64| {
                let c = (x * z).atan();
                (x + c).sin() - x.sin() - c * x.cos()
            };
            let jumps = q
                .integrate_pieces(|z| jump(z) / z.abs(), &[-1.0, 0.0, 1.0])
                .unwrap();
            let g = -2.0 * x * x.cos() + jumps;
            let want = (spec.source_g)(0.5, x);
            assert!((g - want).abs() < 1e-9, "{g} vs {want}");
        }
    }

    #[test]
    fn custom_model_from_expressions() {
        let spec = CustomModelSpec {
            name: "custom".into(),
            drift: Expr::parse("-2*x").unwrap(),
            diffusion: None,
            jump: CustomJump::Multiplicative {
                cbar: Expr::parse("sin(x)").unwrap(),
                f: Expr::parse("z").unwrap(),
                full: Some(Expr::parse("sin(x)*z").unwrap()),
            },
            kernel: CompensatorKernel::truncated_stable_preset(0.5, 1.0).unwrap(),
            x0: 1.0,
            horizon: 1.0,
            rate_meta: RateHypotheses::new(1.0, 1.0, 2).unwrap(),
            weak: None,
            density_coupling: false,
        };
        let m = custom_model(spec.clone()).unwrap();
        assert_eq!(m.drift(0.0, 3.0), -6.0);
        assert!((m.jump_coeff(0.0, 1.0, 0.5) - 0.5 * 1f64.sin()).abs() < 1e-15);

        let mut bad = spec;
        bad.jump = CustomJump::Multiplicative {
            cbar: Expr::parse("sin(x)").unwrap(),
            f: Expr::parse("z").unwrap(),
            full: Some(Expr::parse("cos(x)*z").unwrap()),
        };
        assert!(matches!(custom_model(bad), Err(ModelError::Invariant(_))));
    }
}
