//! Force fields, the total potential and the wall temperature.
//!
//! The force acting on a particle at `(x, v)` is `v x B - grad(phi) - g e3`
//! with `B = (0, 0, b3)`. Three regimes are supported: pure gravity, gravity
//! plus a small decaying potential `phi`, and gravity (fixed to `g = 10`) with
//! a constant vertical magnetic field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Gravity used in the magnetic regime.
pub const MAGNETIC_GRAVITY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "gravity")]
    GravityOnly,
    #[serde(alias = "perturbed")]
    GravityPerturbed,
    Magnetic,
}

/// Field parameters, mirroring the `[field]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub regime: Regime,
    pub g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b3: Option<f64>,
    #[serde(default, rename = "phi_expr", skip_serializing_if = "Option::is_none")]
    pub phi: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho3: Option<f64>,
    /// Fixed RK4 step used in the perturbed regime.
    #[serde(default = "default_step")]
    pub integrator_step: f64,
}

fn default_step() -> f64 {
    1e-3
}

impl FieldConfig {
    pub fn gravity(g: f64) -> Self {
        FieldConfig {
            regime: Regime::GravityOnly,
            g,
            b3: None,
            phi: None,
            rho1: None,
            rho2: None,
            rho3: None,
            integrator_step: default_step(),
        }
    }

    pub fn magnetic(b3: f64) -> Self {
        FieldConfig {
            regime: Regime::Magnetic,
            g: MAGNETIC_GRAVITY,
            b3: Some(b3),
            ..FieldConfig::gravity(MAGNETIC_GRAVITY)
        }
    }

    pub fn perturbed(g: f64, phi: Expr, rho1: f64, rho2: f64, rho3: f64) -> Self {
        FieldConfig {
            regime: Regime::GravityPerturbed,
            g,
            b3: None,
            phi: Some(phi),
            rho1: Some(rho1),
            rho2: Some(rho2),
            rho3: Some(rho3),
            integrator_step: default_step(),
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.integrator_step = step;
        self
    }

    /// Vertical magnetic strength, zero outside the magnetic regime.
    pub fn b3(&self) -> f64 {
        match self.regime {
            Regime::Magnetic => self.b3.unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// Closed-form characteristics exist for gravity-only and magnetic fields.
    pub fn is_exact(&self) -> bool {
        self.regime != Regime::GravityPerturbed
    }

    fn phi(&self) -> Option<&Expr> {
        match self.regime {
            Regime::GravityPerturbed => self.phi.as_ref(),
            _ => None,
        }
    }

    /// Total potential `g x3 + phi(x)`.
    pub fn potential_energy(&self, x: &[f64; 3]) -> f64 {
        self.g * x[2] + self.phi().map_or(0.0, |p| p.eval(x))
    }

    pub fn grad_potential(&self, x: &[f64; 3]) -> [f64; 3] {
        let mut grad = self.phi().map_or([0.0; 3], |p| p.gradient(x));
        grad[2] += self.g;
        grad
    }

    /// `v x B - grad(Phi)`.
    pub fn force(&self, x: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
        let gp = self.grad_potential(x);
        let b = self.b3();
        [v[1] * b - gp[0], -v[0] * b - gp[1], -gp[2]]
    }

    /// `|v|^2 / 2 + Phi(x)`.
    pub fn energy(&self, x: &[f64; 3], v: &[f64; 3]) -> f64 {
        0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + self.potential_energy(x)
    }

    /// Lower bound on the net downward acceleration, `g - rho3` when perturbed.
    pub fn min_vertical_pull(&self) -> f64 {
        match self.regime {
            Regime::GravityPerturbed => self.g - self.rho3.unwrap_or(0.5 * self.g),
            _ => self.g,
        }
    }
}

/// Sampling lattice for hypothesis checks: `n_h x n_h x n_z` points with
/// `x3` spanning `[0, z_max]`.
#[derive(Debug, Clone, Copy)]
pub struct ValidationLattice {
    pub n_h: usize,
    pub n_z: usize,
    pub z_max: Option<f64>,
}

impl Default for ValidationLattice {
    fn default() -> Self {
        ValidationLattice {
            n_h: 128,
            n_z: 64,
            z_max: None,
        }
    }
}

/// Relative head-room demanded of every sampled sup-norm bound.
pub const SAFETY_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    /// Worst value observed on the lattice.
    pub observed: f64,
    pub bound: f64,
    /// `bound - observed * (1 + SAFETY_MARGIN)`.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub regime: Regime,
    pub checks: Vec<HypothesisCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn upper_check(name: &str, observed: f64, bound: f64) -> HypothesisCheck {
    let margin = bound - observed * (1.0 + SAFETY_MARGIN);
    HypothesisCheck {
        name: name.to_string(),
        passed: margin >= 0.0,
        observed,
        bound,
        margin,
    }
}

/// Spectral norm of a symmetric 3x3 matrix.
fn sym_spectral_norm(h: &[[f64; 3]; 3]) -> f64 {
    let m = nalgebra::Matrix3::from_fn(|i, k| 0.5 * (h[i][k] + h[k][i]));
    m.symmetric_eigenvalues().abs().max()
}

pub fn validate_field(config: &FieldConfig) -> Result<ValidationReport> {
    validate_field_on(config, ValidationLattice::default())
}

pub fn validate_field_on(config: &FieldConfig, lattice: ValidationLattice) -> Result<ValidationReport> {
    if !(config.g > 0.0) || !config.g.is_finite() {
        return Err(Error::Field(format!("g must be positive, got {}", config.g)));
    }
    if !(config.integrator_step > 0.0) {
        return Err(Error::Field("integrator_step must be positive".into()));
    }
    let mut checks = Vec::new();
    match config.regime {
        Regime::GravityOnly => {
            if config.phi.is_some() {
                return Err(Error::Field("phi must be absent in the gravity-only regime".into()));
            }
        }
        Regime::Magnetic => {
            if config.g != MAGNETIC_GRAVITY {
                return Err(Error::Field(format!(
                    "g must equal 10 in magnetic regime, got {}",
                    config.g
                )));
            }
            let b3 = config
                .b3
                .ok_or_else(|| Error::Field("b3 is required in the magnetic regime".into()))?;
            if !(b3 >= 1.0) {
                return Err(Error::Field(format!("b3 must be >= 1 in magnetic regime, got {b3}")));
            }
            if config.phi.is_some() {
                return Err(Error::Field("phi must be absent in the magnetic regime".into()));
            }
            checks.push(HypothesisCheck {
                name: "b3 >= 1".into(),
                passed: true,
                observed: b3,
                bound: 1.0,
                margin: b3 - 1.0,
            });
        }
        Regime::GravityPerturbed => {
            let phi = config
                .phi
                .as_ref()
                .ok_or_else(|| Error::Field("phi_expr is required in the perturbed regime".into()))?;
            let rho1 = config.rho1.ok_or_else(|| Error::Field("rho1 is required".into()))?;
            let rho2 = config.rho2.ok_or_else(|| Error::Field("rho2 is required".into()))?;
            let rho3 = config.rho3.ok_or_else(|| Error::Field("rho3 is required".into()))?;
            if !(rho1 > 1.0) {
                return Err(Error::Field(format!("rho1 must exceed 1, got {rho1}")));
            }
            if !(rho2 >= 0.0) || !(rho3 >= 0.0) {
                return Err(Error::Field("rho2 and rho3 must be non-negative".into()));
            }
            if rho3 > 0.5 * config.g {
                return Err(Error::Field(format!(
                    "rho3 = {rho3} exceeds g/2 = {}",
                    0.5 * config.g
                )));
            }
            let n = lattice.n_h.max(1);
            let nz = lattice.n_z.max(2);
            let z_max = lattice.z_max.unwrap_or(10.0 / rho1);

            let mut worst_boundary = 0.0f64;
            let mut worst_grad = 0.0f64;
            let mut worst_hess = 0.0f64;
            let mut min_potential = f64::INFINITY;
            for i in 0..n {
                for j in 0..n {
                    let (x1, x2) = (i as f64 / n as f64, j as f64 / n as f64);
                    worst_boundary = worst_boundary.max(phi.eval(&[x1, x2, 0.0]).abs());
                    for k in 0..nz {
                        let x3 = z_max * k as f64 / (nz - 1) as f64;
                        let x = [x1, x2, x3];
                        let jet = phi.jet(&x);
                        let gn = jet.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                        worst_grad = worst_grad.max(gn);
                        worst_hess = worst_hess.max((rho1 * x3).exp() * sym_spectral_norm(&jet.hess));
                        min_potential = min_potential.min(config.g * x3 + jet.value);
                    }
                }
            }
            if worst_boundary > 1e-10 {
                return Err(Error::Field(format!(
                    "phi must vanish at x3 = 0 (observed |phi| = {worst_boundary:e})"
                )));
            }
            checks.push(HypothesisCheck {
                name: "phi(x1,x2,0) = 0".into(),
                passed: true,
                observed: worst_boundary,
                bound: 1e-10,
                margin: 1e-10 - worst_boundary,
            });
            checks.push(upper_check("|grad phi| <= g/2", worst_grad, 0.5 * config.g));
            checks.push(upper_check("|grad phi| <= rho3", worst_grad, rho3));
            checks.push(upper_check("exp(rho1 x3)|hess phi| <= rho2", worst_hess, rho2));
            checks.push(HypothesisCheck {
                name: "Phi >= 0".into(),
                passed: min_potential >= -1e-12,
                observed: min_potential,
                bound: 0.0,
                margin: min_potential,
            });
        }
    }
    Ok(ValidationReport {
        regime: config.regime,
        checks,
    })
}

/// Boundary temperature as a closed-form function of `(x1, x2)`.
#[derive(Debug, Clone)]
pub struct TemperatureField {
    expr: Expr,
    lower: f64,
    upper: f64,
    constant: Option<f64>,
}

/// Lattice resolution used to certify `inf` and `sup` of the temperature.
pub const TEMPERATURE_LATTICE: usize = 256;

impl TemperatureField {
    pub fn new(expr: Expr, margin: f64) -> Result<Self> {
        if expr.depends_on(2) {
            return Err(Error::Temperature(format!(
                "temperature `{expr}` must not depend on x3"
            )));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::Temperature(format!("margin {margin} outside [0, 1)")));
        }
        let n = TEMPERATURE_LATTICE;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let v = expr.eval(&[i as f64 / n as f64, j as f64 / n as f64, 0.0]);
                if !v.is_finite() {
                    return Err(Error::Temperature(format!("temperature `{expr}` is not finite")));
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(lo > 0.0) {
            return Err(Error::Temperature(format!(
                "temperature `{expr}` must be positive (min {lo})"
            )));
        }
        for k in 0..=n {
            let s = k as f64 / n as f64;
            let d1 = (expr.eval(&[0.0, s, 0.0]) - expr.eval(&[1.0, s, 0.0])).abs();
            let d2 = (expr.eval(&[s, 0.0, 0.0]) - expr.eval(&[s, 1.0, 0.0])).abs();
            if d1.max(d2) > 1e-9 * hi {
                return Err(Error::Temperature(format!(
                    "temperature `{expr}` is not periodic on the unit torus"
                )));
            }
        }
        let constant = expr.is_constant().then(|| expr.eval(&[0.0; 3]));
        let (lower, upper) = match constant {
            Some(c) => (c, c),
            None => (lo * (1.0 - margin), hi * (1.0 + margin)),
        };
        Ok(TemperatureField {
            expr,
            lower,
            upper,
            constant,
        })
    }

    pub fn parse(src: &str) -> Result<Self> {
        TemperatureField::new(Expr::parse(src)?, 0.0)
    }

    pub fn constant(theta: f64) -> Result<Self> {
        TemperatureField::new(Expr::constant(theta), 0.0)
    }

    #[inline]
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match self.constant {
            Some(c) => c,
            None => self.expr.eval(&[x[0], x[1], 0.0]),
        }
    }

    /// Certified `a = inf Theta`.
    pub fn a(&self) -> f64 {
        self.lower
    }

    /// Certified `b = sup Theta`.
    pub fn b(&self) -> f64 {
        self.upper
    }

    /// `b^2 / a^2`, reported rather than normalized away.
    pub fn ratio_sq(&self) -> f64 {
        (self.upper / self.lower).powi(2)
    }

    pub fn is_isothermal(&self) -> bool {
        self.constant.is_some()
    }

    pub fn is_continuous(&self) -> bool {
        self.expr.is_continuous()
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn gravity_force_and_potential() {
        let f = FieldConfig::gravity(10.0);
        assert_eq!(f.force(&[0.3, 0.2, 1.0], &[1.0, 2.0, 3.0]), [0.0, 0.0, -10.0]);
        assert!((f.potential_energy(&[0.1, 0.9, 0.45]) - 4.5).abs() < 1e-15);
        assert_eq!(f.potential_energy(&[0.5, 0.5, 0.0]), 0.0);
    }

    #[test]
    fn magnetic_force_is_cross_product() {
        let f = FieldConfig::magnetic(1.0);
        assert_eq!(f.force(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]), [2.0, -1.0, -10.0]);
    }

    #[test]
    fn gravity_only_passes_vacuously() {
        let r = validate_field(&FieldConfig::gravity(10.0)).unwrap();
        assert!(r.passed());
        assert!(r.checks.is_empty());
    }

    #[test]
    fn magnetic_requires_g_ten() {
        let mut f = FieldConfig::magnetic(1.0);
        f.g = 9.0;
        let err = validate_field(&f).unwrap_err().to_string();
        assert!(err.contains("g must equal 10 in magnetic regime"), "{err}");
        assert!(validate_field(&FieldConfig::magnetic(0.5)).is_err());
        assert!(validate_field(&FieldConfig::magnetic(2.0)).unwrap().passed());
    }

    #[test]
    fn rejects_nonpositive_gravity() {
        assert!(validate_field(&FieldConfig::gravity(0.0)).is_err());
        assert!(validate_field(&FieldConfig::gravity(-1.0)).is_err());
    }

    #[test]
    fn rejects_phi_not_vanishing_on_wall() {
        let phi = Expr::parse("0.01*exp(-2*x3)*sin(2*pi*x1)").unwrap();
        let f = FieldConfig::perturbed(10.0, phi, 2.0, 0.5, 0.1);
        let lattice = ValidationLattice { n_h: 32, n_z: 16, z_max: None };
        let err = validate_field_on(&f, lattice).unwrap_err().to_string();
        assert!(err.contains("vanish"), "{err}");
    }

    /// Hand-derived Hessian of phi = A x3 e^{-2 x3} sin(2 pi x1), evaluated on
    /// the same lattice, as an independent oracle for the validator.
    #[test]
    fn perturbed_hessian_sup_matches_analytic_lattice() {
        let amp = 0.01;
        let rho1 = 1.5;
        let phi = Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)").unwrap();
        let f = FieldConfig::perturbed(10.0, phi, rho1, 0.5, 0.1);
        let (n, nz) = (64usize, 64usize);
        let z_max = 10.0 / rho1;
        let r = validate_field_on(&f, ValidationLattice { n_h: n, n_z: nz, z_max: None }).unwrap();
        assert!(r.passed(), "{r:?}");

        let k = 2.0 * PI;
        let mut sup = 0.0f64;
        for i in 0..n {
            let x1 = i as f64 / n as f64;
            let (s, c) = ((k * x1).sin(), (k * x1).cos());
            for kz in 0..nz {
                let z = z_max * kz as f64 / (nz - 1) as f64;
                let e = (-2.0 * z).exp();
                let h = z * e;
                let dh = (1.0 - 2.0 * z) * e;
                let ddh = (4.0 * z - 4.0) * e;
                let m = nalgebra::Matrix2::new(
                    -amp * k * k * h * s,
                    amp * k * dh * c,
                    amp * k * dh * c,
                    amp * ddh * s,
                );
                let norm = m.symmetric_eigenvalues().abs().max();
                sup = sup.max((rho1 * z).exp() * norm);
            }
        }
        let observed = r.check("exp(rho1 x3)|hess phi| <= rho2").unwrap().observed;
        assert!((observed - sup).abs() < 1e-12 * sup.max(1.0), "{observed} vs {sup}");
        assert!(r.check("|grad phi| <= rho3").unwrap().passed);
    }

    #[test]
    fn perturbed_reports_hessian_violation() {
        let phi = Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)").unwrap();
        let f = FieldConfig::perturbed(10.0, phi, 1.5, 0.01, 0.1);
        let r = validate_field_on(&f, ValidationLattice { n_h: 32, n_z: 32, z_max: None }).unwrap();
        assert!(!r.passed());
        assert!(!r.check("exp(rho1 x3)|hess phi| <= rho2").unwrap().passed);
    }

    #[test]
    fn force_is_divergence_free_in_velocity() {
        let fields = [
            FieldConfig::gravity(10.0),
            FieldConfig::magnetic(3.0),
            FieldConfig::perturbed(
                10.0,
                Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)").unwrap(),
                1.5,
                0.5,
                0.1,
            ),
        ];
        let h = 1e-5;
        for f in &fields {
            for s in 0..20 {
                let t = s as f64 * 0.37;
                let x = [t.sin().abs(), t.cos().abs(), 0.1 + t];
                let v = [t.cos() * 2.0, -t, 1.0 + t.sin()];
                let mut div = 0.0;
                for i in 0..3 {
                    let mut vp = v;
                    let mut vm = v;
                    vp[i] += h;
                    vm[i] -= h;
                    div += (f.force(&x, &vp)[i] - f.force(&x, &vm)[i]) / (2.0 * h);
                }
                assert!(div.abs() < 1e-8, "div = {div}");
            }
        }
    }

    #[test]
    fn temperature_bounds_and_guards() {
        let t = TemperatureField::parse("1.125 + 0.125*sin(2*pi*x1)").unwrap();
        assert!((t.a() - 1.0).abs() < 1e-12);
        assert!((t.b() - 1.25).abs() < 1e-12);
        assert!((t.ratio_sq() - 1.5625).abs() < 1e-10);
        assert!(!t.is_isothermal());
        assert!(TemperatureField::parse("0.5*sin(2*pi*x1)").is_err());
        assert!(TemperatureField::parse("1 + 0.1*x1").is_err());
        assert!(TemperatureField::parse("1 + x3").is_err());
        let c = TemperatureField::constant(2.0).unwrap();
        assert!(c.is_isothermal());
        assert_eq!(c.eval([0.3, 0.4]), 2.0);
        let m = TemperatureField::new(Expr::parse("1 + 0.5*cos(2*pi*x2)").unwrap(), 0.01).unwrap();
        assert!(m.a() < 0.5 && m.b() > 1.5);
    }
}
