//! Characteristics of the transport equation: propagation, exit times and
//! the Jacobian of the bounce map.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{sample_emission, wall_maxwellian};
use crate::error::{Error, Result};
use crate::fields::{FieldConfig, Regime, TemperatureField};
use crate::rng::{domain, stream_rng};
use crate::stats::{Estimate, Moments};

/// Tolerance for treating `x3` as lying on the wall.
pub const SNAP_TOL: f64 = 1e-12;

/// Cap on event-bisection iterations in the perturbed regime.
pub const MAX_BISECTION: usize = 200;

#[inline]
pub fn wrap_unit(s: f64) -> f64 {
    let w = s - s.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// A point of phase space `T^2 x R_+ x R^3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseState {
    pub x: [f64; 3],
    pub v: [f64; 3],
}

impl PhaseState {
    /// Builds a state with the horizontal coordinates wrapped into `[0, 1)`.
    pub fn new(x: [f64; 3], v: [f64; 3]) -> Self {
        PhaseState {
            x: [wrap_unit(x[0]), wrap_unit(x[1]), x[2]],
            v,
        }
    }

    pub fn on_boundary(x: [f64; 2], v: [f64; 3]) -> Self {
        PhaseState::new([x[0], x[1], 0.0], v)
    }

    pub fn speed(&self) -> f64 {
        norm(&self.v)
    }

    pub fn energy(&self, field: &FieldConfig) -> f64 {
        field.energy(&self.x, &self.v)
    }
}

#[inline]
pub fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Backward,
    Forward,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Backward => -1.0,
            Direction::Forward => 1.0,
        }
    }
}

/// Result of propagating along a characteristic, keeping the unwrapped
/// horizontal displacement.
#[derive(Debug, Clone, Copy)]
pub struct Flight {
    pub state: PhaseState,
    pub displacement: [f64; 2],
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExitSolve {
    pub t_exit: f64,
    pub x_hit: [f64; 2],
    pub v_hit: [f64; 3],
    pub direction: Direction,
    /// Integer image index of the hit point relative to the unit cell of the start.
    pub winding: [i64; 2],
    /// Unwrapped horizontal displacement from the start to the hit point.
    pub displacement: [f64; 2],
}

impl ExitSolve {
    pub fn hit_state(&self) -> PhaseState {
        PhaseState::on_boundary(self.x_hit, self.v_hit)
    }
}

/// Horizontal displacement and velocity after time `s` in a uniform vertical
/// magnetic field of strength `b` (free flight when `b = 0`).
#[inline]
fn horizontal_flow(v1: f64, v2: f64, b: f64, s: f64) -> ([f64; 2], [f64; 2]) {
    if b == 0.0 {
        return ([v1 * s, v2 * s], [v1, v2]);
    }
    let (sn, cs) = (b * s).sin_cos();
    // 1 - cos(bs) without cancellation
    let omc = 2.0 * (0.5 * b * s).sin().powi(2);
    (
        [(v1 * sn + v2 * omc) / b, (-v1 * omc + v2 * sn) / b],
        [v1 * cs + v2 * sn, -v1 * sn + v2 * cs],
    )
}

fn exact_flight(state: &PhaseState, s: f64, field: &FieldConfig) -> Flight {
    let g = field.g;
    let (d, vh) = horizontal_flow(state.v[0], state.v[1], field.b3(), s);
    let x3 = state.x[2] + state.v[2] * s - 0.5 * g * s * s;
    let v3 = state.v[2] - g * s;
    Flight {
        state: PhaseState::new([state.x[0] + d[0], state.x[1] + d[1], x3], [vh[0], vh[1], v3]),
        displacement: d,
    }
}

type Y = [f64; 6];

#[inline]
fn deriv(field: &FieldConfig, y: &Y) -> Y {
    let x = [wrap_unit(y[0]), wrap_unit(y[1]), y[2]];
    let a = field.force(&x, &[y[3], y[4], y[5]]);
    [y[3], y[4], y[5], a[0], a[1], a[2]]
}

#[inline]
fn rk4_step(field: &FieldConfig, y: &Y, h: f64) -> Y {
    let axpy = |a: &Y, s: f64, k: &Y| -> Y {
        let mut o = *a;
        for i in 0..6 {
            o[i] += s * k[i];
        }
        o
    };
    let k1 = deriv(field, y);
    let k2 = deriv(field, &axpy(y, 0.5 * h, &k1));
    let k3 = deriv(field, &axpy(y, 0.5 * h, &k2));
    let k4 = deriv(field, &axpy(y, h, &k3));
    let mut o = *y;
    for i in 0..6 {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

fn to_y(state: &PhaseState) -> Y {
    [state.x[0], state.x[1], state.x[2], state.v[0], state.v[1], state.v[2]]
}

fn from_y(y: &Y, start: &PhaseState) -> Flight {
    Flight {
        state: PhaseState::new([y[0], y[1], y[2]], [y[3], y[4], y[5]]),
        displacement: [y[0] - start.x[0], y[1] - start.x[1]],
    }
}

/// Propagates `state` by `dt` (negative for backward), tracking the unwrapped
/// horizontal displacement.
pub fn advance_tracked(state: &PhaseState, dt: f64, field: &FieldConfig) -> Result<Flight> {
    if field.is_exact() {
        let f = exact_flight(state, dt, field);
        if f.state.x[2] < -SNAP_TOL {
            let dir = if dt >= 0.0 { Direction::Forward } else { Direction::Backward };
            let t_hit = exact_exit_time(state, dir, field.g);
            return Err(Error::ExitedHalfSpace {
                t_lo: dir.sign() * t_hit,
                t_hi: dt,
            });
        }
        return Ok(f);
    }
    let h0 = field.integrator_step;
    let n = ((dt.abs() / h0).ceil() as usize).max(1);
    let h = dt / n as f64;
    let mut y = to_y(state);
    for k in 0..n {
        let next = rk4_step(field, &y, h);
        if next[2] < -SNAP_TOL {
            return Err(Error::ExitedHalfSpace {
                t_lo: k as f64 * h,
                t_hi: (k + 1) as f64 * h,
            });
        }
        y = next;
    }
    Ok(from_y(&y, state))
}

pub fn advance(state: &PhaseState, dt: f64, field: &FieldConfig) -> Result<PhaseState> {
    advance_tracked(state, dt, field).map(|f| f.state)
}

/// Root of `x3 + s v3 t - g t^2 / 2 = 0` with `s = +1` forward and `-1` backward,
/// in a cancellation-free form.
#[inline]
fn exact_exit_time(state: &PhaseState, dir: Direction, g: f64) -> f64 {
    let w = dir.sign() * state.v[2];
    let x3 = state.x[2].max(0.0);
    let q = (w * w + 2.0 * g * x3).sqrt();
    if w >= 0.0 {
        (w + q) / g
    } else if q - w > 0.0 {
        2.0 * x3 / (q - w)
    } else {
        0.0
    }
}

fn exit_from_flight(f: Flight, start: &PhaseState, t: f64, dir: Direction) -> ExitSolve {
    let abs_x = [start.x[0] + f.displacement[0], start.x[1] + f.displacement[1]];
    ExitSolve {
        t_exit: t,
        x_hit: [f.state.x[0], f.state.x[1]],
        v_hit: f.state.v,
        direction: dir,
        winding: [abs_x[0].floor() as i64, abs_x[1].floor() as i64],
        displacement: f.displacement,
    }
}

fn exact_exit(state: &PhaseState, dir: Direction, field: &FieldConfig) -> ExitSolve {
    let g = field.g;
    let t = exact_exit_time(state, dir, g);
    let w = dir.sign() * state.v[2];
    let q = (w * w + 2.0 * g * state.x[2].max(0.0)).sqrt();
    let mut f = exact_flight(state, dir.sign() * t, field);
    f.state.x[2] = 0.0;
    // exact vertical speed at the hit keeps energy conserved to round-off
    f.state.v[2] = -dir.sign() * q;
    exit_from_flight(f, state, t, dir)
}

fn perturbed_exit(state: &PhaseState, dir: Direction, field: &FieldConfig) -> Result<ExitSolve> {
    let sgn = dir.sign();
    let w = sgn * state.v[2];
    if state.x[2] <= SNAP_TOL && w <= 0.0 {
        let mut s = *state;
        s.x[2] = 0.0;
        return Ok(exit_from_flight(
            Flight { state: s, displacement: [0.0; 2] },
            state,
            0.0,
            dir,
        ));
    }
    let pull = field.min_vertical_pull();
    // x3 is concave with curvature at most -pull, which bounds the exit time
    let x3 = state.x[2].max(0.0);
    let t_max = (w + (w * w + 2.0 * pull * x3).sqrt()) / pull * (1.0 + 1e-6) + 2.0 * field.integrator_step;
    let h = sgn * field.integrator_step;
    let mut y = to_y(state);
    let mut t = 0.0;
    loop {
        if t > t_max {
            return Err(Error::NoExit { max_time: t_max });
        }
        let next = rk4_step(field, &y, h);
        if next[2] < 0.0 {
            break;
        }
        y = next;
        t += h.abs();
    }
    let (mut lo, mut hi) = (0.0f64, h.abs());
    let mut hit = None;
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (lo + hi);
        let ym = rk4_step(field, &y, sgn * mid);
        if ym[2].abs() < SNAP_TOL {
            hit = Some((mid, ym));
            break;
        }
        if ym[2] > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (tau, mut yh) = match hit {
        Some(v) => v,
        None => {
            let ym = rk4_step(field, &y, sgn * hi);
            return Err(Error::BisectionFailed {
                iterations: MAX_BISECTION,
                residual: ym[2].abs(),
            });
        }
    };
    // one Newton polish of the crossing time
    let mut tau = tau;
    if yh[5].abs() > 0.0 {
        let tau2 = tau + yh[2] / (sgn * yh[5]);
        let y2 = rk4_step(field, &y, sgn * tau2);
        if y2[2].abs() < yh[2].abs() && tau2 >= 0.0 {
            tau = tau2;
            yh = y2;
        }
    }
    yh[2] = 0.0;
    let f = from_y(&yh, state);
    Ok(exit_from_flight(f, state, t + tau, dir))
}

pub fn exit(state: &PhaseState, dir: Direction, field: &FieldConfig) -> Result<ExitSolve> {
    if field.is_exact() {
        Ok(exact_exit(state, dir, field))
    } else {
        perturbed_exit(state, dir, field)
    }
}

pub fn backward_exit(state: &PhaseState, field: &FieldConfig) -> Result<ExitSolve> {
    exit(state, Direction::Backward, field)
}

pub fn forward_exit(state: &PhaseState, field: &FieldConfig) -> Result<ExitSolve> {
    exit(state, Direction::Forward, field)
}

/// Forward exit time only. Closed form in the exact regimes.
pub fn forward_exit_time(state: &PhaseState, field: &FieldConfig) -> Result<f64> {
    if field.is_exact() {
        Ok(exact_exit_time(state, Direction::Forward, field.g))
    } else {
        perturbed_exit(state, Direction::Forward, field).map(|e| e.t_exit)
    }
}

pub fn backward_exit_time(state: &PhaseState, field: &FieldConfig) -> Result<f64> {
    if field.is_exact() {
        Ok(exact_exit_time(state, Direction::Backward, field.g))
    } else {
        perturbed_exit(state, Direction::Backward, field).map(|e| e.t_exit)
    }
}

/// Density factor of the bounce map `v -> (x_b, t_b)`, so that
/// `dv = factor * dt_b dx_b`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BounceJacobian {
    pub factor: f64,
    /// Ratio of `factor` to the free-fall value `(g/2) / t_b^2`.
    pub d0_correction: f64,
}

/// Resonance guard: phases closer than this to `2 pi k` are rejected.
pub const RESONANCE_TOL: f64 = 1e-9;

fn check_resonance(b: f64, t_b: f64) -> Result<()> {
    let phase = b * t_b;
    let k = (phase / (2.0 * std::f64::consts::PI)).round();
    if (phase - 2.0 * std::f64::consts::PI * k).abs() < RESONANCE_TOL {
        return Err(Error::DegenerateBounce { phase });
    }
    Ok(())
}

/// Closed-form factor in the exact regimes.
pub fn exact_bounce_factor(field: &FieldConfig, t_b: f64) -> Result<f64> {
    let g = field.g;
    match field.regime {
        Regime::GravityOnly => Ok(0.5 * g / (t_b * t_b)),
        Regime::Magnetic => {
            let b = field.b3();
            check_resonance(b, t_b)?;
            let omc2 = 4.0 * (0.5 * b * t_b).sin().powi(2);
            Ok(0.5 * g * b * b / omc2)
        }
        Regime::GravityPerturbed => Err(Error::WrongRegime(
            "no closed-form bounce Jacobian in the perturbed regime".into(),
        )),
    }
}

/// Jacobian of the bounce map at a boundary point `x` for a backward flight
/// of duration `t_b` ending at `x_b` in image `winding`.
pub fn bounce_jacobian(
    x: [f64; 2],
    t_b: f64,
    x_b: [f64; 2],
    winding: [i64; 2],
    field: &FieldConfig,
) -> Result<BounceJacobian> {
    if !(t_b > 0.0) {
        return Err(Error::InvalidArgument(format!("t_b must be positive, got {t_b}")));
    }
    let free = 0.5 * field.g / (t_b * t_b);
    if field.is_exact() {
        let factor = exact_bounce_factor(field, t_b)?;
        return Ok(BounceJacobian {
            factor,
            d0_correction: factor / free,
        });
    }
    let v = invert_bounce(x, t_b, x_b, winding, field)?;
    let det = flight_map_det(&PhaseState::on_boundary(x, v), Direction::Backward, field)?;
    let factor = 1.0 / det.abs();
    Ok(BounceJacobian {
        factor,
        d0_correction: factor / free,
    })
}

/// `(x_exit_unwrapped, t_exit)` as a function of the start velocity.
fn flight_map(
    x: [f64; 2],
    v: [f64; 3],
    dir: Direction,
    field: &FieldConfig,
) -> Result<[f64; 3]> {
    let e = exit(&PhaseState::on_boundary(x, v), dir, field)?;
    Ok([x[0] + e.displacement[0], x[1] + e.displacement[1], e.t_exit])
}

fn fd_jacobian(x: [f64; 2], v: [f64; 3], dir: Direction, field: &FieldConfig) -> Result<nalgebra::Matrix3<f64>> {
    let h = 1e-6 * norm(&v).max(1.0);
    let mut jac = nalgebra::Matrix3::zeros();
    for k in 0..3 {
        let mut vp = v;
        let mut vm = v;
        vp[k] += h;
        vm[k] -= h;
        let fp = flight_map(x, vp, dir, field)?;
        let fm = flight_map(x, vm, dir, field)?;
        for i in 0..3 {
            jac[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Determinant of `d(x_exit, t_exit)/dv` by central differences, step
/// `1e-6 * max(1, |v|)`.
pub fn flight_map_det(state: &PhaseState, dir: Direction, field: &FieldConfig) -> Result<f64> {
    Ok(fd_jacobian([state.x[0], state.x[1]], state.v, dir, field)?.determinant())
}

/// Newton solve for the velocity at `x` whose backward flight hits the
/// unwrapped target `x_b + winding` after `t_b`.
fn invert_bounce(
    x: [f64; 2],
    t_b: f64,
    x_b: [f64; 2],
    winding: [i64; 2],
    field: &FieldConfig,
) -> Result<[f64; 3]> {
    let target = [x_b[0] + winding[0] as f64, x_b[1] + winding[1] as f64, t_b];
    let mut v = [(x[0] - target[0]) / t_b, (x[1] - target[1]) / t_b, -0.5 * field.g * t_b];
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let f = flight_map(x, v, Direction::Backward, field)?;
        let r = nalgebra::Vector3::new(f[0] - target[0], f[1] - target[1], f[2] - target[2]);
        residual = r.amax();
        if residual < 1e-11 {
            return Ok(v);
        }
        let jac = fd_jacobian(x, v, Direction::Backward, field)?;
        let step = jac
            .lu()
            .solve(&r)
            .ok_or(Error::InversionFailed { residual })?;
        for i in 0..3 {
            v[i] -= step[i];
        }
        v[2] = v[2].min(-1e-12);
    }
    Err(Error::InversionFailed { residual })
}

/// Built-in integrands for the change-of-variables identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `(1/2pi) exp(-|v|^2/2 - Phi(x))`.
    Maxwellian,
    /// `exp(-|v|^2 - 2 g x3) (1 + cos(2 pi x1) / 2)`.
    GaussianExp,
    /// `v3^2 exp(-|v|^2 - 2 g x3)`.
    Anisotropic,
    /// Indicator of the empty set.
    Empty,
}

impl TestFunction {
    pub fn eval(&self, x: &[f64; 3], v: &[f64; 3], field: &FieldConfig) -> f64 {
        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        match self {
            TestFunction::Maxwellian => {
                (-0.5 * v2 - field.potential_energy(x)).exp() / (2.0 * std::f64::consts::PI)
            }
            TestFunction::GaussianExp => {
                (-v2 - 2.0 * field.g * x[2]).exp()
                    * (1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos())
            }
            TestFunction::Anisotropic => v[2] * v[2] * (-v2 - 2.0 * field.g * x[2]).exp(),
            TestFunction::Empty => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CovCheck {
    /// Boundary-time representation.
    pub lhs: Estimate,
    /// Direct phase-space integral.
    pub rhs: Estimate,
    pub rel_err: f64,
    /// `|lhs - rhs|` in units of the combined standard error.
    pub z: f64,
}

const COV_CHUNK: usize = 4096;

/// Monte-Carlo check of
/// `int_{T^2} int_{v3>0} v3 int_0^{t_f} G(X(s), V(s)) ds dv dx = int_{Omega x R^3} G`.
///
/// The left side samples emissions from the flux measure and a uniform time
/// along the flight; the right side uses a Gaussian-exponential proposal.
pub fn cov_identity_check(
    field: &FieldConfig,
    theta: &TemperatureField,
    test: TestFunction,
    samples: usize,
    seed: u64,
) -> Result<CovCheck> {
    let chunks = samples.div_ceil(COV_CHUNK);
    let rate = field.min_vertical_pull();
    let parts: Vec<Result<(Moments, Moments)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = COV_CHUNK.min(samples - c * COV_CHUNK);
            let mut rng = stream_rng(seed, domain::VERIFY + c as u64, 0);
            let mut lhs = Moments::default();
            let mut rhs = Moments::default();
            for _ in 0..n {
                let xb = [rng.random::<f64>(), rng.random::<f64>()];
                let v = sample_emission(xb, theta, &mut rng);
                let start = PhaseState::on_boundary(xb, v);
                let tf = forward_exit_time(&start, field)?;
                let s = rng.random::<f64>() * tf;
                let val = if test == TestFunction::Empty {
                    0.0
                } else {
                    let p = match advance(&start, s, field) {
                        Ok(p) => p,
                        // round-off on the final substep; the hit point is the limit
                        Err(Error::ExitedHalfSpace { .. }) => forward_exit(&start, field)?.hit_state(),
                        Err(e) => return Err(e),
                    };
                    tf * test.eval(&p.x, &p.v, field) / wall_maxwellian(xb, &v, theta)
                };
                lhs.push(val);

                let x3 = -(1.0 - rng.random::<f64>()).ln() / rate;
                let x = [rng.random::<f64>(), rng.random::<f64>(), x3];
                let w: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let density = rate * (-rate * x3).exp()
                    * (-0.5 * (w[0] * w[0] + w[1] * w[1] + w[2] * w[2])).exp()
                    / (2.0 * std::f64::consts::PI).powf(1.5);
                rhs.push(test.eval(&x, &w, field) / density);
            }
            Ok((lhs, rhs))
        })
        .collect();
    let mut lhs = Moments::default();
    let mut rhs = Moments::default();
    for p in parts {
        let (a, b) = p?;
        lhs = lhs.merge(a);
        rhs = rhs.merge(b);
    }
    let (l, r) = (lhs.estimate(), rhs.estimate());
    let diff = (l.value - r.value).abs();
    let se = (l.std_error.powi(2) + r.std_error.powi(2)).sqrt();
    Ok(CovCheck {
        lhs: l,
        rhs: r,
        rel_err: if r.value == 0.0 { diff } else { diff / r.value.abs() },
        z: if se == 0.0 { 0.0 } else { diff / se },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use std::f64::consts::PI;

    fn perturbed(rho2: f64) -> FieldConfig {
        let phi = if rho2 == 0.0 {
            Expr::parse("0").unwrap()
        } else {
            Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)").unwrap()
        };
        FieldConfig::perturbed(10.0, phi, 1.5, rho2.max(0.5), 0.1)
    }

    #[test]
    fn free_fall_advance() {
        let f = FieldConfig::gravity(10.0);
        let s = advance(&PhaseState::new([0.0, 0.0, 1.0], [0.0; 3]), 0.1, &f).unwrap();
        assert!((s.x[2] - 0.95).abs() < 1e-15);
        assert!((s.v[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn magnetic_quarter_turn() {
        let f = FieldConfig::magnetic(1.0);
        let s = advance(&PhaseState::new([0.2, 0.3, 20.0], [1.0, 0.0, 0.0]), PI / 2.0, &f).unwrap();
        assert!(s.v[0].abs() < 1e-15);
        assert!((s.v[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn advance_refuses_to_leave_half_space() {
        let f = FieldConfig::gravity(10.0);
        let err = advance(&PhaseState::new([0.0, 0.0, 0.45], [0.0; 3]), 0.5, &f).unwrap_err();
        match err {
            Error::ExitedHalfSpace { t_lo, t_hi } => {
                assert!((t_lo - 0.3).abs() < 1e-12);
                assert_eq!(t_hi, 0.5);
            }
            e => panic!("{e}"),
        }
        let g = perturbed(0.5);
        assert!(advance(&PhaseState::new([0.0, 0.0, 0.45], [0.0; 3]), 0.5, &g).is_err());
    }

    #[test]
    fn magnetic_exit_law() {
        let f = FieldConfig::magnetic(1.0);
        let s = PhaseState::on_boundary([0.4, 0.6], [0.7, -0.2, -5.0]);
        let b = backward_exit(&s, &f).unwrap();
        assert!((b.t_exit - 1.0).abs() < 1e-15);
        assert_eq!(b.v_hit[2], 5.0);
        let e = forward_exit(&PhaseState::on_boundary([0.4, 0.6], [0.7, -0.2, 5.0]), &f).unwrap();
        assert!((e.t_exit - 1.0).abs() < 1e-15);
        assert_eq!(e.v_hit[2], -5.0);
    }

    #[test]
    fn apex_backward_exit() {
        let f = FieldConfig::gravity(10.0);
        let e = backward_exit(&PhaseState::new([0.1, 0.1, 0.45], [0.0; 3]), &f).unwrap();
        assert!((e.t_exit - 0.3).abs() < 1e-15);
        assert!((e.v_hit[2] - 3.0).abs() < 1e-15);
        assert_eq!(e.direction, Direction::Backward);
    }

    #[test]
    fn round_trip_in_exact_regimes() {
        for f in [FieldConfig::gravity(10.0), FieldConfig::magnetic(2.5)] {
            let s = PhaseState::new([0.3, 0.9, 2.0], [1.3, -0.4, 0.7]);
            let a = advance(&advance(&s, 0.37, &f).unwrap(), -0.37, &f).unwrap();
            for i in 0..3 {
                assert!((a.x[i] - s.x[i]).abs() < 1e-10);
                assert!((a.v[i] - s.v[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn winding_counts_images() {
        let f = FieldConfig::gravity(10.0);
        let e = forward_exit(&PhaseState::on_boundary([0.9, 0.1], [4.0, -2.0, 5.0]), &f).unwrap();
        // flight time 1, displacement (4, -2)
        assert_eq!(e.winding, [4, -2]);
        assert!((e.x_hit[0] - 0.9).abs() < 1e-12);
        assert!((e.x_hit[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn perturbed_with_zero_potential_matches_free_fall() {
        let f = perturbed(0.0);
        let s = PhaseState::on_boundary([0.2, 0.7], [0.3, 0.8, 2.3]);
        let e = forward_exit(&s, &f).unwrap();
        assert!((e.t_exit - 0.46).abs() < 1e-12, "{}", e.t_exit);
        assert!((e.v_hit[2] + 2.3).abs() < 1e-10);
        let jac = bounce_jacobian([0.2, 0.7], 0.46, [0.2 - 0.3 * 0.46, 0.7 - 0.8 * 0.46].map(wrap_unit), [0, 0], &f)
            .unwrap();
        let exact = 5.0 / (0.46 * 0.46);
        assert!((jac.factor / exact - 1.0).abs() < 1e-6, "{} vs {exact}", jac.factor);
    }

    #[test]
    fn perturbed_energy_drift() {
        let f = perturbed(0.5);
        let s = PhaseState::new([0.1, 0.2, 3.0], [0.5, -0.3, 4.0]);
        let e0 = s.energy(&f);
        let s1 = advance(&s, 1.0, &f).unwrap();
        assert!((s1.energy(&f) - e0).abs() < 1e-8);
    }

    #[test]
    fn exact_jacobian_values() {
        let m = FieldConfig::magnetic(1.0);
        let j = bounce_jacobian([0.0; 2], PI, [0.0; 2], [0, 0], &m).unwrap();
        assert!((j.factor - 1.25).abs() < 1e-12);
        let g = FieldConfig::gravity(10.0);
        assert_eq!(bounce_jacobian([0.0; 2], 1.0, [0.0; 2], [0, 0], &g).unwrap().factor, 5.0);
        let err = bounce_jacobian([0.0; 2], 2.0 * PI, [0.0; 2], [0, 0], &m).unwrap_err();
        assert!(err.to_string().contains("degenerate bounce map"));
    }

    /// Finite-difference determinant of the closed-form map, as an oracle
    /// for the exact factors.
    #[test]
    fn exact_factor_matches_finite_differences() {
        for f in [FieldConfig::gravity(10.0), FieldConfig::magnetic(3.0)] {
            let s = PhaseState::on_boundary([0.3, 0.4], [0.6, -1.1, -4.2]);
            let det = flight_map_det(&s, Direction::Backward, &f).unwrap();
            let t_b = backward_exit_time(&s, &f).unwrap();
            let exact = exact_bounce_factor(&f, t_b).unwrap();
            assert!((1.0 / det.abs() / exact - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cov_identity_for_maxwellian() {
        let theta = TemperatureField::constant(1.0).unwrap();
        let exact = (2.0 * PI).sqrt() / 10.0;
        for f in [FieldConfig::gravity(10.0), FieldConfig::magnetic(1.0)] {
            let c = cov_identity_check(&f, &theta, TestFunction::Maxwellian, 100_000, 3).unwrap();
            assert!((c.lhs.value - exact).abs() < 4.0 * c.lhs.std_error + 1e-12);
            assert!((c.rhs.value - exact).abs() < 1e-12);
        }
        let e = cov_identity_check(&FieldConfig::gravity(10.0), &theta, TestFunction::Empty, 1000, 1).unwrap();
        assert_eq!(e.lhs.value, 0.0);
        assert_eq!(e.rhs.value, 0.0);
    }
}
