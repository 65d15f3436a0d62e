//! The diffuse-reflection wall: Maxwellian emission, single bounces and
//! stochastic cycles carrying temperature-ratio weights.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::characteristics::{backward_exit_time, forward_exit, norm, PhaseState};
use crate::error::{Error, Result};
use crate::fields::{FieldConfig, Regime, TemperatureField};

/// `mu_Theta(x, v) = exp(-|v|^2 / (2 Theta(x))) / (2 pi Theta(x)^2)`.
#[inline]
pub fn wall_maxwellian(x: [f64; 2], v: &[f64; 3], theta: &TemperatureField) -> f64 {
    let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    maxwellian_at(theta.eval(x), v2)
}

/// Wall Maxwellian at temperature `t` and squared speed `v2`.
#[inline]
pub fn maxwellian_at(t: f64, v2: f64) -> f64 {
    (-0.5 * v2 / t).exp() / (2.0 * PI * t * t)
}

/// Draws from the flux measure `mu_Theta(x, v) v3 dv` on `{v3 > 0}`.
pub fn sample_emission<R: Rng + ?Sized>(x: [f64; 2], theta: &TemperatureField, rng: &mut R) -> [f64; 3] {
    sample_emission_at(theta.eval(x), rng)
}

pub fn sample_emission_at<R: Rng + ?Sized>(t: f64, rng: &mut R) -> [f64; 3] {
    let s = t.sqrt();
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    // Rayleigh by inversion; 1 - u keeps the log argument in (0, 1]
    let u: f64 = rng.random();
    let r = (-2.0 * (1.0 - u).ln()).sqrt();
    [s * n1, s * n2, s * r]
}

/// `mu_Theta(land, |v|) / mu_Theta(emit, |v|)`.
#[inline]
pub fn sigma_ratio(theta_emit: f64, theta_land: f64, v2: f64) -> f64 {
    if theta_emit == theta_land {
        return 1.0;
    }
    (theta_emit / theta_land).powi(2) * (-0.5 * v2 * (1.0 / theta_land - 1.0 / theta_emit)).exp()
}

/// One boundary-to-boundary flight.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BounceRecord {
    pub emit_point: [f64; 2],
    pub emit_velocity: [f64; 3],
    pub flight_time: f64,
    pub land_point: [f64; 2],
    pub land_velocity: [f64; 3],
    pub winding: [i64; 2],
    pub sigma_weight: f64,
}

pub fn bounce(x: [f64; 2], v: [f64; 3], field: &FieldConfig, theta: &TemperatureField) -> Result<BounceRecord> {
    if !(v[2] > 0.0) {
        return Err(Error::InvalidArgument(format!("emission needs v3 > 0, got {}", v[2])));
    }
    let e = forward_exit(&PhaseState::on_boundary(x, v), field)?;
    let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    Ok(BounceRecord {
        emit_point: x,
        emit_velocity: v,
        flight_time: e.t_exit,
        land_point: e.x_hit,
        land_velocity: e.v_hit,
        winding: e.winding,
        sigma_weight: sigma_ratio(theta.eval(x), theta.eval(e.x_hit), v2),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleTrace {
    pub bounces: Vec<BounceRecord>,
    pub cumulative_time: f64,
    pub cumulative_weight: f64,
    /// Set when the chain stopped because `cumulative_time` passed the horizon.
    pub truncated: bool,
}

impl CycleTrace {
    /// Bounce-completion times `t^1, t^2, ...` measured from the start.
    pub fn completion_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.bounces.iter().scan(0.0, |t, b| {
            *t += b.flight_time;
            Some(*t)
        })
    }

    /// Running products of the sigma weights.
    pub fn running_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.bounces.iter().scan(1.0, |w, b| {
            *w *= b.sigma_weight;
            Some(*w)
        })
    }
}

/// Chains `steps` emissions starting at `start`; the bounce that first pushes
/// the elapsed time past `horizon` is kept and ends the chain.
pub fn generate_cycle<R: Rng + ?Sized>(
    start: [f64; 2],
    steps: usize,
    horizon: f64,
    field: &FieldConfig,
    theta: &TemperatureField,
    rng: &mut R,
) -> Result<CycleTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let mut trace = CycleTrace {
        bounces: Vec::with_capacity(steps),
        cumulative_time: 0.0,
        cumulative_weight: 1.0,
        truncated: false,
    };
    let mut x = start;
    for _ in 0..steps {
        let v = sample_emission(x, theta, rng);
        let b = bounce(x, v, field, theta)?;
        trace.cumulative_time += b.flight_time;
        trace.cumulative_weight *= b.sigma_weight;
        x = b.land_point;
        trace.bounces.push(b);
        if trace.cumulative_time > horizon {
            trace.truncated = true;
            break;
        }
    }
    Ok(trace)
}

/// Whether `B3 t` lies in a band of half-width `eps` around a resonance
/// `2 pi k`. The `k = 0` band (short flights) is included when `include_zero`.
pub fn resonant_phase(phase: f64, eps: f64, include_zero: bool) -> bool {
    let two_pi = 2.0 * PI;
    let k = (phase / two_pi).round();
    if (phase - two_pi * k).abs() <= eps && (k >= 1.0 || include_zero) {
        return true;
    }
    // with k = 0 excluded the nearest admissible resonance is 2 pi
    !include_zero && k < 1.0 && (phase - two_pi).abs() <= eps
}

/// Membership in the magnetic bad velocity set.
pub fn bad_set_indicator(
    x: &PhaseState,
    eps: f64,
    field: &FieldConfig,
    include_zero: bool,
) -> Result<bool> {
    if field.regime != Regime::Magnetic {
        return Err(Error::WrongRegime("bad-set indicator needs the magnetic regime".into()));
    }
    let t_b = backward_exit_time(x, field)?;
    Ok(resonant_phase(field.b3() * t_b, eps, include_zero))
}

/// Pointwise bounds of a sigma weight at speed `|v|` for `Theta` in `[a, b]`.
pub fn sigma_bounds(a: f64, b: f64, speed: f64) -> (f64, f64) {
    let s = speed * speed * (0.5 / a - 0.5 / b);
    ((a / b).powi(2) * (-s).exp(), (b / a).powi(2) * s.exp())
}

/// Horizontal landing displacement of a free magnetic flight,
/// `|v_par| sqrt(2 - 2 cos(B t)) / B`.
pub fn magnetic_displacement_norm(v: &[f64; 3], b3: f64, t: f64) -> f64 {
    let vp = (v[0] * v[0] + v[1] * v[1]).sqrt();
    vp * 2.0 * (0.5 * b3 * t).sin().abs() / b3
}

/// `|v|` at emission equals `|v|` at landing; returns the mismatch.
pub fn isometry_defect(b: &BounceRecord) -> f64 {
    (norm(&b.emit_velocity) - norm(&b.land_velocity)).abs()
}
