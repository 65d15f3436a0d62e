//! Time evolution of signed-weight particle ensembles and the decay
//! observables of the fluctuation `f = F - F_s`.
//!
//! Particles follow characteristics between wall hits and are re-emitted
//! from the hit point with a fresh flux-Maxwellian velocity and the same
//! weight, which realizes the diffuse-reflection operator in expectation.

use std::f64::consts::PI;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{sample_emission, wall_maxwellian};
use crate::characteristics::{advance, forward_exit, forward_exit_time, PhaseState};
use crate::error::{Error, Result};
use crate::fields::{FieldConfig, TemperatureField};
use crate::rng::{domain, stream_rng};
use crate::stationary::{reconstruct_density, FluxField, PhaseProposal};
use crate::stats::{linear_fit, Estimate, Moments};

/// One particle: the current free-flight segment and its weight.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Particle {
    pub id: u64,
    /// State at the start of the current segment.
    pub start: PhaseState,
    pub t_start: f64,
    /// Absolute time of the next wall hit.
    pub t_land: f64,
    pub land: [f64; 2],
    pub weight: f64,
    pub bounces: u64,
}

impl Particle {
    fn new(id: u64, state: PhaseState, weight: f64, field: &FieldConfig) -> Result<Self> {
        let e = forward_exit(&state, field)?;
        Ok(Particle {
            id,
            start: state,
            t_start: 0.0,
            t_land: e.t_exit,
            land: e.x_hit,
            weight,
            bounces: 0,
        })
    }

    /// Re-emits at every wall hit up to time `t`.
    fn catch_up(&mut self, t: f64, seed: u64, field: &FieldConfig, theta: &TemperatureField) -> Result<()> {
        while self.t_land <= t {
            self.bounces += 1;
            let mut rng = stream_rng(seed, domain::ENSEMBLE + self.id, self.bounces);
            let v = sample_emission(self.land, theta, &mut rng);
            let start = PhaseState::on_boundary(self.land, v);
            let e = forward_exit(&start, field)?;
            self.start = start;
            self.t_start = self.t_land;
            self.t_land += e.t_exit;
            self.land = e.x_hit;
        }
        Ok(())
    }

    /// State at time `t` inside the current segment.
    pub fn state_at(&self, t: f64, field: &FieldConfig) -> Result<PhaseState> {
        let dt = t - self.t_start;
        if dt == 0.0 {
            return Ok(self.start);
        }
        match advance(&self.start, dt, field) {
            Ok(s) => Ok(s),
            Err(Error::ExitedHalfSpace { .. }) => Ok(PhaseState::on_boundary(self.land, self.start.v)),
            Err(e) => Err(e),
        }
    }

    /// Remaining flight time, i.e. the forward exit time of the current state.
    pub fn t_f(&self, t: f64) -> f64 {
        (self.t_land - t).max(0.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightedEnsemble {
    pub particles: Vec<Particle>,
    pub time: f64,
    pub seed: u64,
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    pub fn abs_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight.abs()).sum()
    }
}

/// Exact sampler for the normalized stationary density `F_s / m`.
///
/// Uses the flux representation: a wall point `y ~ J(y) E[t_f]`, emission
/// velocity from `mu_Theta u3 t_f du`, and a uniform time along the flight.
pub struct StationarySampler<'a> {
    flux: &'a FluxField,
    field: &'a FieldConfig,
    theta: &'a TemperatureField,
    envelope: f64,
}

impl<'a> StationarySampler<'a> {
    pub fn new(flux: &'a FluxField, field: &'a FieldConfig, theta: &'a TemperatureField) -> Result<Self> {
        if !(flux.min() > 0.0) {
            return Err(Error::InvalidArgument("stationary flux must be positive".into()));
        }
        Ok(StationarySampler {
            flux,
            field,
            theta,
            envelope: flux.max() * theta.b().sqrt(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PhaseState> {
        let pull = self.field.min_vertical_pull();
        loop {
            let y = [rng.random::<f64>(), rng.random::<f64>()];
            let t = self.theta.eval(y);
            if rng.random::<f64>() * self.envelope > self.flux.value_at(y) * t.sqrt() {
                continue;
            }
            let s = t.sqrt();
            let n: [f64; 5] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let u3 = s * (n[2] * n[2] + n[3] * n[3] + n[4] * n[4]).sqrt();
            let start = PhaseState::on_boundary(y, [s * n[0], s * n[1], u3]);
            let tf = if self.field.is_exact() {
                2.0 * u3 / self.field.g
            } else {
                let tf = forward_exit_time(&start, self.field)?;
                // flights are never longer than 2 u3 / (g - rho3)
                if rng.random::<f64>() > tf * pull / (2.0 * u3) {
                    continue;
                }
                tf
            };
            let at = rng.random::<f64>() * tf;
            return match advance(&start, at, self.field) {
                Ok(st) => Ok(st),
                Err(Error::ExitedHalfSpace { .. }) => Ok(start),
                Err(e) => Err(e),
            };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FluctuationKind {
    /// `f0 = 0`.
    Zero,
    /// `f0 = F_s` (positive, not zero-mass); used for stationarity checks.
    Stationary,
    /// `f0 = (a/2) sin(2 pi x1) [F_s(x, v) + F_s(x - e1/2, v)]`, built from
    /// antisymmetric pairs shifted by half a period in `x1`.
    Modulated,
    /// `f0 = a (M_T - F_s)` with `M_T` a gravity Maxwellian at temperature
    /// `factor * b`, normalized to the mass of `F_s`.
    Tilted { factor: f64 },
}

/// Admissibility diagnostics of the initial fluctuation.
#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub particles: usize,
    pub total_weight: f64,
    pub negative_fraction: f64,
    /// Sampled `sup exp(theta' (|v|^2 + 2 Phi)) |f0|`.
    pub weighted_sup: f64,
    /// Estimate of `int exp(delta (|v|^2 + 2 Phi)^{1/2}) |f0|`.
    pub weighted_l1: f64,
}

fn gravity_maxwellian(field: &FieldConfig, temp: f64, mass: f64, s: &PhaseState) -> f64 {
    let g = field.g;
    let v2 = s.v[0] * s.v[0] + s.v[1] * s.v[1] + s.v[2] * s.v[2];
    mass * g / temp * (-g * s.x[2] / temp).exp() * (-0.5 * v2 / temp).exp() / (2.0 * PI * temp).powf(1.5)
}

/// Builds an ensemble for `F_s`-based initial data. `samples` is the number
/// of particles (rounded up to an even count for paired kinds).
#[allow(clippy::too_many_arguments)]
pub fn init_fluctuation(
    kind: FluctuationKind,
    amplitude: f64,
    flux: &FluxField,
    field: &FieldConfig,
    theta: &TemperatureField,
    samples: usize,
    seed: u64,
    theta_prime: f64,
    delta: f64,
) -> Result<(WeightedEnsemble, InitReport)> {
    let mass = flux.total_mass;
    if !(mass > 0.0) {
        return Err(Error::InvalidArgument("flux must carry a positive total mass".into()));
    }
    let sampler = StationarySampler::new(flux, field, theta)?;
    let pairs = samples.div_ceil(2);
    // state, weight, pointwise f0, pointwise F_s at the particle
    type Draw = (PhaseState, f64, f64, f64);
    let draws: Vec<Result<[Draw; 2]>> = (0..pairs)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, domain::ENSEMBLE + 2 * k as u64, 0);
            let s = sampler.sample(&mut rng)?;
            let fs = |st: &PhaseState| reconstruct_density(flux, st, field, theta);
            Ok(match kind {
                FluctuationKind::Zero => {
                    let s2 = sampler.sample(&mut rng)?;
                    [(s, 0.0, 0.0, 1.0), (s2, 0.0, 0.0, 1.0)]
                }
                FluctuationKind::Stationary => {
                    let s2 = sampler.sample(&mut rng)?;
                    let w = amplitude * mass / (2 * pairs) as f64;
                    [(s, w, amplitude * fs(&s)?, fs(&s)?), (s2, w, amplitude * fs(&s2)?, fs(&s2)?)]
                }
                FluctuationKind::Modulated => {
                    let partner = PhaseState::new([s.x[0] + 0.5, s.x[1], s.x[2]], s.v);
                    let w = 0.5 * amplitude * mass / pairs as f64 * (2.0 * PI * s.x[0]).sin();
                    let back = PhaseState::new([s.x[0] - 0.5, s.x[1], s.x[2]], s.v);
                    let (fa, fb, fc) = (fs(&s)?, fs(&partner)?, fs(&back)?);
                    let sn = (2.0 * PI * s.x[0]).sin();
                    // f0 at the particle and at its partner (same sum, opposite sine)
                    let f_here = 0.5 * amplitude * sn * (fa + fc);
                    let f_there = -0.5 * amplitude * sn * (fb + fa);
                    [(s, w, f_here, fa), (partner, -w, f_there, fb)]
                }
                FluctuationKind::Tilted { factor } => {
                    let temp = factor * theta.b();
                    let x3 = -(1.0 - rng.random::<f64>()).ln() * temp / field.g;
                    let sd = temp.sqrt();
                    let v: [f64; 3] = std::array::from_fn(|_| sd * rng.sample::<f64, _>(StandardNormal));
                    let m_state = PhaseState::new([rng.random(), rng.random(), x3], v);
                    let w = amplitude * mass / pairs as f64;
                    let f_at = |st: &PhaseState| -> Result<(f64, f64)> {
                        let f = fs(st)?;
                        Ok((amplitude * (gravity_maxwellian(field, temp, mass, st) - f), f))
                    };
                    let (fm, fsm) = f_at(&m_state)?;
                    let (fp, fsp) = f_at(&s)?;
                    [(m_state, w, fm, fsm), (s, -w, fp, fsp)]
                }
            })
        })
        .collect();

    let mut particles = Vec::with_capacity(2 * pairs);
    let mut negative = 0usize;
    let mut weighted_sup = 0.0f64;
    let mut weighted_l1 = 0.0;
    for (k, d) in draws.into_iter().enumerate() {
        for (h, (st, w, f0, fs)) in d?.into_iter().enumerate() {
            if fs + f0 < 0.0 {
                negative += 1;
            }
            let e2 = st.v.iter().map(|c| c * c).sum::<f64>() + 2.0 * field.potential_energy(&st.x);
            weighted_sup = weighted_sup.max((theta_prime * e2).exp() * f0.abs());
            weighted_l1 += w.abs() * (delta * e2.sqrt()).exp();
            particles.push(Particle::new((2 * k + h) as u64, st, w, field)?);
        }
    }
    let n = particles.len();
    let negative_fraction = negative as f64 / n as f64;
    if negative_fraction > 1e-3 {
        return Err(Error::NegativeInitialData {
            fraction: negative_fraction,
        });
    }
    let ens = WeightedEnsemble {
        particles,
        time: 0.0,
        seed,
    };
    let report = InitReport {
        particles: n,
        total_weight: ens.total_weight(),
        negative_fraction,
        weighted_sup,
        weighted_l1,
    };
    Ok((ens, report))
}

/// Phase-space cells used to turn signed weights into `L1` estimates:
/// `nx1 x nx2` horizontal cells times `n_energy` bins of `(|v|^2/2 + Phi) / b`
/// of unit width (the last bin is open).
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
pub struct BinSpec {
    pub nx1: usize,
    pub nx2: usize,
    pub n_energy: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            nx1: 16,
            nx2: 1,
            n_energy: 1,
        }
    }
}

impl BinSpec {
    fn spatial(&self) -> usize {
        self.nx1 * self.nx2
    }

    fn total(&self) -> usize {
        self.spatial() * self.n_energy
    }

    fn index(&self, s: &PhaseState, energy_over_b: f64) -> (usize, usize) {
        let ix = ((s.x[0] * self.nx1 as f64) as usize).min(self.nx1 - 1);
        let iy = ((s.x[1] * self.nx2 as f64) as usize).min(self.nx2 - 1);
        let ie = (energy_over_b as usize).min(self.n_energy - 1);
        let cell = ix * self.nx2 + iy;
        (cell, cell * self.n_energy + ie)
    }
}

/// Parameters of the recorded norms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObservableSpec {
    pub bins: BinSpec,
    /// Rate of the exit-time weight `exp(delta t_f)`.
    pub delta: f64,
    /// Exponent `theta` of the moment weight `exp(theta (|v|^2 + 2 Phi))`.
    pub theta: f64,
    pub t0: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayObservables {
    pub t: f64,
    /// Binned estimate of `||f||_1`.
    pub l1: f64,
    pub l1_se: f64,
    /// Expected value of `l1` for pure noise with the same weights.
    pub noise_floor: f64,
    /// Binned `||exp(delta t_f) f||_1`.
    pub weighted_l1: f64,
    pub weighted_l1_se: f64,
    /// Binned `||1_{t_f >= T0/4} f||_1`.
    pub tail_l1: f64,
    /// `max_cell int exp(theta (|v|^2 + 2 Phi)) |f| dv` per unit area.
    pub max_cell_exp_moment: f64,
    pub max_cell_exp_moment_se: f64,
    pub total_weight: f64,
    pub window_index: usize,
}

#[derive(Clone, Copy, Default)]
struct BinAcc {
    w: f64,
    w2: f64,
    wphi: f64,
    wphi2: f64,
    wtail: f64,
    wmom: f64,
    wmom2: f64,
}

impl BinAcc {
    fn add(&mut self, o: &BinAcc) {
        self.w += o.w;
        self.w2 += o.w2;
        self.wphi += o.wphi;
        self.wphi2 += o.wphi2;
        self.wtail += o.wtail;
        self.wmom += o.wmom;
        self.wmom2 += o.wmom2;
    }
}

/// Particles per work unit; fixed so results do not depend on thread count.
pub const CHUNK: usize = 8192;

fn observe(
    ens: &WeightedEnsemble,
    t: f64,
    field: &FieldConfig,
    theta: &TemperatureField,
    spec: &ObservableSpec,
) -> Result<DecayObservables> {
    let nb = spec.bins.total();
    let b = theta.b();
    let parts: Vec<Result<Vec<BinAcc>>> = ens
        .particles
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![BinAcc::default(); nb];
            for p in chunk {
                if p.weight == 0.0 {
                    continue;
                }
                let s = p.state_at(t, field)?;
                let e = s.energy(field);
                let (_, k) = spec.bins.index(&s, e / b);
                let w = p.weight;
                let tf = p.t_f(t);
                let phi = (spec.delta * tf).exp();
                let mom = (spec.theta * 2.0 * e).exp();
                let a = &mut acc[k];
                a.w += w;
                a.w2 += w * w;
                a.wphi += w * phi;
                a.wphi2 += (w * phi).powi(2);
                if tf >= 0.25 * spec.t0 {
                    a.wtail += w;
                }
                a.wmom += w * mom;
                a.wmom2 += (w * mom).powi(2);
            }
            Ok(acc)
        })
        .collect();
    let mut acc = vec![BinAcc::default(); nb];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p?.iter()) {
            a.add(b);
        }
    }
    let half_normal = (2.0 / PI).sqrt();
    let mut out = DecayObservables {
        t,
        l1: 0.0,
        l1_se: 0.0,
        noise_floor: 0.0,
        weighted_l1: 0.0,
        weighted_l1_se: 0.0,
        tail_l1: 0.0,
        max_cell_exp_moment: 0.0,
        max_cell_exp_moment_se: 0.0,
        total_weight: 0.0,
        window_index: (t / spec.t0 + 1e-9).floor() as usize,
    };
    let (mut w2, mut wphi2) = (0.0, 0.0);
    for a in &acc {
        out.l1 += a.w.abs();
        out.noise_floor += half_normal * a.w2.sqrt();
        out.weighted_l1 += a.wphi.abs();
        out.tail_l1 += a.wtail.abs();
        out.total_weight += a.w;
        w2 += a.w2;
        wphi2 += a.wphi2;
    }
    out.l1_se = w2.sqrt();
    out.weighted_l1_se = wphi2.sqrt();
    let area = 1.0 / spec.bins.spatial() as f64;
    for cell in 0..spec.bins.spatial() {
        let bins = &acc[cell * spec.bins.n_energy..(cell + 1) * spec.bins.n_energy];
        let m: f64 = bins.iter().map(|a| a.wmom.abs()).sum::<f64>() / area;
        if m > out.max_cell_exp_moment {
            out.max_cell_exp_moment = m;
            out.max_cell_exp_moment_se = bins.iter().map(|a| a.wmom2).sum::<f64>().sqrt() / area;
        }
    }
    Ok(out)
}

/// Evolves the ensemble through `output_times` (sorted, not before the
/// current time, not after `until`) and records the observables there.
pub fn evolve(
    ens: &mut WeightedEnsemble,
    until: f64,
    field: &FieldConfig,
    theta: &TemperatureField,
    output_times: &[f64],
    spec: &ObservableSpec,
) -> Result<Vec<DecayObservables>> {
    if !(until >= ens.time) {
        return Err(Error::InvalidArgument(format!(
            "cannot evolve backwards from t = {} to {until}",
            ens.time
        )));
    }
    let mut out = Vec::with_capacity(output_times.len());
    let seed = ens.seed;
    for &t in output_times.iter().filter(|&&t| t <= until) {
        if t < ens.time {
            return Err(Error::InvalidArgument(format!("output time {t} precedes t = {}", ens.time)));
        }
        ens.particles
            .par_chunks_mut(CHUNK)
            .map(|chunk| chunk.iter_mut().try_for_each(|p| p.catch_up(t, seed, field, theta)))
            .collect::<Result<Vec<()>>>()?;
        ens.time = t;
        out.push(observe(ens, t, field, theta, spec)?);
    }
    if until > ens.time {
        ens.particles
            .par_chunks_mut(CHUNK)
            .map(|chunk| chunk.iter_mut().try_for_each(|p| p.catch_up(until, seed, field, theta)))
            .collect::<Result<Vec<()>>>()?;
        ens.time = until;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowRow {
    pub window: usize,
    /// `||f(N T0)|| / ||f((N-1) T0)||`.
    pub ratio: f64,
    pub ratio_se: f64,
    /// `||1_{t_f >= T0/4} f((N-1) T0)||_1`.
    pub tail_mass: f64,
}

/// Per-window contraction ratios from observations at multiples of `T0`.
pub fn window_contraction(series: &[DecayObservables], t0: f64) -> Vec<WindowRow> {
    let at = |k: usize| {
        series
            .iter()
            .find(|o| (o.t - k as f64 * t0).abs() < 1e-9 * t0.max(1.0))
    };
    let mut rows = Vec::new();
    let mut k = 1;
    while let (Some(prev), Some(cur)) = (at(k - 1), at(k)) {
        if !(prev.l1 > 0.0) {
            break;
        }
        let ratio = cur.l1 / prev.l1;
        let rel = ((cur.l1_se / cur.l1.max(1e-300)).powi(2) + (prev.l1_se / prev.l1).powi(2)).sqrt();
        rows.push(WindowRow {
            window: k,
            ratio,
            ratio_se: ratio * rel,
            tail_mass: prev.tail_l1,
        });
        k += 1;
    }
    rows
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub rate_std_error: f64,
    pub points: usize,
    /// End of the fitted range after truncation.
    pub t_end: f64,
    pub truncated: bool,
}

/// Least squares on `ln y(t)` over `[t_min, t_max]`. The range is cut at the
/// first value not exceeding `floor(t)` (zero by default).
pub fn fit_decay_series(
    t: &[f64],
    y: &[f64],
    floor: Option<&[f64]>,
    t_min: f64,
    t_max: f64,
) -> Result<DecayFit> {
    let mut xs = Vec::new();
    let mut ls = Vec::new();
    let mut truncated = false;
    for (i, (&ti, &yi)) in t.iter().zip(y).enumerate() {
        if ti < t_min || ti > t_max {
            continue;
        }
        let f = floor.map_or(0.0, |f| f[i]);
        if !(yi > f) {
            warn!("decay fit truncated at t = {ti}: value {yi:e} at or below floor {f:e}");
            truncated = true;
            break;
        }
        xs.push(ti);
        ls.push(yi.ln());
    }
    if xs.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "decay fit needs at least 8 positive points in range, got {}",
            xs.len()
        )));
    }
    let fit = linear_fit(&xs, &ls).ok_or_else(|| Error::InvalidArgument("degenerate fit".into()))?;
    Ok(DecayFit {
        rate: -fit.slope,
        amplitude: fit.intercept.exp(),
        r_squared: fit.r_squared,
        rate_std_error: fit.slope_std_error,
        points: xs.len(),
        t_end: *xs.last().unwrap(),
        truncated,
    })
}

pub fn fit_decay(series: &[DecayObservables], t_min: f64, t_max: f64) -> Result<DecayFit> {
    let t: Vec<f64> = series.iter().map(|o| o.t).collect();
    let y: Vec<f64> = series.iter().map(|o| o.l1).collect();
    fit_decay_series(&t, &y, None, t_min, t_max)
}

/// `||m||_1` of the Doeblin minorant, by two estimators.
#[derive(Debug, Clone, Serialize)]
pub struct DoeblinMass {
    pub t0: f64,
    /// `exp(-25 T0^2 / b)`.
    pub prefactor: f64,
    /// Phase-space estimate of `int 1_{t_b <= T0/4} mu_Theta(x_b, v_b)`.
    pub phase_space: Estimate,
    /// Boundary-time estimate `int int mu_Theta u3 min(t_f, T0/4)`.
    pub boundary: Estimate,
    /// `prefactor * boundary`.
    pub value: Estimate,
}

pub fn theoretical_doeblin_mass(
    t0: f64,
    field: &FieldConfig,
    theta: &TemperatureField,
    samples: usize,
    seed: u64,
) -> Result<DoeblinMass> {
    if !(t0 > 0.0) {
        return Err(Error::InvalidArgument("T0 must be positive".into()));
    }
    let cap = 0.25 * t0;
    let prop = PhaseProposal::new(field, theta);
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Result<(Moments, Moments)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, domain::DOEBLIN + c as u64, 0);
            let (mut ps, mut bd) = (Moments::default(), Moments::default());
            for _ in 0..CHUNK.min(samples - c * CHUNK) {
                let (s, p) = prop.sample(&mut rng);
                let e = crate::characteristics::backward_exit(&s, field)?;
                let val = if e.t_exit <= cap {
                    wall_maxwellian(e.x_hit, &e.v_hit, theta) / p
                } else {
                    0.0
                };
                ps.push(val);
                let y = [rng.random::<f64>(), rng.random::<f64>()];
                let u = sample_emission(y, theta, &mut rng);
                let tf = forward_exit_time(&PhaseState::on_boundary(y, u), field)?;
                bd.push(tf.min(cap));
            }
            Ok((ps, bd))
        })
        .collect();
    let (mut ps, mut bd) = (Moments::default(), Moments::default());
    for p in parts {
        let (a, b) = p?;
        ps = ps.merge(a);
        bd = bd.merge(b);
    }
    let prefactor = (-25.0 * t0 * t0 / theta.b()).exp();
    let boundary = bd.estimate();
    Ok(DoeblinMass {
        t0,
        prefactor,
        phase_space: ps.estimate(),
        boundary,
        value: boundary.scale(prefactor),
    })
}

/// `Lambda = -ln(R) / T0` with
/// `R = max{1 - m (1 - 4 C (1+T0)(1+delta T0) / (delta T0 phi(T0/4))), (1 + delta T0/2)/(1 + delta T0)}`
/// and `phi(tau) = exp(delta tau)`, for a user-supplied constant `C`.
pub fn lambda_formula(t0: f64, delta: f64, m_t0: f64, c: f64) -> Result<f64> {
    if !(delta * t0 > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "window condition delta * T0 > 1 violated (delta * T0 = {})",
            delta * t0
        )));
    }
    let dt = delta * t0;
    let phi = (0.25 * dt).exp();
    let first = 1.0 - m_t0 * (1.0 - 4.0 * c * (1.0 + t0) * (1.0 + dt) / (dt * phi));
    let second = (1.0 + 0.5 * dt) / (1.0 + dt);
    Ok(-first.max(second).ln() / t0)
}

/// `||f||_1 + (1 + 1/(delta T0)) 4 m / phi(T0/4) ||phi(t_f) f||_1`.
pub fn triple_norm(obs: &DecayObservables, t0: f64, delta: f64, m_t0: f64) -> f64 {
    obs.l1 + (1.0 + 1.0 / (delta * t0)) * 4.0 * m_t0 / (0.25 * delta * t0).exp() * obs.weighted_l1
}

/// Default moment exponents: `theta' = 0.9 / (2b)` and `theta = theta' / 2`.
pub fn default_moment_exponents(b: f64) -> (f64, f64) {
    let tp = 0.9 / (2.0 * b);
    (0.5 * tp, tp)
}
