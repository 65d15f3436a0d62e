//! Numerical checks of the measure estimates behind the mixing argument:
//! bounce Jacobians, small exit times, residual measures of stochastic
//! cycles, the magnetic bad set and chain-level Doeblin overlap.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{generate_cycle, resonant_phase, sample_emission, wall_maxwellian};
use crate::characteristics::{exact_bounce_factor, flight_map_det, forward_exit, Direction, PhaseState};
use crate::error::{Error, Result};
use crate::fields::{FieldConfig, Regime, TemperatureField};
use crate::quadrature::composite;
use crate::rng::{domain, stream_rng};
use crate::stationary::BounceKernel;
use crate::stats::{linear_fit, Estimate, Moments};

const CHUNK: usize = 4096;

// sub-ranges of the verification stream domain, one per test; the base
// range belongs to the change-of-variables check
const JACOBIAN: u64 = domain::VERIFY + (1 << 40);
const EXIT: u64 = domain::VERIFY + (2 << 40);
const RESIDUAL: u64 = domain::VERIFY + (3 << 40);
const BAD_SET: u64 = domain::VERIFY + (4 << 40);
const VOLUME: u64 = domain::VERIFY + (5 << 40);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationConfig {
    pub samples: usize,
    pub jacobian_bins: usize,
    pub delta_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub i_max: usize,
    pub t0: f64,
    /// Horizons as multiples of `t0`.
    pub horizons: Vec<f64>,
    pub doeblin_grid: usize,
    pub doeblin_samples_per_cell: usize,
    pub doeblin_steps: usize,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            samples: 200_000,
            jacobian_bins: 40,
            delta_grid: log_grid(1e-3, 1e-1, 9),
            eps_grid: log_grid(0.02, 0.32, 5),
            i_max: 50,
            t0: 2.0,
            horizons: vec![5.0, 20.0],
            doeblin_grid: 16,
            doeblin_samples_per_cell: 2000,
            doeblin_steps: 3,
            seed: 1,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = |g: &[f64]| !g.is_empty() && g.windows(2).all(|w| w[0] < w[1]);
        if self.samples < 1 || self.jacobian_bins < 1 || self.i_max < 1 || self.doeblin_grid < 1 {
            return Err(Error::Config("verification counts must be at least 1".into()));
        }
        if self.doeblin_samples_per_cell < 1 || self.doeblin_steps < 1 {
            return Err(Error::Config("verification counts must be at least 1".into()));
        }
        if !increasing(&self.delta_grid) || !increasing(&self.eps_grid) || !increasing(&self.horizons) {
            return Err(Error::Config("verification grids must be strictly increasing".into()));
        }
        if self.delta_grid[0] <= 0.0 || *self.delta_grid.last().unwrap() > 0.2 {
            return Err(Error::Config("delta grid must lie in (0, 0.2]".into()));
        }
        if self.eps_grid[0] <= 0.0 || !(self.t0 > 0.0) || self.horizons[0] <= 0.0 {
            return Err(Error::Config("eps grid, T0 and horizons must be positive".into()));
        }
        Ok(())
    }
}

/// `n` log-spaced points from `a` to `b`.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n).map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// One line of the consolidated verdict file.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub test: String,
    pub statistic: f64,
    pub band: [f64; 2],
    pub pass: bool,
}

impl Verdict {
    pub fn within(test: impl Into<String>, statistic: f64, lo: f64, hi: f64) -> Self {
        Verdict {
            test: test.into(),
            statistic,
            band: [lo, hi],
            pass: statistic >= lo && statistic <= hi,
        }
    }
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [rng.random(), rng.random()]
}

/// Runs `f` on fixed-size chunks with per-chunk streams and merges in order.
fn chunked<T, F>(samples: usize, stream: u64, seed: u64, init: T, f: F) -> Result<Vec<T>>
where
    T: Clone + Send + Sync,
    F: Fn(&mut rand_chacha::ChaCha8Rng, usize, &mut T) -> Result<()> + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, stream + c as u64, 0);
            let mut acc = init.clone();
            f(&mut rng, CHUNK.min(samples - c * CHUNK), &mut acc)?;
            Ok(acc)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianBin {
    pub lo: f64,
    pub hi: f64,
    pub hits: u64,
    pub predicted: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianReport {
    pub regime: Regime,
    pub samples: usize,
    /// Flight-time histogram against the marginal obtained by integrating
    /// `mu_Theta v3 * factor` over landing displacements (exact regimes).
    pub bins: Vec<JacobianBin>,
    /// Max relative error over bins with at least 1000 hits.
    pub max_rel_err: Option<f64>,
    /// `E[1_box(t, d) / (mu v3 factor)]` against the box volume; checks the
    /// factor itself, in every regime.
    pub volume: Estimate,
    pub volume_exact: f64,
}

/// Displacement scale `s(t)` with `|d| = |v_par| s(t)` for free flights.
fn displacement_scale(field: &FieldConfig, t: f64) -> f64 {
    match field.regime {
        Regime::Magnetic => 2.0 * (0.5 * field.b3() * t).sin().abs() / field.b3(),
        _ => t,
    }
}

/// Flight-time density at `t` for emission temperature `temp`, from the
/// bounce change of variables: integrate `mu(v(t, d)) v3(t) factor(t)` in `d`.
fn predicted_density(field: &FieldConfig, temp: f64, t: f64) -> Result<f64> {
    let v3 = 0.5 * field.g * t;
    let factor = exact_bounce_factor(field, t)?;
    let s = displacement_scale(field, t);
    let r_max = 12.0 * temp.sqrt() * s;
    let radial: f64 = composite(8, 8, 0.0, r_max)
        .iter()
        .map(|&(r, w)| {
            let vp = r / s;
            w * 2.0 * PI * r * (-0.5 * (vp * vp + v3 * v3) / temp).exp() / (2.0 * PI * temp * temp)
        })
        .sum();
    Ok(radial * v3 * factor)
}

/// Bin edges with equal mass under the free-fall flight-time law at the
/// mean wall temperature; the last bin is cut at twelve standard deviations.
fn flight_time_edges(field: &FieldConfig, theta: &TemperatureField, bins: usize) -> Vec<f64> {
    let n = 32;
    let mean_t = (0..n * n)
        .map(|i| theta.eval([(i / n) as f64 / n as f64, (i % n) as f64 / n as f64]))
        .sum::<f64>()
        / (n * n) as f64;
    let scale = 2.0 * mean_t.sqrt() / field.g;
    let mut edges: Vec<f64> = (0..bins)
        .map(|k| scale * (-2.0 * (1.0 - k as f64 / bins as f64).ln()).sqrt())
        .collect();
    edges.push(12.0 * theta.b().sqrt() * 2.0 / field.g);
    edges
}

/// Forward Jacobian factor `1 / |det d(x_hit, t)/dv|` at an emission.
fn factor_at(x: [f64; 2], v: [f64; 3], t: f64, field: &FieldConfig) -> Result<f64> {
    if field.is_exact() {
        exact_bounce_factor(field, t)
    } else {
        Ok(1.0 / flight_map_det(&PhaseState::on_boundary(x, v), Direction::Forward, field)?.abs())
    }
}

pub fn verify_jacobian(
    field: &FieldConfig,
    theta: &TemperatureField,
    samples: usize,
    bins: usize,
    seed: u64,
) -> Result<JacobianReport> {
    let edges = flight_time_edges(field, theta, bins);
    let counts = chunked(samples, JACOBIAN, seed, vec![0u64; bins], |rng, n, acc| {
        for _ in 0..n {
            let y = uniform_point(rng);
            let v = sample_emission(y, theta, rng);
            let e = forward_exit(&PhaseState::on_boundary(y, v), field)?;
            let k = edges.partition_point(|&t| t <= e.t_exit);
            if k >= 1 && k <= bins {
                acc[k - 1] += 1;
            }
        }
        Ok(())
    })?;
    let mut hist = vec![0u64; bins];
    for c in counts {
        hist.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }

    let mut out_bins = Vec::new();
    let mut max_rel_err = None::<f64>;
    if field.is_exact() {
        // periodic trapezoid in y is spectrally accurate for smooth Theta
        let ny = 16;
        let temps: Vec<f64> = (0..ny * ny)
            .map(|i| theta.eval([(i / ny) as f64 / ny as f64, (i % ny) as f64 / ny as f64]))
            .collect();
        for (k, &hits) in hist.iter().enumerate() {
            let (lo, hi) = (edges[k], edges[k + 1]);
            let mut p = 0.0;
            for (t, w) in composite(8, 4, lo, hi) {
                let mut s = 0.0;
                for &temp in &temps {
                    s += predicted_density(field, temp, t)?;
                }
                p += w * s / temps.len() as f64;
            }
            let predicted = p * samples as f64;
            if hits == 0 {
                continue;
            }
            let rel_err = (hits as f64 - predicted).abs() / predicted;
            if hits >= 1000 {
                max_rel_err = Some(max_rel_err.map_or(rel_err, |m| m.max(rel_err)));
            }
            out_bins.push(JacobianBin {
                lo,
                hi,
                hits,
                predicted,
                rel_err,
            });
        }
    }

    // box in (t, d): t in [t1, t2], |d_i| <= r
    let t_mean = 2.0 * (0.5 * PI * theta.a()).sqrt() / field.g;
    let mut t2 = 1.5 * t_mean;
    if field.regime == Regime::Magnetic {
        // beyond half a gyration the displacement scale shrinks and 1/mu
        // becomes heavy tailed on the box
        t2 = t2.min(PI / field.b3());
    }
    let t1 = (0.5 * t_mean).min(0.5 * t2);
    let r = 0.5 * theta.a().sqrt() * t_mean;
    let volume_exact = (t2 - t1) * 4.0 * r * r;
    let vol_samples = if field.is_exact() { samples } else { samples.min(20_000) };
    let parts = chunked(vol_samples, VOLUME, seed, Moments::default(), |rng, n, acc| {
        for _ in 0..n {
            let y = uniform_point(rng);
            let v = sample_emission(y, theta, rng);
            let e = forward_exit(&PhaseState::on_boundary(y, v), field)?;
            let d = e.displacement;
            if e.t_exit >= t1 && e.t_exit <= t2 && d[0].abs() <= r && d[1].abs() <= r {
                let f = factor_at(y, v, e.t_exit, field)?;
                acc.push(1.0 / (f * wall_maxwellian(y, &v, theta) * v[2]));
            } else {
                acc.push(0.0);
            }
        }
        Ok(())
    })?;
    let volume = parts.into_iter().fold(Moments::default(), Moments::merge).estimate();
    Ok(JacobianReport {
        regime: field.regime,
        samples,
        bins: out_bins,
        max_rel_err,
        volume,
        volume_exact,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub x: f64,
    pub probability: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub slope_std_error: f64,
    pub r_squared: f64,
    pub points: Vec<ScalingPoint>,
}

fn probability_curve<F>(grid: &[f64], samples: usize, stream: u64, seed: u64, draw: F) -> Result<Vec<ScalingPoint>>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> Result<Box<dyn Fn(f64) -> bool>> + Sync,
{
    let parts = chunked(samples, stream, seed, vec![0u64; grid.len()], |rng, n, acc| {
        for _ in 0..n {
            let hit = draw(rng)?;
            for (a, &x) in acc.iter_mut().zip(grid) {
                if hit(x) {
                    *a += 1;
                }
            }
        }
        Ok(())
    })?;
    let mut counts = vec![0u64; grid.len()];
    for p in parts {
        counts.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let n = samples as f64;
    Ok(grid
        .iter()
        .zip(counts)
        .map(|(&x, c)| {
            let p = c as f64 / n;
            ScalingPoint {
                x,
                probability: p,
                std_error: (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect())
}

fn log_log_fit(points: Vec<ScalingPoint>) -> Result<SlopeFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.probability > 0.0)
        .map(|p| (p.x.ln(), p.probability.ln()))
        .unzip();
    let fit = linear_fit(&xs, &ys)
        .ok_or_else(|| Error::InvalidArgument("need two positive probabilities for a slope".into()))?;
    Ok(SlopeFit {
        slope: fit.slope,
        slope_std_error: fit.slope_std_error,
        r_squared: fit.r_squared,
        points,
    })
}

/// `P(t < delta)` for the flight time of flux-measure emission, which has
/// the law of `t_b` by reversibility, with its log-log slope.
pub fn exit_time_scaling(
    field: &FieldConfig,
    theta: &TemperatureField,
    delta_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<SlopeFit> {
    let points = probability_curve(delta_grid, samples, EXIT, seed, |rng| {
        let y = uniform_point(rng);
        let v = sample_emission(y, theta, rng);
        let t = forward_exit(&PhaseState::on_boundary(y, v), field)?.t_exit;
        Ok(Box::new(move |d| t < d))
    })?;
    log_log_fit(points)
}

/// Flux probability of the bad set `{|B3 t - 2 pi k| <= eps}` over `k >= 1`,
/// or `k >= 0` with `include_zero`.
pub fn bad_set_scaling(
    field: &FieldConfig,
    theta: &TemperatureField,
    eps_grid: &[f64],
    include_zero: bool,
    samples: usize,
    seed: u64,
) -> Result<SlopeFit> {
    if field.regime != Regime::Magnetic {
        return Err(Error::WrongRegime("bad-set scaling needs the magnetic regime".into()));
    }
    let b3 = field.b3();
    let points = probability_curve(eps_grid, samples, BAD_SET, seed, |rng| {
        let y = uniform_point(rng);
        let v = sample_emission(y, theta, rng);
        let t = forward_exit(&PhaseState::on_boundary(y, v), field)?.t_exit;
        Ok(Box::new(move |e| resonant_phase(b3 * t, e, include_zero)))
    })?;
    log_log_fit(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualCurve {
    pub horizon: f64,
    /// `R(i)` for `i = 1..=i_max`.
    pub values: Vec<Estimate>,
    /// `(b/a)^(2i)`, the bound from pointwise sigma estimates.
    pub naive_bound: Vec<f64>,
    /// `max R(1..=10)`.
    pub early_max: f64,
    /// `max_i (R(i) + 3 se_i) / early_max`.
    pub plateau_ratio: f64,
}

/// `R(i) = E[W_i 1{t^i <= t}]` over cycles started at uniform wall points,
/// with `W_i` the running product of sigma weights.
pub fn residual_measure_curve(
    theta: &TemperatureField,
    field: &FieldConfig,
    i_max: usize,
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<ResidualCurve> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    // distinct horizons get distinct streams via the high bits of the float
    let stream = RESIDUAL + (((horizon.to_bits() >> 32) & 0xffff) << 20);
    let parts = chunked(samples, stream, seed, vec![Moments::default(); i_max], |rng, n, acc| {
        for _ in 0..n {
            let start = uniform_point(rng);
            let trace = generate_cycle(start, i_max, horizon, field, theta, rng)?;
            let mut i = 0;
            for (t, w) in trace.completion_times().zip(trace.running_weights()) {
                acc[i].push(if t <= horizon { w } else { 0.0 });
                i += 1;
            }
            for a in acc.iter_mut().skip(i) {
                a.push(0.0);
            }
        }
        Ok(())
    })?;
    let mut m = vec![Moments::default(); i_max];
    for p in parts {
        m = m.into_iter().zip(p).map(|(a, b)| a.merge(b)).collect();
    }
    let values: Vec<Estimate> = m.iter().map(Moments::estimate).collect();
    let early_max = values.iter().take(10).map(|e| e.value).fold(0.0, f64::max);
    let plateau_ratio = values
        .iter()
        .map(|e| e.value + 3.0 * e.std_error)
        .fold(0.0, f64::max)
        / early_max;
    let r2 = theta.ratio_sq();
    Ok(ResidualCurve {
        horizon,
        naive_bound: (1..=i_max).map(|i| r2.powi(i as i32)).collect(),
        values,
        early_max,
        plateau_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DoeblinReport {
    pub steps: usize,
    /// `sum_j min_i K^N[i][j]` of the row-normalized chain.
    pub overlap: f64,
    /// Normalized common component; empty when no minorization is detected.
    pub common: Vec<f64>,
    pub message: String,
}

/// Overlap constants for `N = 1..=steps`.
pub fn doeblin_curve(kernel: &BounceKernel, steps: usize) -> Result<Vec<DoeblinReport>> {
    let p = kernel.row_normalized()?.to_dense();
    let mut power = p.clone();
    let mut out = Vec::with_capacity(steps);
    for n in 1..=steps {
        if n > 1 {
            power = &p * &power;
        }
        let mins: Vec<f64> = (0..power.ncols()).map(|j| power.column(j).min().max(0.0)).collect();
        let overlap: f64 = mins.iter().sum();
        let (common, message) = if overlap > 0.0 {
            (
                mins.iter().map(|m| m / overlap).collect(),
                format!("minorization at N = {n} with c = {overlap:.6}"),
            )
        } else {
            (Vec::new(), format!("no minorization detected at N = {n}"))
        };
        out.push(DoeblinReport {
            steps: n,
            overlap,
            common,
            message,
        });
    }
    Ok(out)
}

pub fn doeblin_minorization(kernel: &BounceKernel, steps: usize) -> Result<DoeblinReport> {
    if steps < 1 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    Ok(doeblin_curve(kernel, steps)?.pop().unwrap())
}

/// All checks for one field, with their data and verdicts.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationSuite {
    pub jacobian: JacobianReport,
    pub exit_time: SlopeFit,
    pub bad_set: Option<SlopeFit>,
    pub residual: Vec<ResidualCurve>,
    pub doeblin: Vec<DoeblinReport>,
    pub verdicts: Vec<Verdict>,
}

impl VerificationSuite {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

pub fn run_suite(field: &FieldConfig, theta: &TemperatureField, cfg: &VerificationConfig) -> Result<VerificationSuite> {
    cfg.validate()?;
    let s = cfg.seed;
    let jacobian = verify_jacobian(field, theta, cfg.samples, cfg.jacobian_bins, s)?;
    let exit_time = exit_time_scaling(field, theta, &cfg.delta_grid, cfg.samples, s)?;
    let bad_set = match field.regime {
        Regime::Magnetic => Some(bad_set_scaling(field, theta, &cfg.eps_grid, false, cfg.samples, s)?),
        _ => None,
    };
    let residual = cfg
        .horizons
        .iter()
        .map(|h| residual_measure_curve(theta, field, cfg.i_max, h * cfg.t0, cfg.samples / 4 + 1, s))
        .collect::<Result<Vec<_>>>()?;
    let kernel = crate::stationary::estimate_kernel(cfg.doeblin_grid, cfg.doeblin_samples_per_cell, field, theta, s)?;
    let doeblin = doeblin_curve(&kernel, cfg.doeblin_steps)?;

    let mut verdicts = Vec::new();
    if let Some(e) = jacobian.max_rel_err {
        verdicts.push(Verdict::within("jacobian_marginal_max_rel_err", e, 0.0, 0.03));
    }
    let v = &jacobian.volume;
    let z = (v.value - jacobian.volume_exact) / v.std_error.max(f64::MIN_POSITIVE);
    verdicts.push(Verdict::within("jacobian_volume_z", z, -3.0, 3.0));
    verdicts.push(Verdict::within("exit_time_slope", exit_time.slope, 1.8, 2.2));
    if let Some(b) = &bad_set {
        verdicts.push(Verdict::within("bad_set_slope", b.slope, 0.8, 1.2));
    }
    for r in &residual {
        verdicts.push(Verdict::within(
            format!("residual_plateau_t{}", r.horizon),
            r.plateau_ratio,
            0.0,
            2.0,
        ));
    }
    let last = doeblin.last().unwrap();
    verdicts.push(Verdict::within(
        format!("doeblin_overlap_n{}", last.steps),
        last.overlap,
        f64::MIN_POSITIVE,
        1.0 + 1e-12,
    ));
    let monotone = doeblin.windows(2).all(|w| w[1].overlap >= w[0].overlap - 1e-12);
    verdicts.push(Verdict::within("doeblin_monotone", monotone as u8 as f64, 1.0, 1.0));
    Ok(VerificationSuite {
        jacobian,
        exit_time,
        bad_set,
        residual,
        doeblin,
        verdicts,
    })
}
