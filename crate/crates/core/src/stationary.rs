//! Stationary solutions through the boundary outgoing flux.
//!
//! A stationary density is `F_s(x, v) = mu_Theta(x_b, v_b) J(x_b)` along
//! backward characteristics, so it is fixed by the flux `J` on the torus.
//! `J` is discretized as cell values on an `N x N` grid and found either as
//! the fixed point of a Monte-Carlo bounce kernel, or through the damped,
//! attenuated iteration for the fluctuation `f = F - mu`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{maxwellian_at, sample_emission_at, sigma_ratio};
use crate::characteristics::{backward_exit, forward_exit, forward_exit_time, PhaseState};
use crate::error::{Error, Result};
use crate::fields::{FieldConfig, TemperatureField};
use crate::quadrature::gauss_legendre_on;
use crate::rng::{domain, stream_rng};
use crate::stats::{Estimate, Moments};

/// Uniform `N x N` partition of the unit torus; cell `i = ix * N + iy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TorusGrid {
    pub n: usize,
}

impl TorusGrid {
    pub fn new(n: usize) -> Self {
        TorusGrid { n }
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    pub fn cell_area(&self) -> f64 {
        1.0 / self.cells() as f64
    }

    #[inline]
    pub fn cell_of(&self, x: [f64; 2]) -> usize {
        let n = self.n;
        let ix = ((x[0] * n as f64) as usize).min(n - 1);
        let iy = ((x[1] * n as f64) as usize).min(n - 1);
        ix * n + iy
    }

    pub fn corner(&self, i: usize) -> [f64; 2] {
        let h = 1.0 / self.n as f64;
        [(i / self.n) as f64 * h, (i % self.n) as f64 * h]
    }

    pub fn center(&self, i: usize) -> [f64; 2] {
        let c = self.corner(i);
        let h = 0.5 / self.n as f64;
        [c[0] + h, c[1] + h]
    }

    /// Periodic bilinear interpolation of cell-center values.
    pub fn interpolate(&self, values: &[f64], x: [f64; 2]) -> f64 {
        let n = self.n;
        let u = x[0] * n as f64 - 0.5;
        let w = x[1] * n as f64 - 0.5;
        let (i0, j0) = (u.floor(), w.floor());
        let (fx, fy) = (u - i0, w - j0);
        let wrap = |k: f64| (k as i64).rem_euclid(n as i64) as usize;
        let (ia, ib) = (wrap(i0), wrap(i0 + 1.0));
        let (ja, jb) = (wrap(j0), wrap(j0 + 1.0));
        let at = |i: usize, j: usize| values[i * n + j];
        (1.0 - fx) * ((1.0 - fy) * at(ia, ja) + fy * at(ia, jb)) + fx * ((1.0 - fy) * at(ib, ja) + fy * at(ib, jb))
    }

    /// Average of `2 x 2` blocks of a `2N x 2N` field.
    pub fn coarsen(&self, fine: &[f64]) -> Vec<f64> {
        let n = self.n;
        let m = 2 * n;
        assert_eq!(fine.len(), m * m);
        (0..n * n)
            .map(|c| {
                let (ix, iy) = (c / n, c % n);
                let s: f64 = (0..2)
                    .flat_map(|a| (0..2).map(move |b| (2 * ix + a) * m + 2 * iy + b))
                    .map(|k| fine[k])
                    .sum();
                0.25 * s
            })
            .collect()
    }
}

/// Sparse one-bounce transfer matrix. Row `i` holds the sigma-weighted
/// landing mass of emissions from cell `i`.
#[derive(Debug, Clone)]
pub struct BounceKernel {
    pub grid: TorusGrid,
    pub samples_per_cell: usize,
    pub seed: u64,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    /// Per-row sum of squared sample weights, for standard errors.
    row_sq: Vec<f64>,
}

struct Row {
    entries: Vec<(u32, f64)>,
    sq: f64,
}

impl BounceKernel {
    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.cells()).map(|i| self.row_sum(i)).collect()
    }

    /// Standard error of a row sum.
    pub fn row_sum_std_error(&self, i: usize) -> f64 {
        let s = self.samples_per_cell as f64;
        let mean = self.row_sum(i);
        ((self.row_sq[i] / s - mean * mean).max(0.0) / (s - 1.0).max(1.0)).sqrt()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `y = K x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cells())
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.cells();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Row-stochastic version of the kernel.
    pub fn row_normalized(&self) -> Result<BounceKernel> {
        let mut k = self.clone();
        for i in 0..self.cells() {
            let s = self.row_sum(i);
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("row {i} has zero mass")));
            }
            for v in &mut k.vals[k.row_ptr[i]..k.row_ptr[i + 1]] {
                *v /= s;
            }
            k.row_sq[i] /= s * s;
        }
        Ok(k)
    }

    /// Dense little-endian `f64` dump, row-major.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.cells();
        let mut row = vec![0.0f64; n];
        for i in 0..n {
            row.iter_mut().for_each(|r| *r = 0.0);
            for (j, v) in self.row(i) {
                row[j] = v;
            }
            for v in &row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn from_rows(grid: TorusGrid, samples_per_cell: usize, seed: u64, rows: Vec<Row>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut row_sq = Vec::with_capacity(rows.len());
        row_ptr.push(0);
        for r in rows {
            for (c, v) in r.entries {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
            row_sq.push(r.sq);
        }
        BounceKernel {
            grid,
            samples_per_cell,
            seed,
            row_ptr,
            cols,
            vals,
            row_sq,
        }
    }
}

fn merge_sorted(mut hits: Vec<(u32, f64)>, scale: f64) -> Vec<(u32, f64)> {
    hits.sort_by_key(|h| h.0);
    let mut out: Vec<(u32, f64)> = Vec::new();
    for (c, w) in hits {
        match out.last_mut() {
            Some(last) if last.0 == c => last.1 += w * scale,
            _ => out.push((c, w * scale)),
        }
    }
    out
}

/// Monte-Carlo bounce kernel: emission points uniform in each cell, flux
/// Maxwellian velocities, sigma-weighted landing cells.
pub fn estimate_kernel(
    grid_n: usize,
    samples_per_cell: usize,
    field: &FieldConfig,
    theta: &TemperatureField,
    seed: u64,
) -> Result<BounceKernel> {
    if grid_n < 1 || samples_per_cell < 1 {
        return Err(Error::InvalidArgument("grid_n and samples_per_cell must be positive".into()));
    }
    let grid = TorusGrid::new(grid_n);
    let h = 1.0 / grid_n as f64;
    let rows: Vec<Result<Row>> = (0..grid.cells())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, domain::KERNEL + i as u64, 0);
            let c = grid.corner(i);
            let mut hits = Vec::with_capacity(samples_per_cell);
            let mut sq = 0.0;
            for _ in 0..samples_per_cell {
                let y = [c[0] + h * rng.random::<f64>(), c[1] + h * rng.random::<f64>()];
                let ty = theta.eval(y);
                let v = sample_emission_at(ty, &mut rng);
                let e = forward_exit(&PhaseState::on_boundary(y, v), field)?;
                let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                let w = sigma_ratio(ty, theta.eval(e.x_hit), v2);
                sq += w * w;
                hits.push((grid.cell_of(e.x_hit) as u32, w));
            }
            Ok(Row {
                entries: merge_sorted(hits, 1.0 / samples_per_cell as f64),
                sq,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(BounceKernel::from_rows(grid, samples_per_cell, seed, rows))
}

/// Boundary outgoing flux on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct FluxField {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
    /// Mass of the reconstructed stationary density.
    pub total_mass: f64,
    /// Growth factor of the fixed-point map (1 for an exact probability kernel).
    pub eigenvalue: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl FluxField {
    pub fn value_at(&self, x: [f64; 2]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sup_inf_ratio(&self) -> f64 {
        self.max() / self.min()
    }

    /// `max |J - mean| / mean`.
    pub fn relative_spread(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m).abs()).fold(0.0, f64::max) / m
    }

    /// Rescales `J` and the recorded mass together.
    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
        self.total_mass *= c;
    }

    /// Sets the mass to `target`, computing the current mass when unknown.
    pub fn normalize_mass(&mut self, field: &FieldConfig, theta: &TemperatureField, target: f64, samples: usize, seed: u64) -> Result<()> {
        let m = flux_mass(&self.grid, &self.values, field, theta, samples, seed)?.value;
        self.total_mass = m;
        self.scale(target / m);
        Ok(())
    }

    /// Area-weighted L1 distance between two fields on the same grid.
    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: &str) -> Result<()> {
        for line in header.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "x1,x2,J")?;
        for (i, v) in self.values.iter().enumerate() {
            let c = self.grid.center(i);
            writeln!(w, "{:.6},{:.6},{:.12e}", c[0], c[1], v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PowerOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting vector; all ones when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            tol: 1e-10,
            max_iter: 10_000,
            init: None,
        }
    }
}

/// Fixed point `J = K J` by normalized power iteration. The returned values
/// have mean 1; call [`FluxField::normalize_mass`] to fix the mass.
pub fn stationary_flux_power(kernel: &BounceKernel, opts: &PowerOptions) -> Result<FluxField> {
    let n = kernel.cells();
    let mut j = opts.init.clone().unwrap_or_else(|| vec![1.0; n]);
    if j.len() != n || j.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("initial flux must be positive with one value per cell".into()));
    }
    let mean = j.iter().sum::<f64>() / n as f64;
    j.iter_mut().for_each(|v| *v /= mean);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mut next = kernel.apply(&j);
        let s = next.iter().sum::<f64>() / n as f64;
        if !(s > 0.0) {
            return Err(Error::NoConvergence { iterations: it, residual });
        }
        next.iter_mut().for_each(|v| *v /= s);
        let sup = j.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        residual = j.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / sup;
        j = next;
        if residual < opts.tol {
            return Ok(FluxField {
                grid: kernel.grid,
                values: j,
                total_mass: f64::NAN,
                eigenvalue: s,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Dense oracle: null vector of `K - lambda I` for the Perron eigenvalue,
/// via LU with one equation replaced by the normalization. Sized for
/// `N <= 32`.
pub fn stationary_flux_dense(kernel: &BounceKernel) -> Result<Vec<f64>> {
    let n = kernel.cells();
    if kernel.grid.n > 32 {
        return Err(Error::InvalidArgument("dense solver is limited to grid_n <= 32".into()));
    }
    let k = kernel.to_dense();
    // Perron root: the largest real part of the spectrum
    let lambda = {
        let eig = k.clone().complex_eigenvalues();
        eig.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut a = k - nalgebra::DMatrix::identity(n, n) * lambda;
    let mut rhs = nalgebra::DVector::zeros(n);
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    rhs[n - 1] = n as f64;
    let sol = a.lu().solve(&rhs).ok_or(Error::InversionFailed { residual: f64::NAN })?;
    Ok(sol.iter().copied().collect())
}

/// `E[t_f]` for flux-Maxwellian emission at temperature `t` in the exact
/// regimes: `(2/g) sqrt(pi t / 2)`.
pub fn mean_flight_time_exact(g: f64, t: f64) -> f64 {
    2.0 / g * (0.5 * PI * t).sqrt()
}

const MASS_CHUNK: usize = 4096;

/// Mass of the stationary density generated by the flux `values`,
/// `int J(x) E_{flux, Theta(x)}[t_f] dx`.
///
/// Exact regimes use tensor Gauss quadrature of the closed-form mean flight
/// time against the interpolated flux; the perturbed regime uses Monte Carlo.
pub fn flux_mass(
    grid: &TorusGrid,
    values: &[f64],
    field: &FieldConfig,
    theta: &TemperatureField,
    samples: usize,
    seed: u64,
) -> Result<Estimate> {
    if field.is_exact() {
        let h = 1.0 / grid.n as f64;
        let rule = gauss_legendre_on(4, 0.0, h);
        let total: f64 = (0..grid.cells())
            .map(|i| {
                let c = grid.corner(i);
                let mut s = 0.0;
                for &(a, wa) in &rule {
                    for &(b, wb) in &rule {
                        let x = [c[0] + a, c[1] + b];
                        s += wa * wb * grid.interpolate(values, x) * mean_flight_time_exact(field.g, theta.eval(x));
                    }
                }
                s
            })
            .sum();
        return Ok(Estimate { value: total, std_error: 0.0 });
    }
    let chunks = samples.div_ceil(MASS_CHUNK);
    let parts: Vec<Result<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, domain::MASS + c as u64, 0);
            let mut m = Moments::default();
            for _ in 0..MASS_CHUNK.min(samples - c * MASS_CHUNK) {
                let x = [rng.random::<f64>(), rng.random::<f64>()];
                let v = sample_emission_at(theta.eval(x), &mut rng);
                let tf = forward_exit_time(&PhaseState::on_boundary(x, v), field)?;
                m.push(grid.interpolate(values, x) * tf);
            }
            Ok(m)
        })
        .collect();
    let mut m = Moments::default();
    for p in parts {
        m = m.merge(p?);
    }
    Ok(m.estimate())
}

/// `F_s(x, v) = mu_Theta(x_b, |v_b|) J(x_b)`.
pub fn reconstruct_density(
    flux: &FluxField,
    state: &PhaseState,
    field: &FieldConfig,
    theta: &TemperatureField,
) -> Result<f64> {
    let e = backward_exit(state, field)?;
    let vb = e.v_hit;
    let v2 = vb[0] * vb[0] + vb[1] * vb[1] + vb[2] * vb[2];
    Ok(maxwellian_at(theta.eval(e.x_hit), v2) * flux.value_at(e.x_hit))
}

/// Importance proposal over phase space matched to a Maxwellian at
/// temperature `b`: `x3 ~ Exp(g/b)`, `v ~ N(0, b I)`.
pub struct PhaseProposal {
    pub rate: f64,
    pub temperature: f64,
}

impl PhaseProposal {
    pub fn new(field: &FieldConfig, theta: &TemperatureField) -> Self {
        PhaseProposal {
            rate: field.min_vertical_pull() / theta.b(),
            temperature: theta.b(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (PhaseState, f64) {
        let x3 = -(1.0 - rng.random::<f64>()).ln() / self.rate;
        let x = [rng.random::<f64>(), rng.random::<f64>(), x3];
        let s = self.temperature.sqrt();
        let v: [f64; 3] = [
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
            s * rng.sample::<f64, _>(StandardNormal),
        ];
        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let density = self.rate * (-self.rate * x3).exp() * (-0.5 * v2 / self.temperature).exp()
            / (2.0 * PI * self.temperature).powf(1.5);
        (PhaseState::new(x, v), density)
    }
}

/// Phase-space Monte-Carlo mass of the reconstructed density.
pub fn reconstruct_mass(
    flux: &FluxField,
    field: &FieldConfig,
    theta: &TemperatureField,
    samples: usize,
    seed: u64,
) -> Result<Estimate> {
    let prop = PhaseProposal::new(field, theta);
    let chunks = samples.div_ceil(MASS_CHUNK);
    let parts: Vec<Result<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, domain::MASS + (1 << 40) + c as u64, 0);
            let mut m = Moments::default();
            for _ in 0..MASS_CHUNK.min(samples - c * MASS_CHUNK) {
                let (s, p) = prop.sample(&mut rng);
                m.push(reconstruct_density(flux, &s, field, theta)? / p);
            }
            Ok(m)
        })
        .collect();
    let mut m = Moments::default();
    for p in parts {
        m = m.merge(p?);
    }
    Ok(m.estimate())
}

/// Sup over sampled states of `exp((|v|^2/2 + Phi) / (2b)) F_s`.
#[derive(Debug, Clone, Serialize)]
pub struct LinfReport {
    pub samples: usize,
    pub sup_weighted: f64,
    pub argmax: PhaseState,
    /// `sup_weighted` divided by the mass of `F_s`.
    pub ratio_to_mass: f64,
}

pub fn linf_report(
    flux: &FluxField,
    field: &FieldConfig,
    theta: &TemperatureField,
    samples: usize,
    seed: u64,
) -> Result<LinfReport> {
    let prop = PhaseProposal::new(field, theta);
    let b = theta.b();
    let chunks = samples.div_ceil(MASS_CHUNK);
    let parts: Vec<Result<(f64, PhaseState)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, domain::MASS + (2 << 40) + c as u64, 0);
            let mut best = (0.0, PhaseState::new([0.0; 3], [0.0; 3]));
            for _ in 0..MASS_CHUNK.min(samples - c * MASS_CHUNK) {
                let (s, _) = prop.sample(&mut rng);
                let w = (s.energy(field) / (2.0 * b)).exp() * reconstruct_density(flux, &s, field, theta)?;
                if w > best.0 {
                    best = (w, s);
                }
            }
            Ok(best)
        })
        .collect();
    let mut best = (0.0, PhaseState::new([0.0; 3], [0.0; 3]));
    for p in parts {
        let p = p?;
        if p.0 > best.0 {
            best = p;
        }
    }
    Ok(LinfReport {
        samples,
        sup_weighted: best.0,
        argmax: best.1,
        ratio_to_mass: best.0 / flux.total_mass,
    })
}

/// Flights from every cell under the physical emission law, kept for the
/// penalized iteration: `(landing cell, flight time, mu_1 / mu_Theta)`.
#[derive(Debug, Clone)]
pub struct FlightBank {
    pub grid: TorusGrid,
    pub samples_per_cell: usize,
    flights: Vec<Vec<(u32, f64, f64)>>,
}

impl FlightBank {
    pub fn sample(
        grid_n: usize,
        samples_per_cell: usize,
        field: &FieldConfig,
        theta: &TemperatureField,
        seed: u64,
    ) -> Result<Self> {
        let grid = TorusGrid::new(grid_n);
        let h = 1.0 / grid_n as f64;
        let flights: Vec<Result<Vec<(u32, f64, f64)>>> = (0..grid.cells())
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, domain::EMISSION + i as u64, 0);
                let c = grid.corner(i);
                (0..samples_per_cell)
                    .map(|_| {
                        let y = [c[0] + h * rng.random::<f64>(), c[1] + h * rng.random::<f64>()];
                        let ty = theta.eval(y);
                        let v = sample_emission_at(ty, &mut rng);
                        let e = forward_exit(&PhaseState::on_boundary(y, v), field)?;
                        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                        Ok((grid.cell_of(e.x_hit) as u32, e.t_exit, sigma_ratio(ty, 1.0, v2)))
                    })
                    .collect()
            })
            .collect();
        Ok(FlightBank {
            grid,
            samples_per_cell,
            flights: flights.into_iter().collect::<Result<Vec<_>>>()?,
        })
    }

    /// Attenuated transfer matrices `P^eps_Theta` and `P^eps_1` in sparse
    /// row form.
    fn attenuated(&self, eps: f64) -> (Vec<Vec<(u32, f64)>>, Vec<Vec<(u32, f64)>>) {
        let s = 1.0 / self.samples_per_cell as f64;
        self.flights
            .par_iter()
            .map(|row| {
                let a: Vec<(u32, f64)> = row.iter().map(|&(j, t, _)| (j, (-eps * t).exp())).collect();
                let b: Vec<(u32, f64)> = row.iter().map(|&(j, t, r)| (j, r * (-eps * t).exp())).collect();
                (merge_sorted(a, s), merge_sorted(b, s))
            })
            .unzip()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizedResult {
    pub eps: f64,
    pub j_damping: Option<u32>,
    /// Flux of `mu + f`, i.e. `1 + J^f`.
    pub flux: Vec<f64>,
    /// Mass of `f`, which vanishes only in the limit.
    pub zero_mass_defect: f64,
    pub iterations: usize,
    /// L1 distance between successive iterates.
    pub updates: Vec<f64>,
}

fn transpose_apply(rows: &[Vec<(u32, f64)>], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            y[j as usize] += v * x[i];
        }
    }
    y
}

/// Damped, attenuated iteration on the flux of the fluctuation `f = F - mu`:
/// `J^f <- (1 - 1/j) P_Theta^T J^f + P_Theta^T 1 - P_1^T 1`, where each
/// flight carries `exp(-eps t)`. `j_damping = None` drops the damping.
pub fn penalized_on_bank(
    bank: &FlightBank,
    eps: f64,
    j_damping: Option<u32>,
    tol: f64,
    max_iter: usize,
) -> Result<PenalizedResult> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if let Some(j) = j_damping {
        if j < 2 {
            return Err(Error::InvalidArgument("j_damping must be at least 2".into()));
        }
    }
    let damp = j_damping.map_or(1.0, |j| 1.0 - 1.0 / j as f64);
    let (p_theta, p_one) = bank.attenuated(eps);
    let n = bank.grid.cells();
    let ones = vec![1.0; n];
    let a = transpose_apply(&p_theta, &ones);
    let b = transpose_apply(&p_one, &ones);
    let source: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let area = bank.grid.cell_area();
    let mut jf = vec![0.0; n];
    let mut updates = Vec::new();
    let mut iterations = 0;
    for it in 1..=max_iter {
        let pj = transpose_apply(&p_theta, &jf);
        let next: Vec<f64> = pj.iter().zip(&source).map(|(p, s)| damp * p + s).collect();
        let d = next.iter().zip(&jf).map(|(x, y)| (x - y).abs()).sum::<f64>() * area;
        let scale = next.iter().map(|x| x.abs()).sum::<f64>() * area;
        jf = next;
        updates.push(d);
        iterations = it;
        if d <= tol * scale.max(1e-300) || d == 0.0 {
            break;
        }
        if !d.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residual: d });
        }
        if it == max_iter {
            return Err(Error::NoConvergence { iterations: it, residual: d });
        }
    }
    // mass of f from its boundary values: int f v3 (1 - e^{-eps t}) / eps
    let mut defect = 0.0;
    for (i, row) in bank.flights.iter().enumerate() {
        let s = row.len() as f64;
        let mut acc = 0.0;
        for &(_, t, r) in row {
            let k = (1.0 - (-eps * t).exp()) / eps;
            acc += ((damp * jf[i] + 1.0) - r) * k;
        }
        defect += acc / s * area;
    }
    Ok(PenalizedResult {
        eps,
        j_damping,
        flux: jf.iter().map(|v| 1.0 + v).collect(),
        zero_mass_defect: defect,
        iterations,
        updates,
    })
}

/// Samples a flight bank and runs [`penalized_on_bank`].
pub fn penalized_flux_iteration(
    grid_n: usize,
    samples_per_cell: usize,
    eps: f64,
    j_damping: Option<u32>,
    field: &FieldConfig,
    theta: &TemperatureField,
    seed: u64,
) -> Result<PenalizedResult> {
    let bank = FlightBank::sample(grid_n, samples_per_cell, field, theta, seed)?;
    penalized_on_bank(&bank, eps, j_damping, 1e-12, 1_000_000)
}

/// Quadratic Richardson limit from values at `eps`, `eps/2`, `eps/4`.
pub fn richardson(at_eps: &[f64], at_half: &[f64], at_quarter: &[f64]) -> Vec<f64> {
    at_eps
        .iter()
        .zip(at_half)
        .zip(at_quarter)
        .map(|((a, b), c)| (8.0 * c - 6.0 * b + a) / 3.0)
        .collect()
}

/// Fluxes rescaled so that their stationary densities have unit mass.
pub fn unit_mass(grid: &TorusGrid, values: &[f64], field: &FieldConfig, theta: &TemperatureField, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let m = flux_mass(grid, values, field, theta, samples, seed)?.value;
    Ok(values.iter().map(|v| v / m).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityRow {
    pub grid_n: usize,
    /// Largest jump between neighbouring cells, relative to the mean.
    pub modulus: f64,
    pub modulus_times_n: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityReport {
    pub rows: Vec<ContinuityRow>,
    /// Set when `Theta` itself is discontinuous.
    pub flagged: bool,
    pub non_increasing: bool,
}

pub fn continuity_report(fluxes: &[&FluxField], theta: &TemperatureField, noise: f64) -> ContinuityReport {
    let rows: Vec<ContinuityRow> = fluxes
        .iter()
        .map(|f| {
            let n = f.grid.n;
            let m = f.mean();
            let mut jump = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let v = f.values[i * n + j];
                    let right = f.values[((i + 1) % n) * n + j];
                    let up = f.values[i * n + (j + 1) % n];
                    jump = jump.max((v - right).abs()).max((v - up).abs());
                }
            }
            ContinuityRow {
                grid_n: n,
                modulus: jump / m,
                modulus_times_n: jump / m * n as f64,
            }
        })
        .collect();
    let non_increasing = rows.windows(2).all(|w| w[1].modulus <= w[0].modulus + noise);
    ContinuityReport {
        rows,
        flagged: !theta.is_continuous(),
        non_increasing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_indexing_and_interpolation() {
        let g = TorusGrid::new(4);
        assert_eq!(g.cell_of([0.0, 0.0]), 0);
        assert_eq!(g.cell_of([0.99, 0.26]), 3 * 4 + 1);
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let c = g.center(5);
        assert!((g.interpolate(&vals, c) - 5.0).abs() < 1e-12);
        let ones = vec![2.0; 16];
        assert!((g.interpolate(&ones, [0.01, 0.99]) - 2.0).abs() < 1e-14);
        let fine: Vec<f64> = (0..64).map(|i| (i / 8) as f64).collect();
        let coarse = g.coarsen(&fine);
        assert!((coarse[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn isothermal_rows_sum_to_one_exactly() {
        let f = FieldConfig::gravity(10.0);
        let th = TemperatureField::constant(1.0).unwrap();
        let k = estimate_kernel(8, 200, &f, &th, 1).unwrap();
        for i in 0..k.cells() {
            assert!((k.row_sum(i) - 1.0).abs() < 1e-12);
            assert!(k.row_sum_std_error(i) < 1e-6);
        }
        let flux = stationary_flux_power(&k, &PowerOptions::default()).unwrap();
        assert!(flux.relative_spread() < 1e-12);
    }

    #[test]
    fn mass_of_maxwellian_flux() {
        let f = FieldConfig::gravity(10.0);
        let th = TemperatureField::constant(1.0).unwrap();
        let g = TorusGrid::new(4);
        let m = flux_mass(&g, &[1.0; 16], &f, &th, 0, 0).unwrap();
        assert!((m.value - (2.0 * PI).sqrt() / 10.0).abs() < 1e-12);
    }

    #[test]
    fn power_matches_dense_oracle() {
        let f = FieldConfig::gravity(10.0);
        let th = TemperatureField::parse("1.125 + 0.125*sin(2*pi*x1)").unwrap();
        let k = estimate_kernel(6, 400, &f, &th, 9).unwrap();
        let p = stationary_flux_power(&k, &PowerOptions::default()).unwrap();
        let d = stationary_flux_dense(&k).unwrap();
        for (a, b) in p.values.iter().zip(&d) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn richardson_removes_quadratic_terms() {
        let f = |e: f64| 2.0 + 0.3 * e - 5.0 * e * e;
        let r = richardson(&[f(0.1)], &[f(0.05)], &[f(0.025)]);
        assert!((r[0] - 2.0).abs() < 1e-13);
    }
}
