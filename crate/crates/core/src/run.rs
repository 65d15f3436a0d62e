//! Experiment orchestration and file outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Experiment, RunConfig};
use crate::dynamics::{
    evolve, fit_decay, fit_decay_series, init_fluctuation, lambda_formula, theoretical_doeblin_mass, triple_norm,
    window_contraction, DecayObservables, ObservableSpec,
};
use crate::error::{Error, Result};
use crate::fields::{validate_field, FieldConfig, TemperatureField, ValidationReport};
use crate::stationary::{estimate_kernel, flux_mass, linf_report, reconstruct_mass, stationary_flux_power, FluxField, PowerOptions};
use crate::verification::run_suite;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct RunFailure {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

fn validation(error: Error) -> RunFailure {
    RunFailure {
        code: EXIT_VALIDATION,
        error,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary_line: String,
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

#[derive(Debug, Clone, Serialize)]
struct Provenance {
    config_hash: String,
    seed: u64,
    experiment: Experiment,
    version: &'static str,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    theta: TemperatureField,
    prov: Provenance,
    out: PathBuf,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn header(&self) -> String {
        format!(
            "config_hash={}\nseed={}\nexperiment={}",
            self.prov.config_hash,
            self.prov.seed,
            serde_json::to_value(self.prov.experiment).unwrap().as_str().unwrap()
        )
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.out.join(name);
        self.files.push(p.clone());
        Ok(BufWriter::new(File::create(p)?))
    }

    fn write_json(&mut self, name: &str, body: Value) -> Result<()> {
        let mut v = json!({ "provenance": self.prov });
        if let (Value::Object(a), Value::Object(b)) = (&mut v, body) {
            a.extend(b);
        }
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &v)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn csv(&mut self, name: &str, columns: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
        let header = self.header();
        let mut w = self.create(name)?;
        for line in header.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "{columns}")?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Validates the configuration, runs the selected experiment and writes its
/// artifacts. Numerical failures also leave an `error.json` behind.
pub fn run(cfg: &RunConfig) -> std::result::Result<RunOutcome, RunFailure> {
    let theta = cfg.temperature.build().map_err(validation)?;
    let report = validate_field(&cfg.field).map_err(validation)?;
    if !report.passed() {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} (observed {:e}, bound {:e})", c.name, c.observed, c.bound))
            .collect();
        return Err(validation(Error::Field(format!("hypotheses fail: {}", failed.join("; ")))));
    }
    cfg.validate(&theta).map_err(validation)?;
    let prov = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        experiment: cfg.experiment,
        version: env!("CARGO_PKG_VERSION"),
    };
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| RunFailure {
        code: EXIT_NUMERICAL,
        error: e.into(),
    })?;
    let mut ctx = Ctx {
        cfg,
        theta,
        prov,
        out,
        files: Vec::new(),
    };
    let result = match cfg.experiment {
        Experiment::Stationary => stationary(&mut ctx, &report),
        Experiment::Kernel => kernel(&mut ctx),
        Experiment::Simulate | Experiment::Decay => dynamics(&mut ctx),
        Experiment::Verify => verify(&mut ctx),
    };
    match result {
        Ok((line, summary)) => {
            let body = json!({ "summary": line, "results": summary });
            if let Err(e) = ctx.write_json("summary.json", body) {
                return Err(numerical(&ctx, e));
            }
            Ok(RunOutcome {
                summary_line: line,
                files: ctx.files,
                summary,
            })
        }
        Err(e) => Err(numerical(&ctx, e)),
    }
}

fn numerical(ctx: &Ctx<'_>, error: Error) -> RunFailure {
    let body = json!({
        "provenance": ctx.prov,
        "error": error.to_string(),
        "kind": format!("{error:?}").split(['(', ' ', '{']).next().unwrap_or_default(),
    });
    if let Ok(s) = serde_json::to_string_pretty(&body) {
        let _ = fs::write(ctx.out.join("error.json"), s + "\n");
    }
    RunFailure {
        code: EXIT_NUMERICAL,
        error,
    }
}

fn solve_flux(cfg: &RunConfig, field: &FieldConfig, theta: &TemperatureField) -> Result<FluxField> {
    let s = &cfg.stationary;
    let kernel = estimate_kernel(s.grid_n, s.samples_per_cell, field, theta, cfg.seed)?;
    let mut flux = stationary_flux_power(
        &kernel,
        &PowerOptions {
            tol: s.tol,
            max_iter: s.max_iter,
            init: None,
        },
    )?;
    flux.total_mass = flux_mass(&flux.grid, &flux.values, field, theta, s.mass_samples, cfg.seed)?.value;
    Ok(flux)
}

fn stationary(ctx: &mut Ctx<'_>, report: &ValidationReport) -> Result<(String, Value)> {
    let cfg = ctx.cfg;
    let field = &cfg.field;
    let flux = solve_flux(cfg, field, &ctx.theta)?;
    let header = ctx.header();
    let w = ctx.create("flux.csv")?;
    flux.write_csv(w, &header)?;
    let recon = reconstruct_mass(&flux, field, &ctx.theta, cfg.stationary.mass_samples, cfg.seed)?;
    let linf = linf_report(&flux, field, &ctx.theta, cfg.stationary.mass_samples, cfg.seed)?;
    let spread = flux.relative_spread();
    let tol = cfg.stationary.uniform_tol;
    let line = if ctx.theta.is_isothermal() {
        if spread <= tol {
            format!("J uniform within tol (spread {spread:.3e} <= {tol:e}); mass {:.6}", flux.total_mass)
        } else {
            format!("J not uniform within tol (spread {spread:.3e} > {tol:e}); mass {:.6}", flux.total_mass)
        }
    } else {
        format!(
            "stationary flux on {0}x{0}: sup/inf {1:.4}, mass {2:.6}",
            flux.grid.n,
            flux.sup_inf_ratio(),
            flux.total_mass
        )
    };
    let summary = json!({
        "grid_n": flux.grid.n,
        "eigenvalue": flux.eigenvalue,
        "iterations": flux.iterations,
        "residual": flux.residual,
        "flux_min": flux.min(),
        "flux_max": flux.max(),
        "relative_spread": spread,
        "isothermal": ctx.theta.is_isothermal(),
        "uniform": ctx.theta.is_isothermal() && spread <= tol,
        "mass": flux.total_mass,
        "reconstructed_mass": recon,
        "linf": linf,
        "temperature_bounds": [ctx.theta.a(), ctx.theta.b()],
        "validation": report,
    });
    Ok((line, summary))
}

fn kernel(ctx: &mut Ctx<'_>) -> Result<(String, Value)> {
    let cfg = ctx.cfg;
    let s = &cfg.stationary;
    let k = estimate_kernel(s.grid_n, s.samples_per_cell, &cfg.field, &ctx.theta, cfg.seed)?;
    let mut bytes = Vec::with_capacity(8 * k.cells() * k.cells());
    k.write_binary(&mut bytes)?;
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let mut w = ctx.create("kernel.bin")?;
    w.write_all(&bytes)?;
    w.flush()?;
    let sums = k.row_sums();
    let n = sums.len() as f64;
    let meta = json!({
        "grid_n": k.grid.n,
        "cells": k.cells(),
        "samples_per_cell": k.samples_per_cell,
        "nnz": k.nnz(),
        "layout": "dense row-major little-endian f64, entry (i, j) at offset 8 * (i * cells + j); cell i = ix * grid_n + iy",
        "sha256": digest,
        "row_sum_min": sums.iter().cloned().fold(f64::INFINITY, f64::min),
        "row_sum_max": sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "row_sum_mean": sums.iter().sum::<f64>() / n,
    });
    ctx.write_json("kernel.json", meta.clone())?;
    let line = format!("kernel {0}x{0} cells with {1} nonzeros", k.grid.n, k.nnz());
    Ok((line, meta))
}

fn observable_row(o: &DecayObservables, tn: f64) -> String {
    format!(
        "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
        o.t,
        o.l1,
        o.weighted_l1,
        o.max_cell_exp_moment,
        o.l1_se,
        o.noise_floor,
        o.tail_l1,
        tn,
        o.window_index,
        o.total_weight
    )
}

fn dynamics(ctx: &mut Ctx<'_>) -> Result<(String, Value)> {
    let cfg = ctx.cfg;
    let d = &cfg.dynamics;
    let field = &cfg.field;
    let theta = ctx.theta.clone();
    let mut flux = solve_flux(cfg, field, &theta)?;
    flux.scale(1.0 / flux.total_mass);
    let (th, tp) = d.exponents(theta.b());
    let (mut ens, init) =
        init_fluctuation(d.initial, d.amplitude, &flux, field, &theta, d.particles, cfg.seed, tp, d.delta)?;
    info!("initial data: {} particles, total weight {:e}", init.particles, init.total_weight);
    let spec = ObservableSpec {
        bins: d.bins,
        delta: d.delta,
        theta: th,
        t0: d.t0,
    };
    let times = d.times();
    let series = evolve(&mut ens, d.horizon, field, &theta, &times, &spec)?;
    let doeblin = theoretical_doeblin_mass(d.t0, field, &theta, d.doeblin_samples, cfg.seed)?;
    let m = doeblin.value.value;
    let rows: Vec<String> = series
        .iter()
        .map(|o| observable_row(o, triple_norm(o, d.t0, d.delta, m)))
        .collect();
    ctx.csv(
        "decay.csv",
        "t,L1,weighted_L1,max_cell_exp_moment,L1_se,noise_floor,tail_L1,triple_norm,window_index,total_weight",
        rows,
    )?;
    let mut summary = json!({
        "particles": init.particles,
        "initial": init,
        "theta": th,
        "theta_prime": tp,
        "delta": d.delta,
        "t0": d.t0,
        "window_condition": d.delta * d.t0 > 1.0,
        "doeblin_mass": doeblin,
        "final_total_weight": ens.total_weight(),
    });
    if cfg.experiment == Experiment::Simulate {
        let last = series.last().map_or(0.0, |o| o.l1);
        let line = format!("simulated {} particles to t = {}; final L1 {last:.4e}", ens.len(), d.horizon);
        return Ok((line, summary));
    }
    let fit = fit_decay(&series, d.fit_range[0], d.fit_range[1])?;
    let tt: Vec<f64> = series.iter().map(|o| o.t).collect();
    let mom: Vec<f64> = series.iter().map(|o| o.max_cell_exp_moment).collect();
    let mom_fit = fit_decay_series(&tt, &mom, None, d.fit_range[0], d.fit_range[1]).ok();
    let windows = window_contraction(&series, d.t0);
    let formula = d
        .lambda_constant
        .map(|c| lambda_formula(d.t0, d.delta, m, c))
        .transpose()?;
    let o = summary.as_object_mut().unwrap();
    o.insert("fit".into(), json!(fit));
    o.insert("moment_fit".into(), json!(mom_fit));
    o.insert("windows".into(), json!(windows));
    o.insert("lambda_formula".into(), json!(formula));
    let line = format!(
        "decay rate {:.4} (R^2 {:.4}) over [{}, {}]; {} windows, max ratio {:.4}",
        fit.rate,
        fit.r_squared,
        d.fit_range[0],
        fit.t_end,
        windows.len(),
        windows.iter().map(|w| w.ratio).fold(0.0, f64::max)
    );
    Ok((line, summary))
}

fn verify(ctx: &mut Ctx<'_>) -> Result<(String, Value)> {
    let cfg = ctx.cfg;
    let mut vc = cfg.verify.clone();
    vc.seed = cfg.seed;
    let suite = run_suite(&cfg.field, &ctx.theta, &vc)?;
    ctx.csv(
        "jacobian.csv",
        "t_lo,t_hi,hits,predicted,rel_err",
        suite
            .jacobian
            .bins
            .iter()
            .map(|b| format!("{},{},{},{:e},{:e}", b.lo, b.hi, b.hits, b.predicted, b.rel_err)),
    )?;
    ctx.csv(
        "exit_time.csv",
        "delta,probability,std_error",
        suite
            .exit_time
            .points
            .iter()
            .map(|p| format!("{},{:e},{:e}", p.x, p.probability, p.std_error)),
    )?;
    if let Some(b) = &suite.bad_set {
        ctx.csv(
            "bad_set.csv",
            "eps,probability,std_error",
            b.points.iter().map(|p| format!("{},{:e},{:e}", p.x, p.probability, p.std_error)),
        )?;
    }
    let mut rows = Vec::new();
    for r in &suite.residual {
        for (i, (e, nb)) in r.values.iter().zip(&r.naive_bound).enumerate() {
            rows.push(format!("{},{},{:e},{:e},{:e}", r.horizon, i + 1, e.value, e.std_error, nb));
        }
    }
    ctx.csv("residual.csv", "horizon,i,R,std_error,naive_bound", rows)?;
    ctx.csv(
        "doeblin.csv",
        "steps,overlap",
        suite.doeblin.iter().map(|r| format!("{},{:e}", r.steps, r.overlap)),
    )?;
    ctx.write_json("verify.json", json!({ "verdicts": suite.verdicts, "passed": suite.passed() }))?;
    let failed: Vec<&str> = suite.verdicts.iter().filter(|v| !v.pass).map(|v| v.test.as_str()).collect();
    let line = if failed.is_empty() {
        format!("verification: all {} checks pass", suite.verdicts.len())
    } else {
        format!("verification: {} of {} checks fail ({})", failed.len(), suite.verdicts.len(), failed.join(", "))
    };
    Ok((line, json!(suite)))
}

/// Loads a config file and runs it; convenience for examples and tests.
pub fn run_file(path: &Path) -> std::result::Result<RunOutcome, RunFailure> {
    let cfg = RunConfig::load(path).map_err(validation)?;
    run(&cfg)
}
