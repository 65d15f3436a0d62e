//! Acceptance gate: one PASS/FAIL line per criterion.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use vlasov_mixing::boundary::{bounce, generate_cycle, isometry_defect, sample_emission, wall_maxwellian};
use vlasov_mixing::characteristics::{
    advance, backward_exit_time, cov_identity_check, forward_exit, PhaseState, TestFunction,
};
use vlasov_mixing::config::RunConfig;
use vlasov_mixing::dynamics::{
    evolve, fit_decay, fit_decay_series, init_fluctuation, window_contraction, BinSpec, FluctuationKind,
    ObservableSpec,
};
use vlasov_mixing::quadrature::composite;
use vlasov_mixing::rng::stream_rng;
use vlasov_mixing::run::run;
use vlasov_mixing::stationary::{
    estimate_kernel, flux_mass, penalized_on_bank, reconstruct_mass, richardson, stationary_flux_power, unit_mass,
    FlightBank, FluxField, PowerOptions, TorusGrid,
};
use vlasov_mixing::verification::{
    bad_set_scaling, doeblin_curve, exit_time_scaling, log_grid, residual_measure_curve, verify_jacobian,
};
use vlasov_mixing::{Expr, FieldConfig, Result, TemperatureField};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn iso() -> TemperatureField {
    TemperatureField::constant(1.0).unwrap()
}

/// `b/a = 1.25`.
fn stripe() -> TemperatureField {
    TemperatureField::parse("1.125 + 0.125*sin(2*pi*x1)").unwrap()
}

fn perturbed() -> FieldConfig {
    FieldConfig::perturbed(
        10.0,
        Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)").unwrap(),
        1.5,
        0.5,
        0.5,
    )
}

fn energy_invariant() -> Result<Outcome> {
    let th = stripe();
    let mut worst_exact = 0.0f64;
    for (k, field) in [FieldConfig::gravity(10.0), FieldConfig::magnetic(3.0)].iter().enumerate() {
        let mut rng = stream_rng(101, k as u64, 0);
        let trace = generate_cycle([0.3, 0.6], 1000, f64::INFINITY, field, &th, &mut rng)?;
        for b in &trace.bounces {
            let start = PhaseState::on_boundary(b.emit_point, b.emit_velocity);
            let e0 = start.energy(field);
            let mid = advance(&start, 0.5 * b.flight_time, field)?;
            let end = PhaseState::on_boundary(b.land_point, b.land_velocity);
            let d = (mid.energy(field) - e0).abs().max((end.energy(field) - e0).abs());
            worst_exact = worst_exact.max(d);
        }
    }
    let field = perturbed();
    let mut worst_rate = 0.0f64;
    let mut rng = stream_rng(102, 0, 0);
    for _ in 0..200 {
        let y = [rng.random(), rng.random()];
        let v = sample_emission(y, &th, &mut rng);
        let start = PhaseState::on_boundary(y, v);
        let e = forward_exit(&start, &field)?;
        let end = e.hit_state();
        worst_rate = worst_rate.max((end.energy(&field) - start.energy(&field)).abs() / e.t_exit);
    }
    // one long unit-time flight
    let high = PhaseState::new([0.1, 0.2, 8.0], [0.3, -0.2, 1.0]);
    let later = advance(&high, 1.0, &field)?;
    worst_rate = worst_rate.max((later.energy(&field) - high.energy(&field)).abs());
    outcome(
        worst_exact < 1e-12 && worst_rate < 1e-8,
        format!("exact regimes max drift {worst_exact:.2e} over 1000 bounces; perturbed {worst_rate:.2e} per unit time"),
    )
}

fn bounce_isometry() -> Result<Outcome> {
    let th = stripe();
    let mut details = Vec::new();
    let mut pass = true;
    for (k, (name, field, n)) in [
        ("gravity", FieldConfig::gravity(10.0), 100_000),
        ("magnetic", FieldConfig::magnetic(2.0), 100_000),
        ("perturbed", perturbed(), 100_000),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = stream_rng(103, k as u64, 0);
        let mut worst = 0.0f64;
        for _ in 0..n {
            let y = [rng.random(), rng.random()];
            let v = sample_emission(y, &th, &mut rng);
            worst = worst.max(isometry_defect(&bounce(y, v, &field, &th)?));
        }
        pass &= worst < 1e-10;
        details.push(format!("{name} {worst:.2e}"));
    }
    outcome(pass, format!("max ||v_b| - |v|| over 1e5 bounces: {}", details.join(", ")))
}

fn magnetic_exit_law() -> Result<Outcome> {
    let field = FieldConfig::magnetic(1.0);
    let mut rng = stream_rng(104, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let v = [
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            -rng.random_range(1e-3..4.0),
        ];
        let s = PhaseState::on_boundary([rng.random(), rng.random()], v);
        let tb = backward_exit_time(&s, &field)?;
        let exact = v[2].abs() / 5.0;
        worst = worst.max((tb - exact).abs() / exact);
    }
    outcome(worst < 1e-12, format!("max relative deviation from |v3|/5: {worst:.2e}"))
}

fn flux_normalization() -> Result<Outcome> {
    let fields = [
        iso(),
        stripe(),
        TemperatureField::parse("0.5 + 0.2*cos(2*pi*x1)*sin(2*pi*x2)").unwrap(),
    ];
    let mut rng = stream_rng(105, 0, 0);
    let mut worst = 0.0f64;
    for th in &fields {
        for _ in 0..10 {
            let x = [rng.random(), rng.random()];
            let s = 12.0 * th.eval(x).sqrt();
            let par = composite(16, 12, -s, s);
            let up = composite(16, 6, 0.0, s);
            let mut total = 0.0;
            for &(a, wa) in &par {
                for &(b, wb) in &par {
                    for &(c, wc) in &up {
                        total += wa * wb * wc * c * wall_maxwellian(x, &[a, b, c], th);
                    }
                }
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    outcome(worst < 1e-8, format!("max |int mu v3 dv - 1| over 30 points: {worst:.2e}"))
}

fn jacobian_law() -> Result<Outcome> {
    let mut pass = true;
    let mut details = Vec::new();
    for (name, field) in [("magnetic", FieldConfig::magnetic(1.0)), ("gravity", FieldConfig::gravity(10.0))] {
        let r = verify_jacobian(&field, &iso(), 1_000_000, 20, 106)?;
        let e = r.max_rel_err.unwrap_or(f64::INFINITY);
        let z = (r.volume.value - r.volume_exact) / r.volume.std_error;
        pass &= e <= 0.03 && z.abs() <= 3.0;
        details.push(format!("{name} max bin error {:.2}% (volume z {z:+.2})", 100.0 * e));
    }
    outcome(pass, details.join("; "))
}

fn isothermal_stationarity() -> Result<Outcome> {
    let field = FieldConfig::gravity(10.0);
    let th = iso();
    let kernel = estimate_kernel(32, 2000, &field, &th, 107)?;
    let mut flux = stationary_flux_power(&kernel, &PowerOptions::default())?;
    let spread = flux.relative_spread();
    let mass = flux_mass(&flux.grid, &flux.values, &field, &th, 0, 0)?.value;
    flux.total_mass = mass;
    let recon = reconstruct_mass(&flux, &field, &th, 400_000, 107)?;
    let exact = (2.0 * PI).sqrt() / 10.0;
    let mass_ok = (mass - exact).abs() <= 0.01 * exact && (recon.value - exact).abs() <= 0.01 * exact;

    // ensemble started from the stationary state
    flux.scale(1.0 / mass);
    let (mut ens, _) = init_fluctuation(FluctuationKind::Stationary, 1.0, &flux, &field, &th, 100_000, 107, 0.45, 1.0)?;
    let spec = ObservableSpec {
        bins: BinSpec::default(),
        delta: 1.0,
        theta: 0.225,
        t0: 2.0,
    };
    let times: Vec<f64> = (0..=20).map(|i| 0.5 * i as f64).collect();
    let obs = evolve(&mut ens, 10.0, &field, &th, &times, &spec)?;
    let o0 = obs[0];
    let mut worst_z = 0.0f64;
    for o in &obs {
        for (a, b, sa, sb) in [
            (o.weighted_l1, o0.weighted_l1, o.weighted_l1_se, o0.weighted_l1_se),
            (o.max_cell_exp_moment, o0.max_cell_exp_moment, o.max_cell_exp_moment_se, o0.max_cell_exp_moment_se),
            (o.tail_l1, o0.tail_l1, o.l1_se, o0.l1_se),
            (o.l1, o0.l1, o.l1_se, o0.l1_se),
        ] {
            let se = (sa * sa + sb * sb).sqrt();
            if se > 0.0 {
                worst_z = worst_z.max((a - b).abs() / se);
            }
        }
    }
    outcome(
        spread <= 1e-3 && mass_ok && worst_z <= 3.0,
        format!(
            "J spread {spread:.2e} on 32x32; mass {mass:.6} (quadrature), {:.6} +- {:.1e} (reconstructed) vs {exact:.6}; max observable drift {worst_z:.2} sigma",
            recon.value, recon.std_error
        ),
    )
}

fn cross_method_agreement() -> Result<Outcome> {
    let field = FieldConfig::gravity(10.0);
    let th = stripe();
    let (n, s) = (8, 64_000);
    let coarse = stationary_flux_power(&estimate_kernel(n, s, &field, &th, 108)?, &PowerOptions::default())?;
    let fine = stationary_flux_power(&estimate_kernel(2 * n, s, &field, &th, 109)?, &PowerOptions::default())?;
    let g = TorusGrid::new(n);
    let power = unit_mass(&g, &coarse.values, &field, &th, 0, 0)?;
    let fine_unit = unit_mass(&fine.grid, &fine.values, &field, &th, 0, 0)?;
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * g.cell_area();
    let grid_error = l1(&power, &g.coarsen(&fine_unit));
    let bank = FlightBank::sample(n, s, &field, &th, 110)?;
    let mut at = Vec::new();
    for eps in [0.1, 0.05, 0.025] {
        let r = penalized_on_bank(&bank, eps, None, 1e-12, 1_000_000)?;
        at.push(unit_mass(&g, &r.flux, &field, &th, 0, 0)?);
    }
    let extrapolated = richardson(&at[0], &at[1], &at[2]);
    let d = l1(&extrapolated, &power);
    outcome(
        d <= 2.0 * grid_error,
        format!("penalized (eps -> 0) vs power L1 {d:.3e}; grid error {grid_error:.3e}; ratio {:.2}", d / grid_error),
    )
}

fn small_exit_scaling() -> Result<Outcome> {
    let grid = log_grid(1e-3, 1e-1, 9);
    let g = exit_time_scaling(&FieldConfig::gravity(10.0), &iso(), &grid, 1_000_000, 111)?;
    let m = exit_time_scaling(&FieldConfig::magnetic(1.0), &iso(), &grid, 1_000_000, 112)?;
    let inside = |s: f64| (1.8..=2.2).contains(&s);
    outcome(
        inside(g.slope) && inside(m.slope),
        format!("log-log slopes: gravity {:.3}, magnetic {:.3}", g.slope, m.slope),
    )
}

fn bad_set() -> Result<Outcome> {
    let field = FieldConfig::magnetic(20.0);
    let r = bad_set_scaling(&field, &iso(), &log_grid(0.02, 0.32, 5), false, 1_000_000, 113)?;
    outcome(
        (0.8..=1.2).contains(&r.slope),
        format!("slope {:.3} +- {:.3} at B3 = 20", r.slope, r.slope_std_error),
    )
}

fn residual_bound() -> Result<Outcome> {
    let field = FieldConfig::gravity(10.0);
    let th = stripe();
    let t0 = 2.0;
    let mut pass = true;
    let mut details = Vec::new();
    for h in [5.0, 20.0] {
        let c = residual_measure_curve(&th, &field, 50, h * t0, 50_000, 114)?;
        pass &= c.plateau_ratio <= 2.0;
        details.push(format!(
            "t = {}T0: max(R + 3se)/max R(1..10) = {:.3}, R(50) = {:.3}",
            h,
            c.plateau_ratio,
            c.values[49].value
        ));
    }
    let naive = 1.5625f64.powi(50);
    outcome(pass, format!("{}; naive bound at i = 50 would be {naive:.2e}", details.join("; ")))
}

fn doeblin() -> Result<Outcome> {
    let th = stripe();
    let mut pass = true;
    let mut details = Vec::new();
    for (name, field) in [("gravity", FieldConfig::gravity(10.0)), ("magnetic", FieldConfig::magnetic(1.0))] {
        let k = estimate_kernel(16, 2000, &field, &th, 115)?;
        let c: Vec<f64> = doeblin_curve(&k, 3)?.iter().map(|r| r.overlap).collect();
        pass &= c[2] > 0.0 && c.windows(2).all(|w| w[1] >= w[0]);
        details.push(format!("{name} c(1..3) = {:.4}, {:.4}, {:.4}", c[0], c[1], c[2]));
    }
    outcome(pass, details.join("; "))
}

fn exponential_mixing() -> Result<Outcome> {
    let field = FieldConfig::gravity(10.0);
    let th = TemperatureField::parse("0.09 + 0.01*sin(2*pi*x1)").unwrap();
    let kernel = estimate_kernel(16, 2000, &field, &th, 116)?;
    let mut flux: FluxField = stationary_flux_power(&kernel, &PowerOptions::default())?;
    flux.normalize_mass(&field, &th, 1.0, 0, 0)?;
    let tp = 0.9 / (2.0 * th.b());
    let (mut ens, _) = init_fluctuation(FluctuationKind::Modulated, 0.5, &flux, &field, &th, 1_000_000, 116, tp, 1.0)?;
    let t0 = 2.0;
    let spec = ObservableSpec {
        bins: BinSpec::default(),
        delta: 1.0,
        theta: 0.5 * tp,
        t0,
    };
    let times: Vec<f64> = (0..=40).map(|i| 0.5 * i as f64).collect();
    let obs = evolve(&mut ens, 20.0, &field, &th, &times, &spec)?;
    let fit = fit_decay(&obs, 2.0, 20.0)?;
    let windows = window_contraction(&obs, t0);
    let windows_ok = windows.len() == 10 && windows.iter().all(|w| w.ratio <= 1.0 + 2.0 * w.ratio_se);
    let t: Vec<f64> = obs.iter().map(|o| o.t).collect();
    let m: Vec<f64> = obs.iter().map(|o| o.max_cell_exp_moment).collect();
    let mom = fit_decay_series(&t, &m, None, 2.0, 20.0)?;
    let ratio = mom.rate / fit.rate;
    outcome(
        fit.rate > 0.0 && fit.r_squared >= 0.98 && windows_ok && (0.5..=2.0).contains(&ratio),
        format!(
            "L1 rate {:.4} (R^2 {:.4}); max window ratio {:.4}; moment rate {:.4} ({:.2}x)",
            fit.rate,
            fit.r_squared,
            windows.iter().map(|w| w.ratio).fold(0.0, f64::max),
            mom.rate,
            ratio
        ),
    )
}

fn cov_identity() -> Result<Outcome> {
    let th = stripe();
    let mut pass = true;
    let mut details = Vec::new();
    for (name, field, n) in [
        ("gravity", FieldConfig::gravity(10.0), 2_000_000),
        ("magnetic", FieldConfig::magnetic(2.0), 2_000_000),
        ("perturbed", perturbed(), 300_000),
    ] {
        for test in [TestFunction::GaussianExp, TestFunction::Anisotropic] {
            let c = cov_identity_check(&field, &th, test, n, 117)?;
            let ok = c.rel_err <= 0.01 && c.z <= 3.0;
            pass &= ok;
            details.push(format!("{name}/{test:?} {:.2}% ({:.1} sigma)", 100.0 * c.rel_err, c.z));
        }
    }
    outcome(pass, details.join(", "))
}

const DETERMINISM_CONFIG: &str = r#"
experiment = "stationary"
seed = 118

[field]
regime = "gravity_only"
g = 10.0

[temperature]
expr = "1.125 + 0.125*sin(2*pi*x1)"

[stationary]
grid_n = 8
samples_per_cell = 2000

[dynamics]
particles = 20000
horizon = 2.0
output_dt = 0.25
doeblin_samples = 10000
"#;

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let base = RunConfig::from_toml(DETERMINISM_CONFIG)?;
    let mut identical = true;
    let mut across_workers = true;
    for (exp, file) in [("stationary", "flux.csv"), ("simulate", "decay.csv")] {
        let mut read = Vec::new();
        for (k, workers) in [1usize, 1, 2].iter().enumerate() {
            let mut cfg = base.clone();
            cfg.experiment = exp.parse()?;
            cfg.output_dir = dir.path().join(format!("{exp}{k}"));
            let pool = rayon::ThreadPoolBuilder::new().num_threads(*workers).build().unwrap();
            pool.install(|| run(&cfg)).map_err(|f| f.error)?;
            read.push(std::fs::read(cfg.output_dir.join(file))?);
        }
        identical &= read[0] == read[1];
        across_workers &= read[0] == read[2];
    }
    outcome(
        identical,
        format!("repeated runs byte-identical: {identical}; also identical across worker counts: {across_workers}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 14] = [
        ("energy invariant", energy_invariant),
        ("bounce isometry", bounce_isometry),
        ("magnetic exit law", magnetic_exit_law),
        ("flux normalization", flux_normalization),
        ("bounce Jacobian law", jacobian_law),
        ("isothermal stationarity", isothermal_stationarity),
        ("cross-method stationary agreement", cross_method_agreement),
        ("small exit-time scaling", small_exit_scaling),
        ("magnetic bad-set scaling", bad_set),
        ("residual measure uniform bound", residual_bound),
        ("Doeblin minorization", doeblin),
        ("exponential mixing", exponential_mixing),
        ("change-of-variables identity", cov_identity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
