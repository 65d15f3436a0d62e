//! Monte-Carlo estimators against independent deterministic oracles.

use rand::Rng;
use rand_distr::StandardNormal;
use vlasov_mixing::boundary::{generate_cycle, maxwellian_at, sample_emission};
use vlasov_mixing::characteristics::{forward_exit, PhaseState};
use vlasov_mixing::dynamics::fit_decay_series;
use vlasov_mixing::quadrature::composite;
use vlasov_mixing::rng::stream_rng;
use vlasov_mixing::stationary::{estimate_kernel, flux_mass, TorusGrid};
use vlasov_mixing::stats::Moments;
use vlasov_mixing::{FieldConfig, TemperatureField};

const G: f64 = 10.0;

fn temp(x1: f64) -> f64 {
    1.125 + 0.125 * (2.0 * std::f64::consts::PI * x1).sin()
}

/// `int mu_{Theta(y + v_par 2 v3 / g)}(v) v3 dv`, the expected sigma weight of
/// one free-fall bounce from `y`; Theta depends on `x1` only.
fn one_step_mean(y1: f64, nodes: &[(f64, f64)], up: &[(f64, f64)]) -> f64 {
    let mut s = 0.0;
    for &(a, wa) in nodes {
        for &(c, wc) in up {
            let land = y1 + a * 2.0 * c / G;
            // v2 integrates out against the Gaussian factor in closed form
            let t = temp(land);
            let v2_part = (2.0 * std::f64::consts::PI * t).sqrt();
            s += wa * wc * c * maxwellian_at(t, a * a + c * c) * v2_part;
        }
    }
    s
}

#[test]
fn two_bounce_cycle_weight_matches_quadrature() {
    // E[sigma1 sigma2] = int dv0 mu_{Theta(x1)}(v0) v0_3 E1(x1), with E1 the
    // one-step mean from the first landing point
    let th = TemperatureField::parse("1.125 + 0.125*sin(2*pi*x1)").unwrap();
    let field = FieldConfig::gravity(G);
    let y1 = 0.2;
    let outer = composite(12, 8, -7.0, 7.0);
    let outer_up = composite(12, 6, 0.0, 7.0);
    let inner = composite(12, 6, -7.0, 7.0);
    let inner_up = composite(12, 4, 0.0, 7.0);
    let mut oracle = 0.0;
    for &(a, wa) in &outer {
        for &(c, wc) in &outer_up {
            let x1 = y1 + a * 2.0 * c / G;
            let t = temp(x1);
            let v2_part = (2.0 * std::f64::consts::PI * t).sqrt();
            oracle += wa * wc * c * maxwellian_at(t, a * a + c * c) * v2_part * one_step_mean(x1, &inner, &inner_up);
        }
    }

    let mut m = Moments::default();
    let mut rng = stream_rng(31, 0, 0);
    for _ in 0..200_000 {
        let trace = generate_cycle([y1, 0.7], 2, f64::INFINITY, &field, &th, &mut rng).unwrap();
        m.push(trace.cumulative_weight);
    }
    let z = (m.mean() - oracle) / m.std_error();
    assert!(z.abs() < 4.0, "MC {} +- {} vs quadrature {oracle}", m.mean(), m.std_error());
    // the mean is not one: sigma measures are not probabilities here
    assert!((oracle - 1.0).abs() > 1e-3);
}

/// Wilson-Hilferty upper quantile of chi-square with `k` degrees of freedom.
fn chi2_upper(k: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn isothermal_landing_is_uniform() {
    let th = TemperatureField::constant(1.0).unwrap();
    for field in [FieldConfig::gravity(G), FieldConfig::magnetic(2.0)] {
        let grid = TorusGrid::new(8);
        let n = 64_000;
        let mut counts = vec![0u64; grid.cells()];
        let mut rng = stream_rng(32, 0, 0);
        for _ in 0..n {
            let y = [rng.random(), rng.random()];
            let v = sample_emission(y, &th, &mut rng);
            let e = forward_exit(&PhaseState::on_boundary(y, v), &field).unwrap();
            counts[grid.cell_of(e.x_hit)] += 1;
        }
        let expected = n as f64 / grid.cells() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let k = (grid.cells() - 1) as f64;
        assert!(chi2 < chi2_upper(k, 3.09), "{:?}: chi2 = {chi2}", field.regime);
    }
}

#[test]
fn isothermal_kernel_rows_are_stochastic() {
    let th = TemperatureField::constant(0.7).unwrap();
    let k = estimate_kernel(6, 300, &FieldConfig::magnetic(1.5), &th, 33).unwrap();
    for s in k.row_sums() {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn flux_mass_quadrature_matches_closed_form_for_stripe() {
    // J = 1: mass = int (2/g) sqrt(pi Theta(x1) / 2) dx1
    let th = TemperatureField::parse("1.125 + 0.125*sin(2*pi*x1)").unwrap();
    let grid = TorusGrid::new(16);
    let m = flux_mass(&grid, &vec![1.0; grid.cells()], &FieldConfig::gravity(G), &th, 0, 0).unwrap();
    let oracle: f64 = composite(16, 16, 0.0, 1.0)
        .iter()
        .map(|&(x, w)| w * 2.0 / G * (0.5 * std::f64::consts::PI * temp(x)).sqrt())
        .sum();
    assert!((m.value - oracle).abs() < 1e-12 * oracle);
}

#[test]
fn noisy_exponential_regression() {
    let mut rng = stream_rng(34, 0, 0);
    let t: Vec<f64> = (0..41).map(|i| 0.5 * i as f64).collect();
    let y: Vec<f64> = t
        .iter()
        .map(|s| (-0.5 * s).exp() * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let f = fit_decay_series(&t, &y, None, 0.0, 20.0).unwrap();
    assert!((f.rate - 0.5).abs() < 0.01, "{f:?}");
    assert!(f.r_squared > 0.999);
}
