//! Relaxation of a zero-mass fluctuation of the stationary state: L1 decay,
//! window contraction and the Doeblin mass behind the rate bound.

use vlasov_mixing::dynamics::{
    evolve, fit_decay, init_fluctuation, theoretical_doeblin_mass, window_contraction, BinSpec, FluctuationKind,
    ObservableSpec,
};
use vlasov_mixing::stationary::{estimate_kernel, stationary_flux_power, PowerOptions};
use vlasov_mixing::{FieldConfig, TemperatureField};

fn main() -> vlasov_mixing::Result<()> {
    let field = FieldConfig::gravity(10.0);
    let theta = TemperatureField::parse("0.09 + 0.01*sin(2*pi*x1)")?;
    let kernel = estimate_kernel(16, 1000, &field, &theta, 11)?;
    let mut flux = stationary_flux_power(&kernel, &PowerOptions::default())?;
    flux.normalize_mass(&field, &theta, 1.0, 0, 0)?;

    let theta_prime = 0.9 / (2.0 * theta.b());
    let (t0, delta) = (2.0, 1.0);
    let (mut ens, report) = init_fluctuation(
        FluctuationKind::Modulated,
        0.5,
        &flux,
        &field,
        &theta,
        200_000,
        12,
        theta_prime,
        delta,
    )?;
    println!(
        "{} particles, total weight {:.1e}, L1 {:.4}",
        report.particles, report.total_weight, report.weighted_l1
    );

    let spec = ObservableSpec {
        bins: BinSpec::default(),
        delta,
        theta: 0.5 * theta_prime,
        t0,
    };
    let times: Vec<f64> = (0..=20).map(|i| i as f64).collect();
    let obs = evolve(&mut ens, 20.0, &field, &theta, &times, &spec)?;
    for o in obs.iter().step_by(2) {
        println!("t = {:>4.1}  L1 = {:.4e} +- {:.1e}  floor {:.1e}", o.t, o.l1, o.l1_se, o.noise_floor);
    }

    let fit = fit_decay(&obs, 2.0, 20.0)?;
    println!("rate {:.4} +- {:.4} (R^2 {:.4}, {} points)", fit.rate, fit.rate_std_error, fit.r_squared, fit.points);
    for w in window_contraction(&obs, t0) {
        println!("  window {}: ratio {:.4} +- {:.4}", w.window, w.ratio, w.ratio_se);
    }

    let m = theoretical_doeblin_mass(t0, &field, &theta, 100_000, 13)?;
    println!(
        "Doeblin mass: prefactor {:.3e}, boundary estimate {:.4} +- {:.1e}, value {:.3e}",
        m.prefactor, m.boundary.value, m.boundary.std_error, m.value.value
    );
    Ok(())
}
