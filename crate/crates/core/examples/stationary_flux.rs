//! Stationary boundary flux for a warm stripe on the wall, and the interior
//! density it reconstructs.

use vlasov_mixing::characteristics::PhaseState;
use vlasov_mixing::stationary::{
    estimate_kernel, linf_report, reconstruct_density, reconstruct_mass, stationary_flux_power, PowerOptions,
};
use vlasov_mixing::{FieldConfig, TemperatureField};

fn main() -> vlasov_mixing::Result<()> {
    let field = FieldConfig::gravity(10.0);
    let theta = TemperatureField::parse("1 + 0.2*sin(2*pi*x1)")?;

    let kernel = estimate_kernel(16, 2000, &field, &theta, 1)?;
    println!("kernel: {} cells, {} nonzeros", kernel.cells(), kernel.nnz());

    let mut flux = stationary_flux_power(&kernel, &PowerOptions::default())?;
    println!(
        "power iteration: {} iterations, residual {:.2e}, eigenvalue {:.6}",
        flux.iterations, flux.residual, flux.eigenvalue
    );
    flux.normalize_mass(&field, &theta, 1.0, 0, 0)?;
    println!("J in [{:.4}, {:.4}], sup/inf {:.4}", flux.min(), flux.max(), flux.sup_inf_ratio());

    // J follows the temperature profile along x1 and is flat along x2
    let n = flux.grid.n;
    for i in (0..n).step_by(2) {
        let row: f64 = (0..n).map(|k| flux.values[i * n + k]).sum::<f64>() / n as f64;
        let x1 = (i as f64 + 0.5) / n as f64;
        println!("  x1 = {x1:.3}  Theta = {:.3}  J = {row:.4}", theta.eval([x1, 0.0]));
    }

    let mass = reconstruct_mass(&flux, &field, &theta, 200_000, 2)?;
    println!("mass of F_s by phase-space sampling: {:.4} +- {:.4}", mass.value, mass.std_error);

    let probe = PhaseState::new([0.25, 0.5, 0.1], [0.3, 0.0, 0.5]);
    println!("F_s at {:?}, {:?}: {:.5}", probe.x, probe.v, reconstruct_density(&flux, &probe, &field, &theta)?);

    let sup = linf_report(&flux, &field, &theta, 100_000, 3)?;
    println!("weighted sup {:.4e} ({:.3} of the mass)", sup.sup_weighted, sup.ratio_to_mass);
    Ok(())
}
