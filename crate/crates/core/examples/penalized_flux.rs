//! The attenuated, damped flux iteration as eps -> 0, extrapolated and
//! compared with the power-iteration fixed point on the same grid.

use vlasov_mixing::stationary::{
    estimate_kernel, penalized_on_bank, richardson, stationary_flux_power, unit_mass, FlightBank, PowerOptions,
};
use vlasov_mixing::{FieldConfig, TemperatureField};

fn main() -> vlasov_mixing::Result<()> {
    let field = FieldConfig::gravity(10.0);
    let theta = TemperatureField::parse("1 + 0.2*sin(2*pi*x1)")?;
    let (n, s) = (8, 16_000);

    let kernel = estimate_kernel(n, s, &field, &theta, 5)?;
    let power = stationary_flux_power(&kernel, &PowerOptions::default())?;
    let power = unit_mass(&power.grid, &power.values, &field, &theta, 0, 0)?;

    let bank = FlightBank::sample(n, s, &field, &theta, 6)?;
    let mut at = Vec::new();
    for eps in [0.04, 0.02, 0.01] {
        let r = penalized_on_bank(&bank, eps, None, 1e-12, 1_000_000)?;
        let j = unit_mass(&bank.grid, &r.flux, &field, &theta, 0, 0)?;
        let d: f64 = j.iter().zip(&power).map(|(a, b)| (a - b).abs()).sum::<f64>() / j.len() as f64;
        println!(
            "eps = {eps:<5} iterations {:>6}  mass defect {:+.3e}  mean |J - J_power| {d:.3e}",
            r.iterations, r.zero_mass_defect
        );
        at.push(j);
    }
    let limit = richardson(&at[0], &at[1], &at[2]);
    let d: f64 = limit.iter().zip(&power).map(|(a, b)| (a - b).abs()).sum::<f64>() / limit.len() as f64;
    println!("extrapolated: mean |J - J_power| {d:.3e}");

    let damped = penalized_on_bank(&bank, 0.01, Some(50), 1e-12, 1_000_000)?;
    println!("damped (j = 50): {} iterations", damped.iterations);
    Ok(())
}
