//! The full diagnostic suite in the magnetic regime.

use vlasov_mixing::verification::{run_suite, VerificationConfig};
use vlasov_mixing::{FieldConfig, TemperatureField};

fn main() -> vlasov_mixing::Result<()> {
    let field = FieldConfig::magnetic(20.0);
    let theta = TemperatureField::parse("1 + 0.1*sin(2*pi*x1)")?;
    let cfg = VerificationConfig {
        jacobian_bins: 20,
        doeblin_samples_per_cell: 500,
        ..VerificationConfig::default()
    };
    let suite = run_suite(&field, &theta, &cfg)?;

    println!("flight-time marginal:");
    for b in suite.jacobian.bins.iter().step_by(4) {
        println!("  [{:.4}, {:.4})  {:>6} hits  rel err {:+.4}", b.lo, b.hi, b.hits, b.rel_err);
    }
    println!(
        "exit-time slope {:.3} +- {:.3}",
        suite.exit_time.slope, suite.exit_time.slope_std_error
    );
    if let Some(bad) = &suite.bad_set {
        println!("bad-set slope {:.3} +- {:.3}", bad.slope, bad.slope_std_error);
    }
    for r in &suite.residual {
        println!("residual at t = {}: plateau ratio {:.3}", r.horizon, r.plateau_ratio);
    }
    for d in &suite.doeblin {
        println!("Doeblin N = {}: overlap {:.4}", d.steps, d.overlap);
    }
    println!();
    for v in &suite.verdicts {
        println!("{:<32} {:>10.4}  in [{:.4}, {:.4}]  {}", v.test, v.statistic, v.band[0], v.band[1], if v.pass { "PASS" } else { "FAIL" });
    }
    Ok(())
}
