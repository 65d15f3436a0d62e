//! Boundary-time representation of phase-space integrals, checked against a
//! direct Monte-Carlo integral in every regime.

use vlasov_mixing::characteristics::{cov_identity_check, TestFunction};
use vlasov_mixing::{Expr, FieldConfig, TemperatureField};

fn main() -> vlasov_mixing::Result<()> {
    let theta = TemperatureField::parse("1.125 + 0.125*sin(2*pi*x1)")?;
    let phi = Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)")?;
    let fields = [
        (FieldConfig::gravity(10.0), 400_000),
        (FieldConfig::magnetic(2.0), 400_000),
        (FieldConfig::perturbed(10.0, phi, 1.5, 0.5, 0.5), 50_000),
    ];
    for (field, n) in &fields {
        for test in [TestFunction::Maxwellian, TestFunction::GaussianExp, TestFunction::Anisotropic] {
            let c = cov_identity_check(field, &theta, test, *n, 7)?;
            println!(
                "{:<16} {:<12} boundary {:.5e} +- {:.1e}  direct {:.5e} +- {:.1e}  ({:.2}%, {:.1} sigma)",
                format!("{:?}", field.regime),
                format!("{test:?}"),
                c.lhs.value,
                c.lhs.std_error,
                c.rhs.value,
                c.rhs.std_error,
                100.0 * c.rel_err,
                c.z
            );
        }
    }
    Ok(())
}
