//! Checks the regime hypotheses for a few force fields and temperatures.

use vlasov_mixing::fields::validate_field;
use vlasov_mixing::{Expr, FieldConfig, TemperatureField};

fn main() -> vlasov_mixing::Result<()> {
    let phi = Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)")?;
    let fields = [
        ("gravity", FieldConfig::gravity(10.0)),
        ("magnetic", FieldConfig::magnetic(2.0)),
        ("perturbed", FieldConfig::perturbed(10.0, phi, 1.5, 0.5, 0.5)),
        ("magnetic, g = 9", {
            let mut f = FieldConfig::magnetic(2.0);
            f.g = 9.0;
            f
        }),
    ];
    for (name, field) in &fields {
        match validate_field(field) {
            Ok(report) => {
                println!("{name}: {}", if report.passed() { "ok" } else { "FAILED" });
                for c in &report.checks {
                    println!("  {:<28} observed {:>10.4e}  bound {:>10.4e}  {}", c.name, c.observed, c.bound, c.passed);
                }
            }
            Err(e) => println!("{name}: rejected ({e})"),
        }
    }

    for src in ["1.0", "1 + 0.2*sin(2*pi*x1)", "0.5 + sin(2*pi*x2)"] {
        match TemperatureField::parse(src) {
            Ok(t) => println!("Theta = {src}: a = {:.4}, b = {:.4}, (b/a)^2 = {:.4}", t.a(), t.b(), t.ratio_sq()),
            Err(e) => println!("Theta = {src}: rejected ({e})"),
        }
    }
    Ok(())
}
