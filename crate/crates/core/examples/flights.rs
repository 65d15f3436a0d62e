//! Exit times, energy along flights and the bounce Jacobian in each regime.

use vlasov_mixing::characteristics::{
    advance, backward_exit, bounce_jacobian, flight_map_det, forward_exit, Direction, PhaseState,
};
use vlasov_mixing::{Expr, FieldConfig};

fn main() -> vlasov_mixing::Result<()> {
    let phi = Expr::parse("0.01*x3*exp(-2*x3)*sin(2*pi*x1)")?;
    let fields = [
        FieldConfig::gravity(10.0),
        FieldConfig::magnetic(3.0),
        FieldConfig::perturbed(10.0, phi, 1.5, 0.5, 0.5),
    ];
    let start = PhaseState::on_boundary([0.3, 0.6], [1.2, -0.7, 2.5]);
    for field in &fields {
        let f = forward_exit(&start, field)?;
        let mid = advance(&start, 0.5 * f.t_exit, field)?;
        println!("{:?}", field.regime);
        println!("  t_f = {:.6}, lands at ({:.4}, {:.4}) winding {:?}", f.t_exit, f.x_hit[0], f.x_hit[1], f.winding);
        println!("  apex height {:.4}, energy drift {:.2e}", mid.x[2], (mid.energy(field) - start.energy(field)).abs());

        // the backward flight from the landing state recovers the emission
        let b = backward_exit(&f.hit_state(), field)?;
        let dv: f64 = (0..3).map(|i| (b.v_hit[i] - start.v[i]).abs()).fold(0.0, f64::max);
        println!("  backward exit t_b = {:.6}, velocity defect {dv:.2e}", b.t_exit);

        let jac = bounce_jacobian(f.x_hit, b.t_exit, b.x_hit, b.winding, field)?;
        let det = flight_map_det(&start, Direction::Forward, field)?;
        println!("  backward bounce factor {:.6}, forward 1/|det| {:.6}", jac.factor, det.abs().recip());
    }
    Ok(())
}
