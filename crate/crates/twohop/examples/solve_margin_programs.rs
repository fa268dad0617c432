//! Solve the reduced max-margin programs for the identity and no-identity
//! task variants and print the optimum, the KKT residuals, and the sign of
//! the held-out margins. The identity program certifies positive margins;
//! the no-identity program certifies failure.
//!
//! Run with `cargo run --release --example solve_margin_programs`.

use twohop::theory::{kkt_check, solve_id, solve_noid, ReducedPoint, SolverConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = SolverConfig::default();
    for n in [5usize, 10, 20] {
        let id = solve_id(n, &config)?;
        let noid = solve_noid(n, &config)?;
        let q_id = id.margins.iter().cloned().fold(f64::INFINITY, f64::min);
        let q_noid = noid.margins.iter().cloned().fold(f64::INFINITY, f64::min);
        let summary = kkt_check(&id);
        println!(
            "n={n}: id objective {:.6} (q = {q_id:+.4}), noid objective {:.6} (q = {q_noid:+.4})",
            id.objective, noid.objective
        );
        println!(
            "  id residuals: feasibility {:.1e}, stationarity {:.1e}, complementarity {:.1e}",
            id.feasibility_residual, summary.stationarity, summary.complementarity
        );
        if let ReducedPoint::Id(p) = id.point {
            println!(
                "  id point: a1 = {:.4}, d1 = {:.4}, f = {:.4}, t = {:.1e}",
                p.a1, p.d1, p.f, p.t
            );
        }
    }
    Ok(())
}
