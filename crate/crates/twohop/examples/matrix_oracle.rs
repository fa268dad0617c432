//! Cross-check the closed-form nuclear norm of the restricted template
//! against a dense SVD, and the reduced identity program against a
//! full-matrix proximal-gradient solve at small `n`.
//!
//! Run with `cargo run --release --example matrix_oracle`.

use twohop::theory::{
    assemble_w, full_matrix_oracle, nuclear_norm_closed, nuclear_norm_svd, sample_feasible_point,
    solve_id, SolverConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // closed form vs SVD on random feasible template points
    let mut worst = 0.0f64;
    for n in [3usize, 5, 8] {
        for seed in 0..25u64 {
            let p = sample_feasible_point(n, seed);
            let closed = nuclear_norm_closed(&p, n)?;
            let svd = nuclear_norm_svd(&assemble_w(&p, n)?);
            worst = worst.max((closed - svd).abs() / svd);
        }
    }
    println!("closed form vs SVD, worst relative error: {worst:.2e}");

    // reduced program vs unrestricted full-matrix solve at n = 4
    let n = 4;
    let report = solve_id(n, &SolverConfig::default())?;
    let reduced = 0.5 * report.objective * report.objective;
    let (_, oracle) = full_matrix_oracle(n, true)?;
    println!(
        "n={n}: reduced optimum {:.6}, full-matrix optimum {:.6}, gap {:.2e}",
        reduced,
        oracle,
        (reduced - oracle).abs() / oracle
    );
    Ok(())
}
