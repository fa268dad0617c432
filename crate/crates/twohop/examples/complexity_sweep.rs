//! Run a small complexity sweep through the experiment harness: the additive
//! embedding model with and without identity facts across bridge-multiplier
//! values, aggregated over seeds into `results.csv`.
//!
//! Run with `cargo run --release --example complexity_sweep`.

use twohop::harness::{cmd_sweep, SweepConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("twohop_complexity_sweep");
    let config = SweepConfig {
        n_entities: 10,
        complexities: vec![1, 2],
        seeds: vec![0, 1],
        variants: vec![Variant::EmbMlpId, Variant::EmbMlpNoId],
        workers: 2,
        emb_train: None,
        tf_train: None,
    };
    let outcome = cmd_sweep(&config, &out_dir)?;
    println!("wrote {}", outcome.results_path.display());
    println!("{}", std::fs::read_to_string(&outcome.results_path)?);
    Ok(())
}
