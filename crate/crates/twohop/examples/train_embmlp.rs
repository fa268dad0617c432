//! Train the additive embedding model with and without zero-hop identity
//! facts and compare held-out two-hop accuracy. With the identity rows the
//! model composes out of distribution; without them it fails.
//!
//! Run with `cargo run --release --example train_embmlp`.

use twohop::embmlp::{default_width, train, TrainConfig};
use twohop::taskgen::{generate, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for include_identity in [true, false] {
        let spec = DatasetSpec::new(20, 1, include_identity, 0);
        let dataset = generate(&spec)?;
        let width = default_width(&dataset.layout);
        let config = TrainConfig::default();
        let (_, trace) = train(&dataset, width, &config)?;
        let last = trace.last().expect("trace is non-empty");
        println!(
            "identity={include_identity}: step {} loss {:.3e} train acc {:.2} ood acc {:.2} min ood margin {:+.3}",
            last.step, last.loss, last.train_acc, last.ood_acc, last.min_ood_margin
        );
    }
    Ok(())
}
