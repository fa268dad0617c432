//! Probe whether a trained transformer represents a one-hop prefix
//! `(subject, relation)` the same way it represents the matching bridge
//! entity: per-layer cosine similarity of the residual stream, compared
//! between small and standard initialization.
//!
//! Run with `cargo run --release --example alignment_probe`.

use twohop::analysis::alignment;
use twohop::embmlp::InitPolicy;
use twohop::nanoformer::{tf_train, TfTrainConfig, TransformerConfig};
use twohop::taskgen::{generate, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec::new(10, 2, true, 0);
    let dataset = generate(&spec)?;
    for (label, init) in [
        ("small", InitPolicy::Small { gamma: 1.0 }),
        ("standard", InitPolicy::Standard),
    ] {
        let mut arch = TransformerConfig::toy(dataset.layout.full_vocab_size());
        arch.init = init;
        let tc = TfTrainConfig {
            max_steps: 2000,
            ..TfTrainConfig::default()
        };
        let (params, trace) = tf_train(&dataset, &arch, &tc)?;
        let score = alignment(&params, &arch, &dataset, dataset.layout.bridges.len())?;
        let last = trace.last().expect("trace is non-empty");
        println!(
            "{label}: ood acc {:.2}, per-layer alignment {:?}, aggregate {:.3}",
            last.ood_acc,
            score
                .per_layer
                .iter()
                .map(|v| (v * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            score.aggregate
        );
    }
    Ok(())
}
