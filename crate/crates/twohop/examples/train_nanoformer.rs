//! Train the from-scratch decoder-only transformer on the two-hop task with
//! small (sigma = d^-1) initialization and print the training trace.
//!
//! Run with `cargo run --release --example train_nanoformer`.

use twohop::embmlp::InitPolicy;
use twohop::nanoformer::{tf_train, TfTrainConfig, TransformerConfig};
use twohop::taskgen::{generate, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec::new(10, 1, true, 0);
    let dataset = generate(&spec)?;
    let mut arch = TransformerConfig::toy(dataset.layout.full_vocab_size());
    arch.init = InitPolicy::Small { gamma: 1.0 };
    let tc = TfTrainConfig {
        max_steps: 2000,
        ..TfTrainConfig::default()
    };
    let (_, trace) = tf_train(&dataset, &arch, &tc)?;
    println!("step    loss        train  ood");
    for record in &trace {
        println!(
            "{:<7} {:<11.4e} {:<6.2} {:.2}",
            record.step, record.loss, record.train_acc, record.ood_acc
        );
    }
    Ok(())
}
