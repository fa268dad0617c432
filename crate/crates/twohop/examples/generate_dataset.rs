//! Generate a two-hop dataset and print its shape: vocabulary layout,
//! split sizes, and a few sample facts from each split.
//!
//! Run with `cargo run --example generate_dataset`.

use twohop::taskgen::{generate, DatasetSpec, ExampleKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec::new(8, 2, true, 0);
    let dataset = generate(&spec)?;
    let layout = &dataset.layout;

    println!(
        "N = {}, C = {}, identity rows: {}",
        layout.n(),
        layout.c(),
        spec.include_identity
    );
    println!(
        "vocab: {} subjects, {} bridges, {} objects, {} first-hop relations",
        layout.subjects.len(),
        layout.bridges.len(),
        layout.objects.len(),
        layout.rel1.len()
    );
    println!(
        "train: {} examples, held-out two-hop: {}",
        dataset.train.len(),
        dataset.test_ood.len()
    );

    for kind in [
        ExampleKind::OneHopFirst,
        ExampleKind::OneHopSecond,
        ExampleKind::ZeroHop,
        ExampleKind::TwoHop,
    ] {
        let pool: Vec<_> = dataset
            .train
            .iter()
            .chain(&dataset.test_ood)
            .filter(|ex| ex.kind == kind)
            .take(3)
            .collect();
        println!("{kind:?}:");
        for ex in pool {
            println!("  tokens {:?} -> target {}", ex.tokens, ex.target);
        }
    }
    Ok(())
}
