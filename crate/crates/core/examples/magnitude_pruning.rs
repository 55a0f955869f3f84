//! Magnitude pruning zeroes the smallest entries of every tensor.
//!
//! cargo run --example magnitude_pruning

use fusionkit::merge::magnitude_prune;
use fusionkit::{synth, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = synth::generate(1);
    let (name, expert) = &fx.experts[0];
    for s in [0.0, 0.5, 0.9, 0.99] {
        let pruned = magnitude_prune(expert, s)?;
        let zeros: usize = pruned
            .iter()
            .map(|(_, t): (&String, &Tensor)| t.to_f64_vec().iter().filter(|v| **v == 0.0).count())
            .sum();
        let acc = fusionkit::evaluate(&pruned, &fx.datasets[..1])?.average;
        println!("{name} sparsity {s:<4}: {zeros:>4}/{} zeros, accuracy {acc:.3}", pruned.numel());
    }
    Ok(())
}
