//! Finite-difference gradient check over every trainable parameter of a
//! tiny model, including the no-SQT and trainable-patch-embedding variants.
//!
//! Run with: cargo run --release --example gradient_check

use viewdelta::model::Model;
use viewdelta::train::grad_check;
use viewdelta::verify::grad_check_variants;

fn main() -> anyhow::Result<()> {
    for (name, config) in grad_check_variants() {
        println!("=== {name} ===");
        let model = Model::new(config, 42)?;
        let report = grad_check(&model, 42, 1e-3).map_err(|e| anyhow::anyhow!("{e}"))?;
        print!("{}", report.render());
        anyhow::ensure!(report.passed, "{name} failed the gradient check");
    }
    Ok(())
}
