//! Instrumented forward pass: shows the token sequence layout
//! [image A | image B | text | spatial query tokens], the positions the
//! segmentation head reads, and the output shapes.
//!
//! Run with: cargo run --release --example forward_walkthrough

use viewdelta::model::{Model, ModelConfig};
use viewdelta::scenegen::{generate_pair, ClassBalanceLedger, GenConfig, TemplateBank};
use viewdelta::tensor::Graph;

fn main() -> anyhow::Result<()> {
    let config = ModelConfig::default();
    println!(
        "model: {}px image, patch {}, d_model {}, {} layers, {} heads",
        config.image_side, config.patch, config.d_model, config.layers, config.heads
    );

    let g_side = config.grid();
    println!(
        "tokens: 2 x {}^2 image + {} text + {} spatial query = {}",
        g_side,
        config.t_max,
        config.n_sqt,
        config.seq_len()
    );

    // One synthetic pair to feed through.
    let gen = GenConfig::default();
    let bank = TemplateBank::builtin();
    let mut ledger = ClassBalanceLedger::default();
    let (pair, _) = generate_pair(3, false, &mut ledger, &bank, &gen)?;
    println!("prompt: {:?}", pair.prompt);

    let model = Model::new(config, 0)?;
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let (logits, layout) =
        model.forward_traced(&mut graph, &bound, &pair.image_a, &pair.image_b, Some(&pair.prompt))?;

    println!("--- sequence layout ---");
    for (name, start, len) in &layout.segments {
        println!("  {name}: rows {}..{}", start, start + len);
    }
    println!(
        "head reads rows {}..{} (trailing {} positions)",
        layout.head_slice_start.unwrap(),
        layout.seq_len,
        model.config.n_sqt
    );
    println!("logits shape: {:?}", graph.shape(logits));

    let (probs, mask) = model.predict(&pair.image_a, &pair.image_b, Some(&pair.prompt))?;
    let mean_p: f64 = probs.iter().sum::<f64>() / probs.len() as f64;
    println!(
        "untrained prediction: mean prob {:.3}, {} pixels over threshold",
        mean_p,
        mask.count()
    );
    Ok(())
}
