//! End-to-end loop at toy scale: generate a dataset, train a small model,
//! evaluate under each protocol, and write a prediction overlay.
//!
//! Run with: cargo run --release --example train_and_evaluate
//! Takes a minute or two on one CPU core; outputs under ./example_out/run.

use std::path::Path;

use viewdelta::config::RunConfig;
use viewdelta::img::Rgb8;
use viewdelta::metrics::{evaluate, overlay, EvalOptions, Protocol};
use viewdelta::model::Model;
use viewdelta::scenegen::{generate_dataset, DatasetManifest, TemplateBank};
use viewdelta::train::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let out = Path::new("example_out/run");

    // Small everything: 32px canvas, 2-layer model, 300 steps.
    let mut cfg = RunConfig::default();
    cfg.model.image_side = 32;
    cfg.model.d_model = 64;
    cfg.model.layers = 2;
    cfg.model.mlp_dim = 128;
    cfg.model.t_max = 8;
    cfg.model.n_sqt = 16;
    cfg.gen.canvas = 32;
    cfg.validate()?;
    cfg.write_resolved(out)?;

    let bank = TemplateBank::builtin();
    let dataset_dir = out.join("dataset");
    generate_dataset(40, 0.1, 0.8, &dataset_dir, 21, &cfg.gen, &bank)?;
    let manifest = DatasetManifest::load(&dataset_dir.join("manifest.jsonl"))?;
    println!("dataset: {} pairs", manifest.records.len());

    let train_cfg = TrainConfig {
        lr0: 1e-3,
        weight_decay: 0.0,
        batch_size: 4,
        total_steps: 300,
        warmup_steps: 30,
        seed: 1,
        checkpoint_every: 0,
        target_iou: 1.0,
        pos_weight: 1.0,
    };
    let mut model = Model::new(cfg.model.clone(), 1)?;
    let report = train(&mut model, &[manifest.clone()], &train_cfg, out)?;
    let last = report.logs.last().unwrap();
    println!(
        "trained {} steps: loss {:.4}, train iou estimate {:.3}",
        report.steps_run, last.loss, last.iou_estimate
    );

    // Three evaluation protocols on the held-out split.
    let options = EvalOptions::default();
    for (name, protocol) in [
        ("native prompts", Protocol::Native),
        ("fixed prompt", Protocol::Fixed("highlight every change".into())),
        (
            "per-class",
            Protocol::PerClass(vec!["red disk".into(), "blue ring".into()]),
        ),
    ] {
        let r = evaluate(&manifest, &model, &protocol, &options)?;
        println!("{name}: micro iou {:.3}, f1 {:.3}", r.micro.iou, r.micro.f1);
    }

    // Prediction overlay for the first test pair: prediction in red,
    // ground truth in blue.
    let rec = manifest.split("test")[0];
    let a = Rgb8::load_png(&manifest.root.join(&rec.image_a))?;
    let b = Rgb8::load_png(&manifest.root.join(&rec.image_b))?;
    let label = viewdelta::img::Mask::load_png(&manifest.root.join(&rec.label))?;
    let (_, pred) = model.predict(&a, &b, Some(&rec.prompt))?;
    let png = out.join("overlay.png");
    overlay(&b, &pred, &label).save_png(&png)?;
    println!("wrote {}", png.display());
    Ok(())
}
