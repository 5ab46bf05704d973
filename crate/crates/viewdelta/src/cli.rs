//! Command-line interface: `gen | train | eval | predict | verify` over a
//! declarative TOML config, with flag overrides winning over the file.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error,
//! 3 verification failure. The `VIEWDELTA_PRECISION` environment variable
//! ("f32"/"f64") selects the default numeric precision.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::img::Rgb8;
use crate::metrics::{evaluate, EvalOptions, Protocol};
use crate::model::Model;
use crate::scenegen::{generate_dataset, DatasetManifest, TemplateBank};
use crate::tensor::{set_default_precision, Precision};
use crate::train::train;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "viewdelta", about = "Text-conditioned scene change detection", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, String> {
        match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| e.to_string()),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: images, labels, manifest, stats.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of pairs (overrides config).
        #[arg(long)]
        n: Option<usize>,
        /// Share of "all" pairs (overrides config).
        #[arg(long)]
        all_fraction: Option<f64>,
        /// Master seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on one or more manifests.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Manifest files; samples are interleaved by the seeded shuffle.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Drop the spatial query tokens (image-token head instead).
        #[arg(long)]
        no_sqt: bool,
        /// Drop the text segment (prompt-free variant).
        #[arg(long)]
        no_prompts: bool,
        /// Replace the frozen image embedder with a trainable patch embedding.
        #[arg(long)]
        patch_embed: bool,
        /// Total optimizer steps (overrides config).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the report files.
        #[arg(long)]
        out: PathBuf,
        /// Protocol: "native", "fixed:<prompt>", or "per-class:<a>,<b>,...".
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Predict a change mask for one image pair.
    Predict {
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output mask PNG (0/255).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-verification suites (op oracles, gradient checks,
    /// generator audits).
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pairs to audit in the generator suite.
        #[arg(long, default_value_t = 200)]
        gen_pairs: usize,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    if s == "native" {
        return Ok(Protocol::Native);
    }
    if let Some(p) = s.strip_prefix("fixed:") {
        return Ok(Protocol::Fixed(p.to_string()));
    }
    if let Some(list) = s.strip_prefix("per-class:") {
        let classes: Vec<String> = list.split(',').map(|c| c.trim().to_string()).collect();
        return Ok(Protocol::PerClass(classes));
    }
    Err(format!("unknown protocol {s:?}; expected native, fixed:<prompt>, or per-class:<list>"))
}

fn apply_precision_env() -> Result<(), String> {
    match std::env::var("VIEWDELTA_PRECISION").ok().as_deref() {
        None | Some("f64") => set_default_precision(Precision::F64),
        Some("f32") => set_default_precision(Precision::F32),
        Some(other) => return Err(format!("VIEWDELTA_PRECISION must be f32 or f64, got {other:?}")),
    }
    Ok(())
}

fn validation(msg: String) -> u8 {
    eprintln!("error: {msg}");
    EXIT_VALIDATION
}

fn runtime(msg: String) -> u8 {
    eprintln!("error: {msg}");
    EXIT_RUNTIME
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn run(cli: Cli) -> u8 {
    if let Err(e) = apply_precision_env() {
        return validation(e);
    }
    match cli.command {
        Command::Gen { config, n, all_fraction, seed, out } => {
            let mut cfg = match config.load() {
                Ok(c) => c,
                Err(e) => return validation(e),
            };
            if let Some(n) = n {
                cfg.dataset.n_pairs = n;
            }
            if let Some(f) = all_fraction {
                cfg.dataset.all_fraction = f;
            }
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            if let Err(e) = cfg.validate() {
                return validation(e.to_string());
            }
            if let Err(e) = cfg.write_resolved(&out) {
                return runtime(e.to_string());
            }
            let bank = TemplateBank::builtin();
            match generate_dataset(
                cfg.dataset.n_pairs,
                cfg.dataset.all_fraction,
                cfg.dataset.split_ratio,
                &out,
                cfg.dataset.seed,
                &cfg.gen,
                &bank,
            ) {
                Ok(manifest) => {
                    print!("{}", manifest.stats().render());
                    0
                }
                Err(e) => runtime(e.to_string()),
            }
        }
        Command::Train { config, manifest, out, no_sqt, no_prompts, patch_embed, steps } => {
            let mut cfg = match config.load() {
                Ok(c) => c,
                Err(e) => return validation(e),
            };
            cfg.model.use_sqt = cfg.model.use_sqt && !no_sqt;
            cfg.model.use_prompts = cfg.model.use_prompts && !no_prompts;
            if patch_embed {
                cfg.model.use_frozen_image_embedder = false;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(s.saturating_sub(1));
            }
            if let Err(e) = cfg.validate() {
                return validation(e.to_string());
            }
            let manifests: Result<Vec<DatasetManifest>, _> =
                manifest.iter().map(|p| DatasetManifest::load(p)).collect();
            let manifests = match manifests {
                Ok(m) => m,
                Err(e) => return runtime(e.to_string()),
            };
            if let Err(e) = cfg.write_resolved(&out) {
                return runtime(e.to_string());
            }
            let mut model = match Model::new(cfg.model.clone(), cfg.model_seed) {
                Ok(m) => m,
                Err(e) => return validation(e.to_string()),
            };
            match train(&mut model, &manifests, &cfg.train, &out) {
                Ok(report) => {
                    if let Some(last) = report.logs.last() {
                        println!(
                            "trained {} steps; final loss {:.4}, iou estimate {:.4}",
                            report.steps_run, last.loss, last.iou_estimate
                        );
                    }
                    println!("checkpoint: {}", report.final_checkpoint.display());
                    0
                }
                Err(e) => runtime(e.to_string()),
            }
        }
        Command::Eval { config, manifest, checkpoint, out, protocol } => {
            let mut cfg = match config.load() {
                Ok(c) => c,
                Err(e) => return validation(e),
            };
            if let Some(p) = protocol {
                cfg.eval.protocol = match parse_protocol(&p) {
                    Ok(p) => p,
                    Err(e) => return validation(e),
                };
            }
            let manifest = match DatasetManifest::load(&manifest) {
                Ok(m) => m,
                Err(e) => return runtime(e.to_string()),
            };
            let model = match Model::load(&checkpoint) {
                Ok(m) => m,
                Err(e) => return runtime(e.to_string()),
            };
            if let Err(e) = cfg.write_resolved(&out) {
                return runtime(e.to_string());
            }
            let options = EvalOptions {
                split: cfg.eval.split.clone(),
                overlay_dir: cfg.eval.overlay_dir.clone(),
            };
            match evaluate(&manifest, &model, &cfg.eval.protocol, &options) {
                Ok(report) => {
                    print!("{}", report.render());
                    let json = serde_json::to_string_pretty(&report)
                        .unwrap_or_else(|e| format!("{{\"error\": \"{e}\"}}"));
                    if let Err(e) = std::fs::write(out.join("report.json"), json)
                        .and_then(|_| std::fs::write(out.join("report.txt"), report.render()))
                    {
                        return runtime(e.to_string());
                    }
                    0
                }
                Err(e) => runtime(e.to_string()),
            }
        }
        Command::Predict { image_a, image_b, prompt, checkpoint, out } => {
            let model = match Model::load(&checkpoint) {
                Ok(m) => m,
                Err(e) => return runtime(e.to_string()),
            };
            let a = match Rgb8::load_png(&image_a) {
                Ok(i) => i,
                Err(e) => return runtime(e.to_string()),
            };
            let b = match Rgb8::load_png(&image_b) {
                Ok(i) => i,
                Err(e) => return runtime(e.to_string()),
            };
            match model.predict(&a, &b, Some(&prompt)) {
                Ok((_, mask)) => match mask.save_png(&out) {
                    Ok(()) => {
                        println!("wrote {} ({} changed pixels)", out.display(), mask.count());
                        0
                    }
                    Err(e) => runtime(e.to_string()),
                },
                Err(e) => runtime(e.to_string()),
            }
        }
        Command::Verify { seed, gen_pairs } => {
            let report = crate::verify::run_all(seed, gen_pairs);
            print!("{}", report.render());
            if report.passed() {
                0
            } else {
                EXIT_VERIFY
            }
        }
    }
}

/// Convenience used by tests: run the CLI from an argument vector.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::parse_from(args))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_parsing() {
        assert_eq!(parse_protocol("native").unwrap(), Protocol::Native);
        assert_eq!(
            parse_protocol("fixed:any change").unwrap(),
            Protocol::Fixed("any change".into())
        );
        assert_eq!(
            parse_protocol("per-class:red disk, blue ring").unwrap(),
            Protocol::PerClass(vec!["red disk".into(), "blue ring".into()])
        );
        assert!(parse_protocol("bogus").is_err());
    }

    #[test]
    fn cli_parses_all_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        for args in [
            vec!["viewdelta", "gen", "--n", "10", "--out", "d"],
            vec!["viewdelta", "train", "--manifest", "m.jsonl", "--out", "d", "--no-sqt"],
            vec!["viewdelta", "eval", "--manifest", "m", "--checkpoint", "c", "--out", "d"],
            vec![
                "viewdelta", "predict", "--image-a", "a.png", "--image-b", "b.png", "--prompt",
                "red disk", "--checkpoint", "c", "--out", "m.png",
            ],
            vec!["viewdelta", "verify", "--gen-pairs", "5"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }
}
