//! Optimizer, learning-rate schedule, training loop, and the finite-
//! difference gradient checker.
//!
//! The whole run is a pure function of (data seed, init seed, config):
//! sample order comes from a seeded shuffle, and every floating-point
//! reduction in the stack has a fixed order, so repeated runs produce
//! identical loss curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{Mask, Rgb8};
use crate::model::{Model, ModelError};
use crate::scenegen::DatasetManifest;
use crate::tensor::Graph;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step} (loss = {loss})")]
    NanLoss { step: usize, loss: f64 },
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("manifest has no train records")]
    EmptyManifest,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr0: f64,
    pub weight_decay: f64,
    /// Gradients are averaged over this many samples per optimizer step.
    pub batch_size: usize,
    /// Total optimizer steps. Takes precedence over epochs when set.
    pub total_steps: usize,
    /// Linear warmup steps (one epoch's worth by convention).
    pub warmup_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop early once the running train IoU estimate reaches this value
    /// (1.0 disables early stopping).
    pub target_iou: f64,
    /// Loss weight applied to positive (changed) pixels. Change masks are
    /// sparse, so values above 1 keep the model from collapsing to all-zero
    /// predictions on short runs.
    pub pos_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-5,
            weight_decay: 0.01,
            batch_size: 16,
            total_steps: 1000,
            warmup_steps: 100,
            seed: 0,
            checkpoint_every: 0,
            target_iou: 1.0,
            pos_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr0 > 0.0) {
            return Err(TrainError::InvalidConfig("lr0 must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::InvalidConfig(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_iou) {
            return Err(TrainError::InvalidConfig("target_iou must lie in [0, 1]".into()));
        }
        if !(self.pos_weight > 0.0) {
            return Err(TrainError::InvalidConfig("pos_weight must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `lr0`, then cosine decay to exactly zero at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, lr0: f64) -> Result<f64, TrainError> {
    if warmup >= total {
        return Err(TrainError::InvalidConfig(format!(
            "warmup ({warmup}) must be shorter than the run ({total})"
        )));
    }
    if step > total {
        return Err(TrainError::InvalidConfig(format!(
            "step {step} beyond total {total}"
        )));
    }
    Ok(if step < warmup {
        lr0 * (step + 1) as f64 / warmup as f64
    } else {
        let t = (step - warmup) as f64 / (total - warmup) as f64;
        0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
    })
}

/// Adam moments, keyed by parameter name so the state survives checkpoint
/// round-trips regardless of parameter iteration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One optimizer step: decoupled weight decay (θ ← θ − lr·wd·θ), then the
/// bias-corrected Adam update. `grads` must hold one entry per parameter.
pub fn adam_step(
    model: &mut Model,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, param) in model.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGrad(name.to_string()))?;
        let n = param.data.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            param.data[i] -= lr * weight_decay * param.data[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A sample loaded into memory and ready for the forward pass.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_a: Rgb8,
    pub image_b: Rgb8,
    pub prompt: String,
    pub label: Mask,
}

/// Load every train-split record of each manifest. Multiple manifests are
/// concatenated; the seeded shuffle then interleaves them.
pub fn load_train_samples(manifests: &[DatasetManifest]) -> Result<Vec<TrainSample>, TrainError> {
    let mut samples = Vec::new();
    for m in manifests {
        for r in m.split("train") {
            samples.push(TrainSample {
                image_a: Rgb8::load_png(&m.root.join(&r.image_a))
                    .map_err(|e| TrainError::Other(e.to_string()))?,
                image_b: Rgb8::load_png(&m.root.join(&r.image_b))
                    .map_err(|e| TrainError::Other(e.to_string()))?,
                prompt: r.prompt.clone(),
                label: Mask::load_png(&m.root.join(&r.label))
                    .map_err(|e| TrainError::Other(e.to_string()))?,
            });
        }
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    Ok(samples)
}

/// Steps averaged for the early-stopping IoU signal.
pub const EARLY_STOP_WINDOW: usize = 8;

/// One line of the metrics log, serialized as JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// IoU of the thresholded prediction against the label, averaged over
    /// the step's batch — a cheap training-progress signal, not a protocol
    /// evaluation.
    pub iou_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
    pub steps_run: usize,
    /// Per-manifest sample counts actually visited, for joint-training audits.
    pub samples_seen: usize,
}

fn batch_iou(probs: &[f64], label: &Mask, threshold: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, &l) in probs.iter().zip(&label.data) {
        let pred = *p >= threshold;
        let truth = l != 0;
        inter += (pred && truth) as usize;
        union += (pred || truth) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Run the training loop. Writes checkpoints under `out_dir` and a JSONL
/// metrics log at `out_dir/train_log.jsonl`; returns the collected logs.
pub fn train(
    model: &mut Model,
    manifests: &[DatasetManifest],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let samples = load_train_samples(manifests)?;
    std::fs::create_dir_all(out_dir)?;
    let mut log_file = std::fs::File::create(out_dir.join("train_log.jsonl"))?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new();
    let mut logs = Vec::new();
    let mut cursor = samples.len(); // forces a shuffle before the first step
    let mut samples_seen = 0usize;
    let threshold = model.config.threshold;

    let mut step = 0;
    while step < config.total_steps {
        // Accumulate averaged gradients over the batch.
        let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_acc = 0.0;
        let mut iou_acc = 0.0;
        for _ in 0..config.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            samples_seen += 1;

            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let logits = model.forward(
                &mut graph,
                &bound,
                &sample.image_a,
                &sample.image_b,
                Some(&sample.prompt),
            )?;
            let targets: Vec<f64> = sample.label.data.iter().map(|&v| (v != 0) as u8 as f64).collect();
            let loss = graph.bce_with_logits_weighted(logits, &targets, config.pos_weight)?;
            let loss_val = graph.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::NanLoss { step, loss: loss_val });
            }
            loss_acc += loss_val;
            let probs: Vec<f64> =
                graph.data(logits).iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
            iou_acc += batch_iou(&probs, &sample.label, threshold);
            graph.backward(loss)?;
            for (name, id) in bound.iter() {
                let g = graph
                    .grad(id)
                    .ok_or_else(|| TrainError::MissingGrad(name.to_string()))?;
                let acc = grad_acc
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
        }
        let inv_b = 1.0 / config.batch_size as f64;
        for g in grad_acc.values_mut() {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }

        let lr = lr_schedule(step, config.warmup_steps, config.total_steps, config.lr0)?;
        adam_step(model, &grad_acc, &mut state, lr, config.weight_decay)?;
        model.step = state.step as u64;

        let entry = StepLog {
            step,
            lr,
            loss: loss_acc * inv_b,
            iou_estimate: iou_acc * inv_b,
        };
        serde_json::to_writer(&mut log_file, &entry)
            .map_err(|e| TrainError::Other(e.to_string()))?;
        writeln!(log_file)?;
        logs.push(entry);

        step += 1;
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            model.save(&out_dir.join(format!("checkpoint_{step:06}.bin")))?;
        }
        // Early stop on the mean IoU of the last few steps, so one easy
        // sample (e.g. an empty label) cannot end the run by itself.
        // target_iou = 1.0 disables early stopping.
        if config.target_iou < 1.0 && logs.len() >= EARLY_STOP_WINDOW {
            let tail = &logs[logs.len() - EARLY_STOP_WINDOW..];
            let mean: f64 =
                tail.iter().map(|l| l.iou_estimate).sum::<f64>() / EARLY_STOP_WINDOW as f64;
            if mean >= config.target_iou {
                break;
            }
        }
    }

    let final_path = out_dir.join("checkpoint_final.bin");
    model.save(&final_path)?;
    Ok(TrainReport {
        logs,
        final_checkpoint: final_path,
        steps_run: step,
        samples_seen,
    })
}

/// Result of checking one parameter tensor against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {}: max rel err {:.3e} over {} elements",
                if e.passed { "ok  " } else { "FAIL" },
                e.name,
                e.max_rel_err,
                e.checked
            );
        }
        let _ = writeln!(
            s,
            "overall: max rel err {:.3e} (tolerance {:.1e}) -> {}",
            self.max_rel_err,
            self.tolerance,
            if self.passed { "pass" } else { "fail" }
        );
        s
    }
}

/// Compare every trainable parameter's analytic gradient against central
/// finite differences on one random synthetic sample. Requires 64-bit
/// precision; the frozen embedder stubs hold no parameters so they never
/// appear in the report.
pub fn grad_check(model: &Model, seed: u64, tolerance: f64) -> Result<GradCheckReport, TrainError> {
    if crate::tensor::default_precision() != crate::tensor::Precision::F64 {
        return Err(TrainError::Other(
            "gradient checking requires 64-bit precision".into(),
        ));
    }
    let side = model.config.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_img = || {
        let mut img = Rgb8::filled(side, side, [0, 0, 0]);
        for b in img.data.iter_mut() {
            *b = rand::Rng::gen(&mut rng);
        }
        img
    };
    let image_a = rand_img();
    let image_b = rand_img();
    let mut label = Mask::zeros(side, side);
    for v in label.data.iter_mut() {
        *v = rand::Rng::gen_bool(&mut rng, 0.3) as u8;
    }
    let targets: Vec<f64> = label.data.iter().map(|&v| v as f64).collect();
    let prompt = "red disk, blue ring";

    // Analytic gradients.
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let logits = model.forward(&mut graph, &bound, &image_a, &image_b, Some(prompt))?;
    let loss = graph.bce_with_logits(logits, &targets)?;
    graph.backward(loss)?;
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, id) in bound.iter() {
        analytic.insert(
            name.to_string(),
            graph.grad(id).ok_or_else(|| TrainError::MissingGrad(name.to_string()))?.to_vec(),
        );
    }

    let eval = |m: &Model| -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let z = m.forward(&mut g, &b, &image_a, &image_b, Some(prompt))?;
        let l = g.bce_with_logits(z, &targets)?;
        Ok(g.data(l)[0])
    };

    let h = 1e-5;
    let mut scratch = model.clone();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut entries = Vec::new();
    let mut overall = 0.0f64;
    for name in names {
        let n = model.params.get(&name).unwrap().data.len();
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for i in 0..n {
            let orig = scratch.params.get(&name).unwrap().data[i];
            scratch.params.get_mut(&name).unwrap().data[i] = orig + h;
            let lp = eval(&scratch)?;
            scratch.params.get_mut(&name).unwrap().data[i] = orig - h;
            let lm = eval(&scratch)?;
            scratch.params.get_mut(&name).unwrap().data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[&name][i];
            if fd.abs() < 1e-8 && an.abs() < 1e-8 {
                continue;
            }
            // Floor the denominator at the finite-difference noise scale:
            // central differences on an O(1) loss carry ~1e-11 absolute
            // error at h=1e-5, so gradients near that magnitude are only
            // meaningfully comparable in absolute terms.
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        overall = overall.max(max_rel);
        entries.push(GradCheckEntry {
            name,
            max_rel_err: max_rel,
            checked,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: overall,
        tolerance,
        passed: overall <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let lr0 = 2e-5;
        // End of warmup hits lr0 exactly (step counts from 0).
        assert!((lr_schedule(99, 100, 1000, lr0).unwrap() - lr0).abs() < 1e-18);
        // Final step decays to zero.
        assert!(lr_schedule(1000, 100, 1000, lr0).unwrap().abs() < 1e-18);
        // Halfway through warmup: step=49 -> lr0 * 50/100.
        assert!((lr_schedule(49, 100, 1000, lr0).unwrap() - 1.0e-5).abs() < 1e-18);
        assert!(lr_schedule(5, 10, 10, lr0).is_err());
    }

    #[test]
    fn schedule_continuous_and_non_increasing_after_warmup() {
        let lr0 = 1e-3;
        let mut prev = f64::INFINITY;
        for step in 100..=1000 {
            let lr = lr_schedule(step, 100, 1000, lr0).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        let before = lr_schedule(99, 100, 1000, lr0).unwrap();
        let after = lr_schedule(100, 100, 1000, lr0).unwrap();
        assert!((before - after).abs() < lr0 * 0.01);
    }

    fn tiny_model(seed: u64) -> Model {
        Model::new(crate::model::tiny_config(), seed).unwrap()
    }

    fn grads_like(model: &Model, value: f64) -> BTreeMap<String, Vec<f64>> {
        model
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), vec![value; p.data.len()]))
            .collect()
    }

    #[test]
    fn adam_zero_grad_zero_wd_is_fixed_point() {
        let mut model = tiny_model(1);
        let before: Vec<f64> = model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        let mut state = OptimizerState::new();
        { let g = grads_like(&model, 0.0); adam_step(&mut model, &g, &mut state, 1e-3, 0.0).unwrap(); }
        let after: Vec<f64> = model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_weight_decay_shrinks_params() {
        let mut model = tiny_model(1);
        let before: Vec<f64> = model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        let mut state = OptimizerState::new();
        let (lr, wd) = (1e-2, 0.5);
        { let g = grads_like(&model, 0.0); adam_step(&mut model, &g, &mut state, lr, wd).unwrap(); }
        let after: Vec<f64> = model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b * (1.0 - lr * wd)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_matches_reference_formula() {
        let mut model = tiny_model(1);
        let g = 0.37;
        let before: Vec<f64> = model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        let mut state = OptimizerState::new();
        let lr = 1e-3;
        { let g = grads_like(&model, g); adam_step(&mut model, &g, &mut state, lr, 0.0).unwrap(); }
        // After one step: mhat = g, vhat = g^2, so Δθ = −lr·g/(|g|+ε).
        let expect = lr * g / (g.abs() + state.eps);
        let after: Vec<f64> = model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert!(((b - a) - expect).abs() < 1e-12, "delta {} vs {}", b - a, expect);
        }
    }

    #[test]
    fn adam_missing_grad_is_an_error() {
        let mut model = tiny_model(1);
        let mut state = OptimizerState::new();
        let empty = BTreeMap::new();
        assert!(matches!(
            adam_step(&mut model, &empty, &mut state, 1e-3, 0.0),
            Err(TrainError::MissingGrad(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.warmup_steps = c.total_steps;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
