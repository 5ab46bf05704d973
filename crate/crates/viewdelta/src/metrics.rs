//! Pixelwise change-detection metrics (IoU, F1, precision, recall) and the
//! three evaluation protocols: native prompts, per-class expansion, and a
//! fixed prompt shared by every pair.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{Mask, Rgb8};
use crate::model::{Model, ModelError};
use crate::scenegen::DatasetManifest;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("per-class protocol needs a class list and none was given")]
    MissingClasses,
    #[error("manifest split {0:?} has no records")]
    EmptySplit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Other(String),
}

/// Pixel counts of a binary confusion matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Count pixelwise agreement between a prediction and a label.
pub fn confusion(pred: &Mask, label: &Mask) -> Result<ConfusionCounts, MetricsError> {
    if pred.w != label.w || pred.h != label.h {
        return Err(MetricsError::ShapeMismatch(pred.w, pred.h, label.w, label.h));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.data.iter().zip(&label.data) {
        match (p != 0, l != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// The four named metrics for one set of counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Degenerate rule: when a denominator is zero, the metric is 1.0 if the
/// pair is empty/empty (tp+fp+fn == 0) and 0.0 otherwise.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricValues {
    let degenerate = if c.tp + c.fp + c.fn_ == 0 { 1.0 } else { 0.0 };
    let ratio = |num: u64, den: u64| if den == 0 { degenerate } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate
    };
    MetricValues {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        f1,
        precision,
        recall,
    }
}

/// How prompts are chosen during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Protocol {
    /// Use each record's own prompt.
    Native,
    /// Evaluate every pair once per class name and average over classes;
    /// the label for class c is the record label if c is in the record's
    /// class list, empty otherwise.
    PerClass(Vec<String>),
    /// One constant prompt for all pairs.
    Fixed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// From globally pooled counts.
    pub micro: MetricValues,
    /// Mean of per-pair metrics.
    pub macro_: MetricValues,
    pub n_pairs: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs: {}  threshold: {}", self.n_pairs, self.threshold);
        for (name, v) in [("micro", &self.micro), ("macro", &self.macro_)] {
            let _ = writeln!(
                s,
                "{name}: iou {:.4}  f1 {:.4}  precision {:.4}  recall {:.4}",
                v.iou, v.f1, v.precision, v.recall
            );
        }
        s
    }
}

fn aggregate(per_pair: &[(ConfusionCounts, MetricValues)], threshold: f64) -> MetricReport {
    let n = per_pair.len().max(1) as f64;
    let mut pooled = ConfusionCounts::default();
    let mut macro_ = MetricValues { iou: 0.0, f1: 0.0, precision: 0.0, recall: 0.0 };
    for (c, v) in per_pair {
        pooled.add(c);
        macro_.iou += v.iou / n;
        macro_.f1 += v.f1 / n;
        macro_.precision += v.precision / n;
        macro_.recall += v.recall / n;
    }
    MetricReport {
        micro: compute_metrics(&pooled),
        macro_,
        n_pairs: per_pair.len(),
        threshold,
        counts: pooled,
    }
}

/// A predictor is anything that maps (images, prompt) to a binary mask; the
/// model is the usual one, but oracles (labels fed back, all-zero) slot in
/// for harness sanity checks.
pub trait Predictor {
    fn predict_mask(
        &self,
        image_a: &Rgb8,
        image_b: &Rgb8,
        prompt: &str,
    ) -> Result<Mask, MetricsError>;
    fn threshold(&self) -> f64 {
        0.5
    }
}

impl Predictor for Model {
    fn predict_mask(
        &self,
        image_a: &Rgb8,
        image_b: &Rgb8,
        prompt: &str,
    ) -> Result<Mask, MetricsError> {
        Ok(self.predict(image_a, image_b, Some(prompt))?.1)
    }
    fn threshold(&self) -> f64 {
        self.config.threshold
    }
}

/// Options for `evaluate` beyond the protocol itself.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Manifest split to evaluate ("test"/"train").
    pub split: String,
    /// Dump red-over-blue overlay PNGs (prediction red, label blue) here.
    pub overlay_dir: Option<std::path::PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { split: "test".into(), overlay_dir: None }
    }
}

/// Paint prediction in red and label in blue over image B; overlap is
/// purple.
pub fn overlay(image_b: &Rgb8, pred: &Mask, label: &Mask) -> Rgb8 {
    let mut out = image_b.clone();
    for i in 0..out.w * out.h {
        let p = pred.data[i] != 0;
        let l = label.data[i] != 0;
        if p || l {
            let (x, y) = (i % out.w, i / out.w);
            out.set(x, y, [if p { 220 } else { 40 }, 40, if l { 220 } else { 40 }]);
        }
    }
    out
}

/// Evaluate a predictor over one split of a manifest under a protocol.
pub fn evaluate<P: Predictor>(
    manifest: &DatasetManifest,
    predictor: &P,
    protocol: &Protocol,
    options: &EvalOptions,
) -> Result<MetricReport, MetricsError> {
    if let Protocol::PerClass(classes) = protocol {
        if classes.is_empty() {
            return Err(MetricsError::MissingClasses);
        }
    }
    let records = manifest.split(&options.split);
    if records.is_empty() {
        return Err(MetricsError::EmptySplit(options.split.clone()));
    }
    if let Some(dir) = &options.overlay_dir {
        std::fs::create_dir_all(dir).map_err(|e| MetricsError::Other(e.to_string()))?;
    }

    let mut per_pair = Vec::new();
    for r in records {
        let image_a = Rgb8::load_png(&manifest.root.join(&r.image_a))
            .map_err(|e| MetricsError::Other(e.to_string()))?;
        let image_b = Rgb8::load_png(&manifest.root.join(&r.image_b))
            .map_err(|e| MetricsError::Other(e.to_string()))?;
        let label = Mask::load_png(&manifest.root.join(&r.label))
            .map_err(|e| MetricsError::Other(e.to_string()))?;

        // (prompt, effective label) pairs demanded by the protocol.
        let empty = Mask::zeros(label.w, label.h);
        let runs: Vec<(String, &Mask)> = match protocol {
            Protocol::Native => vec![(r.prompt.clone(), &label)],
            Protocol::Fixed(p) => vec![(p.clone(), &label)],
            Protocol::PerClass(classes) => classes
                .iter()
                .map(|c| {
                    let lbl = if r.is_all || r.classes.contains(c) { &label } else { &empty };
                    (c.clone(), lbl)
                })
                .collect(),
        };

        for (k, (prompt, lbl)) in runs.iter().enumerate() {
            let pred = predictor.predict_mask(&image_a, &image_b, prompt)?;
            let c = confusion(&pred, lbl)?;
            per_pair.push((c, compute_metrics(&c)));
            if let Some(dir) = &options.overlay_dir {
                overlay(&image_b, &pred, lbl)
                    .save_png(&dir.join(format!("{:06}_{k}.png", r.id)))
                    .map_err(|e| MetricsError::Other(e.to_string()))?;
            }
        }
    }
    Ok(aggregate(&per_pair, predictor.threshold()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_from(bits: &[u8], w: usize) -> Mask {
        Mask { w, h: bits.len() / w, data: bits.to_vec() }
    }

    #[test]
    fn confusion_hand_cases() {
        let ones = mask_from(&[1, 1, 1, 1], 2);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 0 });

        let pred = mask_from(&[1, 0, 0, 0], 2);
        let label = mask_from(&[1, 1, 0, 0], 2);
        let c = confusion(&pred, &label).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, fn_: 1, tn: 2 });
    }

    #[test]
    fn confusion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pred = Mask::zeros(64, 64);
        let mut label = Mask::zeros(64, 64);
        for v in pred.data.iter_mut() {
            *v = rng.gen_bool(0.4) as u8;
        }
        for v in label.data.iter_mut() {
            *v = rng.gen_bool(0.3) as u8;
        }
        let c = confusion(&pred, &label).unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                match (pred.get(x, y), label.get(x, y)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        assert_eq!(c, ConfusionCounts { tp, fp, fn_, tn });
        assert_eq!(c.total(), 64 * 64);
    }

    #[test]
    fn metric_arithmetic() {
        let v = compute_metrics(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 0 });
        assert!((v.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.precision - 0.5).abs() < 1e-15);
        assert!((v.recall - 0.5).abs() < 1e-15);
        assert!((v.f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_conventions() {
        // Empty prediction on empty label: all ones.
        let v = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 });
        assert_eq!((v.iou, v.f1, v.precision, v.recall), (1.0, 1.0, 1.0, 1.0));
        // Empty prediction on nonempty label: recall 0.
        let v = compute_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 6 });
        assert_eq!(v.recall, 0.0);
        assert_eq!(v.iou, 0.0);
    }

    #[test]
    fn iou_never_exceeds_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let c = ConfusionCounts {
                tp: rng.gen_range(0..50),
                fp: rng.gen_range(0..50),
                fn_: rng.gen_range(0..50),
                tn: rng.gen_range(0..50),
            };
            let v = compute_metrics(&c);
            assert!(v.iou <= v.f1 + 1e-12, "{c:?}");
        }
    }

    #[test]
    fn overlay_colors() {
        let img = Rgb8::filled(2, 1, [0, 0, 0]);
        let pred = mask_from(&[1, 0], 2);
        let label = mask_from(&[1, 1], 2);
        let o = overlay(&img, &pred, &label);
        assert_eq!(o.get(0, 0), [220, 40, 220]); // overlap: purple
        assert_eq!(o.get(1, 0), [40, 40, 220]); // label only: blue
    }
}
