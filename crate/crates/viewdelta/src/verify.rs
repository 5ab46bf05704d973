//! Self-verification suites: brute-force oracles for the numeric kernels,
//! finite-difference gradient checks across model variants, and generator
//! audits. The `verify` subcommand runs all of them; the same functions
//! back the integration tests.
//!
//! Every oracle here is written as the dumbest possible loop, independent
//! of the production implementation, so agreement is meaningful.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{tiny_config, Model, ModelConfig};
use crate::scenegen::{
    generate_pair, prune_label, ClassBalanceLedger, GenConfig, TemplateBank,
};
use crate::tensor::Graph;
use crate::train::{grad_check, TrainError};

/// Outcome of one named suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for suite in &self.suites {
            let _ = writeln!(
                s,
                "{} {}: {}",
                if suite.passed { "ok  " } else { "FAIL" },
                suite.name,
                suite.detail
            );
        }
        let _ = writeln!(s, "verify: {}", if self.passed() { "pass" } else { "fail" });
        s
    }

    fn push(&mut self, name: &str, result: Result<String, String>) {
        match result {
            Ok(detail) => self.suites.push(SuiteResult {
                name: name.into(),
                passed: true,
                detail,
            }),
            Err(detail) => self.suites.push(SuiteResult {
                name: name.into(),
                passed: false,
                detail,
            }),
        }
    }
}

const OP_TOL: f64 = 1e-10;

fn rand_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// matmul against the triple loop, 20+ random shapes.
pub fn suite_matmul(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..24 {
        let (m, k, n) = (
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
        );
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                expect[i * n + j] = acc;
            }
        }
        let mut g = Graph::new();
        let ta = g.constant(a, vec![m, k]);
        let tb = g.constant(b, vec![k, n]);
        let tc = g.matmul(ta, tb).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(g.data(tc), &expect);
        worst = worst.max(diff);
        if diff > OP_TOL {
            return Err(format!("case {case} [{m}x{k}]·[{k}x{n}]: diff {diff:.2e}"));
        }
    }
    Ok(format!("24 shapes, max diff {worst:.2e}"))
}

fn conv_oracle(
    x: &[f64],
    sx: &[usize],
    k: &[f64],
    sk: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (cin, h, w) = (sx[0], sx[1], sx[2]);
    let (cout, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            if iy < pad || ix < pad {
                                continue;
                            }
                            let (iy, ix) = (iy - pad, ix - pad);
                            if iy >= h || ix >= w {
                                continue;
                            }
                            acc += x[(ci * h + iy) * w + ix]
                                * k[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, vec![cout, oh, ow])
}

fn conv_transpose_oracle(
    x: &[f64],
    sx: &[usize],
    k: &[f64],
    sk: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (cout, h, w) = (sx[0], sx[1], sx[2]);
    let (_, cin, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; cin * oh * ow];
    // Scatter: the exact adjoint of the conv gather above.
    for co in 0..cout {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(co * h + iy) * w + ix];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = iy * stride + ky;
                            let ox = ix * stride + kx;
                            if oy < pad || ox < pad {
                                continue;
                            }
                            let (oy, ox) = (oy - pad, ox - pad);
                            if oy >= oh || ox >= ow {
                                continue;
                            }
                            out[(ci * oh + oy) * ow + ox] +=
                                v * k[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    (out, vec![cin, oh, ow])
}

/// conv2d and conv_transpose2d against nested-loop oracles, 20+ shapes.
pub fn suite_conv(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..22 {
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=4);
        let kw = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1.min(kh.min(kw) - 1));
        let h = rng.gen_range(kh.max(stride)..=kh + 6);
        let w = rng.gen_range(kw.max(stride)..=kw + 6);
        // Keep extents integral for the stride.
        let h = h - (h + 2 * pad - kh) % stride;
        let w = w - (w + 2 * pad - kw) % stride;
        if h < kh || w < kw {
            continue;
        }
        let x = rand_vec(&mut rng, cin * h * w);
        let k = rand_vec(&mut rng, cout * cin * kh * kw);

        let (expect, eshape) = conv_oracle(&x, &[cin, h, w], &k, &[cout, cin, kh, kw], stride, pad);
        let mut g = Graph::new();
        let tx = g.constant(x.clone(), vec![cin, h, w]);
        let tk = g.constant(k.clone(), vec![cout, cin, kh, kw]);
        let ty = g.conv2d(tx, tk, None, stride, pad).map_err(|e| e.to_string())?;
        if g.shape(ty) != eshape.as_slice() {
            return Err(format!("conv case {case}: shape {:?} vs {eshape:?}", g.shape(ty)));
        }
        let diff = max_abs_diff(g.data(ty), &expect);
        worst = worst.max(diff);
        if diff > OP_TOL {
            return Err(format!("conv case {case}: diff {diff:.2e}"));
        }

        // Transposed direction on the conv output's shape.
        let y = rand_vec(&mut rng, expect.len());
        let (texpect, tshape) =
            conv_transpose_oracle(&y, &eshape, &k, &[cout, cin, kh, kw], stride, pad);
        let mut g = Graph::new();
        let tyv = g.constant(y.clone(), eshape.clone());
        let tk = g.constant(k.clone(), vec![cout, cin, kh, kw]);
        let tz = g
            .conv_transpose2d(tyv, tk, None, stride, pad)
            .map_err(|e| e.to_string())?;
        if g.shape(tz) != tshape.as_slice() {
            return Err(format!(
                "conv_transpose case {case}: shape {:?} vs {tshape:?}",
                g.shape(tz)
            ));
        }
        let diff = max_abs_diff(g.data(tz), &texpect);
        worst = worst.max(diff);
        if diff > OP_TOL {
            return Err(format!("conv_transpose case {case}: diff {diff:.2e}"));
        }

        // Adjoint identity: <y, conv(x)> == <conv_T(y), x>.
        let lhs: f64 = y.iter().zip(&expect).map(|(a, b)| a * b).sum();
        let rhs: f64 = texpect.iter().zip(&x).map(|(a, b)| a * b).sum();
        if (lhs - rhs).abs() > OP_TOL * lhs.abs().max(1.0) {
            return Err(format!("adjoint identity case {case}: {lhs} vs {rhs}"));
        }
    }
    Ok(format!("22 shapes + adjoint identity, max diff {worst:.2e}"))
}

/// Multi-head attention against a direct reference loop, 20+ shapes.
pub fn suite_attention(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let heads = rng.gen_range(1..=4);
        let dh = rng.gen_range(1..=5);
        let d = heads * dh;
        let n = rng.gen_range(1..=8);
        let q = rand_vec(&mut rng, n * d);
        let k = rand_vec(&mut rng, n * d);
        let v = rand_vec(&mut rng, n * d);

        let mut expect = vec![0.0; n * d];
        let scale = 1.0 / (dh as f64).sqrt();
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                // Scores against every key, softmaxed.
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i * d + off + c] * k[j * d + off + c])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for c in 0..dh {
                    expect[i * d + off + c] = (0..n)
                        .map(|j| scores[j] / z * v[j * d + off + c])
                        .sum::<f64>();
                }
            }
        }

        let mut g = Graph::new();
        let tq = g.constant(q, vec![n, d]);
        let tk = g.constant(k, vec![n, d]);
        let tv = g.constant(v, vec![n, d]);
        let ty = g.attention(tq, tk, tv, heads).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(g.data(ty), &expect);
        worst = worst.max(diff);
        if diff > OP_TOL {
            return Err(format!("case {case} n={n} d={d} heads={heads}: diff {diff:.2e}"));
        }
    }
    Ok(format!("20 shapes, max diff {worst:.2e}"))
}

/// Bilinear upsample against the align-corners=false formula, 20+ shapes.
pub fn suite_bilinear(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(1..=7);
        let w = rng.gen_range(1..=7);
        let f = rng.gen_range(1..=4);
        let x = rand_vec(&mut rng, c * h * w);
        let (oh, ow) = (h * f, w * f);
        let mut expect = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = ((oy as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                    let sx = ((ox as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let y0 = sy.floor() as usize;
                    let x0 = sx.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
                    expect[(ch * oh + oy) * ow + ox] = (1.0 - wy) * (1.0 - wx)
                        * x[(ch * h + y0) * w + x0]
                        + (1.0 - wy) * wx * x[(ch * h + y0) * w + x1]
                        + wy * (1.0 - wx) * x[(ch * h + y1) * w + x0]
                        + wy * wx * x[(ch * h + y1) * w + x1];
                }
            }
        }
        let mut g = Graph::new();
        let tx = g.constant(x, vec![c, h, w]);
        let ty = g.bilinear_upsample(tx, f).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(g.data(ty), &expect);
        worst = worst.max(diff);
        if diff > OP_TOL {
            return Err(format!("case {case} c={c} {h}x{w} f={f}: diff {diff:.2e}"));
        }
    }
    Ok(format!("20 shapes, max diff {worst:.2e}"))
}

/// Tiny model variants (full, w/o SQT, trainable patch embed) used for
/// gradient checking.
pub fn grad_check_variants() -> Vec<(String, ModelConfig)> {
    let base = tiny_config();
    let mut no_sqt = base.clone();
    no_sqt.use_sqt = false;
    let mut patch = base.clone();
    patch.use_frozen_image_embedder = false;
    vec![
        ("tiny".into(), base),
        ("tiny-no-sqt".into(), no_sqt),
        ("tiny-patch-embed".into(), patch),
    ]
}

/// Finite-difference gradient checks on the three tiny variants.
pub fn suite_grad_check(seed: u64, tolerance: f64) -> Result<String, String> {
    let mut detail = String::new();
    for (name, cfg) in grad_check_variants() {
        let model = Model::new(cfg, seed).map_err(|e| e.to_string())?;
        let report = grad_check(&model, seed ^ 0xabcd, tolerance).map_err(|e: TrainError| e.to_string())?;
        if !report.passed {
            let failing: Vec<&str> = report
                .entries
                .iter()
                .filter(|e| !e.passed)
                .map(|e| e.name.as_str())
                .collect();
            return Err(format!(
                "{name}: max rel err {:.2e} > {tolerance:.0e}; failing: {}",
                report.max_rel_err,
                failing.join(", ")
            ));
        }
        let _ = write!(detail, "{name} {:.1e}  ", report.max_rel_err);
    }
    Ok(detail.trim_end().to_string())
}

/// Generator audits over `n` pairs: red-herring soundness, prompt-label
/// consistency, count bounds, and the occlusion-pruning oracle.
pub fn suite_generator(seed: u64, n: usize, config: &GenConfig) -> Result<String, String> {
    let bank = TemplateBank::builtin();
    let mut ledger = ClassBalanceLedger::default();
    let mut n_all_checked = 0usize;
    for i in 0..n {
        let sample_seed = crate::derive_seed(seed, i as u64);
        let is_all = i % 8 == 7;
        let (pair, trace) = generate_pair(sample_seed, is_all, &mut ledger, &bank, config)
            .map_err(|e| format!("pair {i}: {e}"))?;
        let meta = &pair.meta;

        // Count bounds.
        if meta.is_all {
            n_all_checked += 1;
            if !(config.all_min_removed..=config.all_max_removed).contains(&trace.change_masks.len()) {
                return Err(format!("pair {i}: 'all' removals {}", trace.change_masks.len()));
            }
        } else {
            if trace.change_masks.len() > config.max_change || trace.change_masks.is_empty() {
                return Err(format!("pair {i}: change count {}", trace.change_masks.len()));
            }
            if trace.red_herring_masks.len() > config.max_red_herrings {
                return Err(format!("pair {i}: red herrings {}", trace.red_herring_masks.len()));
            }
            if !(config.min_prompt_classes..=config.max_prompt_classes)
                .contains(&meta.classes_in_prompt.len())
            {
                return Err(format!("pair {i}: prompt classes {}", meta.classes_in_prompt.len()));
            }
            // Prompt-label consistency: every removed object's class is in
            // the prompt's class list.
            for (id, class) in &trace.change_classes {
                if !meta.classes_in_prompt.contains(class) {
                    return Err(format!(
                        "pair {i}: changed object {id} class {class:?} not in prompt classes"
                    ));
                }
            }
        }

        // Red-herring soundness on pre-affine images: pixels changed, label 0.
        for (id, m) in &trace.red_herring_masks {
            for y in 0..config.canvas {
                for x in 0..config.canvas {
                    if !m.get(x, y) {
                        continue;
                    }
                    if trace.pre_image_a.get(x, y) == trace.pre_image_b.get(x, y) {
                        return Err(format!(
                            "pair {i}: red herring {id} pixel ({x},{y}) identical across images"
                        ));
                    }
                    if trace.pre_label.get(x, y) {
                        return Err(format!(
                            "pair {i}: red herring {id} pixel ({x},{y}) inside label"
                        ));
                    }
                }
            }
        }

        // Occlusion pruning: recompute the post-affine label per object.
        let params = meta.affine.ok_or_else(|| format!("pair {i}: no affine params"))?;
        let expect = match params.target {
            crate::scenegen::AffineTarget::ImageB => {
                prune_label(&trace.change_masks, &params, config.tau_vis, config.canvas).0
            }
            crate::scenegen::AffineTarget::ImageA => trace.pre_label.clone(),
        };
        if expect.data != pair.label.data {
            return Err(format!("pair {i}: label differs from per-object warp oracle"));
        }
    }
    Ok(format!("{n} pairs audited ({n_all_checked} 'all'), 0 violations"))
}

/// Run every suite. `gen_pairs` controls audit size so callers can trade
/// time for coverage.
pub fn run_all(seed: u64, gen_pairs: usize) -> VerifyReport {
    let mut report = VerifyReport::default();
    report.push("matmul-oracle", suite_matmul(seed));
    report.push("conv-oracle", suite_conv(seed.wrapping_add(1)));
    report.push("attention-oracle", suite_attention(seed.wrapping_add(2)));
    report.push("bilinear-oracle", suite_bilinear(seed.wrapping_add(3)));
    report.push("grad-check", suite_grad_check(seed.wrapping_add(4), 1e-3));
    let mut cfg = GenConfig::default();
    cfg.canvas = 32;
    report.push(
        "generator-audit",
        suite_generator(seed.wrapping_add(5), gen_pairs, &cfg),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suites_pass() {
        suite_matmul(100).unwrap();
        suite_conv(101).unwrap();
        suite_attention(102).unwrap();
        suite_bilinear(103).unwrap();
    }

    #[test]
    fn generator_audit_small() {
        let mut cfg = GenConfig::default();
        cfg.canvas = 32;
        suite_generator(9, 24, &cfg).unwrap();
    }
}
