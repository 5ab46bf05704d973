//! Synthetic change-pair generator.
//!
//! Each sample starts from a procedural scene (value-noise background plus
//! 6–14 colored shapes). Image B is derived from image A by removing some
//! object instances and filling the hole with background plus low-amplitude
//! artifact noise. Instances whose class appears in the prompt form the
//! change label; instances of other classes may be removed as red herrings
//! that change pixels without entering the label. A random affine transform
//! is then applied to one of the two images, pruning change objects that
//! fall mostly out of frame.

mod affine;
mod dataset;
mod prompts;

pub use affine::{apply_affine_and_prune, prune_label, warp_image, warp_mask, AffineParams, AffineTarget};
pub use dataset::{generate_dataset, DatasetManifest, DatasetStats, ManifestRecord};
pub use prompts::{make_all_prompt, make_class_prompt, TemplateBank};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::img::{Mask, Rgb8};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("scene has no objects")]
    EmptyScene,
    #[error("no instance of any prompt class after {0} retries")]
    RetriesExhausted(usize),
    #[error("scene has {0} objects, 'all' pairs need at least 5")]
    TooFewObjects(usize),
    #[error("template bank is empty")]
    EmptyBank,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

/// Generator configuration. Defaults mirror the documented ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Least-represented classes chosen per prompt, inclusive range.
    pub min_prompt_classes: usize,
    pub max_prompt_classes: usize,
    /// Distinct classes considered per scene.
    pub class_cap: usize,
    /// Colors drawn from the first `color_cap` vocabulary entries; clamped to
    /// the vocabulary size. Small caps make toy sets with few classes.
    pub color_cap: usize,
    /// Shapes drawn from the first `shape_cap` vocabulary entries.
    pub shape_cap: usize,
    /// Object radius bounds as fractions of the canvas side.
    pub min_radius_frac: f64,
    pub max_radius_frac: f64,
    pub min_change: usize,
    pub max_change: usize,
    /// Red herrings per change pair, inclusive range. The minimum is best
    /// effort: scenes with no non-prompt object yield zero herrings.
    pub min_red_herrings: usize,
    pub max_red_herrings: usize,
    pub all_min_removed: usize,
    pub all_max_removed: usize,
    /// Visible-fraction threshold below which a warped change mask is dropped.
    pub tau_vis: f64,
    /// Amplitude of the inpainting artifact noise, in 8-bit counts.
    pub artifact_amp: u8,
    /// Probability of emitting raw comma-joined class names instead of a template.
    pub p_raw: f64,
    pub rot_deg: f64,
    pub trans_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            canvas: 64,
            min_objects: 6,
            max_objects: 14,
            min_prompt_classes: 1,
            max_prompt_classes: 5,
            class_cap: 10,
            color_cap: COLORS.len(),
            shape_cap: SHAPES.len(),
            min_radius_frac: 1.0 / 13.0,
            max_radius_frac: 1.0 / 6.5,
            min_change: 1,
            max_change: 10,
            min_red_herrings: 0,
            max_red_herrings: 10,
            all_min_removed: 5,
            all_max_removed: 10,
            tau_vis: 0.5,
            artifact_amp: 2,
            p_raw: 0.5,
            rot_deg: 10.0,
            trans_frac: 0.1,
            scale_min: 0.9,
            scale_max: 1.1,
            max_retries: 8,
        }
    }
}

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [203, 52, 46]),
    ("green", [56, 158, 60]),
    ("blue", [48, 92, 198]),
    ("yellow", [216, 198, 44]),
    ("purple", [142, 58, 178]),
    ("orange", [226, 130, 36]),
    ("cyan", [52, 186, 192]),
    ("white", [238, 238, 232]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Ring,
    Blob,
}

pub const SHAPES: [(ShapeKind, &str); 5] = [
    (ShapeKind::Disk, "disk"),
    (ShapeKind::Rectangle, "rectangle"),
    (ShapeKind::Triangle, "triangle"),
    (ShapeKind::Ring, "ring"),
    (ShapeKind::Blob, "blob"),
];

/// The full class vocabulary: every color/shape combination.
pub fn vocabulary() -> Vec<String> {
    let mut v = Vec::with_capacity(COLORS.len() * SHAPES.len());
    for (color, _) in COLORS {
        for (_, shape) in SHAPES {
            v.push(format!("{color} {shape}"));
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct ObjectInstance {
    pub id: usize,
    pub class_name: String,
    pub shape: ShapeKind,
    /// Visible region (pixels where this object is topmost).
    pub mask: Mask,
    pub color: [u8; 3],
    pub texture_seed: u64,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub bg_color: [u8; 3],
    pub bg_noise_seed: u64,
    pub objects: Vec<ObjectInstance>,
}

/// Persistent class usage counts driving least-represented selection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassBalanceLedger {
    counts: std::collections::BTreeMap<String, u64>,
}

impl ClassBalanceLedger {
    pub fn count(&self, class: &str) -> u64 {
        self.counts.get(class).copied().unwrap_or(0)
    }

    pub fn bump(&mut self, class: &str) {
        *self.counts.entry(class.to_string()).or_insert(0) += 1;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMeta {
    pub is_all: bool,
    pub change_ids: Vec<usize>,
    pub red_herring_ids: Vec<usize>,
    pub classes_in_prompt: Vec<String>,
    pub affine: Option<AffineParams>,
    pub bg_color: [u8; 3],
    pub seed: u64,
}

/// One training/eval unit.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub image_a: Rgb8,
    pub image_b: Rgb8,
    pub prompt: String,
    pub label: Mask,
    pub meta: PairMeta,
}

/// Intermediate inspection data kept alongside a generated pair so audits
/// can recompute the label and the red-herring property independently.
#[derive(Debug, Clone)]
pub struct PairTrace {
    /// Pre-affine images, exactly as inpainted.
    pub pre_image_a: Rgb8,
    pub pre_image_b: Rgb8,
    /// Pre-affine visible mask per change object.
    pub change_masks: Vec<(usize, Mask)>,
    /// Pre-affine visible mask per red herring.
    pub red_herring_masks: Vec<(usize, Mask)>,
    /// Class name of each removed (change) object.
    pub change_classes: Vec<(usize, String)>,
    pub pre_label: Mask,
}

// ---- scene rendering ----

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Smooth value-noise field in [-1, 1]: a coarse random lattice, bilinearly
/// interpolated across the canvas.
fn value_noise(seed: u64, canvas: usize, cells: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut field = vec![0.0; canvas * canvas];
    for y in 0..canvas {
        for x in 0..canvas {
            let fx = x as f64 / canvas as f64 * cells as f64;
            let fy = y as f64 / canvas as f64 * cells as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(cells), (y0 + 1).min(cells));
            let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
            field[y * canvas + x] = (1.0 - wy)
                * ((1.0 - wx) * lattice[y0 * n + x0] + wx * lattice[y0 * n + x1])
                + wy * ((1.0 - wx) * lattice[y1 * n + x0] + wx * lattice[y1 * n + x1]);
        }
    }
    field
}

/// Background pixel at (x, y): base color plus smooth noise, clamped.
pub fn background_pixel(bg_color: [u8; 3], noise: &[f64], canvas: usize, x: usize, y: usize) -> [u8; 3] {
    let v = noise[y * canvas + x] * 18.0;
    let mut c = [0u8; 3];
    for i in 0..3 {
        c[i] = (bg_color[i] as f64 + v).clamp(0.0, 255.0) as u8;
    }
    c
}

pub fn render_background(spec_seed: u64, bg_color: [u8; 3], canvas: usize) -> Rgb8 {
    let noise = value_noise(spec_seed, canvas, 6);
    let mut img = Rgb8::filled(canvas, canvas, bg_color);
    for y in 0..canvas {
        for x in 0..canvas {
            img.set(x, y, background_pixel(bg_color, &noise, canvas, x, y));
        }
    }
    img
}

fn rasterize_shape(kind: ShapeKind, cx: f64, cy: f64, r: f64, rot: f64, canvas: usize, blob_seed: u64) -> Mask {
    let mut m = Mask::zeros(canvas, canvas);
    let (sin, cos) = rot.sin_cos();
    // blob: disk with radius modulated by a few harmonics
    let mut blob_coef = [0.0f64; 3];
    let mut blob_phase = [0.0f64; 3];
    if kind == ShapeKind::Blob {
        let mut rng = ChaCha8Rng::seed_from_u64(blob_seed);
        for i in 0..3 {
            blob_coef[i] = rng.gen_range(0.08..0.3);
            blob_phase[i] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
    }
    let lo_x = (cx - 1.6 * r).floor().max(0.0) as usize;
    let hi_x = ((cx + 1.6 * r).ceil() as usize).min(canvas.saturating_sub(1));
    let lo_y = (cy - 1.6 * r).floor().max(0.0) as usize;
    let hi_y = ((cy + 1.6 * r).ceil() as usize).min(canvas.saturating_sub(1));
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // rotate into shape frame
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let inside = match kind {
                ShapeKind::Disk => u * u + v * v <= r * r,
                ShapeKind::Rectangle => u.abs() <= r && v.abs() <= 0.62 * r,
                ShapeKind::Triangle => {
                    // upright triangle with apex at (0, -r)
                    let vv = v + r * 0.5;
                    vv >= 0.0 && vv <= 1.5 * r && u.abs() <= (vv / 1.5 / r) * r * 1.1
                }
                ShapeKind::Ring => {
                    let d2 = u * u + v * v;
                    d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
                }
                ShapeKind::Blob => {
                    let ang = v.atan2(u);
                    let mut rr = 1.0;
                    for i in 0..3 {
                        rr += blob_coef[i] * ((i as f64 + 2.0) * ang + blob_phase[i]).sin();
                    }
                    u * u + v * v <= (r * rr) * (r * rr)
                }
            };
            if inside {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Deterministic render of one scene. Objects are drawn back-to-front; the
/// stored per-object mask is the visible (topmost) region.
pub fn render_scene(seed: u64, config: &GenConfig) -> (SceneSpec, Rgb8) {
    let canvas = config.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_color = [
        rng.gen_range(55..115) as u8,
        rng.gen_range(55..115) as u8,
        rng.gen_range(55..115) as u8,
    ];
    let bg_noise_seed = derive_seed(seed, 0xb6);
    let noise = value_noise(bg_noise_seed, canvas, 6);
    let mut img = Rgb8::filled(canvas, canvas, bg_color);
    for y in 0..canvas {
        for x in 0..canvas {
            img.set(x, y, background_pixel(bg_color, &noise, canvas, x, y));
        }
    }

    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);
    let vocab_colors = &COLORS[..config.color_cap.clamp(1, COLORS.len())];
    let vocab_shapes = &SHAPES[..config.shape_cap.clamp(1, SHAPES.len())];
    // ownership[pixel] = index of topmost object, or usize::MAX
    let mut ownership = vec![usize::MAX; canvas * canvas];
    let mut full_masks: Vec<Mask> = Vec::with_capacity(n_objects);
    let mut drafts = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let (color_name, color) = vocab_colors[rng.gen_range(0..vocab_colors.len())];
        let (shape, shape_name) = vocab_shapes[rng.gen_range(0..vocab_shapes.len())];
        let texture_seed = derive_seed(seed, 0x100 + i as u64);
        // keep earlier objects at least partially visible: retry placement
        let mut placed: Option<Mask> = None;
        for _try in 0..24 {
            let r = rng.gen_range(
                canvas as f64 * config.min_radius_frac..canvas as f64 * config.max_radius_frac,
            );
            let cx = rng.gen_range(r..canvas as f64 - r);
            let cy = rng.gen_range(r..canvas as f64 - r);
            let rot = rng.gen_range(0.0..std::f64::consts::TAU);
            let m = rasterize_shape(shape, cx, cy, r, rot, canvas, texture_seed);
            if m.is_empty() {
                continue;
            }
            // would this placement hide any earlier object almost entirely?
            let mut ok = true;
            for (j, fm) in full_masks.iter().enumerate() {
                let visible_now = ownership.iter().filter(|&&o| o == j).count();
                let covered = fm
                    .data
                    .iter()
                    .zip(&m.data)
                    .enumerate()
                    .filter(|(p, (&a, &b))| a != 0 && b != 0 && ownership[*p] == j)
                    .count();
                if visible_now > 0 && (visible_now - covered) * 100 < visible_now * 25 {
                    ok = false;
                    break;
                }
            }
            if ok {
                placed = Some(m);
                break;
            }
        }
        let m = match placed {
            Some(m) => m,
            None => continue, // could not place without erasing earlier objects
        };
        for (p, &v) in m.data.iter().enumerate() {
            if v != 0 {
                ownership[p] = full_masks.len();
            }
        }
        full_masks.push(m);
        drafts.push((format!("{color_name} {shape_name}"), shape, color, texture_seed));
    }

    // paint objects and collect visible masks
    let mut objects = Vec::with_capacity(drafts.len());
    for (idx, (class_name, shape, color, texture_seed)) in drafts.into_iter().enumerate() {
        let mut visible = Mask::zeros(canvas, canvas);
        let mut tex = ChaCha8Rng::seed_from_u64(texture_seed);
        for y in 0..canvas {
            for x in 0..canvas {
                if ownership[y * canvas + x] == idx {
                    visible.set(x, y, true);
                    let jitter = gaussian(&mut tex) * 6.0;
                    let mut c = [0u8; 3];
                    for ch in 0..3 {
                        c[ch] = (color[ch] as f64 + jitter).clamp(0.0, 255.0) as u8;
                    }
                    img.set(x, y, c);
                } else {
                    // keep the texture stream position independent of ownership
                    let _ = gaussian(&mut tex);
                }
            }
        }
        if visible.is_empty() {
            continue;
        }
        objects.push(ObjectInstance {
            id: objects.len(),
            class_name,
            shape,
            mask: visible,
            color,
            texture_seed,
        });
    }
    (
        SceneSpec { seed, bg_color, bg_noise_seed, objects },
        img,
    )
}

// ---- class proposal ----

/// Distinct classes present in the scene, lexicographic, capped.
pub fn scene_classes(scene: &SceneSpec, cap: usize) -> Vec<String> {
    let mut classes: Vec<String> = scene.objects.iter().map(|o| o.class_name.clone()).collect();
    classes.sort();
    classes.dedup();
    classes.truncate(cap);
    classes
}

/// Pick the `k` least-represented classes present in the scene; ties break
/// lexicographically. Updates the ledger.
pub fn propose_classes_k(
    scene: &SceneSpec,
    ledger: &mut ClassBalanceLedger,
    k: usize,
    cap: usize,
) -> Result<Vec<String>, GenError> {
    if scene.objects.is_empty() {
        return Err(GenError::EmptyScene);
    }
    let mut classes = scene_classes(scene, cap);
    // stable by count then name: classes are already lexicographic
    classes.sort_by_key(|c| ledger.count(c));
    classes.truncate(k.max(1).min(classes.len()));
    for c in &classes {
        ledger.bump(c);
    }
    classes.sort();
    Ok(classes)
}

/// Random-k wrapper over [`propose_classes_k`], k uniform in the configured range.
pub fn propose_classes<R: Rng>(
    scene: &SceneSpec,
    ledger: &mut ClassBalanceLedger,
    rng: &mut R,
    config: &GenConfig,
) -> Result<Vec<String>, GenError> {
    let k = rng.gen_range(config.min_prompt_classes..=config.max_prompt_classes);
    propose_classes_k(scene, ledger, k, config.class_cap)
}

// ---- change synthesis ----

/// Remove `objects` from `image`: fill their visible pixels with background
/// plus artifact noise, guaranteeing the pixel actually changes.
fn inpaint(
    image: &Rgb8,
    scene: &SceneSpec,
    objects: &[&ObjectInstance],
    amp: u8,
    noise_seed: u64,
    canvas: usize,
) -> Rgb8 {
    let noise = value_noise(scene.bg_noise_seed, canvas, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut out = image.clone();
    for obj in objects {
        for y in 0..canvas {
            for x in 0..canvas {
                if obj.mask.get(x, y) {
                    let mut c = background_pixel(scene.bg_color, &noise, canvas, x, y);
                    for ch in 0..3 {
                        let d = rng.gen_range(-(amp as i16)..=amp as i16);
                        c[ch] = (c[ch] as i16 + d).clamp(0, 255) as u8;
                    }
                    if c == out.get(x, y) {
                        // the defining property of an inpainted pixel is that it differs
                        c[0] = if c[0] >= 128 { c[0] - 1 } else { c[0] + 1 };
                    }
                    out.set(x, y, c);
                }
            }
        }
    }
    out
}

fn sample_subset<'a, R: Rng>(
    rng: &mut R,
    pool: &[&'a ObjectInstance],
    count: usize,
) -> Vec<&'a ObjectInstance> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx.sort_unstable(); // deterministic id order in metadata
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Build a prompted change pair: remove 1..=max_change instances of the
/// prompt classes (the label) and min..=max_red_herrings instances of other
/// classes (pixels change, label does not).
pub fn synthesize_change_pair<R: Rng>(
    scene: &SceneSpec,
    image: &Rgb8,
    classes: &[String],
    bank: &TemplateBank,
    rng: &mut R,
    config: &GenConfig,
) -> Result<(SamplePair, PairTrace), GenError> {
    if classes.is_empty() {
        return Err(GenError::EmptyScene);
    }
    let canvas = config.canvas;
    let in_prompt: Vec<&ObjectInstance> = scene
        .objects
        .iter()
        .filter(|o| classes.contains(&o.class_name))
        .collect();
    if in_prompt.is_empty() {
        return Err(GenError::RetriesExhausted(0));
    }
    let others: Vec<&ObjectInstance> = scene
        .objects
        .iter()
        .filter(|o| !classes.contains(&o.class_name))
        .collect();

    let n_change = rng.gen_range(config.min_change.max(1)..=config.max_change.min(in_prompt.len()).max(1));
    let change = sample_subset(rng, &in_prompt, n_change.min(in_prompt.len()));
    let n_red = if others.is_empty() {
        0
    } else {
        let hi = config.max_red_herrings.min(others.len());
        rng.gen_range(config.min_red_herrings.min(hi)..=hi)
    };
    let red = sample_subset(rng, &others, n_red);

    let mut removed: Vec<&ObjectInstance> = change.clone();
    removed.extend(red.iter().copied());
    let image_b = inpaint(image, scene, &removed, config.artifact_amp, derive_seed(scene.seed, 0xf111), canvas);

    let mut label = Mask::zeros(canvas, canvas);
    for o in &change {
        label.union_with(&o.mask);
    }
    let prompt = make_class_prompt(classes, bank, rng, config.p_raw)?;
    let pair = SamplePair {
        image_a: image.clone(),
        image_b: image_b.clone(),
        prompt,
        label: label.clone(),
        meta: PairMeta {
            is_all: false,
            change_ids: change.iter().map(|o| o.id).collect(),
            red_herring_ids: red.iter().map(|o| o.id).collect(),
            classes_in_prompt: classes.to_vec(),
            affine: None,
            bg_color: scene.bg_color,
            seed: scene.seed,
        },
    };
    let trace = PairTrace {
        pre_image_a: image.clone(),
        pre_image_b: image_b,
        change_masks: change.iter().map(|o| (o.id, o.mask.clone())).collect(),
        red_herring_masks: red.iter().map(|o| (o.id, o.mask.clone())).collect(),
        change_classes: change.iter().map(|o| (o.id, o.class_name.clone())).collect(),
        pre_label: label,
    };
    Ok((pair, trace))
}

/// Build an "all" pair: remove 5–10 instances regardless of class; the label
/// is the union of everything removed and red herrings do not apply.
pub fn synthesize_all_pair<R: Rng>(
    scene: &SceneSpec,
    image: &Rgb8,
    bank: &TemplateBank,
    rng: &mut R,
    config: &GenConfig,
) -> Result<(SamplePair, PairTrace), GenError> {
    let canvas = config.canvas;
    if scene.objects.len() < config.all_min_removed {
        return Err(GenError::TooFewObjects(scene.objects.len()));
    }
    let pool: Vec<&ObjectInstance> = scene.objects.iter().collect();
    let n = rng.gen_range(config.all_min_removed..=config.all_max_removed.min(pool.len()));
    let removed = sample_subset(rng, &pool, n);
    let image_b = inpaint(image, scene, &removed, config.artifact_amp, derive_seed(scene.seed, 0xa11), canvas);
    let mut label = Mask::zeros(canvas, canvas);
    for o in &removed {
        label.union_with(&o.mask);
    }
    let prompt = make_all_prompt(bank, rng)?;
    let pair = SamplePair {
        image_a: image.clone(),
        image_b: image_b.clone(),
        prompt,
        label: label.clone(),
        meta: PairMeta {
            is_all: true,
            change_ids: removed.iter().map(|o| o.id).collect(),
            red_herring_ids: Vec::new(),
            classes_in_prompt: Vec::new(),
            affine: None,
            bg_color: scene.bg_color,
            seed: scene.seed,
        },
    };
    let trace = PairTrace {
        pre_image_a: image.clone(),
        pre_image_b: image_b,
        change_masks: removed.iter().map(|o| (o.id, o.mask.clone())).collect(),
        red_herring_masks: Vec::new(),
        change_classes: removed.iter().map(|o| (o.id, o.class_name.clone())).collect(),
        pre_label: label,
    };
    Ok((pair, trace))
}

/// Generate one complete sample (scene → change synthesis → affine) from a
/// single seed. `is_all` selects the pair flavor.
pub fn generate_pair(
    seed: u64,
    is_all: bool,
    ledger: &mut ClassBalanceLedger,
    bank: &TemplateBank,
    config: &GenConfig,
) -> Result<(SamplePair, PairTrace), GenError> {
    let mut last_err = GenError::RetriesExhausted(config.max_retries);
    for attempt in 0..config.max_retries.max(1) {
        let scene_seed = derive_seed(seed, attempt as u64);
        let (scene, image) = render_scene(scene_seed, config);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9000 + attempt as u64));
        let drafted = if is_all {
            synthesize_all_pair(&scene, &image, bank, &mut rng, config)
        } else {
            match propose_classes(&scene, ledger, &mut rng, config) {
                Ok(classes) => synthesize_change_pair(&scene, &image, &classes, bank, &mut rng, config),
                Err(e) => Err(e),
            }
        };
        match drafted {
            Ok((pair, trace)) => {
                return Ok(apply_affine_and_prune(pair, trace, &mut rng, config));
            }
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}
