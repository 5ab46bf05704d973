//! Random affine view perturbation and occlusion pruning.
//!
//! Exactly one image of a pair is warped (fair coin). When image B is the
//! warped one the label and per-object change masks are warped in lockstep,
//! and any change object whose in-canvas visible fraction drops below
//! `tau_vis` is removed from the label entirely. Images are resampled
//! bilinearly, masks nearest-neighbor; off-canvas regions take the
//! background color.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::img::{Mask, Rgb8};
use crate::scenegen::{GenConfig, PairTrace, SamplePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffineTarget {
    ImageA,
    ImageB,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineParams {
    pub rot_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub target: AffineTarget,
}

impl AffineParams {
    pub fn identity(target: AffineTarget) -> Self {
        AffineParams { rot_deg: 0.0, tx: 0.0, ty: 0.0, scale: 1.0, target }
    }

    /// Map a destination pixel center back to its source coordinates
    /// (inverse of rotate+scale about the canvas center, then translate).
    #[inline]
    pub fn src_coords(&self, x: usize, y: usize, canvas: usize) -> (f64, f64) {
        let c = canvas as f64 / 2.0;
        let dx = x as f64 + 0.5 - c - self.tx;
        let dy = y as f64 + 0.5 - c - self.ty;
        let th = -self.rot_deg.to_radians();
        let (sin, cos) = th.sin_cos();
        let inv_s = 1.0 / self.scale;
        let sx = (dx * cos - dy * sin) * inv_s + c - 0.5;
        let sy = (dx * sin + dy * cos) * inv_s + c - 0.5;
        (sx, sy)
    }
}

/// Bilinear warp; pixels sampling outside the canvas take `fill`.
pub fn warp_image(image: &Rgb8, params: &AffineParams, fill: [u8; 3]) -> Rgb8 {
    let canvas = image.w;
    let mut out = Rgb8::filled(canvas, canvas, fill);
    let hi = (canvas - 1) as f64;
    for y in 0..canvas {
        for x in 0..canvas {
            let (sx, sy) = params.src_coords(x, y, canvas);
            if sx < -0.5 || sy < -0.5 || sx > hi + 0.5 || sy > hi + 0.5 {
                continue;
            }
            let cx = sx.clamp(0.0, hi);
            let cy = sy.clamp(0.0, hi);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(canvas - 1);
            let y1 = (y0 + 1).min(canvas - 1);
            let (wx, wy) = (cx - x0 as f64, cy - y0 as f64);
            let mut c = [0u8; 3];
            for ch in 0..3 {
                let v = (1.0 - wy) * (1.0 - wx) * image.get(x0, y0)[ch] as f64
                    + (1.0 - wy) * wx * image.get(x1, y0)[ch] as f64
                    + wy * (1.0 - wx) * image.get(x0, y1)[ch] as f64
                    + wy * wx * image.get(x1, y1)[ch] as f64;
                c[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, c);
        }
    }
    out
}

/// Nearest-neighbor warp; off-canvas samples are 0.
pub fn warp_mask(mask: &Mask, params: &AffineParams) -> Mask {
    let canvas = mask.w;
    let mut out = Mask::zeros(canvas, canvas);
    for y in 0..canvas {
        for x in 0..canvas {
            let (sx, sy) = params.src_coords(x, y, canvas);
            let ix = sx.round();
            let iy = sy.round();
            if ix < 0.0 || iy < 0.0 || ix >= canvas as f64 || iy >= canvas as f64 {
                continue;
            }
            if mask.get(ix as usize, iy as usize) {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Recompute the post-affine label: warp every pre-affine change mask, drop
/// those whose visible fraction fell below `tau_vis`, union the survivors.
/// This is the rule the generator applies; it doubles as the audit oracle.
pub fn prune_label(
    change_masks: &[(usize, Mask)],
    params: &AffineParams,
    tau_vis: f64,
    canvas: usize,
) -> (Mask, Vec<usize>) {
    let mut label = Mask::zeros(canvas, canvas);
    let mut survivors = Vec::new();
    for (id, m) in change_masks {
        let warped = warp_mask(m, params);
        let orig = m.count();
        if orig == 0 {
            continue;
        }
        let frac = warped.count() as f64 / orig as f64;
        if frac < tau_vis {
            continue;
        }
        label.union_with(&warped);
        survivors.push(*id);
    }
    (label, survivors)
}

/// Sample an affine perturbation, apply it to one image of the pair, and
/// prune the label when image B was the transformed one.
pub fn apply_affine_and_prune<R: Rng>(
    mut pair: SamplePair,
    trace: PairTrace,
    rng: &mut R,
    config: &GenConfig,
) -> (SamplePair, PairTrace) {
    let canvas = config.canvas;
    let params = AffineParams {
        rot_deg: rng.gen_range(-config.rot_deg..=config.rot_deg),
        tx: rng.gen_range(-config.trans_frac..=config.trans_frac) * canvas as f64,
        ty: rng.gen_range(-config.trans_frac..=config.trans_frac) * canvas as f64,
        scale: rng.gen_range(config.scale_min..=config.scale_max),
        target: if rng.gen::<bool>() { AffineTarget::ImageB } else { AffineTarget::ImageA },
    };
    match params.target {
        AffineTarget::ImageA => {
            pair.image_a = warp_image(&pair.image_a, &params, pair.meta.bg_color);
        }
        AffineTarget::ImageB => {
            pair.image_b = warp_image(&pair.image_b, &params, pair.meta.bg_color);
            let (label, survivors) = prune_label(&trace.change_masks, &params, config.tau_vis, canvas);
            pair.label = label;
            pair.meta.change_ids = survivors;
        }
    }
    pair.meta.affine = Some(params);
    (pair, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_is_exact() {
        let mut img = Rgb8::filled(16, 16, [10, 20, 30]);
        img.set(3, 5, [200, 100, 50]);
        let id = AffineParams::identity(AffineTarget::ImageB);
        let warped = warp_image(&img, &id, [0, 0, 0]);
        assert_eq!(warped.data, img.data);
        let mut m = Mask::zeros(16, 16);
        m.set(3, 5, true);
        m.set(10, 12, true);
        assert_eq!(warp_mask(&m, &id).data, m.data);
    }

    #[test]
    fn full_translation_out_of_frame_drops_object() {
        let mut m = Mask::zeros(32, 32);
        for y in 2..6 {
            for x in 2..6 {
                m.set(x, y, true);
            }
        }
        let params = AffineParams {
            rot_deg: 0.0,
            tx: 40.0,
            ty: 40.0,
            scale: 1.0,
            target: AffineTarget::ImageB,
        };
        let (label, survivors) = prune_label(&[(0, m)], &params, 0.5, 32);
        assert!(label.is_empty());
        assert!(survivors.is_empty());
    }

    #[test]
    fn pure_translation_moves_mask() {
        let mut m = Mask::zeros(32, 32);
        m.set(10, 10, true);
        let params = AffineParams {
            rot_deg: 0.0,
            tx: 3.0,
            ty: -2.0,
            scale: 1.0,
            target: AffineTarget::ImageB,
        };
        let w = warp_mask(&m, &params);
        assert!(w.get(13, 8));
        assert_eq!(w.count(), 1);
    }
}
