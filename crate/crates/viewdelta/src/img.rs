//! 8-bit RGB images and binary masks, plus PNG IO.

use std::path::Path;

use anyhow::{Context, Result};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>, // 3 * w * h
}

impl Rgb8 {
    pub fn filled(w: usize, h: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * w * h);
        for _ in 0..w * h {
            data.extend_from_slice(&color);
        }
        Rgb8 { w, h, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.w + x);
        self.data[i] = c[0];
        self.data[i + 1] = c[1];
        self.data[i + 2] = c[2];
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.data.clone())
            .context("rgb buffer size mismatch")?;
        img.save(path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_rgb8();
        Ok(Rgb8 {
            w: img.width() as usize,
            h: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// Binary mask; stored values are 0 or 1, serialized as {0, 255} grayscale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>, // w * h, each 0 or 1
}

impl Mask {
    pub fn zeros(w: usize, h: usize) -> Self {
        Mask { w, h, data: vec![0; w * h] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union_with(&mut self, other: &Mask) {
        debug_assert_eq!((self.w, self.h), (other.w, other.h));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a & b != 0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, buf)
            .context("mask buffer size mismatch")?;
        img.save(path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_luma8();
        Ok(Mask {
            w: img.width() as usize,
            h: img.height() as usize,
            data: img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect(),
        })
    }
}
