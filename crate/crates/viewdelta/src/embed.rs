//! Frozen text and image token producers, plus a binary token cache.
//!
//! The stubs stand in for large frozen encoders: outputs are pure functions
//! of their inputs and expose no trainable parameters. The cache file format
//! lets precomputed features from real encoders be imported offline.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fnv1a64;
use crate::img::Rgb8;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("image {h}x{w} not divisible by patch {patch}")]
    PatchDivisibility { h: usize, w: usize, patch: usize },
    #[error("t_max must be >= 1")]
    BadTmax,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad cache magic {0:?}, expected \"VDEC\"")]
    BadMagic([u8; 4]),
    #[error("cache version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated cache record")]
    Truncated,
}

/// Tokenized prompt. Rows past `valid_len` are exactly zero.
#[derive(Debug, Clone)]
pub struct TextTokens {
    /// [t_max, d_text], row-major.
    pub tokens: Vec<f64>,
    pub t_max: usize,
    pub d_text: usize,
    pub valid_len: usize,
}

/// Patch-grid image tokens.
#[derive(Debug, Clone)]
pub struct ImageTokens {
    /// [g, g, d_img], row-major.
    pub grid: Vec<f64>,
    pub g: usize,
    pub d_img: usize,
    pub source_hash: [u8; 32],
}

/// Deterministic unit-norm vector for one word: Box-Muller gaussians from a
/// ChaCha stream seeded by the 64-bit FNV hash of the word, then normalized.
/// Distinct words collide only if their 64-bit hashes do (p ~ n^2 / 2^65).
fn word_vector(word: &str, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word.as_bytes()));
    let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Reserved token emitted for the empty prompt.
const EMPTY_TOKEN: &str = "\u{1}empty\u{1}";

/// Whitespace-tokenize `prompt`; each word maps to a fixed unit-norm vector.
/// Truncates/pads to `t_max`; the tail stays zero.
pub fn embed_text_stub(prompt: &str, t_max: usize, d_text: usize) -> Result<TextTokens, EmbedError> {
    if t_max < 1 {
        return Err(EmbedError::BadTmax);
    }
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let words: Vec<&str> = if words.is_empty() { vec![EMPTY_TOKEN] } else { words };
    let valid_len = words.len().min(t_max);
    let mut tokens = vec![0.0; t_max * d_text];
    for (i, w) in words.iter().take(t_max).enumerate() {
        tokens[i * d_text..(i + 1) * d_text].copy_from_slice(&word_vector(w, d_text));
    }
    Ok(TextTokens { tokens, t_max, d_text, valid_len })
}

/// Seed string baked into the patch-statistics projection matrix.
const IMAGE_STUB_ID: &str = "viewdelta-image-stub-v1";

/// Per-patch 12-dim statistics (mean and std per channel, mean horizontal
/// and vertical finite difference per channel) projected to d_img by a fixed
/// seeded pseudo-random matrix. Pure function of the pixels.
pub fn embed_image_stub(image: &Rgb8, patch: usize, d_img: usize) -> Result<ImageTokens, EmbedError> {
    if patch == 0 || image.h % patch != 0 || image.w % patch != 0 {
        return Err(EmbedError::PatchDivisibility { h: image.h, w: image.w, patch });
    }
    let g = image.h / patch;
    let gw = image.w / patch;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(fnv1a64(IMAGE_STUB_ID.as_bytes()));
    let proj: Vec<f64> = (0..12 * d_img).map(|_| gaussian(&mut proj_rng) / (12.0f64).sqrt()).collect();

    let mut grid = vec![0.0; g * gw * d_img];
    for py in 0..g {
        for px in 0..gw {
            let mut stats = [0.0f64; 12];
            let n = (patch * patch) as f64;
            // channel means
            for c in 0..3 {
                let mut sum = 0.0;
                for y in 0..patch {
                    for x in 0..patch {
                        sum += image.get(px * patch + x, py * patch + y)[c] as f64 / 255.0;
                    }
                }
                stats[c] = sum / n;
            }
            // channel stds
            for c in 0..3 {
                let mut sq = 0.0;
                for y in 0..patch {
                    for x in 0..patch {
                        let v = image.get(px * patch + x, py * patch + y)[c] as f64 / 255.0 - stats[c];
                        sq += v * v;
                    }
                }
                stats[3 + c] = (sq / n).sqrt();
            }
            // mean finite differences, horizontal then vertical
            for c in 0..3 {
                let mut dh = 0.0;
                let mut dv = 0.0;
                for y in 0..patch {
                    for x in 0..patch.saturating_sub(1) {
                        dh += (image.get(px * patch + x + 1, py * patch + y)[c] as f64
                            - image.get(px * patch + x, py * patch + y)[c] as f64)
                            / 255.0;
                    }
                }
                for y in 0..patch.saturating_sub(1) {
                    for x in 0..patch {
                        dv += (image.get(px * patch + x, py * patch + y + 1)[c] as f64
                            - image.get(px * patch + x, py * patch + y)[c] as f64)
                            / 255.0;
                    }
                }
                let m = (patch * patch.saturating_sub(1)).max(1) as f64;
                stats[6 + c] = dh / m;
                stats[9 + c] = dv / m;
            }
            let out = &mut grid[(py * gw + px) * d_img..(py * gw + px + 1) * d_img];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &s) in stats.iter().enumerate() {
                    acc += s * proj[i * d_img + j];
                }
                *o = acc;
            }
        }
    }
    let mut hasher = Sha256::new();
    hasher.update(&image.data);
    Ok(ImageTokens {
        grid,
        g,
        d_img,
        source_hash: hasher.finalize().into(),
    })
}

// ---- embedding cache ----
//
// Little-endian file: magic "VDEC", u32 version (1), u8 dtype code
// (1 = f32, 2 = f64), then records of (key digest 32 bytes, rank u32,
// extents u64 x rank, raw row-major data).

const CACHE_MAGIC: [u8; 4] = *b"VDEC";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheDtype {
    F32,
    F64,
}

impl CacheDtype {
    fn code(self) -> u8 {
        match self {
            CacheDtype::F32 => 1,
            CacheDtype::F64 => 2,
        }
    }
    fn from_code(c: u8) -> Result<Self, EmbedError> {
        match c {
            1 => Ok(CacheDtype::F32),
            2 => Ok(CacheDtype::F64),
            other => Err(EmbedError::BadDtype(other)),
        }
    }
    fn width(self) -> usize {
        match self {
            CacheDtype::F32 => 4,
            CacheDtype::F64 => 8,
        }
    }
}

/// Cache key: digest of source content plus the embedder identity string,
/// so features from different embedders never alias.
pub fn cache_key(content: &[u8], embedder_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(content);
    h.update(embedder_id.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone)]
struct CacheEntry {
    key: [u8; 32],
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_cache(path: &Path) -> Result<(CacheDtype, Vec<CacheEntry>), EmbedError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 9 {
        return Err(EmbedError::Truncated);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != CACHE_MAGIC {
        return Err(EmbedError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(EmbedError::VersionMismatch { found: version, expected: CACHE_VERSION });
    }
    let dtype = CacheDtype::from_code(bytes[8])?;
    let mut entries = Vec::new();
    let mut off = 9;
    while off < bytes.len() {
        if off + 36 > bytes.len() {
            return Err(EmbedError::Truncated);
        }
        let key: [u8; 32] = bytes[off..off + 32].try_into().unwrap();
        let rank = u32::from_le_bytes(bytes[off + 32..off + 36].try_into().unwrap()) as usize;
        off += 36;
        if off + 8 * rank > bytes.len() {
            return Err(EmbedError::Truncated);
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(u64::from_le_bytes(bytes[off + 8 * i..off + 8 * i + 8].try_into().unwrap()) as usize);
        }
        off += 8 * rank;
        let n: usize = shape.iter().product();
        let nbytes = n * dtype.width();
        if off + nbytes > bytes.len() {
            return Err(EmbedError::Truncated);
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let s = off + i * dtype.width();
            data.push(match dtype {
                CacheDtype::F32 => f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as f64,
                CacheDtype::F64 => f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()),
            });
        }
        off += nbytes;
        entries.push(CacheEntry { key, shape, data });
    }
    Ok((dtype, entries))
}

fn write_cache(path: &Path, dtype: CacheDtype, entries: &[CacheEntry]) -> Result<(), EmbedError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&CACHE_MAGIC)?;
        f.write_all(&CACHE_VERSION.to_le_bytes())?;
        f.write_all(&[dtype.code()])?;
        for e in entries {
            f.write_all(&e.key)?;
            f.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &ext in &e.shape {
                f.write_all(&(ext as u64).to_le_bytes())?;
            }
            for &v in &e.data {
                match dtype {
                    CacheDtype::F32 => f.write_all(&(v as f32).to_le_bytes())?,
                    CacheDtype::F64 => f.write_all(&v.to_le_bytes())?,
                }
            }
        }
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Insert or replace one entry; rewrites the file atomically (temp + rename).
pub fn cache_store(
    path: &Path,
    key: &[u8; 32],
    shape: &[usize],
    data: &[f64],
    dtype: CacheDtype,
) -> Result<(), EmbedError> {
    let mut entries = if path.exists() {
        let (existing_dtype, e) = read_cache(path)?;
        if existing_dtype != dtype {
            return Err(EmbedError::BadDtype(dtype.code()));
        }
        e
    } else {
        Vec::new()
    };
    entries.retain(|e| &e.key != key);
    entries.push(CacheEntry {
        key: *key,
        shape: shape.to_vec(),
        data: data.to_vec(),
    });
    write_cache(path, dtype, &entries)
}

/// Look up one entry. A missing key is `Ok(None)`, not an error.
pub fn cache_load(path: &Path, key: &[u8; 32]) -> Result<Option<(Vec<usize>, Vec<f64>)>, EmbedError> {
    if !path.exists() {
        return Ok(None);
    }
    let (_, entries) = read_cache(path)?;
    Ok(entries
        .into_iter()
        .find(|e| &e.key == key)
        .map(|e| (e.shape, e.data)))
}
