//! The frozen embedder stubs and the on-disk embedding cache: embed a
//! prompt and an image, store both, and read them back by content hash.
//!
//! Run with: cargo run --example embed_cache

use viewdelta::embed::{
    cache_key, cache_load, cache_store, embed_image_stub, embed_text_stub, CacheDtype,
};
use viewdelta::img::Rgb8;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let cache = dir.path().join("embeddings.bin");

    // Text: fixed-width token matrix, padded with an empty token.
    let prompt = "highlight any changes to the red disk";
    let text = embed_text_stub(prompt, 16, 64)?;
    println!(
        "text tokens: {} x {} ({} valid)",
        text.t_max, text.d_text, text.valid_len
    );

    // Image: per-patch statistics projected to d_img dimensions; the grid
    // is keyed by the image's content hash, so identical pixels always hit
    // the same cache entry.
    let img = Rgb8::filled(64, 64, [180, 40, 40]);
    let grid = embed_image_stub(&img, 8, 64)?;
    println!("image grid: {}x{} patches of {} dims", grid.g, grid.g, grid.d_img);

    // Round-trip both through the cache.
    let tkey = cache_key(prompt.as_bytes(), "text-stub-v1");
    let ikey = cache_key(&img.data, "image-stub-v1");
    cache_store(&cache, &tkey, &[16, 64], &text.tokens, CacheDtype::F64)?;
    cache_store(&cache, &ikey, &[grid.g, grid.g, grid.d_img], &grid.grid, CacheDtype::F64)?;

    let (shape, data) = cache_load(&cache, &tkey)?.expect("text entry present");
    println!("loaded text entry: shape {shape:?}, {} values", data.len());
    let (shape, data) = cache_load(&cache, &ikey)?.expect("image entry present");
    println!("loaded image entry: shape {shape:?}, {} values", data.len());

    // A key that was never stored comes back as None, not an error.
    let missing = cache_key(b"never stored", "text-stub-v1");
    assert!(cache_load(&cache, &missing)?.is_none());
    println!("missing key -> None");
    Ok(())
}
