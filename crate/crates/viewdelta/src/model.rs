//! The change-detection network: two images and a prompt in, one mask of
//! logits out.
//!
//! Token pipeline: embed both images and the prompt, project each modality
//! to the model width, concatenate as [Ia | Ib | T | SQT], add a learned
//! positional table, apply a tokenwise MLP, run the transformer encoder,
//! then feed only the trailing segmentation query tokens to a five-layer
//! convolutional head that upsamples back to full image resolution.
//!
//! Ablation switches: `use_sqt = false` feeds the image token segments to
//! the head instead; `use_prompts = false` drops the text segment entirely;
//! `use_frozen_image_embedder = false` swaps the frozen image stub for a
//! trainable linear patch embedding.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{embed_image_stub, embed_text_stub, EmbedError};
use crate::img::{Mask, Rgb8};
use crate::tensor::{Graph, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("input image is {got_w}x{got_h}, config expects {want}x{want}")]
    BadImageSize { got_w: usize, got_h: usize, want: usize },
    #[error("prompt required unless use_prompts is disabled")]
    MissingPrompt,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch: usize,
    pub d_text: usize,
    pub d_img: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub n_sqt: usize,
    pub t_max: usize,
    pub head_channels: usize,
    pub use_frozen_image_embedder: bool,
    pub use_sqt: bool,
    pub use_prompts: bool,
    /// Probability threshold for binarizing sigmoid(logits).
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 64,
            patch: 8,
            d_text: 64,
            d_img: 64,
            d_model: 128,
            layers: 4,
            heads: 4,
            mlp_dim: 512,
            n_sqt: 64,
            t_max: 16,
            head_channels: 32,
            use_frozen_image_embedder: true,
            use_sqt: true,
            use_prompts: true,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    /// Patch-grid side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Total sequence length under the current variant flags.
    pub fn seq_len(&self) -> usize {
        let g2 = self.grid() * self.grid();
        2 * g2
            + if self.use_prompts { self.t_max } else { 0 }
            + if self.use_sqt { self.n_sqt } else { 0 }
    }

    /// Bilinear factor of the segmentation head: grid → 2·grid → ×f → side.
    pub fn upsample_factor(&self) -> usize {
        self.image_side / (2 * self.grid())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::BadConfig(m));
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return fail(format!("image_side {} not divisible by patch {}", self.image_side, self.patch));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        let g = self.grid();
        if self.use_sqt && self.n_sqt != g * g {
            return fail(format!("n_sqt {} must equal grid^2 = {}", self.n_sqt, g * g));
        }
        if 2 * g == 0 || self.image_side % (2 * g) != 0 {
            return fail(format!("head geometry: image_side {} not a multiple of 2*grid {}", self.image_side, 2 * g));
        }
        if self.t_max == 0 && self.use_prompts {
            return fail("t_max must be >= 1 when prompts are enabled".into());
        }
        if self.layers == 0 || self.d_model == 0 || self.mlp_dim == 0 || self.head_channels == 0 {
            return fail("layers, d_model, mlp_dim, head_channels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold {} outside [0,1]", self.threshold));
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Ordered collection of trainable parameters. Iteration order is the
/// insertion order, which is a pure function of the config, so seeds,
/// checkpoints and optimizer state all line up.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate param {name}");
        self.names.push(name.to_string());
        self.params.push(Param { data, shape });
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.names.iter().map(|s| s.as_str()).zip(self.params.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.names.iter().map(|s| s.as_str()).zip(self.params.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }
}

/// Parameter leaves bound into one graph for a forward/backward pass.
pub struct BoundParams {
    names: Vec<String>,
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        self.ids[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> + '_ {
        self.names.iter().map(|s| s.as_str()).zip(self.ids.iter().copied())
    }
}

/// Token segment layout of one forward pass, for conformance checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    /// (segment name, start row, row count) in concatenation order.
    pub segments: Vec<(&'static str, usize, usize)>,
    pub seq_len: usize,
    /// Start row of the slice fed to the segmentation head (SQT variant).
    pub head_slice_start: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
    pub step: u64,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Model {
    /// Seed-deterministic initialization: linear weights are scaled normal
    /// (1/sqrt(fan_in)), embeddings/SQT/positional 0.02-scaled normal,
    /// norms identity, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = config.d_model;
        let linear = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            p.insert(
                &format!("{name}.w"),
                vec![fan_in, fan_out],
                (0..fan_in * fan_out).map(|_| gaussian(rng) * s).collect(),
            );
            p.insert(&format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]);
        };
        let emb = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| gaussian(rng) * 0.02).collect() };

        if config.use_frozen_image_embedder {
            linear(&mut params, &mut rng, "proj_img", config.d_img, d);
        } else {
            linear(&mut params, &mut rng, "patch_embed", config.patch * config.patch * 3, d);
        }
        if config.use_prompts {
            linear(&mut params, &mut rng, "proj_text", config.d_text, d);
        }
        if config.use_sqt {
            params.insert("sqt", vec![config.n_sqt, d], emb(&mut rng, config.n_sqt * d));
        }
        let seq = config.seq_len();
        params.insert("pos_emb", vec![seq, d], emb(&mut rng, seq * d));
        linear(&mut params, &mut rng, "pre_mlp.0", d, d);
        linear(&mut params, &mut rng, "pre_mlp.1", d, d);
        for l in 0..config.layers {
            params.insert(&format!("block{l}.ln1.g"), vec![d], vec![1.0; d]);
            params.insert(&format!("block{l}.ln1.b"), vec![d], vec![0.0; d]);
            for proj in ["q", "k", "v", "o"] {
                linear(&mut params, &mut rng, &format!("block{l}.attn.{proj}"), d, d);
            }
            params.insert(&format!("block{l}.ln2.g"), vec![d], vec![1.0; d]);
            params.insert(&format!("block{l}.ln2.b"), vec![d], vec![0.0; d]);
            linear(&mut params, &mut rng, &format!("block{l}.ff.0"), d, config.mlp_dim);
            linear(&mut params, &mut rng, &format!("block{l}.ff.1"), config.mlp_dim, d);
        }
        params.insert("ln_f.g", vec![d], vec![1.0; d]);
        params.insert("ln_f.b", vec![d], vec![0.0; d]);

        // Segmentation head: conv3x3 -> deconv2x2 s2 -> conv3x3 -> bilinear -> conv1x1.
        let hc = config.head_channels;
        let head_in = if config.use_sqt { d } else { 2 * d };
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, k: usize| {
            let s = 1.0 / ((ci * k * k) as f64).sqrt();
            p.insert(
                &format!("{name}.k"),
                vec![co, ci, k, k],
                (0..co * ci * k * k).map(|_| gaussian(rng) * s).collect(),
            );
            p.insert(&format!("{name}.b"), vec![co], vec![0.0; co]);
        };
        conv(&mut params, &mut rng, "head.conv1", hc, head_in, 3);
        // transposed conv kernel is consumed by the adjoint op: [c_out, c_in] = [hc, hc]
        conv(&mut params, &mut rng, "head.deconv", hc, hc, 2);
        conv(&mut params, &mut rng, "head.conv2", hc, hc, 3);
        conv(&mut params, &mut rng, "head.conv3", 1, hc, 1);

        Ok(Model { config, params, seed, step: 0 })
    }

    /// Insert every parameter into `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let mut names = Vec::with_capacity(self.params.len());
        let mut ids = Vec::with_capacity(self.params.len());
        for (name, p) in self.params.iter() {
            names.push(name.to_string());
            ids.push(graph.leaf(p.data.clone(), p.shape.clone(), true));
        }
        BoundParams { names, ids }
    }

    /// Full forward pass; returns logits of shape [1, side, side].
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        image_a: &Rgb8,
        image_b: &Rgb8,
        prompt: Option<&str>,
    ) -> Result<TensorId, ModelError> {
        Ok(self.forward_traced(graph, bound, image_a, image_b, prompt)?.0)
    }

    /// Forward pass that also reports the token segment layout.
    pub fn forward_traced(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        image_a: &Rgb8,
        image_b: &Rgb8,
        prompt: Option<&str>,
    ) -> Result<(TensorId, SequenceLayout), ModelError> {
        let cfg = &self.config;
        for img in [image_a, image_b] {
            if img.w != cfg.image_side || img.h != cfg.image_side {
                return Err(ModelError::BadImageSize {
                    got_w: img.w,
                    got_h: img.h,
                    want: cfg.image_side,
                });
            }
        }
        if cfg.use_prompts && prompt.is_none() {
            return Err(ModelError::MissingPrompt);
        }
        let g2 = cfg.grid() * cfg.grid();
        let d = cfg.d_model;

        let ia = self.image_tokens(graph, bound, image_a)?;
        let ib = self.image_tokens(graph, bound, image_b)?;

        let mut parts: Vec<TensorId> = vec![ia, ib];
        let mut segments: Vec<(&'static str, usize, usize)> =
            vec![("image_a", 0, g2), ("image_b", g2, g2)];
        let mut row = 2 * g2;
        if cfg.use_prompts {
            let text = embed_text_stub(prompt.unwrap(), cfg.t_max, cfg.d_text)?;
            let t = graph.constant(text.tokens, vec![cfg.t_max, cfg.d_text]);
            let t = graph.matmul(t, bound.id("proj_text.w"))?;
            let t = graph.add_bias_rows(t, bound.id("proj_text.b"))?;
            parts.push(t);
            segments.push(("text", row, cfg.t_max));
            row += cfg.t_max;
        }
        if cfg.use_sqt {
            parts.push(bound.id("sqt"));
            segments.push(("sqt", row, cfg.n_sqt));
            row += cfg.n_sqt;
        }
        let seq_len = row;
        debug_assert_eq!(seq_len, cfg.seq_len());

        let mut x = graph.concat_rows(&parts)?;
        x = graph.add(x, bound.id("pos_emb"))?;
        // tokenwise MLP ahead of the backbone
        x = graph.matmul(x, bound.id("pre_mlp.0.w"))?;
        x = graph.add_bias_rows(x, bound.id("pre_mlp.0.b"))?;
        x = graph.gelu(x);
        x = graph.matmul(x, bound.id("pre_mlp.1.w"))?;
        x = graph.add_bias_rows(x, bound.id("pre_mlp.1.b"))?;

        const LN_EPS: f64 = 1e-5;
        for l in 0..cfg.layers {
            let p = |s: &str| format!("block{l}.{s}");
            let h = graph.layer_norm(x, bound.id(&p("ln1.g")), bound.id(&p("ln1.b")), LN_EPS)?;
            let q = graph.matmul(h, bound.id(&p("attn.q.w")))?;
            let q = graph.add_bias_rows(q, bound.id(&p("attn.q.b")))?;
            let k = graph.matmul(h, bound.id(&p("attn.k.w")))?;
            let k = graph.add_bias_rows(k, bound.id(&p("attn.k.b")))?;
            let v = graph.matmul(h, bound.id(&p("attn.v.w")))?;
            let v = graph.add_bias_rows(v, bound.id(&p("attn.v.b")))?;
            let att = graph.attention(q, k, v, cfg.heads)?;
            let att = graph.matmul(att, bound.id(&p("attn.o.w")))?;
            let att = graph.add_bias_rows(att, bound.id(&p("attn.o.b")))?;
            x = graph.add(x, att)?;
            let h2 = graph.layer_norm(x, bound.id(&p("ln2.g")), bound.id(&p("ln2.b")), LN_EPS)?;
            let f = graph.matmul(h2, bound.id(&p("ff.0.w")))?;
            let f = graph.add_bias_rows(f, bound.id(&p("ff.0.b")))?;
            let f = graph.gelu(f);
            let f = graph.matmul(f, bound.id(&p("ff.1.w")))?;
            let f = graph.add_bias_rows(f, bound.id(&p("ff.1.b")))?;
            x = graph.add(x, f)?;
        }
        x = graph.layer_norm(x, bound.id("ln_f.g"), bound.id("ln_f.b"), LN_EPS)?;

        let grid = cfg.grid();
        let (head_in, head_slice_start) = if cfg.use_sqt {
            // trailing n_sqt rows, reshaped row-major onto the patch grid
            let start = seq_len - cfg.n_sqt;
            let s = graph.slice_rows(x, start, cfg.n_sqt)?;
            let s = graph.transpose(s)?; // [d, n_sqt]
            (graph.reshape(s, vec![d, grid, grid])?, Some(start))
        } else {
            // channelwise concat of the two image segments
            let a = graph.slice_rows(x, 0, g2)?;
            let b = graph.slice_rows(x, g2, g2)?;
            let a = graph.transpose(a)?;
            let b = graph.transpose(b)?;
            let ab = graph.concat_rows(&[a, b])?; // [2d, g2]
            (graph.reshape(ab, vec![2 * d, grid, grid])?, None)
        };
        let logits = self.seg_head(graph, bound, head_in)?;
        Ok((
            logits,
            SequenceLayout { segments, seq_len, head_slice_start },
        ))
    }

    /// Five-layer head: conv → transposed conv (×2) → conv → bilinear (×f)
    /// → 1×1 conv, ReLU on the convolutional layers, linear output.
    pub fn seg_head(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        input: TensorId,
    ) -> Result<TensorId, ModelError> {
        let f = self.config.upsample_factor();
        let x = graph.conv2d(input, bound.id("head.conv1.k"), Some(bound.id("head.conv1.b")), 1, 1)?;
        let x = graph.relu(x);
        let x = graph.conv_transpose2d(x, bound.id("head.deconv.k"), Some(bound.id("head.deconv.b")), 2, 0)?;
        let x = graph.relu(x);
        let x = graph.conv2d(x, bound.id("head.conv2.k"), Some(bound.id("head.conv2.b")), 1, 1)?;
        let x = graph.relu(x);
        let x = graph.bilinear_upsample(x, f)?;
        let x = graph.conv2d(x, bound.id("head.conv3.k"), Some(bound.id("head.conv3.b")), 1, 0)?;
        Ok(x)
    }

    fn image_tokens(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        image: &Rgb8,
    ) -> Result<TensorId, ModelError> {
        let cfg = &self.config;
        let g2 = cfg.grid() * cfg.grid();
        if cfg.use_frozen_image_embedder {
            let toks = embed_image_stub(image, cfg.patch, cfg.d_img)?;
            let t = graph.constant(toks.grid, vec![g2, cfg.d_img]);
            let t = graph.matmul(t, bound.id("proj_img.w"))?;
            Ok(graph.add_bias_rows(t, bound.id("proj_img.b"))?)
        } else {
            // raw pixels per patch, row-major within the patch, channels interleaved
            let p = cfg.patch;
            let grid = cfg.grid();
            let mut data = Vec::with_capacity(g2 * p * p * 3);
            for py in 0..grid {
                for px in 0..grid {
                    for y in 0..p {
                        for x in 0..p {
                            let c = image.get(px * p + x, py * p + y);
                            data.push(c[0] as f64 / 255.0);
                            data.push(c[1] as f64 / 255.0);
                            data.push(c[2] as f64 / 255.0);
                        }
                    }
                }
            }
            let t = graph.constant(data, vec![g2, p * p * 3]);
            let t = graph.matmul(t, bound.id("patch_embed.w"))?;
            Ok(graph.add_bias_rows(t, bound.id("patch_embed.b"))?)
        }
    }

    /// One inference pass: probabilities and the thresholded binary mask.
    pub fn predict(
        &self,
        image_a: &Rgb8,
        image_b: &Rgb8,
        prompt: Option<&str>,
    ) -> Result<(Vec<f64>, Mask), ModelError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let logits = self.forward(&mut graph, &bound, image_a, image_b, prompt)?;
        let side = self.config.image_side;
        let mut mask = Mask::zeros(side, side);
        let mut probs = Vec::with_capacity(side * side);
        for (i, &z) in graph.data(logits).iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            probs.push(p);
            mask.data[i] = (p >= self.config.threshold) as u8;
        }
        Ok((probs, mask))
    }

    // ---- checkpoint format ----
    //
    // u64 LE header length, JSON header {config, seed, step, entries:
    // [{name, shape, offset}]}, then raw little-endian f64 parameter data.

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
            offset: usize,
        }
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a ModelConfig,
            seed: u64,
            step: u64,
            entries: Vec<Entry<'a>>,
        }
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (name, p) in self.params.iter() {
            entries.push(Entry { name, shape: &p.shape, offset });
            offset += p.data.len() * 8;
        }
        let header = serde_json::to_vec(&Header {
            config: &self.config,
            seed: self.seed,
            step: self.step,
            entries,
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            for (_, p) in self.params.iter() {
                for &v in &p.data {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
        }
        #[derive(Deserialize)]
        struct Header {
            config: ModelConfig,
            seed: u64,
            step: u64,
            entries: Vec<Entry>,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(ModelError::Checkpoint("file too short".into()));
        }
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        if 8 + hlen > bytes.len() {
            return Err(ModelError::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
        // Rebuild from config to pin the expected parameter set, then
        // validate every stored shape against it.
        let mut model = Model::new(header.config, header.seed)?;
        let data_start = 8 + hlen;
        for e in &header.entries {
            let p = model
                .params
                .get_mut(&e.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected param {}", e.name)))?;
            if p.shape != e.shape {
                return Err(ModelError::Checkpoint(format!(
                    "param {} has shape {:?}, config expects {:?}",
                    e.name, e.shape, p.shape
                )));
            }
            let n = p.data.len();
            let s = data_start + e.offset;
            if s + 8 * n > bytes.len() {
                return Err(ModelError::Checkpoint(format!("param {} data out of range", e.name)));
            }
            for i in 0..n {
                p.data[i] = f64::from_le_bytes(bytes[s + 8 * i..s + 8 * i + 8].try_into().unwrap());
            }
        }
        if header.entries.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} params, config expects {}",
                header.entries.len(),
                model.params.len()
            )));
        }
        model.step = header.step;
        Ok(model)
    }
}

/// A small configuration for fast tests and gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_side: 16,
        patch: 8,
        d_text: 8,
        d_img: 8,
        d_model: 8,
        layers: 1,
        heads: 2,
        mlp_dim: 16,
        n_sqt: 4,
        t_max: 4,
        head_channels: 4,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn test_images(side: usize) -> (Rgb8, Rgb8) {
        let mut a = Rgb8::filled(side, side, [40, 90, 130]);
        let mut b = a.clone();
        for y in 2..6 {
            for x in 3..9 {
                a.set(x % side, y % side, [220, 40, 40]);
                b.set((x + 2) % side, y % side, [10, 200, 80]);
            }
        }
        (a, b)
    }

    #[test]
    fn desk_config_sequence_length() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.seq_len(), 2 * 64 + 16 + 64);
        let no_prompt = ModelConfig { use_prompts: false, ..cfg };
        assert_eq!(no_prompt.seq_len(), 192);
    }

    #[test]
    fn forward_output_shape_and_determinism() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 11).unwrap();
        let (a, b) = test_images(16);
        let run = || {
            let mut g = Graph::with_precision(Precision::F64);
            let bound = model.bind(&mut g);
            let y = model.forward(&mut g, &bound, &a, &b, Some("red disk")).unwrap();
            (g.shape(y).to_vec(), g.data(y).to_vec())
        };
        let (s1, d1) = run();
        let (s2, d2) = run();
        assert_eq!(s1, vec![1, 16, 16]);
        assert_eq!(s1, s2);
        assert_eq!(d1, d2);
        assert!(d1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn token_order_and_sqt_slice() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let (a, b) = test_images(16);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (_, layout) = model
            .forward_traced(&mut g, &bound, &a, &b, Some("blob"))
            .unwrap();
        let names: Vec<&str> = layout.segments.iter().map(|s| s.0).collect();
        assert_eq!(names, vec!["image_a", "image_b", "text", "sqt"]);
        assert_eq!(layout.seq_len, cfg.seq_len());
        assert_eq!(layout.head_slice_start, Some(cfg.seq_len() - cfg.n_sqt));
    }

    #[test]
    fn swapping_images_changes_output() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let (a, b) = test_images(16);
        let mut g = Graph::with_precision(Precision::F64);
        let bound = model.bind(&mut g);
        let y1 = model.forward(&mut g, &bound, &a, &b, Some("x")).unwrap();
        let y2 = model.forward(&mut g, &bound, &b, &a, Some("x")).unwrap();
        let diff: f64 = g
            .data(y1)
            .iter()
            .zip(g.data(y2))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0, "ordering of the image segments must be semantic");
    }

    #[test]
    fn prompt_changes_logits() {
        let model = Model::new(tiny_config(), 7).unwrap();
        let (a, b) = test_images(16);
        let mut g = Graph::with_precision(Precision::F64);
        let bound = model.bind(&mut g);
        let y1 = model.forward(&mut g, &bound, &a, &b, Some("red disk")).unwrap();
        let y2 = model.forward(&mut g, &bound, &a, &b, Some("green ring")).unwrap();
        let diff: f64 = g
            .data(y1)
            .iter()
            .zip(g.data(y2))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn no_sqt_variant_shapes_and_divergence() {
        let base = tiny_config();
        let model = Model::new(base.clone(), 9).unwrap();
        let ns_cfg = ModelConfig { use_sqt: false, ..base.clone() };
        assert_eq!(ns_cfg.seq_len(), 2 * 4 + 4);
        let no_sqt = Model::new(ns_cfg, 9).unwrap();
        let (a, b) = test_images(16);
        let mut g = Graph::with_precision(Precision::F64);
        let b1 = model.bind(&mut g);
        let y1 = model.forward(&mut g, &b1, &a, &b, Some("x")).unwrap();
        let mut g2 = Graph::with_precision(Precision::F64);
        let b2 = no_sqt.bind(&mut g2);
        let (y2, layout) = no_sqt.forward_traced(&mut g2, &b2, &a, &b, Some("x")).unwrap();
        assert_eq!(g.shape(y1), g2.shape(y2));
        assert!(layout.segments.iter().all(|s| s.0 != "sqt"));
        assert!(no_sqt.params.get("sqt").is_none());
        assert_ne!(g.data(y1), g2.data(y2));
    }

    #[test]
    fn patch_embed_variant_has_no_stub_projection() {
        let cfg = ModelConfig { use_frozen_image_embedder: false, ..tiny_config() };
        let model = Model::new(cfg, 2).unwrap();
        assert!(model.params.get("proj_img.w").is_none());
        assert!(model.params.get("patch_embed.w").is_some());
        let (a, b) = test_images(16);
        let (_, mask) = model.predict(&a, &b, Some("x")).unwrap();
        assert_eq!(mask.w, 16);
    }

    #[test]
    fn no_prompts_variant_rejects_nothing_and_drops_text() {
        let cfg = ModelConfig { use_prompts: false, ..tiny_config() };
        let model = Model::new(cfg, 4).unwrap();
        let (a, b) = test_images(16);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (_, layout) = model.forward_traced(&mut g, &bound, &a, &b, None).unwrap();
        assert!(layout.segments.iter().all(|s| s.0 != "text"));
        // prompted config requires a prompt
        let strict = Model::new(tiny_config(), 4).unwrap();
        let mut g2 = Graph::new();
        let b2 = strict.bind(&mut g2);
        assert!(matches!(
            strict.forward(&mut g2, &b2, &a, &b, None),
            Err(ModelError::MissingPrompt)
        ));
    }

    #[test]
    fn config_validation_errors() {
        let bad = ModelConfig { n_sqt: 5, ..tiny_config() };
        assert!(bad.validate().is_err());
        let bad2 = ModelConfig { heads: 3, ..tiny_config() };
        assert!(bad2.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Model::new(tiny_config(), 21).unwrap();
        model.step = 137;
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.step, 137);
        assert_eq!(loaded.config, model.config);
        for ((n1, p1), (n2, p2)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.data, p2.data);
        }
    }

    #[test]
    fn checkpoint_shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(tiny_config(), 21).unwrap();
        model.save(&path).unwrap();
        // corrupt a shape in the header
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + hlen].to_vec()).unwrap();
        let bad = header.replacen("\"shape\":[8,8]", "\"shape\":[8,9]", 1);
        assert_ne!(header, bad);
        let mut out = Vec::new();
        out.extend_from_slice(&(bad.len() as u64).to_le_bytes());
        out.extend_from_slice(bad.as_bytes());
        out.extend_from_slice(&bytes[8 + hlen..]);
        std::fs::write(&path, out).unwrap();
        assert!(Model::load(&path).is_err());
    }
}
