//! Frozen vision-language encoder contract and its two implementations: a
//! loader for checkpoint files and a seeded toy transformer for desk-scale
//! testing. Encoders run outside the autodiff tape, so gradients cannot reach
//! them by construction; the trainable part is the FiLM-conditioned
//! transformer decoder at the bottom of this module.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use vlsme_tensor::{
    attention_rows, bilinear_resize_plain, checksum_array, gelu_scalar, layernorm_rows,
    load_archive, save_archive, ArchiveError, Graph, Initializer, ParamStore, Tensor,
};

/// Grid divisor shared with the UNet bottleneck: a H×W input maps to an
/// (H/16)×(W/16) token grid.
pub const GRID_DIVISOR: usize = 16;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint is a {found} backbone, requested {requested}")]
    WrongName { requested: String, found: String },
    #[error("backbone configuration error: {0}")]
    Config(String),
    #[error("image must be square with side divisible by {GRID_DIVISOR}, got {h}x{w}")]
    BadResolution { h: usize, w: usize },
    #[error("encoder produced non-finite values in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    Biomedclip,
    Clip,
    Toy,
}

impl std::fmt::Display for BackboneName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BackboneName::Biomedclip => "biomedclip",
            BackboneName::Clip => "clip",
            BackboneName::Toy => "toy",
        };
        f.write_str(s)
    }
}

/// Frozen encoder outputs consumed by the adapters and the VLSM decoder.
#[derive(Debug, Clone)]
pub struct EncoderBundle {
    /// (G*G, D) token features on the /16 grid.
    pub patch_tokens: Array2<f32>,
    pub pooled_image_embed: Array1<f32>,
    pub text_embed: Array1<f32>,
    pub grid_side: usize,
}

/// The VLSM's own segmentation branch output.
pub struct VlsmOutput {
    pub bundle: EncoderBundle,
    /// (H, W) logits at the input resolution.
    pub decoder_logits: Array2<f32>,
}

/// Static description of a backbone, including the freeze boundary.
#[derive(Debug, Clone)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub patch: usize,
    pub frozen_param_ids: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct TruncationWarning {
    pub prompt: String,
    pub max_len: usize,
}

// ---------------------------------------------------------------------------
// tokenizer

const TOK_BOS: usize = 1;
const TOK_EOS: usize = 2;
const TOK_UNK: usize = 3;
const TOK_RESERVED: usize = 4;

enum TokenizerKind {
    /// Word hashing into a fixed id range; needs no vocabulary file.
    Hashing,
    /// Explicit vocabulary from the checkpoint; unknown words map to UNK.
    Vocab(BTreeMap<String, usize>),
}

struct Tokenizer {
    kind: TokenizerKind,
    vocab_size: usize,
    max_len: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Tokenizer {
    fn tokenize(&self, prompt: &str) -> (Vec<usize>, bool) {
        let lowered = prompt.to_lowercase();
        let words: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let keep = self.max_len.saturating_sub(2);
        let truncated = words.len() > keep;
        let mut ids = Vec::with_capacity(words.len().min(keep) + 2);
        ids.push(TOK_BOS);
        for w in words.iter().take(keep) {
            let id = match &self.kind {
                TokenizerKind::Hashing => {
                    TOK_RESERVED + (fnv1a(w) as usize) % (self.vocab_size - TOK_RESERVED)
                }
                TokenizerKind::Vocab(map) => map.get(*w).copied().unwrap_or(TOK_UNK),
            };
            ids.push(id);
        }
        ids.push(TOK_EOS);
        (ids, truncated)
    }
}

// ---------------------------------------------------------------------------
// encoder weights

struct LayerWeights {
    ln1_g: Array1<f32>,
    ln1_b: Array1<f32>,
    qkv_w: Array2<f32>,
    qkv_b: Array1<f32>,
    proj_w: Array2<f32>,
    proj_b: Array1<f32>,
    ln2_g: Array1<f32>,
    ln2_b: Array1<f32>,
    mlp1_w: Array2<f32>,
    mlp1_b: Array1<f32>,
    mlp2_w: Array2<f32>,
    mlp2_b: Array1<f32>,
}

impl LayerWeights {
    fn seeded(init: &mut Initializer, d: usize) -> Self {
        let lin = |init: &mut Initializer, di: usize, dout: usize| {
            (
                init.fan_in_uniform(&[di, dout], di)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap(),
                init.fan_in_uniform(&[dout], di)
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap(),
            )
        };
        let (qkv_w, qkv_b) = lin(init, d, 3 * d);
        let (proj_w, proj_b) = lin(init, d, d);
        let (mlp1_w, mlp1_b) = lin(init, d, 4 * d);
        let (mlp2_w, mlp2_b) = lin(init, 4 * d, d);
        LayerWeights {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            mlp1_w,
            mlp1_b,
            mlp2_w,
            mlp2_b,
        }
    }

    fn forward(&self, x: &Array2<f32>, heads: usize) -> Array2<f32> {
        let d = x.dim().1;
        let h = layernorm_rows(x, &self.ln1_g, &self.ln1_b, 1e-5);
        let qkv = h.dot(&self.qkv_w) + &self.qkv_b;
        let q = qkv.slice(ndarray::s![.., 0..d]).to_owned();
        let k = qkv.slice(ndarray::s![.., d..2 * d]).to_owned();
        let v = qkv.slice(ndarray::s![.., 2 * d..3 * d]).to_owned();
        let a = attention_rows(&q, &k, &v, heads);
        let x = x + &(a.dot(&self.proj_w) + &self.proj_b);
        let h2 = layernorm_rows(&x, &self.ln2_g, &self.ln2_b, 1e-5);
        let m = (h2.dot(&self.mlp1_w) + &self.mlp1_b).map(|v| gelu_scalar(*v));
        &x + &(m.dot(&self.mlp2_w) + &self.mlp2_b)
    }

    fn named(&self, out: &mut Vec<(String, ArrayD<f32>)>, prefix: &str) {
        let mut push = |n: &str, a: ArrayD<f32>| out.push((format!("{prefix}.{n}"), a));
        push("ln1.g", self.ln1_g.clone().into_dyn());
        push("ln1.b", self.ln1_b.clone().into_dyn());
        push("qkv.w", self.qkv_w.clone().into_dyn());
        push("qkv.b", self.qkv_b.clone().into_dyn());
        push("proj.w", self.proj_w.clone().into_dyn());
        push("proj.b", self.proj_b.clone().into_dyn());
        push("ln2.g", self.ln2_g.clone().into_dyn());
        push("ln2.b", self.ln2_b.clone().into_dyn());
        push("mlp1.w", self.mlp1_w.clone().into_dyn());
        push("mlp1.b", self.mlp1_b.clone().into_dyn());
        push("mlp2.w", self.mlp2_w.clone().into_dyn());
        push("mlp2.b", self.mlp2_b.clone().into_dyn());
    }

    fn assign(&mut self, src: &BTreeMap<String, ArrayD<f32>>, prefix: &str) -> Result<(), BackboneError> {
        let get2 = |n: &str| -> Result<Array2<f32>, BackboneError> {
            fetch(src, &format!("{prefix}.{n}"))?
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| BackboneError::Config(format!("{prefix}.{n}: {e}")))
        };
        let get1 = |n: &str| -> Result<Array1<f32>, BackboneError> {
            fetch(src, &format!("{prefix}.{n}"))?
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| BackboneError::Config(format!("{prefix}.{n}: {e}")))
        };
        self.ln1_g = get1("ln1.g")?;
        self.ln1_b = get1("ln1.b")?;
        self.qkv_w = get2("qkv.w")?;
        self.qkv_b = get1("qkv.b")?;
        self.proj_w = get2("proj.w")?;
        self.proj_b = get1("proj.b")?;
        self.ln2_g = get1("ln2.g")?;
        self.ln2_b = get1("ln2.b")?;
        self.mlp1_w = get2("mlp1.w")?;
        self.mlp1_b = get1("mlp1.b")?;
        self.mlp2_w = get2("mlp2.w")?;
        self.mlp2_b = get1("mlp2.b")?;
        Ok(())
    }
}

fn fetch<'a>(
    src: &'a BTreeMap<String, ArrayD<f32>>,
    name: &str,
) -> Result<&'a ArrayD<f32>, BackboneError> {
    src.get(name)
        .ok_or_else(|| BackboneError::Config(format!("checkpoint is missing {name}")))
}

/// Hyperparameters stored in a backbone checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneHyper {
    pub name: BackboneName,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub patch: usize,
    pub vis_layers: usize,
    pub txt_layers: usize,
    pub heads: usize,
    /// Fixed encoder input side; None means "encode at the given resolution".
    pub native_input: Option<usize>,
    pub vocab_size: usize,
    pub max_text_len: usize,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
}

struct EncoderWeights {
    patch_embed_w: Array2<f32>, // (3*patch*patch, D)
    patch_embed_b: Array1<f32>,
    pos_embed: Option<Array2<f32>>, // (G0*G0, D); sinusoidal when absent
    vis_layers: Vec<LayerWeights>,
    vis_ln_g: Array1<f32>,
    vis_ln_b: Array1<f32>,
    token_embed: Array2<f32>, // (vocab, Dt)
    txt_layers: Vec<LayerWeights>,
    txt_ln_g: Array1<f32>,
    txt_ln_b: Array1<f32>,
    text_proj_w: Array2<f32>,
    text_proj_b: Array1<f32>,
    norm_mean: Array1<f32>,
    norm_std: Array1<f32>,
}

impl EncoderWeights {
    fn seeded(hyper: &BackboneHyper, seed: u64, with_pos: bool) -> Self {
        let mut init = Initializer::from_seed(seed);
        let (d, dt, p) = (hyper.embed_dim, hyper.text_dim, hyper.patch);
        let patch_dim = 3 * p * p;
        let patch_embed_w = init
            .fan_in_uniform(&[patch_dim, d], patch_dim)
            .into_dimensionality()
            .unwrap();
        let patch_embed_b = init
            .fan_in_uniform(&[d], patch_dim)
            .into_dimensionality()
            .unwrap();
        let pos_embed = if with_pos {
            let g0 = hyper.native_input.expect("pos table needs native input") / p;
            Some(
                init.normal(&[g0 * g0, d], 0.02)
                    .into_dimensionality()
                    .unwrap(),
            )
        } else {
            None
        };
        let vis_layers = (0..hyper.vis_layers).map(|_| LayerWeights::seeded(&mut init, d)).collect();
        let token_embed = init
            .normal(&[hyper.vocab_size, dt], 0.02)
            .into_dimensionality()
            .unwrap();
        let txt_layers = (0..hyper.txt_layers).map(|_| LayerWeights::seeded(&mut init, dt)).collect();
        let text_proj_w = init
            .fan_in_uniform(&[dt, dt], dt)
            .into_dimensionality()
            .unwrap();
        let text_proj_b = init.fan_in_uniform(&[dt], dt).into_dimensionality().unwrap();
        EncoderWeights {
            patch_embed_w,
            patch_embed_b,
            pos_embed,
            vis_layers,
            vis_ln_g: Array1::ones(d),
            vis_ln_b: Array1::zeros(d),
            token_embed,
            txt_layers,
            txt_ln_g: Array1::ones(dt),
            txt_ln_b: Array1::zeros(dt),
            text_proj_w,
            text_proj_b,
            norm_mean: Array1::from_elem(3, 0.5),
            norm_std: Array1::from_elem(3, 0.5),
        }
    }

    fn named_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut out = Vec::new();
        out.push(("vision.patch_embed.w".into(), self.patch_embed_w.clone().into_dyn()));
        out.push(("vision.patch_embed.b".into(), self.patch_embed_b.clone().into_dyn()));
        if let Some(p) = &self.pos_embed {
            out.push(("vision.pos_embed".into(), p.clone().into_dyn()));
        }
        for (i, l) in self.vis_layers.iter().enumerate() {
            l.named(&mut out, &format!("vision.layers.{i}"));
        }
        out.push(("vision.ln_f.g".into(), self.vis_ln_g.clone().into_dyn()));
        out.push(("vision.ln_f.b".into(), self.vis_ln_b.clone().into_dyn()));
        out.push(("text.token_embed".into(), self.token_embed.clone().into_dyn()));
        for (i, l) in self.txt_layers.iter().enumerate() {
            l.named(&mut out, &format!("text.layers.{i}"));
        }
        out.push(("text.ln_f.g".into(), self.txt_ln_g.clone().into_dyn()));
        out.push(("text.ln_f.b".into(), self.txt_ln_b.clone().into_dyn()));
        out.push(("text.proj.w".into(), self.text_proj_w.clone().into_dyn()));
        out.push(("text.proj.b".into(), self.text_proj_b.clone().into_dyn()));
        out.push(("norm.mean".into(), self.norm_mean.clone().into_dyn()));
        out.push(("norm.std".into(), self.norm_std.clone().into_dyn()));
        out
    }

    fn assign(&mut self, src: &BTreeMap<String, ArrayD<f32>>) -> Result<(), BackboneError> {
        let d2 = |n: &str| -> Result<Array2<f32>, BackboneError> {
            fetch(src, n)?
                .clone()
                .into_dimensionality()
                .map_err(|e| BackboneError::Config(format!("{n}: {e}")))
        };
        let d1 = |n: &str| -> Result<Array1<f32>, BackboneError> {
            fetch(src, n)?
                .clone()
                .into_dimensionality()
                .map_err(|e| BackboneError::Config(format!("{n}: {e}")))
        };
        self.patch_embed_w = d2("vision.patch_embed.w")?;
        self.patch_embed_b = d1("vision.patch_embed.b")?;
        if src.contains_key("vision.pos_embed") {
            self.pos_embed = Some(d2("vision.pos_embed")?);
        }
        for (i, l) in self.vis_layers.iter_mut().enumerate() {
            l.assign(src, &format!("vision.layers.{i}"))?;
        }
        self.vis_ln_g = d1("vision.ln_f.g")?;
        self.vis_ln_b = d1("vision.ln_f.b")?;
        self.token_embed = d2("text.token_embed")?;
        for (i, l) in self.txt_layers.iter_mut().enumerate() {
            l.assign(src, &format!("text.layers.{i}"))?;
        }
        self.txt_ln_g = d1("text.ln_f.g")?;
        self.txt_ln_b = d1("text.ln_f.b")?;
        self.text_proj_w = d2("text.proj.w")?;
        self.text_proj_b = d1("text.proj.b")?;
        self.norm_mean = d1("norm.mean")?;
        self.norm_std = d1("norm.std")?;
        Ok(())
    }
}

fn sinusoidal_positions(n: usize, d: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((n, d));
    for t in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t as f64 * freq;
            out[[t, 2 * i]] = angle.sin() as f32;
            out[[t, 2 * i + 1]] = angle.cos() as f32;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// the backbone

/// A frozen vision-language encoder pair. Read-only after construction;
/// `encode` is safe to call concurrently.
pub struct Backbone {
    hyper: BackboneHyper,
    weights: EncoderWeights,
    tokenizer: Tokenizer,
    warnings: Mutex<Vec<TruncationWarning>>,
}

pub const TOY_EMBED_DIM: usize = 64;
pub const TOY_TEXT_DIM: usize = 64;
pub const TOY_PATCH: usize = 16;
pub const TOY_LAYERS: usize = 2;

impl Backbone {
    /// Seeded toy transformer: 2-layer ViT, D = Dt = 64, patch 16. Runs at
    /// whatever /16 resolution it is given, so the whole test suite works
    /// without checkpoint files.
    pub fn toy(seed: u64) -> Self {
        let hyper = BackboneHyper {
            name: BackboneName::Toy,
            embed_dim: TOY_EMBED_DIM,
            text_dim: TOY_TEXT_DIM,
            patch: TOY_PATCH,
            vis_layers: TOY_LAYERS,
            txt_layers: TOY_LAYERS,
            heads: 4,
            native_input: None,
            vocab_size: 512,
            max_text_len: 77,
            vocab: None,
        };
        let weights = EncoderWeights::seeded(&hyper, seed, false);
        Backbone::assemble(hyper, weights)
    }

    /// Load a checkpoint produced by [`Backbone::save`]. The requested name
    /// must match the checkpoint's own.
    pub fn from_file(path: &Path, requested: BackboneName) -> Result<Self, BackboneError> {
        let archive = load_archive(path)?;
        let hyper: BackboneHyper = serde_json::from_value(
            archive
                .meta
                .get("backbone")
                .cloned()
                .ok_or_else(|| BackboneError::Config("missing backbone header".into()))?,
        )
        .map_err(|e| BackboneError::Config(format!("bad backbone header: {e}")))?;
        if hyper.name != requested {
            return Err(BackboneError::WrongName {
                requested: requested.to_string(),
                found: hyper.name.to_string(),
            });
        }
        let mut weights = EncoderWeights::seeded(&hyper, 0, false);
        weights.assign(&archive.tensors)?;
        Ok(Backbone::assemble(hyper, weights))
    }

    fn assemble(hyper: BackboneHyper, weights: EncoderWeights) -> Self {
        let tokenizer = Tokenizer {
            kind: match &hyper.vocab {
                Some(words) => TokenizerKind::Vocab(
                    words
                        .iter()
                        .enumerate()
                        .map(|(i, w)| (w.clone(), TOK_RESERVED + i))
                        .collect(),
                ),
                None => TokenizerKind::Hashing,
            },
            vocab_size: hyper.vocab_size,
            max_len: hyper.max_text_len,
        };
        Backbone {
            hyper,
            weights,
            tokenizer,
            warnings: Mutex::new(Vec::new()),
        }
    }

    /// Serialize hyperparameters and all frozen tensors.
    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let meta = serde_json::json!({
            "kind": "vlsme-backbone-v1",
            "backbone": serde_json::to_value(&self.hyper).unwrap(),
        });
        let named = self.weights.named_tensors();
        save_archive(path, &meta, named.iter().map(|(n, a)| (n.as_str(), a)))?;
        Ok(())
    }

    /// Rebrand a toy instance so it can stand in for a named backbone slot
    /// (its frozen ids then live under that slot's namespace).
    pub fn renamed(mut self, name: BackboneName) -> Self {
        self.hyper.name = name;
        self
    }

    /// Pin the encoder to a fixed input side (images are resized to it and
    /// the token grid resized back to the /16 contract afterwards), or None
    /// to encode at the given resolution.
    pub fn with_native_input(mut self, native: Option<usize>) -> Self {
        self.hyper.native_input = native;
        self
    }

    pub fn name(&self) -> BackboneName {
        self.hyper.name
    }

    pub fn embed_dim(&self) -> usize {
        self.hyper.embed_dim
    }

    pub fn text_dim(&self) -> usize {
        self.hyper.text_dim
    }

    pub fn spec(&self) -> BackboneSpec {
        BackboneSpec {
            name: self.hyper.name,
            embed_dim: self.hyper.embed_dim,
            text_dim: self.hyper.text_dim,
            patch: self.hyper.patch,
            frozen_param_ids: self
                .weights
                .named_tensors()
                .iter()
                .map(|(n, _)| self.qualified(n))
                .collect(),
        }
    }

    fn qualified(&self, tensor_name: &str) -> String {
        format!("backbone.{}.{tensor_name}", self.hyper.name)
    }

    /// Content checksums of every frozen parameter, keyed by qualified id.
    pub fn freeze_report(&self) -> BTreeMap<String, String> {
        self.weights
            .named_tensors()
            .iter()
            .map(|(n, a)| (self.qualified(n), checksum_array(a)))
            .collect()
    }

    /// Qualified frozen tensors for embedding into ensemble checkpoints.
    pub fn qualified_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        self.weights
            .named_tensors()
            .into_iter()
            .map(|(n, a)| (self.qualified(&n), a))
            .collect()
    }

    /// Restore frozen tensors from a qualified map (ensemble checkpoint).
    pub fn load_qualified(
        &mut self,
        tensors: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<(), BackboneError> {
        let prefix = format!("backbone.{}.", self.hyper.name);
        let stripped: BTreeMap<String, ArrayD<f32>> = tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k[prefix.len()..].to_string(), v.clone()))
            .collect();
        self.weights.assign(&stripped)
    }

    /// Truncation warnings recorded since the last call.
    pub fn take_warnings(&self) -> Vec<TruncationWarning> {
        std::mem::take(&mut self.warnings.lock().unwrap())
    }

    /// Run both frozen encoders on one (image, prompt) pair. Deterministic
    /// given weights and inputs; the outputs are plain arrays, so no gradient
    /// can flow back into the encoders.
    pub fn encode(&self, image: &Array3<f32>, prompt: &str) -> Result<EncoderBundle, BackboneError> {
        let (_, h, w) = image.dim();
        if h != w || h % GRID_DIVISOR != 0 {
            return Err(BackboneError::BadResolution { h, w });
        }
        let target_grid = h / GRID_DIVISOR;

        // vision tower
        let mut img = image.clone().insert_axis(Axis(0));
        if let Some(native) = self.hyper.native_input {
            if native != h {
                img = bilinear_resize_plain(
                    &img.into_dimensionality::<ndarray::Ix4>().unwrap(),
                    native,
                    native,
                )
                .into_dimensionality()
                .unwrap();
            }
        }
        let img = img.index_axis_move(Axis(0), 0);
        let (_, ih, _) = img.dim();
        let p = self.hyper.patch;
        if ih % p != 0 {
            return Err(BackboneError::Config(format!(
                "input side {ih} not divisible by patch {p}"
            )));
        }
        let g0 = ih / p;
        let d = self.hyper.embed_dim;
        // normalize then patchify into rows of (3*p*p)
        let mut patches = Array2::<f32>::zeros((g0 * g0, 3 * p * p));
        for gi in 0..g0 {
            for gj in 0..g0 {
                let row = gi * g0 + gj;
                for c in 0..3 {
                    let (mu, sd) = (self.weights.norm_mean[c], self.weights.norm_std[c]);
                    for pi in 0..p {
                        for pj in 0..p {
                            patches[[row, c * p * p + pi * p + pj]] =
                                (img[[c, gi * p + pi, gj * p + pj]] - mu) / sd;
                        }
                    }
                }
            }
        }
        let mut x = patches.dot(&self.weights.patch_embed_w) + &self.weights.patch_embed_b;
        match &self.weights.pos_embed {
            Some(pos) => {
                let stored_g = (pos.dim().0 as f64).sqrt() as usize;
                if stored_g * stored_g != pos.dim().0 {
                    return Err(BackboneError::Config("pos_embed is not a square grid".into()));
                }
                if stored_g == g0 {
                    x += pos;
                } else {
                    x += &resize_token_grid(pos, stored_g, g0, d);
                }
            }
            None => x += &sinusoidal_positions(g0 * g0, d),
        }
        for layer in &self.weights.vis_layers {
            x = layer.forward(&x, self.hyper.heads);
        }
        let x = layernorm_rows(&x, &self.weights.vis_ln_g, &self.weights.vis_ln_b, 1e-5);
        let pooled = x.mean_axis(Axis(0)).unwrap();
        let patch_tokens = if g0 == target_grid {
            x
        } else {
            resize_token_grid(&x, g0, target_grid, d)
        };

        // text tower
        let (ids, truncated) = self.tokenizer.tokenize(prompt);
        if truncated {
            self.warnings.lock().unwrap().push(TruncationWarning {
                prompt: prompt.to_string(),
                max_len: self.hyper.max_text_len,
            });
        }
        let dt = self.hyper.text_dim;
        let mut t = Array2::<f32>::zeros((ids.len(), dt));
        for (row, &id) in ids.iter().enumerate() {
            t.row_mut(row).assign(&self.weights.token_embed.row(id));
        }
        t += &sinusoidal_positions(ids.len(), dt);
        for layer in &self.weights.txt_layers {
            t = layer.forward(&t, self.hyper.heads);
        }
        let t = layernorm_rows(&t, &self.weights.txt_ln_g, &self.weights.txt_ln_b, 1e-5);
        let text_embed =
            t.mean_axis(Axis(0)).unwrap().dot(&self.weights.text_proj_w) + &self.weights.text_proj_b;

        for (name, arr) in [
            ("patch_tokens", patch_tokens.view()),
            ("text_embed", text_embed.view().insert_axis(Axis(0))),
        ] {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(BackboneError::NonFinite(match name {
                    "patch_tokens" => "patch_tokens",
                    _ => "text_embed",
                }));
            }
        }
        Ok(EncoderBundle {
            patch_tokens,
            pooled_image_embed: pooled,
            text_embed,
            grid_side: target_grid,
        })
    }
}

/// Bilinear resize of a (G*G, D) token sheet to a new grid side.
fn resize_token_grid(tokens: &Array2<f32>, g0: usize, g1: usize, d: usize) -> Array2<f32> {
    let mut grid = Array4::<f32>::zeros((1, d, g0, g0));
    for gi in 0..g0 {
        for gj in 0..g0 {
            for c in 0..d {
                grid[[0, c, gi, gj]] = tokens[[gi * g0 + gj, c]];
            }
        }
    }
    let resized = bilinear_resize_plain(&grid, g1, g1);
    let mut out = Array2::<f32>::zeros((g1 * g1, d));
    for gi in 0..g1 {
        for gj in 0..g1 {
            for c in 0..d {
                out[[gi * g1 + gj, c]] = resized[[0, c, gi, gj]];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// trainable VLSM decoder

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VlsmDecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for VlsmDecoderConfig {
    fn default() -> Self {
        VlsmDecoderConfig {
            width: 64,
            heads: 4,
            layers: 3,
        }
    }
}

/// Transformer decoder over frozen patch tokens, conditioned on the text
/// embedding by feature-wise linear modulation, with a linear token-to-pixel
/// head and bilinear upsampling to the input resolution. All parameters are
/// trainable.
pub struct VlsmDecoder {
    pub prefix: String,
    pub config: VlsmDecoderConfig,
    pub embed_dim: usize,
    pub text_dim: usize,
}

impl VlsmDecoder {
    pub fn new(prefix: &str, config: VlsmDecoderConfig, embed_dim: usize, text_dim: usize) -> Self {
        VlsmDecoder {
            prefix: prefix.to_string(),
            config,
            embed_dim,
            text_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, init: &mut Initializer) {
        let w = self.config.width;
        let p = &self.prefix;
        let mut lin = |store: &mut ParamStore, name: String, di: usize, dout: usize| {
            store.add_param(&format!("{name}.w"), init.fan_in_uniform(&[di, dout], di));
            store.add_param(&format!("{name}.b"), init.fan_in_uniform(&[dout], di));
        };
        lin(store, format!("{p}.proj_in"), self.embed_dim, w);
        for i in 0..self.config.layers {
            let lp = format!("{p}.layers.{i}");
            store.add_param(&format!("{lp}.ln1.g"), Initializer::ones(&[w]));
            store.add_param(&format!("{lp}.ln1.b"), Initializer::zeros(&[w]));
            lin(store, format!("{lp}.q"), w, w);
            lin(store, format!("{lp}.k"), w, w);
            lin(store, format!("{lp}.v"), w, w);
            lin(store, format!("{lp}.attn_out"), w, w);
            store.add_param(&format!("{lp}.ln2.g"), Initializer::ones(&[w]));
            store.add_param(&format!("{lp}.ln2.b"), Initializer::zeros(&[w]));
            lin(store, format!("{lp}.film_scale"), self.text_dim, w);
            lin(store, format!("{lp}.film_shift"), self.text_dim, w);
            lin(store, format!("{lp}.mlp1"), w, 4 * w);
            lin(store, format!("{lp}.mlp2"), 4 * w, w);
        }
        store.add_param(&format!("{p}.ln_f.g"), Initializer::ones(&[w]));
        store.add_param(&format!("{p}.ln_f.b"), Initializer::zeros(&[w]));
        lin(store, format!("{p}.head"), w, 1);
    }

    /// Build the decoder forward on the tape. `patch_tokens` is (N, T, D)
    /// and `text` (N, Dt); both enter as constants (the freeze boundary).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patch_tokens: &Array3<f32>,
        text: &Array2<f32>,
        grid: usize,
        out_res: usize,
    ) -> Tensor {
        let p = &self.prefix;
        let lin = |g: &mut Graph, store: &ParamStore, x: Tensor, name: String| {
            let w = g.param(store, &format!("{name}.w"));
            let b = g.param(store, &format!("{name}.b"));
            g.linear(x, w, Some(b))
        };
        let toks = g.constant(patch_tokens.clone().into_dyn());
        let txt = g.constant(text.clone().into_dyn());
        let mut x = lin(g, store, toks, format!("{p}.proj_in"));
        for i in 0..self.config.layers {
            let lp = format!("{p}.layers.{i}");
            let g1 = g.param(store, &format!("{lp}.ln1.g"));
            let b1 = g.param(store, &format!("{lp}.ln1.b"));
            let h = g.layernorm(x, g1, b1, 1e-5);
            let q = lin(g, store, h, format!("{lp}.q"));
            let k = lin(g, store, h, format!("{lp}.k"));
            let v = lin(g, store, h, format!("{lp}.v"));
            let a = g.attention(q, k, v, self.config.heads);
            let o = lin(g, store, a, format!("{lp}.attn_out"));
            x = g.add(x, o);
            let g2 = g.param(store, &format!("{lp}.ln2.g"));
            let b2 = g.param(store, &format!("{lp}.ln2.b"));
            let h2 = g.layernorm(x, g2, b2, 1e-5);
            let sc = lin(g, store, txt, format!("{lp}.film_scale"));
            let sh = lin(g, store, txt, format!("{lp}.film_shift"));
            let f = g.film_tokens(h2, sc, sh);
            let m1 = lin(g, store, f, format!("{lp}.mlp1"));
            let m1 = g.gelu(m1);
            let m2 = lin(g, store, m1, format!("{lp}.mlp2"));
            x = g.add(x, m2);
        }
        let gf = g.param(store, &format!("{p}.ln_f.g"));
        let bf = g.param(store, &format!("{p}.ln_f.b"));
        let x = g.layernorm(x, gf, bf, 1e-5);
        let tokmap = lin(g, store, x, format!("{p}.head")); // (N, T, 1)
        let grid_map = g.tokens_to_grid(tokmap, grid); // (N, 1, G, G)
        g.bilinear_resize(grid_map, out_res, out_res)
    }
}

/// Run one bundle through a decoder in a throwaway graph (the inference-side
/// view of the decode operation).
pub fn decode_single(
    decoder: &VlsmDecoder,
    store: &ParamStore,
    bundle: &EncoderBundle,
    out_res: usize,
) -> Result<VlsmOutput, BackboneError> {
    let (t, d) = bundle.patch_tokens.dim();
    if d != decoder.embed_dim {
        return Err(BackboneError::Config(format!(
            "bundle embed dim {d} does not match decoder input {}",
            decoder.embed_dim
        )));
    }
    if t != bundle.grid_side * bundle.grid_side {
        return Err(BackboneError::Config(format!(
            "token count {t} is not grid {0}x{0}",
            bundle.grid_side
        )));
    }
    if bundle.text_embed.len() != decoder.text_dim {
        return Err(BackboneError::Config(format!(
            "text dim {} does not match decoder conditioning {}",
            bundle.text_embed.len(),
            decoder.text_dim
        )));
    }
    let mut g = Graph::new();
    let tokens = bundle
        .patch_tokens
        .clone()
        .insert_axis(Axis(0))
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let text = bundle
        .text_embed
        .clone()
        .insert_axis(Axis(0))
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let out = decoder.forward(&mut g, store, &tokens, &text, bundle.grid_side, out_res);
    let logits = g
        .value(out)
        .view()
        .into_shape_with_order((out_res, out_res))
        .unwrap()
        .to_owned();
    Ok(VlsmOutput {
        bundle: bundle.clone(),
        decoder_logits: logits,
    })
}

/// Compare two freeze reports; Err names the first violated parameter.
pub fn verify_frozen(
    before: &BTreeMap<String, String>,
    after: &BTreeMap<String, String>,
) -> Result<(), String> {
    if before.len() != after.len() {
        return Err(format!(
            "freeze report size changed: {} -> {}",
            before.len(),
            after.len()
        ));
    }
    for (name, checksum) in before {
        match after.get(name) {
            Some(c) if c == checksum => {}
            Some(_) => return Err(format!("frozen parameter {name} changed")),
            None => return Err(format!("frozen parameter {name} missing from report")),
        }
    }
    Ok(())
}
