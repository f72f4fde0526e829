//! The three stacked architectures: a BiomedCLIP-branch ensemble (A), a
//! CLIP-branch ensemble (B), and the double ensemble (C), plus the
//! single-component baselines. Frozen encoders feed data adapters fused into
//! the UNet bottleneck; every active head's logits are averaged pixel-wise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use vlsme_tensor::{
    save_archive, ArchiveError, Graph, Initializer, ParamStore, Tensor,
};

use crate::adapters::{AdapterConfig, AdapterError, DataAdapter, FusionBlock};
use crate::backbone::{
    Backbone, BackboneError, BackboneName, EncoderBundle, VlsmDecoder, VlsmDecoderConfig,
    GRID_DIVISOR,
};
use crate::data::Sample;
use crate::unet::{UnetConfig, UnetD, UnetError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Unet(#[from] UnetError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    #[serde(rename = "unet_only")]
    UnetOnly,
    #[serde(rename = "vlsm_only")]
    VlsmOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    MeanLogits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSource {
    Toy { seed: u64 },
    File { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub variant: Variant,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub biomedclip: Option<BackboneSource>,
    #[serde(default)]
    pub clip: Option<BackboneSource>,
    #[serde(default)]
    pub unet: UnetConfig,
    #[serde(default = "default_adapter_channels")]
    pub adapter_channels: usize,
    #[serde(default)]
    pub decoder: VlsmDecoderConfig,
    #[serde(default = "default_fusion_mode")]
    pub fusion_mode: FusionMode,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_resolution() -> usize {
    crate::data::DEFAULT_RESOLUTION
}

fn default_adapter_channels() -> usize {
    512
}

fn default_fusion_mode() -> FusionMode {
    FusionMode::MeanLogits
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.resolution == 0 || self.resolution % GRID_DIVISOR != 0 {
            return Err(EnsembleError::Config(format!(
                "resolution {} must be a positive multiple of {GRID_DIVISOR}",
                self.resolution
            )));
        }
        let (bio, clip) = (self.biomedclip.is_some(), self.clip.is_some());
        let need = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(EnsembleError::Config(msg.to_string()))
            }
        };
        match self.variant {
            Variant::A => {
                need(bio, "variant A requires a biomedclip backbone")?;
                need(!clip, "variant A must not configure a clip backbone")?;
            }
            Variant::B => {
                need(clip, "variant B requires a clip backbone")?;
                need(!bio, "variant B must not configure a biomedclip backbone")?;
            }
            Variant::C => {
                need(bio && clip, "variant C requires both biomedclip and clip backbones")?;
            }
            Variant::UnetOnly => {
                need(!bio && !clip, "variant unet_only takes no backbones")?;
            }
            Variant::VlsmOnly => {
                need(bio || clip, "variant vlsm_only requires at least one backbone")?;
            }
        }
        self.unet.validate().map_err(EnsembleError::Unet)?;
        if self.adapter_channels == 0 || self.adapter_channels % 2 != 0 {
            return Err(EnsembleError::Config(format!(
                "adapter_channels must be positive and even, got {}",
                self.adapter_channels
            )));
        }
        Ok(())
    }

    fn uses_unet(&self) -> bool {
        !matches!(self.variant, Variant::VlsmOnly)
    }

    fn uses_fusion(&self) -> bool {
        matches!(self.variant, Variant::A | Variant::B | Variant::C)
    }
}

/// Resolve a backbone weights path: absolute paths pass through, otherwise
/// try `$VLSME_CACHE/<path>` before the working directory.
pub fn resolve_weights_path(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() {
        return p;
    }
    if let Ok(cache) = std::env::var("VLSME_CACHE") {
        let candidate = PathBuf::from(cache).join(&p);
        if candidate.exists() {
            return candidate;
        }
    }
    p
}

struct Branch {
    backbone: Backbone,
    adapter: Option<DataAdapter>,
    decoder: VlsmDecoder,
}

/// Logit maps produced by one forward pass; handles into the pass's graph.
pub struct EnsembleOutput {
    pub final_logits: Tensor,
    pub unet_logits: Option<Tensor>,
    pub vlsm_logits: Vec<Tensor>,
}

pub struct EnsembleModel {
    pub config: EnsembleConfig,
    branches: Vec<Branch>,
    unet: Option<UnetD>,
    fusion: Option<FusionBlock>,
    store: ParamStore,
}

impl EnsembleModel {
    pub fn build(config: EnsembleConfig) -> Result<Self, EnsembleError> {
        config.validate()?;
        let grid = config.resolution / GRID_DIVISOR;

        let mut branches = Vec::new();
        let sources = [
            (BackboneName::Biomedclip, &config.biomedclip, "adapters.da1"),
            (BackboneName::Clip, &config.clip, "adapters.da2"),
        ];
        for (name, source, da_prefix) in sources {
            let Some(source) = source else { continue };
            let backbone = match source {
                BackboneSource::Toy { seed } => {
                    let mut b = Backbone::toy(*seed);
                    if name != BackboneName::Toy {
                        b = b.renamed(name);
                    }
                    b
                }
                BackboneSource::File { path } => {
                    Backbone::from_file(&resolve_weights_path(path), name)?
                }
            };
            let adapter = if config.uses_fusion() {
                Some(DataAdapter::new(
                    da_prefix,
                    AdapterConfig {
                        backbone: name,
                        out_channels: config.adapter_channels,
                        target_grid: (grid, grid),
                    },
                    backbone.embed_dim(),
                    backbone.text_dim(),
                )?)
            } else {
                None
            };
            let decoder = VlsmDecoder::new(
                &format!("vlsm_decoder.{name}"),
                config.decoder.clone(),
                backbone.embed_dim(),
                backbone.text_dim(),
            );
            branches.push(Branch {
                backbone,
                adapter,
                decoder,
            });
        }

        let unet = if config.uses_unet() {
            Some(UnetD::new("unet", config.unet.clone())?)
        } else {
            None
        };
        let fusion = if config.uses_fusion() {
            let adapter_channels: Vec<usize> =
                branches.iter().map(|_| config.adapter_channels).collect();
            Some(FusionBlock::new(
                config.unet.bottleneck_channels(),
                &adapter_channels,
            ))
        } else {
            None
        };

        // registration order fixes the init stream: branch adapters and
        // decoders first, then fusion, then the UNet
        let mut store = ParamStore::new();
        let mut init = Initializer::from_seed(config.init_seed);
        for branch in &branches {
            if let Some(a) = &branch.adapter {
                a.register(&mut store, &mut init);
            }
            branch.decoder.register(&mut store, &mut init);
        }
        if let Some(f) = &fusion {
            f.register(&mut store, &mut init);
        }
        if let Some(u) = &unet {
            u.register(&mut store, &mut init);
        }

        Ok(EnsembleModel {
            config,
            branches,
            unet,
            fusion,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Channel count entering the ECA/reduction stage, when fusing.
    pub fn fusion_channels(&self) -> Option<usize> {
        self.fusion.as_ref().map(|f| f.in_channels)
    }

    pub fn backbones(&self) -> impl Iterator<Item = &Backbone> {
        self.branches.iter().map(|b| &b.backbone)
    }

    /// Exactly the optimizable set: VLSM decoders, adapters, fusion, UNet.
    /// Frozen encoder parameters never enter the store, so they cannot
    /// appear here.
    pub fn trainable_parameters(&self) -> BTreeSet<String> {
        self.store.param_names().map(str::to_string).collect()
    }

    /// Checksums of every frozen encoder parameter across all branches.
    pub fn freeze_report(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for b in &self.branches {
            out.extend(b.backbone.freeze_report());
        }
        out
    }

    /// One forward pass on a batch. `training` selects batch-norm behavior
    /// and running-stat updates.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        images: &Array4<f32>,
        prompts: &[String],
        training: bool,
    ) -> Result<EnsembleOutput, EnsembleError> {
        let (n, c, h, w) = images.dim();
        if c != 3 || h != self.config.resolution || w != self.config.resolution {
            return Err(EnsembleError::Config(format!(
                "expected batch of 3x{0}x{0} images, got {c}x{h}x{w}",
                self.config.resolution
            )));
        }
        if prompts.len() != n {
            return Err(EnsembleError::Config(format!(
                "batch has {n} images but {} prompts",
                prompts.len()
            )));
        }
        let grid = self.config.resolution / GRID_DIVISOR;

        // frozen encoders run outside the tape
        let mut encoded: Vec<(Array3<f32>, Array2<f32>)> = Vec::new();
        for branch in &self.branches {
            let mut tokens = Array3::<f32>::zeros((
                n,
                grid * grid,
                branch.backbone.embed_dim(),
            ));
            let mut text = Array2::<f32>::zeros((n, branch.backbone.text_dim()));
            for i in 0..n {
                let img = images.index_axis(Axis(0), i).to_owned();
                let bundle: EncoderBundle = branch.backbone.encode(&img, &prompts[i])?;
                if bundle.grid_side != grid {
                    return Err(EnsembleError::Config(format!(
                        "backbone {} produced grid {} instead of {grid}",
                        branch.backbone.name(),
                        bundle.grid_side
                    )));
                }
                tokens.index_axis_mut(Axis(0), i).assign(&bundle.patch_tokens);
                text.index_axis_mut(Axis(0), i).assign(&bundle.text_embed);
            }
            encoded.push((tokens, text));
        }

        let mut vlsm_logits = Vec::new();
        let mut adapted = Vec::new();
        if !matches!(self.config.variant, Variant::UnetOnly) {
            for (branch, (tokens, text)) in self.branches.iter().zip(&encoded) {
                vlsm_logits.push(branch.decoder.forward(
                    g,
                    &self.store,
                    tokens,
                    text,
                    grid,
                    self.config.resolution,
                ));
                if let Some(adapter) = &branch.adapter {
                    adapted.push(adapter.forward(g, &self.store, tokens, text)?);
                }
            }
        }

        let unet_logits = if let Some(unet) = &self.unet {
            let x = g.constant(images.clone().into_dyn());
            let (bottleneck, skips) = unet.encode(g, &mut self.store, x, training)?;
            let bottleneck = match &self.fusion {
                Some(fusion) => fusion.forward(g, &self.store, &bottleneck, &adapted)?,
                None => bottleneck,
            };
            Some(unet.decode(g, &mut self.store, &bottleneck, &skips, training)?)
        } else {
            None
        };

        let mut heads: Vec<Tensor> = Vec::new();
        if let Some(u) = unet_logits {
            heads.push(u);
        }
        match self.config.variant {
            Variant::UnetOnly => {}
            _ => heads.extend(vlsm_logits.iter().copied()),
        }
        debug_assert!(!heads.is_empty());
        let final_logits = match self.config.fusion_mode {
            FusionMode::MeanLogits => {
                let mut acc = heads[0];
                for t in &heads[1..] {
                    acc = g.add(acc, *t);
                }
                if heads.len() > 1 {
                    g.scale(acc, 1.0 / heads.len() as f32)
                } else {
                    acc
                }
            }
        };
        Ok(EnsembleOutput {
            final_logits,
            unet_logits,
            vlsm_logits,
        })
    }

    /// Convenience eval-mode forward returning the final logits as an array.
    pub fn predict(
        &mut self,
        images: &Array4<f32>,
        prompts: &[String],
    ) -> Result<ArrayD<f32>, EnsembleError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, prompts, false)?;
        Ok(g.value(out.final_logits).clone())
    }

    /// Write a self-contained checkpoint: config, trainable parameters,
    /// norm buffers, and the frozen encoder tensors.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), EnsembleError> {
        let meta = serde_json::json!({
            "kind": "vlsme-ensemble-v1",
            "config": serde_json::to_value(&self.config)
                .map_err(|e| EnsembleError::Config(e.to_string()))?,
        });
        let mut tensors: Vec<(String, ArrayD<f32>)> = self
            .store
            .all_tensors()
            .map(|(n, a)| (n.to_string(), a.clone()))
            .collect();
        for b in &self.branches {
            tensors.extend(b.backbone.qualified_tensors());
        }
        save_archive(path, &meta, tensors.iter().map(|(n, a)| (n.as_str(), a)))?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint.
    pub fn load_checkpoint(path: &Path) -> Result<Self, EnsembleError> {
        let archive = vlsme_tensor::load_archive(path)?;
        let kind = archive.meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        if kind != "vlsme-ensemble-v1" {
            return Err(EnsembleError::Checkpoint(format!(
                "unexpected checkpoint kind {kind:?}"
            )));
        }
        let config: EnsembleConfig = serde_json::from_value(
            archive
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| EnsembleError::Checkpoint("missing config".into()))?,
        )
        .map_err(|e| EnsembleError::Checkpoint(format!("bad config: {e}")))?;
        let mut model = EnsembleModel::build(config)?;
        model
            .store
            .load_tensors(&archive.tensors)
            .map_err(EnsembleError::Checkpoint)?;
        for b in &mut model.branches {
            b.backbone.load_qualified(&archive.tensors)?;
        }
        Ok(model)
    }

    /// Restore trainable state from a checkpoint into this model (shapes
    /// must match; used to roll back to the best epoch).
    pub fn restore_checkpoint(&mut self, path: &Path) -> Result<(), EnsembleError> {
        let archive = vlsme_tensor::load_archive(path)?;
        self.store
            .load_tensors(&archive.tensors)
            .map_err(EnsembleError::Checkpoint)
    }
}

/// Stack samples into batch arrays: images (N,3,H,W), masks (N,1,H,W), prompts.
pub fn stack_batch(samples: &[Sample]) -> (Array4<f32>, ArrayD<f32>, Vec<String>) {
    assert!(!samples.is_empty());
    let (c, h, w) = samples[0].image.dim();
    let n = samples.len();
    let mut images = Array4::<f32>::zeros((n, c, h, w));
    let mut masks = Array4::<f32>::zeros((n, 1, h, w));
    let mut prompts = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&s.image);
        masks
            .slice_mut(ndarray::s![i, 0, .., ..])
            .assign(&s.mask);
        prompts.push(s.prompt.clone());
    }
    (images, masks.into_dyn(), prompts)
}
