//! Data adapters projecting frozen encoder outputs onto the UNet bottleneck
//! shape, the efficient channel attention layer, and the fusion block that
//! concatenates everything and reduces back to the bottleneck width.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use vlsme_tensor::{Graph, Initializer, ParamStore, Tensor};

use crate::backbone::BackboneName;
use crate::unet::{BottleneckSource, BottleneckTensor};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("token count {0} is not a perfect square")]
    TokensNotSquare(usize),
    #[error("adapter out_channels must be even (visual/text split), got {0}")]
    OddChannels(usize),
    #[error("eca expects {want} channels, got {got}")]
    EcaChannels { want: usize, got: usize },
    #[error("fusion inputs disagree on spatial dims: {0:?} vs {1:?}")]
    SpatialMismatch(Vec<usize>, Vec<usize>),
}

/// ECA kernel width from the channel count: smallest odd integer at or above
/// log2(C)/gamma + b/gamma with gamma=2, b=1.
pub fn eca_kernel_size(channels: usize) -> usize {
    assert!(channels >= 1);
    let t = (channels as f64).log2() / 2.0 + 0.5;
    let k = t.ceil() as usize;
    let k = k.max(1);
    if k % 2 == 1 {
        k
    } else {
        k + 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub backbone: BackboneName,
    pub out_channels: usize,
    pub target_grid: (usize, usize),
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.out_channels % 2 != 0 {
            return Err(AdapterError::OddChannels(self.out_channels));
        }
        Ok(())
    }
}

/// Learned projection from one VLSM's encoder outputs to C_a×h_b×w_b:
/// patch tokens through a 1x1 conv on the visual half, the text embedding
/// broadcast over the grid on the other half.
pub struct DataAdapter {
    pub prefix: String,
    pub config: AdapterConfig,
    pub embed_dim: usize,
    pub text_dim: usize,
}

impl DataAdapter {
    pub fn new(
        prefix: &str,
        config: AdapterConfig,
        embed_dim: usize,
        text_dim: usize,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        Ok(DataAdapter {
            prefix: prefix.to_string(),
            config,
            embed_dim,
            text_dim,
        })
    }

    pub fn register(&self, store: &mut ParamStore, init: &mut Initializer) {
        let half = self.config.out_channels / 2;
        store.add_param(
            &format!("{}.vis.w", self.prefix),
            init.fan_in_uniform(&[half, self.embed_dim, 1, 1], self.embed_dim),
        );
        store.add_param(
            &format!("{}.vis.b", self.prefix),
            init.fan_in_uniform(&[half], self.embed_dim),
        );
        store.add_param(
            &format!("{}.txt.w", self.prefix),
            init.fan_in_uniform(&[self.text_dim, half], self.text_dim),
        );
        store.add_param(
            &format!("{}.txt.b", self.prefix),
            init.fan_in_uniform(&[half], self.text_dim),
        );
    }

    /// (N,T,D) tokens + (N,Dt) text -> (N, C_a, h_b, w_b).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patch_tokens: &Array3<f32>,
        text: &Array2<f32>,
    ) -> Result<Tensor, AdapterError> {
        let (_, t, _) = patch_tokens.dim();
        let grid = (t as f64).sqrt().round() as usize;
        if grid * grid != t {
            return Err(AdapterError::TokensNotSquare(t));
        }
        let (hb, wb) = self.config.target_grid;
        let toks = g.constant(patch_tokens.clone().into_dyn());
        let grid_map = g.tokens_to_grid(toks, grid);
        let vis_w = g.param(store, &format!("{}.vis.w", self.prefix));
        let vis_b = g.param(store, &format!("{}.vis.b", self.prefix));
        let vis = g.conv2d(grid_map, vis_w, Some(vis_b), 0);
        let vis = g.bilinear_resize(vis, hb, wb);

        let txt_in = g.constant(text.clone().into_dyn());
        let txt_w = g.param(store, &format!("{}.txt.w", self.prefix));
        let txt_b = g.param(store, &format!("{}.txt.b", self.prefix));
        let txt = g.linear(txt_in, txt_w, Some(txt_b));
        let txt = g.broadcast_nc(txt, hb, wb);

        Ok(g.concat_channels(&[vis, txt]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcaConfig {
    pub channels: usize,
    pub kernel: usize,
}

impl EcaConfig {
    /// Kernel derived from the channel count.
    pub fn auto(channels: usize) -> Self {
        EcaConfig {
            channels,
            kernel: eca_kernel_size(channels),
        }
    }
}

/// Efficient channel attention: global average pool, 1-D convolution across
/// channels, sigmoid gate multiplied back onto the map.
pub struct EcaLayer {
    pub prefix: String,
    pub config: EcaConfig,
}

impl EcaLayer {
    pub fn new(prefix: &str, config: EcaConfig) -> Self {
        EcaLayer {
            prefix: prefix.to_string(),
            config,
        }
    }

    pub fn register(&self, store: &mut ParamStore, init: &mut Initializer) {
        store.add_param(
            &format!("{}.w", self.prefix),
            init.fan_in_uniform(&[self.config.kernel], self.config.kernel),
        );
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Tensor,
    ) -> Result<Tensor, AdapterError> {
        let c = g.shape(x)[1];
        if c != self.config.channels {
            return Err(AdapterError::EcaChannels {
                want: self.config.channels,
                got: c,
            });
        }
        let pooled = g.global_avg_pool(x);
        let w = g.param(store, &format!("{}.w", self.prefix));
        let conv = g.conv1d_channels(pooled, w);
        let gate = g.sigmoid(conv);
        Ok(g.mul_channel_gate(x, gate))
    }
}

/// Concatenate adapter outputs into the UNet bottleneck, apply ECA across the
/// combined channels, and reduce back to the bottleneck width with a 1x1
/// conv so the UNet decoder is identical across variants.
pub struct FusionBlock {
    pub eca: EcaLayer,
    pub reduce_prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl FusionBlock {
    pub fn new(unet_channels: usize, adapter_channels: &[usize]) -> Self {
        let in_channels = unet_channels + adapter_channels.iter().sum::<usize>();
        FusionBlock {
            eca: EcaLayer::new("fusion.eca", EcaConfig::auto(in_channels)),
            reduce_prefix: "fusion.reduce".to_string(),
            in_channels,
            out_channels: unet_channels,
        }
    }

    pub fn register(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.eca.register(store, init);
        store.add_param(
            &format!("{}.w", self.reduce_prefix),
            init.fan_in_uniform(&[self.out_channels, self.in_channels, 1, 1], self.in_channels),
        );
        store.add_param(
            &format!("{}.b", self.reduce_prefix),
            init.fan_in_uniform(&[self.out_channels], self.in_channels),
        );
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        unet_bottleneck: &BottleneckTensor,
        adapted: &[Tensor],
    ) -> Result<BottleneckTensor, AdapterError> {
        let base_shape = g.shape(unet_bottleneck.features).to_vec();
        for t in adapted {
            let s = g.shape(*t);
            if s[2] != base_shape[2] || s[3] != base_shape[3] {
                return Err(AdapterError::SpatialMismatch(base_shape.clone(), s.to_vec()));
            }
        }
        let mut parts = vec![unet_bottleneck.features];
        parts.extend_from_slice(adapted);
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_channels(&parts)
        };
        let attended = self.eca.forward(g, store, cat)?;
        let w = g.param(store, &format!("{}.w", self.reduce_prefix));
        let b = g.param(store, &format!("{}.b", self.reduce_prefix));
        let reduced = g.conv2d(attended, w, Some(b), 0);
        Ok(BottleneckTensor {
            features: reduced,
            source: BottleneckSource::Fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_size_matches_pinned_cases() {
        assert_eq!(eca_kernel_size(512), 5); // log2 = 9 -> 5.0, already odd
        assert_eq!(eca_kernel_size(2048), 7); // log2 = 11 -> 6.0 -> next odd
        assert_eq!(eca_kernel_size(2), 1); // 0.5 + 0.5 = 1
        assert_eq!(eca_kernel_size(1536), 7); // ~5.79 -> smallest odd above
    }

    #[test]
    fn kernel_size_is_odd_everywhere() {
        for c in 1..=4096usize {
            assert_eq!(eca_kernel_size(c) % 2, 1, "C={c}");
        }
    }
}
