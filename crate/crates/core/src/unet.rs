//! The low-complexity UNet ("UNet-D"): four encoder blocks plus a bottleneck
//! block, mirrored decoder with skip concatenation, no pretrained backbone.
//! The bottleneck is exposed so the ensemble can fuse adapter features into
//! it before decoding.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use vlsme_tensor::{Graph, Initializer, ParamStore, Tensor};

pub const UNET_DEPTH: usize = 4;
const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error)]
pub enum UnetError {
    #[error("input {h}x{w} not divisible by {div} (depth-4 UNet)")]
    Resolution { h: usize, w: usize, div: usize },
    #[error("base_channels must be >= 4, got {0}")]
    BaseChannels(usize),
    #[error("bottleneck has {got} channels, decoder expects {want}")]
    BottleneckChannels { got: usize, want: usize },
    #[error("skip stack stage {stage}: expected {want:?}, got {got:?}")]
    SkipShape {
        stage: usize,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "groups")]
pub enum NormKind {
    Batch,
    Group(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnetConfig {
    pub base_channels: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
}

fn default_norm() -> NormKind {
    NormKind::Batch
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            base_channels: 64,
            norm: NormKind::Batch,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<(), UnetError> {
        if self.base_channels < 4 {
            return Err(UnetError::BaseChannels(self.base_channels));
        }
        Ok(())
    }

    /// Channels of the deepest feature map (the fusion site).
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << UNET_DEPTH
    }

    /// Skip channels, shallow to deep: base * 2^i.
    pub fn skip_channels(&self) -> [usize; UNET_DEPTH] {
        [
            self.base_channels,
            self.base_channels * 2,
            self.base_channels * 4,
            self.base_channels * 8,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckSource {
    UnetOnly,
    Fused,
}

/// Handle to the deepest feature map living on a graph.
pub struct BottleneckTensor {
    pub features: Tensor,
    pub source: BottleneckSource,
}

pub struct UnetD {
    pub prefix: String,
    pub config: UnetConfig,
}

struct BlockName(String);

impl UnetD {
    pub fn new(prefix: &str, config: UnetConfig) -> Result<Self, UnetError> {
        config.validate()?;
        Ok(UnetD {
            prefix: prefix.to_string(),
            config,
        })
    }

    fn block_names(&self) -> (Vec<BlockName>, Vec<BlockName>) {
        let enc = (1..=UNET_DEPTH)
            .map(|i| BlockName(format!("{}.enc{i}", self.prefix)))
            .chain(std::iter::once(BlockName(format!("{}.bottleneck", self.prefix))))
            .collect();
        let dec = (1..=UNET_DEPTH)
            .rev()
            .map(|i| BlockName(format!("{}.dec{i}", self.prefix)))
            .collect();
        (enc, dec)
    }

    fn register_conv_block(
        &self,
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) {
        for (idx, ci) in [(1, c_in), (2, c_out)] {
            let fan_in = ci * 9;
            store.add_param(
                &format!("{name}.conv{idx}.w"),
                init.fan_in_uniform(&[c_out, ci, 3, 3], fan_in),
            );
            store.add_param(&format!("{name}.norm{idx}.g"), Initializer::ones(&[c_out]));
            store.add_param(&format!("{name}.norm{idx}.b"), Initializer::zeros(&[c_out]));
            if matches!(self.config.norm, NormKind::Batch) {
                store.add_buffer(
                    &format!("{name}.norm{idx}.running_mean"),
                    Initializer::zeros(&[c_out]),
                );
                store.add_buffer(
                    &format!("{name}.norm{idx}.running_var"),
                    Initializer::ones(&[c_out]),
                );
            }
        }
    }

    pub fn register(&self, store: &mut ParamStore, init: &mut Initializer) {
        let b = self.config.base_channels;
        let (enc, dec) = self.block_names();
        // encoder: in -> b, b -> 2b, ..., 8b -> 16b at the bottleneck
        let mut c_in = 3;
        for (i, name) in enc.iter().enumerate() {
            let c_out = b << i;
            self.register_conv_block(store, init, &name.0, c_in, c_out);
            c_in = c_out;
        }
        // decoder: deepest first, transposed conv then a conv block on the
        // concatenated skip
        for (k, name) in dec.iter().enumerate() {
            let c_out = b << (UNET_DEPTH - 1 - k);
            let c_deep = c_out * 2;
            store.add_param(
                &format!("{}.up.w", name.0),
                init.fan_in_uniform(&[c_deep, c_out, 2, 2], c_deep * 4),
            );
            store.add_param(
                &format!("{}.up.b", name.0),
                init.fan_in_uniform(&[c_out], c_deep * 4),
            );
            self.register_conv_block(store, init, &name.0, c_deep, c_out);
        }
        store.add_param(
            &format!("{}.head.w", self.prefix),
            init.fan_in_uniform(&[1, b, 1, 1], b),
        );
        store.add_param(
            &format!("{}.head.b", self.prefix),
            init.fan_in_uniform(&[1], b),
        );
    }

    fn norm(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        name: &str,
        x: Tensor,
        training: bool,
    ) -> Tensor {
        let gamma = g.param(store, &format!("{name}.g"));
        let beta = g.param(store, &format!("{name}.b"));
        match self.config.norm {
            NormKind::Group(groups) => g.groupnorm2d(x, gamma, beta, groups, BN_EPS),
            NormKind::Batch => {
                if training {
                    let shape = g.shape(x).to_vec();
                    let (y, mean, var) = g.batchnorm2d_train(x, gamma, beta, BN_EPS);
                    let m = shape[0] * shape[2] * shape[3];
                    let unbias = if m > 1 { m as f32 / (m as f32 - 1.0) } else { 1.0 };
                    update_running(
                        store.buffer_mut(&format!("{name}.running_mean")),
                        &mean,
                        BN_MOMENTUM,
                        1.0,
                    );
                    update_running(
                        store.buffer_mut(&format!("{name}.running_var")),
                        &var,
                        BN_MOMENTUM,
                        unbias,
                    );
                    y
                } else {
                    let mean = store
                        .buffer(&format!("{name}.running_mean"))
                        .clone()
                        .into_dimensionality()
                        .unwrap();
                    let var = store
                        .buffer(&format!("{name}.running_var"))
                        .clone()
                        .into_dimensionality()
                        .unwrap();
                    g.batchnorm2d_eval(x, gamma, beta, &mean, &var, BN_EPS)
                }
            }
        }
    }

    fn conv_block(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        name: &str,
        x: Tensor,
        training: bool,
    ) -> Tensor {
        let mut x = x;
        for idx in [1, 2] {
            let w = g.param(store, &format!("{name}.conv{idx}.w"));
            x = g.conv2d(x, w, None, 1);
            x = self.norm(g, store, &format!("{name}.norm{idx}"), x, training);
            x = g.relu(x);
        }
        x
    }

    /// Encoder pass: returns the bottleneck and the four pre-pool skip maps
    /// (shallow to deep).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        image: Tensor,
        training: bool,
    ) -> Result<(BottleneckTensor, Vec<Tensor>), UnetError> {
        let shape = g.shape(image).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let div = 1 << UNET_DEPTH;
        if h % div != 0 || w % div != 0 {
            return Err(UnetError::Resolution { h, w, div });
        }
        let (enc, _) = self.block_names();
        let mut skips = Vec::with_capacity(UNET_DEPTH);
        let mut x = image;
        for (i, name) in enc.iter().enumerate() {
            x = self.conv_block(g, store, &name.0, x, training);
            if i < UNET_DEPTH {
                skips.push(x);
                x = g.maxpool2x2(x);
            }
        }
        Ok((
            BottleneckTensor {
                features: x,
                source: BottleneckSource::UnetOnly,
            },
            skips,
        ))
    }

    /// Decoder pass: consumes the skip stack in reverse order and produces
    /// single-channel logits at the input resolution.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        bottleneck: &BottleneckTensor,
        skips: &[Tensor],
        training: bool,
    ) -> Result<Tensor, UnetError> {
        let want_c = self.config.bottleneck_channels();
        let got_c = g.shape(bottleneck.features)[1];
        if got_c != want_c {
            return Err(UnetError::BottleneckChannels {
                got: got_c,
                want: want_c,
            });
        }
        let (_, dec) = self.block_names();
        let skip_c = self.config.skip_channels();
        let mut x = bottleneck.features;
        for (k, name) in dec.iter().enumerate() {
            let stage = UNET_DEPTH - 1 - k; // 3,2,1,0 into skip stack
            let up_w = g.param(store, &format!("{}.up.w", name.0));
            let up_b = g.param(store, &format!("{}.up.b", name.0));
            x = g.conv_transpose2x2(x, up_w, Some(up_b));
            let skip = skips[stage];
            let want = [g.shape(x)[0], skip_c[stage], g.shape(x)[2], g.shape(x)[3]];
            if g.shape(skip) != want {
                return Err(UnetError::SkipShape {
                    stage,
                    want: want.to_vec(),
                    got: g.shape(skip).to_vec(),
                });
            }
            x = g.concat_channels(&[x, skip]);
            x = self.conv_block(g, store, &name.0, x, training);
        }
        let head_w = g.param(store, &format!("{}.head.w", self.prefix));
        let head_b = g.param(store, &format!("{}.head.b", self.prefix));
        Ok(g.conv2d(x, head_w, Some(head_b), 0))
    }
}

fn update_running(buffer: &mut ndarray::ArrayD<f32>, batch: &Array1<f32>, momentum: f32, scale: f32) {
    let buf = buffer.as_slice_mut().unwrap();
    for (b, &v) in buf.iter_mut().zip(batch.iter()) {
        *b = (1.0 - momentum) * *b + momentum * v * scale;
    }
}
