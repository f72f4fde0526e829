//! Stacked vision-language segmentation ensembles with a low-complexity UNet.
//!
//! Frozen CLIP-family encoders feed learned data adapters whose outputs are
//! concatenated into the UNet bottleneck under efficient channel attention;
//! the fused model is fine-tuned jointly with BCE+Dice loss and evaluated
//! with prompt-averaged Dice.

pub mod adapters;
pub mod backbone;
pub mod data;
pub mod ensemble;
pub mod eval;
pub mod losses;
pub mod report;
pub mod trainer;
pub mod unet;

pub use data::{DatasetManifest, PromptPolicy, Sample, Split};
pub use ensemble::{EnsembleConfig, EnsembleModel, EnsembleOutput, Variant};
pub use losses::{DiceScore, LossConfig};
pub use trainer::{TrainConfig, TrainOutcome};
