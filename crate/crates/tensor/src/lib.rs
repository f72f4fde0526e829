//! Deterministic CPU tensor engine with reverse-mode autodiff.
//!
//! The engine is a define-by-run tape: every forward op pushes a node onto a
//! [`Graph`] together with a closure computing its input gradients. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and collects
//! gradients for every parameter leaf.
//!
//! Everything is f32, single-threaded, and iterates arrays in row-major
//! order, so results are bit-reproducible for a fixed input and seed.
//! Matrix products go through `ndarray::dot` (matrixmultiply), which is
//! likewise deterministic.

mod archive;
mod checksum;
mod graph;
mod init;
mod ops_conv;
mod ops_loss;
mod ops_nn;
mod ops_pointwise;
mod optim;
mod store;

pub use archive::{load_archive, save_archive, ArchiveError, TensorArchive};
pub use checksum::checksum_array;
pub use graph::{Gradients, Graph, Tensor};
pub use init::Initializer;
pub use ops_conv::bilinear_resize_plain;
pub use ops_nn::{attention_rows, layernorm_rows, softmax_rows_inplace};
pub use ops_pointwise::{gelu_scalar, sigmoid_scalar};
pub use optim::{AdamW, AdamWConfig};
pub use store::ParamStore;
