//! Hybrid attention / state-space encoder for weakly supervised volumetric
//! localization.
//!
//! Each plane of a volume is tokenized ViT-style. Every encoder layer pairs an
//! in-plane Transformer block with a cross-plane Mamba block that scans the
//! patch tokens of all planes as one interleaved sequence. Class-to-patch
//! attention, summed over layers, localizes the target after training on
//! slice-level labels only.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, byte tracker, checkpoints
//! - [`nn`]: parameter store and small layers
//! - [`mamba`]: selective scan and the Mamba block
//! - [`transformer`]: pre-norm ViT block with attention capture
//! - [`cpm`]: plane interleaving and the cross-plane Mamba block
//! - [`encoder`]: hybrid layers, heads, loss, configuration
//! - [`datagen`]: synthetic volumes, volume files, plane sampling
//! - [`localize`]: attention-map aggregation, masks and metrics
//! - [`complexity`]: analytic cost counters and scaling benchmarks
//! - [`pipeline`]: training, inference and evaluation drivers

pub mod complexity;
pub mod cpm;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod localize;
pub mod mamba;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
