//! Adversarially refined brain tumor segmentation on multi-modal MRI slices.
//!
//! The pipeline combines three networks: a U-Net segmenter proposes a soft
//! tumor mask, a pretrained inpainting generator fills the masked region with
//! plausible normal tissue, and a patch discriminator scores how normal the
//! reconstruction looks. The discriminator's patch map, gated by a Laplacian
//! edge map of the proposed mask, feeds an adversarial loss back into the
//! segmenter so boundary errors are penalized where the reconstruction still
//! looks abnormal.
//!
//! The crate is organized around that data flow:
//!
//! - [`volume`]: phantom synthesis, NIfTI ingestion, slice-level preprocessing
//! - [`enhance`]: five-stage contrast enhancement applied per modality slice
//! - [`nn`]: the three network architectures with forward/backward passes
//! - [`edge`]: mask dilation, Laplacian filtering, and the downsampled edge gate
//! - [`losses`]: all loss terms, phased introduction, dynamic weight balancing
//! - [`train`]: GAN pretraining, segmenter training, threshold sweeps
//! - [`metrics`]: lesion-wise Dice/sensitivity/specificity, Hausdorff and HD95
//! - [`report`]: run persistence, plots, and tables
//!
//! A narrative guide with runnable examples lives in `book/`; its code blocks
//! are compiled as doc-tests through the [`guide`] module.

pub mod cli;
pub mod config;
pub mod edge;
pub mod enhance;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
