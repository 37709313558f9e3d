//! A small CPU network engine for the three architectures in this crate.
//!
//! Everything runs in `f64` with explicit forward/backward functions rather
//! than a tape: each layer's backward takes whatever the forward cached and
//! the upstream gradient, and writes parameter gradients into a [`GradBuf`]
//! aligned with the owning network's [`Params`] store. That layout keeps
//! training bitwise reproducible — batch items are processed by rayon but
//! reduced in index order — and lets the training loop price individual loss
//! terms against the head parameters only.
//!
//! Activations are `[batch, channel, height, width]` tensors throughout.

pub mod adam;
pub mod checkpoint;
pub mod disc;
mod init;
pub mod layers;
pub mod ops;
pub mod unet;

use ndarray::{Array4, ArrayD};
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamConfig};
pub use disc::{disc_forward, Discriminator, DiscriminatorConfig};
pub use unet::{gen_forward, seg_forward, GeneratorConfig, HeadKind, UNet, UNetConfig};

/// `[batch, channel, height, width]` activation tensor.
pub type Tensor = Array4<f64>;

/// Index of one named parameter tensor inside a [`Params`] store.
pub type ParamId = usize;

/// Flat, ordered store of a network's parameter tensors. Construction order
/// is the canonical order for gradients, optimizer state, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Zero gradient buffer matching this store shape-for-shape.
    pub fn zero_grads(&self) -> GradBuf {
        GradBuf {
            tensors: self
                .entries
                .iter()
                .map(|(_, v)| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes, and little-endian payloads, for run logs.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            hasher.update(name.as_bytes());
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Per-parameter gradients, index-aligned with a [`Params`] store.
#[derive(Debug, Clone)]
pub struct GradBuf {
    tensors: Vec<ArrayD<f64>>,
}

impl GradBuf {
    /// Accumulate `delta` into the gradient of parameter `id`.
    pub fn add(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        debug_assert_eq!(self.tensors[id].shape(), delta.shape());
        self.tensors[id] += delta;
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Divide every gradient by `n`, e.g. to average per-item contributions.
    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            *t *= factor;
        }
    }

    /// L2 norm over the given parameter subset.
    pub fn l2_norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|&id| self.tensors[id].iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// L2 norm over all gradients.
    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
