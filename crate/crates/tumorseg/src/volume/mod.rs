//! Multi-modal volumes and slice-level preprocessing.
//!
//! A [`Volume`] couples a 4-channel intensity array (T1, T1ce, T2, FLAIR)
//! with an aligned integer label volume using the BraTS label encoding
//! {0: background, 1: NCR/NET, 2: ED, 4: ET}. Preprocessing produces a
//! per-subject [`SlicePlan`]: which slices to keep and the bounding box that
//! crops every kept slice to the smallest rectangle containing the brain.
//! The bounding box is computed per subject (not per slice) so that all
//! slices of one subject share a spatial shape and can be batched.

mod container;
mod nifti_io;
mod phantom;

pub use container::{load_dataset, load_volume, save_dataset, save_volume, DatasetManifest};
pub use nifti_io::load_nifti;
pub use phantom::{synth_dataset, PhantomSpec};

use ndarray::{s, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of MRI modalities carried by every volume.
pub const N_MODALITIES: usize = 4;

/// Channel order used throughout the pipeline.
pub const MODALITY_NAMES: [&str; N_MODALITIES] = ["t1", "t1ce", "t2", "flair"];

/// Allowed label values (BraTS encoding).
pub const VALID_LABELS: [u8; 4] = [0, 1, 2, 4];

/// A multi-modal 3D scan with an aligned label volume.
#[derive(Debug, Clone)]
pub struct Volume {
    /// Intensities, shape `[4, S, H, W]`, arbitrary scanner units.
    pub modalities: Array4<f32>,
    /// Labels, shape `[S, H, W]`, values in {0, 1, 2, 4}.
    pub labels: Array3<u8>,
    /// Voxel spacing in mm: (slice, row, column).
    pub voxel_spacing: [f64; 3],
    pub subject_id: String,
}

impl Volume {
    /// Build a volume, checking the type invariants: aligned shapes, finite
    /// intensities, and label values restricted to {0, 1, 2, 4}.
    pub fn new(
        modalities: Array4<f32>,
        labels: Array3<u8>,
        voxel_spacing: [f64; 3],
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let (c, s, h, w) = modalities.dim();
        if c != N_MODALITIES {
            return Err(Error::Data(format!(
                "volume {subject_id}: expected {N_MODALITIES} modalities, got {c}"
            )));
        }
        if labels.dim() != (s, h, w) {
            return Err(Error::Data(format!(
                "volume {subject_id}: labels shape {:?} does not match modalities [{s}, {h}, {w}]",
                labels.dim()
            )));
        }
        if let Some(bad) = modalities.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "volume {subject_id}: non-finite intensity {bad}"
            )));
        }
        if let Some(bad) = labels.iter().find(|v| !VALID_LABELS.contains(v)) {
            return Err(Error::Data(format!(
                "volume {subject_id}: invalid label value {bad}"
            )));
        }
        Ok(Self {
            modalities,
            labels,
            voxel_spacing,
            subject_id,
        })
    }

    /// Number of slices.
    pub fn n_slices(&self) -> usize {
        self.modalities.dim().1
    }

    /// Spatial shape (H, W).
    pub fn spatial_shape(&self) -> (usize, usize) {
        let (_, _, h, w) = self.modalities.dim();
        (h, w)
    }

    /// True if any modality has intensity > 0 at (slice, row, col).
    fn is_brain(&self, slice: usize, row: usize, col: usize) -> bool {
        (0..N_MODALITIES).any(|m| self.modalities[[m, slice, row, col]] > 0.0)
    }
}

/// Inclusive pixel bounds of the brain region: (row_min, row_max, col_min, col_max).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

/// Per-subject record of retained slices and crop bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicePlan {
    pub subject_id: String,
    /// Strictly increasing slice indices retained for training.
    pub kept_slices: Vec<usize>,
    /// Minimal rectangle containing every nonzero brain pixel across kept
    /// slices. `None` when no kept slice contains brain tissue.
    pub bbox: Option<BBox>,
}

/// One training item: a cropped 4-channel image with its cropped label map.
#[derive(Debug, Clone)]
pub struct TrainingSlice {
    pub subject_id: String,
    pub slice_index: usize,
    /// Shape `[4, bbox.height(), bbox.width()]`.
    pub image: Array3<f32>,
    /// Shape `[bbox.height(), bbox.width()]`.
    pub label: Array2<u8>,
}

/// Smallest rectangle containing every pixel with any-modality intensity > 0,
/// scanned across all slices.
pub fn compute_bbox(volume: &Volume) -> Result<BBox> {
    let all: Vec<usize> = (0..volume.n_slices()).collect();
    compute_bbox_over(volume, &all)
        .ok_or_else(|| Error::Data(format!("volume {}: no brain pixels", volume.subject_id)))
}

/// Bounding box restricted to a subset of slices. `None` if those slices hold
/// no brain pixels.
pub fn compute_bbox_over(volume: &Volume, slices: &[usize]) -> Option<BBox> {
    let (h, w) = volume.spatial_shape();
    let mut bounds: Option<BBox> = None;
    for &sl in slices {
        for row in 0..h {
            for col in 0..w {
                if volume.is_brain(sl, row, col) {
                    let b = bounds.get_or_insert(BBox {
                        row_min: row,
                        row_max: row,
                        col_min: col,
                        col_max: col,
                    });
                    b.row_min = b.row_min.min(row);
                    b.row_max = b.row_max.max(row);
                    b.col_min = b.col_min.min(col);
                    b.col_max = b.col_max.max(col);
                }
            }
        }
    }
    bounds
}

/// Keep exactly the slices whose label map contains at least one nonzero
/// label; slices with blank segmentation masks are dropped. The bounding box
/// is computed across the kept slices only.
pub fn filter_blank_slices(volume: &Volume) -> SlicePlan {
    let kept: Vec<usize> = (0..volume.n_slices())
        .filter(|&sl| volume.labels.slice(s![sl, .., ..]).iter().any(|&v| v != 0))
        .collect();
    let bbox = compute_bbox_over(volume, &kept);
    SlicePlan {
        subject_id: volume.subject_id.clone(),
        kept_slices: kept,
        bbox,
    }
}

/// Keep all slices (GAN pretraining data is not blank-filtered).
pub fn keep_all_slices(volume: &Volume) -> Result<SlicePlan> {
    let kept: Vec<usize> = (0..volume.n_slices()).collect();
    let bbox = Some(compute_bbox(volume)?);
    Ok(SlicePlan {
        subject_id: volume.subject_id.clone(),
        kept_slices: kept,
        bbox,
    })
}

/// Crop every kept slice to the plan's bounding box, keeping the fixed
/// channel order [T1, T1ce, T2, FLAIR].
pub fn to_training_slices(volume: &Volume, plan: &SlicePlan) -> Result<Vec<TrainingSlice>> {
    if plan.subject_id != volume.subject_id {
        return Err(Error::Data(format!(
            "plan for {} applied to volume {}",
            plan.subject_id, volume.subject_id
        )));
    }
    let bbox = match plan.bbox {
        Some(b) => b,
        None => return Ok(Vec::new()),
    };
    let (h, w) = volume.spatial_shape();
    if bbox.row_max >= h || bbox.col_max >= w {
        return Err(Error::Data(format!(
            "plan bbox {bbox:?} exceeds volume shape ({h}, {w})"
        )));
    }
    plan.kept_slices
        .iter()
        .map(|&sl| {
            if sl >= volume.n_slices() {
                return Err(Error::Data(format!(
                    "plan slice {sl} out of range for volume with {} slices",
                    volume.n_slices()
                )));
            }
            let image = volume
                .modalities
                .slice(s![
                    ..,
                    sl,
                    bbox.row_min..=bbox.row_max,
                    bbox.col_min..=bbox.col_max
                ])
                .to_owned();
            let label = volume
                .labels
                .slice(s![sl, bbox.row_min..=bbox.row_max, bbox.col_min..=bbox.col_max])
                .to_owned();
            Ok(TrainingSlice {
                subject_id: volume.subject_id.clone(),
                slice_index: sl,
                image,
                label,
            })
        })
        .collect()
}
