//! From dataset volumes to training tensors.
//!
//! Training consumes full-frame slices (uniform shape within a dataset) so
//! that slices from different subjects batch together; bounding-box cropping
//! is an inference-time concern. Slice intensities arrive enhanced to
//! [0, 1] and are mapped to the tanh range [−1, 1] at batch assembly, the
//! convention shared by all three networks.

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::enhance::{enhance_volume, DegeneratePolicy, EnhanceParams};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume::{
    filter_blank_slices, keep_all_slices, to_training_slices, BBox, TrainingSlice, Volume,
    VALID_LABELS,
};

/// Class index of a label value: its position in [`VALID_LABELS`]
/// (0, 1, 2, 4 → classes 0–3). Labels are validated at volume construction,
/// so an unknown value here is a programming error.
pub fn class_index(label: u8) -> usize {
    VALID_LABELS
        .iter()
        .position(|&l| l == label)
        .unwrap_or_else(|| panic!("label {label} escaped volume validation"))
}

/// Inverse of [`class_index`].
pub fn class_label(index: usize) -> u8 {
    VALID_LABELS[index]
}

/// Deterministic subject-level split: shuffles indices with a seeded stream
/// and carves off the validation set. Subjects never straddle the split, so
/// slices of one brain cannot leak between train and validation.
pub fn split_subjects(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_val = if n < 2 || val_fraction <= 0.0 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    };
    let val = indices.split_off(n - n_val);
    (indices, val)
}

/// Enhance a volume and emit full-frame training slices. `keep_blank`
/// retains label-free slices (pretraining data); otherwise only slices with
/// at least one labeled pixel survive.
pub fn prepare_slices(
    volume: &Volume,
    params: &EnhanceParams,
    policy: DegeneratePolicy,
    keep_blank: bool,
) -> Result<Vec<TrainingSlice>> {
    let enhanced = enhance_volume(volume, params, policy)?;
    let mut plan = if keep_blank {
        keep_all_slices(&enhanced)?
    } else {
        filter_blank_slices(&enhanced)
    };
    let (h, w) = enhanced.spatial_shape();
    plan.bbox = Some(BBox {
        row_min: 0,
        row_max: h - 1,
        col_min: 0,
        col_max: w - 1,
    });
    to_training_slices(&enhanced, &plan)
}

/// One assembled minibatch.
pub struct SliceBatch {
    /// `[n, 4, H, W]` in [−1, 1].
    pub images: Tensor,
    /// `[n, 4, H, W]` one-hot class targets.
    pub onehot: Array4<f64>,
    /// `[n, H, W]` binary any-tumor mask.
    pub tumor_mask: Array3<f64>,
    /// Total tumor voxels in the batch (the size-consistency target).
    pub size_label: f64,
}

pub fn assemble_batch(slices: &[&TrainingSlice]) -> Result<SliceBatch> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let (_, h, w) = first.image.dim();
    let n = slices.len();
    let mut images = Tensor::zeros((n, 4, h, w));
    let mut onehot = Array4::zeros((n, 4, h, w));
    let mut tumor_mask = Array3::zeros((n, h, w));
    for (i, sl) in slices.iter().enumerate() {
        if sl.image.dim() != first.image.dim() {
            return Err(Error::Data(format!(
                "slice shape {:?} does not match batch shape {:?}",
                sl.image.dim(),
                first.image.dim()
            )));
        }
        for (idx, &v) in sl.image.indexed_iter() {
            images[[i, idx.0, idx.1, idx.2]] = 2.0 * f64::from(v) - 1.0;
        }
        for ((r, c), &label) in sl.label.indexed_iter() {
            onehot[[i, class_index(label), r, c]] = 1.0;
            if label != 0 {
                tumor_mask[[i, r, c]] = 1.0;
            }
        }
    }
    let size_label = tumor_mask.sum();
    Ok(SliceBatch {
        images,
        onehot,
        tumor_mask,
        size_label,
    })
}

/// Deterministic epoch batching: a per-epoch stream shuffles item indices,
/// which are then cut into `batch_size` chunks (last chunk may be short).
/// `steps_cap = 0` keeps the full pass.
pub fn epoch_batches(
    n_items: usize,
    batch_size: usize,
    steps_cap: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n_items).collect();
    let mut rng =
        ChaCha20Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    indices.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = indices
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    if steps_cap > 0 {
        batches.truncate(steps_cap);
    }
    batches
}

/// Gather batch slices by index.
pub fn gather<'a>(slices: &'a [TrainingSlice], indices: &[usize]) -> Vec<&'a TrainingSlice> {
    indices.iter().map(|&i| &slices[i]).collect()
}

/// Broadcast a `[n, H, W]` mask over the channel axis.
pub fn broadcast_mask(mask: &Array3<f64>, channels: usize) -> Array4<f64> {
    let (n, h, w) = mask.dim();
    let mut out = Array4::zeros((n, channels, h, w));
    for c in 0..channels {
        out.index_axis_mut(Axis(1), c).assign(mask);
    }
    out
}

/// Blend images towards a fill value where the mask is set:
/// `out = images·(1−m) + fill·m`. The mask is `[n, H, W]` and is broadcast
/// over channels; soft masks in (0, 1) blend proportionally. With images in
/// the tanh range, `fill = 0.0` is mid-gray — the convention used when
/// hiding suspected tumor tissue before inpainting.
pub fn occlude(images: &Tensor, mask: &Array3<f64>, fill: f64) -> Tensor {
    let (n, _, h, w) = images.dim();
    assert_eq!(mask.dim(), (n, h, w), "mask shape must match images");
    let mut out = images.clone();
    for ((i, _, r, c), v) in out.indexed_iter_mut() {
        let m = mask[[i, r, c]];
        *v = *v * (1.0 - m) + fill * m;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_dataset, PhantomSpec};

    fn tiny_spec(with_seed: u64) -> PhantomSpec {
        PhantomSpec {
            image_size: 32,
            n_slices: 3,
            n_subjects: 2,
            tumor_radius_range: (3.0, 6.0),
            seed: with_seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn class_mapping_round_trips() {
        for (i, &l) in VALID_LABELS.iter().enumerate() {
            assert_eq!(class_index(l), i);
            assert_eq!(class_label(i), l);
        }
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let (tr1, va1) = split_subjects(12, 0.25, 9);
        let (tr2, va2) = split_subjects(12, 0.25, 9);
        assert_eq!((&tr1, &va1), (&tr2, &va2));
        assert_eq!(va1.len(), 3);
        assert_eq!(tr1.len(), 9);
        let mut all: Vec<usize> = tr1.iter().chain(va1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        let (_, va_other) = split_subjects(12, 0.25, 10);
        // Different seed, different membership (overwhelmingly likely).
        assert!(va1 != va_other || split_subjects(12, 0.25, 11).1 != va1);
    }

    #[test]
    fn split_edge_cases() {
        assert_eq!(split_subjects(1, 0.5, 0).1.len(), 0);
        assert_eq!(split_subjects(5, 0.0, 0).1.len(), 0);
        // Rounds to at least one, at most n-1.
        assert_eq!(split_subjects(2, 0.1, 0).1.len(), 1);
        assert_eq!(split_subjects(3, 0.99, 0).1.len(), 2);
    }

    #[test]
    fn prepared_slices_are_full_frame_and_in_unit_range() {
        let vol = &synth_dataset(&tiny_spec(3), true).unwrap()[0];
        let slices =
            prepare_slices(vol, &EnhanceParams::default(), DegeneratePolicy::Skip, false).unwrap();
        assert!(!slices.is_empty());
        for sl in &slices {
            assert_eq!(sl.image.dim(), (4, 32, 32));
            assert!(sl.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(sl.label.iter().any(|&l| l != 0), "blank slice kept");
        }
        let all = prepare_slices(vol, &EnhanceParams::default(), DegeneratePolicy::Skip, true)
            .unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn batch_assembly_shapes_ranges_and_targets() {
        let vol = &synth_dataset(&tiny_spec(4), true).unwrap()[0];
        let slices =
            prepare_slices(vol, &EnhanceParams::default(), DegeneratePolicy::Skip, true).unwrap();
        let refs: Vec<&TrainingSlice> = slices.iter().collect();
        let batch = assemble_batch(&refs).unwrap();
        let n = refs.len();
        assert_eq!(batch.images.dim(), (n, 4, 32, 32));
        assert!(batch.images.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // One-hot: exactly one class per pixel.
        for i in 0..n {
            for r in 0..32 {
                for c in 0..32 {
                    let s: f64 = (0..4).map(|k| batch.onehot[[i, k, r, c]]).sum();
                    assert_eq!(s, 1.0);
                    let is_tumor = batch.onehot[[i, 0, r, c]] == 0.0;
                    assert_eq!(batch.tumor_mask[[i, r, c]] == 1.0, is_tumor);
                }
            }
        }
        let hand_count: f64 = refs
            .iter()
            .map(|sl| sl.label.iter().filter(|&&l| l != 0).count() as f64)
            .sum();
        assert_eq!(batch.size_label, hand_count);
        assert!(hand_count > 0.0);
    }

    #[test]
    fn mixed_shape_batches_are_rejected() {
        let a = &synth_dataset(&tiny_spec(5), true).unwrap()[0];
        let b = &synth_dataset(
            &PhantomSpec {
                image_size: 16,
                tumor_radius_range: (3.0, 5.0),
                ..tiny_spec(5)
            },
            true,
        )
        .unwrap()[0];
        let sa = prepare_slices(a, &EnhanceParams::default(), DegeneratePolicy::Skip, true).unwrap();
        let sb = prepare_slices(b, &EnhanceParams::default(), DegeneratePolicy::Skip, true).unwrap();
        let mixed = vec![&sa[0], &sb[0]];
        assert!(assemble_batch(&mixed).is_err());
        assert!(assemble_batch(&[]).is_err());
    }

    #[test]
    fn epoch_batches_partition_and_cap() {
        let batches = epoch_batches(10, 4, 0, 1, 0);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(10, 4, 2, 1, 0).len(), 2);
        // Same (seed, epoch) reproduces; different epoch reshuffles.
        assert_eq!(epoch_batches(10, 4, 0, 1, 3), epoch_batches(10, 4, 0, 1, 3));
        assert_ne!(epoch_batches(100, 100, 0, 1, 0), epoch_batches(100, 100, 0, 1, 1));
    }

    #[test]
    fn broadcast_fills_every_channel() {
        let mask = Array3::from_shape_fn((2, 3, 3), |(i, r, c)| (i + r + c) as f64);
        let wide = broadcast_mask(&mask, 4);
        assert_eq!(wide.dim(), (2, 4, 3, 3));
        for c in 0..4 {
            assert_eq!(wide.index_axis(Axis(1), c), mask);
        }
    }

    #[test]
    fn occlusion_blends_towards_the_fill_value() {
        let images = Tensor::from_shape_fn((2, 4, 3, 3), |(i, c, r, w)| {
            (i + c + r + w) as f64 / 10.0 - 0.5
        });
        // Zero mask: identity.
        let zero = Array3::zeros((2, 3, 3));
        assert_eq!(occlude(&images, &zero, 0.7), images);
        // Full mask: constant fill everywhere, on every channel.
        let one = Array3::ones((2, 3, 3));
        let filled = occlude(&images, &one, 0.7);
        assert!(filled.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        // Soft mask: per-pixel convex blend, verified against a hand loop.
        let soft = Array3::from_shape_fn((2, 3, 3), |(i, r, c)| (i + r + c) as f64 / 8.0);
        let blended = occlude(&images, &soft, -1.0);
        for ((i, ch, r, c), &v) in blended.indexed_iter() {
            let m = soft[[i, r, c]];
            let expected = images[[i, ch, r, c]] * (1.0 - m) + (-1.0) * m;
            assert!((v - expected).abs() < 1e-15);
        }
    }
}
