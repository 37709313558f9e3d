//! Slice-level tumor detection by sweeping the discriminator's decision
//! threshold.
//!
//! Each slice is reduced to one abnormality score — the peak of the
//! discriminator's patch map, read as `1 − P(patch is normal)` — and
//! compared against a list of thresholds to produce a detection table
//! (threshold, accuracy, sensitivity, TP, FN, FP). Two score sources are
//! supported: the raw discriminator applied directly to the slice, or the
//! full pipeline (segmenter mask → occlusion → inpainting → discriminator,
//! gated by the mask's edge attention). Two threshold orientations are
//! supported: flagging a slice whose normality falls *below* the threshold
//! (sensitivity rises with the threshold) or whose abnormality is *at or
//! above* it (sensitivity falls). Whatever the orientation, the number of
//! tumor slices is fixed by the data, so TP + FN is the same in every row.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::data::{assemble_batch, gather, occlude, prepare_slices};
use crate::config::{RunConfig, SweepConfig, SweepOrientation};
use crate::edge::{edge_attention, gate};
use crate::error::{Error, Result};
use crate::nn::{Discriminator, UNet};
use crate::volume::{TrainingSlice, Volume};

/// One slice's ground truth and score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceScore {
    pub subject_id: String,
    pub slice_index: usize,
    /// Ground truth: the slice contains at least one tumor-labeled pixel.
    pub tumor: bool,
    /// Peak patch abnormality (raw: in [0, 1]; gated: scaled by the edge
    /// attention, so it may exceed 1).
    pub abnormality: f64,
}

/// Detection counts and rates at one threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub orientation: SweepOrientation,
    pub gated: bool,
    pub total_slices: usize,
    pub tumor_slices: usize,
    pub rows: Vec<SweepRow>,
}

/// Slices for detection: every slice of every volume, blank ones included
/// (those are the negatives).
pub fn detection_slices(cfg: &RunConfig, volumes: &[Volume]) -> Result<Vec<TrainingSlice>> {
    let params = cfg.enhance.params();
    let mut slices = Vec::new();
    for vol in volumes {
        slices.extend(prepare_slices(vol, &params, cfg.enhance.degenerate_policy, true)?);
    }
    if slices.is_empty() {
        return Err(Error::Data("no slices to sweep".into()));
    }
    Ok(slices)
}

fn peak(map: &Array2<f64>) -> f64 {
    map.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn slice_truth(slice: &TrainingSlice) -> bool {
    slice.label.iter().any(|&l| l != 0)
}

/// Score slices with the raw discriminator: abnormality = peak over the
/// patch map of `1 − score`.
pub fn score_slices_raw(
    disc: &Discriminator,
    slices: &[TrainingSlice],
    batch_size: usize,
) -> Result<Vec<SliceScore>> {
    let ids: Vec<usize> = (0..slices.len()).collect();
    let mut out = Vec::with_capacity(slices.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = assemble_batch(&gather(slices, chunk))?;
        let scores = disc.infer(&batch.images)?;
        for (i, &slice_id) in chunk.iter().enumerate() {
            let abn = scores
                .index_axis(ndarray::Axis(0), i)
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|s| 1.0 - s);
            out.push(SliceScore {
                subject_id: slices[slice_id].subject_id.clone(),
                slice_index: slices[slice_id].slice_index,
                tumor: slice_truth(&slices[slice_id]),
                abnormality: peak(&abn),
            });
        }
    }
    Ok(out)
}

/// Score slices with the full pipeline: the segmenter's whole-tumor soft
/// mask occludes the slice, the generator inpaints it, the discriminator
/// scores the reconstruction, and the patch abnormality map is gated by the
/// mask's edge attention before taking the peak. A clean reconstruction of
/// a healthy slice scores near zero everywhere; a tumor the generator cannot
/// plausibly paint over leaves high abnormality exactly where the mask edge
/// attention looks.
pub fn score_slices_gated(
    seg: &UNet,
    gen: &UNet,
    disc: &Discriminator,
    slices: &[TrainingSlice],
    batch_size: usize,
) -> Result<Vec<SliceScore>> {
    let ids: Vec<usize> = (0..slices.len()).collect();
    let mut out = Vec::with_capacity(slices.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = assemble_batch(&gather(slices, chunk))?;
        let probs = seg.infer(&batch.images)?;
        let mask = 1.0 - probs.index_axis(ndarray::Axis(1), 0).to_owned();
        let recon = gen.infer(&occlude(&batch.images, &mask, 0.0))?;
        let scores = disc.infer(&recon)?;
        for (i, &slice_id) in chunk.iter().enumerate() {
            let abn = scores
                .index_axis(ndarray::Axis(0), i)
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|s| 1.0 - s);
            let edge = edge_attention(mask.index_axis(ndarray::Axis(0), i));
            let gated = gate(abn.view(), &edge)?;
            out.push(SliceScore {
                subject_id: slices[slice_id].subject_id.clone(),
                slice_index: slices[slice_id].slice_index,
                tumor: slice_truth(&slices[slice_id]),
                abnormality: peak(&gated),
            });
        }
    }
    Ok(out)
}

/// Build the detection table for one score set.
pub fn threshold_sweep(scores: &[SliceScore], sc: &SweepConfig) -> Result<SweepReport> {
    if scores.is_empty() {
        return Err(Error::Data("threshold sweep needs at least one slice".into()));
    }
    let tumor_slices = scores.iter().filter(|s| s.tumor).count();
    let rows: Vec<SweepRow> = sc
        .thresholds
        .iter()
        .map(|&threshold| {
            let (mut tp, mut fn_, mut fp, mut tn) = (0usize, 0usize, 0usize, 0usize);
            for s in scores {
                let flagged = match sc.orientation {
                    SweepOrientation::NormalityBelow => 1.0 - s.abnormality < threshold,
                    SweepOrientation::AbnormalityAtLeast => s.abnormality >= threshold,
                };
                match (s.tumor, flagged) {
                    (true, true) => tp += 1,
                    (true, false) => fn_ += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                }
            }
            SweepRow {
                threshold,
                accuracy: (tp + tn) as f64 / scores.len() as f64,
                sensitivity: if tp + fn_ == 0 {
                    1.0
                } else {
                    tp as f64 / (tp + fn_) as f64
                },
                true_positives: tp,
                false_negatives: fn_,
                false_positives: fp,
                true_negatives: tn,
            }
        })
        .collect();
    // With thresholds sorted ascending, the flagged set can only grow
    // (normality-below) or shrink (abnormality-at-least), so sensitivity is
    // monotone in the matching direction. Violations mean corrupted scores.
    debug_assert!(rows.windows(2).all(|p| match sc.orientation {
        SweepOrientation::NormalityBelow => p[1].sensitivity >= p[0].sensitivity,
        SweepOrientation::AbnormalityAtLeast => p[1].sensitivity <= p[0].sensitivity,
    }));
    Ok(SweepReport {
        orientation: sc.orientation,
        gated: sc.gated,
        total_slices: scores.len(),
        tumor_slices,
        rows,
    })
}
