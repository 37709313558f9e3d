//! Lesion-wise segmentation quality metrics.
//!
//! Predictions and ground truth are compared per clinical region — whole
//! tumor (labels 1, 2, 4), tumor core (1, 4), enhancing tumor (4) — after
//! collapsing the label volume to a binary mask for each region. Alongside
//! plain voxel counts (Dice, sensitivity, specificity) the suite reports
//! surface distances (Hausdorff and its robust 95th-percentile variant) and
//! lesion-wise scores that match connected components between prediction and
//! truth, so one huge lesion cannot hide several missed small ones.

pub mod components;
pub mod distance;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use components::connected_components;
pub use distance::{bounding_box_diagonal_mm, hausdorff_mm, hd95_mm, surface_distance_mm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    WholeTumor,
    TumorCore,
    Enhancing,
}

pub const ALL_REGIONS: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::Enhancing];

impl Region {
    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::WholeTumor => &[1, 2, 4],
            Region::TumorCore => &[1, 4],
            Region::Enhancing => &[4],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::WholeTumor => "whole_tumor",
            Region::TumorCore => "tumor_core",
            Region::Enhancing => "enhancing",
        }
    }
}

/// One matched prediction/truth lesion pair and its scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionPair {
    /// Component id in the truth labeling (1-based scan order).
    pub truth_component: u32,
    /// Component id in the prediction labeling (1-based scan order).
    pub pred_component: u32,
    pub overlap_voxels: usize,
    pub dice: f64,
    pub sensitivity: f64,
    pub hd95_mm: f64,
}

/// Everything measured for one region of one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: Region,
    /// Voxel-level Dice over the whole region mask.
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// 95th-percentile surface distance over the pooled directed distances;
    /// the volume diagonal when exactly one mask is empty.
    pub hd95_mm: f64,
    /// Classic symmetric Hausdorff distance, same sentinel policy.
    pub hausdorff_mm: f64,
    /// Mean pair Dice with every unmatched component (either side) scored 0.
    pub lesion_wise_dice: f64,
    /// Mean pair sensitivity with every unmatched truth lesion scored 0.
    pub lesion_wise_sensitivity: f64,
    pub matched_pairs: Vec<LesionPair>,
    /// Prediction components left unmatched — lesion-level false alarms.
    pub lesion_false_positives: usize,
    /// Truth components left unmatched — lesion-level misses.
    pub lesion_false_negatives: usize,
    pub true_lesions: usize,
    pub pred_lesions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: String,
    pub regions: Vec<RegionMetrics>,
}

/// Per-region means over a cohort of subject reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: Region,
    pub subjects: usize,
    pub mean_dice: f64,
    pub mean_sensitivity: f64,
    pub mean_specificity: f64,
    pub mean_lesion_wise_dice: f64,
    pub mean_lesion_wise_sensitivity: f64,
    pub mean_hd95_mm: f64,
    pub mean_hausdorff_mm: f64,
}

fn region_mask(labels: ArrayView3<u8>, region: Region) -> Array3<bool> {
    labels.mapv(|l| region.labels().contains(&l))
}

fn binary_counts(pred: &Array3<bool>, truth: &Array3<bool>) -> (usize, usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Greedy overlap matching: truth components are visited in component-id
/// order and each takes the still-unused prediction component with the
/// largest voxel intersection (ties go to the smaller prediction id).
/// Components that share no voxels with the other side stay unmatched.
///
/// Returns `(truth_id, pred_id, overlap)` triples plus per-component sizes.
fn match_lesions(
    pred_labels: &Array3<u32>,
    n_pred: usize,
    truth_labels: &Array3<u32>,
    n_true: usize,
) -> (Vec<(u32, u32, usize)>, Vec<usize>, Vec<usize>) {
    let mut pred_sizes = vec![0usize; n_pred + 1];
    let mut true_sizes = vec![0usize; n_true + 1];
    // Dense overlap table indexed [truth][pred]; component counts at desk
    // scale are tiny.
    let mut overlap = vec![vec![0usize; n_pred + 1]; n_true + 1];
    for (&p, &t) in pred_labels.iter().zip(truth_labels.iter()) {
        pred_sizes[p as usize] += 1;
        true_sizes[t as usize] += 1;
        if p != 0 && t != 0 {
            overlap[t as usize][p as usize] += 1;
        }
    }
    let mut pred_used = vec![false; n_pred + 1];
    let mut pairs = Vec::new();
    for t in 1..=n_true {
        let mut best: Option<(usize, usize)> = None; // (pred id, overlap)
        for p in 1..=n_pred {
            if pred_used[p] || overlap[t][p] == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, cur)) => overlap[t][p] > cur,
            };
            if better {
                best = Some((p, overlap[t][p]));
            }
        }
        if let Some((p, inter)) = best {
            pred_used[p] = true;
            pairs.push((t as u32, p as u32, inter));
        }
    }
    (pairs, pred_sizes, true_sizes)
}

fn component_mask(labels: &Array3<u32>, id: u32) -> Array3<bool> {
    labels.mapv(|l| l == id)
}

/// Evaluate one region of one subject.
pub fn evaluate_region(
    pred: ArrayView3<u8>,
    truth: ArrayView3<u8>,
    spacing: [f64; 3],
    region: Region,
) -> RegionMetrics {
    let p = region_mask(pred, region);
    let t = region_mask(truth, region);
    let (tp, fp, fn_, tn) = binary_counts(&p, &t);
    let dice = if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let sensitivity = if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let specificity = if tn + fp == 0 {
        1.0
    } else {
        tn as f64 / (tn + fp) as f64
    };

    let (pred_labels, n_pred) = connected_components(p.view());
    let (true_labels, n_true) = connected_components(t.view());
    let (matches, pred_sizes, true_sizes) =
        match_lesions(&pred_labels, n_pred, &true_labels, n_true);
    let matched_pairs: Vec<LesionPair> = matches
        .iter()
        .map(|&(t_id, p_id, inter)| {
            let p_mask = component_mask(&pred_labels, p_id);
            let t_mask = component_mask(&true_labels, t_id);
            LesionPair {
                truth_component: t_id,
                pred_component: p_id,
                overlap_voxels: inter,
                dice: 2.0 * inter as f64
                    / (pred_sizes[p_id as usize] + true_sizes[t_id as usize]) as f64,
                sensitivity: inter as f64 / true_sizes[t_id as usize] as f64,
                hd95_mm: hd95_mm(p_mask.view(), t_mask.view(), spacing),
            }
        })
        .collect();
    let matched = matched_pairs.len();
    let lesion_false_positives = n_pred - matched;
    let lesion_false_negatives = n_true - matched;
    let scored = matched + lesion_false_positives + lesion_false_negatives;
    let lesion_wise_dice = if scored == 0 {
        1.0
    } else {
        matched_pairs.iter().map(|m| m.dice).sum::<f64>() / scored as f64
    };
    let lesion_wise_sensitivity = if n_true == 0 {
        1.0
    } else {
        matched_pairs.iter().map(|m| m.sensitivity).sum::<f64>() / n_true as f64
    };

    RegionMetrics {
        region,
        dice,
        sensitivity,
        specificity,
        hd95_mm: hd95_mm(p.view(), t.view(), spacing),
        hausdorff_mm: hausdorff_mm(p.view(), t.view(), spacing),
        lesion_wise_dice,
        lesion_wise_sensitivity,
        matched_pairs,
        lesion_false_positives,
        lesion_false_negatives,
        true_lesions: n_true,
        pred_lesions: n_pred,
    }
}

/// Evaluate all three regions for one subject.
pub fn evaluate_subject(
    subject_id: &str,
    pred: ArrayView3<u8>,
    truth: ArrayView3<u8>,
    spacing: [f64; 3],
) -> Result<SubjectReport> {
    if pred.dim() != truth.dim() {
        return Err(Error::Data(format!(
            "prediction shape {:?} does not match truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    Ok(SubjectReport {
        subject_id: subject_id.to_owned(),
        regions: ALL_REGIONS
            .iter()
            .map(|&r| evaluate_region(pred, truth, spacing, r))
            .collect(),
    })
}

/// Cohort means per region; empty input gives zeroed summaries.
pub fn aggregate(reports: &[SubjectReport]) -> Vec<RegionSummary> {
    ALL_REGIONS
        .iter()
        .map(|&region| {
            let rows: Vec<&RegionMetrics> = reports
                .iter()
                .flat_map(|r| r.regions.iter())
                .filter(|m| m.region == region)
                .collect();
            let n = rows.len();
            let mean = |f: &dyn Fn(&RegionMetrics) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    rows.iter().map(|m| f(m)).sum::<f64>() / n as f64
                }
            };
            RegionSummary {
                region,
                subjects: n,
                mean_dice: mean(&|m| m.dice),
                mean_sensitivity: mean(&|m| m.sensitivity),
                mean_specificity: mean(&|m| m.specificity),
                mean_lesion_wise_dice: mean(&|m| m.lesion_wise_dice),
                mean_lesion_wise_sensitivity: mean(&|m| m.lesion_wise_sensitivity),
                mean_hd95_mm: mean(&|m| m.hd95_mm),
                mean_hausdorff_mm: mean(&|m| m.hausdorff_mm),
            }
        })
        .collect()
}
