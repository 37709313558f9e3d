//! Segmenter training with phased, gradient-balanced losses.
//!
//! Phase 1 trains the U-Net as an ordinary segmenter (cross-entropy + soft
//! Dice). Phase 2 adds three mask-level regularizers — sparsity, size
//! consistency, and the adversarial feedback term — combined with dynamic
//! weights derived from smoothed per-term gradient norms at the network
//! head, so no term drowns out the others.
//!
//! The adversarial term reuses the frozen inpainting pair: the proposed
//! soft mask occludes the scan, the generator fills the hole, and the
//! discriminator scores how *abnormal* the filled scan still looks near the
//! mask boundary. Gradients flow through both frozen networks back to the
//! mask, but never update them.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis, Zip};
use serde::Serialize;
use serde_json::json;

use super::data::{assemble_batch, epoch_batches, gather, occlude, prepare_slices, split_subjects};
use super::infer::predict_probs;
use super::schedule::{lr_schedule, EarlyStopper, StopDecision};
use crate::config::RunConfig;
use crate::edge::edge_attention;
use crate::error::{Error, Result};
use crate::losses::{
    adv_feedback_loss, dice_loss, multiclass_ce, size_loss, sparsity_loss, total_loss, LossLedger,
    Phase,
};
use crate::nn::checkpoint::{save_unet, KIND_SEGMENTER};
use crate::nn::{Adam, AdamConfig, Discriminator, Tensor, UNet};
use crate::report::JsonlLogger;
use crate::volume::{TrainingSlice, Volume};

/// What segmentation training produced.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Best validation whole-tumor soft Dice seen during the run.
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub train_subjects: usize,
    pub val_subjects: usize,
    /// Which subjects were held out, so downstream evaluation can score the
    /// checkpoint on data the optimizer never saw.
    pub val_subject_ids: Vec<String>,
    pub segmenter_path: PathBuf,
    pub segmenter_hash: String,
}

/// Per-term gradients in probability space, all `[n, classes, H, W]`.
struct TermGrads {
    seg: Tensor,
    sparsity: Tensor,
    adv: Tensor,
    size: Tensor,
}

/// Soft any-tumor mask `M = 1 − P(background)` for a probability batch.
fn soft_mask(probs: &Array4<f64>) -> Array3<f64> {
    probs.index_axis(Axis(1), 0).mapv(|p| 1.0 - p)
}

/// Write a mask-space gradient into probability space: `∂M/∂p₀ = −1`.
fn mask_grad_to_probs(target: &mut Tensor, d_mask: &Array3<f64>, scale: f64) {
    let mut ch0 = target.index_axis_mut(Axis(1), 0);
    Zip::from(&mut ch0).and(d_mask).for_each(|g, &d| *g -= scale * d);
}

/// The adversarial feedback term for one batch: occlude with the proposed
/// mask, inpaint, score, gate by mask-boundary attention. Returns the mean
/// loss and its gradient w.r.t. the soft mask; the generator and
/// discriminator stay frozen.
fn adversarial_term(
    images: &Tensor,
    mask: &Array3<f64>,
    gen: &UNet,
    disc: &Discriminator,
) -> Result<(f64, Array3<f64>)> {
    let (n, channels, h, w) = images.dim();
    let occluded = occlude(images, mask, 0.0);

    let (recon, gen_trace) = gen.forward_t(&occluded)?;
    let (scores, disc_trace) = disc.forward_t(&recon)?;

    // Patch abnormality a = 1 − D, gated per item by the edge map of its
    // own mask. The gate is a fixed attention weight, not a gradient path.
    let mut value = 0.0;
    let mut d_scores = Array4::zeros(scores.raw_dim());
    for i in 0..n {
        let abnormality = scores.index_axis(Axis(0), i).index_axis(Axis(0), 0).mapv(|s| 1.0 - s);
        let edge = edge_attention(mask.index_axis(Axis(0), i));
        let (v, d_abn) = adv_feedback_loss(abnormality.view(), &edge)?;
        value += v / n as f64;
        let mut d_i = d_scores.index_axis_mut(Axis(0), i);
        let mut d_i0 = d_i.index_axis_mut(Axis(0), 0);
        Zip::from(&mut d_i0)
            .and(&d_abn)
            .for_each(|g, &d| *g = -d / n as f64);
    }

    let d_recon = disc.backward(&disc_trace, &d_scores, None);
    let d_occluded = gen.backward(&gen_trace, &d_recon, None);
    // occ = x·(1−M) + 0·M, so ∂L/∂M = −Σ_channels ∂L/∂occ · x.
    let mut d_mask = Array3::zeros((n, h, w));
    for c in 0..channels {
        Zip::from(&mut d_mask)
            .and(&d_occluded.index_axis(Axis(1), c))
            .and(&images.index_axis(Axis(1), c))
            .for_each(|g, &docc, &x| *g -= docc * x);
    }
    Ok((value, d_mask))
}

fn training_slices(cfg: &RunConfig, volumes: &[Volume], subjects: &[usize]) -> Result<Vec<TrainingSlice>> {
    let params = cfg.enhance.params();
    let mut slices = Vec::new();
    for &s in subjects {
        slices.extend(prepare_slices(
            &volumes[s],
            &params,
            cfg.enhance.degenerate_policy,
            false,
        )?);
    }
    if slices.is_empty() {
        return Err(Error::Data(
            "no tumor-bearing training slices after filtering".into(),
        ));
    }
    Ok(slices)
}

/// Mean whole-tumor *soft* Dice over the validation subjects: the
/// probability mask `1 − P(background)` against the binary tumor truth,
/// one score per volume. Monitoring the soft score keeps the curve smooth
/// under an untrained or hesitant network, where hard argmax labels would
/// jump between 0 and 1.
fn validation_soft_dice(
    cfg: &RunConfig,
    seg: &UNet,
    volumes: &[Volume],
    val: &[usize],
) -> Result<f64> {
    let params = cfg.enhance.params();
    let mut total = 0.0;
    for &s in val {
        let vol = &volumes[s];
        let probs = predict_probs(seg, vol, &params, cfg.enhance.degenerate_policy)?;
        let mask = soft_mask(&probs);
        let truth = vol.labels.mapv(|l| f64::from(u8::from(l != 0)));
        let (loss, _) = dice_loss(mask.view(), truth.view());
        total += 1.0 - loss;
    }
    Ok(total / val.len().max(1) as f64)
}

/// Train the segmenter against frozen `gen`/`disc`, writing
/// `segmenter.ck` (best validation weights) and `train_log.jsonl` into
/// `out_dir`. Deterministic for a fixed config.
pub fn train_seg(
    cfg: &RunConfig,
    tumors: &[Volume],
    gen: &UNet,
    disc: &Discriminator,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let tc = &cfg.train;
    if tumors.is_empty() {
        return Err(Error::Data("no tumor volumes to train on".into()));
    }
    let (train_subj, val_subj) = split_subjects(tumors.len(), cfg.data.val_fraction, cfg.data.seed);
    if val_subj.is_empty() {
        return Err(Error::Data(
            "validation split is empty; provide at least two subjects".into(),
        ));
    }
    let slices = training_slices(cfg, tumors, &train_subj)?;
    let val_subject_ids: Vec<String> =
        val_subj.iter().map(|&s| tumors[s].subject_id.clone()).collect();

    let mut seg = UNet::build(cfg.model.seg_config(), cfg.model.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: tc.weight_decay,
            ..AdamConfig::default()
        },
        &seg.params,
    );
    let mut ledger = LossLedger::new(tc.loss_constants());
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best_params = seg.params.clone();
    let mut best_epoch = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = JsonlLogger::create(&out_dir.join("train_log.jsonl"))?;

    for epoch in 0..tc.epochs {
        epochs_run = epoch + 1;
        let lr = lr_schedule(tc.base_lr, epoch, tc.epochs, tc.lr_decay_power);
        let adversarial_phase = epoch >= ledger.constants.phase_switch_epoch;
        let batches = epoch_batches(slices.len(), tc.batch_size, tc.steps_per_epoch, tc.seed, epoch);

        let mut sums = [0.0f64; 6]; // total, ce, dice, sparsity, adv, size
        for batch_ids in &batches {
            let batch = assemble_batch(&gather(&slices, batch_ids))?;
            let n = batch_ids.len() as f64;
            let (probs, trace) = seg.forward_t(&batch.images)?;
            let mask = soft_mask(&probs);

            // Segmentation term: batch-mean CE + batch-mean soft Dice.
            let mut d_seg = Tensor::zeros(probs.raw_dim());
            let (mut v_ce, mut v_dice) = (0.0, 0.0);
            for i in 0..batch_ids.len() {
                let (v, g) = multiclass_ce(
                    probs.index_axis(Axis(0), i),
                    batch.onehot.index_axis(Axis(0), i),
                );
                v_ce += v / n;
                let mut d_i = d_seg.index_axis_mut(Axis(0), i);
                Zip::from(&mut d_i).and(&g).for_each(|a, &b| *a += b / n);

                let (v, d_m) = dice_loss(
                    mask.index_axis(Axis(0), i),
                    batch.tumor_mask.index_axis(Axis(0), i),
                );
                v_dice += v / n;
                let mut ch0 = d_i.index_axis_mut(Axis(0), 0);
                Zip::from(&mut ch0).and(&d_m).for_each(|a, &b| *a -= b / n);
            }

            let (v_sp, d_m_sp) = sparsity_loss(mask.view(), ledger.constants.alpha);
            let mut d_sp = Tensor::zeros(probs.raw_dim());
            mask_grad_to_probs(&mut d_sp, &d_m_sp, 1.0);

            let (v_size, d_m_size) = size_loss(mask.view(), batch.size_label, ledger.constants.gamma);
            let mut d_size = Tensor::zeros(probs.raw_dim());
            mask_grad_to_probs(&mut d_size, &d_m_size, 1.0);

            let (v_adv, d_adv) = if adversarial_phase {
                let (v, d_m_adv) = adversarial_term(&batch.images, &mask, gen, disc)?;
                let mut d = Tensor::zeros(probs.raw_dim());
                mask_grad_to_probs(&mut d, &d_m_adv, 1.0);
                (v, d)
            } else {
                (0.0, Tensor::zeros(probs.raw_dim()))
            };
            let grads_by_term = TermGrads {
                seg: d_seg,
                sparsity: d_sp,
                adv: d_adv,
                size: d_size,
            };

            ledger.values.ce = v_ce;
            ledger.values.dice = v_dice;
            ledger.values.sparsity = v_sp;
            ledger.values.size = v_size;
            ledger.values.adv = v_adv;
            if adversarial_phase {
                // Balance terms by their pull on the head parameters. The
                // EMA seeds on the first adversarial batch, so phase 1 never
                // biases it with zero adversarial gradients.
                ledger.observe_grad_norms([
                    seg.head_grad_norm(&trace, &grads_by_term.seg),
                    seg.head_grad_norm(&trace, &grads_by_term.sparsity),
                    seg.head_grad_norm(&trace, &grads_by_term.adv),
                    seg.head_grad_norm(&trace, &grads_by_term.size),
                ]);
            }
            let total = total_loss(&mut ledger, epoch);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "segmenter loss diverged at epoch {epoch}: total={total}, \
                     ce={v_ce}, dice={v_dice}, sparsity={v_sp}, adv={v_adv}, size={v_size}"
                )));
            }
            let w = ledger.weights;

            let mut d_probs = grads_by_term.seg;
            d_probs.mapv_inplace(|g| g * w[0]);
            if ledger.phase == Phase::Two {
                d_probs.scaled_add(w[1], &grads_by_term.sparsity);
                d_probs.scaled_add(w[2], &grads_by_term.adv);
                d_probs.scaled_add(w[3], &grads_by_term.size);
            }
            let mut grads = seg.params.zero_grads();
            seg.backward(&trace, &d_probs, Some(&mut grads));
            adam.step(&mut seg.params, &grads, lr);

            for (s, v) in sums.iter_mut().zip([total, v_ce, v_dice, v_sp, v_adv, v_size]) {
                *s += v;
            }
        }

        let nb = batches.len().max(1) as f64;
        let val_dice = validation_soft_dice(cfg, &seg, tumors, &val_subj)?;
        if !val_dice.is_finite() {
            return Err(Error::Numerical(format!(
                "validation Dice diverged at epoch {epoch}: {val_dice}"
            )));
        }
        let decision = stopper.observe(epoch, val_dice);
        if decision == StopDecision::Improved {
            best_params = seg.params.clone();
            best_epoch = epoch;
        }
        log.append(&json!({
            "epoch": epoch,
            "phase": match ledger.phase { Phase::One => 1, Phase::Two => 2 },
            "lr": lr,
            "total": sums[0] / nb,
            "ce": sums[1] / nb,
            "dice": sums[2] / nb,
            "sparsity": sums[3] / nb,
            "adv": sums[4] / nb,
            "size": sums[5] / nb,
            "w_seg": ledger.weights[0],
            "w_sparsity": ledger.weights[1],
            "w_adv": ledger.weights[2],
            "w_size": ledger.weights[3],
            "grad_norms": ledger.grad_norms,
            "val_dice": val_dice,
            "params_hash": seg.params.content_hash(),
        }))?;
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }

    seg.params = best_params;
    let segmenter_path = out_dir.join("segmenter.ck");
    save_unet(
        &segmenter_path,
        &seg,
        KIND_SEGMENTER,
        json!({
            "epochs_run": epochs_run,
            "best_epoch": best_epoch,
            "best_val_dice": stopper.best,
            "stopped_early": stopped_early,
            "val_subject_ids": val_subject_ids,
        }),
    )?;

    Ok(TrainSummary {
        epochs_run,
        best_epoch,
        best_val_dice: stopper.best,
        stopped_early,
        train_subjects: train_subj.len(),
        val_subjects: val_subj.len(),
        val_subject_ids,
        segmenter_path,
        segmenter_hash: seg.params.content_hash(),
    })
}
