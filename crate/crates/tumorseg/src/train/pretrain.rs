//! Inpainting pretraining on healthy anatomy.
//!
//! The generator sees scans with a random rectangle blanked out and learns
//! to fill the hole; the discriminator learns to tell filled scans from
//! real ones, patch by patch. Both networks are trained here once, then
//! frozen — segmentation training later uses them purely as a critic of
//! what the segmenter chose to mask out.
//!
//! A subject-level slice of the healthy data is held out to monitor
//! reconstruction quality: each held-out slice gets one fixed occlusion
//! mask (drawn once from the run seed, reused every epoch) so the
//! validation loss is comparable across epochs. Training stops early when
//! that loss stagnates for `patience` epochs, and the weights from the best
//! validation epoch are what gets checkpointed.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use super::data::{
    assemble_batch, broadcast_mask, epoch_batches, gather, occlude, prepare_slices,
    split_subjects,
};
use super::schedule::{lr_schedule, EarlyStopper, StopDecision};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{disc_loss, gen_loss, masked_l1_loss};
use crate::nn::checkpoint::{save_disc, save_unet, KIND_GENERATOR};
use crate::nn::{Adam, AdamConfig, Discriminator, UNet};
use crate::report::JsonlLogger;
use crate::volume::{TrainingSlice, Volume};

/// Stream tag that decorrelates occlusion-mask sampling from batch order.
const MASK_STREAM: u64 = 0x6d61_736b_5f32_3032;

/// Sample a solid axis-aligned rectangle covering a uniform fraction of the
/// frame drawn from `coverage`, with aspect ratio in [0.5, 2]. Returns a
/// {0, 1} map where 1 marks the occluded region.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, coverage: (f64, f64)) -> Array2<f64> {
    let cov = rng.random_range(coverage.0..=coverage.1);
    let area = (cov * (h * w) as f64).max(1.0);
    let aspect = rng.random_range(0.5..=2.0);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    let mut mask = Array2::zeros((h, w));
    mask.slice_mut(ndarray::s![r0..r0 + rh, c0..c0 + rw])
        .fill(1.0);
    mask
}

/// What pretraining produced, with content hashes for reproducibility checks.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub generator_steps: usize,
    pub discriminator_steps: usize,
    pub final_recon: f64,
    pub final_g_gan: f64,
    pub final_d_gan: Option<f64>,
    /// Masked L1 on the held-out slices at the best epoch; absent when no
    /// subjects could be held out.
    pub best_val_recon: Option<f64>,
    pub generator_path: PathBuf,
    pub discriminator_path: PathBuf,
    pub generator_hash: String,
    pub discriminator_hash: String,
}

fn pretrain_slices(cfg: &RunConfig, normals: &[Volume]) -> Result<Vec<TrainingSlice>> {
    let params = cfg.enhance.params();
    let mut slices = Vec::new();
    for vol in normals {
        // Healthy volumes have no tumor, so every slice is kept.
        slices.extend(prepare_slices(vol, &params, cfg.enhance.degenerate_policy, true)?);
    }
    Ok(slices)
}

/// Masked reconstruction L1 over held-out slices with their fixed masks,
/// normalized over the union of all masked pixels.
fn validation_recon(
    gen: &UNet,
    slices: &[TrainingSlice],
    masks: &[Array2<f64>],
    batch_size: usize,
) -> Result<f64> {
    let mut weighted = 0.0;
    let mut total_area = 0.0;
    let ids: Vec<usize> = (0..slices.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = assemble_batch(&gather(slices, chunk))?;
        let (_, h, w) = slices[chunk[0]].image.dim();
        let mut m = Array3::zeros((chunk.len(), h, w));
        for (i, &slice_id) in chunk.iter().enumerate() {
            m.index_axis_mut(ndarray::Axis(0), i).assign(&masks[slice_id]);
        }
        let m4 = broadcast_mask(&m, 4);
        let occluded = occlude(&batch.images, &m, 0.0);
        let recon = gen.infer(&occluded)?;
        let (v, _) = masked_l1_loss(recon.view(), batch.images.view(), m4.view());
        let area = m4.sum();
        weighted += v * area;
        total_area += area;
    }
    Ok(if total_area > 0.0 {
        weighted / total_area
    } else {
        0.0
    })
}

/// Train generator and discriminator from scratch on healthy volumes and
/// write `generator.ck`, `discriminator.ck`, and `pretrain_log.jsonl` into
/// `out_dir`. Deterministic for a fixed config.
pub fn pretrain_gan(
    cfg: &RunConfig,
    normals: &[Volume],
    out_dir: &Path,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    let (train_idx, val_idx) = split_subjects(normals.len(), pc.val_fraction, pc.seed);
    let train_vols: Vec<Volume> = train_idx.iter().map(|&i| normals[i].clone()).collect();
    let val_vols: Vec<Volume> = val_idx.iter().map(|&i| normals[i].clone()).collect();
    let slices = pretrain_slices(cfg, &train_vols)?;
    if slices.is_empty() {
        return Err(Error::Data("no pretraining slices available".into()));
    }
    let val_slices = pretrain_slices(cfg, &val_vols)?;
    let (_, h, w) = slices[0].image.dim();
    // One fixed mask per held-out slice, drawn from the seed alone so the
    // validation loss measures the same inpainting problems every epoch.
    let mut val_mask_rng = ChaCha20Rng::seed_from_u64(pc.seed ^ MASK_STREAM);
    let val_masks: Vec<Array2<f64>> = (0..val_slices.len())
        .map(|_| random_mask(&mut val_mask_rng, h, w, pc.mask_coverage))
        .collect();

    let mut gen = UNet::build(cfg.model.gen_config(), cfg.model.seed.wrapping_add(1))?;
    let mut disc = Discriminator::build(cfg.model.disc_config(), cfg.model.seed.wrapping_add(2))?;
    let adam_cfg = AdamConfig {
        weight_decay: pc.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam_g = Adam::new(adam_cfg.clone(), &gen.params);
    let mut adam_d = Adam::new(adam_cfg, &disc.params);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = JsonlLogger::create(&out_dir.join("pretrain_log.jsonl"))?;

    let disc_every = pc.disc_every.max(1);
    let mut g_steps = 0usize;
    let mut d_steps = 0usize;
    let (mut last_recon, mut last_g_gan, mut last_d_gan) = (f64::NAN, f64::NAN, None);
    let mut stopper = EarlyStopper::new(pc.patience.max(1));
    let mut best: Option<(crate::nn::Params, crate::nn::Params)> = None;
    let mut epochs_run = 0usize;
    let mut stopped_early = false;

    for epoch in 0..pc.epochs {
        let lr = lr_schedule(pc.base_lr, epoch, pc.epochs, pc.lr_decay_power);
        let batches = epoch_batches(slices.len(), pc.batch_size, pc.steps_per_epoch, pc.seed, epoch);
        let mut mask_rng = ChaCha20Rng::seed_from_u64(
            pc.seed ^ MASK_STREAM ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let (mut recon_sum, mut g_gan_sum, mut d_gan_sum) = (0.0, 0.0, 0.0);
        let mut d_steps_epoch = 0usize;

        for batch_ids in &batches {
            let batch = assemble_batch(&gather(&slices, batch_ids))?;
            let n = batch_ids.len();
            let mut masks = Array3::zeros((n, h, w));
            for i in 0..n {
                masks
                    .index_axis_mut(ndarray::Axis(0), i)
                    .assign(&random_mask(&mut mask_rng, h, w, pc.mask_coverage));
            }
            let m4 = broadcast_mask(&masks, 4);
            // Blank the hole to mid-gray (0 in tanh range).
            let occluded = occlude(&batch.images, &masks, 0.0);

            // Generator step: fill quality (masked L1) + realism (fooling D).
            let (recon, gtr) = gen.forward_t(&occluded)?;
            let (v_l1, d_l1) = masked_l1_loss(recon.view(), batch.images.view(), m4.view());
            let (fake_scores, ftr) = disc.forward_t(&recon)?;
            let (v_g, d_fake_for_g) = gen_loss(fake_scores.view());
            if !(v_l1.is_finite() && v_g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "pretraining diverged at epoch {epoch}: recon {v_l1}, adversarial {v_g}"
                )));
            }
            let d_recon_gan = disc.backward(&ftr, &d_fake_for_g, None);
            let mut d_recon = d_l1;
            d_recon.mapv_inplace(|g| g * pc.recon_weight);
            d_recon += &d_recon_gan;
            let mut ggrads = gen.params.zero_grads();
            gen.backward(&gtr, &d_recon, Some(&mut ggrads));
            adam_g.step(&mut gen.params, &ggrads, lr);
            recon_sum += v_l1;
            g_gan_sum += v_g;
            g_steps += 1;

            // Discriminator step after every `disc_every`-th generator
            // update, so its update count is ⌊G/disc_every⌋. The fake trace
            // predates the generator update, which only makes the fake batch
            // slightly stale — D's own parameters are exactly those its
            // forward pass used.
            if g_steps % disc_every == 0 {
                let (real_scores, rtr) = disc.forward_t(&batch.images)?;
                let (v_d, d_real, d_fake) = disc_loss(real_scores.view(), fake_scores.view());
                if !v_d.is_finite() {
                    return Err(Error::Numerical(format!(
                        "discriminator loss diverged at epoch {epoch}: {v_d}"
                    )));
                }
                let mut dgrads = disc.params.zero_grads();
                disc.backward(&rtr, &d_real, Some(&mut dgrads));
                disc.backward(&ftr, &d_fake, Some(&mut dgrads));
                adam_d.step(&mut disc.params, &dgrads, lr);
                d_gan_sum += v_d;
                d_steps_epoch += 1;
                d_steps += 1;
            }
        }

        epochs_run = epoch + 1;
        let n_batches = batches.len().max(1) as f64;
        last_recon = recon_sum / n_batches;
        last_g_gan = g_gan_sum / n_batches;
        last_d_gan = (d_steps_epoch > 0).then(|| d_gan_sum / d_steps_epoch as f64);
        let val_recon = if val_slices.is_empty() {
            None
        } else {
            let v = validation_recon(&gen, &val_slices, &val_masks, pc.batch_size)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "validation reconstruction diverged at epoch {epoch}: {v}"
                )));
            }
            Some(v)
        };
        log.append(&json!({
            "epoch": epoch,
            "lr": lr,
            "recon": last_recon,
            "g_gan": last_g_gan,
            "d_gan": last_d_gan,
            "val_recon": val_recon,
            "g_steps": batches.len(),
            "d_steps": d_steps_epoch,
        }))?;

        if let Some(v) = val_recon {
            // Lower reconstruction loss is better; the stopper maximizes.
            match stopper.observe(epoch, -v) {
                StopDecision::Improved => best = Some((gen.params.clone(), disc.params.clone())),
                StopDecision::Wait => {}
                StopDecision::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_recon) = if val_slices.is_empty() {
        (epochs_run.saturating_sub(1), None)
    } else {
        (stopper.best_epoch, Some(-stopper.best))
    };
    if let Some((gp, dp)) = best {
        gen.params = gp;
        disc.params = dp;
    }

    let generator_path = out_dir.join("generator.ck");
    let discriminator_path = out_dir.join("discriminator.ck");
    let state = json!({
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "stopped_early": stopped_early,
        "generator_steps": g_steps,
        "discriminator_steps": d_steps,
        "final_recon": last_recon,
        "final_g_gan": last_g_gan,
        "final_d_gan": last_d_gan,
        "best_val_recon": best_val_recon,
    });
    save_unet(&generator_path, &gen, KIND_GENERATOR, state.clone())?;
    save_disc(&discriminator_path, &disc, state)?;

    Ok(PretrainSummary {
        epochs_run,
        best_epoch,
        stopped_early,
        generator_steps: g_steps,
        discriminator_steps: d_steps,
        final_recon: last_recon,
        final_g_gan: last_g_gan,
        final_d_gan: last_d_gan,
        best_val_recon,
        generator_path,
        discriminator_path,
        generator_hash: gen.params.content_hash(),
        discriminator_hash: disc.params.content_hash(),
    })
}
