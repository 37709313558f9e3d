//! Run configuration, read from a single TOML file.
//!
//! Every section has complete defaults, so an empty file is a valid config;
//! the defaults form the *desk* preset, sized to train the full pipeline on
//! a few CPU cores in well under an hour. [`RunConfig::paper_scale`] swaps in
//! the full-size architecture and schedule for reference; it is far too slow
//! for routine CPU use.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::enhance::{DegeneratePolicy, EnhanceParams};
use crate::error::{Error, Result};
use crate::losses::{LossConstants, PHASE_SWITCH_EPOCH};
use crate::nn::{DiscriminatorConfig, GeneratorConfig, UNetConfig};
use crate::volume::PhantomSpec;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub enhance: EnhanceConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

/// Phantom dataset geometry and the subject-level train/validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square slice size in pixels.
    pub image_size: usize,
    /// Slices per subject.
    pub n_slices: usize,
    /// Subjects with lesions (segmenter training and evaluation).
    pub tumor_subjects: usize,
    /// Lesion-free subjects (generator/discriminator pretraining).
    pub normal_subjects: usize,
    pub tumor_count_range: (u32, u32),
    pub tumor_radius_range: (f64, f64),
    pub noise_sigma: f64,
    /// Fraction of tumor subjects held out for validation (subject-level,
    /// never slice-level, so no subject leaks across the split).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_slices: 6,
            tumor_subjects: 12,
            normal_subjects: 8,
            tumor_count_range: (1, 3),
            tumor_radius_range: (4.0, 9.0),
            noise_sigma: 0.03,
            val_fraction: 0.25,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn tumor_spec(&self) -> PhantomSpec {
        PhantomSpec {
            image_size: self.image_size,
            n_slices: self.n_slices,
            n_subjects: self.tumor_subjects,
            tumor_count_range: self.tumor_count_range,
            tumor_radius_range: self.tumor_radius_range,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    /// Same geometry, decorrelated stream, no lesions.
    pub fn normal_spec(&self) -> PhantomSpec {
        PhantomSpec {
            n_subjects: self.normal_subjects,
            seed: self.seed ^ 0x9e37_79b9_7f4a_7c15,
            ..self.tumor_spec()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tumor_spec().validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.normal_subjects == 0 {
            return Err(Error::Config(
                "need at least one normal subject for pretraining".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub lambda_enh: f64,
    pub epsilon_guard: f64,
    pub degenerate_policy: DegeneratePolicy,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        let p = EnhanceParams::default();
        Self {
            lambda_enh: p.lambda_enh,
            epsilon_guard: p.epsilon_guard,
            degenerate_policy: DegeneratePolicy::Skip,
        }
    }
}

impl EnhanceConfig {
    pub fn params(&self) -> EnhanceParams {
        EnhanceParams {
            lambda_enh: self.lambda_enh,
            epsilon_guard: self.epsilon_guard,
        }
    }
}

/// Network architecture knobs; a single init seed covers all three networks
/// (each derives its own stream from it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// U-Net stage widths, shared by segmenter and generator.
    pub encoder_channels: Vec<usize>,
    /// Discriminator hidden widths.
    pub disc_widths: [usize; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 48],
            disc_widths: [16, 24, 24],
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn disc_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 4,
            widths: self.disc_widths,
        }
    }

    /// Segmenter U-Net at these widths. Seeded with `seed`.
    pub fn seg_config(&self) -> UNetConfig {
        UNetConfig {
            encoder_channels: self.encoder_channels.clone(),
            ..UNetConfig::segmenter()
        }
    }

    /// Inpainting generator at these widths. Seeded with `seed + 1`
    /// (the discriminator uses `seed + 2`), so the three networks never
    /// share initial weights even under one configured seed.
    pub fn gen_config(&self) -> UNetConfig {
        GeneratorConfig {
            modalities: 4,
            encoder_channels: self.encoder_channels.clone(),
        }
        .to_unet()
    }
}

/// Inpainting GAN pretraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_power: f64,
    pub weight_decay: f64,
    /// Weight of the masked L1 reconstruction term in the generator loss.
    pub recon_weight: f64,
    /// The discriminator updates once per this many generator updates.
    pub disc_every: usize,
    /// Fractional area range of the random occlusion masks.
    pub mask_coverage: (f64, f64),
    /// Fraction of normal subjects held out to monitor reconstruction.
    pub val_fraction: f64,
    /// Early stopping: epochs without validation reconstruction improvement.
    pub patience: usize,
    /// Cap on optimizer steps per epoch; 0 means one full pass.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            base_lr: 2e-4,
            lr_decay_power: 0.75,
            weight_decay: 1e-4,
            recon_weight: 10.0,
            disc_every: 5,
            mask_coverage: (0.1, 0.4),
            val_fraction: 0.25,
            patience: 5,
            steps_per_epoch: 0,
            seed: 101,
        }
    }
}

/// Segmenter training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_power: f64,
    pub weight_decay: f64,
    /// Sparsity coefficient α.
    pub alpha_sparsity: f64,
    /// Size-consistency coefficient γ.
    pub gamma_size: f64,
    /// First epoch (0-indexed) where the sparsity/adversarial/size terms
    /// join the loss.
    pub phase_switch_epoch: usize,
    /// Early stopping: epochs without validation improvement.
    pub patience: usize,
    /// Cap on optimizer steps per epoch; 0 means one full pass.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            base_lr: 6e-5,
            lr_decay_power: 0.75,
            weight_decay: 1e-4,
            alpha_sparsity: 0.1,
            gamma_size: 1.0,
            phase_switch_epoch: 6,
            patience: 5,
            steps_per_epoch: 0,
            seed: 4242,
        }
    }
}

impl TrainConfig {
    pub fn loss_constants(&self) -> LossConstants {
        LossConstants {
            alpha: self.alpha_sparsity,
            gamma: self.gamma_size,
            phase_switch_epoch: self.phase_switch_epoch,
            ..LossConstants::default()
        }
    }
}

/// How a slice-level score is compared against a sweep threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrientation {
    /// Flag a slice as tumorous when its normality score (1 − peak patch
    /// abnormality) falls below the threshold. Raising the threshold flags
    /// more slices, so sensitivity rises with it.
    #[default]
    NormalityBelow,
    /// Flag a slice when its peak patch abnormality reaches the threshold;
    /// sensitivity falls as the threshold rises.
    AbnormalityAtLeast,
}

/// Slice-level tumor-detection sweep over discriminator decision thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Strictly increasing thresholds within [0, 1].
    pub thresholds: Vec<f64>,
    pub orientation: SweepOrientation,
    /// Gate the discriminator's patch map by the predicted mask's edge
    /// attention before taking the per-slice peak. Needs segmenter and
    /// generator checkpoints; the raw map needs only the discriminator.
    pub gated: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.1, 0.2, 0.3, 0.4],
            orientation: SweepOrientation::default(),
            gated: false,
        }
    }
}

impl RunConfig {
    /// The defaults: small nets, small phantoms, minutes on a laptop CPU.
    pub fn desk() -> Self {
        Self::default()
    }

    /// The seeded end-to-end benchmark preset: 200 tumor phantoms plus 100
    /// normals at 64×64, a 10-epoch inpainting pretrain, and a 30-epoch
    /// segmenter run whose auxiliary losses switch on at epoch 11. Sized to
    /// finish comfortably within an hour on a few CPU cores while clearing
    /// held-out whole-tumor soft Dice 0.85 and lesion-wise Dice 0.75.
    pub fn toy_benchmark() -> Self {
        Self {
            data: DataConfig {
                image_size: 64,
                n_slices: 6,
                tumor_subjects: 200,
                normal_subjects: 100,
                val_fraction: 0.1,
                ..DataConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 10,
                ..PretrainConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                base_lr: 6e-5,
                lr_decay_power: 0.75,
                phase_switch_epoch: PHASE_SWITCH_EPOCH,
                // The benchmark asserts on the full 30-epoch log, so early
                // stopping must never truncate it.
                patience: 30,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// Full-scale reference settings. CPU-hostile; documented, not the
    /// default.
    pub fn paper_scale() -> Self {
        Self {
            data: DataConfig {
                image_size: 128,
                n_slices: 32,
                tumor_subjects: 100,
                normal_subjects: 40,
                ..DataConfig::default()
            },
            model: ModelConfig {
                encoder_channels: vec![64, 128, 256, 320],
                disc_widths: [32, 64, 64],
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 30,
                batch_size: 80,
                ..PretrainConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 80,
                phase_switch_epoch: PHASE_SWITCH_EPOCH,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.enhance.params().validate()?;
        self.model.disc_config().validate()?;
        for (what, lr, epochs, batch) in [
            (
                "pretrain",
                self.pretrain.base_lr,
                self.pretrain.epochs,
                self.pretrain.batch_size,
            ),
            (
                "train",
                self.train.base_lr,
                self.train.epochs,
                self.train.batch_size,
            ),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{what}: base_lr must be positive")));
            }
            if epochs == 0 || batch == 0 {
                return Err(Error::Config(format!(
                    "{what}: epochs and batch_size must be positive"
                )));
            }
        }
        if self.pretrain.disc_every == 0 {
            return Err(Error::Config("pretrain: disc_every must be ≥ 1".into()));
        }
        let (lo, hi) = self.pretrain.mask_coverage;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "pretrain: mask_coverage ({lo}, {hi}) must satisfy 0 < lo ≤ hi < 1"
            )));
        }
        if !(0.0..1.0).contains(&self.pretrain.val_fraction) {
            return Err(Error::Config(format!(
                "pretrain: val_fraction {} outside [0, 1)",
                self.pretrain.val_fraction
            )));
        }
        if self.sweep.thresholds.is_empty()
            || self
                .sweep
                .thresholds
                .iter()
                .any(|&t| !(0.0..=1.0).contains(&t))
        {
            return Err(Error::Config(
                "sweep: thresholds must be a non-empty list within [0, 1]".into(),
            ));
        }
        if self.sweep.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "sweep: thresholds must be strictly increasing".into(),
            ));
        }
        if self.model.encoder_channels.len() < 2 {
            return Err(Error::Config(
                "model: encoder_channels needs at least two stages".into(),
            ));
        }
        Ok(())
    }
}
