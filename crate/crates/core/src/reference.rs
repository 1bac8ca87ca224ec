//! The desk-scale reference experiment: synthetic train/test manifests,
//! clean pretraining, the finetune variants, and their evaluation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, make_pairs, EvalReport, VerificationPair, DEFAULT_FARS};
use crate::loss::{MarginPreset, MarginSpec};
use crate::network::{MaskMode, MaskOverride, Network, PatternHead};
use crate::synth::{build_dataset, DatasetConfig, DatasetManifest};
use crate::train::{BaselineMode, MixRatio, NetKnobs, Stage, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub train_identities: usize,
    pub train_samples: usize,
    pub test_identities: usize,
    pub test_samples: usize,
    pub pairs_per_label: usize,
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub net: NetKnobs,
    pub margin: MarginSpec,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            train_identities: 40,
            train_samples: 50,
            test_identities: 20,
            test_samples: 10,
            pairs_per_label: 1000,
            width: 48,
            height: 56,
            k: 5,
            pretrain_epochs: 15,
            finetune_epochs: 15,
            pretrain_batch: 32,
            finetune_batch: 30,
            pretrain_lr: 0.1,
            finetune_lr: 0.01,
            net: NetKnobs {
                stem_channels: 8,
                stage_channels: [16, 32, 64],
                res_blocks: 1,
                pyramid_channels: 32,
                embedding_dim: 64,
                mask_mode: MaskMode::Conv3d,
                dropout: 0.4,
                init_seed: 7,
            },
            margin: MarginSpec::preset(MarginPreset::CosFace, 30.0),
            seed: 2024,
        }
    }
}

/// Held-out manifests share their record layout, so one pair list serves
/// every variant (clean, occluded, per-region).
pub struct ReferenceData {
    pub train: TrainData,
    pub test_clean: DatasetManifest,
    pub test_occluded: DatasetManifest,
    pub pairs: Vec<VerificationPair>,
}

impl ReferenceConfig {
    fn dataset(&self, train: bool, clean: bool, salt: u64) -> DatasetConfig {
        let (identities, samples, offset) = if train {
            (self.train_identities, self.train_samples, 0)
        } else {
            (self.test_identities, self.test_samples, 10_000)
        };
        DatasetConfig {
            identities,
            identity_offset: offset,
            samples_per_identity: samples,
            width: self.width,
            height: self.height,
            k: self.k,
            clean_fraction: if clean { 1.0 } else { 0.0 },
            seed: self.seed.wrapping_mul(31).wrapping_add(salt),
            ..DatasetConfig::default()
        }
    }

    /// Held-out manifest with fixed-region occluders.
    pub fn region_dataset(&self, placement: crate::synth::Placement) -> DatasetConfig {
        DatasetConfig {
            placement,
            ..self.dataset(false, false, 5)
        }
    }

    pub fn build(&self) -> Result<ReferenceData> {
        let train_clean = build_dataset(&self.dataset(true, true, 1))?;
        let train_occ = build_dataset(&self.dataset(true, false, 2))?;
        let test_clean = build_dataset(&self.dataset(false, true, 3))?;
        let test_occluded = build_dataset(&self.dataset(false, false, 4))?;
        let ids: Vec<usize> = test_clean.records.iter().map(|r| r.identity).collect();
        Ok(ReferenceData {
            train: TrainData::new(&train_clean, Some(&train_occ))?,
            pairs: make_pairs(&ids, self.pairs_per_label, self.seed)?,
            test_clean,
            test_occluded,
        })
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            stage: Stage::Pretrain,
            mode: BaselineMode::Baseline,
            batch_size: self.pretrain_batch,
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            decay_epochs: decays(self.pretrain_epochs),
            margin: self.margin,
            lambda: 0.0,
            seed: self.seed,
            net: self.net.clone(),
            ..TrainConfig::default()
        }
    }

    pub fn finetune_config(&self, mode: BaselineMode, mask: MaskMode, head: PatternHead, lambda: f64) -> TrainConfig {
        TrainConfig {
            stage: Stage::Finetune,
            mode,
            occluded_manifest: Some("occluded".into()),
            mix: MixRatio::DEFAULT,
            batch_size: self.finetune_batch,
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            decay_epochs: decays(self.finetune_epochs),
            margin: self.margin,
            lambda,
            pattern_head: head,
            seed: self.seed + 1,
            net: NetKnobs {
                mask_mode: mask,
                ..self.net.clone()
            },
            ..TrainConfig::default()
        }
    }
}

/// Decays at roughly 55% and 80% of the run.
fn decays(epochs: usize) -> Vec<usize> {
    let mut d: Vec<usize> = [epochs * 11 / 20, epochs * 4 / 5]
        .into_iter()
        .filter(|&e| e > 0 && e < epochs)
        .collect();
    d.dedup();
    d
}

pub fn pretrain(cfg: &ReferenceConfig, data: &ReferenceData) -> Result<Trainer> {
    let mut t = Trainer::pretrain(cfg.pretrain_config(), &data.train)?;
    t.run(&data.train)?;
    Ok(t)
}

pub fn finetune(data: &ReferenceData, pretrained: &Network<f32>, train: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::finetune(train, &data.train, pretrained)?;
    t.run(&data.train)?;
    Ok(t)
}

/// Occluded and clean held-out reports.
pub struct VariantReport {
    pub occluded: EvalReport,
    pub clean: EvalReport,
}

pub fn evaluate_variant(net: &Network<f32>, data: &ReferenceData, mask: MaskOverride) -> Result<VariantReport> {
    Ok(VariantReport {
        occluded: evaluate(net, &data.test_occluded, &data.pairs, &DEFAULT_FARS, mask)?.0,
        clean: evaluate(net, &data.test_clean, &data.pairs, &DEFAULT_FARS, mask)?.0,
    })
}
