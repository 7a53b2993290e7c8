//! The desk-scale synthetic experiment: data generators plus the base training config.

use crate::datagen::{generate, DataError, DomainShiftSpec, DomainTag, SceneSpec};
use crate::divergence::{DivergenceConfig, DivergenceKind};
use crate::eval::ExperimentData;
use crate::segnet::UNetConfig;
use crate::trainer::{ExperimentConfig, OptimizerKind};

#[derive(Clone, Debug)]
pub struct Preset {
    pub scene: SceneSpec,
    pub target_shift: DomainShiftSpec,
    pub heldout_shift: DomainShiftSpec,
    pub source_count: usize,
    pub target_count: usize,
    pub test_count: usize,
    pub base: ExperimentConfig,
    pub lambda: f64,
}

impl Preset {
    pub fn desk() -> Self {
        let size = 64;
        Preset {
            scene: SceneSpec {
                image_size: size,
                ..SceneSpec::default()
            },
            target_shift: DomainShiftSpec {
                intensity_gain: 0.6,
                intensity_offset: 0.25,
                noise_std: 0.05,
                blur_radius: 0,
                texture_freq: 6.0,
                texture_amp: 0.2,
            },
            heldout_shift: DomainShiftSpec {
                intensity_gain: 1.2,
                intensity_offset: -0.1,
                noise_std: 0.08,
                blur_radius: 1,
                texture_freq: 9.0,
                texture_amp: 0.1,
            },
            source_count: 200,
            target_count: 100,
            test_count: 50,
            base: ExperimentConfig {
                unet: UNetConfig {
                    depth: 3,
                    base_channels: 8,
                    in_channels: 1,
                    num_classes: 2,
                    input_size: size,
                },
                optimizer: OptimizerKind::Adamw,
                lr: 1e-3,
                epochs: 8,
                num_splits: 5,
                target_fraction: 0.03,
                ..ExperimentConfig::default()
            },
            lambda: 0.01,
        }
    }

    /// Shrunken variant for smoke runs.
    pub fn smoke() -> Self {
        let mut p = Preset::desk();
        p.scene.image_size = 32;
        p.scene.blob_radius = (3.0, 6.0);
        p.source_count = 24;
        p.target_count = 40;
        p.test_count = 8;
        p.base.unet.input_size = 32;
        p.base.unet.base_channels = 4;
        p.base.epochs = 5;
        p.base.num_splits = 2;
        p.base.batch_size = 6;
        p.base.target_fraction = 0.3;
        p.base.kde_samples = 6;
        p
    }

    pub fn methods(&self) -> Vec<DivergenceConfig> {
        [
            DivergenceKind::None,
            DivergenceKind::MmdConstant,
            DivergenceKind::MmdBandwidth,
            DivergenceKind::Jsd,
        ]
        .into_iter()
        .map(|k| self.method(k))
        .collect()
    }

    pub fn method(&self, kind: DivergenceKind) -> DivergenceConfig {
        DivergenceConfig {
            lambda: self.lambda,
            ..DivergenceConfig::with_kind(kind)
        }
    }

    pub fn data(&self) -> Result<ExperimentData, DataError> {
        let clean = DomainShiftSpec::identity();
        let gen = |seed: u64, shift: &DomainShiftSpec, n: usize, tag: DomainTag| {
            let scene = SceneSpec {
                seed: self.scene.seed.wrapping_add(seed),
                ..self.scene
            };
            generate(&scene, shift, n, tag)
        };
        Ok(ExperimentData {
            source: gen(1, &clean, self.source_count, DomainTag::Source)?,
            target_images: gen(2, &self.target_shift, self.target_count, DomainTag::Target)?.images,
            source_test: gen(3, &clean, self.test_count, DomainTag::Source)?,
            target_test: gen(4, &self.target_shift, self.test_count, DomainTag::Target)?,
            heldout_test: Some(gen(5, &self.heldout_shift, self.test_count, DomainTag::Heldout)?),
        })
    }
}
