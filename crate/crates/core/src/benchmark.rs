//! A fixed five-dataset synthetic benchmark with graded difficulty, and
//! the training settings used on it.

use crate::augment::AugmentConfig;
use crate::error::Result;
use crate::synth::{generate_sequence, GeneratorConfig};
use crate::train::{Dataset, TrainConfig};

pub const BENCHMARK_SIZE: usize = 5;

/// Generator settings of benchmark dataset `index` (0 easiest, 4 hardest).
pub fn benchmark_config(index: usize) -> GeneratorConfig {
    let base = GeneratorConfig {
        seed: 1000 + index as u64,
        ..GeneratorConfig::default()
    };
    match index {
        0 => GeneratorConfig {
            event_count_range: [2, 2],
            noise_sigma: 0.015,
            event_amplitude_range: [0.8, 0.9],
            transient_rate: 0.01,
            border_margin: 24.0,
            ..base
        },
        1 | 2 => GeneratorConfig {
            event_count_range: [2, 3],
            ..base
        },
        3 => GeneratorConfig {
            event_count_range: [2, 3],
            normal_cell_count_range: [25, 30],
            transient_rate: 0.03,
            ..base
        },
        _ => GeneratorConfig {
            event_count_range: [2, 3],
            noise_sigma: 0.03,
            event_amplitude_range: [0.6, 0.75],
            border_margin: 12.0,
            ..base
        },
    }
}

/// The five benchmark datasets, ids `bench0` .. `bench4`.
pub fn benchmark_datasets() -> Result<Vec<Dataset>> {
    (0..BENCHMARK_SIZE)
        .map(|i| {
            let (mut volume, events) = generate_sequence(&benchmark_config(i))?;
            volume.id = format!("bench{i}");
            Ok(Dataset::new(volume, events))
        })
        .collect()
}

/// Training settings for the benchmark: 64-pixel crops, a narrower stage-1
/// backbone and a learning rate suited to a budget of a few thousand
/// batches.
pub fn benchmark_train_config(max_batches: u64) -> TrainConfig {
    let mut c = TrainConfig {
        max_batches,
        augment: AugmentConfig {
            crop_size: [64, 64],
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    c.optimizer.lr_initial = 1e-3;
    c.optimizer.lr_after = 1e-4;
    c.optimizer.lr_switch_batch = max_batches * 3 / 4;
    let s1 = &mut c.network.stage1;
    s1.backbone_channels = [8, 16];
    s1.fused_channels = 16;
    s1.head_channels = 16;
    c
}
