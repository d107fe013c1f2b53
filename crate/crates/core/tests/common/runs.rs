//! Small training runs shared by the training and acceptance targets.

use qtune_core::classifier::{ClassifierConfig, InputMode};
use qtune_core::dataset::{ingest_dataset, DatasetSpec, Split};
use qtune_core::entropy::{build_huffman_tables, measure_rate, ExportMetadata, QTableExport};
use qtune_core::jpeg::{ColorTransform, CompressionKernels};
use qtune_core::losses::LossConfig;
use qtune_core::trainer::{Checkpoint, Schedule, TrainConfig, TrainMode, Trainer};

pub fn small_split(classes: usize, train: usize, test: usize, seed: u64) -> Split {
    ingest_dataset(&DatasetSpec::synthetic(classes, train, test, seed)).unwrap()
}

pub fn small_net(classes: usize, mode: InputMode) -> ClassifierConfig {
    ClassifierConfig {
        input_mode: mode,
        num_classes: classes,
        base_width: 8,
        groups: 2,
        blocks_per_group: 1,
        dct_branch_width: 8,
        ..Default::default()
    }
}

pub fn small_config(classes: usize, alternations: usize) -> TrainConfig {
    TrainConfig {
        alternations,
        batch_size: 50,
        schedule: Schedule { milestones: vec![alternations], scales: vec![0.1] },
        loss: LossConfig::coupled(1e-3),
        lr_kernels: 0.005,
        classifier: small_net(classes, InputMode::Dct),
        seed: 11,
        ..Default::default()
    }
}

pub fn history_json(t: &Trainer) -> String {
    serde_json::to_string(t.history()).unwrap()
}

/// Two identically seeded runs; returns whether history and checkpoint match bit for bit.
pub fn same_seed_identical(cfg: &TrainConfig, data: &Split) -> bool {
    let run = || {
        let mut t = Trainer::new(cfg, data).unwrap();
        t.run().unwrap();
        (history_json(&t), t.checkpoint().to_json().unwrap())
    };
    run() == run()
}

/// Stops after `stop` rounds, round-trips the checkpoint through JSON and finishes.
pub fn resume_matches(cfg: &TrainConfig, data: &Split, stop: usize) -> bool {
    let mut full = Trainer::new(cfg, data).unwrap();
    full.run().unwrap();
    let mut first = Trainer::new(cfg, data).unwrap();
    first.run_until(stop).unwrap();
    let ck = Checkpoint::from_json(&first.checkpoint().to_json().unwrap()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(ck, cfg, data).unwrap();
    resumed.run().unwrap();
    history_json(&full) == history_json(&resumed)
        && full.checkpoint().to_json().unwrap() == resumed.checkpoint().to_json().unwrap()
}

/// Mean rate on the validation split, with tables fitted on the training split.
pub fn mean_kb(data: &Split, kernels: &CompressionKernels) -> f64 {
    let ct = ColorTransform::jpeg();
    let codec = build_huffman_tables(&data.train.images, &ct, kernels, data.train.len(), 0).unwrap();
    measure_rate(&data.test.images, &ct, kernels, &codec).unwrap().mean_kb()
}

/// Relative rate change from exporting trained kernels to JSON tables and loading them back.
pub fn export_reimport_change(kernels: &CompressionKernels, data: &Split) -> f64 {
    let json = QTableExport::new(kernels, ExportMetadata::default()).to_json().unwrap();
    let deployed = QTableExport::from_json(&json).unwrap().deployed_kernels();
    let (a, b) = (mean_kb(data, kernels), mean_kb(data, &deployed));
    (b - a).abs() / a
}

pub fn baseline(cfg: &TrainConfig, quality: f64) -> TrainConfig {
    TrainConfig { mode: TrainMode::Baseline, quality: Some(quality), ..cfg.clone() }
}
