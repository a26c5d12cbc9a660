//! Shared fixtures for the benchmarks.

use clasp_core::blockworld::Vocab;
use clasp_core::datastore::{generate_records, DatasetRecord};
use clasp_core::trainer::{TrainConfig, Trainer};

/// `n` demonstration records from a fixed seed.
pub fn records(n: usize) -> Vec<DatasetRecord> {
    generate_records(n, 11).expect("generation succeeds").1
}

/// A trainer at the default model size.
pub fn trainer(batch_size: usize) -> Trainer {
    let config = TrainConfig {
        batch_size,
        ..TrainConfig::default()
    };
    Trainer::new(config, Vocab::standard()).expect("default config is valid")
}
