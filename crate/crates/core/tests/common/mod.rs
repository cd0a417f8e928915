#![allow(dead_code)]

use dtm_core::data::{embed_dataset, synth_dataset, BundleSet, MutationRecord, SynthDatasetConfig, TrackSet};
use dtm_core::trainer::TrainConfig;

/// Small synthetic dataset with its embeddings.
pub fn fixture(proteins: usize, per_protein: usize, d_raw: usize, seed: u64) -> (Vec<MutationRecord>, BundleSet) {
    let records = synth_dataset(&SynthDatasetConfig {
        proteins,
        mutations_per_protein: per_protein,
        min_len: 30,
        max_len: 60,
        seed,
        ..Default::default()
    })
    .unwrap();
    let bundles = embed_dataset(&records, TrackSet::Seq, d_raw, seed).unwrap();
    (records, bundles)
}

pub fn desk_config(epochs: usize, d_proj: usize) -> TrainConfig {
    TrainConfig {
        max_lr: 1e-2,
        epochs,
        batch_size: 4,
        d_proj,
        seed: 7,
        ..Default::default()
    }
}
