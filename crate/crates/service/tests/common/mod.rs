#![allow(dead_code)]

use std::path::{Path, PathBuf};

use smup_core::data::{generate_dataset, Dataset, SplitProtocol, SynthSpec};
use smup_core::meta::trainer::Trainer;
use smup_core::meta::TrainConfig;
use smup_core::retrieval::embed_gallery;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub index: PathBuf,
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        channels: vec![4, 8],
        d: 8,
        epochs: 2,
        warmup_epochs: 1,
        meta_batch: 2,
        steps_per_epoch: Some(1),
        warmup_batch: 8,
        probe_pairs: 8,
        split: SplitProtocol::StyleHoldout,
        ..Default::default()
    }
}

pub fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let spec = SynthSpec { num_categories: 3, instances_per_category: 2, size: 16, seed: 4, ..Default::default() };
    generate_dataset(&spec, &data).unwrap();
    data
}

/// Dataset, an untrained checkpoint and an index over every photo.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ds = Dataset::load(&data).unwrap();
    let trainer = Trainer::new(small_config(), &ds).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    trainer.checkpoint().save(&ckpt).unwrap();
    let all: Vec<usize> = (0..ds.photos.len()).collect();
    let index = dir.path().join("gallery.smix");
    embed_gallery(&trainer.model(), &ds, &all).unwrap().save(&index).unwrap();
    Fixture { dir, data, ckpt, index }
}
