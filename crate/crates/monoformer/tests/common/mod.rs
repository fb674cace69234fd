#![allow(dead_code)]

use std::path::Path;

use monoformer::config::RunConfig;
use monoformer::dataset::write_synthetic_sequence;
use monoformer_core::synthetic::{generate_synthetic_scene, SyntheticScene, SyntheticSceneConfig};

/// Boxes-on-ground sequence translating forward 0.3 m per frame.
pub fn scene(frames: usize, size: (usize, usize), seed: u64) -> SyntheticScene {
    let path = SyntheticSceneConfig::translating_path(frames, [0.0, 0.0, 0.3]);
    generate_synthetic_scene(&SyntheticSceneConfig::boxes_on_ground(size, path), seed).unwrap().1
}

pub fn write_scene(root: &Path, sequence: &str, frames: usize, size: (usize, usize), seed: u64) -> SyntheticScene {
    let s = scene(frames, size, seed);
    write_synthetic_sequence(root, sequence, &s).unwrap();
    s
}

/// A model small enough to train in milliseconds.
pub fn tiny_config(size: (usize, usize), out: &Path, data: &Path) -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            format!("model.image_size=[{}, {}]", size.0, size.1),
            "model.num_layers=2".into(),
            "model.num_heads=2".into(),
            "model.head_dim=4".into(),
            "model.embed_dim=8".into(),
            "model.patch_size=2".into(),
            "model.stem_channels=[4]".into(),
            "model.mlp_ratio=2".into(),
            "model.decoder_channels=[8, 4, 4, 4]".into(),
            "train.batch_size=2".into(),
            "train.epochs=2".into(),
            format!("output_dir={:?}", out.display().to_string()),
            format!("data.train_root={:?}", data.display().to_string()),
        ])
        .unwrap()
}
