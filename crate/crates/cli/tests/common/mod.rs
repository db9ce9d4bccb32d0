#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dc3dcd_cli::commands::{self, SceneSource, TrainOptions};
use dc3dcd_cli::config::PipelineConfig;
use dc3dcd_cli::workdir::Workdir;

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_scene.json")
}

pub const TOY_CONFIG: &str = r#"
seed = 3
dl0 = 1.0

[backbone]
channels = [4, 8]
k = [8, 8]
feature_dim = 8

[train]
epochs = 2
pairs_per_epoch = 6
batch_size = 3
radius = 8.0
k = 6
kmeans_iters = 20
kmeans_batch = 256
"#;

pub fn toy_config() -> PipelineConfig {
    toml::from_str::<PipelineConfig>(TOY_CONFIG).unwrap().resolve(None).unwrap()
}

/// Runs synth, features, train and infer on the bundled toy scene.
pub fn inferred_workdir(root: &Path) -> (Workdir, PipelineConfig) {
    let wd = Workdir::create(root).unwrap();
    let cfg = toy_config();
    commands::synth(&wd, &SceneSource::Spec(fixture()), None).unwrap();
    commands::features(&wd, &cfg).unwrap();
    commands::train(&wd, &cfg, &TrainOptions::default()).unwrap();
    commands::infer(&wd).unwrap();
    (wd, cfg)
}
