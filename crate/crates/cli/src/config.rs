//! Pipeline configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dc3dcd_core::features::FeatureParams;
use dc3dcd_core::net::BackboneConfig;
use dc3dcd_core::similarity::YsimParams;
use dc3dcd_core::synth::ChangeClass;
use dc3dcd_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything the stages share. Missing sections take their defaults; the
/// top-level `seed` and `dl0` override `train.seed` and `backbone.dl0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Subsampling resolution in meters.
    pub dl0: f64,
    /// First-epoch cloud; `<workdir>/pc1.xyz` when absent.
    pub pc1: Option<PathBuf>,
    /// Second-epoch cloud, optionally labelled; `<workdir>/pc2.xyz` when absent.
    pub pc2: Option<PathBuf>,
    /// Class taxonomy; index = class id, 0 is unchanged.
    pub classes: Vec<String>,
    /// `None` derives the parameters from `dl0`.
    pub features: Option<FeatureParams>,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub ysim: Option<YsimParams>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dl0: 1.0,
            pc1: None,
            pc2: None,
            classes: ChangeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
            features: None,
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            ysim: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies the command-line seed and propagates shared values.
    pub fn resolve(mut self, seed: Option<u64>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.backbone.dl0 = self.dl0;
        if !(self.dl0 > 0.0) || !self.dl0.is_finite() {
            bail!("dl0 must be a positive number, got {}", self.dl0);
        }
        if self.classes.len() < 2 {
            bail!("the class taxonomy needs at least two classes");
        }
        Ok(self)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Every class except unchanged (id 0).
    pub fn change_classes(&self) -> Vec<u32> {
        (1..self.classes.len() as u32).collect()
    }

    pub fn feature_params(&self) -> FeatureParams {
        self.features.unwrap_or_else(|| FeatureParams::for_resolution(self.dl0))
    }

    pub fn ysim_params(&self) -> YsimParams {
        self.ysim.unwrap_or_else(|| YsimParams::for_resolution(self.dl0))
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 4\n[train]\nepochs = 3\n[backbone]\nchannels = [8, 16]\n").unwrap();
        let cfg = cfg.resolve(None).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.train.k, 50);
        assert_eq!(cfg.backbone.channels, vec![8, 16]);
        assert_eq!(cfg.n_classes(), 7);
    }

    #[test]
    fn cli_seed_wins_and_unknown_keys_fail() {
        let cfg = PipelineConfig::default().resolve(Some(9)).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        assert!(toml::from_str::<PipelineConfig>("sede = 1").is_err());
        assert!(PipelineConfig { dl0: 0.0, ..Default::default() }.resolve(None).is_err());
    }
}
