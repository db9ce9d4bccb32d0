//! Fixed artifact names inside the flat working directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dc3dcd_core::Error;
use serde::{Deserialize, Serialize};

pub const PC1: &str = "pc1.xyz";
pub const PC2: &str = "pc2.xyz";
pub const SCENE: &str = "scene.json";
pub const PC1_SUB: &str = "pc1_sub.xyz";
pub const PC2_SUB: &str = "pc2_sub.xyz";
pub const FEATURES_PC1: &str = "features_pc1.dcft";
pub const FEATURES_PC2: &str = "features_pc2.dcft";
pub const FEATURES_META: &str = "features.json";
pub const YSIM_TXT: &str = "ysim.txt";
pub const YSIM_JSON: &str = "ysim.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CKPT: &str = "ckpt";
pub const FINAL_CKPT: &str = "ckpt/final";
pub const CLUSTERS: &str = "clusters.dckm";
pub const RUN: &str = "run.json";
pub const PSEUDO_LABELS: &str = "pseudo_labels.txt";
pub const MAPPING: &str = "mapping.json";
pub const PRED_LABELS: &str = "pred_labels.txt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

/// What `train` leaves for the later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    /// True when the network predicts classes directly.
    pub supervised: bool,
    /// Number of output labels (pseudo-clusters or classes).
    pub k: usize,
    pub n_points: usize,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating workdir {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an artifact an earlier stage must have written.
    pub fn require(&self, name: &str, stage: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Dependency(format!("{} not found, run `{stage}` first", p.display())).into());
        }
        Ok(p)
    }

    pub fn run_info(&self) -> anyhow::Result<RunInfo> {
        let p = self.require(RUN, "train")?;
        Ok(serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u32]) -> anyhow::Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_labels(path: &Path) -> anyhow::Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .with_context(|| format!("{}:{}: invalid label {l:?}", path.display(), i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        write_labels(&p, &[3, 0, 49]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![3, 0, 49]);
        assert!(!dir.path().join(".l.txt.tmp").exists());
    }

    #[test]
    fn missing_artifact_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::create(dir.path()).unwrap();
        let err = wd.require(PSEUDO_LABELS, "infer").unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Dependency(_))));
        assert!(err.to_string().contains("pseudo_labels.txt"));
    }
}
