//! The pipeline stages. Each reads its inputs from the workdir and writes its
//! outputs under fixed names, so stages compose without extra flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use dc3dcd_core::cloud::{grid_subsample, load_xyz, save_xyz, Epoch, PointCloud};
use dc3dcd_core::evalmap::{apply_mapping, binary_collapse, majority_map, metrics, ClassMapping, MetricsReport};
use dc3dcd_core::features::{compute_all, read_dcft, write_dcft, FeatureSidecar, Standardization};
use dc3dcd_core::net::{load_checkpoint, save_checkpoint};
use dc3dcd_core::similarity::{estimate_ysim, save_ysim, SimilaritySource};
use dc3dcd_core::synth::{generate, urban_scene, SceneSpec, UrbanParams, N_CLASSES};
use dc3dcd_core::trainer::{self, Dataset, LossMode, RunFiles};
use dc3dcd_core::Error;

use crate::config::PipelineConfig;
use crate::workdir::{self as wd, read_labels, write_atomic, write_labels, RunInfo, Workdir};

pub enum SceneSource {
    Spec(PathBuf),
    Urban(UrbanParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSummary {
    pub n1: usize,
    pub n2: usize,
}

/// Generates a scene and writes `pc1.xyz`, `pc2.xyz` (labels as 4th column)
/// and the scene description. `seed` replaces the seed stored in the scene file when given.
pub fn synth(w: &Workdir, source: &SceneSource, seed: Option<u64>) -> anyhow::Result<SynthSummary> {
    let mut spec = match source {
        SceneSource::Spec(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading scene spec {}", path.display()))?;
            SceneSpec::from_json(&text)?
        }
        SceneSource::Urban(p) => urban_scene(p),
    };
    if let Some(s) = seed {
        spec.rng_seed = s;
    }
    let scene = generate(&spec)?;
    let pc2 = scene.pc2.clone().with_labels(scene.gt_labels.clone())?;
    save_xyz(&w.path(wd::PC1), &scene.pc1)?;
    save_xyz(&w.path(wd::PC2), &pc2)?;
    write_atomic(&w.path(wd::SCENE), spec.to_json()?.as_bytes())?;
    log::info!("synth: pc1 {} points, pc2 {} points", scene.pc1.len(), pc2.len());
    Ok(SynthSummary {
        n1: scene.pc1.len(),
        n2: pc2.len(),
    })
}

fn input_cloud(w: &Workdir, configured: &Option<PathBuf>, default: &str, epoch: Epoch) -> anyhow::Result<PointCloud> {
    let path = match configured {
        Some(p) if p.exists() => p.clone(),
        Some(p) => return Err(Error::Dependency(format!("input cloud {} does not exist", p.display())).into()),
        None => w.require(default, "synth")?,
    };
    Ok(load_xyz(&path, epoch)?)
}

/// Subsamples both epochs at `dl0` and caches the standardized features.
pub fn features(w: &Workdir, cfg: &PipelineConfig) -> anyhow::Result<SynthSummary> {
    let pc1 = input_cloud(w, &cfg.pc1, wd::PC1, Epoch::First)?;
    let pc2 = input_cloud(w, &cfg.pc2, wd::PC2, Epoch::Second)?;
    let pc1 = grid_subsample(&pc1, cfg.dl0)?;
    let pc2 = grid_subsample(&pc2, cfg.dl0)?;
    let params = cfg.feature_params();
    let fs = compute_all(&pc1, &pc2, &params)?;
    save_xyz(&w.path(wd::PC1_SUB), &pc1)?;
    save_xyz(&w.path(wd::PC2_SUB), &pc2)?;
    write_dcft(&w.path(wd::FEATURES_PC1), &fs.pc1)?;
    write_dcft(&w.path(wd::FEATURES_PC2), &fs.pc2)?;
    write_atomic(
        &w.path(wd::FEATURES_META),
        serde_json::to_string_pretty(&fs.sidecar(&params))?.as_bytes(),
    )?;
    log::info!("features: {} + {} subsampled points", pc1.len(), pc2.len());
    Ok(SynthSummary {
        n1: pc1.len(),
        n2: pc2.len(),
    })
}

/// Subsampled clouds as written by `features`.
pub fn load_clouds(w: &Workdir) -> anyhow::Result<(PointCloud, PointCloud)> {
    let pc1 = load_xyz(&w.require(wd::PC1_SUB, "features")?, Epoch::First)?;
    let pc2 = load_xyz(&w.require(wd::PC2_SUB, "features")?, Epoch::Second)?;
    Ok((pc1, pc2))
}

/// Reference labels of the subsampled second epoch.
pub fn load_truth(w: &Workdir) -> anyhow::Result<Vec<u32>> {
    let (_, pc2) = load_clouds(w)?;
    pc2.labels
        .ok_or_else(|| Error::Dependency("the second-epoch cloud carries no reference labels".into()).into())
}

fn load_dataset(
    w: &Workdir,
    with_features: bool,
    ysim: Option<(SimilaritySource, &PipelineConfig)>,
) -> anyhow::Result<Dataset> {
    let (pc1, pc2) = load_clouds(w)?;
    let features = if with_features {
        let f1 = read_dcft(&w.require(wd::FEATURES_PC1, "features")?)?;
        let f2 = read_dcft(&w.require(wd::FEATURES_PC2, "features")?)?;
        let meta: FeatureSidecar = serde_json::from_str(&std::fs::read_to_string(
            w.require(wd::FEATURES_META, "features")?,
        )?)?;
        Some((f1, f2, Standardization { mean: meta.mean, std: meta.std }))
    } else {
        None
    };
    let ysim = match ysim {
        Some((source, cfg)) => {
            let params = cfg.ysim_params();
            let map = estimate_ysim(source, &pc1, &pc2, &params)?;
            save_ysim(&w.path(wd::YSIM_TXT), &w.path(wd::YSIM_JSON), &map, &params)?;
            Some(map)
        }
        None => None,
    };
    Ok(Dataset::from_parts(pc1, pc2, features, ysim.as_ref())?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Train directly on ground truth inside a few labelled cylinders.
    pub supervised: bool,
    pub cylinders: Option<usize>,
    /// Adds the contrastive term with similarity flags from this source.
    pub contrastive: Option<SimilaritySource>,
    pub epochs: Option<usize>,
}

/// Runs training and writes the log, per-epoch checkpoints, `ckpt/final`,
/// the final clustering and `run.json`.
pub fn train(w: &Workdir, cfg: &PipelineConfig, opts: &TrainOptions) -> anyhow::Result<trainer::TrainOutput> {
    let mut tc = cfg.train.clone();
    let mut bb = cfg.backbone.clone();
    if let Some(e) = opts.epochs {
        tc.epochs = e;
    }
    if let Some(c) = opts.cylinders {
        tc.supervised_cylinders = c;
    }
    tc.loss = match (opts.supervised, opts.contrastive) {
        (true, Some(_)) => anyhow::bail!("supervised mode has no contrastive term"),
        (true, None) => LossMode::SupervisedNll,
        (false, Some(_)) => LossMode::PseudoNllPlusContrastive,
        (false, None) => tc.loss,
    };
    bb.n_prototypes = if tc.loss == LossMode::SupervisedNll { N_CLASSES } else { tc.k };
    tc.validate(&bb)?;
    let ds = load_dataset(w, bb.use_features, opts.contrastive.map(|s| (s, cfg)))?;
    let ckpt = w.path(wd::CKPT);
    if ckpt.exists() {
        std::fs::remove_dir_all(&ckpt)?;
    }
    let files = RunFiles {
        log: Some(w.path(wd::TRAIN_LOG)),
        ckpt_dir: Some(ckpt),
    };
    let out = trainer::train(&ds, &bb, &tc, &files)?;
    save_checkpoint(&w.path(wd::FINAL_CKPT), &bb, &out.params)?;
    if let Some(model) = &out.model {
        model.save(&w.path(wd::CLUSTERS))?;
    }
    let info = RunInfo {
        supervised: tc.loss == LossMode::SupervisedNll,
        k: bb.n_prototypes,
        n_points: ds.n2(),
        radius: tc.radius,
    };
    write_atomic(&w.path(wd::RUN), serde_json::to_string_pretty(&info)?.as_bytes())?;
    Ok(out)
}

/// Labels every subsampled pc2 point. A supervised run yields classes, which
/// are also written as final predictions.
pub fn infer(w: &Workdir) -> anyhow::Result<Vec<u32>> {
    let (bb, params) = load_checkpoint(&w.require(wd::FINAL_CKPT, "train")?)?;
    let info = w.run_info()?;
    let ds = load_dataset(w, bb.use_features, None)?;
    let labels = trainer::infer(&ds, &bb, &params, info.radius)?;
    write_labels(&w.path(wd::PSEUDO_LABELS), &labels)?;
    if info.supervised {
        write_labels(&w.path(wd::PRED_LABELS), &labels)?;
    }
    Ok(labels)
}

pub enum MapSource {
    /// Most frequent reference class of every cluster.
    AutoMajority,
    File(PathBuf),
}

/// Applies a complete mapping to the pseudo-labels; writes `mapping.json` and
/// `pred_labels.txt`.
pub fn map(w: &Workdir, cfg: &PipelineConfig, source: &MapSource) -> anyhow::Result<ClassMapping> {
    let pseudo = read_labels(&w.require(wd::PSEUDO_LABELS, "infer")?)?;
    let k = w.run_info()?.k;
    let mapping = match source {
        MapSource::AutoMajority => majority_map(&pseudo, &load_truth(w)?, k, cfg.n_classes())?,
        MapSource::File(p) => read_mapping(p)?,
    };
    write_predictions(w, cfg, &pseudo, &mapping, k)?;
    Ok(mapping)
}

pub fn read_mapping(path: &Path) -> anyhow::Result<ClassMapping> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading mapping {}", path.display()))?;
    Ok(ClassMapping::from_json(&text)?)
}

/// Checks totality over `[0, k)`, then persists the mapping and the mapped labels.
pub fn write_predictions(
    w: &Workdir,
    cfg: &PipelineConfig,
    pseudo: &[u32],
    mapping: &ClassMapping,
    k: usize,
) -> anyhow::Result<Vec<u32>> {
    mapping.validate()?;
    if mapping.n_classes != cfg.n_classes() {
        return Err(Error::Format(format!(
            "mapping has {} classes, the taxonomy has {}",
            mapping.n_classes,
            cfg.n_classes()
        ))
        .into());
    }
    if let Some(e) = mapping.entries.iter().find(|e| e.cluster as usize >= k) {
        return Err(Error::Format(format!("mapping names cluster {} but there are only {k}", e.cluster)).into());
    }
    let missing = mapping.unmapped(k);
    if !missing.is_empty() {
        return Err(Error::Unmapped(missing).into());
    }
    let pred = apply_mapping(pseudo, mapping)?;
    write_atomic(&w.path(wd::MAPPING), mapping.to_json()?.as_bytes())?;
    write_labels(&w.path(wd::PRED_LABELS), &pred)?;
    Ok(pred)
}

/// Scores `pred_labels.txt` against the reference labels.
pub fn eval(w: &Workdir, cfg: &PipelineConfig) -> anyhow::Result<MetricsReport> {
    let pred = read_labels(&w.require(wd::PRED_LABELS, "map")?)?;
    score_and_write(w, cfg, &pred)
}

/// Writes `metrics.json` and the plain-text table for `pred`.
pub fn score_and_write(w: &Workdir, cfg: &PipelineConfig, pred: &[u32]) -> anyhow::Result<MetricsReport> {
    let truth = load_truth(w)?;
    let report = metrics(pred, &truth, cfg.n_classes(), &cfg.change_classes())?;
    let binary = binary_collapse(pred, &truth)?;
    let mut table = report.to_table(&cfg.class_names());
    table.push_str(&format!(
        "{:<20} {:8.2}\n{:<20} {:8.2}\n",
        "IoU changed(%)",
        100.0 * binary.iou_changed,
        "IoU unchanged(%)",
        100.0 * binary.iou_unchanged
    ));
    write_atomic(&w.path(wd::METRICS_JSON), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&w.path(wd::METRICS_TXT), table.as_bytes())?;
    Ok(report)
}
