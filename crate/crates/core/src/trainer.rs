//! Alternating clustering and pseudo-label training, cylinder sampling,
//! augmentation and tiled inference.

use std::f64::consts::TAU;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cloud::{grid_subsample, Matrix, PointCloud};
use crate::cluster::{
    cluster_entropy, compute_weights, counts_of, minibatch_kmeans, nmi, split_empty, ClassWeights, ClusterModel,
    KmeansParams,
};
use crate::error::{Error, Result};
use crate::evalmap::{apply_mapping, majority_map, metrics, ClassMapping, MetricsReport};
use crate::features::{compute_all, FeatureParams, FeatureSet, Standardization, N_FEATURES};
use crate::net::backbone::{accumulate_grads, bind_params, evaluate, forward, input_matrix, set_prototypes};
use crate::net::{init_params, lr_at, save_checkpoint, BackboneConfig, NetParams, PairGeometry, Sgd, Tape, PROTOTYPES};
use crate::similarity::{estimate_ysim, SimilarityMap, SimilaritySource, YsimParams};
use crate::spatial::{Dims, SpatialIndex};
use crate::synth::{change_class_ids, LabeledScenePair, N_CLASSES};

/// Redraws allowed per cylinder before sampling gives up.
pub const MAX_REDRAWS: usize = 20;

/// Both epochs subsampled at `dl0`, with everything training may consume.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pc1: PointCloud,
    pub pc2: PointCloud,
    /// Standardized handcrafted features.
    pub feat1: Option<Matrix>,
    pub feat2: Option<Matrix>,
    pub stats: Option<Standardization>,
    /// Ground-truth class of every pc2 point.
    pub gt: Option<Vec<u32>>,
    /// 1 where the pc2 point is considered unchanged.
    pub ysim: Option<Vec<u8>>,
    pos1: Vec<[f64; 3]>,
    pos2: Vec<[f64; 3]>,
    xy1: SpatialIndex,
    xy2: SpatialIndex,
}

/// What [`Dataset::from_scene`] derives from a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub dl0: f64,
    pub features: bool,
    pub ysim: Option<SimilaritySource>,
}

impl Dataset {
    pub fn new(
        pc1: PointCloud,
        pc2: PointCloud,
        features: Option<&FeatureSet>,
        ysim: Option<&SimilarityMap>,
    ) -> Result<Self> {
        let parts = features.map(|f| (f.pc1.clone(), f.pc2.clone(), f.stats.clone()));
        Self::from_parts(pc1, pc2, parts, ysim)
    }

    /// Like [`Dataset::new`] with feature matrices read back from a cache.
    pub fn from_parts(
        pc1: PointCloud,
        pc2: PointCloud,
        features: Option<(Matrix, Matrix, Standardization)>,
        ysim: Option<&SimilarityMap>,
    ) -> Result<Self> {
        if pc1.is_empty() || pc2.is_empty() {
            return Err(Error::Degenerate("both epochs need at least one point".into()));
        }
        if let Some((f1, f2, _)) = &features {
            if f1.rows() != pc1.len() || f2.rows() != pc2.len() {
                return Err(Error::Argument("feature rows do not match the clouds".into()));
            }
        }
        if let Some(y) = ysim {
            if y.len() != pc2.len() {
                return Err(Error::Argument(format!("{} similarity flags for {} points", y.len(), pc2.len())));
            }
        }
        let pos1 = pc1.positions();
        let pos2 = pc2.positions();
        let (feat1, feat2, stats) = match features {
            Some((f1, f2, st)) => (Some(f1), Some(f2), Some(st)),
            None => (None, None, None),
        };
        Ok(Self {
            xy1: SpatialIndex::new(&pos1, Dims::Xy),
            xy2: SpatialIndex::new(&pos2, Dims::Xy),
            feat1,
            feat2,
            stats,
            gt: pc2.labels.clone(),
            ysim: ysim.map(|y| y.flags.clone()),
            pc1,
            pc2,
            pos1,
            pos2,
        })
    }

    /// Subsamples a generated scene and computes the requested extras.
    pub fn from_scene(scene: &LabeledScenePair, opts: &DatasetOptions) -> Result<Self> {
        let pc2 = scene.pc2.clone().with_labels(scene.gt_labels.clone())?;
        let pc1 = grid_subsample(&scene.pc1, opts.dl0)?;
        let pc2 = grid_subsample(&pc2, opts.dl0)?;
        let features = if opts.features {
            Some(compute_all(&pc1, &pc2, &FeatureParams::for_resolution(opts.dl0))?)
        } else {
            None
        };
        let ysim = match opts.ysim {
            Some(src) => Some(estimate_ysim(src, &pc1, &pc2, &YsimParams::for_resolution(opts.dl0))?),
            None => None,
        };
        Self::new(pc1, pc2, features.as_ref(), ysim.as_ref())
    }

    pub fn n1(&self) -> usize {
        self.pos1.len()
    }

    pub fn n2(&self) -> usize {
        self.pos2.len()
    }

    pub fn positions2(&self) -> &[[f64; 3]] {
        &self.pos2
    }

    /// Point ids of both epochs within `radius` of `center` in XY.
    pub fn cylinder(&self, center: [f64; 2], radius: f64) -> Result<CylinderPair> {
        Ok(CylinderPair {
            center,
            radius,
            idx1: self.xy1.radius_query_2d(center, radius)?,
            idx2: self.xy2.radius_query_2d(center, radius)?,
        })
    }

    /// `[min_x, min_y, max_x, max_y]` of pc2.
    pub fn bounds2(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &self.pos2 {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }
}

/// A vertical cylinder and the ids of the points of each epoch inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderPair {
    pub center: [f64; 2],
    pub radius: f64,
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
}

/// Network-ready copy of a cylinder: positions relative to its axis and input matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub pos1: Vec<[f64; 3]>,
    pub pos2: Vec<[f64; 3]>,
    pub x1: Matrix,
    pub x2: Matrix,
}

pub fn prepare(ds: &Dataset, pair: &CylinderPair, bb: &BackboneConfig) -> Result<PreparedPair> {
    if pair.idx1.is_empty() || pair.idx2.is_empty() {
        return Err(Error::Degenerate("cylinder with an empty epoch".into()));
    }
    let [cx, cy] = pair.center;
    let local = |pos: &[[f64; 3]], ids: &[usize]| -> Vec<[f64; 3]> {
        ids.iter().map(|&i| [pos[i][0] - cx, pos[i][1] - cy, pos[i][2]]).collect()
    };
    Ok(PreparedPair {
        pos1: local(&ds.pos1, &pair.idx1),
        pos2: local(&ds.pos2, &pair.idx2),
        x1: input_matrix(bb, ds.feat1.as_ref(), &pair.idx1)?,
        x2: input_matrix(bb, ds.feat2.as_ref(), &pair.idx2)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotate: bool,
    pub jitter_sigma: f64,
}

/// Random rotation about the cylinder axis shared by both epochs, plus per-point jitter.
pub fn augment(p: &PreparedPair, aug: &AugmentParams, stats: Option<&Standardization>, seed: u64) -> Result<PreparedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = if aug.rotate { rng.random_range(0.0..TAU) } else { 0.0 };
    augment_with(p, angle, aug.jitter_sigma, stats, &mut rng)
}

/// [`augment`] with an explicit angle. Normal columns are rotated in raw
/// units and re-standardized; the other features are rotation invariant.
pub fn augment_with(
    p: &PreparedPair,
    angle: f64,
    sigma: f64,
    stats: Option<&Standardization>,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedPair> {
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!("jitter sigma must be >= 0, got {sigma}")));
    }
    let (s, c) = angle.sin_cos();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut move_points = |pos: &[[f64; 3]]| -> Vec<[f64; 3]> {
        pos.iter()
            .map(|q| {
                let r = [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]];
                if sigma > 0.0 {
                    [
                        r[0] + noise.sample(rng),
                        r[1] + noise.sample(rng),
                        r[2] + noise.sample(rng),
                    ]
                } else {
                    r
                }
            })
            .collect()
    };
    let pos1 = move_points(&p.pos1);
    let pos2 = move_points(&p.pos2);
    let rotate_normals = |x: &Matrix| -> Matrix {
        let mut out = x.clone();
        let Some(st) = stats else { return out };
        if angle == 0.0 || x.cols() != 1 + N_FEATURES {
            return out;
        }
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let nx = row[1] as f64 * st.std[0] + st.mean[0];
            let ny = row[2] as f64 * st.std[1] + st.mean[1];
            let (rx, ry) = (c * nx - s * ny, s * nx + c * ny);
            row[1] = ((rx - st.mean[0]) / st.std[0]) as f32;
            row[2] = ((ry - st.mean[1]) / st.std[1]) as f32;
        }
        out
    };
    Ok(PreparedPair {
        pos1,
        pos2,
        x1: rotate_normals(&p.x1),
        x2: rotate_normals(&p.x2),
    })
}

/// Draws `n` cylinders whose centers are pc2 points. The pseudo-cluster of a
/// center is drawn with probability proportional to `W_k * count_k`, then the
/// point uniformly among that cluster's members.
pub fn sample_cylinders(
    ds: &Dataset,
    labels: &[u32],
    weights: &ClassWeights,
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<CylinderPair>> {
    if labels.len() != ds.n2() {
        return Err(Error::Argument(format!("{} labels for {} pc2 points", labels.len(), ds.n2())));
    }
    let k = weights.weights.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l as usize)
            .ok_or_else(|| Error::Argument(format!("label {l} has no weight")))?
            .push(i);
    }
    let mass: Vec<f64> = (0..k).map(|c| weights.weights[c] * members[c].len() as f64).collect();
    let dist = WeightedIndex::new(&mass).map_err(|e| Error::Argument(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut drawn = None;
        for _ in 0..=MAX_REDRAWS {
            let c = dist.sample(&mut rng);
            let p = members[c][rng.random_range(0..members[c].len())];
            let pair = ds.cylinder([ds.pos2[p][0], ds.pos2[p][1]], radius)?;
            if !pair.idx1.is_empty() && !pair.idx2.is_empty() {
                drawn = Some(pair);
                break;
            }
        }
        out.push(drawn.ok_or_else(|| {
            Error::Coverage(format!("{} consecutive cylinder draws had an empty epoch", MAX_REDRAWS + 1))
        })?);
    }
    Ok(out)
}

/// Regular grid of centers with step `radius` covering the pc2 bounding box.
pub fn tile_centers(ds: &Dataset, radius: f64) -> Vec<[f64; 2]> {
    let b = ds.bounds2();
    let nx = ((b[2] - b[0]) / radius).ceil() as usize + 1;
    let ny = ((b[3] - b[1]) / radius).ceil() as usize + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push([b[0] + i as f64 * radius, b[1] + j as f64 * radius]);
        }
    }
    out
}

/// Features of the last covering cylinder and mean logits over all covering cylinders.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePass {
    pub features: Matrix,
    pub logits: Matrix,
    pub coverage: Vec<u32>,
}

/// Forwards every non-empty tile in grid order.
///
/// A tile without pc1 points borrows the pc1 point nearest to its center so the
/// difference streams stay defined.
pub fn tile_pass(ds: &Dataset, bb: &BackboneConfig, params: &NetParams, radius: f64) -> Result<TilePass> {
    let k = params.get(PROTOTYPES)?.dims2().0;
    let mut features = Matrix::zeros(ds.n2(), bb.feature_dim);
    let mut logits = vec![0.0f64; ds.n2() * k];
    let mut coverage = vec![0u32; ds.n2()];
    for center in tile_centers(ds, radius) {
        let mut pair = ds.cylinder(center, radius)?;
        if pair.idx2.is_empty() {
            continue;
        }
        if pair.idx1.is_empty() {
            pair.idx1 = vec![ds.xy1.nearest([center[0], center[1], 0.0])?.id];
        }
        let prep = prepare(ds, &pair, bb)?;
        let geom = PairGeometry::build(bb, &prep.pos1, &prep.pos2)?;
        let (f, l) = evaluate(bb, params, &geom, &prep.x1, &prep.x2)?;
        for (r, &i) in pair.idx2.iter().enumerate() {
            features.row_mut(i).copy_from_slice(f.row(r));
            for (acc, v) in logits[i * k..(i + 1) * k].iter_mut().zip(l.row(r)) {
                *acc += *v as f64;
            }
            coverage[i] += 1;
        }
    }
    if let Some(i) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::Coverage(format!("pc2 point {i} is covered by no tile")));
    }
    let mean: Vec<f32> = logits
        .chunks(k)
        .zip(&coverage)
        .flat_map(|(row, &c)| row.iter().map(move |v| (v / c as f64) as f32))
        .collect();
    Ok(TilePass {
        features,
        logits: Matrix::from_vec(ds.n2(), k, mean)?,
        coverage,
    })
}

/// Argmax per row, lowest column on ties.
pub fn argmax_rows(m: &Matrix) -> Vec<u32> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Pseudo-label of every pc2 point from tile-averaged logits.
pub fn infer(ds: &Dataset, bb: &BackboneConfig, params: &NetParams, radius: f64) -> Result<Vec<u32>> {
    Ok(argmax_rows(&tile_pass(ds, bb, params, radius)?.logits))
}

/// Clusters the current deep features of all pc2 points and installs the centroids as prototypes.
pub fn cluster_step(
    ds: &Dataset,
    bb: &BackboneConfig,
    params: &mut NetParams,
    radius: f64,
    kmeans: &KmeansParams,
    seed: u64,
) -> Result<ClusterModel> {
    let pass = tile_pass(ds, bb, params, radius)?;
    let model = minibatch_kmeans(&pass.features, kmeans, seed)?;
    let model = split_empty(&model, &pass.features, seed ^ 0x5711)?;
    set_prototypes(params, bb, &model)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    PseudoNll,
    PseudoNllPlusContrastive,
    SupervisedNll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub radius: f64,
    /// Number of pseudo-clusters.
    pub k: usize,
    pub rotate: bool,
    /// Point jitter; `None` means `dl0 / 10`.
    pub jitter_sigma: Option<f64>,
    pub loss: LossMode,
    pub seed: u64,
    pub lr0: f64,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_clamp: f64,
    /// Use inverse-frequency weights for sampling and loss; uniform over points otherwise.
    pub use_weights: bool,
    pub kmeans_iters: usize,
    pub kmeans_batch: usize,
    /// Labelled cylinders in supervised mode.
    pub supervised_cylinders: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            pairs_per_epoch: 300,
            batch_size: 10,
            radius: 15.0,
            k: 50,
            rotate: true,
            jitter_sigma: None,
            loss: LossMode::PseudoNll,
            seed: 0,
            lr0: 1e-3,
            lr_gamma: 0.95,
            momentum: 0.98,
            weight_clamp: crate::cluster::DEFAULT_WEIGHT_CLAMP,
            use_weights: true,
            kmeans_iters: 100,
            kmeans_batch: 1024,
            supervised_cylinders: N_CLASSES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, bb: &BackboneConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_epoch == 0 || self.supervised_cylinders == 0 {
            return Err(Error::Config(
                "epochs, batch_size, pairs_per_epoch and supervised_cylinders must be >= 1".into(),
            ));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!("radius must be > 0, got {}", self.radius)));
        }
        if !(self.lr0 > 0.0) || !(self.lr_gamma > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr0 > 0, lr_gamma > 0 and momentum in [0, 1) required".into()));
        }
        let want = match self.loss {
            LossMode::SupervisedNll => N_CLASSES,
            _ => self.k,
        };
        if bb.n_prototypes != want {
            return Err(Error::Config(format!(
                "backbone has {} prototypes, the loss mode needs {want}",
                bb.n_prototypes
            )));
        }
        bb.validate()
    }

    pub fn kmeans(&self) -> KmeansParams {
        KmeansParams {
            batch_size: self.kmeans_batch,
            n_iters: self.kmeans_iters,
            ..KmeansParams::new(self.k)
        }
    }

    pub fn augment(&self, dl0: f64) -> AugmentParams {
        AugmentParams {
            rotate: self.rotate,
            jitter_sigma: self.jitter_sigma.unwrap_or(dl0 / 10.0),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// NMI between this epoch's pseudo-labels and ground truth.
    pub nmi_gt: Option<f64>,
    /// NMI between this epoch's and the previous epoch's pseudo-labels.
    pub nmi_prev: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Share of the largest pseudo-cluster.
    pub max_cluster_share: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    /// JSON-lines diagnostics, truncated at start.
    pub log: Option<PathBuf>,
    /// Parent of the `epoch_<n>` checkpoint directories.
    pub ckpt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: NetParams,
    pub diagnostics: Vec<EpochDiagnostics>,
    /// Clustering of the final features; prototypes in `params` match it.
    pub model: Option<ClusterModel>,
}

/// Decorrelated sub-seed.
pub fn sub_seed(seed: u64, tag: u64, a: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_KMEANS: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_AUGMENT: u64 = 4;
const TAG_SUPERVISED: u64 = 5;

/// `n` labelled cylinders visiting the present ground-truth classes in
/// round-robin order, each centered on a random point of its class.
pub fn supervised_cylinders(ds: &Dataset, n: usize, radius: f64, seed: u64) -> Result<Vec<CylinderPair>> {
    let gt = ds
        .gt
        .as_ref()
        .ok_or_else(|| Error::Dependency("supervised mode needs ground-truth labels".into()))?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, &c) in gt.iter().enumerate() {
        members[c as usize].push(i);
    }
    members.retain(|m| !m.is_empty());
    if members.is_empty() || n == 0 {
        return Err(Error::Degenerate("no labelled points to place cylinders on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let pool = &members[j % members.len()];
        let mut found = None;
        for _ in 0..=MAX_REDRAWS {
            let p = pool[rng.random_range(0..pool.len())];
            let pair = ds.cylinder([ds.pos2[p][0], ds.pos2[p][1]], radius)?;
            if !pair.idx1.is_empty() {
                found = Some(pair);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::Coverage(format!("no usable cylinder for class {}", gt[pool[0]])))?);
    }
    Ok(out)
}

struct PairTargets {
    labels: Arc<Vec<u32>>,
    ysim: Option<Arc<Vec<f32>>>,
}

fn accumulate_pair(
    bb: &BackboneConfig,
    params: &mut NetParams,
    prep: &PreparedPair,
    targets: &PairTargets,
    weights: &Arc<Vec<f32>>,
    scale: f64,
) -> Result<f64> {
    let geom = PairGeometry::build(bb, &prep.pos1, &prep.pos2)?;
    let mut tape = Tape::<f32>::new();
    let vars = bind_params(&mut tape, params, true)?;
    let out = forward(&mut tape, bb, &vars, &geom, &prep.x1, &prep.x2)?;
    let mut loss = tape.weighted_nll(out.logits, targets.labels.clone(), weights.clone())?;
    if let Some(y) = &targets.ysim {
        let c = tape.contrastive(out.f_cd, y.clone())?;
        let s = tape.add(loss, c)?;
        loss = tape.scale(s, 0.5);
    }
    let value = tape.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    accumulate_grads(params, &vars, &grads, scale);
    Ok(value)
}

fn open_log(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    File::create(path)?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Runs the full alternating loop (or the supervised baseline) and returns the
/// trained parameters with prototypes fitted to the final features.
pub fn train(ds: &Dataset, bb: &BackboneConfig, cfg: &TrainConfig, files: &RunFiles) -> Result<TrainOutput> {
    cfg.validate(bb)?;
    if bb.use_features && ds.feat1.is_none() {
        return Err(Error::Dependency("backbone uses handcrafted features, dataset has none".into()));
    }
    let contrastive = cfg.loss == LossMode::PseudoNllPlusContrastive;
    if contrastive && ds.ysim.is_none() {
        return Err(Error::Dependency("contrastive mode needs similarity flags".into()));
    }
    let supervised = cfg.loss == LossMode::SupervisedNll;
    let mut params = init_params(bb, sub_seed(cfg.seed, TAG_INIT, 0))?;
    if supervised {
        params.unfreeze(PROTOTYPES);
    }
    let mut log = files.log.as_deref().map(open_log).transpose()?;
    let mut opt = Sgd::new(cfg.momentum);
    let aug = cfg.augment(bb.dl0);
    let ysim_all: Option<Vec<f32>> = ds.ysim.as_ref().map(|y| y.iter().map(|&v| v as f32).collect());
    let sup_pairs = if supervised {
        supervised_cylinders(ds, cfg.supervised_cylinders, cfg.radius, sub_seed(cfg.seed, TAG_SUPERVISED, 0))?
    } else {
        Vec::new()
    };
    let mut prev: Option<Vec<u32>> = None;
    let mut diagnostics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg.lr0, cfg.lr_gamma, epoch - 1);
        let (labels, weights, pairs, mut diag) = if supervised {
            let gt = ds.gt.as_ref().expect("checked by supervised_cylinders");
            let mut counts = vec![0usize; N_CLASSES];
            for p in &sup_pairs {
                for &i in &p.idx2 {
                    counts[gt[i] as usize] += 1;
                }
            }
            let weights = if cfg.use_weights {
                let present: Vec<usize> = counts.iter().map(|&c| c.max(1)).collect();
                compute_weights(&present, cfg.weight_clamp)?
            } else {
                ClassWeights {
                    weights: vec![1.0; N_CLASSES],
                    clamp: cfg.weight_clamp,
                }
            };
            let pairs: Vec<CylinderPair> = (0..cfg.pairs_per_epoch)
                .map(|i| sup_pairs[i % sup_pairs.len()].clone())
                .collect();
            let diag = EpochDiagnostics {
                epoch,
                loss: 0.0,
                lr,
                nmi_gt: None,
                nmi_prev: None,
                mean_entropy: None,
                max_cluster_share: None,
            };
            (gt.clone(), weights, pairs, diag)
        } else {
            let model = cluster_step(
                ds,
                bb,
                &mut params,
                cfg.radius,
                &cfg.kmeans(),
                sub_seed(cfg.seed, TAG_KMEANS, epoch as u64),
            )?;
            let labels = model.assignments.clone();
            let (nmi_gt, mean_entropy) = match &ds.gt {
                Some(gt) => (Some(nmi(&labels, gt)?), Some(cluster_entropy(&labels, gt)?.mean_entropy)),
                None => (None, None),
            };
            let nmi_prev = prev.as_ref().map(|p| nmi(&labels, p)).transpose()?;
            let share = *model.counts.iter().max().unwrap_or(&0) as f64 / labels.len() as f64;
            let weights = if cfg.use_weights {
                compute_weights(&model.counts, cfg.weight_clamp)?
            } else {
                ClassWeights {
                    weights: vec![1.0; cfg.k],
                    clamp: cfg.weight_clamp,
                }
            };
            let pairs = sample_cylinders(
                ds,
                &labels,
                &weights,
                cfg.pairs_per_epoch,
                cfg.radius,
                sub_seed(cfg.seed, TAG_SAMPLE, epoch as u64),
            )?;
            prev = Some(labels.clone());
            let diag = EpochDiagnostics {
                epoch,
                loss: 0.0,
                lr,
                nmi_gt,
                nmi_prev,
                mean_entropy,
                max_cluster_share: Some(share),
            };
            (labels, weights, pairs, diag)
        };
        let w32 = Arc::new(weights.weights.iter().map(|&w| w as f32).collect::<Vec<_>>());
        let mut total = 0.0;
        for (b, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            params.zero_grads();
            for (j, pair) in batch.iter().enumerate() {
                let prep = prepare(ds, pair, bb)?;
                let seed = sub_seed(cfg.seed, TAG_AUGMENT, ((epoch as u64) << 32) | (b * cfg.batch_size + j) as u64);
                let prep = augment(&prep, &aug, ds.stats.as_ref(), seed)?;
                let targets = PairTargets {
                    labels: Arc::new(pair.idx2.iter().map(|&i| labels[i]).collect()),
                    ysim: if contrastive {
                        let y = ysim_all.as_ref().expect("checked above");
                        Some(Arc::new(pair.idx2.iter().map(|&i| y[i]).collect()))
                    } else {
                        None
                    },
                };
                total += accumulate_pair(bb, &mut params, &prep, &targets, &w32, 1.0 / batch.len() as f64)?;
            }
            opt.step(&mut params, lr)?;
        }
        params.zero_grads();
        diag.loss = total / pairs.len() as f64;
        log::info!(
            "epoch {epoch}: loss {:.4} nmi_gt {:?} nmi_prev {:?} entropy {:?}",
            diag.loss,
            diag.nmi_gt,
            diag.nmi_prev,
            diag.mean_entropy
        );
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&diag)?)?;
        }
        if let Some(dir) = &files.ckpt_dir {
            save_checkpoint(&dir.join(format!("epoch_{epoch}")), bb, &params)?;
        }
        diagnostics.push(diag);
    }
    let model = if supervised {
        None
    } else {
        Some(cluster_step(
            ds,
            bb,
            &mut params,
            cfg.radius,
            &cfg.kmeans(),
            sub_seed(cfg.seed, TAG_KMEANS, cfg.epochs as u64 + 1),
        )?)
    };
    Ok(TrainOutput {
        params,
        diagnostics,
        model,
    })
}

/// k-means directly on the standardized handcrafted features of pc2.
pub fn kmeans_baseline(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<u32>> {
    let f = ds
        .feat2
        .as_ref()
        .ok_or_else(|| Error::Dependency("baseline needs handcrafted features".into()))?;
    let model = minibatch_kmeans(f, &KmeansParams::new(k), seed)?;
    Ok(split_empty(&model, f, seed ^ 0x5711)?.assignments)
}

/// Majority mapping of pseudo-labels against ground truth and the resulting metrics.
pub fn score(ds: &Dataset, pseudo: &[u32], k: usize) -> Result<(ClassMapping, MetricsReport)> {
    let gt = ds
        .gt
        .as_ref()
        .ok_or_else(|| Error::Dependency("scoring needs ground-truth labels".into()))?;
    let mapping = majority_map(pseudo, gt, k, N_CLASSES)?;
    let pred = apply_mapping(pseudo, &mapping)?;
    let report = metrics(&pred, gt, N_CLASSES, &change_class_ids())?;
    Ok((mapping, report))
}

/// Pseudo-label histogram share of the largest cluster.
pub fn max_share(labels: &[u32], k: usize) -> f64 {
    let counts = counts_of(labels, k);
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Epoch, Point};
    use crate::net::Variant;

    fn grid_cloud(n: usize, step: f64, z: f64, epoch: Epoch) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point::from([i as f64 * step, j as f64 * step, z]));
            }
        }
        PointCloud::new(pts, epoch).unwrap()
    }

    fn toy_dataset() -> Dataset {
        let pc1 = grid_cloud(20, 1.0, 0.0, Epoch::First);
        let mut pc2 = grid_cloud(20, 1.0, 0.0, Epoch::Second);
        let mut gt = vec![0u32; pc2.len()];
        for (i, p) in pc2.points.iter_mut().enumerate() {
            if p.x >= 10.0 {
                p.z = 5.0;
                gt[i] = 1;
            }
        }
        let pc2 = pc2.with_labels(gt).unwrap();
        Dataset::new(pc1, pc2, None, None).unwrap()
    }

    fn toy_bb(k: usize) -> BackboneConfig {
        BackboneConfig {
            variant: Variant::Siamese,
            channels: vec![4, 8],
            k: vec![6, 6],
            kernel_points: 5,
            dl0: 1.0,
            use_features: false,
            feature_dim: 4,
            n_prototypes: k,
            tau: 0.1,
            normalize: true,
            leaky_slope: 0.1,
        }
    }

    #[test]
    fn degenerate_weights_pick_one_cluster() {
        let ds = toy_dataset();
        let labels: Vec<u32> = (0..ds.n2()).map(|i| (i % 2) as u32).collect();
        let w = ClassWeights {
            weights: vec![0.0, 1.0],
            clamp: 50.0,
        };
        let pairs = sample_cylinders(&ds, &labels, &w, 50, 3.0, 1).unwrap();
        for p in &pairs {
            let center = ds
                .positions2()
                .iter()
                .position(|q| q[0] == p.center[0] && q[1] == p.center[1])
                .unwrap();
            assert_eq!(labels[center], 1);
            for &i in &p.idx2 {
                let q = ds.positions2()[i];
                assert!((q[0] - p.center[0]).hypot(q[1] - p.center[1]) <= 3.0 + 1e-9);
            }
        }
        let other = sample_cylinders(&ds, &labels, &w, 50, 3.0, 2).unwrap();
        assert_ne!(pairs, other);
    }

    #[test]
    fn uniform_weights_give_uniform_cluster_draws() {
        let ds = toy_dataset();
        // very unbalanced labeling: 4 clusters of sizes 1, 9, 90, 300
        let n = ds.n2();
        let labels: Vec<u32> = (0..n)
            .map(|i| match i {
                0 => 0,
                1..=9 => 1,
                10..=99 => 2,
                _ => 3,
            })
            .collect();
        let counts = counts_of(&labels, 4);
        let w = compute_weights(&counts, 1e9).unwrap();
        let pairs = sample_cylinders(&ds, &labels, &w, 10_000, 2.0, 3).unwrap();
        let mut hist = [0usize; 4];
        for p in &pairs {
            let c = ds
                .positions2()
                .iter()
                .position(|q| q[0] == p.center[0] && q[1] == p.center[1])
                .unwrap();
            hist[labels[c] as usize] += 1;
        }
        let expect = 2500.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        // 3 degrees of freedom, p = 0.01
        assert!(chi2 < 11.345, "{hist:?} chi2 {chi2}");
    }

    #[test]
    fn persistent_empty_draws_fail() {
        let pc1 = PointCloud::new(vec![Point::from([1000.0, 1000.0, 0.0])], Epoch::First).unwrap();
        let pc2 = grid_cloud(3, 1.0, 0.0, Epoch::Second);
        let ds = Dataset::new(pc1, pc2, None, None).unwrap();
        let w = ClassWeights {
            weights: vec![1.0],
            clamp: 50.0,
        };
        let r = sample_cylinders(&ds, &vec![0; 9], &w, 1, 2.0, 0);
        assert!(matches!(r, Err(Error::Coverage(_))));
    }

    fn prepared(n: usize, seed: u64) -> PreparedPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = || -> Vec<[f64; 3]> {
            (0..n)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)])
                .collect()
        };
        let (pos1, pos2) = (pts(), pts());
        PreparedPair {
            pos1,
            pos2,
            x1: Matrix::zeros(n, 1),
            x2: Matrix::zeros(n, 1),
        }
    }

    #[test]
    fn identity_augmentation() {
        let p = prepared(50, 1);
        let out = augment_with(&p, 0.0, 0.0, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn rotation_preserves_distances() {
        let p = prepared(60, 2);
        let out = augment(&p, &AugmentParams { rotate: true, jitter_sigma: 0.0 }, None, 5).unwrap();
        let d = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
        for set in [(&p.pos1, &out.pos1), (&p.pos2, &out.pos2)] {
            for i in 0..60 {
                for j in 0..i {
                    assert!((d(&set.0[i], &set.0[j]) - d(&set.1[i], &set.1[j])).abs() < 1e-6);
                }
            }
        }
        // one shared angle: cross-epoch distances preserved too
        assert!((d(&p.pos1[0], &p.pos2[0]) - d(&out.pos1[0], &out.pos2[0])).abs() < 1e-9);
    }

    #[test]
    fn jitter_sigma_estimate() {
        let p = prepared(5000, 3);
        let sigma = 0.1;
        let out = augment_with(&p, 0.0, sigma, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut ss = 0.0;
        let mut n = 0;
        for (a, b) in p.pos1.iter().chain(&p.pos2).zip(out.pos1.iter().chain(&out.pos2)) {
            for c in 0..3 {
                ss += (a[c] - b[c]).powi(2);
                n += 1;
            }
        }
        let est = (ss / n as f64).sqrt();
        assert!((est - sigma).abs() / sigma < 0.05, "{est}");
    }

    #[test]
    fn normals_rotate_in_raw_units() {
        let stats = Standardization {
            mean: vec![0.1, -0.2, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            std: vec![0.5, 0.25, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        };
        let mut x = Matrix::zeros(1, 1 + N_FEATURES);
        // raw normal (1, 0, 0)
        x.row_mut(0)[1] = ((1.0 - 0.1) / 0.5) as f32;
        x.row_mut(0)[2] = ((0.0 + 0.2) / 0.25) as f32;
        x.row_mut(0)[5] = 3.0;
        let p = PreparedPair {
            pos1: vec![[1.0, 0.0, 0.0]],
            pos2: vec![[1.0, 0.0, 0.0]],
            x1: x.clone(),
            x2: x,
        };
        let out = augment_with(&p, TAU / 4.0, 0.0, Some(&stats), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = out.x2.row(0);
        let nx = r[1] as f64 * 0.5 + 0.1;
        let ny = r[2] as f64 * 0.25 - 0.2;
        assert!(nx.abs() < 1e-6 && (ny - 1.0).abs() < 1e-6);
        assert_eq!(r[5], 3.0);
        assert!((out.pos2[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiling_covers_every_point_and_is_deterministic() {
        let ds = toy_dataset();
        let bb = toy_bb(3);
        let params = init_params(&bb, 1).unwrap();
        let a = tile_pass(&ds, &bb, &params, 4.0).unwrap();
        assert!(a.coverage.iter().all(|&c| c >= 1));
        let b = tile_pass(&ds, &bb, &params, 4.0).unwrap();
        assert_eq!(a, b);
        let labels = infer(&ds, &bb, &params, 4.0).unwrap();
        assert_eq!(labels.len(), ds.n2());
    }

    #[test]
    fn argmax_ties_take_lowest() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&m), vec![0, 1]);
    }

    #[test]
    fn cluster_step_fills_all_clusters() {
        let ds = toy_dataset();
        let bb = toy_bb(5);
        let mut params = init_params(&bb, 1).unwrap();
        let kp = KmeansParams::new(5);
        let m = cluster_step(&ds, &bb, &mut params, 5.0, &kp, 3).unwrap();
        assert_eq!(m.assignments.len(), ds.n2());
        assert!(m.counts.iter().all(|&c| c > 0));
        assert!(params.is_frozen(PROTOTYPES));
        let mut params2 = init_params(&bb, 1).unwrap();
        let m2 = cluster_step(&ds, &bb, &mut params2, 5.0, &kp, 3).unwrap();
        assert_eq!(m.assignments, m2.assignments);
    }

    #[test]
    fn short_run_keeps_prototypes_frozen_and_logs() {
        let ds = toy_dataset();
        let bb = toy_bb(4);
        let cfg = TrainConfig {
            epochs: 2,
            pairs_per_epoch: 4,
            batch_size: 2,
            radius: 5.0,
            k: 4,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let files = RunFiles {
            log: Some(dir.path().join("log.jsonl")),
            ckpt_dir: Some(dir.path().join("ckpt")),
        };
        let out = train(&ds, &bb, &cfg, &files).unwrap();
        assert_eq!(out.diagnostics.len(), 2);
        assert!(out.diagnostics[1].nmi_prev.is_some());
        let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(dir.path().join("ckpt/epoch_2/params.dcnp").exists());
        // prototypes of the checkpoint equal the clustering installed at epoch 2
        let (_, p2) = crate::net::load_checkpoint(&dir.path().join("ckpt/epoch_2")).unwrap();
        assert!(p2.is_frozen(PROTOTYPES));
        let again = train(&ds, &bb, &cfg, &RunFiles::default()).unwrap();
        let losses = |o: &TrainOutput| o.diagnostics.iter().map(|d| d.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&out), losses(&again));
    }

    #[test]
    fn frozen_prototypes_untouched_by_training_steps() {
        let ds = toy_dataset();
        let bb = toy_bb(3);
        let mut params = init_params(&bb, 4).unwrap();
        let model = cluster_step(&ds, &bb, &mut params, 5.0, &KmeansParams::new(3), 1).unwrap();
        let before = params.checksum(PROTOTYPES).unwrap();
        let w = compute_weights(&model.counts, 50.0).unwrap();
        let pairs = sample_cylinders(&ds, &model.assignments, &w, 4, 5.0, 1).unwrap();
        let w32 = Arc::new(w.weights.iter().map(|&v| v as f32).collect::<Vec<_>>());
        let mut opt = Sgd::new(0.9);
        for pair in &pairs {
            let prep = prepare(&ds, pair, &bb).unwrap();
            let targets = PairTargets {
                labels: Arc::new(pair.idx2.iter().map(|&i| model.assignments[i]).collect()),
                ysim: None,
            };
            accumulate_pair(&bb, &mut params, &prep, &targets, &w32, 1.0).unwrap();
            assert!(params.get(PROTOTYPES).unwrap().grad.is_none());
            opt.step(&mut params, 0.01).unwrap();
        }
        assert_eq!(before, params.checksum(PROTOTYPES).unwrap());
    }

    #[test]
    fn supervised_needs_seven_prototypes() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            loss: LossMode::SupervisedNll,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(&toy_bb(4)), Err(Error::Config(_))));
        assert!(cfg.validate(&toy_bb(7)).is_ok());
        let cyl = supervised_cylinders(&ds, N_CLASSES, 3.0, 1).unwrap();
        assert_eq!(cyl.len(), N_CLASSES);
        assert!(matches!(supervised_cylinders(&ds, 0, 3.0, 1), Err(Error::Degenerate(_))));
    }
}
