//! Siamese and encoder-fusion point-convolution backbones with a prototype layer.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernel::KernelDisposition;
use super::tape::{Gradients, Influence, Real, Tape, Var};
use super::{NetParams, Tensor, PROTOTYPES};
use crate::cloud::{group_centroids, voxel_groups, Matrix};
use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::features::N_FEATURES;
use crate::spatial::{Dims, SpatialIndex};

/// Epsilon inside row normalization, `x / sqrt(|x|^2 + eps^2)`.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Siamese,
    EncoderFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Output channels of each encoder scale; its length is the number of scales.
    pub channels: Vec<usize>,
    /// Neighbors gathered by the convolution of each scale.
    pub k: Vec<usize>,
    pub kernel_points: usize,
    /// Grid step of scale 0; scale `s` uses `dl0 * 2^s`.
    pub dl0: f64,
    /// Append the handcrafted features to the constant input channel.
    pub use_features: bool,
    pub feature_dim: usize,
    pub n_prototypes: usize,
    pub tau: f64,
    /// L2-normalize features and prototypes before the prototype layer.
    pub normalize: bool,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: Variant::EncoderFusion,
            channels: vec![32, 64, 128],
            k: vec![16, 16, 16],
            kernel_points: 15,
            dl0: 1.0,
            use_features: true,
            feature_dim: 32,
            n_prototypes: 50,
            tau: 0.1,
            normalize: true,
            leaky_slope: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn n_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn in_channels(&self) -> usize {
        1 + if self.use_features { N_FEATURES } else { 0 }
    }

    pub fn dl(&self, scale: usize) -> f64 {
        self.dl0 * (1u64 << scale) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_scales();
        if s < 2 {
            return Err(Error::Config(format!("need at least 2 scales, got {s}")));
        }
        if self.k.len() != s {
            return Err(Error::Config(format!("{} neighbor counts for {s} scales", self.k.len())));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("channels must be strictly increasing, got {:?}", self.channels)));
        }
        if self.k.contains(&0) || self.kernel_points == 0 {
            return Err(Error::Config("neighbor counts and kernel points must be >= 1".into()));
        }
        if !(self.dl0 > 0.0) || !(self.tau > 0.0) || !self.dl0.is_finite() {
            return Err(Error::Config("dl0 and tau must be positive".into()));
        }
        if self.feature_dim == 0 || self.n_prototypes == 0 {
            return Err(Error::Config("feature_dim and n_prototypes must be >= 1".into()));
        }
        Ok(())
    }

    fn enc_prefixes(&self) -> Vec<&'static str> {
        match self.variant {
            Variant::Siamese => vec!["enc"],
            Variant::EncoderFusion => vec!["enc1", "enc2"],
        }
    }

    /// Channels of the skip stream at each scale.
    fn skip_channels(&self, s: usize) -> usize {
        match self.variant {
            Variant::Siamese => self.channels[s],
            Variant::EncoderFusion => 2 * self.channels[s],
        }
    }

    /// Shapes of every parameter tensor, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = self.kernel_points;
        let s_n = self.n_scales();
        let mut out = Vec::new();
        for prefix in self.enc_prefixes() {
            let fused_input = prefix == "enc2";
            for s in 0..s_n {
                let cin = match (s, fused_input) {
                    (0, false) => self.in_channels(),
                    (0, true) => 2 * self.in_channels(),
                    (_, false) => self.channels[s - 1],
                    (_, true) => 2 * self.channels[s - 1],
                };
                out.push((format!("{prefix}.s{s}.w"), vec![p * cin, self.channels[s]]));
                out.push((format!("{prefix}.s{s}.b"), vec![self.channels[s]]));
            }
        }
        for s in (0..s_n - 1).rev() {
            let up = if s + 1 == s_n - 1 {
                self.skip_channels(s + 1)
            } else {
                self.channels[s + 1]
            };
            out.push((format!("dec.s{s}.w"), vec![up + self.skip_channels(s), self.channels[s]]));
            out.push((format!("dec.s{s}.b"), vec![self.channels[s]]));
        }
        out.push(("head.w".into(), vec![self.channels[0], self.feature_dim]));
        out.push(("head.b".into(), vec![self.feature_dim]));
        out.push((PROTOTYPES.into(), vec![self.n_prototypes, self.feature_dim]));
        out
    }
}

/// Random initial parameters; the prototypes start frozen.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<NetParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::default();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            let fan_in = shape[0] as f64;
            let std = if name.starts_with("enc") {
                // Each aggregated column sums several kernel-weighted neighbors.
                (2.0 / (fan_in * 2.0)).sqrt()
            } else if name.starts_with("dec") {
                (2.0 / fan_in).sqrt()
            } else {
                (1.0 / fan_in).sqrt()
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    let proto = params.get_mut(PROTOTYPES)?;
    normalize_rows_f32(&mut proto.data, cfg.feature_dim);
    params.freeze(PROTOTYPES);
    Ok(params)
}

fn normalize_rows_f32(data: &mut [f32], cols: usize) {
    for row in data.chunks_mut(cols) {
        let s = (row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
    }
}

/// Replaces the prototype matrix with the (row-normalized) centroids and freezes it.
pub fn set_prototypes(params: &mut NetParams, cfg: &BackboneConfig, model: &ClusterModel) -> Result<()> {
    if model.dim() != cfg.feature_dim {
        return Err(Error::Config(format!(
            "centroid dimension {} does not match feature dimension {}",
            model.dim(),
            cfg.feature_dim
        )));
    }
    let mut data = model.centroids.as_slice().to_vec();
    if cfg.normalize {
        normalize_rows_f32(&mut data, cfg.feature_dim);
    }
    params.insert(PROTOTYPES, Tensor::new(vec![model.k(), cfg.feature_dim], data)?);
    params.freeze(PROTOTYPES);
    Ok(())
}

/// Positions and convolution neighborhoods of one cloud at every scale.
#[derive(Debug, Clone)]
pub struct CloudPyramid {
    pub positions: Vec<Vec<[f64; 3]>>,
    /// `conv[s]` maps scale `s - 1` (scale 0 for `s = 0`) onto scale `s`.
    pub conv: Vec<Arc<Influence>>,
}

impl CloudPyramid {
    pub fn build(cfg: &BackboneConfig, positions: &[[f64; 3]]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Degenerate("empty cloud at scale 0".into()));
        }
        let mut levels = vec![positions.to_vec()];
        for s in 1..cfg.n_scales() {
            let prev = &levels[s - 1];
            let groups = voxel_groups(prev, cfg.dl(s))?;
            levels.push(group_centroids(prev, &groups));
        }
        let mut conv = Vec::with_capacity(cfg.n_scales());
        for s in 0..cfg.n_scales() {
            let support = &levels[s.saturating_sub(1)];
            let kernel = KernelDisposition::for_scale(cfg.kernel_points, cfg.dl(s))?;
            conv.push(Arc::new(kernel.influence(&levels[s], support, cfg.k[s])?));
        }
        Ok(Self {
            positions: levels,
            conv,
        })
    }
}

/// Everything of a cylinder pair that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct PairGeometry {
    pub pc1: CloudPyramid,
    pub pc2: CloudPyramid,
    /// `matches[s][i]`: nearest pc1 point of pc2 point `i` at scale `s`.
    pub matches: Vec<Arc<Vec<usize>>>,
    /// `upsample[s][i]`: nearest scale `s + 1` pc2 point of scale `s` point `i`.
    pub upsample: Vec<Arc<Vec<usize>>>,
}

fn nearest_all(targets: &[[f64; 3]], queries: &[[f64; 3]]) -> Result<Vec<usize>> {
    let index = SpatialIndex::new(targets, Dims::Xyz);
    queries.iter().map(|q| Ok(index.nearest(*q)?.id)).collect()
}

impl PairGeometry {
    pub fn build(cfg: &BackboneConfig, pos1: &[[f64; 3]], pos2: &[[f64; 3]]) -> Result<Self> {
        cfg.validate()?;
        let pc1 = CloudPyramid::build(cfg, pos1)?;
        let pc2 = CloudPyramid::build(cfg, pos2)?;
        let mut matches = Vec::new();
        let mut upsample = Vec::new();
        for s in 0..cfg.n_scales() {
            matches.push(Arc::new(nearest_all(&pc1.positions[s], &pc2.positions[s])?));
            if s + 1 < cfg.n_scales() {
                upsample.push(Arc::new(nearest_all(&pc2.positions[s + 1], &pc2.positions[s])?));
            }
        }
        Ok(Self {
            pc1,
            pc2,
            matches,
            upsample,
        })
    }

    pub fn n_pc2(&self) -> usize {
        self.pc2.positions[0].len()
    }

    pub fn n_pc1(&self) -> usize {
        self.pc1.positions[0].len()
    }
}

/// Tape handles of bound parameters, by name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Tensor(format!("parameter {name} not bound")))
    }
}

/// Puts `(shape, values)` tensors on the tape; frozen names become constants.
pub fn bind_values<T: Real>(
    tape: &mut Tape<T>,
    values: &BTreeMap<String, (Vec<usize>, Vec<T>)>,
    frozen: &BTreeSet<String>,
    track_grads: bool,
) -> Result<ParamVars> {
    let mut out = ParamVars::default();
    for (name, (shape, data)) in values {
        let t = Tensor::zeros(shape.clone());
        let (r, c) = t.dims2();
        let v = if track_grads && !frozen.contains(name) {
            tape.param(r, c, data.clone())?
        } else {
            tape.constant(r, c, data.clone())?
        };
        out.vars.insert(name.clone(), v);
    }
    Ok(out)
}

pub fn bind_params<T: Real>(tape: &mut Tape<T>, params: &NetParams, track_grads: bool) -> Result<ParamVars> {
    let values = params
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), (t.shape.clone(), t.data.iter().map(|v| T::of_f32(*v)).collect())))
        .collect();
    bind_values(tape, &values, &params.frozen, track_grads)
}

/// Adds `scale * dL/dparam` into the `grad` buffer of every unfrozen tensor.
pub fn accumulate_grads<T: Real>(params: &mut NetParams, vars: &ParamVars, grads: &Gradients<T>, scale: f64) {
    for (name, t) in params.tensors.iter_mut() {
        if params.frozen.contains(name) {
            continue;
        }
        let Some(g) = vars.vars.get(name).and_then(|v| grads.get(*v)) else {
            continue;
        };
        let buf = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (b, gv) in buf.iter_mut().zip(g) {
            *b += (gv.as_f64() * scale) as f32;
        }
    }
}

/// `sum_j sum_p h(y_ij, kp_p) x_j W_p (+ b)`, with `w` stacked as `(P * C_in) x C_out`.
pub fn point_conv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    infl: Arc<Influence>,
    w: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let agg = tape.kernel_aggregate(x, infl)?;
    let y = tape.matmul(agg, w)?;
    match bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// `f2 - f1[matches]`.
pub fn difference_match<T: Real>(tape: &mut Tape<T>, f1: Var, f2: Var, matches: Arc<Vec<usize>>) -> Result<Var> {
    if tape.shape(f1).0 == 0 {
        return Err(Error::Degenerate("difference against an empty pc1 scale".into()));
    }
    let m = tape.gather_rows(f1, matches)?;
    tape.sub(f2, m)
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Decoder output before normalization.
    pub f_cd: Var,
    /// Features fed to the prototype layer.
    pub f: Var,
    /// `n_pc2 x K`.
    pub logits: Var,
    /// Per-scale difference streams.
    pub diffs: Vec<Var>,
}

fn conv_block<T: Real>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    vars: &ParamVars,
    name: &str,
    x: Var,
    infl: &Arc<Influence>,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.w"))?;
    let b = vars.get(&format!("{name}.b"))?;
    let y = point_conv(tape, x, infl.clone(), w, Some(b))?;
    Ok(tape.leaky_relu(y, cfg.leaky_slope))
}

fn encode<T: Real>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
    pyr: &CloudPyramid,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(cfg.n_scales());
    let mut cur = x;
    for s in 0..cfg.n_scales() {
        cur = conv_block(tape, cfg, vars, &format!("{prefix}.s{s}"), cur, &pyr.conv[s])?;
        out.push(cur);
    }
    Ok(out)
}

fn matrix_const<T: Real>(tape: &mut Tape<T>, m: &Matrix, expect_rows: usize, expect_cols: usize) -> Result<Var> {
    if m.rows() != expect_rows || m.cols() != expect_cols {
        return Err(Error::Tensor(format!(
            "input of shape {}x{}, expected {expect_rows}x{expect_cols}",
            m.rows(),
            m.cols()
        )));
    }
    tape.constant(m.rows(), m.cols(), m.as_slice().iter().map(|v| T::of_f32(*v)).collect())
}

/// Per-point change features and prototype logits of the pc2 points of a pair.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &BackboneConfig,
    vars: &ParamVars,
    geom: &PairGeometry,
    x1: &Matrix,
    x2: &Matrix,
) -> Result<ForwardOut> {
    let cin = cfg.in_channels();
    let x1 = matrix_const(tape, x1, geom.n_pc1(), cin)?;
    let x2 = matrix_const(tape, x2, geom.n_pc2(), cin)?;
    let s_n = cfg.n_scales();
    let e1;
    let mut skips = Vec::with_capacity(s_n);
    let mut diffs = Vec::with_capacity(s_n);
    match cfg.variant {
        Variant::Siamese => {
            e1 = encode(tape, cfg, vars, "enc", x1, &geom.pc1)?;
            let e2 = encode(tape, cfg, vars, "enc", x2, &geom.pc2)?;
            for s in 0..s_n {
                let d = difference_match(tape, e1[s], e2[s], geom.matches[s].clone())?;
                diffs.push(d);
                skips.push(d);
            }
        }
        Variant::EncoderFusion => {
            e1 = encode(tape, cfg, vars, "enc1", x1, &geom.pc1)?;
            let d_in = difference_match(tape, x1, x2, geom.matches[0].clone())?;
            let mut cur = tape.concat_cols(x2, d_in)?;
            for s in 0..s_n {
                let e2 = conv_block(tape, cfg, vars, &format!("enc2.s{s}"), cur, &geom.pc2.conv[s])?;
                let d = difference_match(tape, e1[s], e2, geom.matches[s].clone())?;
                diffs.push(d);
                cur = tape.concat_cols(e2, d)?;
                skips.push(cur);
            }
        }
    }
    let mut h = skips[s_n - 1];
    for s in (0..s_n - 1).rev() {
        let up = tape.gather_rows(h, geom.upsample[s].clone())?;
        let cat = tape.concat_cols(up, skips[s])?;
        let w = vars.get(&format!("dec.s{s}.w"))?;
        let b = vars.get(&format!("dec.s{s}.b"))?;
        let y = tape.matmul(cat, w)?;
        let y = tape.add_bias(y, b)?;
        h = tape.leaky_relu(y, cfg.leaky_slope);
    }
    let y = tape.matmul(h, vars.get("head.w")?)?;
    let f_cd = tape.add_bias(y, vars.get("head.b")?)?;
    let proto = vars.get(PROTOTYPES)?;
    let (f, proto) = if cfg.normalize {
        (tape.normalize_rows(f_cd, NORM_EPS), tape.normalize_rows(proto, NORM_EPS))
    } else {
        (f_cd, proto)
    };
    let cos = tape.matmul_bt(f, proto)?;
    let logits = tape.scale(cos, 1.0 / cfg.tau);
    Ok(ForwardOut {
        f_cd,
        f,
        logits,
        diffs,
    })
}

/// Input matrix: a constant-one column, then the handcrafted features of `rows` if enabled.
pub fn input_matrix(cfg: &BackboneConfig, features: Option<&Matrix>, rows: &[usize]) -> Result<Matrix> {
    let cin = cfg.in_channels();
    let mut m = Matrix::zeros(rows.len(), cin);
    for (i, &r) in rows.iter().enumerate() {
        let row = m.row_mut(i);
        row[0] = 1.0;
        if cfg.use_features {
            let f = features.ok_or_else(|| Error::Dependency("handcrafted features required by config".into()))?;
            if f.cols() != N_FEATURES || r >= f.rows() {
                return Err(Error::Tensor(format!("feature row {r} of a {}x{} matrix", f.rows(), f.cols())));
            }
            row[1..].copy_from_slice(f.row(r));
        }
    }
    Ok(m)
}

/// Parameter-free evaluation: `(F, logits)` of the pc2 points.
pub fn evaluate(
    cfg: &BackboneConfig,
    params: &NetParams,
    geom: &PairGeometry,
    x1: &Matrix,
    x2: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::<f32>::new();
    let vars = bind_params(&mut tape, params, false)?;
    let out = forward(&mut tape, cfg, &vars, geom, x1, x2)?;
    let to_matrix = |v: Var| {
        let (r, c) = tape.shape(v);
        Matrix::from_vec(r, c, tape.value(v).to_vec())
    };
    Ok((to_matrix(out.f)?, to_matrix(out.logits)?))
}
