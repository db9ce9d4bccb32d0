//! Per-point "unchanged" flags on the second epoch, derived from ground
//! truth, from nearest-neighbor distances, or from a single-scale M3C2.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::features::{eigen_from_points, Neighborhood};
use crate::spatial::{Dims, SpatialIndex};

/// For each pc2 point, the distance to its nearest pc1 point.
pub fn c2c_distance(pc2: &PointCloud, pc1: &PointCloud) -> Result<Vec<f64>> {
    if pc1.is_empty() {
        return Err(Error::Query("c2c against an empty reference cloud".into()));
    }
    let index = SpatialIndex::from_cloud(pc1, Dims::Xyz);
    pc2.points
        .iter()
        .map(|p| index.nearest(p.to_array()).map(|n| n.dist))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct M3c2Params {
    pub normal_scale: f64,
    pub cyl_radius: f64,
    pub cyl_halfdepth: f64,
    pub min_points: usize,
    pub confidence: f64,
    pub reg_error: f64,
    pub normals_from: NormalSource,
}

/// Cloud whose neighborhood defines the cylinder axis at a core point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalSource {
    Pc1,
    Pc2,
    Both,
}

impl M3c2Params {
    pub fn for_resolution(dl0: f64) -> Self {
        Self {
            normal_scale: 2.5 * dl0,
            cyl_radius: 2.0 * dl0,
            cyl_halfdepth: 20.0,
            min_points: 4,
            confidence: 1.96,
            reg_error: 0.0,
            normals_from: NormalSource::Pc1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct M3c2Point {
    /// Mean pc2 offset minus mean pc1 offset along the normal; `None` when a
    /// cylinder held fewer than `min_points` points.
    pub distance: Option<f64>,
    pub significant: bool,
}

struct AxisStats {
    n: usize,
    mean: f64,
    var: f64,
}

fn cylinder_stats(
    pc: &PointCloud,
    index: &SpatialIndex,
    center: [f64; 3],
    normal: [f64; 3],
    p: &M3c2Params,
) -> Result<AxisStats> {
    let horizontal = (1.0 - normal[2] * normal[2]).max(0.0).sqrt();
    let reach = p.cyl_radius + p.cyl_halfdepth * horizontal;
    let mut ts = Vec::new();
    for id in index.radius_query_2d([center[0], center[1]], reach)? {
        let q = pc.points[id];
        let d = [q.x - center[0], q.y - center[1], q.z - center[2]];
        let t = d[0] * normal[0] + d[1] * normal[1] + d[2] * normal[2];
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - t * t;
        if t.abs() <= p.cyl_halfdepth && r2 <= p.cyl_radius * p.cyl_radius {
            ts.push(t);
        }
    }
    let n = ts.len();
    let mean = ts.iter().sum::<f64>() / n.max(1) as f64;
    let var = if n > 1 {
        ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(AxisStats { n, mean, var })
}

/// Single-scale M3C2 evaluated at every pc2 point. Normals come from the
/// `normals_from` neighborhood at `normal_scale`, vertical when that
/// neighborhood is degenerate.
pub fn m3c2_lite(pc2: &PointCloud, pc1: &PointCloud, p: &M3c2Params) -> Result<Vec<M3c2Point>> {
    if !(p.normal_scale > 0.0 && p.cyl_radius > 0.0 && p.cyl_halfdepth > 0.0) {
        return Err(Error::Argument("m3c2 scales must be > 0".into()));
    }
    let xyz2 = SpatialIndex::from_cloud(pc2, Dims::Xyz);
    let xyz1 = SpatialIndex::from_cloud(pc1, Dims::Xyz);
    let xy2 = SpatialIndex::from_cloud(pc2, Dims::Xy);
    let xy1 = SpatialIndex::from_cloud(pc1, Dims::Xy);
    let mut out = Vec::with_capacity(pc2.len());
    let mut nb = Vec::new();
    for pt in &pc2.points {
        let c = pt.to_array();
        nb.clear();
        let nbh = Neighborhood::Radius(p.normal_scale);
        if p.normals_from != NormalSource::Pc1 {
            for id in crate::features::neighborhood_ids(&xyz2, c, nbh)? {
                nb.push(pc2.points[id].to_array());
            }
        }
        if p.normals_from != NormalSource::Pc2 && !xyz1.is_empty() {
            for id in crate::features::neighborhood_ids(&xyz1, c, nbh)? {
                nb.push(pc1.points[id].to_array());
            }
        }
        let normal = eigen_from_points(&nb).normal;
        let s2 = cylinder_stats(pc2, &xy2, c, normal, p)?;
        let s1 = if xy1.is_empty() {
            AxisStats { n: 0, mean: 0.0, var: 0.0 }
        } else {
            cylinder_stats(pc1, &xy1, c, normal, p)?
        };
        if s1.n < p.min_points || s2.n < p.min_points {
            out.push(M3c2Point {
                distance: None,
                significant: false,
            });
            continue;
        }
        let d = s2.mean - s1.mean;
        let lod = p.confidence * (s1.var / s1.n as f64 + s2.var / s2.n as f64).sqrt() + p.reg_error;
        out.push(M3c2Point {
            distance: Some(d),
            significant: d.abs() > lod,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    GroundTruth,
    C2cThreshold,
    M3c2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YsimParams {
    pub c2c_tau: f64,
    pub m3c2: M3c2Params,
}

impl YsimParams {
    pub fn for_resolution(dl0: f64) -> Self {
        Self {
            c2c_tau: 2.0 * dl0,
            m3c2: M3c2Params::for_resolution(dl0),
        }
    }
}

/// One flag per pc2 point, 1 = unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub source: SimilaritySource,
    pub flags: Vec<u8>,
}

impl SimilarityMap {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

pub fn ysim_from_ground_truth(gt: &[u32]) -> SimilarityMap {
    SimilarityMap {
        source: SimilaritySource::GroundTruth,
        flags: gt.iter().map(|&l| (l == 0) as u8).collect(),
    }
}

pub fn ysim_from_c2c(distances: &[f64], tau: f64) -> SimilarityMap {
    SimilarityMap {
        source: SimilaritySource::C2cThreshold,
        flags: distances.iter().map(|&d| (d <= tau) as u8).collect(),
    }
}

pub fn ysim_from_m3c2(points: &[M3c2Point]) -> SimilarityMap {
    SimilarityMap {
        source: SimilaritySource::M3c2,
        flags: points.iter().map(|p| (!p.significant) as u8).collect(),
    }
}

/// Computes the similarity flags of `pc2` from the requested source.
pub fn estimate_ysim(
    source: SimilaritySource,
    pc1: &PointCloud,
    pc2: &PointCloud,
    params: &YsimParams,
) -> Result<SimilarityMap> {
    match source {
        SimilaritySource::GroundTruth => pc2
            .labels
            .as_deref()
            .map(ysim_from_ground_truth)
            .ok_or_else(|| Error::Dependency("ground-truth similarity needs pc2 labels".into())),
        SimilaritySource::C2cThreshold => {
            if pc1.is_empty() {
                return Err(Error::Dependency("c2c similarity needs a non-empty pc1".into()));
            }
            Ok(ysim_from_c2c(&c2c_distance(pc2, pc1)?, params.c2c_tau))
        }
        SimilaritySource::M3c2 => Ok(ysim_from_m3c2(&m3c2_lite(pc2, pc1, &params.m3c2)?)),
    }
}

#[derive(Serialize, Deserialize)]
struct YsimHeader {
    source: SimilaritySource,
    n_points: usize,
    params: YsimParams,
}

/// Writes one flag per line to `txt` and the provenance header to `json`.
pub fn save_ysim(txt: &Path, json: &Path, map: &SimilarityMap, params: &YsimParams) -> Result<()> {
    let mut body = String::with_capacity(map.len() * 2);
    for f in &map.flags {
        body.push(if *f == 1 { '1' } else { '0' });
        body.push('\n');
    }
    fs::write(txt, body)?;
    let header = YsimHeader {
        source: map.source,
        n_points: map.len(),
        params: *params,
    };
    fs::write(json, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_ysim(txt: &Path, json: &Path) -> Result<SimilarityMap> {
    let header: YsimHeader = serde_json::from_str(&fs::read_to_string(json)?)?;
    let text = fs::read_to_string(txt)?;
    let mut flags = Vec::with_capacity(header.n_points);
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "0" => flags.push(0),
            "1" => flags.push(1),
            "" => {}
            other => {
                return Err(Error::Parse {
                    path: txt.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected 0 or 1, got {other:?}"),
                })
            }
        }
    }
    if flags.len() != header.n_points {
        return Err(Error::Format(format!(
            "similarity file has {} flags, header says {}",
            flags.len(),
            header.n_points
        )));
    }
    Ok(SimilarityMap {
        source: header.source,
        flags,
    })
}
