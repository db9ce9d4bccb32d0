//! Handcrafted per-point features: normal, eigenvalue shape descriptors,
//! height statistics against a ground model, and cross-epoch stability.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::cloud::{Matrix, PointCloud};
use crate::error::{Error, Result};
use crate::spatial::{Dims, SpatialIndex};

pub const N_FEATURES: usize = 10;

/// Column order of every feature matrix.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "nx",
    "ny",
    "nz",
    "linearity",
    "planarity",
    "omnivariance",
    "vertical_rank",
    "elevation_range",
    "normalized_height",
    "stability",
];

const DCFT_MAGIC: &[u8; 4] = b"DCFT";
const DCFT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    Knn(usize),
    Radius(f64),
}

/// Shape descriptors of one neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenFeatures {
    pub normal: [f64; 3],
    pub linearity: f64,
    pub planarity: f64,
    pub omnivariance: f64,
    /// Set when the neighborhood had fewer than 3 points or no spread.
    pub degenerate: bool,
}

impl EigenFeatures {
    pub const SENTINEL: EigenFeatures = EigenFeatures {
        normal: [0.0, 0.0, 1.0],
        linearity: 0.0,
        planarity: 0.0,
        omnivariance: 0.0,
        degenerate: true,
    };
}

/// Eigen features of an explicit point set.
pub fn eigen_from_points(pts: &[[f64; 3]]) -> EigenFeatures {
    if pts.len() < 3 {
        return EigenFeatures::SENTINEL;
    }
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            mean[a] += p[a] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in pts {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c] / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut l: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let scale = cov.trace().abs().max(f64::MIN_POSITIVE);
    if l[0] <= 1e-15 * scale.max(1.0) || l[0] == 0.0 {
        return EigenFeatures::SENTINEL;
    }
    // Rounding residue in a vanishing eigenvalue would otherwise leak through the cube root.
    let floor = 1e-12 * l[0];
    for v in &mut l[1..] {
        if *v <= floor {
            *v = 0.0;
        }
    }
    let v = eig.eigenvectors.column(order[2]);
    let norm = v.norm();
    let mut normal = [v[0] / norm, v[1] / norm, v[2] / norm];
    if normal[2] < 0.0 {
        normal = [-normal[0], -normal[1], -normal[2]];
    }
    EigenFeatures {
        normal,
        linearity: ((l[0] - l[1]) / l[0]).clamp(0.0, 1.0),
        planarity: ((l[1] - l[2]) / l[0]).clamp(0.0, 1.0),
        omnivariance: (l[0] * l[1] * l[2]).cbrt(),
        degenerate: false,
    }
}

/// Ids of the neighborhood of `center` in `index`, including coincident points.
pub fn neighborhood_ids(index: &SpatialIndex, center: [f64; 3], nb: Neighborhood) -> Result<Vec<usize>> {
    match nb {
        Neighborhood::Knn(k) => Ok(index.knn(center, k)?.into_iter().map(|n| n.id).collect()),
        Neighborhood::Radius(r) => index.radius_query(center, r),
    }
}

/// Eigen features of the neighborhood of one point of `pc`.
pub fn eigen_features(
    pc: &PointCloud,
    index: &SpatialIndex,
    point_id: usize,
    nb: Neighborhood,
) -> Result<EigenFeatures> {
    let p = pc
        .points
        .get(point_id)
        .ok_or_else(|| Error::Argument(format!("point id {point_id} out of range")))?;
    let ids = neighborhood_ids(index, p.to_array(), nb)?;
    let pts: Vec<[f64; 3]> = ids.iter().map(|&i| pc.points[i].to_array()).collect();
    Ok(eigen_from_points(&pts))
}

/// Per-cell ground elevation, minimum z per cell, empty cells filled from the
/// nearest occupied cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmGrid {
    pub cell: f64,
    pub origin: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `iy * nx + ix`.
    pub elevations: Vec<f64>,
}

impl DtmGrid {
    fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.cell).floor();
        let fy = ((y - self.origin[1]) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 || !fx.is_finite() {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn elevation_at(&self, x: f64, y: f64) -> Result<f64> {
        self.cell_of(x, y)
            .map(|(ix, iy)| self.elevations[iy * self.nx + ix])
            .ok_or_else(|| Error::Extent(format!("({x}, {y})")))
    }
}

pub fn build_dtm(positions: &[[f64; 3]], cell: f64) -> Result<DtmGrid> {
    if !(cell > 0.0) {
        return Err(Error::Argument(format!("dtm cell must be > 0, got {cell}")));
    }
    if positions.is_empty() {
        return Err(Error::Argument("dtm of an empty cloud".into()));
    }
    let min_x = positions.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let min_y = positions.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_x = positions.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let max_y = positions.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let nx = ((max_x - min_x) / cell).floor() as usize + 1;
    let ny = ((max_y - min_y) / cell).floor() as usize + 1;
    let mut grid = DtmGrid {
        cell,
        origin: [min_x, min_y],
        nx,
        ny,
        elevations: vec![f64::INFINITY; nx * ny],
    };
    for p in positions {
        let (ix, iy) = grid.cell_of(p[0], p[1]).expect("point inside its own grid");
        let e = &mut grid.elevations[iy * nx + ix];
        *e = e.min(p[2]);
    }
    fill_empty_cells(&mut grid);
    Ok(grid)
}

fn fill_empty_cells(grid: &mut DtmGrid) {
    let occupied: Vec<usize> = (0..grid.elevations.len())
        .filter(|&i| grid.elevations[i].is_finite())
        .collect();
    if occupied.len() == grid.elevations.len() {
        return;
    }
    let center = |i: usize| [(i % grid.nx) as f64, (i / grid.nx) as f64, 0.0];
    let centers: Vec<[f64; 3]> = occupied.iter().map(|&i| center(i)).collect();
    let index = SpatialIndex::new(&centers, Dims::Xy);
    for i in 0..grid.elevations.len() {
        if !grid.elevations[i].is_finite() {
            let nearest = index.nearest(center(i)).expect("at least one occupied cell");
            grid.elevations[i] = grid.elevations[occupied[nearest.id]];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightFeatures {
    pub vertical_rank: f64,
    pub elevation_range: f64,
    pub normalized_height: f64,
}

/// Height statistics of a point given the z values of its neighborhood.
pub fn height_features(point: [f64; 3], neighbor_z: &[f64], dtm: &DtmGrid) -> Result<HeightFeatures> {
    if neighbor_z.is_empty() {
        return Err(Error::Argument("empty neighborhood".into()));
    }
    let below = neighbor_z.iter().filter(|&&z| z <= point[2]).count();
    let lo = neighbor_z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = neighbor_z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(HeightFeatures {
        vertical_rank: below as f64 / neighbor_z.len() as f64,
        elevation_range: hi - lo,
        normalized_height: point[2] - dtm.elevation_at(point[0], point[1])?,
    })
}

/// Own-epoch over other-epoch point count in a ball; the denominator is at least 1.
pub fn stability(
    self_index: &SpatialIndex,
    other_index: &SpatialIndex,
    center: [f64; 3],
    radius: f64,
) -> Result<f64> {
    let own = self_index.count_within(center, radius)?;
    let other = if other_index.is_empty() {
        if !(radius > 0.0) {
            return Err(Error::Argument(format!("radius must be > 0, got {radius}")));
        }
        0
    } else {
        other_index.count_within(center, radius)?
    };
    Ok(own as f64 / other.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub neighborhood: Neighborhood,
    pub dtm_cell: f64,
    pub stability_radius: f64,
}

impl FeatureParams {
    /// Defaults tied to the subsampling resolution `dl0`.
    pub fn for_resolution(dl0: f64) -> Self {
        Self {
            neighborhood: Neighborhood::Radius(2.5 * dl0),
            dtm_cell: 5.0,
            stability_radius: 2.5 * dl0,
        }
    }
}

/// Per-cloud counters of special cases hit during extraction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub degenerate: usize,
    pub stability_clamped: usize,
}

/// Raw (unstandardized) features of every point of `pc_self`.
pub fn raw_features(
    pc_self: &PointCloud,
    pc_other: &PointCloud,
    dtm: &DtmGrid,
    params: &FeatureParams,
) -> Result<(Matrix, FeatureFlags)> {
    let own = SpatialIndex::from_cloud(pc_self, Dims::Xyz);
    let other = SpatialIndex::from_cloud(pc_other, Dims::Xyz);
    let mut m = Matrix::zeros(pc_self.len(), N_FEATURES);
    let mut flags = FeatureFlags::default();
    let mut pts = Vec::new();
    let mut zs = Vec::new();
    for (i, p) in pc_self.points.iter().enumerate() {
        let center = p.to_array();
        let ids = neighborhood_ids(&own, center, params.neighborhood)?;
        pts.clear();
        zs.clear();
        for &j in &ids {
            let q = pc_self.points[j].to_array();
            pts.push(q);
            zs.push(q[2]);
        }
        let e = eigen_from_points(&pts);
        flags.degenerate += e.degenerate as usize;
        let h = height_features(center, &zs, dtm)?;
        let other_count = if other.is_empty() {
            0
        } else {
            other.count_within(center, params.stability_radius)?
        };
        flags.stability_clamped += (other_count == 0) as usize;
        let s = own.count_within(center, params.stability_radius)? as f64 / other_count.max(1) as f64;
        let row = [
            e.normal[0],
            e.normal[1],
            e.normal[2],
            e.linearity,
            e.planarity,
            e.omnivariance,
            h.vertical_rank,
            h.elevation_range,
            h.normalized_height,
            s,
        ];
        for (dst, v) in m.row_mut(i).iter_mut().zip(row) {
            *dst = v as f32;
        }
    }
    Ok((m, flags))
}

/// Column means and standard deviations; constant columns get std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(mats: &[&Matrix]) -> Result<Self> {
        let cols = mats.first().map(|m| m.cols()).unwrap_or(0);
        if mats.iter().any(|m| m.cols() != cols) {
            return Err(Error::Argument("matrices differ in column count".into()));
        }
        let n: usize = mats.iter().map(|m| m.rows()).sum();
        if n == 0 {
            return Err(Error::Argument("cannot standardize zero rows".into()));
        }
        let mut mean = vec![0.0f64; cols];
        for m in mats {
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    mean[c] += *v as f64;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0f64; cols];
        for m in mats {
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    var[c] += (*v as f64 - mean[c]).powi(2);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &mut Matrix) {
        let cols = m.cols();
        for (k, v) in m.as_mut_slice().iter_mut().enumerate() {
            let c = k % cols;
            *v = ((*v as f64 - self.mean[c]) / self.std[c]) as f32;
        }
    }
}

/// Standardized features of both epochs plus everything needed to reproduce them.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub pc1: Matrix,
    pub pc2: Matrix,
    pub stats: Standardization,
    pub flags: [FeatureFlags; 2],
    pub dtm: DtmGrid,
}

/// Sidecar written next to the binary feature caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub params: FeatureParams,
    pub flags_pc1: FeatureFlags,
    pub flags_pc2: FeatureFlags,
}

impl FeatureSet {
    pub fn sidecar(&self, params: &FeatureParams) -> FeatureSidecar {
        FeatureSidecar {
            columns: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            mean: self.stats.mean.clone(),
            std: self.stats.std.clone(),
            params: *params,
            flags_pc1: self.flags[0],
            flags_pc2: self.flags[1],
        }
    }
}

/// Unstandardized features of both epochs; `stats` is the identity.
pub fn compute_raw(pc1: &PointCloud, pc2: &PointCloud, params: &FeatureParams) -> Result<FeatureSet> {
    let mut union = pc1.positions();
    union.extend(pc2.positions());
    let dtm = build_dtm(&union, params.dtm_cell)?;
    let (f1, flags1) = raw_features(pc1, pc2, &dtm, params)?;
    let (f2, flags2) = raw_features(pc2, pc1, &dtm, params)?;
    Ok(FeatureSet {
        pc1: f1,
        pc2: f2,
        stats: Standardization {
            mean: vec![0.0; N_FEATURES],
            std: vec![1.0; N_FEATURES],
        },
        flags: [flags1, flags2],
        dtm,
    })
}

/// Features of both epochs, standardized jointly over the union of their rows.
/// The ground model is built from both epochs together.
pub fn compute_all(pc1: &PointCloud, pc2: &PointCloud, params: &FeatureParams) -> Result<FeatureSet> {
    let raw = compute_raw(pc1, pc2, params)?;
    let (mut f1, mut f2) = (raw.pc1, raw.pc2);
    let (flags1, flags2, dtm) = (raw.flags[0], raw.flags[1], raw.dtm);
    let stats = Standardization::fit(&[&f1, &f2])?;
    stats.apply(&mut f1);
    stats.apply(&mut f2);
    Ok(FeatureSet {
        pc1: f1,
        pc2: f2,
        stats,
        flags: [flags1, flags2],
        dtm,
    })
}

pub fn write_dcft(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DCFT_MAGIC)?;
    binio::write_u32(&mut w, DCFT_VERSION)?;
    binio::write_u64(&mut w, m.rows() as u64)?;
    binio::write_u32(&mut w, m.cols() as u32)?;
    binio::write_f32s(&mut w, m.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn read_dcft(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, DCFT_MAGIC)?;
    let version = binio::read_u32(&mut r)?;
    if version != DCFT_VERSION {
        return Err(Error::Format(format!("unsupported feature cache version {version}")));
    }
    let rows = binio::read_u64(&mut r)? as usize;
    let cols = binio::read_u32(&mut r)? as usize;
    let data = binio::read_f32s(&mut r, rows * cols)?;
    Matrix::from_vec(rows, cols, data)
}
