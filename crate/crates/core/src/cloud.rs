//! Point clouds, the ASCII interchange format and grid subsampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        dx * dx + dy * dy + dz * dz
    }
}

impl From<[f64; 3]> for Point {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Acquisition epoch of a cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Epoch {
    First,
    Second,
}

/// Dense row-major `f32` matrix used for per-point features and embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn select_rows(&self, ids: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Positions of one epoch plus optional per-point labels and features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u32>>,
    pub features: Option<Matrix>,
    pub epoch: Epoch,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, epoch: Epoch) -> Result<Self> {
        let pc = Self {
            points,
            labels: None,
            features: None,
            epoch,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        self.features = Some(features);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.to_array()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Argument(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::Argument(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        if let Some(f) = &self.features {
            if f.rows() != self.points.len() {
                return Err(Error::Argument(format!(
                    "{} feature rows for {} points",
                    f.rows(),
                    self.points.len()
                )));
            }
            if !f.is_finite() {
                return Err(Error::Argument("non-finite feature value".into()));
            }
        }
        Ok(())
    }

    /// Subset of this cloud, carrying labels and features along.
    pub fn select(&self, ids: &[usize]) -> PointCloud {
        PointCloud {
            points: ids.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| ids.iter().map(|&i| l[i]).collect()),
            features: self.features.as_ref().map(|f| f.select_rows(ids)),
            epoch: self.epoch,
        }
    }
}

/// Reads an ASCII point file: one `x y z [label]` per line, `#` comments skipped.
pub fn load_xyz(path: &Path, epoch: Epoch) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    parse_xyz(&text, path, epoch)
}

fn parse_xyz(text: &str, path: &Path, epoch: Epoch) -> Result<PointCloud> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 && cols.len() != 4 {
            return Err(parse_err(
                line_no,
                format!("expected 3 or 4 columns, found {}", cols.len()),
            ));
        }
        let mut xyz = [0.0; 3];
        for (k, c) in cols[..3].iter().enumerate() {
            xyz[k] = c
                .parse::<f64>()
                .map_err(|_| parse_err(line_no, format!("invalid coordinate {c:?}")))?;
            if !xyz[k].is_finite() {
                return Err(parse_err(line_no, format!("non-finite coordinate {c:?}")));
            }
        }
        let has_label = cols.len() == 4;
        match labeled {
            None => labeled = Some(has_label),
            Some(l) if l != has_label => {
                return Err(Error::Format(format!(
                    "{}:{line_no}: mixed labeled and unlabeled lines",
                    path.display()
                )))
            }
            _ => {}
        }
        if has_label {
            let l = cols[3]
                .parse::<u32>()
                .map_err(|_| parse_err(line_no, format!("invalid label {:?}", cols[3])))?;
            labels.push(l);
        }
        points.push(Point::from(xyz));
    }
    let mut pc = PointCloud::new(points, epoch)?;
    if labeled == Some(true) {
        pc.labels = Some(labels);
    }
    Ok(pc)
}

/// Writes `pc` in the ASCII format, labels as a 4th column when present.
pub fn save_xyz(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut line = String::new();
    for (i, p) in pc.points.iter().enumerate() {
        line.clear();
        let _ = write!(
            line,
            "{} {} {}",
            format_g9(p.x),
            format_g9(p.y),
            format_g9(p.z)
        );
        if let Some(l) = &pc.labels {
            let _ = write!(line, " {}", l[i]);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Formats like C's `%.9g`.
pub fn format_g9(v: f64) -> String {
    const PREC: i32 = 9;
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", (PREC - 1) as usize, v);
    let (mant, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= PREC {
        let mant = strip_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{:.*}", (PREC - 1 - exp) as usize, v);
        strip_zeros(&fixed).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Groups point indices by occupied cubic voxel of side `dl`, in voxel-key order.
pub fn voxel_groups(positions: &[[f64; 3]], dl: f64) -> Result<Vec<Vec<usize>>> {
    if !(dl > 0.0) || !dl.is_finite() {
        return Err(Error::Argument(format!("voxel size must be > 0, got {dl}")));
    }
    let mut bins: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        let key = (
            (p[0] / dl).floor() as i64,
            (p[1] / dl).floor() as i64,
            (p[2] / dl).floor() as i64,
        );
        bins.entry(key).or_default().push(i);
    }
    Ok(bins.into_values().collect())
}

/// Centroid of each group of positions.
pub fn group_centroids(positions: &[[f64; 3]], groups: &[Vec<usize>]) -> Vec<[f64; 3]> {
    groups
        .iter()
        .map(|g| {
            let mut c = [0.0; 3];
            for &i in g {
                for k in 0..3 {
                    c[k] += positions[i][k];
                }
            }
            let n = g.len() as f64;
            [c[0] / n, c[1] / n, c[2] / n]
        })
        .collect()
}

/// One point per occupied voxel of side `dl`: the voxel centroid, with the
/// majority label (lowest id on ties) and mean features.
pub fn grid_subsample(pc: &PointCloud, dl: f64) -> Result<PointCloud> {
    let positions = pc.positions();
    let groups = voxel_groups(&positions, dl)?;
    let points = group_centroids(&positions, &groups)
        .into_iter()
        .map(Point::from)
        .collect();
    let labels = pc.labels.as_ref().map(|labels| {
        groups
            .iter()
            .map(|g| majority(g.iter().map(|&i| labels[i])))
            .collect()
    });
    let features = pc.features.as_ref().map(|f| {
        let mut out = Matrix::zeros(groups.len(), f.cols());
        for (gi, g) in groups.iter().enumerate() {
            let row = out.row_mut(gi);
            for &i in g {
                for (o, v) in row.iter_mut().zip(f.row(i)) {
                    *o += v;
                }
            }
            let n = g.len() as f32;
            row.iter_mut().for_each(|o| *o /= n);
        }
        out
    });
    Ok(PointCloud {
        points,
        labels,
        features,
        epoch: pc.epoch,
    })
}

/// Most frequent value, lowest value on ties.
pub(crate) fn majority(values: impl Iterator<Item = u32>) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best = (0u32, 0usize);
    for (v, c) in counts {
        if c > best.1 {
            best = (v, c);
        }
    }
    best.0
}
