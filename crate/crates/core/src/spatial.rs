//! Static k-d tree over point positions.
//!
//! Query results are exact: they equal a brute-force scan, with ties at equal
//! distance broken toward the lower point id.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// Which coordinates the index measures distance on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Xy,
    Xyz,
}

impl Dims {
    fn count(self) -> usize {
        match self {
            Dims::Xy => 2,
            Dims::Xyz => 3,
        }
    }
}

/// A neighbor returned by [`SpatialIndex::knn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub dist: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    dims: Dims,
    // positions stored in tree order, with their original ids
    pts: Vec<[f64; 3]>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(PartialEq)]
struct HeapItem {
    d2: f64,
    id: usize,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl SpatialIndex {
    pub fn new(positions: &[[f64; 3]], dims: Dims) -> Self {
        let mut order: Vec<usize> = (0..positions.len()).collect();
        let mut nodes = Vec::new();
        if !positions.is_empty() {
            build(positions, dims, &mut order, 0, positions.len(), &mut nodes);
        }
        let pts = order.iter().map(|&i| positions[i]).collect();
        Self {
            dims,
            pts,
            ids: order,
            nodes,
        }
    }

    pub fn from_cloud(pc: &PointCloud, dims: Dims) -> Self {
        Self::new(&pc.positions(), dims)
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn dist2(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.dims.count() {
            let d = a[k] - b[k];
            s += d * d;
        }
        s
    }

    /// The `k` nearest points, ascending by distance then id.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Argument("k must be >= 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Query("knn on an empty index".into()));
        }
        let k = k.min(self.len());
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, &query, k, &mut heap);
        let mut out: Vec<HeapItem> = heap.into_vec();
        out.sort();
        Ok(out
            .into_iter()
            .map(|h| Neighbor {
                id: h.id,
                dist: h.d2.sqrt(),
            })
            .collect())
    }

    /// Nearest point id; lowest id among equidistant points.
    pub fn nearest(&self, query: [f64; 3]) -> Result<Neighbor> {
        Ok(self.knn(query, 1)?[0])
    }

    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let item = HeapItem {
                        d2: self.dist2(q, &self.pts[i]),
                        id: self.ids[i],
                    };
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                let worst = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().expect("non-empty heap").d2
                };
                if diff * diff <= worst {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    /// Ids of points whose XY distance to `center_xy` is at most `radius`
    /// (a vertical cylinder of infinite height), ascending.
    pub fn radius_query_2d(&self, center_xy: [f64; 2], radius: f64) -> Result<Vec<usize>> {
        check_radius(radius)?;
        let mut out = Vec::new();
        if !self.is_empty() {
            let q = [center_xy[0], center_xy[1], 0.0];
            self.radius_rec(0, &q, radius * radius, 2, &mut |id| out.push(id));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Ids of points within a ball of `radius` around `center`, ascending.
    /// On an XY index this degenerates to the vertical cylinder query.
    pub fn radius_query(&self, center: [f64; 3], radius: f64) -> Result<Vec<usize>> {
        check_radius(radius)?;
        let mut out = Vec::new();
        if !self.is_empty() {
            let d = self.dims.count();
            self.radius_rec(0, &center, radius * radius, d, &mut |id| out.push(id));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Number of points within a ball of `radius` around `center`.
    pub fn count_within(&self, center: [f64; 3], radius: f64) -> Result<usize> {
        check_radius(radius)?;
        let mut n = 0;
        if !self.is_empty() {
            let d = self.dims.count();
            self.radius_rec(0, &center, radius * radius, d, &mut |_| n += 1);
        }
        Ok(n)
    }

    fn radius_rec(
        &self,
        node: usize,
        q: &[f64; 3],
        r2: f64,
        metric_dims: usize,
        emit: &mut dyn FnMut(usize),
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let p = &self.pts[i];
                    let mut s = 0.0;
                    for k in 0..metric_dims {
                        let d = q[k] - p[k];
                        s += d * d;
                    }
                    if s <= r2 {
                        emit(self.ids[i]);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                if dim >= metric_dims {
                    self.radius_rec(left, q, r2, metric_dims, emit);
                    self.radius_rec(right, q, r2, metric_dims, emit);
                    return;
                }
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_rec(near, q, r2, metric_dims, emit);
                if diff * diff <= r2 {
                    self.radius_rec(far, q, r2, metric_dims, emit);
                }
            }
        }
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0) || radius.is_nan() {
        return Err(Error::Argument(format!("radius must be > 0, got {radius}")));
    }
    Ok(())
}

fn build(
    pts: &[[f64; 3]],
    dims: Dims,
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    // split on the axis of largest spread
    let mut best = (0usize, -1.0f64);
    for d in 0..dims.count() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in &order[start..end] {
            lo = lo.min(pts[i][d]);
            hi = hi.max(pts[i][d]);
        }
        if hi - lo > best.1 {
            best = (d, hi - lo);
        }
    }
    if best.1 <= 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let dim = best.0;
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][dim].total_cmp(&pts[b][dim]));
    let value = pts[order[mid]][dim];
    nodes.push(Node::Leaf { start, end });
    let left = build(pts, dims, order, start, mid, nodes);
    let right = build(pts, dims, order, mid, end, nodes);
    nodes[id] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    id
}
