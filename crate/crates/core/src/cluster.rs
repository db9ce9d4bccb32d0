//! Mini-batch k-means, empty-cluster splitting, inverse-frequency class
//! weights and the clustering diagnostics (NMI, per-cluster entropy).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::cloud::Matrix;
use crate::error::{Error, Result};

const DCKM_MAGIC: &[u8; 4] = b"DCKM";

/// Centroids plus the assignment of every clustered point.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Matrix,
    pub assignments: Vec<u32>,
    pub counts: Vec<usize>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Sum of squared distances of every point to its assigned centroid.
    pub fn inertia(&self, features: &Matrix) -> f64 {
        (0..features.rows())
            .map(|i| sq_dist(features.row(i), self.centroids.row(self.assignments[i] as usize)))
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DCKM_MAGIC)?;
        binio::write_u32(&mut w, self.k() as u32)?;
        binio::write_u32(&mut w, self.dim() as u32)?;
        binio::write_u64(&mut w, self.assignments.len() as u64)?;
        binio::write_f32s(&mut w, self.centroids.as_slice())?;
        for a in &self.assignments {
            binio::write_u32(&mut w, *a)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, DCKM_MAGIC)?;
        let k = binio::read_u32(&mut r)? as usize;
        let d = binio::read_u32(&mut r)? as usize;
        let n = binio::read_u64(&mut r)? as usize;
        let centroids = Matrix::from_vec(k, d, binio::read_f32s(&mut r, k * d)?)?;
        let mut assignments = Vec::with_capacity(n);
        for _ in 0..n {
            let a = binio::read_u32(&mut r)?;
            if a as usize >= k {
                return Err(Error::Format(format!("assignment {a} out of range for K={k}")));
            }
            assignments.push(a);
        }
        let counts = counts_of(&assignments, k);
        Ok(Self {
            centroids,
            assignments,
            counts,
        })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

/// Nearest centroid, lowest id on ties.
pub fn nearest_centroid(x: &[f32], centroids: &Matrix) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

pub fn assign_all(features: &Matrix, centroids: &Matrix) -> Vec<u32> {
    (0..features.rows())
        .map(|i| nearest_centroid(features.row(i), centroids).0)
        .collect()
}

pub fn counts_of(assignments: &[u32], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &a in assignments {
        counts[a as usize] += 1;
    }
    counts
}

/// Member means for non-empty clusters; empty clusters keep their centroid.
fn recompute_means(features: &Matrix, assignments: &[u32], centroids: &mut Matrix) {
    let (k, d) = (centroids.rows(), centroids.cols());
    let mut sums = vec![0.0f64; k * d];
    let mut n = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        n[a] += 1;
        for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(features.row(i)) {
            *s += *v as f64;
        }
    }
    for c in 0..k {
        if n[c] > 0 {
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *dst = (s / n[c] as f64) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansParams {
    pub k: usize,
    pub batch_size: usize,
    pub n_iters: usize,
    /// Points used for k-means++ seeding, at least `k`.
    pub init_sample: usize,
}

impl KmeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            batch_size: 1024,
            n_iters: 100,
            init_sample: (20 * k).max(2000),
        }
    }
}

/// k-means++ seeding on a random subsample; duplicates are only picked once
/// every distinct point is taken.
fn kmeans_pp(features: &Matrix, k: usize, sample: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = features.rows();
    let mut pool: Vec<usize> = (0..n).collect();
    if sample < n {
        pool.shuffle(rng);
        pool.truncate(sample.max(k));
        pool.sort_unstable();
    }
    let mut centroids = Matrix::zeros(k, features.cols());
    let mut taken = vec![false; pool.len()];
    let first = rng.random_range(0..pool.len());
    taken[first] = true;
    centroids.row_mut(0).copy_from_slice(features.row(pool[first]));
    let mut d2: Vec<f64> = pool
        .iter()
        .map(|&i| sq_dist(features.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().enumerate().filter(|(j, _)| !taken[*j]).map(|(_, v)| v).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (j, v) in d2.iter().enumerate() {
                if taken[j] || *v <= 0.0 {
                    continue;
                }
                chosen = Some(j);
                if target < *v {
                    break;
                }
                target -= v;
            }
            chosen.expect("positive total has a candidate")
        } else {
            let free: Vec<usize> = (0..pool.len()).filter(|&j| !taken[j]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[pick] = true;
        centroids.row_mut(c).copy_from_slice(features.row(pool[pick]));
        for (j, &i) in pool.iter().enumerate() {
            d2[j] = d2[j].min(sq_dist(features.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Mini-batch k-means with per-centroid learning rate 1/(lifetime count).
/// The final pass assigns all points, moves centroids to member means and
/// reassigns; empty clusters may remain (see [`split_empty`]).
pub fn minibatch_kmeans(features: &Matrix, params: &KmeansParams, seed: u64) -> Result<ClusterModel> {
    let (n, k) = (features.rows(), params.k);
    if k == 0 || n < k {
        return Err(Error::Argument(format!("k-means needs 1 <= K <= N, got K={k}, N={n}")));
    }
    if features.cols() == 0 {
        return Err(Error::Argument("k-means needs at least one feature column".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(features, k, params.init_sample, &mut rng);
    let mut lifetime = vec![0u64; k];
    let batch = params.batch_size.clamp(1, n);
    let mut members = Vec::with_capacity(batch);
    for _ in 0..params.n_iters {
        members.clear();
        for _ in 0..batch {
            let i = rng.random_range(0..n);
            members.push((i, nearest_centroid(features.row(i), &centroids).0 as usize));
        }
        for &(i, c) in &members {
            lifetime[c] += 1;
            let eta = 1.0 / lifetime[c] as f32;
            for (dst, x) in centroids.row_mut(c).iter_mut().zip(features.row(i)) {
                *dst += eta * (*x - *dst);
            }
        }
    }
    let first = assign_all(features, &centroids);
    recompute_means(features, &first, &mut centroids);
    let assignments = assign_all(features, &centroids);
    let counts = counts_of(&assignments, k);
    Ok(ClusterModel {
        centroids,
        assignments,
        counts,
    })
}

/// Fills every empty cluster by halving the current largest one (lowest id
/// on ties) at random; both halves get their member means as centroids.
pub fn split_empty(model: &ClusterModel, features: &Matrix, seed: u64) -> Result<ClusterModel> {
    let k = model.k();
    if model.assignments.len() != features.rows() {
        return Err(Error::Argument("assignments and features differ in length".into()));
    }
    if features.rows() < k {
        return Err(Error::Capacity(format!("{} points cannot fill {k} clusters", features.rows())));
    }
    let mut out = model.clone();
    out.counts = counts_of(&out.assignments, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while let Some(empty) = out.counts.iter().position(|&c| c == 0) {
        let largest = (0..k).fold(0, |b, c| if out.counts[c] > out.counts[b] { c } else { b });
        let mut members: Vec<usize> = (0..out.assignments.len())
            .filter(|&i| out.assignments[i] as usize == largest)
            .collect();
        members.shuffle(&mut rng);
        let keep = members.len().div_ceil(2);
        for &i in &members[keep..] {
            out.assignments[i] = empty as u32;
        }
        out.counts[largest] = keep;
        out.counts[empty] = members.len() - keep;
        for c in [largest, empty] {
            let ids: Vec<usize> = members.iter().copied().filter(|&i| out.assignments[i] as usize == c).collect();
            let d = features.cols();
            let mut mean = vec![0.0f64; d];
            for &i in &ids {
                for (m, v) in mean.iter_mut().zip(features.row(i)) {
                    *m += *v as f64;
                }
            }
            for (dst, m) in out.centroids.row_mut(c).iter_mut().zip(mean) {
                *dst = (m / ids.len() as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Inverse-frequency weights, one per pseudo-cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub clamp: f64,
}

pub const DEFAULT_WEIGHT_CLAMP: f64 = 50.0;

/// `W_k ∝ 1/count_k` normalized to mean 1, clamped to `[1/c, c]`, and
/// floored at `max/c` so that `max/min <= c`.
pub fn compute_weights(counts: &[usize], clamp: f64) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Argument("no clusters to weight".into()));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Argument(format!("cluster {k} is empty; split empty clusters first")));
    }
    if !(clamp >= 1.0) {
        return Err(Error::Argument(format!("weight clamp must be >= 1, got {clamp}")));
    }
    // relative to the smallest count so equal counts give exactly 1
    let smallest = *counts.iter().min().expect("non-empty") as f64;
    let inv: Vec<f64> = counts.iter().map(|&c| smallest / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    let mut w: Vec<f64> = inv.iter().map(|v| (v / mean).clamp(1.0 / clamp, clamp)).collect();
    let floor = w.iter().copied().fold(f64::NEG_INFINITY, f64::max) / clamp;
    for v in &mut w {
        *v = v.max(floor);
    }
    Ok(ClassWeights { weights: w, clamp })
}

fn entropy_of_counts(mut counts: Vec<usize>) -> f64 {
    counts.retain(|&c| c > 0);
    counts.sort_unstable();
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let s: f64 = counts.iter().map(|&c| c as f64 * (c as f64).log2()).sum();
    (n.log2() - s / n).max(0.0)
}

fn label_counts(labels: &[u32]) -> Vec<usize> {
    let mut m: HashMap<u32, usize> = HashMap::new();
    for &l in labels {
        *m.entry(l).or_default() += 1;
    }
    m.into_values().collect()
}

/// Shannon entropy in bits of a labeling.
pub fn entropy(labels: &[u32]) -> f64 {
    entropy_of_counts(label_counts(labels))
}

/// Mutual information in bits between two labelings of the same points.
pub fn mutual_information(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("labelings differ in length: {} vs {}", a.len(), b.len())));
    }
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
    }
    let hab = entropy_of_counts(joint.into_values().collect());
    Ok((entropy(a) + entropy(b) - hab).max(0.0))
}

/// Normalized mutual information `I / sqrt(H(a) H(b))`, base-2 logs.
/// Zero entropy on either side gives 0, except two constant labelings give 1.
pub fn nmi(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Argument("nmi of empty labelings".into()));
    }
    let i = mutual_information(a, b)?;
    let (ha, hb) = (entropy(a), entropy(b));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == 0.0 && hb == 0.0 { 1.0 } else { 0.0 });
    }
    Ok((i / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPurity {
    pub cluster: u32,
    pub size: usize,
    pub entropy: f64,
    pub majority_class: u32,
    pub majority_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Non-empty clusters, ascending entropy (cluster id breaks ties).
    pub clusters: Vec<ClusterPurity>,
    /// Unweighted mean over non-empty clusters.
    pub mean_entropy: f64,
}

/// Entropy of the true-label distribution inside each pseudo-cluster.
pub fn cluster_entropy(assignments: &[u32], true_labels: &[u32]) -> Result<EntropyReport> {
    if assignments.len() != true_labels.len() {
        return Err(Error::Argument("assignments and labels differ in length".into()));
    }
    let mut per: HashMap<u32, HashMap<u32, usize>> = HashMap::new();
    for (&a, &t) in assignments.iter().zip(true_labels) {
        *per.entry(a).or_default().entry(t).or_default() += 1;
    }
    let mut clusters: Vec<ClusterPurity> = per
        .into_iter()
        .map(|(cluster, hist)| {
            let size: usize = hist.values().sum();
            let (majority_class, top) = hist
                .iter()
                .map(|(&c, &n)| (c, n))
                .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
                .expect("non-empty cluster");
            ClusterPurity {
                cluster,
                size,
                entropy: entropy_of_counts(hist.into_values().collect()),
                majority_class,
                majority_fraction: top as f64 / size as f64,
            }
        })
        .collect();
    clusters.sort_by(|x, y| x.entropy.total_cmp(&y.entropy).then(x.cluster.cmp(&y.cluster)));
    let mean_entropy = if clusters.is_empty() {
        0.0
    } else {
        clusters.iter().map(|c| c.entropy).sum::<f64>() / clusters.len() as f64
    };
    Ok(EntropyReport {
        clusters,
        mean_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, seed: u64) -> (Matrix, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u32;
            let c = if l == 0 { 0.0 } else { 10.0 };
            data.push(c + noise.sample(&mut rng) as f32);
            data.push(noise.sample(&mut rng) as f32);
            labels.push(l);
        }
        (Matrix::from_vec(n, 2, data).unwrap(), labels)
    }

    #[test]
    fn two_blobs_are_recovered() {
        let (f, labels) = blobs(1000, 1);
        let m = minibatch_kmeans(&f, &KmeansParams::new(2), 3).unwrap();
        assert!(nmi(&m.assignments, &labels).unwrap() >= 0.99);
    }

    #[test]
    fn one_cluster_per_point() {
        let (f, _) = blobs(30, 2);
        let m = minibatch_kmeans(&f, &KmeansParams::new(30), 1).unwrap();
        assert_eq!(m.inertia(&f), 0.0);
        let mut a = m.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 30);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (f, _) = blobs(500, 3);
        let m = minibatch_kmeans(&f, &KmeansParams::new(1), 1).unwrap();
        for c in 0..2 {
            let mean = (0..500).map(|i| f.get(i, c) as f64).sum::<f64>() / 500.0;
            assert!((m.centroids.get(0, c) as f64 - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn too_few_points() {
        let (f, _) = blobs(3, 4);
        assert!(matches!(minibatch_kmeans(&f, &KmeansParams::new(4), 0), Err(Error::Argument(_))));
    }

    #[test]
    fn assignments_are_nearest_centroids() {
        let (f, _) = blobs(400, 5);
        let m = minibatch_kmeans(&f, &KmeansParams::new(7), 2).unwrap();
        for i in (0..400).step_by(13) {
            let brute = (0..7)
                .map(|c| (sq_dist(f.row(i), m.centroids.row(c)), c as u32))
                .fold((f64::INFINITY, 0), |b, x| if x.0 < b.0 { x } else { b });
            assert_eq!(m.assignments[i], brute.1);
        }
    }

    #[test]
    fn lloyd_steps_do_not_increase_inertia_and_beat_random_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..3000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = Matrix::from_vec(1000, 3, data).unwrap();
        let m = minibatch_kmeans(&f, &KmeansParams::new(12), 4).unwrap();
        let mut random = Matrix::zeros(12, 3);
        for c in 0..12 {
            random.row_mut(c).copy_from_slice(f.row(rng.random_range(0..1000)));
        }
        let random_model = ClusterModel {
            assignments: assign_all(&f, &random),
            centroids: random,
            counts: vec![],
        };
        let mut prev = m.inertia(&f);
        assert!(prev <= random_model.inertia(&f));
        let mut cur = m.clone();
        for _ in 0..5 {
            recompute_means(&f, &cur.assignments, &mut cur.centroids);
            cur.assignments = assign_all(&f, &cur.centroids);
            let now = cur.inertia(&f);
            assert!(now <= prev + 1e-6 * prev);
            prev = now;
        }
    }

    #[test]
    fn split_fills_the_empty_cluster() {
        let (f, _) = blobs(12, 6);
        let mut assignments = vec![0u32; 10];
        assignments.extend([1, 1]);
        let model = ClusterModel {
            centroids: Matrix::zeros(3, 2),
            counts: counts_of(&assignments, 3),
            assignments,
        };
        let out = split_empty(&model, &f, 1).unwrap();
        assert_eq!(out.counts.iter().sum::<usize>(), 12);
        assert!(out.counts.iter().all(|&c| c >= 1));
        assert_eq!(out.counts, vec![5, 2, 5]);
        let unchanged = split_empty(&out, &f, 1).unwrap();
        assert_eq!(unchanged, out);
    }

    #[test]
    fn split_needs_enough_points() {
        let (f, _) = blobs(2, 6);
        let model = ClusterModel {
            centroids: Matrix::zeros(3, 2),
            counts: vec![2, 0, 0],
            assignments: vec![0, 0],
        };
        assert!(matches!(split_empty(&model, &f, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(compute_weights(&[5, 5, 5], 50.0).unwrap().weights, vec![1.0; 3]);
        let w = compute_weights(&[90, 10], 50.0).unwrap().weights;
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);
        let w = compute_weights(&[1_000_000, 1], 50.0).unwrap().weights;
        assert!((w[1] / w[0] - 50.0).abs() < 1e-12);
        assert!(matches!(compute_weights(&[3, 0], 50.0), Err(Error::Argument(_))));
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[3, 3, 3], &[0, 1, 1]).unwrap(), 0.0);
        assert!(matches!(nmi(&[0], &[0, 1]), Err(Error::Argument(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<u32> = (0..100_000).map(|_| rng.random_range(0..5)).collect();
        let b: Vec<u32> = (0..100_000).map(|i| (i % 2) as u32).collect();
        assert!(nmi(&a, &b).unwrap() < 0.02);
    }

    #[test]
    fn entropy_examples() {
        let r = cluster_entropy(&[0, 0, 1, 1, 2, 2, 2, 2], &[4, 4, 1, 2, 0, 1, 1, 1]).unwrap();
        let by_id = |id: u32| r.clusters.iter().find(|c| c.cluster == id).unwrap().clone();
        assert_eq!(by_id(0).entropy, 0.0);
        assert!((by_id(1).entropy - 1.0).abs() < 1e-12);
        assert!((by_id(2).entropy - 0.811_278_124_459_132_8).abs() < 1e-12);
        assert_eq!(by_id(2).majority_class, 1);
        assert_eq!(by_id(2).majority_fraction, 0.75);
        assert_eq!(r.clusters.iter().map(|c| c.cluster).collect::<Vec<_>>(), vec![0, 2, 1]);
    }

    #[test]
    fn dckm_round_trip() {
        let (f, _) = blobs(50, 9);
        let m = minibatch_kmeans(&f, &KmeansParams::new(4), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.dckm");
        m.save(&p).unwrap();
        assert_eq!(ClusterModel::load(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn nmi_is_symmetric_and_permutation_invariant(
            a in prop::collection::vec(0u32..6, 1..200),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<u32> = a.iter().map(|&x| if rng.random::<f64>() < 0.5 { x } else { rng.random_range(0..4) }).collect();
            let mut perm: Vec<u32> = (0..6).collect();
            perm.shuffle(&mut rng);
            let pa: Vec<u32> = a.iter().map(|&x| perm[x as usize] + 10).collect();
            let v = nmi(&a, &b).unwrap();
            prop_assert_eq!(v, nmi(&b, &a).unwrap());
            prop_assert_eq!(v, nmi(&pa, &b).unwrap());
            prop_assert_eq!(v, nmi(&b, &pa).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn split_leaves_no_empty_cluster(seed in 0u64..10_000, k in 2usize..12, n_extra in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = k + n_extra;
            let data: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = Matrix::from_vec(n, 2, data).unwrap();
            let used = rng.random_range(1..=k);
            let assignments: Vec<u32> = (0..n).map(|_| rng.random_range(0..used as u32)).collect();
            let model = ClusterModel { centroids: Matrix::zeros(k, 2), counts: counts_of(&assignments, k), assignments };
            let out = split_empty(&model, &f, seed).unwrap();
            prop_assert!(out.counts.iter().all(|&c| c >= 1));
            prop_assert_eq!(out.counts.iter().sum::<usize>(), n);
            prop_assert_eq!(out.counts.clone(), counts_of(&out.assignments, k));
        }

        #[test]
        fn weights_are_bounded(counts in prop::collection::vec(1usize..100_000, 1..50)) {
            let w = compute_weights(&counts, 50.0).unwrap().weights;
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(lo > 0.0 && hi.is_finite());
            prop_assert!(hi / lo <= 50.0 * (1.0 + 1e-12));
        }
    }
}
