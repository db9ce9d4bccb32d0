//! Rigid kernel points and their influence on neighbor offsets.

use serde::{Deserialize, Serialize};

use super::tape::{Influence, NO_NEIGHBOR};
use crate::error::{Error, Result};
use crate::spatial::{Dims, SpatialIndex};

/// Fixed kernel point offsets and the linear-correlation bandwidth.
///
/// `sigma = inf` makes every kernel point see every neighbor with weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDisposition {
    pub points: Vec<[f64; 3]>,
    pub sigma: f64,
}

impl KernelDisposition {
    /// One point at the origin plus `p - 1` points spread on a sphere of `radius`.
    pub fn sphere(p: usize, radius: f64, sigma: f64) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("kernel needs at least one point".into()));
        }
        if !(radius > 0.0) || !(sigma > 0.0) {
            return Err(Error::Config(format!("kernel radius {radius} and sigma {sigma} must be > 0")));
        }
        let mut points = vec![[0.0; 3]];
        let n = p - 1;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..n {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            points.push([radius * r * phi.cos(), radius * r * phi.sin(), radius * z]);
        }
        Ok(Self { points, sigma })
    }

    /// Layout used at a scale whose grid step is `dl`.
    pub fn for_scale(p: usize, dl: f64) -> Result<Self> {
        Self::sphere(p, 1.5 * dl, dl)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `max(0, 1 - |y - kp| / sigma)`.
    pub fn weight(&self, y: [f64; 3], p: usize) -> f64 {
        if self.sigma.is_infinite() {
            return 1.0;
        }
        let kp = self.points[p];
        let d = ((y[0] - kp[0]).powi(2) + (y[1] - kp[1]).powi(2) + (y[2] - kp[2]).powi(2)).sqrt();
        (1.0 - d / self.sigma).max(0.0)
    }

    /// Influences of the `k` nearest `support` points around every query.
    pub fn influence(&self, queries: &[[f64; 3]], support: &[[f64; 3]], k: usize) -> Result<Influence> {
        if support.is_empty() {
            return Err(Error::Degenerate("point convolution over an empty support".into()));
        }
        let index = SpatialIndex::new(support, Dims::Xyz);
        let nbr_lists: Result<Vec<Vec<usize>>> = queries
            .iter()
            .map(|q| Ok(index.knn(*q, k)?.into_iter().map(|n| n.id).collect()))
            .collect();
        self.influence_from_lists(queries, support, &nbr_lists?, k)
    }

    /// Influences for explicit neighbor lists; lists shorter than `k` are padded.
    pub fn influence_from_lists(
        &self,
        queries: &[[f64; 3]],
        support: &[[f64; 3]],
        lists: &[Vec<usize>],
        k: usize,
    ) -> Result<Influence> {
        if lists.len() != queries.len() {
            return Err(Error::Tensor(format!("{} neighbor lists for {} queries", lists.len(), queries.len())));
        }
        let p = self.len();
        let mut nbr = Vec::with_capacity(queries.len() * k);
        let mut h = Vec::with_capacity(queries.len() * k * p);
        for (q, list) in queries.iter().zip(lists) {
            if list.len() > k {
                return Err(Error::Tensor(format!("neighbor list of {} exceeds k = {k}", list.len())));
            }
            for j in 0..k {
                match list.get(j) {
                    Some(&id) => {
                        let s = support.get(id).ok_or_else(|| {
                            Error::Tensor(format!("neighbor {id} outside support of {}", support.len()))
                        })?;
                        let y = [s[0] - q[0], s[1] - q[1], s[2] - q[2]];
                        nbr.push(id as u32);
                        h.extend((0..p).map(|pp| self.weight(y, pp) as f32));
                    }
                    None => {
                        nbr.push(NO_NEIGHBOR);
                        h.extend(std::iter::repeat_n(0.0, p));
                    }
                }
            }
        }
        Ok(Influence {
            n_out: queries.len(),
            n_in: support.len(),
            k,
            p,
            nbr,
            h,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_are_distinct_and_on_radius() {
        let k = KernelDisposition::sphere(15, 1.5, 1.0).unwrap();
        assert_eq!(k.len(), 15);
        assert_eq!(k.points[0], [0.0; 3]);
        for p in &k.points[1..] {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.5).abs() < 1e-12);
        }
        for i in 0..15 {
            for j in 0..i {
                let d: f64 = (0..3).map(|c| (k.points[i][c] - k.points[j][c]).powi(2)).sum();
                assert!(d > 1e-6);
            }
        }
    }

    #[test]
    fn weight_is_linear_and_clamped() {
        let k = KernelDisposition::sphere(1, 1.0, 2.0).unwrap();
        assert_eq!(k.weight([0.0; 3], 0), 1.0);
        assert!((k.weight([1.0, 0.0, 0.0], 0) - 0.5).abs() < 1e-12);
        assert_eq!(k.weight([3.0, 0.0, 0.0], 0), 0.0);
        let inf = KernelDisposition::sphere(1, 1.0, f64::INFINITY).unwrap();
        assert_eq!(inf.weight([100.0, 0.0, 0.0], 0), 1.0);
    }

    #[test]
    fn short_neighbor_lists_are_padded() {
        let k = KernelDisposition::sphere(2, 1.0, 1.0).unwrap();
        let support = [[0.0; 3], [1.0, 0.0, 0.0]];
        let infl = k.influence(&[[0.0; 3]], &support, 4).unwrap();
        assert_eq!(infl.nbr, vec![0, 1, NO_NEIGHBOR, NO_NEIGHBOR]);
        assert_eq!(infl.h.len(), 8);
        assert_eq!(&infl.h[4..], &[0.0; 4]);
    }

    #[test]
    fn empty_support_is_degenerate() {
        let k = KernelDisposition::sphere(3, 1.0, 1.0).unwrap();
        assert!(matches!(k.influence(&[[0.0; 3]], &[], 4), Err(Error::Degenerate(_))));
    }
}
