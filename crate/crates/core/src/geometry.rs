//! Euclidean distances, neighbor orderings and class centroids.
//!
//! Everything here is brute force: O(n²) distances and a full sort per row.
//! Ties between equal distances always resolve to the lower point index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric matrix of pairwise Euclidean distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_distances<P: AsRef<[f64]> + Sync>(points: &[P]) -> Result<DistanceMatrix> {
    let n = points.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: n });
    }
    let dim = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: p.as_ref().len(),
        });
    }
    // Each entry is computed once with the lower index first so the matrix is exactly symmetric.
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| match i.cmp(&j) {
                Ordering::Equal => 0.0,
                Ordering::Less => euclidean(points[i].as_ref(), points[j].as_ref()),
                Ordering::Greater => euclidean(points[j].as_ref(), points[i].as_ref()),
            })
        })
        .collect();
    Ok(DistanceMatrix { n, data })
}

/// For every point, all other indices sorted by ascending distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborLists {
    order: Vec<Vec<usize>>,
}

impl NeighborLists {
    /// Largest usable neighborhood size, `n − 1`.
    pub fn k_max(&self) -> usize {
        self.order.len().saturating_sub(1)
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.order[i]
    }

    /// The `k` nearest neighbors of point `i`.
    pub fn nearest(&self, i: usize, k: usize) -> &[usize] {
        &self.order[i][..k]
    }
}

pub fn knn(dm: &DistanceMatrix) -> NeighborLists {
    let n = dm.n();
    let order = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = dm.row(i);
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            others
        })
        .collect();
    NeighborLists { order }
}

/// Mean point of each class, keyed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    by_class: BTreeMap<u32, [f64; 2]>,
}

impl Centroids {
    pub fn get(&self, class: u32) -> Option<[f64; 2]> {
        self.by_class.get(&class).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, [f64; 2])> + '_ {
        self.by_class.iter().map(|(&c, &p)| (c, p))
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

pub fn class_centroids(points: &[[f64; 2]], labels: &[u32]) -> Centroids {
    let mut sums: BTreeMap<u32, ([f64; 2], usize)> = BTreeMap::new();
    for (p, &c) in points.iter().zip(labels) {
        let entry = sums.entry(c).or_insert(([0.0, 0.0], 0));
        entry.0[0] += p[0];
        entry.0[1] += p[1];
        entry.1 += 1;
    }
    let by_class = sums
        .into_iter()
        .map(|(c, (s, count))| (c, [s[0] / count as f64, s[1] / count as f64]))
        .collect();
    Centroids { by_class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
    }

    #[test]
    fn three_four_five() {
        let dm = pairwise_distances(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(dm.get(0, 1), 5.0);
        assert_eq!(dm.get(1, 0), 5.0);
        let dm = pairwise_distances(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(dm.get(0, 1), 0.0);
    }

    #[test]
    fn distance_errors() {
        let single: [[f64; 2]; 1] = [[0.0, 0.0]];
        assert!(matches!(pairwise_distances(&single), Err(Error::TooFewPoints { .. })));
        let ragged = vec![vec![0.0, 0.0], vec![1.0]];
        assert!(matches!(
            pairwise_distances(&ragged),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(&mut rng, 5, 3);
        let dm = pairwise_distances(&pts).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (pts[i][k] - pts[j][k]).powi(2);
                }
                assert!((dm.get(i, j) - s.sqrt()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn collinear_and_tied_neighbors() {
        let dm = pairwise_distances(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
        assert_eq!(knn(&dm).row(1), &[0, 2]);

        // Unit square: point 0's two adjacent corners tie at distance 1.
        let dm = pairwise_distances(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let nl = knn(&dm);
        assert_eq!(nl.row(0), &[1, 3, 2]);
        assert_eq!(nl.row(2), &[1, 3, 0]);
        assert_eq!(nl.k_max(), 3);
    }

    #[test]
    fn knn_prefix_matches_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 10, 2);
        let dm = pairwise_distances(&pts).unwrap();
        let nl = knn(&dm);
        for i in 0..10 {
            for k in 1..10 {
                // Repeatedly pick the smallest remaining (distance, index).
                let mut remaining: Vec<usize> = (0..10).filter(|&j| j != i).collect();
                let mut chosen = Vec::new();
                for _ in 0..k {
                    let mut best = 0;
                    for (pos, &j) in remaining.iter().enumerate() {
                        let b = remaining[best];
                        if dm.get(i, j) < dm.get(i, b) || (dm.get(i, j) == dm.get(i, b) && j < b) {
                            best = pos;
                        }
                    }
                    chosen.push(remaining.remove(best));
                }
                assert_eq!(nl.nearest(i, k), chosen.as_slice());
            }
        }
    }

    #[test]
    fn centroids() {
        let c = class_centroids(&[[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]], &[0, 0, 1]);
        assert_eq!(c.get(0), Some([1.0, 0.0]));
        assert_eq!(c.get(1), Some([5.0, 5.0]));
        assert_eq!(c.len(), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..30).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let c = class_centroids(&pts, &labels);
        for class in 0..3u32 {
            let members: Vec<&[f64; 2]> = pts.iter().zip(&labels).filter(|(_, &l)| l == class).map(|(p, _)| p).collect();
            let mx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
            let my = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
            let got = c.get(class).unwrap();
            assert!((got[0] - mx).abs() < 1e-12 && (got[1] - my).abs() < 1e-12);
        }
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y)| [x, y]), 3..25)
    }

    proptest! {
        #[test]
        fn matrix_is_a_metric(pts in cloud()) {
            let dm = pairwise_distances(&pts).unwrap();
            let n = dm.n();
            for i in 0..n {
                prop_assert_eq!(dm.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(dm.get(i, j), dm.get(j, i));
                    prop_assert!(dm.get(i, j) >= 0.0 && dm.get(i, j).is_finite());
                    for k in 0..n {
                        prop_assert!(dm.get(i, k) <= dm.get(i, j) + dm.get(j, k) + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn knn_invariant_under_rigid_motion_and_doubling(
            pts in cloud(), angle in 0.0..std::f64::consts::TAU, tx in -50.0..50.0f64, ty in -50.0..50.0f64,
        ) {
            // Quantize so rigid motions cannot reorder near-ties through rounding.
            let pts: Vec<[f64; 2]> = pts.iter().map(|p| [p[0].round(), p[1].round()]).collect();
            let base = knn(&pairwise_distances(&pts).unwrap());

            let doubled: Vec<[f64; 2]> = pts.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
            let dm = pairwise_distances(&pts).unwrap();
            let dm2 = pairwise_distances(&doubled).unwrap();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    prop_assert!((dm2.get(i, j) - 2.0 * dm.get(i, j)).abs() <= 1e-9 * (1.0 + dm.get(i, j)));
                }
            }
            prop_assert_eq!(&knn(&dm2), &base);

            let translated: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + tx.round(), p[1] + ty.round()]).collect();
            prop_assert_eq!(&knn(&pairwise_distances(&translated).unwrap()), &base);

            // Rotations can perturb exactly tied distances in the last bit, so compare
            // orderings only where every gap between consecutive neighbors is clear.
            let (s, c) = angle.sin_cos();
            let rotated: Vec<[f64; 2]> = pts.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
            let rot = knn(&pairwise_distances(&rotated).unwrap());
            for i in 0..pts.len() {
                let row = base.row(i);
                let gaps_clear = row.windows(2).all(|w| dm.get(i, w[1]) - dm.get(i, w[0]) > 1e-6);
                if gaps_clear {
                    prop_assert_eq!(rot.row(i), row);
                }
            }
        }
    }
}
