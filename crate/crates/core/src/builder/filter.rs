use nalgebra::Vector3;
use rayon::prelude::*;

use crate::map::Reconstruction;

const LEAF_SIZE: usize = 8;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<KdNode>, right: Box<KdNode> },
}

/// Static 3-d tree over a point slice, answering exact k-nearest queries.
pub(crate) struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    order: Vec<usize>,
    root: KdNode,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(points, &mut order, 0);
        KdTree { points, order, root }
    }

    fn build(points: &[Vector3<f64>], idx: &mut [usize], offset: usize) -> KdNode {
        let n = idx.len();
        if n <= LEAF_SIZE {
            return KdNode::Leaf {
                start: offset,
                end: offset + n,
            };
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in idx.iter() {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            return KdNode::Leaf {
                start: offset,
                end: offset + n,
            };
        }
        let mid = n / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let value = points[idx[mid]][axis];
        let (l, r) = idx.split_at_mut(mid);
        KdNode::Split {
            axis,
            value,
            left: Box::new(Self::build(points, l, offset)),
            right: Box::new(Self::build(points, r, offset + mid)),
        }
    }

    /// The `k` nearest points to `q` other than index `skip`, as
    /// `(squared distance, index)` ascending; equal distances order by index.
    pub fn knn(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
        let mut best = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, q, k, skip, &mut best);
        }
        best
    }

    fn search(&self, node: &KdNode, q: &Vector3<f64>, k: usize, skip: Option<usize>, best: &mut Vec<(f64, usize)>) {
        match node {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let cand = ((self.points[i] - q).norm_squared(), i);
                    if best.len() == k && cand >= best[k - 1] {
                        continue;
                    }
                    let pos = best.partition_point(|b| *b < cand);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, skip, best);
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, q, k, skip, best);
                }
            }
        }
    }
}

/// Trace of the sample covariance of a point set.
pub(crate) fn covariance_trace(pts: impl Iterator<Item = Vector3<f64>> + Clone) -> f64 {
    let (n, sum) = pts.clone().fold((0usize, Vector3::zeros()), |(n, s), p| (n + 1, s + p));
    if n < 2 {
        return 0.0;
    }
    let mean = sum / n as f64;
    pts.map(|p| (p - mean).norm_squared()).sum::<f64>() / (n - 1) as f64
}

/// Spatial-consistency score of every position: the covariance trace of the
/// point together with its `lambda_n` nearest neighbors.
pub fn neighbor_spread(positions: &[Vector3<f64>], lambda_n: usize) -> Vec<f64> {
    let tree = KdTree::new(positions);
    positions
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let nn = tree.knn(x, lambda_n, Some(i));
            covariance_trace(std::iter::once(*x).chain(nn.iter().map(|&(_, j)| positions[j])))
        })
        .collect()
}

/// Ids of points whose neighborhood spread is at most `lambda_v`, ascending.
/// With no more than `lambda_n` points every point is kept.
pub fn filter_points(recon: &Reconstruction, lambda_n: usize, lambda_v: f64) -> Vec<u64> {
    let ids: Vec<u64> = recon.points.keys().copied().collect();
    if ids.len() <= lambda_n {
        return ids;
    }
    let positions: Vec<Vector3<f64>> = recon.points.values().map(|p| p.position).collect();
    let spread = neighbor_spread(&positions, lambda_n);
    ids.into_iter()
        .zip(spread)
        .filter(|&(_, v)| v <= lambda_v)
        .map(|(id, _)| id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(pts: &[Vector3<f64>], q: &Vector3<f64>, k: usize, skip: usize) -> Vec<(f64, usize)> {
        let mut all: Vec<_> = pts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn kd_tree_matches_brute_force(seed in 0u64..1000, n in 1usize..300, k in 1usize..25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse grid coordinates create plenty of exact distance ties
            let pts: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(0..6) as f64, rng.random_range(0..6) as f64, rng.random_range(0..3) as f64))
                .collect();
            let tree = KdTree::new(&pts);
            for i in 0..n.min(20) {
                prop_assert_eq!(tree.knn(&pts[i], k, Some(i)), brute_knn(&pts, &pts[i], k, i));
            }
        }
    }

    #[test]
    fn line_neighborhood_trace() {
        let pts: Vec<_> = (0..21).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let v = neighbor_spread(&pts, 20);
        // all 21 points form every neighborhood: sum of (i-10)^2 * 1e-4 over 20
        for s in v {
            assert!((s - 770.0e-4 / 20.0).abs() < 1e-12);
            assert!(s <= 0.2);
        }
    }

    #[test]
    fn far_point_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts: Vec<_> = (0..30)
            .map(|_| Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        pts.push(Vector3::new(100.0, 0.0, 0.0));
        let v = neighbor_spread(&pts, 20);
        assert!(v[..30].iter().all(|&s| s <= 0.2));
        assert!(v[30] > 0.2 * 100.0);
    }

    #[test]
    fn covariance_trace_matches_definition() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 2.0)];
        let mean = Vector3::repeat(2.0 / 3.0);
        let expect: f64 = pts.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / 2.0;
        assert!((covariance_trace(pts.iter().copied()) - expect).abs() < 1e-15);
        assert_eq!(covariance_trace(std::iter::once(Vector3::new(1.0, 2.0, 3.0))), 0.0);
    }
}
