//! Ground-plane clustering: a BIRCH clustering-feature tree condenses the
//! points into leaf subclusters, which Ward agglomeration then merges down
//! to the requested count.

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::map::LandmarkLabel;

use super::BuildError;

pub const BRANCHING_FACTOR: usize = 50;
/// Leaf subclusters allowed before the threshold is doubled and the tree rebuilt.
pub const MAX_LEAF_ENTRIES: usize = 4096;
const INITIAL_THRESHOLD_FRACTION: f64 = 0.01;
const MAX_HALVINGS: usize = 64;

/// Clustering feature: count, linear sum and sum of squared norms.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cf {
    n: f64,
    ls: Vector2<f64>,
    ss: f64,
}

impl Cf {
    fn point(p: &Vector2<f64>) -> Self {
        Cf {
            n: 1.0,
            ls: *p,
            ss: p.norm_squared(),
        }
    }

    fn zero() -> Self {
        Cf {
            n: 0.0,
            ls: Vector2::zeros(),
            ss: 0.0,
        }
    }

    fn add(&self, o: &Cf) -> Cf {
        Cf {
            n: self.n + o.n,
            ls: self.ls + o.ls,
            ss: self.ss + o.ss,
        }
    }

    fn centroid(&self) -> Vector2<f64> {
        self.ls / self.n
    }

    fn radius(&self) -> f64 {
        (self.ss / self.n - self.centroid().norm_squared()).max(0.0).sqrt()
    }

    /// Increase in within-cluster sum of squares caused by merging.
    fn ward(&self, o: &Cf) -> f64 {
        self.n * o.n / (self.n + o.n) * (self.centroid() - o.centroid()).norm_squared()
    }
}

#[derive(Debug, Clone)]
struct Subcluster {
    cf: Cf,
    members: Vec<usize>,
}

enum Node {
    Leaf(Vec<Subcluster>),
    Internal(Vec<(Cf, Box<Node>)>),
}

impl Node {
    fn cf(&self) -> Cf {
        match self {
            Node::Leaf(es) => es.iter().fold(Cf::zero(), |a, e| a.add(&e.cf)),
            Node::Internal(cs) => cs.iter().fold(Cf::zero(), |a, (c, _)| a.add(c)),
        }
    }
}

fn closest<T>(items: &[T], key: impl Fn(&T) -> Vector2<f64>, q: &Vector2<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, it) in items.iter().enumerate() {
        let d = (key(it) - q).norm_squared();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Splits an overfull entry list around its two most distant entries.
fn split_by_farthest<T>(mut items: Vec<T>, key: impl Fn(&T) -> Vector2<f64>) -> (Vec<T>, Vec<T>) {
    let cs: Vec<_> = items.iter().map(&key).collect();
    let (mut a, mut b, mut far) = (0, 1, -1.0);
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            let d = (cs[i] - cs[j]).norm_squared();
            if d > far {
                (a, b, far) = (i, j, d);
            }
        }
    }
    let (ca, cb) = (cs[a], cs[b]);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, it) in items.drain(..).enumerate() {
        let to_left = i == a || (i != b && (cs[i] - ca).norm_squared() <= (cs[i] - cb).norm_squared());
        if to_left {
            left.push(it);
        } else {
            right.push(it);
        }
    }
    (left, right)
}

struct CfTree {
    root: Node,
    threshold: f64,
    leaf_entries: usize,
}

impl CfTree {
    fn new(threshold: f64) -> Self {
        CfTree {
            root: Node::Leaf(Vec::new()),
            threshold,
            leaf_entries: 0,
        }
    }

    fn insert(&mut self, sc: Subcluster) {
        let thr = self.threshold;
        let mut created = false;
        if let Some(sibling) = Self::insert_into(&mut self.root, sc, thr, &mut created) {
            let old = std::mem::replace(&mut self.root, Node::Leaf(Vec::new()));
            self.root = Node::Internal(vec![(old.cf(), Box::new(old)), (sibling.cf(), Box::new(sibling))]);
        }
        if created {
            self.leaf_entries += 1;
        }
    }

    /// Returns a new sibling when `node` had to split.
    fn insert_into(node: &mut Node, sc: Subcluster, thr: f64, created: &mut bool) -> Option<Node> {
        match node {
            Node::Leaf(entries) => {
                let c = sc.cf.centroid();
                if !entries.is_empty() {
                    let i = closest(entries, |e| e.cf.centroid(), &c);
                    let merged = entries[i].cf.add(&sc.cf);
                    if merged.radius() < thr && (entries[i].cf.centroid() - c).norm() < thr {
                        entries[i].cf = merged;
                        entries[i].members.extend(sc.members);
                        return None;
                    }
                }
                entries.push(sc);
                *created = true;
                if entries.len() > BRANCHING_FACTOR {
                    let (l, r) = split_by_farthest(std::mem::take(entries), |e| e.cf.centroid());
                    *entries = l;
                    return Some(Node::Leaf(r));
                }
                None
            }
            Node::Internal(children) => {
                let i = closest(children, |(cf, _)| cf.centroid(), &sc.cf.centroid());
                let add = sc.cf;
                let split = Self::insert_into(&mut children[i].1, sc, thr, created);
                match split {
                    None => {
                        children[i].0 = children[i].0.add(&add);
                        None
                    }
                    Some(sib) => {
                        children[i].0 = children[i].1.cf();
                        children.push((sib.cf(), Box::new(sib)));
                        if children.len() > BRANCHING_FACTOR {
                            let (l, r) = split_by_farthest(std::mem::take(children), |(cf, _)| cf.centroid());
                            *children = l;
                            return Some(Node::Internal(r));
                        }
                        None
                    }
                }
            }
        }
    }

    fn into_leaves(self) -> Vec<Subcluster> {
        fn walk(n: Node, out: &mut Vec<Subcluster>) {
            match n {
                Node::Leaf(es) => out.extend(es),
                Node::Internal(cs) => cs.into_iter().for_each(|(_, c)| walk(*c, out)),
            }
        }
        let mut out = Vec::new();
        walk(self.root, &mut out);
        out
    }
}

/// Builds the CF tree, doubling the threshold whenever the leaf budget overflows.
fn condense(points: &[Vector2<f64>], order: &[usize], threshold: f64) -> Vec<Subcluster> {
    let mut tree = CfTree::new(threshold);
    for &i in order {
        tree.insert(Subcluster {
            cf: Cf::point(&points[i]),
            members: vec![i],
        });
        if tree.leaf_entries > MAX_LEAF_ENTRIES {
            let thr = tree.threshold * 2.0;
            let leaves = tree.into_leaves();
            tree = CfTree::new(thr);
            for sc in leaves {
                tree.insert(sc);
            }
        }
    }
    let mut leaves = tree.into_leaves();
    for sc in &mut leaves {
        sc.members.sort_unstable();
    }
    leaves.sort_by_key(|sc| sc.members[0]);
    leaves
}

/// Ward agglomeration by nearest-neighbor chain. Returns, for each input
/// subcluster, the index of its final cluster (`0..target`).
fn ward_agglomerate(cfs: &[Cf], target: usize) -> Vec<usize> {
    let m = cfs.len();
    let mut active: Vec<Option<Cf>> = cfs.iter().copied().map(Some).collect();
    let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(m.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = m;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(Option::is_some).unwrap());
        }
        let a = *chain.last().unwrap();
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        let ca = active[a].unwrap();
        // nearest active cluster; ties go to the lowest id, but the chain
        // predecessor wins any tie so the chain always terminates
        let mut best = (f64::INFINITY, usize::MAX);
        if let Some(p) = prev {
            best = (ca.ward(&active[p].unwrap()), p);
        }
        for (j, c) in active.iter().enumerate() {
            if j == a || Some(j) == prev {
                continue;
            }
            if let Some(c) = c {
                let d = ca.ward(c);
                if d < best.0 || (d == best.0 && Some(best.1) != prev && j < best.1) {
                    best = (d, j);
                }
            }
        }
        let b = best.1;
        if Some(b) == prev {
            chain.truncate(chain.len() - 2);
            let (lo, hi) = (a.min(b), a.max(b));
            merges.push((best.0, lo, hi));
            active[lo] = Some(active[lo].unwrap().add(&active[hi].unwrap()));
            active[hi] = None;
            remaining -= 1;
        } else {
            chain.push(b);
        }
    }
    // the chain discovers merges out of height order; replay the lowest ones
    merges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(_, a, b) in merges.iter().take(m - target) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
    }
    let mut ids = std::collections::HashMap::new();
    (0..m)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = ids.len();
            *ids.entry(r).or_insert(next)
        })
        .collect()
}

/// Partitions ground-plane points into exactly `lambda_l` non-empty clusters.
/// Labels are `1..=lambda_l`, numbered in order of each cluster's lowest
/// point index. `seed` fixes the tree insertion order.
pub fn cluster_landmarks(
    points2d: &[Vector2<f64>],
    lambda_l: usize,
    seed: u64,
) -> Result<Vec<LandmarkLabel>, BuildError> {
    let n = points2d.len();
    if lambda_l == 0 {
        return Err(BuildError::InvalidConfig("lambda_l must be >= 1".into()));
    }
    if n < lambda_l {
        return Err(BuildError::TooFewPoints { needed: lambda_l, got: n });
    }
    if lambda_l == 1 {
        return Ok(vec![1; n]);
    }
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for p in points2d {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut threshold = (hi - lo).norm() * INITIAL_THRESHOLD_FRACTION;
    let mut leaves = condense(points2d, &order, threshold);
    let mut halvings = 0;
    while leaves.len() < lambda_l {
        halvings += 1;
        threshold = if halvings >= MAX_HALVINGS { 0.0 } else { threshold * 0.5 };
        leaves = condense(points2d, &order, threshold);
        if threshold == 0.0 {
            break;
        }
    }
    if leaves.len() < lambda_l {
        // only coincident points remain merged; split them apart
        leaves = order
            .iter()
            .map(|&i| Subcluster {
                cf: Cf::point(&points2d[i]),
                members: vec![i],
            })
            .collect();
        leaves.sort_by_key(|sc| sc.members[0]);
    }

    let cfs: Vec<Cf> = leaves.iter().map(|s| s.cf).collect();
    let cluster_of_leaf = ward_agglomerate(&cfs, lambda_l);
    let mut raw = vec![0usize; n];
    for (sc, &c) in leaves.iter().zip(&cluster_of_leaf) {
        for &i in &sc.members {
            raw[i] = c;
        }
    }
    let mut relabel = vec![0 as LandmarkLabel; lambda_l];
    let mut next = 0;
    Ok(raw
        .iter()
        .map(|&c| {
            if relabel[c] == 0 {
                next += 1;
                relabel[c] = next;
            }
            relabel[c]
        })
        .collect())
}
