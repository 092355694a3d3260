use std::collections::HashMap;

use nalgebra::Vector2;

use crate::geometry::{project, CameraIntrinsics, Correspondence2D3D, Pose};
use crate::map::{Keypoint2D, Landmark, MapPoint, SceneMap};

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn passes_ratio(best: f64, second: f64, ratio: f64) -> bool {
    second.is_infinite() || best <= ratio * second
}

/// Mutual nearest neighbors in descriptor space with a ratio test on the
/// query side. Returns `(query index, reference index)` pairs in query order.
pub fn mutual_nearest(query: &[&[f32]], refs: &[&[f32]], ratio: f64) -> Vec<(usize, usize)> {
    if query.is_empty() || refs.is_empty() {
        return Vec::new();
    }
    let mut q_best = vec![(f64::INFINITY, usize::MAX, f64::INFINITY); query.len()];
    let mut r_best = vec![(f64::INFINITY, usize::MAX); refs.len()];
    for (qi, q) in query.iter().enumerate() {
        for (ri, r) in refs.iter().enumerate() {
            let d = dist(q, r);
            let qb = &mut q_best[qi];
            if d < qb.0 {
                *qb = (d, ri, qb.0);
            } else if d < qb.2 {
                qb.2 = d;
            }
            if d < r_best[ri].0 {
                r_best[ri] = (d, qi);
            }
        }
    }
    q_best
        .iter()
        .enumerate()
        .filter(|(qi, (d1, ri, d2))| r_best[*ri].1 == *qi && passes_ratio(*d1, *d2, ratio))
        .map(|(qi, (_, ri, _))| (qi, *ri))
        .collect()
}

/// Matches query keypoints against the landmark's points that are visible
/// from its reference frame.
pub fn match_landmark(query: &[&Keypoint2D], landmark: &Landmark, map: &SceneMap, ratio: f64) -> Vec<Correspondence2D3D> {
    let vrf = &landmark.vrf;
    let visible: Vec<&MapPoint> = map
        .landmark_points(landmark.label)
        .filter(|p| project(&vrf.pose, &vrf.intrinsics, &p.position_f64()).is_some())
        .collect();
    let qd: Vec<&[f32]> = query.iter().map(|k| k.descriptor.as_slice()).collect();
    let rd: Vec<&[f32]> = visible.iter().map(|p| p.descriptor.as_slice()).collect();
    mutual_nearest(&qd, &rd, ratio)
        .into_iter()
        .map(|(qi, ri)| Correspondence2D3D::new(Vector2::new(query[qi].u, query[qi].v), visible[ri].position_f64()))
        .collect()
}

/// Guided matching: each keypoint considers map points whose projection
/// under `pose` lies within `window` px, takes the closest descriptor if it
/// passes the ratio test, and each map point keeps only its best keypoint.
pub fn match_by_projection(
    pose: &Pose,
    kps: &[Keypoint2D],
    points: &[&MapPoint],
    k: &CameraIntrinsics,
    window: f64,
    ratio: f64,
) -> Vec<Correspondence2D3D> {
    let cell = window.max(1.0);
    let key = |uv: &Vector2<f64>| ((uv.x / cell).floor() as i64, (uv.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<(usize, Vector2<f64>)>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        if let Some(uv) = project(pose, k, &p.position_f64()) {
            grid.entry(key(&uv)).or_default().push((i, uv));
        }
    }
    // best keypoint per map point: (distance, keypoint index)
    let mut claimed: HashMap<usize, (f64, usize)> = HashMap::new();
    for (qi, kp) in kps.iter().enumerate() {
        let uv = Vector2::new(kp.u, kp.v);
        let (cx, cy) = key(&uv);
        let (mut best, mut second) = ((f64::INFINITY, usize::MAX), f64::INFINITY);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &(pi, puv) in bucket {
                    if (puv - uv).norm() > window {
                        continue;
                    }
                    let d = dist(&kp.descriptor, &points[pi].descriptor);
                    if d < best.0 || (d == best.0 && pi < best.1) {
                        second = second.min(best.0);
                        best = (d, pi);
                    } else {
                        second = second.min(d);
                    }
                }
            }
        }
        if best.1 == usize::MAX || !passes_ratio(best.0, second, ratio) {
            continue;
        }
        let e = claimed.entry(best.1).or_insert((best.0, qi));
        if (best.0, qi) < *e {
            *e = (best.0, qi);
        }
    }
    let mut pairs: Vec<(usize, usize)> = claimed.into_iter().map(|(pi, (_, qi))| (qi, pi)).collect();
    pairs.sort_unstable();
    pairs
        .into_iter()
        .map(|(qi, pi)| Correspondence2D3D::new(Vector2::new(kps[qi].u, kps[qi].v), points[pi].position_f64()))
        .collect()
}
