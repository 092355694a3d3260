use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geometry::project;
use crate::map::{Frame, Observation, Reconstruction};

/// Why a point was discarded: its projection on an earlier frame fell within
/// the pruning radius of a point that was already kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneWitness {
    pub point_id: u64,
    /// Frame whose pass discarded the point.
    pub frame_id: u64,
    pub witness_point_id: u64,
    /// Earlier frame on which the two projections conflict.
    pub witness_frame_id: u64,
    pub distance_px: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneOutcome {
    /// Retained points with the observations that survive pruning.
    pub kept: BTreeMap<u64, Vec<Observation>>,
    pub removed: Vec<PruneWitness>,
    /// Frames in processing order: most landmark observations first.
    pub frame_order: Vec<u64>,
}

/// Frames observing any of `point_ids`, with the observations they hold,
/// ordered by descending observation count then ascending frame id.
pub fn frames_by_coverage(point_ids: &[u64], recon: &Reconstruction) -> Vec<(u64, Vec<(u64, Observation)>)> {
    let mut per_frame: BTreeMap<u64, Vec<(u64, Observation)>> = BTreeMap::new();
    for &pid in point_ids {
        for o in &recon.points[&pid].track {
            per_frame.entry(o.frame_id).or_default().push((pid, *o));
        }
    }
    let mut frames: Vec<_> = per_frame.into_iter().collect();
    for (_, obs) in &mut frames {
        obs.sort_by_key(|(_, o)| o.keypoint_index);
    }
    frames.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    frames
}

fn project_on(recon: &Reconstruction, frame: &Frame, pid: u64) -> Option<Vector2<f64>> {
    project(&frame.pose, recon.camera_of(frame), &recon.points[&pid].position)
}

/// Adaptive landmark-wise pruning. Frames are visited in coverage order;
/// the first frame keeps all its points. A later frame's not-yet-kept point
/// is discarded when, on some earlier frame, it projects visibly within
/// `lambda_o` px (strictly) of a visible projection of a point kept before
/// the current frame's pass. Later observations of kept points are dropped.
pub fn prune_landmark_points(point_ids: &[u64], recon: &Reconstruction, lambda_o: f64) -> PruneOutcome {
    let frames = frames_by_coverage(point_ids, recon);
    let frame_refs: Vec<&Frame> = frames.iter().map(|(id, _)| &recon.frames[id]).collect();
    let mut kept_order: Vec<u64> = Vec::new();
    let mut kept: BTreeMap<u64, Vec<Observation>> = BTreeMap::new();
    let mut discarded: HashSet<u64> = HashSet::new();
    let mut removed = Vec::new();
    // projections of kept_order[..] on each processed frame, filled lazily
    let mut cache: Vec<Vec<Option<Vector2<f64>>>> = vec![Vec::new(); frames.len()];

    for (i, (frame_id, obs)) in frames.iter().enumerate() {
        let snapshot = kept_order.len();
        for j in 0..i {
            while cache[j].len() < snapshot {
                let w = kept_order[cache[j].len()];
                cache[j].push(project_on(recon, frame_refs[j], w));
            }
        }
        let mut newly = Vec::new();
        for &(pid, o) in obs {
            if kept.contains_key(&pid) || discarded.contains(&pid) {
                continue;
            }
            let witness = (0..i).find_map(|j| {
                let p = project_on(recon, frame_refs[j], pid)?;
                cache[j][..snapshot].iter().enumerate().find_map(|(w, q)| {
                    let d = (p - (*q)?).norm();
                    (d < lambda_o).then(|| PruneWitness {
                        point_id: pid,
                        frame_id: *frame_id,
                        witness_point_id: kept_order[w],
                        witness_frame_id: frames[j].0,
                        distance_px: d,
                    })
                })
            });
            match witness {
                Some(w) => {
                    discarded.insert(pid);
                    removed.push(w);
                }
                None => newly.push((pid, o)),
            }
        }
        for (pid, o) in newly {
            if let std::collections::btree_map::Entry::Vacant(e) = kept.entry(pid) {
                e.insert(vec![o]);
                kept_order.push(pid);
            }
        }
    }
    PruneOutcome {
        kept,
        removed,
        frame_order: frames.into_iter().map(|(id, _)| id).collect(),
    }
}

/// Re-evaluates a witness against the reconstruction: both projections on the
/// witness frame are visible and strictly closer than `lambda_o`.
pub fn witness_holds(w: &PruneWitness, recon: &Reconstruction, lambda_o: f64) -> bool {
    let Some(frame) = recon.frames.get(&w.witness_frame_id) else {
        return false;
    };
    match (project_on(recon, frame, w.point_id), project_on(recon, frame, w.witness_point_id)) {
        (Some(a), Some(b)) => (a - b).norm() < lambda_o,
        _ => false,
    }
}
