//! Reconstruction to landmark map: spatial filtering, ground-plane
//! clustering, descriptor and reference-frame selection, pruning and the
//! covisibility graph.

mod birch;
mod filter;
mod prune;

pub use birch::{cluster_landmarks, BRANCHING_FACTOR, MAX_LEAF_ENTRIES};
pub use filter::{filter_points, neighbor_spread};
pub use prune::{frames_by_coverage, prune_landmark_points, witness_holds, PruneOutcome, PruneWitness};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{
    BuilderConfig, Covisibility, Keypoint2D, Landmark, LandmarkLabel, MapError, MapPoint, Observation,
    Reconstruction, SceneMap, UpAxis, VirtualReferenceFrame,
};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("need at least {needed} points for clustering, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid builder configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Drops the vertical coordinate.
pub fn project_to_ground(x: &Vector3<f64>, up: UpAxis) -> Vector2<f64> {
    match up {
        UpAxis::X => Vector2::new(x.y, x.z),
        UpAxis::Y => Vector2::new(x.x, x.z),
        UpAxis::Z => Vector2::new(x.x, x.y),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Index of the member descriptor with the smallest median Euclidean distance
/// to the others. Exact ties go to the lowest `(frame_id, keypoint_index)`.
pub fn select_descriptor(members: &[(Observation, &[f32])]) -> usize {
    assert!(!members.is_empty(), "descriptor selection needs at least one member");
    let mut best: Option<(f64, Observation, usize)> = None;
    let mut dists = Vec::with_capacity(members.len());
    for (i, (oi, di)) in members.iter().enumerate() {
        dists.clear();
        for (j, (_, dj)) in members.iter().enumerate() {
            if i != j {
                let d2: f64 = di.iter().zip(*dj).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                dists.push(d2.sqrt());
            }
        }
        let med = if dists.is_empty() { 0.0 } else { median(&mut dists) };
        let better = match &best {
            None => true,
            Some((bm, bo, _)) => med < *bm || (med == *bm && oi < bo),
        };
        if better {
            best = Some((med, *oi, i));
        }
    }
    best.unwrap().2
}

/// Picks the frame observing the largest share of the landmark's points and
/// returns it as the landmark's reference frame with that share.
pub fn select_vrf(point_ids: &[u64], recon: &Reconstruction) -> (VirtualReferenceFrame, f64) {
    let mut counts: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for &pid in point_ids {
        for o in &recon.points[&pid].track {
            counts.entry(o.frame_id).or_default().insert(pid);
        }
    }
    let (frame_id, seen) = counts
        .iter()
        .fold(None::<(u64, usize)>, |best, (&f, s)| match best {
            Some((_, n)) if n >= s.len() => best,
            _ => Some((f, s.len())),
        })
        .expect("landmark points have tracks");
    let frame = &recon.frames[&frame_id];
    (
        VirtualReferenceFrame {
            intrinsics: *recon.camera_of(frame),
            pose: frame.pose,
            source_frame_id: frame_id,
        },
        seen as f64 / point_ids.len() as f64,
    )
}

/// Per-keypoint recognition targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub frame_id: u64,
    pub keypoints: Vec<Keypoint2D>,
    /// 0 marks keypoints without a retained map point.
    pub labels: Vec<LandmarkLabel>,
}

/// Labels every keypoint of every frame with the landmark of its retained map
/// point, or 0 when it has none (never triangulated, filtered or pruned).
pub fn assign_training_labels(recon: &Reconstruction, map: &SceneMap) -> Vec<TrainingSample> {
    recon
        .frames
        .values()
        .map(|f| TrainingSample {
            frame_id: f.id,
            keypoints: f.keypoints.clone(),
            labels: f
                .keypoints
                .iter()
                .map(|kp| {
                    kp.point3d_id
                        .and_then(|id| map.point(id))
                        .map_or(0, |p| p.landmark_label)
                })
                .collect(),
        })
        .collect()
}

/// Counts collected while building, for statistics and audits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub num_input_points: usize,
    pub num_after_filter: usize,
    pub num_after_pruning: usize,
    pub num_input_frames: usize,
    /// Coverage share of each landmark's reference frame, by label.
    pub vrf_coverage: Vec<f64>,
    pub witnesses: Vec<PruneWitness>,
}

struct LandmarkBuild {
    landmark: Landmark,
    points: Vec<MapPoint>,
    coverage: f64,
    witnesses: Vec<PruneWitness>,
}

fn build_landmark(label: LandmarkLabel, ids: &[u64], recon: &Reconstruction, cfg: &BuilderConfig) -> LandmarkBuild {
    let (vrf, coverage) = select_vrf(ids, recon);
    let (tracks, witnesses): (BTreeMap<u64, Vec<Observation>>, _) = if cfg.enable_pruning {
        let out = prune_landmark_points(ids, recon, cfg.lambda_o);
        (out.kept, out.removed)
    } else {
        (ids.iter().map(|&id| (id, recon.points[&id].track.clone())).collect(), Vec::new())
    };
    let mut centroid = Vector2::zeros();
    let points: Vec<MapPoint> = tracks
        .into_iter()
        .map(|(id, track)| {
            let rp = &recon.points[&id];
            let mut full: Vec<Observation> = rp.track.clone();
            full.sort();
            let members: Vec<(Observation, &[f32])> = full
                .iter()
                .map(|o| (*o, recon.keypoint(o).expect("validated linkage").descriptor.as_slice()))
                .collect();
            let descriptor = members[select_descriptor(&members)].1.to_vec();
            centroid += project_to_ground(&rp.position, cfg.up_axis);
            MapPoint {
                id,
                position: rp.position.cast::<f32>(),
                descriptor,
                track,
                landmark_label: label,
            }
        })
        .collect();
    centroid /= points.len() as f64;
    LandmarkBuild {
        landmark: Landmark {
            label,
            point_ids: points.iter().map(|p| p.id).collect(),
            vrf,
            centroid2d: centroid.cast::<f32>(),
        },
        points,
        coverage,
        witnesses,
    }
}

/// Runs the full map-building pipeline.
pub fn build_map(recon: &Reconstruction, cfg: &BuilderConfig) -> Result<SceneMap, BuildError> {
    build_map_with_report(recon, cfg).map(|(m, _)| m)
}

pub fn build_map_with_report(recon: &Reconstruction, cfg: &BuilderConfig) -> Result<(SceneMap, BuildReport), BuildError> {
    cfg.validate().map_err(BuildError::InvalidConfig)?;
    recon.validate()?;
    let retained = filter_points(recon, cfg.lambda_n, cfg.lambda_v);
    if retained.len() < cfg.lambda_l {
        return Err(BuildError::TooFewPoints {
            needed: cfg.lambda_l,
            got: retained.len(),
        });
    }
    let ground: Vec<Vector2<f64>> = retained
        .iter()
        .map(|id| project_to_ground(&recon.points[id].position, cfg.up_axis))
        .collect();
    let labels = cluster_landmarks(&ground, cfg.lambda_l, cfg.seed)?;
    let mut members: Vec<Vec<u64>> = vec![Vec::new(); cfg.lambda_l];
    for (id, l) in retained.iter().zip(&labels) {
        members[*l as usize - 1].push(*id);
    }

    let built: Vec<LandmarkBuild> = members
        .par_iter()
        .enumerate()
        .map(|(i, ids)| build_landmark(i as LandmarkLabel + 1, ids, recon, cfg))
        .collect();

    let mut landmarks = Vec::with_capacity(built.len());
    let mut points = Vec::new();
    let mut report = BuildReport {
        num_input_points: recon.points.len(),
        num_after_filter: retained.len(),
        num_input_frames: recon.frames.len(),
        ..Default::default()
    };
    for b in built {
        landmarks.push(b.landmark);
        points.extend(b.points);
        report.vrf_coverage.push(b.coverage);
        report.witnesses.extend(b.witnesses);
    }
    points.sort_by_key(|p| p.id);
    report.num_after_pruning = points.len();

    // covisibility from every reference frame that saw a retained point
    let mut per_frame: BTreeMap<u64, BTreeSet<LandmarkLabel>> = BTreeMap::new();
    for p in &points {
        for o in &recon.points[&p.id].track {
            per_frame.entry(o.frame_id).or_default().insert(p.landmark_label);
        }
    }
    let mut edges = Vec::new();
    for ls in per_frame.values() {
        let ls: Vec<_> = ls.iter().copied().collect();
        for (i, a) in ls.iter().enumerate() {
            edges.extend(ls[i + 1..].iter().map(|b| (*a, *b)));
        }
    }

    let map = SceneMap {
        covisibility: Covisibility::from_edges(landmarks.len(), edges),
        landmarks,
        points,
        build_config: *cfg,
        descriptor_dim: recon.descriptor_dim,
    };
    map.validate()?;
    Ok((map, report))
}
