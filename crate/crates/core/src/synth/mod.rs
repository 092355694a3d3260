//! Synthetic scenes standing in for multi-view reconstructions, query
//! rendering with controllable noise, and the evaluation harness.

mod eval;

pub use eval::{evaluate, map_stats, EvalReport, MapStats, MatcherStats, QueryRecord, SuccessRatio, Threshold, DEFAULT_THRESHOLDS};

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::map::{normalize_descriptor, Frame, Keypoint2D, Observation, ReconPoint, Reconstruction};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("{results} results but {truths} ground-truth poses")]
    LengthMismatch { results: usize, truths: usize },
}

/// Parameters of a synthetic tabletop-style scene: point blobs on the ground
/// plane seen by a ring of reference cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_clusters: usize,
    pub points_per_cluster: usize,
    /// Horizontal standard deviation of each blob (m).
    pub cluster_spread_m: f64,
    /// Points are spread uniformly over this height above the ground.
    pub cluster_height_m: f64,
    /// Side of the square holding the blob centers (m).
    pub scene_extent_m: f64,
    pub num_ref_frames: usize,
    pub descriptor_dim: usize,
    /// Per-component Gaussian noise added to observed descriptors.
    pub descriptor_noise_sigma: f64,
    /// Share of a point descriptor aligned with its blob's base descriptor.
    pub descriptor_coherence: f64,
    pub outlier_keypoint_fraction: f64,
    /// A point is seen only by cameras within this angle of its normal.
    pub visibility_cone_deg: f64,
    pub camera_radius_m: f64,
    pub camera_height_m: f64,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_clusters: 16,
            points_per_cluster: 300,
            cluster_spread_m: 0.08,
            cluster_height_m: 0.4,
            scene_extent_m: 2.0,
            num_ref_frames: 24,
            descriptor_dim: 128,
            descriptor_noise_sigma: 0.0,
            descriptor_coherence: 0.8,
            outlier_keypoint_fraction: 0.2,
            visibility_cone_deg: 75.0,
            camera_radius_m: 2.6,
            camera_height_m: 1.5,
            intrinsics: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.num_clusters < 1 || self.points_per_cluster < 1 || self.num_ref_frames < 1 || self.descriptor_dim < 1 {
            return bad("counts must be >= 1");
        }
        if !(0.0..1.0).contains(&self.outlier_keypoint_fraction) {
            return bad("outlier_keypoint_fraction must be in [0, 1)");
        }
        if !(self.descriptor_noise_sigma >= 0.0) {
            return bad("descriptor_noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.descriptor_coherence) {
            return bad("descriptor_coherence must be in [0, 1]");
        }
        if !(self.visibility_cone_deg > 0.0 && self.visibility_cone_deg <= 180.0) {
            return bad("visibility_cone_deg must be in (0, 180]");
        }
        let lengths = [self.cluster_spread_m, self.cluster_height_m];
        if lengths.iter().any(|x| !(*x >= 0.0)) {
            return bad("cluster spread and height must be >= 0");
        }
        let positive = [self.scene_extent_m, self.camera_radius_m, self.camera_height_m];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return bad("scene extent and camera placement must be positive");
        }
        self.intrinsics.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }
}

/// What the generator knows and the reconstruction does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Generating blob (0-based) of every point.
    pub cluster_of: BTreeMap<u64, u32>,
    pub cluster_centers: Vec<Vector2<f64>>,
    pub normals: BTreeMap<u64, Vector3<f64>>,
    /// Noise-free descriptor of every point.
    pub descriptors: BTreeMap<u64, Vec<f32>>,
    pub frame_poses: BTreeMap<u64, Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub recon: Reconstruction,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let mut d: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    normalize_descriptor(&mut d);
    d
}

fn noisy_descriptor(d: &[f32], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return d.to_vec();
    }
    let v: Vec<f64> = d.iter().map(|&x| x as f64 + sigma * gaussian(rng)).collect();
    to_unit_f32(&v)
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn sees(pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>, normal: &Vector3<f64>, cos_cone: f64) -> Option<Vector2<f64>> {
    let uv = project(pose, k, x)?;
    let to_cam = (pose.center() - x).normalize();
    (normal.dot(&to_cam) >= cos_cone).then_some(uv)
}

/// Noise applied when rendering a query view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub descriptor_sigma: f64,
    pub outlier_fraction: f64,
    pub pixel_noise_px: f64,
    /// Views seeing fewer scene points are flagged.
    pub min_visible: usize,
}

impl Default for QuerySpec {
    fn default() -> Self {
        QuerySpec {
            descriptor_sigma: 0.05,
            outlier_fraction: 0.2,
            pixel_noise_px: 1.0,
            min_visible: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedQuery {
    /// Inlier keypoints carry the id of the point they observe.
    pub keypoints: Vec<Keypoint2D>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub num_visible: usize,
    pub insufficient_visibility: bool,
}

/// Shared observation model: visible points in id order with noisy
/// descriptors and pixels, then random outliers, then a shuffle.
fn render_view(
    scene_points: &[(u64, Vector3<f64>)],
    truth: &GroundTruth,
    pose: &Pose,
    k: &CameraIntrinsics,
    cos_cone: f64,
    q: &QuerySpec,
    rng: &mut impl Rng,
) -> Vec<Keypoint2D> {
    let mut kps = Vec::new();
    for (id, x) in scene_points {
        let Some(uv) = sees(pose, k, x, &truth.normals[id], cos_cone) else {
            continue;
        };
        let (du, dv) = if q.pixel_noise_px > 0.0 {
            (q.pixel_noise_px * gaussian(rng), q.pixel_noise_px * gaussian(rng))
        } else {
            (0.0, 0.0)
        };
        kps.push(Keypoint2D {
            u: uv.x + du,
            v: uv.y + dv,
            score: 1.0,
            descriptor: noisy_descriptor(&truth.descriptors[id], q.descriptor_sigma, rng),
            point3d_id: Some(*id),
        });
    }
    let f = q.outlier_fraction;
    let outliers = (f * kps.len() as f64 / (1.0 - f)).round() as usize;
    let dim = truth.descriptors.values().next().map_or(1, Vec::len);
    for _ in 0..outliers {
        kps.push(Keypoint2D {
            u: rng.random_range(0.0..k.width as f64),
            v: rng.random_range(0.0..k.height as f64),
            score: 1.0,
            descriptor: to_unit_f32(&random_direction(rng, dim)),
            point3d_id: None,
        });
    }
    kps.shuffle(rng);
    kps
}

fn ring_pose(spec: &SceneSpec, angle: f64, radius: f64, height: f64, target_xy: Vector2<f64>) -> Pose {
    let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
    let target = Vector3::new(target_xy.x, target_xy.y, spec.cluster_height_m / 2.0);
    Pose::look_at(eye, target, Vector3::z())
}

/// Generates a reconstruction and its ground truth; identical specs give
/// bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics;
    let g = (spec.num_clusters as f64).sqrt().ceil() as usize;
    let cell = spec.scene_extent_m / g as f64;
    let half = spec.scene_extent_m / 2.0;
    let centers: Vec<Vector2<f64>> = (0..spec.num_clusters)
        .map(|i| {
            let jx = rng.random_range(-0.15..0.15);
            let jy = rng.random_range(-0.15..0.15);
            Vector2::new(
                -half + ((i % g) as f64 + 0.5 + jx) * cell,
                -half + ((i / g) as f64 + 0.5 + jy) * cell,
            )
        })
        .collect();
    let bases: Vec<Vec<f64>> = (0..spec.num_clusters).map(|_| random_direction(&mut rng, spec.descriptor_dim)).collect();
    let rho = spec.descriptor_coherence;
    let rest = (1.0 - rho * rho).sqrt();

    let mut truth = GroundTruth {
        cluster_of: BTreeMap::new(),
        cluster_centers: centers.clone(),
        normals: BTreeMap::new(),
        descriptors: BTreeMap::new(),
        frame_poses: BTreeMap::new(),
    };
    let mut candidates = Vec::new();
    let mut next_id = 1u64;
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.points_per_cluster {
            let x = Vector3::new(
                quantize(center.x + spec.cluster_spread_m * gaussian(&mut rng)),
                quantize(center.y + spec.cluster_spread_m * gaussian(&mut rng)),
                quantize(rng.random_range(0.0..=1.0) * spec.cluster_height_m),
            );
            let n = random_direction(&mut rng, 3);
            let normal = Vector3::new(n[0], n[1], n[2].abs());
            let r = random_direction(&mut rng, spec.descriptor_dim);
            let d: Vec<f64> = bases[c].iter().zip(&r).map(|(b, r)| rho * b + rest * r).collect();
            truth.cluster_of.insert(next_id, c as u32);
            truth.normals.insert(next_id, normal);
            truth.descriptors.insert(next_id, to_unit_f32(&d));
            candidates.push((next_id, x));
            next_id += 1;
        }
    }

    let step = std::f64::consts::TAU / spec.num_ref_frames as f64;
    let poses: Vec<Pose> = (0..spec.num_ref_frames)
        .map(|f| {
            let angle = f as f64 * step + rng.random_range(-0.25..0.25) * step;
            let radius = spec.camera_radius_m * rng.random_range(0.95..1.05);
            let height = spec.camera_height_m * rng.random_range(0.9..1.1);
            let target = Vector2::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)) * spec.scene_extent_m;
            ring_pose(spec, angle, radius, height, target)
        })
        .collect();

    let cos_cone = spec.visibility_cone_deg.to_radians().cos();
    let mut seen_by = vec![0usize; candidates.len()];
    for pose in &poses {
        for (i, (id, x)) in candidates.iter().enumerate() {
            if sees(pose, &k, x, &truth.normals[id], cos_cone).is_some() {
                seen_by[i] += 1;
            }
        }
    }
    let scene_points: Vec<(u64, Vector3<f64>)> =
        candidates.iter().zip(&seen_by).filter(|(_, &n)| n >= 2).map(|(p, _)| *p).collect();
    let kept: std::collections::BTreeSet<u64> = scene_points.iter().map(|(id, _)| *id).collect();
    truth.cluster_of.retain(|id, _| kept.contains(id));
    truth.normals.retain(|id, _| kept.contains(id));
    truth.descriptors.retain(|id, _| kept.contains(id));

    let obs_noise = QuerySpec {
        descriptor_sigma: spec.descriptor_noise_sigma,
        outlier_fraction: spec.outlier_keypoint_fraction,
        pixel_noise_px: 0.0,
        min_visible: 0,
    };
    let mut points: BTreeMap<u64, ReconPoint> = scene_points
        .iter()
        .map(|(id, x)| {
            (
                *id,
                ReconPoint {
                    id: *id,
                    position: *x,
                    track: Vec::new(),
                },
            )
        })
        .collect();
    let mut frames = BTreeMap::new();
    for (i, pose) in poses.iter().enumerate() {
        let frame_id = i as u64 + 1;
        let keypoints = render_view(&scene_points, &truth, pose, &k, cos_cone, &obs_noise, &mut rng);
        for (kp_idx, kp) in keypoints.iter().enumerate() {
            if let Some(pid) = kp.point3d_id {
                points.get_mut(&pid).expect("rendered point exists").track.push(Observation {
                    frame_id,
                    keypoint_index: kp_idx,
                });
            }
        }
        truth.frame_poses.insert(frame_id, *pose);
        frames.insert(
            frame_id,
            Frame {
                id: frame_id,
                camera_id: 0,
                pose: *pose,
                keypoints,
            },
        );
    }
    let recon = Reconstruction {
        descriptor_dim: spec.descriptor_dim,
        cameras: [(0, k)].into(),
        frames,
        points,
    };
    Ok(SyntheticScene {
        spec: spec.clone(),
        recon,
        truth,
    })
}

/// Renders the scene from `pose` with the reference observation model plus
/// the noise in `q`.
pub fn render_query(scene: &SyntheticScene, pose: &Pose, q: &QuerySpec, seed: u64) -> RenderedQuery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_points: Vec<(u64, Vector3<f64>)> = scene.recon.points.values().map(|p| (p.id, p.position)).collect();
    let k = scene.spec.intrinsics;
    let cos_cone = scene.spec.visibility_cone_deg.to_radians().cos();
    let keypoints = render_view(&scene_points, &scene.truth, pose, &k, cos_cone, q, &mut rng);
    let num_visible = keypoints.iter().filter(|kp| kp.point3d_id.is_some()).count();
    RenderedQuery {
        keypoints,
        pose: *pose,
        intrinsics: k,
        num_visible,
        insufficient_visibility: num_visible < q.min_visible,
    }
}

/// A random viewpoint on the camera ring, somewhat closer to the scene than
/// the reference frames.
pub fn sample_query_pose(spec: &SceneSpec, rng: &mut impl Rng) -> Pose {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = spec.camera_radius_m * rng.random_range(0.7..1.0);
    let height = spec.camera_height_m * rng.random_range(0.8..1.2);
    let target = Vector2::new(rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)) * spec.scene_extent_m;
    ring_pose(spec, angle, radius, height, target)
}

/// `count` queries from random ring viewpoints; viewpoints flagged for
/// insufficient visibility are redrawn.
pub fn sample_queries(scene: &SyntheticScene, count: usize, q: &QuerySpec, seed: u64) -> Vec<RenderedQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < count * 100 + 100 {
        attempts += 1;
        let pose = sample_query_pose(&scene.spec, &mut rng);
        let r = render_query(scene, &pose, q, rng.random());
        if !r.insufficient_visibility {
            out.push(r);
        }
    }
    out
}
