//! Landmark map data model, its binary container and the reconstruction
//! import schema.

pub(crate) mod container;
mod import;

pub use container::{deserialize_map, serialize_map, MAP_MAGIC, MAP_VERSION};
pub use import::{load_reconstruction, Frame, Keypoint2D, Observation, ReconPoint, Reconstruction};

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};

pub type LandmarkLabel = u32;

/// Descriptor norms must be within this of 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u64),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("linkage error: {0}")]
    LinkageError(String),
    #[error("descriptor dimension mismatch: expected {expected}, found {found}")]
    DescriptorDimMismatch { expected: usize, found: usize },
    #[error("descriptor norm {norm} is not within 1e-3 of unit")]
    DescriptorNorm { norm: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which world axis is vertical. Ground projection drops it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpAxis {
    X,
    Y,
    #[default]
    Z,
}

impl UpAxis {
    pub fn index(self) -> usize {
        match self {
            UpAxis::X => 0,
            UpAxis::Y => 1,
            UpAxis::Z => 2,
        }
    }

    pub fn from_index(i: u64) -> Option<Self> {
        match i {
            0 => Some(UpAxis::X),
            1 => Some(UpAxis::Y),
            2 => Some(UpAxis::Z),
            _ => None,
        }
    }

    pub fn unit(self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.index()] = 1.0;
        v
    }
}

/// Map-building hyperparameters, snapshotted into every map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuilderConfig {
    /// Number of landmarks.
    pub lambda_l: usize,
    /// Neighbor count for spatial-consistency filtering.
    pub lambda_n: usize,
    /// Covariance-trace threshold for filtering (m²).
    pub lambda_v: f64,
    /// Pruning radius in pixels.
    pub lambda_o: f64,
    pub up_axis: UpAxis,
    pub enable_pruning: bool,
    pub seed: u64,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        BuilderConfig {
            lambda_l: 16,
            lambda_n: 20,
            lambda_v: 0.2,
            lambda_o: 25.0,
            up_axis: UpAxis::Z,
            enable_pruning: true,
            seed: 0,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambda_l < 1 {
            return Err("lambda_l must be >= 1".into());
        }
        if self.lambda_n < 1 {
            return Err("lambda_n must be >= 1".into());
        }
        if !(self.lambda_v > 0.0) {
            return Err("lambda_v must be > 0".into());
        }
        if !(self.lambda_o >= 0.0) {
            return Err("lambda_o must be >= 0".into());
        }
        Ok(())
    }
}

/// A retained map point with its selected descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: u64,
    pub position: Vector3<f32>,
    pub descriptor: Vec<f32>,
    pub track: Vec<Observation>,
    pub landmark_label: LandmarkLabel,
}

impl MapPoint {
    pub fn position_f64(&self) -> Vector3<f64> {
        self.position.cast()
    }
}

/// Per-landmark camera onto which landmark points are projected at match time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualReferenceFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub source_frame_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub label: LandmarkLabel,
    /// Sorted ascending.
    pub point_ids: Vec<u64>,
    pub vrf: VirtualReferenceFrame,
    /// Mean ground-plane projection of the landmark's points (m).
    pub centroid2d: Vector2<f32>,
}

/// Symmetric, irreflexive landmark adjacency. `neighbors[l - 1]` is sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Covisibility {
    neighbors: Vec<Vec<LandmarkLabel>>,
}

impl Covisibility {
    pub fn new(num_landmarks: usize) -> Self {
        Covisibility {
            neighbors: vec![Vec::new(); num_landmarks],
        }
    }

    /// Builds from undirected edges; self-loops and duplicates are dropped.
    pub fn from_edges(num_landmarks: usize, edges: impl IntoIterator<Item = (LandmarkLabel, LandmarkLabel)>) -> Self {
        let mut sets = vec![BTreeSet::new(); num_landmarks];
        for (a, b) in edges {
            if a != b {
                sets[a as usize - 1].insert(b);
                sets[b as usize - 1].insert(a);
            }
        }
        Covisibility {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn neighbors(&self, label: LandmarkLabel) -> &[LandmarkLabel] {
        self.neighbors
            .get((label as usize).wrapping_sub(1))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, a: LandmarkLabel, b: LandmarkLabel) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Edges with `a < b`, in ascending order.
    pub fn edges(&self) -> Vec<(LandmarkLabel, LandmarkLabel)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            let a = i as LandmarkLabel + 1;
            out.extend(ns.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    pub fn num_landmarks(&self) -> usize {
        self.neighbors.len()
    }
}

/// The compressed landmark map. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMap {
    /// `landmarks[i].label == i + 1`.
    pub landmarks: Vec<Landmark>,
    /// Sorted by id.
    pub points: Vec<MapPoint>,
    pub covisibility: Covisibility,
    pub build_config: BuilderConfig,
    pub descriptor_dim: usize,
}

impl SceneMap {
    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn landmark(&self, label: LandmarkLabel) -> Option<&Landmark> {
        let l = self.landmarks.get((label as usize).checked_sub(1)?)?;
        (l.label == label).then_some(l)
    }

    pub fn point(&self, id: u64) -> Option<&MapPoint> {
        self.points
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn landmark_points<'a>(&'a self, label: LandmarkLabel) -> impl Iterator<Item = &'a MapPoint> + 'a {
        self.landmark(label)
            .into_iter()
            .flat_map(move |l| l.point_ids.iter().filter_map(move |id| self.point(*id)))
    }

    /// Checks every structural invariant of the map.
    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: String| Err(MapError::InvariantViolation(m));
        let nl = self.landmarks.len();
        if nl == 0 {
            return bad("map has no landmarks".into());
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor dimension is zero".into());
        }
        for (i, l) in self.landmarks.iter().enumerate() {
            if l.label as usize != i + 1 {
                return bad(format!("landmark at index {i} has label {}", l.label));
            }
            if l.point_ids.is_empty() {
                return bad(format!("landmark {} has no points", l.label));
            }
            if !l.point_ids.windows(2).all(|w| w[0] < w[1]) {
                return bad(format!("landmark {} point ids not strictly ascending", l.label));
            }
            if !l.vrf.pose.is_finite() || l.vrf.intrinsics.validate().is_err() {
                return bad(format!("landmark {} has an invalid virtual reference frame", l.label));
            }
        }
        if !self.points.windows(2).all(|w| w[0].id < w[1].id) {
            return bad("point ids not strictly ascending".into());
        }
        for p in &self.points {
            if p.landmark_label == 0 || p.landmark_label as usize > nl {
                return bad(format!("point {} references absent landmark {}", p.id, p.landmark_label));
            }
            if p.track.is_empty() {
                return bad(format!("point {} has an empty track", p.id));
            }
            if p.descriptor.len() != self.descriptor_dim {
                return bad(format!("point {} descriptor has dimension {}", p.id, p.descriptor.len()));
            }
            let norm = descriptor_norm(&p.descriptor);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return bad(format!("point {} descriptor norm {norm}", p.id));
            }
            if !p.position.iter().all(|v| v.is_finite()) {
                return bad(format!("point {} has a non-finite position", p.id));
            }
        }
        // partition: each point listed by exactly its own landmark
        let mut listed = 0usize;
        for l in &self.landmarks {
            let mut vrf_sees = false;
            for id in &l.point_ids {
                let Some(p) = self.point(*id) else {
                    return bad(format!("landmark {} lists missing point {id}", l.label));
                };
                if p.landmark_label != l.label {
                    return bad(format!("point {id} listed by landmark {} but labeled {}", l.label, p.landmark_label));
                }
                vrf_sees |= p.track.iter().any(|o| o.frame_id == l.vrf.source_frame_id);
                listed += 1;
            }
            if !vrf_sees {
                return bad(format!("virtual reference frame of landmark {} observes none of its points", l.label));
            }
        }
        if listed != self.points.len() {
            return bad(format!("{} points but landmarks list {listed}", self.points.len()));
        }
        if self.covisibility.num_landmarks() != nl {
            return bad("covisibility size differs from landmark count".into());
        }
        for l in 1..=nl as LandmarkLabel {
            for &b in self.covisibility.neighbors(l) {
                if b == l || b as usize > nl || b == 0 || !self.covisibility.contains(b, l) {
                    return bad(format!("covisibility edge ({l}, {b}) is not symmetric/irreflexive"));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn descriptor_norm(d: &[f32]) -> f64 {
    d.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Scales a descriptor to unit norm in place (no-op for the zero vector).
pub fn normalize_descriptor(d: &mut [f32]) {
    let n = descriptor_norm(d);
    if n > 0.0 {
        d.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}
