//! Reconstruction import: one JSON document holding cameras, posed frames
//! with their keypoints, and triangulated points with tracks.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{descriptor_norm, normalize_descriptor, MapError};
use crate::geometry::{CameraIntrinsics, Pose};

/// Descriptors within this of unit norm are renormalized; others are rejected.
const IMPORT_NORM_TOLERANCE: f64 = 1e-3;
/// Already unit at single precision; rescaling would only perturb low bits.
const UNIT_SLACK: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub u: f64,
    pub v: f64,
    pub score: f64,
    #[serde(rename = "desc")]
    pub descriptor: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub frame_id: u64,
    pub keypoint_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub camera_id: u64,
    pub pose: Pose,
    pub keypoints: Vec<Keypoint2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconPoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub track: Vec<Observation>,
}

/// Cross-linked multi-view reconstruction. All tables are keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub descriptor_dim: usize,
    pub cameras: BTreeMap<u64, CameraIntrinsics>,
    pub frames: BTreeMap<u64, Frame>,
    pub points: BTreeMap<u64, ReconPoint>,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    id: u64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    id: u64,
    camera_id: u64,
    q: [f64; 4],
    t: [f64; 3],
    keypoints: Vec<Keypoint2D>,
}

#[derive(Serialize, Deserialize)]
struct PointJson {
    id: u64,
    xyz: [f64; 3],
    track: Vec<(u64, usize)>,
}

#[derive(Serialize, Deserialize)]
struct ReconstructionJson {
    version: u32,
    descriptor_dim: usize,
    cameras: Vec<CameraJson>,
    frames: Vec<FrameJson>,
    points: Vec<PointJson>,
}

impl Reconstruction {
    pub fn frame(&self, id: u64) -> Option<&Frame> {
        self.frames.get(&id)
    }

    pub fn camera_of(&self, frame: &Frame) -> &CameraIntrinsics {
        &self.cameras[&frame.camera_id]
    }

    pub fn keypoint(&self, o: &Observation) -> Option<&Keypoint2D> {
        self.frames.get(&o.frame_id)?.keypoints.get(o.keypoint_index)
    }

    pub fn num_keypoints(&self) -> usize {
        self.frames.values().map(|f| f.keypoints.len()).sum()
    }

    /// Parses the import format, renormalizes descriptors and checks linkage.
    pub fn from_json_str(s: &str) -> Result<Self, MapError> {
        let doc: ReconstructionJson = serde_json::from_str(s).map_err(|e| MapError::ParseError(e.to_string()))?;
        if doc.version != 1 {
            return Err(MapError::ParseError(format!("unsupported import version {}", doc.version)));
        }
        let mut cameras = BTreeMap::new();
        for c in doc.cameras {
            let k = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
                .map_err(|e| MapError::ParseError(e.to_string()))?;
            if cameras.insert(c.id, k).is_some() {
                return Err(MapError::ParseError(format!("duplicate camera id {}", c.id)));
            }
        }
        let mut frames = BTreeMap::new();
        for f in doc.frames {
            let pose = Pose::from_quaternion(f.q, Vector3::from(f.t));
            if !pose.is_finite() {
                return Err(MapError::ParseError(format!("frame {} has a non-finite pose", f.id)));
            }
            let frame = Frame {
                id: f.id,
                camera_id: f.camera_id,
                pose,
                keypoints: f.keypoints,
            };
            if frames.insert(f.id, frame).is_some() {
                return Err(MapError::ParseError(format!("duplicate frame id {}", f.id)));
            }
        }
        let mut points = BTreeMap::new();
        for p in doc.points {
            let point = ReconPoint {
                id: p.id,
                position: Vector3::from(p.xyz),
                track: p
                    .track
                    .into_iter()
                    .map(|(frame_id, keypoint_index)| Observation {
                        frame_id,
                        keypoint_index,
                    })
                    .collect(),
            };
            if points.insert(p.id, point).is_some() {
                return Err(MapError::ParseError(format!("duplicate point id {}", p.id)));
            }
        }
        let mut recon = Reconstruction {
            descriptor_dim: doc.descriptor_dim,
            cameras,
            frames,
            points,
        };
        recon.normalize_descriptors()?;
        recon.validate()?;
        Ok(recon)
    }

    pub fn to_json_string(&self) -> String {
        let doc = ReconstructionJson {
            version: 1,
            descriptor_dim: self.descriptor_dim,
            cameras: self
                .cameras
                .iter()
                .map(|(&id, k)| CameraJson {
                    id,
                    fx: k.fx,
                    fy: k.fy,
                    cx: k.cx,
                    cy: k.cy,
                    width: k.width,
                    height: k.height,
                })
                .collect(),
            frames: self
                .frames
                .values()
                .map(|f| FrameJson {
                    id: f.id,
                    camera_id: f.camera_id,
                    q: f.pose.quaternion(),
                    t: f.pose.translation.into(),
                    keypoints: f.keypoints.clone(),
                })
                .collect(),
            points: self
                .points
                .values()
                .map(|p| PointJson {
                    id: p.id,
                    xyz: p.position.into(),
                    track: p.track.iter().map(|o| (o.frame_id, o.keypoint_index)).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("reconstruction serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    fn normalize_descriptors(&mut self) -> Result<(), MapError> {
        let dim = self.descriptor_dim;
        for f in self.frames.values_mut() {
            for kp in &mut f.keypoints {
                if kp.descriptor.len() != dim {
                    return Err(MapError::DescriptorDimMismatch {
                        expected: dim,
                        found: kp.descriptor.len(),
                    });
                }
                let norm = descriptor_norm(&kp.descriptor);
                if !((norm - 1.0).abs() <= IMPORT_NORM_TOLERANCE) {
                    return Err(MapError::DescriptorNorm { norm });
                }
                if (norm - 1.0).abs() > UNIT_SLACK {
                    normalize_descriptor(&mut kp.descriptor);
                }
            }
        }
        Ok(())
    }

    /// Checks cross-references between frames, keypoints, cameras and tracks.
    pub fn validate(&self) -> Result<(), MapError> {
        let link = |m: String| Err(MapError::LinkageError(m));
        if self.descriptor_dim == 0 {
            return Err(MapError::ParseError("descriptor_dim must be positive".into()));
        }
        for f in self.frames.values() {
            if !self.cameras.contains_key(&f.camera_id) {
                return link(format!("frame {} references missing camera {}", f.id, f.camera_id));
            }
            for (i, kp) in f.keypoints.iter().enumerate() {
                if kp.descriptor.len() != self.descriptor_dim {
                    return Err(MapError::DescriptorDimMismatch {
                        expected: self.descriptor_dim,
                        found: kp.descriptor.len(),
                    });
                }
                if !(0.0..=1.0).contains(&kp.score) {
                    return Err(MapError::ParseError(format!("keypoint {i} of frame {} has score {}", f.id, kp.score)));
                }
                if let Some(pid) = kp.point3d_id {
                    let Some(p) = self.points.get(&pid) else {
                        return link(format!("keypoint {i} of frame {} references missing point {pid}", f.id));
                    };
                    let back = Observation {
                        frame_id: f.id,
                        keypoint_index: i,
                    };
                    if !p.track.contains(&back) {
                        return link(format!("point {pid} track lacks frame {} keypoint {i}", f.id));
                    }
                }
            }
        }
        for p in self.points.values() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(MapError::ParseError(format!("point {} has a non-finite position", p.id)));
            }
            for o in &p.track {
                let Some(f) = self.frames.get(&o.frame_id) else {
                    return link(format!("point {} track references missing frame {}", p.id, o.frame_id));
                };
                let Some(kp) = f.keypoints.get(o.keypoint_index) else {
                    return link(format!(
                        "point {} track references keypoint {} of frame {} ({} keypoints)",
                        p.id,
                        o.keypoint_index,
                        o.frame_id,
                        f.keypoints.len()
                    ));
                };
                if kp.point3d_id != Some(p.id) {
                    return link(format!(
                        "frame {} keypoint {} does not link back to point {}",
                        o.frame_id, o.keypoint_index, p.id
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates a reconstruction in the JSON import format.
pub fn load_reconstruction(path: impl AsRef<Path>) -> Result<Reconstruction, MapError> {
    let s = std::fs::read_to_string(path)?;
    Reconstruction::from_json_str(&s)
}
