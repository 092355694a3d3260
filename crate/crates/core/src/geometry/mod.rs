//! Camera model, rigid transforms and pose solvers shared by every stage.

mod camera;
mod epnp;
mod pose;
mod ransac;
mod refine;

pub use camera::{project, reprojection_error, CameraIntrinsics, Correspondence2D3D, MIN_DEPTH};
pub use epnp::epnp;
pub use pose::{rotation_angle, Pose};
pub use ransac::{ransac_pnp, RansacOutcome, RansacParams};
pub use refine::{refine_pose, robust_cost, RefineParams, Refinement};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("need at least {needed} correspondences, got {got}")]
    MinimalSampleUnavailable { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("no consensus: best hypothesis had {best} inliers")]
    NoConsensus { best: usize },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}
