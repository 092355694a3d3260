//! Localization by landmark recognition: drop keypoints recognized as
//! outliers, rank the recognized landmarks, verify them one at a time with
//! landmark-wise matching and robust PnP, then refine with covisible points.

mod matching;

pub use matching::{match_landmark, match_by_projection, mutual_nearest};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    ransac_pnp, refine_pose, reprojection_error, CameraIntrinsics, Correspondence2D3D, Pose, RansacParams,
    RefineParams,
};
use crate::map::{Keypoint2D, LandmarkLabel, SceneMap};
use crate::recognition::{recognize, RecognitionError, RecognitionOutput, RecognizerModel};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("invalid localizer parameters: {0}")]
    InvalidParams(String),
    #[error("model and map disagree: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Recognition(#[from] RecognitionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerParams {
    /// Keypoints whose outlier probability exceeds this are dropped.
    pub lambda_s: f64,
    /// Inliers needed to accept a candidate landmark.
    pub lambda_i: usize,
    /// Maximum number of candidate landmarks verified.
    pub lambda_c: usize,
    pub ratio_test: f64,
    pub refine: bool,
    pub ransac: RansacParams,
    pub refine_window_px: f64,
}

impl Default for LocalizerParams {
    fn default() -> Self {
        LocalizerParams {
            lambda_s: 0.9,
            lambda_i: 64,
            lambda_c: 20,
            ratio_test: 0.9,
            refine: true,
            ransac: RansacParams::default(),
            refine_window_px: 24.0,
        }
    }
}

impl LocalizerParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_s > 0.0 && self.lambda_s <= 1.0) {
            return Err("lambda_s must be in (0, 1]".into());
        }
        if self.lambda_i < 4 {
            return Err("lambda_i must be >= 4".into());
        }
        if self.lambda_c < 1 {
            return Err("lambda_c must be >= 1".into());
        }
        if !(self.ratio_test > 0.0 && self.ratio_test <= 1.0) {
            return Err("ratio_test must be in (0, 1]".into());
        }
        if !(self.refine_window_px >= 0.0) {
            return Err("refine_window_px must be >= 0".into());
        }
        if !(self.ransac.inlier_px_threshold > 0.0) || self.ransac.max_iters == 0 {
            return Err("RANSAC threshold and iteration budget must be positive".into());
        }
        if !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return Err("RANSAC confidence must be in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizationStatus {
    Localized,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub status: LocalizationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used_landmark: Option<LandmarkLabel>,
    /// Inliers of the accepted candidate's RANSAC.
    pub num_inliers: usize,
    pub candidates_tried: usize,
    pub refined: bool,
    /// Inlier correspondences of the accepted candidate.
    #[serde(skip)]
    pub inliers: Vec<Correspondence2D3D>,
}

impl LocalizationResult {
    pub fn failed(candidates_tried: usize) -> Self {
        LocalizationResult {
            status: LocalizationStatus::Failed,
            pose: None,
            used_landmark: None,
            num_inliers: 0,
            candidates_tried,
            refined: false,
            inliers: Vec::new(),
        }
    }

    pub fn is_localized(&self) -> bool {
        self.status == LocalizationStatus::Localized
    }
}

/// Keypoints that survive outlier removal, in their original order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Survivors {
    pub indices: Vec<usize>,
    /// Best landmark label (outlier class excluded).
    pub labels: Vec<LandmarkLabel>,
    /// Probability of that label.
    pub confidences: Vec<f64>,
}

/// Drops keypoint `i` iff `P(label 0) > lambda_s`; survivors take their most
/// probable landmark label, ties to the lower label.
pub fn remove_outliers(rec: &RecognitionOutput, lambda_s: f64) -> Survivors {
    let mut out = Survivors::default();
    for (i, row) in rec.confidences.row_iter().enumerate() {
        if row[0] > lambda_s || row.len() < 2 {
            continue;
        }
        let mut best = 1;
        for j in 2..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.indices.push(i);
        out.labels.push(best as LandmarkLabel);
        out.confidences.push(row[best]);
    }
    out
}

/// Labels ordered by mean confidence (descending), then by keypoint count
/// (descending), then by label; at most `lambda_c` of them.
pub fn rank_landmarks(labels: &[LandmarkLabel], confidences: &[f64], lambda_c: usize) -> Vec<LandmarkLabel> {
    let mut groups: BTreeMap<LandmarkLabel, (f64, usize)> = BTreeMap::new();
    for (&l, &c) in labels.iter().zip(confidences) {
        let g = groups.entry(l).or_insert((0.0, 0));
        g.0 += c;
        g.1 += 1;
    }
    let mut ranked: Vec<(LandmarkLabel, f64, usize)> = groups.into_iter().map(|(l, (s, n))| (l, s / n as f64, n)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(lambda_c).map(|(l, _, _)| l).collect()
}

fn candidate_seed(seed: u64, label: LandmarkLabel) -> u64 {
    seed ^ (label as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn count_inliers(pose: &Pose, corrs: &[Correspondence2D3D], k: &CameraIntrinsics, thr: f64) -> usize {
    corrs.iter().filter(|c| reprojection_error(pose, k, c) <= thr).count()
}

/// Floor of the residual cut used by [`trimmed_refine`], in pixels.
const MIN_TRIM_PX: f64 = 0.5;

/// Refines on `inliers`, then repeatedly drops correspondences whose
/// residual exceeds three robust standard deviations (estimated from the
/// median residual) and refines again.
fn trimmed_refine(init: &Pose, mut inliers: Vec<Correspondence2D3D>, k: &CameraIntrinsics) -> Pose {
    let params = RefineParams::default();
    let mut pose = refine_pose(init, &inliers, k, &params).map_or(*init, |x| x.pose);
    for _ in 0..3 {
        let res: Vec<f64> = inliers.iter().map(|c| reprojection_error(&pose, k, c)).collect();
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = (3.0 * 1.4826 * sorted[sorted.len() / 2]).max(MIN_TRIM_PX);
        let kept: Vec<_> = inliers.iter().zip(&res).filter(|(_, r)| **r <= cut).map(|(c, _)| *c).collect();
        if kept.len() == inliers.len() || kept.len() < 6 {
            break;
        }
        inliers = kept;
        match refine_pose(&pose, &inliers, k, &params) {
            Ok(r) => pose = r.pose,
            Err(_) => break,
        }
    }
    pose
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovisRefinement {
    pub pose: Pose,
    /// Inliers of the enlarged match set under `pose` (the initial count
    /// when refinement was rejected).
    pub num_inliers: usize,
    pub refined: bool,
}

/// Enlarges the match set with points of the used landmark and its
/// covisibility neighbors found near their projection under `t_init`, then
/// re-estimates. Falls back to `t_init` when the enlarged set is no larger,
/// yields fewer inliers, or loses any of `initial_inliers`.
pub fn covis_refine(
    t_init: &Pose,
    used_landmark: LandmarkLabel,
    initial_inliers: &[Correspondence2D3D],
    kps: &[Keypoint2D],
    map: &SceneMap,
    k: &CameraIntrinsics,
    params: &LocalizerParams,
) -> CovisRefinement {
    let keep = CovisRefinement {
        pose: *t_init,
        num_inliers: initial_inliers.len(),
        refined: false,
    };
    let mut labels = vec![used_landmark];
    labels.extend_from_slice(map.covisibility.neighbors(used_landmark));
    let points: Vec<_> = labels.iter().flat_map(|&l| map.landmark_points(l)).collect();
    let corrs = match_by_projection(t_init, kps, &points, k, params.refine_window_px, params.ratio_test);
    if corrs.len() <= initial_inliers.len() || corrs.len() < 4 {
        return keep;
    }
    let thr = params.ransac.inlier_px_threshold;
    let ransac = RansacParams {
        seed: candidate_seed(params.ransac.seed, 0),
        ..params.ransac
    };
    let Ok(r) = ransac_pnp(&corrs, k, &ransac) else {
        return keep;
    };
    let inl: Vec<_> = corrs.iter().zip(&r.inlier_mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
    let pose = trimmed_refine(&r.pose, inl, k);
    let n = count_inliers(&pose, &corrs, k, thr);
    let initial_kept = count_inliers(&pose, initial_inliers, k, thr) == initial_inliers.len();
    if n < initial_inliers.len() || !initial_kept || !pose.is_finite() {
        return keep;
    }
    CovisRefinement {
        pose,
        num_inliers: n,
        refined: true,
    }
}

/// Runs the full query pipeline for one image.
pub fn progressive_localize(
    kps: &[Keypoint2D],
    model: &RecognizerModel,
    map: &SceneMap,
    k: &CameraIntrinsics,
    params: &LocalizerParams,
) -> Result<LocalizationResult, LocalizeError> {
    params.validate().map_err(LocalizeError::InvalidParams)?;
    if model.num_classes != map.num_landmarks() + 1 || model.descriptor_dim != map.descriptor_dim {
        return Err(LocalizeError::Incompatible(format!(
            "model has {} classes of dimension {}, map has {} landmarks of dimension {}",
            model.num_classes,
            model.descriptor_dim,
            map.num_landmarks(),
            map.descriptor_dim
        )));
    }
    let rec = recognize(kps, model, (k.width, k.height))?;
    Ok(localize_recognized(kps, &rec, map, k, params))
}

/// Steps after recognition, for callers that supply their own recognition output.
pub fn localize_recognized(
    kps: &[Keypoint2D],
    rec: &RecognitionOutput,
    map: &SceneMap,
    k: &CameraIntrinsics,
    params: &LocalizerParams,
) -> LocalizationResult {
    let surv = remove_outliers(rec, params.lambda_s);
    let ranked = rank_landmarks(&surv.labels, &surv.confidences, params.lambda_c);
    let mut tried = 0;
    for label in ranked {
        let Some(landmark) = map.landmark(label) else {
            continue;
        };
        tried += 1;
        let query: Vec<&Keypoint2D> = surv
            .indices
            .iter()
            .zip(&surv.labels)
            .filter(|(_, &l)| l == label)
            .map(|(&i, _)| &kps[i])
            .collect();
        let corrs = match_landmark(&query, landmark, map, params.ratio_test);
        if corrs.len() < params.lambda_i {
            continue;
        }
        let ransac = RansacParams {
            seed: candidate_seed(params.ransac.seed, label),
            ..params.ransac
        };
        let Ok(r) = ransac_pnp(&corrs, k, &ransac) else {
            continue;
        };
        if r.num_inliers < params.lambda_i {
            continue;
        }
        let inliers: Vec<_> = corrs.iter().zip(&r.inlier_mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
        let (pose, refined) = if params.refine {
            let c = covis_refine(&r.pose, label, &inliers, kps, map, k, params);
            (c.pose, c.refined)
        } else {
            (r.pose, false)
        };
        return LocalizationResult {
            status: LocalizationStatus::Localized,
            pose: Some(pose),
            used_landmark: Some(label),
            num_inliers: r.num_inliers,
            candidates_tried: tried,
            refined,
            inliers,
        };
    }
    LocalizationResult::failed(tried)
}

/// Localizes many queries in parallel; results keep the input order.
pub fn localize_batch(
    queries: &[(Vec<Keypoint2D>, CameraIntrinsics)],
    model: &RecognizerModel,
    map: &SceneMap,
    params: &LocalizerParams,
) -> Vec<Result<LocalizationResult, LocalizeError>> {
    queries
        .par_iter()
        .map(|(kps, k)| progressive_localize(kps, model, map, k, params))
        .collect()
}
