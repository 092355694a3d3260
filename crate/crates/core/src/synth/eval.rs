use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::builder::filter_points;
use crate::geometry::Pose;
use crate::localizer::{LocalizationResult, LocalizationStatus};
use crate::map::{serialize_map, Reconstruction, SceneMap};

/// Success criterion: position error at most `position_m` and orientation
/// error at most `rotation_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub position_m: f64,
    pub rotation_deg: f64,
}

pub const DEFAULT_THRESHOLDS: [Threshold; 2] = [
    Threshold {
        position_m: 0.05,
        rotation_deg: 5.0,
    },
    Threshold {
        position_m: 0.25,
        rotation_deg: 2.0,
    },
];

/// JSON has no infinity; failed queries are written as `null`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub index: usize,
    pub status: LocalizationStatus,
    #[serde(with = "inf_as_null")]
    pub position_error_cm: f64,
    #[serde(with = "inf_as_null")]
    pub orientation_error_deg: f64,
    pub candidates_tried: usize,
    pub num_inliers: usize,
    pub refined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRatio {
    pub threshold: Threshold,
    pub ratio: f64,
}

/// Matcher invocations (candidates tried) per query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MatcherStats {
    pub mean: f64,
    pub median: f64,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub num_ref_frames_before: usize,
    pub num_vrfs: usize,
    pub num_points_before: usize,
    /// Points surviving the spatial-consistency filter.
    pub num_points_filtered: usize,
    pub num_points_after: usize,
    /// `num_points_after / num_points_filtered`.
    pub retention: f64,
    pub serialized_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_queries: usize,
    /// Lower median over all queries, failures counting as infinite.
    #[serde(with = "inf_as_null")]
    pub median_position_error_cm: f64,
    #[serde(with = "inf_as_null")]
    pub median_orientation_error_deg: f64,
    pub failure_rate: f64,
    pub success_ratios: Vec<SuccessRatio>,
    pub matcher_invocations: MatcherStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_stats: Option<MapStats>,
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn success_ratio(&self, t: Threshold) -> Option<f64> {
        self.success_ratios.iter().find(|s| s.threshold == t).map(|s| s.ratio)
    }
}

fn lower_median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs[(xs.len() - 1) / 2]
}

/// Scores localization results against ground-truth poses.
pub fn evaluate(results: &[LocalizationResult], gts: &[Pose], thresholds: &[Threshold]) -> Result<EvalReport, SynthError> {
    if results.len() != gts.len() {
        return Err(SynthError::LengthMismatch {
            results: results.len(),
            truths: gts.len(),
        });
    }
    let records: Vec<QueryRecord> = results
        .par_iter()
        .zip(gts)
        .enumerate()
        .map(|(index, (r, gt))| {
            let (pos, rot) = match (&r.status, &r.pose) {
                (LocalizationStatus::Localized, Some(p)) => {
                    (p.center_error(gt) * 100.0, p.rotation_error(gt).to_degrees())
                }
                _ => (f64::INFINITY, f64::INFINITY),
            };
            QueryRecord {
                index,
                status: r.status,
                position_error_cm: pos,
                orientation_error_deg: rot,
                candidates_tried: r.candidates_tried,
                num_inliers: r.num_inliers,
                refined: r.refined,
            }
        })
        .collect();
    let n = records.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let success_ratios = thresholds
        .iter()
        .map(|t| SuccessRatio {
            threshold: *t,
            ratio: frac(
                records
                    .iter()
                    .filter(|r| r.position_error_cm <= t.position_m * 100.0 && r.orientation_error_deg <= t.rotation_deg)
                    .count(),
            ),
        })
        .collect();
    let tried: Vec<f64> = records.iter().map(|r| r.candidates_tried as f64).collect();
    Ok(EvalReport {
        num_queries: n,
        median_position_error_cm: lower_median(records.iter().map(|r| r.position_error_cm).collect()),
        median_orientation_error_deg: lower_median(records.iter().map(|r| r.orientation_error_deg).collect()),
        failure_rate: frac(records.iter().filter(|r| r.status == LocalizationStatus::Failed).count()),
        success_ratios,
        matcher_invocations: MatcherStats {
            mean: if n == 0 { 0.0 } else { tried.iter().sum::<f64>() / n as f64 },
            median: lower_median(tried),
            max: records.iter().map(|r| r.candidates_tried).max().unwrap_or(0),
        },
        map_stats: None,
        records,
    })
}

/// Size accounting of a map against the reconstruction it was built from.
pub fn map_stats(before: &Reconstruction, after: &SceneMap) -> MapStats {
    let cfg = &after.build_config;
    let filtered = filter_points(before, cfg.lambda_n, cfg.lambda_v).len();
    MapStats {
        num_ref_frames_before: before.frames.len(),
        num_vrfs: after.landmarks.len(),
        num_points_before: before.points.len(),
        num_points_filtered: filtered,
        num_points_after: after.points.len(),
        retention: if filtered == 0 { 0.0 } else { after.points.len() as f64 / filtered as f64 },
        serialized_bytes: serialize_map(after).len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn localized(p: Pose) -> LocalizationResult {
        LocalizationResult {
            status: LocalizationStatus::Localized,
            pose: Some(p),
            used_landmark: Some(1),
            num_inliers: 100,
            candidates_tried: 1,
            refined: true,
            inliers: Vec::new(),
        }
    }

    fn poses(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::from_axis_angle(Vector3::new(0.1 * i as f64, 0.2, -0.3), Vector3::new(i as f64, 1.0, 2.0)))
            .collect()
    }

    #[test]
    fn exact_estimates() {
        let gts = poses(6);
        let results: Vec<_> = gts.iter().map(|p| localized(*p)).collect();
        let r = evaluate(&results, &gts, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.median_position_error_cm < 1e-9);
        assert!(r.median_orientation_error_deg < 1e-6);
        assert!(r.success_ratios.iter().all(|s| s.ratio == 1.0));
        assert_eq!(r.failure_rate, 0.0);
    }

    #[test]
    fn half_failed() {
        let gts = poses(8);
        let results: Vec<_> =
            gts.iter().enumerate().map(|(i, p)| if i % 2 == 0 { localized(*p) } else { LocalizationResult::failed(20) }).collect();
        let r = evaluate(&results, &gts, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.success_ratios.iter().all(|s| s.ratio == 0.5));
        assert!(r.median_position_error_cm < 1e-9);
        assert_eq!(r.failure_rate, 0.5);
        assert_eq!(r.matcher_invocations.max, 20);
        assert_eq!(r.matcher_invocations.median, 1.0);
    }

    #[test]
    fn uniform_perturbation() {
        let gts = poses(10);
        let results: Vec<_> = gts
            .iter()
            .enumerate()
            .map(|(i, gt)| {
                let axis = Vector3::new(1.0, i as f64, 2.0).normalize();
                let dir = Vector3::new(-(i as f64), 1.0, 0.5).normalize();
                // shift the camera center by 3 cm, rotate by 1 degree about it
                let c = gt.center() + 0.03 * dir;
                let rot = nalgebra::Rotation3::new(axis * 1f64.to_radians()).matrix() * gt.rotation;
                localized(Pose::new(rot, -(rot * c)))
            })
            .collect();
        let r = evaluate(&results, &gts, &DEFAULT_THRESHOLDS).unwrap();
        assert!((r.median_position_error_cm - 3.0).abs() < 1e-9);
        assert!((r.median_orientation_error_deg - 1.0).abs() < 1e-9);
        assert_eq!(r.success_ratio(DEFAULT_THRESHOLDS[0]), Some(1.0));
        assert_eq!(r.success_ratio(DEFAULT_THRESHOLDS[1]), Some(1.0));
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            evaluate(&[LocalizationResult::failed(1)], &[], &DEFAULT_THRESHOLDS),
            Err(SynthError::LengthMismatch { results: 1, truths: 0 })
        );
    }

    #[test]
    fn report_json_writes_failures_as_null() {
        let gts = poses(1);
        let r = evaluate(&[LocalizationResult::failed(2)], &gts, &DEFAULT_THRESHOLDS).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["median_position_error_cm"].is_null());
        assert!(v["records"][0]["orientation_error_deg"].is_null());
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
