use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::refine::{refine_pose, RefineParams};
use super::{epnp, reprojection_error, CameraIntrinsics, Correspondence2D3D, GeometryError, Pose};

/// Hypotheses are fit on six correspondences when available: EPnP's kernel
/// is one-dimensional there, so a clean sample yields the exact pose.
const SAMPLE_SIZE: usize = 6;
const LOCAL_OPT_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RansacParams {
    pub max_iters: usize,
    pub inlier_px_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            max_iters: 2048,
            inlier_px_threshold: 8.0,
            confidence: 0.9999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: Pose,
    pub inlier_mask: Vec<bool>,
    pub num_inliers: usize,
}

fn consensus(pose: &Pose, corrs: &[Correspondence2D3D], k: &CameraIntrinsics, thr: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(corrs.len());
    let mut count = 0;
    let mut score = 0.0;
    for c in corrs {
        let e = reprojection_error(pose, k, c);
        let inlier = e <= thr;
        mask.push(inlier);
        if inlier {
            count += 1;
            score += e * e;
        } else {
            score += thr * thr;
        }
    }
    (mask, count, score)
}

fn select(corrs: &[Correspondence2D3D], mask: &[bool]) -> Vec<Correspondence2D3D> {
    corrs
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| *c)
        .collect()
}

fn required_iterations(inlier_ratio: f64, sample: usize, confidence: f64, cap: usize) -> usize {
    let p_good = inlier_ratio.powi(sample as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return cap;
    }
    let needed = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if needed.is_finite() {
        (needed.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// EPnP inside RANSAC with adaptive termination. The winning consensus set
/// is re-fit (EPnP, then a robust nonlinear polish) and the returned mask
/// is recomputed under the final pose. Deterministic for a given seed.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacOutcome, GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::MinimalSampleUnavailable { needed: 4, got: n });
    }
    let thr = params.inlier_px_threshold;
    let sample_size = n.min(SAMPLE_SIZE);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64, Pose)> = None;
    let mut budget = params.max_iters.max(1);
    let mut sample = Vec::with_capacity(sample_size);

    let mut iter = 0;
    while iter < budget {
        iter += 1;
        sample.clear();
        sample.extend(
            rand::seq::index::sample(&mut rng, n, sample_size)
                .iter()
                .map(|i| corrs[i]),
        );
        let Ok(pose) = epnp(&sample, k) else {
            continue;
        };
        let (_, count, score) = consensus(&pose, corrs, k, thr);
        let better = match &best {
            None => true,
            Some((bc, bs, _)) => count > *bc || (count == *bc && score < *bs),
        };
        if better {
            best = Some((count, score, pose));
            budget = budget.min(required_iterations(
                count as f64 / n as f64,
                sample_size,
                params.confidence,
                params.max_iters.max(1),
            ));
        }
    }

    let Some((mut count, mut score, mut pose)) = best else {
        return Err(GeometryError::NoConsensus { best: 0 });
    };
    if count < 4 {
        return Err(GeometryError::NoConsensus { best: count });
    }

    let mut mask = consensus(&pose, corrs, k, thr).0;
    for _ in 0..LOCAL_OPT_ROUNDS {
        let Ok(refit) = epnp(&select(corrs, &mask), k) else {
            break;
        };
        let (m, c, s) = consensus(&refit, corrs, k, thr);
        if c > count || (c == count && s < score) {
            pose = refit;
            mask = m;
            count = c;
            score = s;
        } else {
            break;
        }
    }

    let polish = RefineParams {
        huber_px: thr * 0.5,
        ..RefineParams::default()
    };
    if let Ok(r) = refine_pose(&pose, &select(corrs, &mask), k, &polish) {
        let (m, c, _) = consensus(&r.pose, corrs, k, thr);
        if c >= count {
            pose = r.pose;
            mask = m;
            count = c;
        }
    }

    Ok(RansacOutcome {
        pose,
        inlier_mask: mask,
        num_inliers: count,
    })
}
