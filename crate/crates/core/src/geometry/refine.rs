use nalgebra::{Matrix2x3, Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use super::pose::skew;
use super::{CameraIntrinsics, Correspondence2D3D, GeometryError, Pose, MIN_DEPTH};

/// Penalty added per correspondence that falls behind the camera.
const BEHIND_PENALTY_PX: f64 = 1e4;
const MAX_DAMPING_TRIES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub max_iters: usize,
    /// Huber threshold in pixels.
    pub huber_px: f64,
    /// Stop once the update step norm falls below this.
    pub convergence_eps: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            max_iters: 50,
            huber_px: 2.0,
            convergence_eps: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Normal equations stayed singular under every damping level; `pose`
    /// is the best iterate reached (the initial pose if none improved).
    pub degenerate: bool,
}

fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Total Huber-robustified reprojection cost.
pub fn robust_cost(pose: &Pose, corrs: &[Correspondence2D3D], k: &CameraIntrinsics, huber_px: f64) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let xc = pose.transform(&c.point3d);
            if xc.z <= MIN_DEPTH {
                return c.weight * huber(BEHIND_PENALTY_PX, huber_px);
            }
            let uv = k.project_unbounded(&xc).expect("depth checked");
            c.weight * huber((uv - c.point2d).norm(), huber_px)
        })
        .sum()
}

/// Robust Gauss-Newton on total reprojection error, switching to
/// Levenberg damping whenever an undamped step fails to reduce the cost.
/// The returned pose never has a higher robust cost than `init`.
pub fn refine_pose(
    init: &Pose,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    params: &RefineParams,
) -> Result<Refinement, GeometryError> {
    if corrs.len() < 4 {
        return Err(GeometryError::MinimalSampleUnavailable {
            needed: 4,
            got: corrs.len(),
        });
    }
    if !init.is_finite() {
        return Err(GeometryError::DegenerateConfiguration("non-finite initial pose"));
    }
    let delta = params.huber_px;
    let initial_cost = robust_cost(init, corrs, k, delta);
    let mut pose = *init;
    let mut cost = initial_cost;
    let mut lambda = 0.0;
    let mut iterations = 0;
    let mut degenerate = false;

    while iterations < params.max_iters {
        iterations += 1;
        let (h, g) = normal_equations(&pose, corrs, k, delta);
        if g.norm() == 0.0 {
            break;
        }
        let mut accepted = false;
        let mut solved_any = false;
        let mut small_step = false;
        for _ in 0..MAX_DAMPING_TRIES {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
                continue;
            };
            solved_any = true;
            if step.norm() < params.convergence_eps {
                small_step = true;
                break;
            }
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let candidate = pose.perturbed(&omega, &dt);
            let c = robust_cost(&candidate, corrs, k, delta);
            if c < cost {
                pose = candidate;
                cost = c;
                lambda *= 0.1;
                if lambda < 1e-9 {
                    lambda = 0.0;
                }
                accepted = true;
                if step.norm() < params.convergence_eps {
                    small_step = true;
                }
                break;
            }
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
        }
        if !solved_any {
            degenerate = true;
            break;
        }
        if !accepted || small_step {
            break;
        }
    }

    Ok(Refinement {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
        degenerate,
    })
}

/// IRLS normal equations `H dx = -g` for the left-perturbation
/// parameterization `(omega, delta_t)`.
fn normal_equations(
    pose: &Pose,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    delta: f64,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        if c.weight == 0.0 {
            continue;
        }
        let rx = pose.rotation * c.point3d;
        let xc = rx + pose.translation;
        if xc.z <= MIN_DEPTH {
            continue;
        }
        let iz = 1.0 / xc.z;
        let uv = k.project_unbounded(&xc).expect("depth checked");
        let e = uv - c.point2d;
        let r = e.norm();
        let w = c.weight * if r <= delta { 1.0 } else { delta / r };
        let dproj = Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * xc.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * xc.y * iz * iz,
        );
        let dx: SMatrix<f64, 3, 6> = {
            let mut m = SMatrix::<f64, 3, 6>::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
            m.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            m
        };
        let j = dproj * dx;
        h += j.transpose() * j * w;
        g += j.transpose() * e * w;
    }
    (h, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn setup(seed: u64, n: usize, noise_px: f64) -> (Pose, Vec<Correspondence2D3D>, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.1, -0.1, 4.0));
        let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
        let mut corrs = Vec::new();
        while corrs.len() < n {
            let x = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if let Some(mut uv) = project(&gt, &k(), &x) {
                if noise_px > 0.0 {
                    uv.x += noise.sample(&mut rng);
                    uv.y += noise.sample(&mut rng);
                }
                corrs.push(Correspondence2D3D::new(uv, x));
            }
        }
        // 2 cm / 1 degree perturbation
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let init = gt.perturbed(&(axis * 1f64.to_radians()), &Vector3::new(0.02, 0.0, 0.0));
        (gt, corrs, init)
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let (gt, corrs, _) = setup(1, 200, 0.0);
        let r = refine_pose(&gt, &corrs, &k(), &RefineParams::default()).unwrap();
        assert!(r.pose.rotation_error(&gt) < 1e-9);
        assert!((r.pose.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn converges_from_perturbation_noiseless() {
        let (gt, corrs, init) = setup(2, 200, 0.0);
        let r = refine_pose(&init, &corrs, &k(), &RefineParams::default()).unwrap();
        assert!(r.pose.rotation_error(&gt) < 1e-6);
        assert!((r.pose.translation - gt.translation).norm() < 1e-7);
        assert!(!r.degenerate);
    }

    #[test]
    fn reduces_cost_with_noise() {
        let (_, corrs, init) = setup(3, 200, 1.0);
        let p = RefineParams::default();
        let r = refine_pose(&init, &corrs, &k(), &p).unwrap();
        assert!(r.final_cost < r.initial_cost);
        assert!((robust_cost(&init, &corrs, &k(), p.huber_px) - r.initial_cost).abs() < 1e-9);
    }

    #[test]
    fn never_increases_cost_from_random_starts() {
        let (_, corrs, _) = setup(4, 50, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = RefineParams {
            max_iters: 5,
            ..Default::default()
        };
        for _ in 0..50 {
            let init = Pose::from_axis_angle(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..6.0)),
            );
            let r = refine_pose(&init, &corrs, &k(), &p).unwrap();
            assert!(r.final_cost <= r.initial_cost);
        }
    }

    #[test]
    fn points_behind_camera_leave_pose_unchanged() {
        // no Jacobian rows, zero gradient
        let corrs: Vec<_> = (0..5)
            .map(|i| Correspondence2D3D::new(nalgebra::Vector2::new(10.0, 10.0), Vector3::new(i as f64, 0.0, -3.0)))
            .collect();
        let r = refine_pose(&Pose::identity(), &corrs, &k(), &RefineParams::default()).unwrap();
        assert_eq!(r.pose, Pose::identity());
    }

    #[test]
    fn needs_four_correspondences() {
        let (_, corrs, init) = setup(5, 3, 0.0);
        assert!(refine_pose(&init, &corrs, &k(), &RefineParams::default()).is_err());
    }
}
