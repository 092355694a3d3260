//! EPnP: the world points are expressed as barycentric combinations of a few
//! control points, whose camera-frame coordinates span the null space of a
//! linear system built from the image measurements.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use super::{CameraIntrinsics, Correspondence2D3D, GeometryError, Pose};

/// Eigenvalue ratio below which the point cloud is treated as planar.
const PLANAR_RATIO: f64 = 1e-8;
/// Eigenvalue ratio below which the point cloud is treated as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;
const BETA_GN_ITERS: usize = 10;

struct ControlFrame {
    control_world: Vec<Vector3<f64>>,
    alphas: Vec<[f64; 4]>,
}

impl ControlFrame {
    fn count(&self) -> usize {
        self.control_world.len()
    }
}

/// Pose minimizing the EPnP algebraic objective for at least four
/// correspondences. Correspondence weights scale the measurement rows.
pub fn epnp(corrs: &[Correspondence2D3D], k: &CameraIntrinsics) -> Result<Pose, GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::MinimalSampleUnavailable { needed: 4, got: n });
    }
    if corrs.iter().any(|c| !(c.weight >= 0.0) || !c.point3d.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::DegenerateConfiguration("non-finite point or negative weight"));
    }
    let active = corrs.iter().filter(|c| c.weight > 0.0).count();
    if active < 4 {
        return Err(GeometryError::MinimalSampleUnavailable { needed: 4, got: active });
    }

    let frame = control_frame(corrs)?;
    let nc = frame.count();
    let m = measurement_matrix(corrs, k, &frame);
    let kernel = null_space(&m, if nc == 4 { 4 } else { 3 });
    let pairs = control_pairs(nc);
    let dw2: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (frame.control_world[i] - frame.control_world[j]).norm_squared())
        .collect();
    let kdiff: Vec<Vec<Vector3<f64>>> = kernel
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|&(i, j)| block(v, i) - block(v, j))
                .collect()
        })
        .collect();

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    candidates.push(betas_n1(&kdiff, &dw2, kernel.len()));
    if kernel.len() >= 2 {
        if let Some(b) = betas_n2(&kdiff, &dw2, kernel.len()) {
            candidates.push(b);
        }
    }
    if kernel.len() >= 3 && pairs.len() >= 6 {
        if let Some(b) = betas_n3(&kdiff, &dw2, kernel.len()) {
            candidates.push(b);
        }
    }
    let refined: Vec<Vec<f64>> = candidates
        .iter()
        .map(|b| gauss_newton_betas(b.clone(), &kdiff, &dw2))
        .collect();
    candidates.extend(refined);

    let mut best: Option<(f64, Pose)> = None;
    for betas in &candidates {
        if let Some((pose, err)) = pose_from_betas(betas, &kernel, &frame, corrs, k) {
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, pose));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or(GeometryError::DegenerateConfiguration("no valid control-point solution"))
}

fn control_frame(corrs: &[Correspondence2D3D]) -> Result<ControlFrame, GeometryError> {
    let wsum: f64 = corrs.iter().map(|c| c.weight).sum();
    let centroid = corrs.iter().map(|c| c.point3d * c.weight).sum::<Vector3<f64>>() / wsum;
    let mut cov = Matrix3::zeros();
    for c in corrs {
        let d = c.point3d - centroid;
        cov += d * d.transpose() * c.weight;
    }
    cov /= wsum;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    if !(vals[0] > 1e-24 * (1.0 + centroid.norm_squared())) {
        return Err(GeometryError::DegenerateConfiguration("coincident 3D points"));
    }
    if vals[1] < COLLINEAR_RATIO * vals[0] {
        return Err(GeometryError::DegenerateConfiguration("collinear 3D points"));
    }
    let nc = if vals[2] < PLANAR_RATIO * vals[0] { 3 } else { 4 };

    let scales: Vec<f64> = vals.iter().map(|v| v.sqrt()).collect();
    let mut control_world = vec![centroid];
    for j in 0..nc - 1 {
        control_world.push(centroid + axes[j] * scales[j]);
    }
    let alphas = corrs
        .iter()
        .map(|c| {
            let d = c.point3d - centroid;
            let mut a = [0.0; 4];
            let mut rest = 1.0;
            for j in 0..nc - 1 {
                a[j + 1] = axes[j].dot(&d) / scales[j];
                rest -= a[j + 1];
            }
            a[0] = rest;
            a
        })
        .collect();
    Ok(ControlFrame {
        control_world,
        alphas,
    })
}

fn measurement_matrix(corrs: &[Correspondence2D3D], k: &CameraIntrinsics, frame: &ControlFrame) -> DMatrix<f64> {
    let nc = frame.count();
    let cols = 3 * nc;
    // Padding with zero rows keeps the full right singular basis available
    // for small samples.
    let rows = (2 * corrs.len()).max(cols);
    let mut m = DMatrix::zeros(rows, cols);
    for (i, (c, a)) in corrs.iter().zip(&frame.alphas).enumerate() {
        let s = c.weight.sqrt();
        let xn = k.normalize(&c.point2d);
        for j in 0..nc {
            let aj = a[j] * s;
            m[(2 * i, 3 * j)] = aj;
            m[(2 * i, 3 * j + 2)] = -xn.x * aj;
            m[(2 * i + 1, 3 * j + 1)] = aj;
            m[(2 * i + 1, 3 * j + 2)] = -xn.y * aj;
        }
    }
    m
}

/// Right singular vectors for the `count` smallest singular values, smallest first.
fn null_space(m: &DMatrix<f64>, count: usize) -> Vec<DVector<f64>> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    idx.iter()
        .take(count)
        .map(|&i| v_t.row(i).transpose().into_owned())
        .collect()
}

fn control_pairs(nc: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..nc {
        for j in i + 1..nc {
            out.push((i, j));
        }
    }
    out
}

#[inline]
fn block(v: &DVector<f64>, j: usize) -> Vector3<f64> {
    Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
}

fn betas_n1(kdiff: &[Vec<Vector3<f64>>], dw2: &[f64], dims: usize) -> Vec<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, d) in kdiff[0].iter().enumerate() {
        num += d.norm() * dw2[p].sqrt();
        den += d.norm_squared();
    }
    let mut b = vec![0.0; dims];
    b[0] = if den > 0.0 { num / den } else { 0.0 };
    b
}

fn betas_n2(kdiff: &[Vec<Vector3<f64>>], dw2: &[f64], dims: usize) -> Option<Vec<f64>> {
    let np = dw2.len();
    let mut l = DMatrix::zeros(np, 3);
    for p in 0..np {
        let (a, b) = (&kdiff[0][p], &kdiff[1][p]);
        l[(p, 0)] = a.dot(a);
        l[(p, 1)] = 2.0 * a.dot(b);
        l[(p, 2)] = b.dot(b);
    }
    let x = l.svd(true, true).solve(&DVector::from_column_slice(dw2), 1e-14).ok()?;
    let b1 = x[0].abs().sqrt();
    if b1 == 0.0 {
        return None;
    }
    let b2 = x[2].abs().sqrt() * x[1].signum();
    let mut out = vec![0.0; dims];
    out[0] = b1;
    out[1] = b2;
    Some(out)
}

fn betas_n3(kdiff: &[Vec<Vector3<f64>>], dw2: &[f64], dims: usize) -> Option<Vec<f64>> {
    let np = dw2.len();
    let mut l = DMatrix::zeros(np, 6);
    for p in 0..np {
        let (a, b, c) = (&kdiff[0][p], &kdiff[1][p], &kdiff[2][p]);
        l[(p, 0)] = a.dot(a);
        l[(p, 1)] = 2.0 * a.dot(b);
        l[(p, 2)] = 2.0 * a.dot(c);
        l[(p, 3)] = b.dot(b);
        l[(p, 4)] = 2.0 * b.dot(c);
        l[(p, 5)] = c.dot(c);
    }
    let x = l.svd(true, true).solve(&DVector::from_column_slice(dw2), 1e-14).ok()?;
    let b1 = x[0].abs().sqrt();
    if b1 == 0.0 {
        return None;
    }
    let mut out = vec![0.0; dims];
    out[0] = b1;
    out[1] = x[3].abs().sqrt() * x[1].signum();
    out[2] = x[5].abs().sqrt() * x[2].signum();
    Some(out)
}

/// Minimizes the control-point distance residuals over the kernel coefficients.
fn gauss_newton_betas(mut betas: Vec<f64>, kdiff: &[Vec<Vector3<f64>>], dw2: &[f64]) -> Vec<f64> {
    let dims = betas.len();
    let np = dw2.len();
    for _ in 0..BETA_GN_ITERS {
        let mut jtj = DMatrix::<f64>::zeros(dims, dims);
        let mut jtr = DVector::<f64>::zeros(dims);
        let mut row = vec![0.0; dims];
        for p in 0..np {
            let d: Vector3<f64> = (0..dims).map(|k| kdiff[k][p] * betas[k]).sum();
            let res = d.norm_squared() - dw2[p];
            for k in 0..dims {
                row[k] = 2.0 * d.dot(&kdiff[k][p]);
            }
            for a in 0..dims {
                jtr[a] -= row[a] * res;
                for b in 0..dims {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        let step = match jtj.clone().cholesky() {
            Some(c) => c.solve(&jtr),
            None => match jtj.svd(true, true).solve(&jtr, 1e-12) {
                Ok(s) => s,
                Err(_) => break,
            },
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        for k in 0..dims {
            betas[k] += step[k];
        }
        if step.norm() < 1e-14 {
            break;
        }
    }
    betas
}

fn pose_from_betas(
    betas: &[f64],
    kernel: &[DVector<f64>],
    frame: &ControlFrame,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
) -> Option<(Pose, f64)> {
    if !betas.iter().all(|b| b.is_finite()) {
        return None;
    }
    let nc = frame.count();
    let mut control_cam: Vec<Vector3<f64>> = (0..nc)
        .map(|j| kernel.iter().zip(betas).map(|(v, b)| block(v, j) * *b).sum())
        .collect();
    let mut cam: Vec<Vector3<f64>> = frame
        .alphas
        .iter()
        .map(|a| (0..nc).map(|j| control_cam[j] * a[j]).sum())
        .collect();
    let weighted_depth: f64 = cam.iter().zip(corrs).map(|(p, c)| p.z * c.weight).sum();
    if weighted_depth < 0.0 {
        control_cam.iter_mut().for_each(|c| *c = -*c);
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    let pose = procrustes(corrs, &cam)?;
    let mut err = 0.0;
    for c in corrs {
        let e = super::reprojection_error(&pose, k, c);
        err += c.weight * if e.is_finite() { e * e } else { 1e12 };
    }
    Some((pose, err))
}

/// Rigid transform aligning world points with their camera-frame estimates.
pub(crate) fn procrustes(corrs: &[Correspondence2D3D], cam: &[Vector3<f64>]) -> Option<Pose> {
    let wsum: f64 = corrs.iter().map(|c| c.weight).sum();
    let cw = corrs.iter().map(|c| c.point3d * c.weight).sum::<Vector3<f64>>() / wsum;
    let cc = corrs.iter().zip(cam).map(|(c, p)| p * c.weight).sum::<Vector3<f64>>() / wsum;
    let mut h = Matrix3::zeros();
    for (c, p) in corrs.iter().zip(cam) {
        h += (p - cc) * (c.point3d - cw).transpose() * c.weight;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let t = cc - r * cw;
    let pose = Pose::new(r, t);
    pose.is_finite().then_some(pose)
}
