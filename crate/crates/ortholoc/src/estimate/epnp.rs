//! EPnP pose solver: expresses every 3D point as a barycentric combination
//! of four (three in the planar branch) control points, recovers the
//! control points in the camera frame from the nullspace of the projection
//! constraints, disambiguates the nullspace mixture with the inter-control
//! distance constraints (closed-form cases plus Gauss-Newton), and reads
//! the pose off a point-set alignment.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};

use super::{mean_finite, reprojection_errors_px, EstimateError};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::rotation::nearest_rotation;

/// Relative eigenvalue ratio below which the point cloud counts as planar.
const PLANAR_RATIO: f64 = 1e-7;
/// Relative eigenvalue ratio below which it counts as collinear (degenerate).
const COLLINEAR_RATIO: f64 = 1e-10;

/// Estimates the world-to-camera pose from 4 or more 3D-2D correspondences.
///
/// Coplanar point sets are routed to a three-control-point branch; collinear
/// sets are rejected as degenerate.
pub fn epnp(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    k: &CameraIntrinsics,
) -> Result<CameraPose, EstimateError> {
    let n = world.len();
    if n != image.len() {
        return Err(EstimateError::MismatchedLengths);
    }
    if n < 4 {
        return Err(EstimateError::NotEnoughPoints { needed: 4, got: n });
    }

    // Normalized image coordinates.
    let norm: Vec<Vector2<f64>> = image
        .iter()
        .map(|p| Vector2::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy))
        .collect();

    // Principal axes of the point cloud.
    let mut centroid = Vector3::zeros();
    for p in world {
        centroid += p;
    }
    centroid /= n as f64;
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let axes: Vec<Vector3<f64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    if lambda[0] <= 0.0 || lambda[1] < COLLINEAR_RATIO * lambda[0] {
        return Err(EstimateError::DegenerateConfiguration(
            "points are collinear or coincident".into(),
        ));
    }

    let planar = lambda[2] < PLANAR_RATIO * lambda[0];
    if planar {
        solve_with_control_points(world, &norm, k, image, &control_points_planar(&centroid, &lambda, &axes))
    } else {
        let primary = solve_with_control_points(
            world,
            &norm,
            k,
            image,
            &control_points_spatial(&centroid, &lambda, &axes),
        );
        // Near-planar clouds can leave the spatial branch poorly
        // conditioned; fall back to the planar branch if it does better.
        if lambda[2] < 1e-3 * lambda[0] {
            let fallback = solve_with_control_points(
                world,
                &norm,
                k,
                image,
                &control_points_planar(&centroid, &lambda, &axes),
            );
            return match (primary, fallback) {
                (Ok(a), Ok(b)) => {
                    let ea = mean_finite(&reprojection_errors_px(world, image, k, &a));
                    let eb = mean_finite(&reprojection_errors_px(world, image, k, &b));
                    Ok(if ea <= eb { a } else { b })
                }
                (Ok(a), Err(_)) => Ok(a),
                (Err(_), Ok(b)) => Ok(b),
                (Err(e), Err(_)) => Err(e),
            };
        }
        primary
    }
}

fn control_points_spatial(
    centroid: &Vector3<f64>,
    lambda: &[f64],
    axes: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    vec![
        *centroid,
        centroid + lambda[0].sqrt() * axes[0],
        centroid + lambda[1].sqrt() * axes[1],
        centroid + lambda[2].sqrt() * axes[2],
    ]
}

fn control_points_planar(
    centroid: &Vector3<f64>,
    lambda: &[f64],
    axes: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    vec![
        *centroid,
        centroid + lambda[0].sqrt() * axes[0],
        centroid + lambda[1].sqrt() * axes[1],
    ]
}

fn solve_with_control_points(
    world: &[Vector3<f64>],
    norm: &[Vector2<f64>],
    k: &CameraIntrinsics,
    image: &[Vector2<f64>],
    control_w: &[Vector3<f64>],
) -> Result<CameraPose, EstimateError> {
    let n = world.len();
    let m = control_w.len(); // 3 (planar) or 4 (spatial)

    // Barycentric coordinates of every point in the control basis.
    let alphas = barycentric(world, control_w)?;

    // Projection constraints: sum_j a_j x_j - u_i sum_j a_j z_j = 0
    // (and the v row), over the stacked camera-frame control coordinates.
    let cols = 3 * m;
    let mut mat = DMatrix::<f64>::zeros(2 * n, cols);
    for i in 0..n {
        let (u, v) = (norm[i].x, norm[i].y);
        for j in 0..m {
            let a = alphas[i][j];
            mat[(2 * i, 3 * j)] = a;
            mat[(2 * i, 3 * j + 2)] = -a * u;
            mat[(2 * i + 1, 3 * j + 1)] = a;
            mat[(2 * i + 1, 3 * j + 2)] = -a * v;
        }
    }

    // Nullspace candidates from the Gram matrix: eigenvectors of M^T M for
    // the smallest eigenvalues (a thin SVD of a wide M would drop them).
    // Squaring the condition number costs eigenvector accuracy, so the
    // subspace is polished by inverse iteration afterwards.
    let gram = mat.transpose() * &mat;
    let n_basis = 4.min(cols);
    let basis = small_eigen_basis(&gram, n_basis)?;

    // Pairwise control-point distance constraints.
    let mut pairs = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            pairs.push((a, b));
        }
    }
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (control_w[a] - control_w[b]).norm_squared())
        .collect();
    // Differences of each basis vector across control-point pairs.
    let dv: Vec<Vec<Vector3<f64>>> = basis
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|&(a, b)| {
                    Vector3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    // Multi-start seeds: the closed-form cases plus relative-sign variants,
    // since the lifted-product sign recovery is ambiguous for minimal
    // samples and Gauss-Newton only refines locally.
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    candidates.push(betas_case1(&dv, &rho));
    if let Some(b) = betas_case2(&dv, &rho) {
        let mut alt = b.clone();
        alt[1] = -alt[1];
        candidates.push(b);
        candidates.push(alt);
    }
    if m == 4 {
        if let Some(b) = betas_case3(&dv, &rho) {
            for mask in 0..4u8 {
                let mut v = b.clone();
                if mask & 1 != 0 {
                    v[1] = -v[1];
                }
                if mask & 2 != 0 {
                    v[2] = -v[2];
                }
                candidates.push(v);
            }
        }
        // Minimal samples leave a four-dimensional kernel whose basins the
        // case seeds alone miss; cover the orthants deterministically.
        let scale = candidates[0][0].abs().max(1e-6) * 0.5;
        let nb = dv.len();
        for pattern in 0..(1u8 << nb.min(4)) {
            let mut v = vec![0.0; nb];
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = if pattern & (1 << i) != 0 { -scale } else { scale };
            }
            candidates.push(v);
        }
    }

    let mut best: Option<(f64, CameraPose)> = None;
    for mut betas in candidates {
        gauss_newton_betas(&mut betas, &dv, &rho);
        let Some(pose) = pose_from_betas(&betas, &basis, &alphas, world, m) else {
            continue;
        };
        let err = mean_finite(&reprojection_errors_px(world, image, k, &pose));
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }

    match best {
        Some((err, pose)) if err.is_finite() => Ok(pose),
        _ => Err(EstimateError::DegenerateConfiguration(
            "no usable control-point solution".into(),
        )),
    }
}

/// Orthonormal basis of the invariant subspace belonging to the `k`
/// smallest eigenvalues of a symmetric PSD matrix, eigenvalue-sorted.
/// Two rounds of shifted inverse iteration followed by a Rayleigh-Ritz
/// rotation recover near machine precision.
fn small_eigen_basis(gram: &DMatrix<f64>, k: usize) -> Result<Vec<DVector<f64>>, EstimateError> {
    let n = gram.nrows();
    let eig = gram.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut q = DMatrix::<f64>::zeros(n, k);
    for (col, &i) in order[..k].iter().enumerate() {
        q.set_column(col, &eig.eigenvectors.column(i));
    }

    let shift = 1e-12 * gram.trace().abs().max(1e-300);
    let mut shifted = gram.clone();
    for d in 0..n {
        shifted[(d, d)] += shift;
    }
    if let Some(chol) = shifted.cholesky() {
        for _ in 0..2 {
            let x = chol.solve(&q);
            let qr = x.qr();
            q = qr.q();
        }
        // Rayleigh-Ritz: rotate the subspace basis into eigenvector
        // directions, sorted by eigenvalue.
        let b = q.transpose() * gram * &q;
        let small = b.symmetric_eigen();
        let mut sorder: Vec<usize> = (0..k).collect();
        sorder.sort_by(|&a, &b2| {
            small.eigenvalues[a]
                .partial_cmp(&small.eigenvalues[b2])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut rot = DMatrix::<f64>::zeros(k, k);
        for (col, &i) in sorder.iter().enumerate() {
            rot.set_column(col, &small.eigenvectors.column(i));
        }
        q *= rot;
    }

    Ok((0..k).map(|c| q.column(c).into_owned()).collect())
}

fn barycentric(
    world: &[Vector3<f64>],
    control_w: &[Vector3<f64>],
) -> Result<Vec<Vec<f64>>, EstimateError> {
    let m = control_w.len();
    if m == 4 {
        let basis = Matrix3::from_columns(&[
            control_w[1] - control_w[0],
            control_w[2] - control_w[0],
            control_w[3] - control_w[0],
        ]);
        let inv = basis.try_inverse().ok_or_else(|| {
            EstimateError::DegenerateConfiguration("singular control-point basis".into())
        })?;
        Ok(world
            .iter()
            .map(|p| {
                let c = inv * (p - control_w[0]);
                vec![1.0 - c.x - c.y - c.z, c.x, c.y, c.z]
            })
            .collect())
    } else {
        // Planar: least-squares coordinates in the two in-plane axes.
        let b1 = control_w[1] - control_w[0];
        let b2 = control_w[2] - control_w[0];
        let g11 = b1.dot(&b1);
        let g12 = b1.dot(&b2);
        let g22 = b2.dot(&b2);
        let det = g11 * g22 - g12 * g12;
        if det.abs() < 1e-18 {
            return Err(EstimateError::DegenerateConfiguration(
                "singular planar control basis".into(),
            ));
        }
        Ok(world
            .iter()
            .map(|p| {
                let d = p - control_w[0];
                let r1 = d.dot(&b1);
                let r2 = d.dot(&b2);
                let a1 = (g22 * r1 - g12 * r2) / det;
                let a2 = (g11 * r2 - g12 * r1) / det;
                vec![1.0 - a1 - a2, a1, a2]
            })
            .collect())
    }
}

/// One-basis-vector case: a single closed-form scale.
fn betas_case1(dv: &[Vec<Vector3<f64>>], rho: &[f64]) -> Vec<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (ab, r) in dv[0].iter().zip(rho.iter()) {
        num += ab.norm() * r.sqrt();
        den += ab.norm_squared();
    }
    let mut betas = vec![0.0; dv.len()];
    betas[0] = if den > 0.0 { num / den } else { 0.0 };
    betas
}

/// Two-vector case: linear solve for (b11, b12, b22).
fn betas_case2(dv: &[Vec<Vector3<f64>>], rho: &[f64]) -> Option<Vec<f64>> {
    if dv.len() < 2 {
        return None;
    }
    let rows = rho.len();
    let mut l = DMatrix::<f64>::zeros(rows, 3);
    let mut r = DVector::<f64>::zeros(rows);
    for i in 0..rows {
        l[(i, 0)] = dv[0][i].norm_squared();
        l[(i, 1)] = 2.0 * dv[0][i].dot(&dv[1][i]);
        l[(i, 2)] = dv[1][i].norm_squared();
        r[i] = rho[i];
    }
    let sol = l.svd(true, true).solve(&r, 1e-12).ok()?;
    let (b11, b12, b22) = (sol[0], sol[1], sol[2]);
    let mut betas = vec![0.0; dv.len()];
    if b11.abs() > 1e-15 {
        let beta1 = b11.abs().sqrt();
        betas[0] = beta1;
        betas[1] = b12 / beta1 * b11.signum();
    } else if b22.abs() > 1e-15 {
        betas[1] = b22.abs().sqrt();
    }
    Some(betas)
}

/// Three-vector case: linear solve for the six lifted products.
fn betas_case3(dv: &[Vec<Vector3<f64>>], rho: &[f64]) -> Option<Vec<f64>> {
    if dv.len() < 3 || rho.len() < 6 {
        return None;
    }
    let rows = rho.len();
    let mut l = DMatrix::<f64>::zeros(rows, 6);
    let mut r = DVector::<f64>::zeros(rows);
    for i in 0..rows {
        l[(i, 0)] = dv[0][i].norm_squared();
        l[(i, 1)] = 2.0 * dv[0][i].dot(&dv[1][i]);
        l[(i, 2)] = dv[1][i].norm_squared();
        l[(i, 3)] = 2.0 * dv[0][i].dot(&dv[2][i]);
        l[(i, 4)] = 2.0 * dv[1][i].dot(&dv[2][i]);
        l[(i, 5)] = dv[2][i].norm_squared();
        r[i] = rho[i];
    }
    let sol = l.svd(true, true).solve(&r, 1e-12).ok()?;
    let b11 = sol[0];
    let mut betas = vec![0.0; dv.len()];
    if b11.abs() > 1e-15 {
        let beta1 = b11.abs().sqrt();
        betas[0] = beta1;
        betas[1] = sol[1] / beta1 * b11.signum();
        betas[2] = sol[3] / beta1 * b11.signum();
    }
    Some(betas)
}

/// Refines the basis mixture against the distance constraints.
fn gauss_newton_betas(betas: &mut [f64], dv: &[Vec<Vector3<f64>>], rho: &[f64]) {
    let nb = betas.len();
    let rows = rho.len();
    for _ in 0..25 {
        let mut jtj = DMatrix::<f64>::zeros(nb, nb);
        let mut jtr = DVector::<f64>::zeros(nb);
        for i in 0..rows {
            let mut s = Vector3::zeros();
            for (b, dvk) in betas.iter().zip(dv.iter()) {
                s += *b * dvk[i];
            }
            let f = s.norm_squared() - rho[i];
            let grad: Vec<f64> = dv.iter().map(|dvk| 2.0 * s.dot(&dvk[i])).collect();
            for a in 0..nb {
                jtr[a] += grad[a] * f;
                for b in 0..nb {
                    jtj[(a, b)] += grad[a] * grad[b];
                }
            }
        }
        for d in 0..nb {
            jtj[(d, d)] += 1e-12;
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        let mut max_step = 0.0f64;
        for a in 0..nb {
            betas[a] -= step[a];
            max_step = max_step.max(step[a].abs());
        }
        if max_step < 1e-14 {
            break;
        }
    }
}

/// Reconstructs camera-frame control points from a beta mixture and aligns
/// the world points onto them.
fn pose_from_betas(
    betas: &[f64],
    basis: &[DVector<f64>],
    alphas: &[Vec<f64>],
    world: &[Vector3<f64>],
    m: usize,
) -> Option<CameraPose> {
    let dim = 3 * m;
    let mut x = DVector::<f64>::zeros(dim);
    for (b, v) in betas.iter().zip(basis.iter()) {
        x += *b * v;
    }
    let mut control_c: Vec<Vector3<f64>> =
        (0..m).map(|j| Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])).collect();

    // Points must sit in front of the camera; flip the mixture sign if the
    // majority came out behind.
    let mut neg = 0usize;
    for a in alphas {
        let mut z = 0.0;
        for (j, c) in control_c.iter().enumerate() {
            z += a[j] * c.z;
        }
        if z < 0.0 {
            neg += 1;
        }
    }
    if neg * 2 > alphas.len() {
        for c in &mut control_c {
            *c = -*c;
        }
    }

    let camera_pts: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| {
            let mut p = Vector3::zeros();
            for (j, c) in control_c.iter().enumerate() {
                p += a[j] * *c;
            }
            p
        })
        .collect();

    align_point_sets(world, &camera_pts)
}

/// Rigid alignment (no scale) taking `world` onto `camera`: returns the
/// world-to-camera pose.
fn align_point_sets(world: &[Vector3<f64>], camera: &[Vector3<f64>]) -> Option<CameraPose> {
    let n = world.len() as f64;
    let mut cw = Vector3::zeros();
    let mut cc = Vector3::zeros();
    for (pw, pc) in world.iter().zip(camera.iter()) {
        cw += pw;
        cc += pc;
    }
    cw /= n;
    cc /= n;
    let mut h = Matrix3::zeros();
    for (pw, pc) in world.iter().zip(camera.iter()) {
        h += (pc - cc) * (pw - cw).transpose();
    }
    if !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    let r = nearest_rotation(&h);
    let t = cc - r * cw;
    Some(CameraPose::from_parts_renormalized(r, t))
}
