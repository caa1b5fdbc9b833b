//! Plane-projective mapping between two images: normalized DLT estimation
//! wrapped in RANSAC with a symmetric transfer error.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adaptive_iterations, EstimateError, RansacConfig};

/// A non-degenerate 3x3 projective transform, normalized so `h33 = 1`
/// whenever that entry is nonzero. The condition number (singular value
/// ratio) is kept as a conditioning diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    condition_number: f64,
}

impl Homography {
    pub fn new(mut m: Matrix3<f64>) -> Result<Self, EstimateError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(EstimateError::SingularHomography);
        }
        let svd = m.svd(false, false);
        let smax = svd.singular_values[0];
        let smin = svd.singular_values[2];
        if smin <= 1e-12 * smax || smax == 0.0 {
            return Err(EstimateError::SingularHomography);
        }
        if m[(2, 2)].abs() > 1e-12 * smax {
            m /= m[(2, 2)];
        }
        Ok(Self {
            m,
            condition_number: smax / smin,
        })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            condition_number: 1.0,
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    /// Applies the transform to a point; coordinates blow up to infinity on
    /// the line at infinity instead of panicking.
    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let hp = self.m * Vector3::new(p.x, p.y, 1.0);
        if hp.z.abs() < 1e-300 {
            return Vector2::new(f64::INFINITY, f64::INFINITY);
        }
        Vector2::new(hp.x / hp.z, hp.y / hp.z)
    }

    pub fn inverse(&self) -> Result<Homography, EstimateError> {
        let inv = self.m.try_inverse().ok_or(EstimateError::SingularHomography)?;
        Homography::new(inv)
    }
}

/// Similarity normalization: centroid to the origin, mean distance sqrt(2).
fn normalizing_transform(pts: &[Vector2<f64>]) -> Result<Matrix3<f64>, EstimateError> {
    let n = pts.len() as f64;
    let mut c = Vector2::zeros();
    for p in pts {
        c += p;
    }
    c /= n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(EstimateError::DegenerateConfiguration(
            "coincident points in homography estimation".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

/// Direct linear transform over at least four source/destination pairs,
/// with Hartley normalization on both sides.
pub fn homography_dlt(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
) -> Result<Homography, EstimateError> {
    let n = src.len();
    if n != dst.len() {
        return Err(EstimateError::MismatchedLengths);
    }
    if n < 4 {
        return Err(EstimateError::NotEnoughPoints { needed: 4, got: n });
    }
    let t_src = normalizing_transform(src)?;
    let t_dst = normalizing_transform(dst)?;
    let map = |t: &Matrix3<f64>, p: &Vector2<f64>| {
        let hp = t * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(hp.x / hp.z, hp.y / hp.z)
    };

    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let s = map(&t_src, &src[i]);
        let d = map(&t_dst, &dst[i]);
        let (x, y) = (s.x, s.y);
        let (u, v) = (d.x, d.y);
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    // Smallest eigenvector of A^T A (a thin SVD of the wide 2n x 9 system
    // would not expose the nullspace).
    let gram = a.transpose() * &a;
    let eig = gram.symmetric_eigen();
    let mut min_i = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let h = eig.eigenvectors.column(min_i);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(EstimateError::SingularHomography)?;
    Homography::new(t_dst_inv * hn * t_src)
}

fn collinear3(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> bool {
    let ab = b - a;
    let ac = c - a;
    let area2 = (ab.x * ac.y - ab.y * ac.x).abs();
    let scale = ab.norm() * ac.norm();
    area2 < 1e-9 * scale.max(1e-12)
}

fn sample_degenerate(pts: &[Vector2<f64>]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if collinear3(&pts[i], &pts[j], &pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Symmetric transfer error: the larger of the forward and backward pixel
/// distances.
fn transfer_error(h: &Homography, h_inv: &Homography, s: &Vector2<f64>, d: &Vector2<f64>) -> f64 {
    let fwd = (h.apply(s) - d).norm();
    let bwd = (h_inv.apply(d) - s).norm();
    fwd.max(bwd)
}

/// RANSAC homography over 2D-2D pairs; the final model is re-estimated by
/// DLT over all inliers. Returns the model and its inlier mask.
pub fn homography_dlt_ransac(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
    cfg: &RansacConfig,
) -> Result<(Homography, Vec<bool>), EstimateError> {
    cfg.validate()?;
    let n = src.len();
    if n != dst.len() {
        return Err(EstimateError::MismatchedLengths);
    }
    if n < 4 {
        return Err(EstimateError::NotEnoughPoints { needed: 4, got: n });
    }

    let score = |h: &Homography| -> Option<(Vec<bool>, usize, f64)> {
        let h_inv = h.inverse().ok()?;
        let mut mask = vec![false; n];
        let mut count = 0usize;
        let mut err_sum = 0.0;
        for i in 0..n {
            let e = transfer_error(h, &h_inv, &src[i], &dst[i]);
            if e < cfg.inlier_threshold_px {
                mask[i] = true;
                count += 1;
                err_sum += e;
            }
        }
        let mean = if count > 0 { err_sum / count as f64 } else { f64::INFINITY };
        Some((mask, count, mean))
    };

    if n == 4 {
        if sample_degenerate(src) || sample_degenerate(dst) {
            return Err(EstimateError::DegenerateSample);
        }
        let h = homography_dlt(src, dst)?;
        let (mask, count, _) = score(&h).ok_or(EstimateError::SingularHomography)?;
        if count < 4 {
            return Err(EstimateError::NoConsensus);
        }
        return Ok((h, mask));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<bool>, usize, f64)> = None;
    let mut planned = cfg.max_iterations;
    let mut iter = 0usize;
    let mut degenerate_streak = 0usize;

    while iter < planned {
        iter += 1;
        for j in 0..4 {
            let pick = rng.random_range(j..n);
            indices.swap(j, pick);
        }
        let s: Vec<Vector2<f64>> = indices[..4].iter().map(|&i| src[i]).collect();
        let d: Vec<Vector2<f64>> = indices[..4].iter().map(|&i| dst[i]).collect();
        if sample_degenerate(&s) || sample_degenerate(&d) {
            degenerate_streak += 1;
            if degenerate_streak > 3 * cfg.max_iterations.max(1000) {
                return Err(EstimateError::DegenerateSample);
            }
            planned = (planned + 1).min(cfg.max_iterations * 4);
            continue;
        }
        degenerate_streak = 0;
        let Ok(h) = homography_dlt(&s, &d) else { continue };
        let Some((mask, count, mean)) = score(&h) else { continue };
        if count < 4 {
            continue;
        }
        let better = match &best {
            Some((_, bc, bm)) => count > *bc || (count == *bc && mean < *bm),
            None => true,
        };
        if better {
            let ratio = count as f64 / n as f64;
            planned =
                planned.min(iter + adaptive_iterations(ratio, 4, cfg.confidence, cfg.max_iterations));
            best = Some((mask, count, mean));
        }
    }

    let (mut mask, mut count, _) = best.ok_or(EstimateError::NoConsensus)?;
    // Final model over all inliers, then a consensus refresh.
    let mut h_final = None;
    for _ in 0..cfg.local_opt_rounds.max(1) {
        let s: Vec<Vector2<f64>> = src
            .iter()
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        let d: Vec<Vector2<f64>> = dst
            .iter()
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect();
        let Ok(h) = homography_dlt(&s, &d) else { break };
        let Some((new_mask, new_count, _)) = score(&h) else { break };
        if new_count < count {
            break;
        }
        let stable = new_mask == mask;
        h_final = Some(h);
        mask = new_mask;
        count = new_count;
        if stable {
            break;
        }
    }
    match h_final {
        Some(h) => Ok((h, mask)),
        None => Err(EstimateError::NoConsensus),
    }
}
