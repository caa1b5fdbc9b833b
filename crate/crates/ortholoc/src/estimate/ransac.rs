//! Locally optimized RANSAC around the EPnP solver: hypotheses from minimal
//! samples, consensus by pixel reprojection threshold, and re-fits on the
//! running inlier set after every improvement.

use nalgebra::{Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adaptive_iterations, epnp, mean_finite, reprojection_errors_px, EstimateError, RansacConfig};
use crate::camera::{CameraIntrinsics, CameraPose};

/// Sample size for pose hypotheses. Six points keep EPnP well conditioned;
/// smaller inputs fall back to a single fit over everything.
const MIN_SAMPLE: usize = 6;

/// Pose with its consensus statistics. The mean reprojection error is taken
/// over inliers only.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: CameraPose,
    pub inlier_mask: Vec<bool>,
    pub n_inliers: usize,
    pub mean_reproj_px: f64,
}

impl PoseEstimate {
    fn from_pose(
        pose: CameraPose,
        world: &[Vector3<f64>],
        image: &[Vector2<f64>],
        k: &CameraIntrinsics,
        threshold: f64,
    ) -> Self {
        let errs = reprojection_errors_px(world, image, k, &pose);
        let inlier_mask: Vec<bool> = errs.iter().map(|e| *e < threshold).collect();
        let n_inliers = inlier_mask.iter().filter(|b| **b).count();
        let inlier_errs: Vec<f64> = errs
            .iter()
            .zip(inlier_mask.iter())
            .filter(|(_, m)| **m)
            .map(|(e, _)| *e)
            .collect();
        let mean_reproj_px = mean_finite(&inlier_errs);
        Self {
            pose,
            inlier_mask,
            n_inliers,
            mean_reproj_px,
        }
    }

    fn better_than(&self, other: &PoseEstimate) -> bool {
        self.n_inliers > other.n_inliers
            || (self.n_inliers == other.n_inliers && self.mean_reproj_px < other.mean_reproj_px)
    }
}

fn fit_subset(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    mask: &[bool],
    k: &CameraIntrinsics,
) -> Result<CameraPose, EstimateError> {
    let w: Vec<Vector3<f64>> = world
        .iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    let i: Vec<Vector2<f64>> = image
        .iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    epnp(&w, &i, k)
}

/// Re-fit on the consensus set, re-collect inliers, and repeat while the
/// consensus does not shrink.
fn local_optimization(
    mut best: PoseEstimate,
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> PoseEstimate {
    for _ in 0..cfg.local_opt_rounds {
        if best.n_inliers < 4 {
            break;
        }
        let Ok(pose) = fit_subset(world, image, &best.inlier_mask, k) else {
            break;
        };
        let refined = PoseEstimate::from_pose(pose, world, image, k, cfg.inlier_threshold_px);
        if refined.n_inliers >= best.n_inliers {
            let converged = refined.inlier_mask == best.inlier_mask
                && (refined.mean_reproj_px - best.mean_reproj_px).abs() < 1e-15;
            best = refined;
            if converged {
                break;
            }
        } else {
            break;
        }
    }
    best
}

/// Robust pose from 3D-2D correspondences. Deterministic for a fixed seed.
pub fn ransac_pnp(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, EstimateError> {
    cfg.validate()?;
    let n = world.len();
    if n != image.len() {
        return Err(EstimateError::MismatchedLengths);
    }
    if n < 4 {
        return Err(EstimateError::NotEnoughPoints { needed: 4, got: n });
    }

    // Too few points to sample from: single fit over everything.
    if n <= MIN_SAMPLE {
        let pose = epnp(world, image, k)?;
        let est = PoseEstimate::from_pose(pose, world, image, k, cfg.inlier_threshold_px);
        let est = local_optimization(est, world, image, k, cfg);
        if est.n_inliers < 4 {
            return Err(EstimateError::NoConsensus);
        }
        return Ok(est);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<PoseEstimate> = None;
    let mut planned = cfg.max_iterations;
    let mut iter = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();

    while iter < planned {
        iter += 1;
        // Partial Fisher-Yates for a distinct sample.
        for j in 0..MIN_SAMPLE {
            let pick = rng.random_range(j..n);
            indices.swap(j, pick);
        }
        let w: Vec<Vector3<f64>> = indices[..MIN_SAMPLE].iter().map(|&i| world[i]).collect();
        let im: Vec<Vector2<f64>> = indices[..MIN_SAMPLE].iter().map(|&i| image[i]).collect();
        let Ok(pose) = epnp(&w, &im, k) else { continue };
        let candidate = PoseEstimate::from_pose(pose, world, image, k, cfg.inlier_threshold_px);
        if candidate.n_inliers < 4 {
            continue;
        }
        if best.as_ref().map_or(true, |b| candidate.better_than(b)) {
            let optimized = local_optimization(candidate, world, image, k, cfg);
            let ratio = optimized.n_inliers as f64 / n as f64;
            planned = planned.min(
                iter + adaptive_iterations(ratio, MIN_SAMPLE, cfg.confidence, cfg.max_iterations),
            );
            best = Some(optimized);
        }
    }

    match best {
        Some(est) if est.n_inliers >= 4 => Ok(est),
        _ => Err(EstimateError::NoConsensus),
    }
}
