//! Robust geometric solvers: EPnP, locally optimized RANSAC pose
//! estimation, homography fitting by normalized DLT, image warping, and
//! Levenberg-Marquardt joint refinement of pose and intrinsics.

mod epnp;
mod homography;
mod lm;
mod ransac;
mod warp;

pub use epnp::epnp;
pub use homography::{homography_dlt, homography_dlt_ransac, Homography};
pub use lm::{huber_cost, refine_lm, residual_and_jacobian, CalibEstimate, LmOptions, ParamLayout};
pub use ransac::{ransac_pnp, PoseEstimate};
pub use warp::{warp_by_homography, WarpResult};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::{residual, CameraIntrinsics, CameraPose};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("need at least {needed} correspondences, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("mismatched correspondence array lengths")]
    MismatchedLengths,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no consensus: best model holds fewer than 4 inliers")]
    NoConsensus,
    #[error("persistent degenerate minimal samples")]
    DegenerateSample,
    #[error("homography is singular")]
    SingularHomography,
    #[error("normal equations stayed singular with damping exhausted")]
    SingularNormalEquations,
    #[error("optimization diverged to a non-finite cost")]
    Diverged,
}

/// Settings for the locally optimized RANSAC loops.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RansacConfig {
    /// Reprojection (or transfer) error below which a pair counts as an
    /// inlier, in pixels.
    pub inlier_threshold_px: f64,
    /// Hard cap on hypothesis iterations; the loop usually exits earlier via
    /// the adaptive confidence bound.
    pub max_iterations: usize,
    /// Probability target for having drawn one all-inlier sample.
    pub confidence: f64,
    /// Re-fit rounds on the consensus set after a new best model.
    pub local_opt_rounds: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 5.0,
            max_iterations: 10_000,
            confidence: 0.999,
            local_opt_rounds: 3,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        if !(self.inlier_threshold_px > 0.0) || !(0.0 < self.confidence && self.confidence < 1.0) {
            return Err(EstimateError::DegenerateConfiguration(
                "inlier threshold must be positive and confidence in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive iteration count for an inlier ratio `w` and sample size `m`.
pub(crate) fn adaptive_iterations(w: f64, m: usize, confidence: f64, cap: usize) -> usize {
    if w <= 0.0 {
        return cap;
    }
    if w >= 1.0 {
        return 1;
    }
    let p_sample = w.powi(m as i32);
    if p_sample <= 1e-12 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_sample).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil() as usize).clamp(1, cap)
}

/// Pixel reprojection error norms; behind-camera points come back infinite.
pub fn reprojection_errors_px(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Vec<f64> {
    world
        .iter()
        .zip(image.iter())
        .map(|(p3, p2)| residual(p3, p2, k, pose).norm())
        .collect()
}

/// Mean of the finite entries; infinite if none are finite.
pub fn mean_finite(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_iteration_bounds() {
        assert_eq!(adaptive_iterations(1.0, 6, 0.999, 100), 1);
        assert_eq!(adaptive_iterations(0.0, 6, 0.999, 100), 100);
        let n_half = adaptive_iterations(0.5, 4, 0.99, 100_000);
        // (1 - 0.0625)^n <= 0.01 => n >= 72
        assert!((70..80).contains(&n_half), "n_half = {n_half}");
    }

    #[test]
    fn mean_finite_skips_infinities() {
        assert_eq!(mean_finite(&[1.0, f64::INFINITY, 3.0]), 2.0);
        assert!(mean_finite(&[f64::INFINITY]).is_infinite());
    }
}
