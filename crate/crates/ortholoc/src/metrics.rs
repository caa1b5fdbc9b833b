//! Evaluation metrics: matching error, pose errors, keypoint reprojection
//! error, relative focal error, and recall flags at nested thresholds.

use nalgebra::Vector2;
use thiserror::Error;

use crate::adhop::{Estimate, LocResult};
use crate::camera::project_perspective;
use crate::geo::OrthoCamera;
use crate::rotation::rotation_angle_deg;
use crate::sample::Sample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample has no ground-truth pose")]
    MissingGroundTruth,
}

/// Per-sample evaluation bundle. Metrics that cannot be computed are
/// absent, never zero, so aggregation cannot silently deflate errors.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricBundle {
    /// Median distance between estimated and true DOP coordinates of the
    /// matched query pixels, pixels.
    pub me_px: Option<f64>,
    /// Camera-center distance to ground truth, meters.
    pub te_m: f64,
    /// Relative rotation angle to ground truth, degrees.
    pub re_deg: f64,
    /// Median reprojection discrepancy of the verification keypoints under
    /// the estimated vs. the ground-truth camera, pixels.
    pub rpe_px: Option<f64>,
    /// Relative focal error, percent (calibration runs only).
    pub rfe_pct: Option<f64>,
    pub recall_1m_1deg: bool,
    pub recall_3m_3deg: bool,
    pub recall_5m_5deg: bool,
    pub runtime_s: f64,
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Matching error against the point-map oracle: for every matched query
/// pixel with a valid point-map entry, the true DOP coordinate is the
/// orthographic projection of its 3D point.
fn matching_error(result: &LocResult, sample: &Sample) -> Option<f64> {
    let cam = OrthoCamera::new(sample.dop.georef);
    let mut dists = Vec::new();
    for c in result.correspondences.iter() {
        let (x, y) = (c.query.x.round(), c.query.y.round());
        if x < 0.0 || y < 0.0 {
            continue;
        }
        let Some(p3) = sample.point_map.get(x as u32, y as u32) else {
            continue;
        };
        let truth = cam.project(&p3);
        dists.push((c.dop - truth).norm());
    }
    median(&mut dists)
}

fn keypoint_rpe(estimate: &Estimate, sample: &Sample) -> Option<f64> {
    let gt_pose = sample.gt_pose.as_ref()?;
    let mut errs = Vec::new();
    for kp in &sample.keypoints3d {
        let gt_px = match project_perspective(kp, &sample.intrinsics, gt_pose) {
            Ok((p, _)) => p,
            Err(_) => continue,
        };
        let est_px = match project_perspective(kp, &estimate.intrinsics, &estimate.pose) {
            Ok((p, _)) => p,
            Err(_) => Vector2::new(f64::INFINITY, f64::INFINITY),
        };
        errs.push((est_px - gt_px).norm());
    }
    // Behind-camera projections count as unbounded error; the median keeps
    // them unless the majority of keypoints are affected.
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = errs.len();
    Some(if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    })
}

/// Computes the metric bundle for a pipeline result against the sample's
/// ground truth. `compute_rfe` should be true for calibration runs, where
/// the intrinsics were estimated rather than given.
pub fn compute_metrics(
    result: &LocResult,
    sample: &Sample,
    compute_rfe: bool,
) -> Result<MetricBundle, MetricsError> {
    let gt_pose = sample.gt_pose.as_ref().ok_or(MetricsError::MissingGroundTruth)?;
    let est = result.final_estimate();

    let te_m = (est.pose.camera_center() - gt_pose.camera_center()).norm();
    let re_deg = rotation_angle_deg(est.pose.rotation(), gt_pose.rotation());
    let rpe_px = keypoint_rpe(est, sample);
    let me_px = matching_error(result, sample);
    let rfe_pct = if compute_rfe {
        let f_gt = sample.intrinsics.shared_focal();
        Some((est.intrinsics.shared_focal() - f_gt).abs() / f_gt * 100.0)
    } else {
        None
    };

    Ok(MetricBundle {
        me_px,
        te_m,
        re_deg,
        rpe_px,
        rfe_pct,
        recall_1m_1deg: te_m <= 1.0 && re_deg <= 1.0,
        recall_3m_3deg: te_m <= 3.0 && re_deg <= 3.0,
        recall_5m_5deg: te_m <= 5.0 && re_deg <= 5.0,
        runtime_s: result.timings.total_s,
    })
}
