//! Ground-truth oracle matcher with geometry-aware confidences.
//!
//! Each sampled query pixel is lifted to 3D through the point map and
//! projected orthographically onto the DOP. Because the DSM stores a single
//! height per cell, points on vertical structures project onto cells whose
//! stored elevation differs from the point's true height; the confidence
//! `exp(-gamma * d)` measures that round-trip discrepancy `d`, so facade
//! points score low and top-surface points score 1.

use nalgebra::{Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Correspondence, CorrespondenceSet, MatchError};
use crate::geo::{OrthoCamera, SampleMode};
use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GtMatchParams {
    /// Number of query pixels to sample.
    pub n: usize,
    /// Confidence decay rate per meter of height discrepancy.
    pub gamma: f64,
    /// Pairs with confidence at or below this threshold are dropped.
    pub tau: f64,
}

impl Default for GtMatchParams {
    fn default() -> Self {
        Self {
            n: 400,
            gamma: 1.0,
            tau: 0.0,
        }
    }
}

/// Samples query pixels on a stratified grid with seeded jitter (uniform
/// random sampling tends to cluster, and clustered correspondences
/// destabilize pose solving), lifts them through the point map, projects
/// them onto the DOP, and scores each pair by the 2.5D round-trip
/// discrepancy.
pub fn gt_match(
    sample: &Sample,
    params: &GtMatchParams,
    rng_seed: u64,
) -> Result<CorrespondenceSet, MatchError> {
    if sample.gt_pose.is_none() {
        return Err(MatchError::MissingGroundTruth);
    }
    if !(params.gamma > 0.0) || !(0.0..1.0).contains(&params.tau) {
        return Err(MatchError::InvalidParameter(format!(
            "gamma must be positive and tau in [0, 1), got gamma={}, tau={}",
            params.gamma, params.tau
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pm = &sample.point_map;
    let (w, h) = (pm.width, pm.height);
    let grid = (params.n as f64).sqrt().ceil() as u32;
    let cell_w = w as f64 / grid as f64;
    let cell_h = h as f64 / grid as f64;

    let ortho = OrthoCamera::new(sample.dop.georef);
    let dsm_cam = OrthoCamera::new(sample.dsm.georef);

    let mut pairs = Vec::new();
    'cells: for gy in 0..grid {
        for gx in 0..grid {
            if pairs.len() >= params.n {
                break 'cells;
            }
            // Up to four jitter attempts per cell to land on a valid pixel.
            let mut found = None;
            for _ in 0..4 {
                let x = ((gx as f64 + rng.random_range(0.0..1.0)) * cell_w).floor() as u32;
                let y = ((gy as f64 + rng.random_range(0.0..1.0)) * cell_h).floor() as u32;
                let (x, y) = (x.min(w - 1), y.min(h - 1));
                if let Some(p) = pm.get(x, y) {
                    found = Some((x, y, p));
                    break;
                }
            }
            let Some((x, y, p3)) = found else { continue };

            let p_dop = ortho.project(&p3);
            if !sample.dop.in_bounds(p_dop.x, p_dop.y) {
                continue;
            }
            // Height the DSM would assign to this ground position.
            let p_dsm = dsm_cam.project(&p3);
            let Ok(z_dsm) = sample
                .dsm
                .sample_single(p_dsm.x, p_dsm.y, SampleMode::Bilinear)
            else {
                continue;
            };
            let snapped = Vector3::new(p3.x, p3.y, z_dsm);
            let d = (p3 - snapped).norm();
            let alpha = (-params.gamma * d).exp();
            if alpha > params.tau {
                pairs.push(Correspondence {
                    query: Vector2::new(x as f64, y as f64),
                    dop: p_dop,
                    confidence: alpha,
                });
            }
        }
    }

    if pairs.len() < 4 {
        return Err(MatchError::InsufficientValidPoints { found: pairs.len() });
    }
    Ok(CorrespondenceSet::from_pairs(pairs))
}
