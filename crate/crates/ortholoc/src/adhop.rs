//! End-to-end localization and calibration pipeline: match against the
//! DOP, lift through the DSM, solve robustly, then optionally run one
//! round of homography refinement and keep it only when it lowers the
//! mean reprojection error.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::estimate::{
    homography_dlt_ransac, ransac_pnp, refine_lm, reprojection_errors_px, warp_by_homography,
    EstimateError, Homography, LmOptions, RansacConfig,
};
use crate::matching::{
    filter_matches, gt_match, rotation_invariant_match, Correspondence, CorrespondenceSet,
    FilterOptions, GtMatchParams, MatchError, Matcher, NccMatcher, NccParams,
};
use crate::geo::{lift_dop_to_3d, RasterMap, SampleMode};
use crate::raster::{Raster, RasterError};
use crate::sample::Sample;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("matching failed: {0}")]
    MatchFailure(String),
    #[error(transparent)]
    Estimation(#[from] EstimateError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Which matcher backs a pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MatcherChoice {
    /// The built-in classical matcher (no model weights required; not
    /// claimed to rival learned matchers).
    Ncc(NccParams),
    /// Ground-truth oracle with geometry-aware confidences.
    Gt(GtMatchParams),
    /// Externally computed correspondences from a CSV file.
    Csv(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineMode {
    Localize,
    Calibrate,
}

/// How the refinement acceptance gate compares errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMetric {
    /// Each stage's mean reprojection error over its own inlier set.
    OwnInliers,
    /// Both poses evaluated on the initial stage's inlier correspondences.
    InitialInliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub matcher: MatcherChoice,
    /// Matcher for the re-match on the warped DOP; defaults to `matcher`.
    pub rematch: Option<MatcherChoice>,
    /// Run the matcher in four orientations and keep the best.
    pub rotation_invariant: bool,
    pub ransac: RansacConfig,
    /// Confidence floor applied to raw matches.
    pub min_confidence: f64,
    pub mode: PipelineMode,
    pub adhop: bool,
    /// Refinement rounds; one round is the standard configuration.
    pub adhop_rounds: usize,
    pub gate: GateMetric,
    pub lm: LmOptions,
    /// Extra alternations of stage one after focal refinement
    /// (calibration only; 0 = single pass).
    pub alternate_rounds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            matcher: MatcherChoice::Ncc(NccParams::default()),
            rematch: None,
            rotation_invariant: false,
            ransac: RansacConfig::default(),
            min_confidence: 0.5,
            mode: PipelineMode::Localize,
            adhop: false,
            adhop_rounds: 1,
            gate: GateMetric::OwnInliers,
            lm: LmOptions {
                optimize_focal: true,
                ..Default::default()
            },
            alternate_rounds: 0,
            seed: 0,
        }
    }
}

/// One stage's solution: pose, the intrinsics it used or estimated, and
/// consensus statistics over the stage's own correspondences.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub inlier_mask: Vec<bool>,
    pub n_inliers: usize,
    /// Mean reprojection error over the inlier set, pixels.
    pub mean_reproj_px: f64,
    /// Levenberg-Marquardt diagnostics (calibration mode only).
    pub lm_converged: Option<bool>,
    pub lm_iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub match_s: f64,
    pub solve_s: f64,
    pub refine_s: f64,
    pub total_s: f64,
}

/// Full pipeline outcome. `refined` is present when refinement ran;
/// `accepted_refinement` tells whether it beat the initial estimate.
#[derive(Debug, Clone)]
pub struct LocResult {
    pub initial: Estimate,
    pub refined: Option<Estimate>,
    pub accepted_refinement: bool,
    pub homography: Option<Homography>,
    /// Inlier fraction of the homography fit; low values flag scenes where
    /// a single plane explains the matches poorly.
    pub homography_inlier_ratio: Option<f64>,
    pub n_matches_initial: usize,
    pub n_matches_refined: Option<usize>,
    /// Correspondences backing the final estimate (for matching metrics).
    pub correspondences: CorrespondenceSet,
    /// Joint focal/depth rescaling moved the reprojection error by less
    /// than 0.05 px: the scene is too flat to pin the focal length.
    pub focal_depth_ambiguous: bool,
    pub timings: StageTimings,
}

impl LocResult {
    pub fn final_estimate(&self) -> &Estimate {
        if self.accepted_refinement {
            self.refined.as_ref().unwrap_or(&self.initial)
        } else {
            &self.initial
        }
    }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_matcher(
    choice: &MatcherChoice,
    rotation_invariant: bool,
    sample: &Sample,
    dop: &Raster,
    seed: u64,
) -> Result<CorrespondenceSet, MatchError> {
    match choice {
        MatcherChoice::Ncc(params) => {
            let matcher = NccMatcher::new(*params);
            if rotation_invariant {
                rotation_invariant_match(&matcher, &sample.query, dop)
            } else {
                matcher.match_pair(&sample.query, dop)
            }
        }
        MatcherChoice::Gt(params) => gt_match(sample, params, seed),
        MatcherChoice::Csv(path) => {
            let pairs = crate::io::read_correspondences(path)
                .map_err(|e| MatchError::AllOrientationsFailed(e.to_string()))?;
            let set = CorrespondenceSet::new_bounded(
                pairs,
                (sample.query.width, sample.query.height),
                (dop.width, dop.height),
            );
            if set.is_empty() {
                Err(MatchError::NoFeatures)
            } else {
                Ok(set)
            }
        }
    }
}

/// Lifts the DOP side of each pair through the DSM; pairs that fail to
/// lift are dropped (callers filter validity first, this is a second
/// guard).
fn lift_pairs(
    corrs: &CorrespondenceSet,
    sample: &Sample,
) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>, CorrespondenceSet) {
    let map = RasterMap::between(&sample.dop.georef, &sample.dsm.georef);
    let mut world = Vec::with_capacity(corrs.len());
    let mut image = Vec::with_capacity(corrs.len());
    let mut kept = Vec::with_capacity(corrs.len());
    for c in corrs.iter() {
        if let Ok(p3) = lift_dop_to_3d(
            &c.dop,
            &sample.dop.georef,
            &sample.dsm,
            &map,
            SampleMode::Bilinear,
        ) {
            world.push(p3);
            image.push(c.query);
            kept.push(c.clone());
        }
    }
    (world, image, CorrespondenceSet::from_pairs(kept))
}

/// Joint focal/translation-depth rescaling probe: returns true when
/// scaling both by 1.1 moves the mean reprojection error by less than one
/// pixel. Scenes with enough depth variation relative to the camera
/// distance break the rescaling identity well past a pixel; flat scenes
/// stay under it, meaning the focal length cannot be trusted.
fn focal_depth_valley(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    mask: &[bool],
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> bool {
    let w: Vec<Vector3<f64>> = world
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    let im: Vec<Vector2<f64>> = image
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    if w.is_empty() {
        return false;
    }
    // Mean camera-frame depth; the probe backs the camera off along its
    // optical axis by (alpha - 1) of it while scaling the focal by alpha,
    // which is an exact reprojection identity iff the scene has no depth
    // variation around that mean.
    let mut depth_sum = 0.0;
    let mut n = 0usize;
    for p in &w {
        let pc = pose.transform_point(p);
        if pc.z > 0.0 {
            depth_sum += pc.z;
            n += 1;
        }
    }
    if n == 0 {
        return false;
    }
    let mean_depth = depth_sum / n as f64;
    let base = crate::estimate::mean_finite(&reprojection_errors_px(&w, &im, k, pose));
    let alpha = 1.1;
    let k2 = k.with_shared_focal(k.shared_focal() * alpha);
    let t = pose.translation();
    let pose2 = CameraPose::new_unchecked(
        *pose.rotation(),
        Vector3::new(t.x, t.y, t.z + (alpha - 1.0) * mean_depth),
    );
    let scaled = crate::estimate::mean_finite(&reprojection_errors_px(&w, &im, &k2, &pose2));
    (scaled - base).abs() < 1.0
}

/// Solves one stage from already-lifted correspondences.
fn solve_stage(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    sample: &Sample,
    cfg: &PipelineConfig,
    stage_seed: u64,
) -> Result<(Estimate, bool), PipelineError> {
    let mut ransac_cfg = cfg.ransac;
    ransac_cfg.seed = stage_seed;
    match cfg.mode {
        PipelineMode::Localize => {
            let est = ransac_pnp(world, image, &sample.intrinsics, &ransac_cfg)?;
            let ambiguous =
                focal_depth_valley(world, image, &est.inlier_mask, &sample.intrinsics, &est.pose);
            Ok((
                Estimate {
                    pose: est.pose,
                    intrinsics: sample.intrinsics,
                    inlier_mask: est.inlier_mask,
                    n_inliers: est.n_inliers,
                    mean_reproj_px: est.mean_reproj_px,
                    lm_converged: None,
                    lm_iterations: None,
                },
                ambiguous,
            ))
        }
        PipelineMode::Calibrate => {
            // Stage one: focal guess = larger image side, principal point
            // at the image center, pose from robust PnP.
            let f0 = CameraIntrinsics::focal_guess(sample.intrinsics.width, sample.intrinsics.height);
            let mut k = CameraIntrinsics::new_unchecked(
                f0,
                f0,
                sample.intrinsics.width as f64 / 2.0,
                sample.intrinsics.height as f64 / 2.0,
                sample.intrinsics.width,
                sample.intrinsics.height,
            );
            let mut pose_est = ransac_pnp(world, image, &k, &ransac_cfg)?;
            let mut lm_result = None;
            for round in 0..=cfg.alternate_rounds {
                // Stage two: joint refinement over the consensus set.
                let w: Vec<Vector3<f64>> = world
                    .iter()
                    .zip(&pose_est.inlier_mask)
                    .filter(|(_, m)| **m)
                    .map(|(p, _)| *p)
                    .collect();
                let im: Vec<Vector2<f64>> = image
                    .iter()
                    .zip(&pose_est.inlier_mask)
                    .filter(|(_, m)| **m)
                    .map(|(p, _)| *p)
                    .collect();
                let refined = refine_lm(&w, &im, &k, &pose_est.pose, &cfg.lm)?;
                k = refined.intrinsics;
                if round < cfg.alternate_rounds {
                    let mut alt_cfg = ransac_cfg;
                    alt_cfg.seed = derive_seed(stage_seed, 1000 + round as u64);
                    pose_est = ransac_pnp(world, image, &k, &alt_cfg)?;
                }
                lm_result = Some(refined);
            }
            let lm_final = lm_result.expect("at least one refinement round runs");

            // Consensus statistics under the refined parameters.
            let errs = reprojection_errors_px(world, image, &k, &lm_final.pose);
            let inlier_mask: Vec<bool> = errs
                .iter()
                .map(|e| *e < cfg.ransac.inlier_threshold_px)
                .collect();
            let n_inliers = inlier_mask.iter().filter(|m| **m).count();
            let inlier_errs: Vec<f64> = errs
                .iter()
                .zip(&inlier_mask)
                .filter(|(_, m)| **m)
                .map(|(e, _)| *e)
                .collect();
            let mean = crate::estimate::mean_finite(&inlier_errs);
            let ambiguous = focal_depth_valley(world, image, &inlier_mask, &k, &lm_final.pose);
            Ok((
                Estimate {
                    pose: lm_final.pose,
                    intrinsics: k,
                    inlier_mask,
                    n_inliers,
                    mean_reproj_px: mean,
                    lm_converged: Some(lm_final.converged),
                    lm_iterations: Some(lm_final.iterations),
                },
                ambiguous,
            ))
        }
    }
}

fn gate_value(
    estimate: &Estimate,
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    gate: GateMetric,
    own_value: f64,
) -> f64 {
    match gate {
        GateMetric::OwnInliers => own_value,
        GateMetric::InitialInliers => {
            let errs = reprojection_errors_px(world, image, &estimate.intrinsics, &estimate.pose);
            crate::estimate::mean_finite(&errs)
        }
    }
}

struct AdhopOutcome {
    refined: Option<Estimate>,
    accepted: bool,
    homography: Option<Homography>,
    homography_inlier_ratio: Option<f64>,
    correspondences: Option<CorrespondenceSet>,
    ambiguous: bool,
}

/// One homography-refinement round: fit a plane-projective warp to the
/// current matches, re-match against the warped DOP, map the new matches
/// back, re-solve, and accept only on error reduction. Failures yield
/// `accepted = false` with the initial result untouched, never an error.
fn refine_adhop(
    sample: &Sample,
    initial_corrs: &CorrespondenceSet,
    initial: &Estimate,
    initial_world: &[Vector3<f64>],
    initial_image: &[Vector2<f64>],
    cfg: &PipelineConfig,
    seed: u64,
) -> AdhopOutcome {
    let rejected = AdhopOutcome {
        refined: None,
        accepted: false,
        homography: None,
        homography_inlier_ratio: None,
        correspondences: None,
        ambiguous: false,
    };
    if initial_corrs.len() < 4 {
        return rejected;
    }

    // (4) Homography from the initial matches: DOP coordinates to
    // query-aligned warp coordinates.
    let src: Vec<Vector2<f64>> = initial_corrs.iter().map(|c| c.dop).collect();
    let dst: Vec<Vector2<f64>> = initial_corrs.iter().map(|c| c.query).collect();
    let mut h_cfg = cfg.ransac;
    h_cfg.seed = derive_seed(seed, 41);
    let Ok((h, h_mask)) = homography_dlt_ransac(&src, &dst, &h_cfg) else {
        return rejected;
    };
    let h_ratio = h_mask.iter().filter(|m| **m).count() as f64 / h_mask.len() as f64;

    // (5) Warp the DOP toward the query perspective and re-match. The fill
    // color is the DOP mean so borders stay featureless.
    let fill = sample.dop.channel_means();
    let Ok(warp) = warp_by_homography(
        &sample.dop,
        &h,
        (sample.query.width, sample.query.height),
        fill,
    ) else {
        return rejected;
    };
    let rematch_choice = cfg.rematch.as_ref().unwrap_or(&cfg.matcher);
    let rematch_seed = derive_seed(seed, 42);
    let warped_corrs = match rematch_choice {
        MatcherChoice::Ncc(params) => {
            let matcher = NccMatcher::new(*params);
            match matcher.match_pair(&sample.query, &warp.image) {
                Ok(set) => set,
                Err(_) => return rejected,
            }
        }
        // Oracle and file-based matchers cannot re-match a warped image;
        // their pairs are carried into warp space through the homography so
        // the rest of the round stays uniform.
        MatcherChoice::Gt(params) => match gt_match(sample, params, rematch_seed) {
            Ok(set) => CorrespondenceSet::from_pairs(
                set.iter()
                    .map(|c| Correspondence {
                        query: c.query,
                        dop: h.apply(&c.dop),
                        confidence: c.confidence,
                    })
                    .collect(),
            ),
            Err(_) => return rejected,
        },
        MatcherChoice::Csv(path) => match crate::io::read_correspondences(path) {
            Ok(pairs) => CorrespondenceSet::from_pairs(
                pairs
                    .into_iter()
                    .map(|c| Correspondence {
                        query: c.query,
                        dop: h.apply(&c.dop),
                        confidence: c.confidence,
                    })
                    .collect(),
            ),
            Err(_) => return rejected,
        },
    };

    // (6) Map warp-space coordinates back into DOP pixel space.
    let Ok(h_inv) = h.inverse() else {
        return rejected;
    };
    let mapped: Vec<Correspondence> = warped_corrs
        .iter()
        .map(|c| Correspondence {
            query: c.query,
            dop: h_inv.apply(&c.dop),
            confidence: c.confidence,
        })
        .collect();
    let mapped = CorrespondenceSet::new_bounded(
        mapped,
        (sample.query.width, sample.query.height),
        (sample.dop.width, sample.dop.height),
    );

    // Confidence/validity filter, plus a field-of-view check against the
    // initial estimate.
    let filtered = filter_matches(
        &mapped,
        &FilterOptions {
            min_confidence: cfg.min_confidence,
            lift: Some((&sample.dop.georef, &sample.dsm)),
            fov: Some((&initial.intrinsics, &initial.pose)),
        },
    );
    if filtered.len() < 4 {
        return rejected;
    }

    // (7) Lift and (8) re-solve.
    let (world, image, kept) = lift_pairs(&filtered, sample);
    if world.len() < 4 {
        return rejected;
    }
    let Ok((refined, ambiguous)) = solve_stage(&world, &image, sample, cfg, derive_seed(seed, 43))
    else {
        return rejected;
    };

    // (9) Acceptance gate on mean reprojection error.
    let initial_value = gate_value(initial, initial_world, initial_image, cfg.gate, initial.mean_reproj_px);
    let refined_value = gate_value(&refined, initial_world, initial_image, cfg.gate, refined.mean_reproj_px);
    let accepted = refined_value < initial_value;

    AdhopOutcome {
        refined: Some(refined),
        accepted,
        homography: Some(h),
        homography_inlier_ratio: Some(h_ratio),
        correspondences: Some(kept),
        ambiguous,
    }
}

fn run_pipeline(sample: &Sample, cfg: &PipelineConfig) -> Result<LocResult, PipelineError> {
    let t_start = Instant::now();

    // (1) Match.
    let t_match = Instant::now();
    let raw = run_matcher(
        &cfg.matcher,
        cfg.rotation_invariant,
        sample,
        &sample.dop,
        derive_seed(cfg.seed, 1),
    )
    .map_err(|e| PipelineError::MatchFailure(e.to_string()))?;
    let filtered = filter_matches(
        &raw,
        &FilterOptions {
            min_confidence: cfg.min_confidence,
            lift: Some((&sample.dop.georef, &sample.dsm)),
            fov: None,
        },
    );
    let match_s = t_match.elapsed().as_secs_f64();
    if filtered.len() < 4 {
        return Err(PipelineError::MatchFailure(format!(
            "only {} matches survive filtering",
            filtered.len()
        )));
    }

    // (2) Lift, (3) solve.
    let t_solve = Instant::now();
    let (world, image, kept) = lift_pairs(&filtered, sample);
    if world.len() < 4 {
        return Err(PipelineError::MatchFailure(
            "fewer than 4 liftable matches".into(),
        ));
    }
    let (initial, initial_ambiguous) = solve_stage(&world, &image, sample, cfg, derive_seed(cfg.seed, 2))?;
    let solve_s = t_solve.elapsed().as_secs_f64();

    // (4)-(9) Optional homography refinement rounds.
    let t_refine = Instant::now();
    let mut result = LocResult {
        initial: initial.clone(),
        refined: None,
        accepted_refinement: false,
        homography: None,
        homography_inlier_ratio: None,
        n_matches_initial: kept.len(),
        n_matches_refined: None,
        correspondences: kept.clone(),
        focal_depth_ambiguous: initial_ambiguous,
        timings: StageTimings::default(),
    };
    if cfg.adhop {
        let mut current_corrs = kept;
        let mut current = initial;
        let mut current_world = world.clone();
        let mut current_image = image.clone();
        for round in 0..cfg.adhop_rounds.max(1) {
            let outcome = refine_adhop(
                sample,
                &current_corrs,
                &current,
                &current_world,
                &current_image,
                cfg,
                derive_seed(cfg.seed, 100 + round as u64),
            );
            if let Some(h) = outcome.homography {
                result.homography = Some(h);
                result.homography_inlier_ratio = outcome.homography_inlier_ratio;
            }
            match (outcome.refined, outcome.accepted) {
                (Some(est), true) => {
                    result.refined = Some(est.clone());
                    result.accepted_refinement = true;
                    result.n_matches_refined = outcome.correspondences.as_ref().map(|c| c.len());
                    result.focal_depth_ambiguous = outcome.ambiguous;
                    if let Some(corrs) = outcome.correspondences {
                        result.correspondences = corrs.clone();
                        let (w, im, _) = lift_pairs(&corrs, sample);
                        current_world = w;
                        current_image = im;
                        current_corrs = corrs;
                    }
                    current = est;
                }
                (Some(est), false) => {
                    // Keep the rejected attempt for inspection; the gate
                    // leaves the reported result at the initial estimate.
                    if result.refined.is_none() {
                        result.refined = Some(est);
                        result.n_matches_refined = outcome.correspondences.map(|c| c.len());
                    }
                    break;
                }
                (None, _) => break,
            }
        }
    }
    result.timings = StageTimings {
        match_s,
        solve_s,
        refine_s: t_refine.elapsed().as_secs_f64(),
        total_s: t_start.elapsed().as_secs_f64(),
    };
    Ok(result)
}

/// 6-DoF localization with known intrinsics: the matching/lifting/solving
/// stage plus the optional homography refinement.
pub fn localize(sample: &Sample, cfg: &PipelineConfig) -> Result<LocResult, PipelineError> {
    let cfg = PipelineConfig {
        mode: PipelineMode::Localize,
        ..cfg.clone()
    };
    run_pipeline(sample, &cfg)
}

/// Joint localization and calibration: stage one solves the pose under the
/// focal-length guess, stage two refines intrinsics and extrinsics.
pub fn calibrate(sample: &Sample, cfg: &PipelineConfig) -> Result<LocResult, PipelineError> {
    let cfg = PipelineConfig {
        mode: PipelineMode::Calibrate,
        ..cfg.clone()
    };
    run_pipeline(sample, &cfg)
}
