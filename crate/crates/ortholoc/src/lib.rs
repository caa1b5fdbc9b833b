//! UAV camera localization and calibration against orthographic geodata.
//!
//! Given a perspective query image, a georeferenced orthophoto raster (DOP)
//! and a co-registered elevation raster (DSM), this crate estimates the
//! 6-DoF camera pose and, optionally, the focal length. The pipeline is:
//!
//! 1. match 2D-2D features between the query image and the DOP,
//! 2. lift the DOP side of each match to 3D by reading the DSM elevation,
//! 3. solve the pose with RANSAC-EPnP (and refine intrinsics with
//!    Levenberg-Marquardt in calibration mode),
//! 4. optionally run one round of homography refinement: fit a homography to
//!    the initial matches, warp the DOP toward the query perspective,
//!    re-match, map the matches back, solve again, and keep the refined
//!    result only if it lowers the mean reprojection error.
//!
//! The crate also ships a synthetic scene generator (analytic heightfield
//! plus box buildings) used as a ground-truth oracle, an evaluation-metric
//! suite, and batch benchmark/ablation drivers. The `ortholoc-cli` crate
//! exposes all of it on the command line.

pub mod adhop;
pub mod bench;
pub mod camera;
pub mod estimate;
pub mod geo;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod raster;
pub mod rotation;
pub mod sample;
pub mod synth;

pub use adhop::{localize, calibrate, Estimate, LocResult, MatcherChoice, PipelineConfig, PipelineMode};
pub use camera::{
    project_perspective, reprojection_residuals, unproject_perspective, CameraIntrinsics,
    CameraPose, GeometryError,
};
pub use estimate::{
    epnp, homography_dlt_ransac, ransac_pnp, refine_lm, warp_by_homography, CalibEstimate,
    EstimateError, Homography, LmOptions, PoseEstimate, RansacConfig,
};
pub use geo::{lift_dop_to_3d, project_ortho, GeoRef, OrthoCamera, RasterMap, SampleMode};
pub use matching::{
    filter_matches, gt_match, ncc_match, rotation_invariant_match, Correspondence,
    CorrespondenceSet, MatchError, Matcher, NccParams,
};
pub use metrics::MetricBundle;
pub use raster::{resample, Raster, RasterData, RasterError};
pub use sample::{crop_covis, PointMap, Sample};
pub use synth::{
    anonymize, domain_shift, pair_sample, rasterize_dsm, render_dop, render_query, BuildingSpec,
    DomainShiftKind, PairOptions, SceneSpec, TerrainSpec, TextureSpec, ViewSpec,
};
