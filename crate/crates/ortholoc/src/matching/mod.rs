//! Correspondence data model, the pluggable matcher contract, confidence
//! and validity filtering, and the four-orientation rotation wrapper.

mod gt;
mod ncc;

pub use gt::{gt_match, GtMatchParams};
pub use ncc::{ncc_match, NccMatcher, NccParams};

use nalgebra::Vector2;
use thiserror::Error;

use crate::camera::{project_perspective, CameraIntrinsics, CameraPose};
use crate::geo::{lift_dop_to_3d, GeoRef, RasterMap, SampleMode};
use crate::raster::{Raster, RasterData};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("no usable features found")]
    NoFeatures,
    #[error("only {found} valid ground-truth points survive, need at least 4")]
    InsufficientValidPoints { found: usize },
    #[error("sample lacks the ground truth required by the oracle matcher")]
    MissingGroundTruth,
    #[error("invalid matcher parameter: {0}")]
    InvalidParameter(String),
    #[error("matching failed in all four orientations: {0}")]
    AllOrientationsFailed(String),
    #[error("matcher input must be a 3-channel image")]
    NotAnImage,
}

/// One 2D-2D match between a query pixel and a DOP pixel, with a confidence
/// in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub query: Vector2<f64>,
    pub dop: Vector2<f64>,
    pub confidence: f64,
}

/// A set of scored matches. Construction drops non-finite coordinates and
/// clamps confidences into [0, 1]; the bounds-checked constructor also
/// drops pairs outside their respective images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    /// Keeps only pairs with finite coordinates inside the given query and
    /// DOP pixel bounds (pixel-center convention).
    pub fn new_bounded(
        pairs: Vec<Correspondence>,
        query_dims: (u32, u32),
        dop_dims: (u32, u32),
    ) -> Self {
        let inside = |p: &Vector2<f64>, (w, h): (u32, u32)| {
            p.x >= -0.5 && p.x <= w as f64 - 0.5 && p.y >= -0.5 && p.y <= h as f64 - 0.5
        };
        let pairs = pairs
            .into_iter()
            .filter(|c| {
                c.query.iter().all(|v| v.is_finite())
                    && c.dop.iter().all(|v| v.is_finite())
                    && c.confidence.is_finite()
                    && inside(&c.query, query_dims)
                    && inside(&c.dop, dop_dims)
            })
            .map(|mut c| {
                c.confidence = c.confidence.clamp(0.0, 1.0);
                c
            })
            .collect();
        Self { pairs }
    }

    /// Trusts coordinates as-is (still clamps confidence). For internal
    /// construction from already-validated data.
    pub fn from_pairs(pairs: Vec<Correspondence>) -> Self {
        let pairs = pairs
            .into_iter()
            .filter(|c| {
                c.query.iter().all(|v| v.is_finite()) && c.dop.iter().all(|v| v.is_finite())
            })
            .map(|mut c| {
                c.confidence = c.confidence.clamp(0.0, 1.0);
                c
            })
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Correspondence> {
        self.pairs.iter()
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }
}

/// Behavior contract for feature matchers: given a query image and a DOP,
/// produce scored 2D-2D matches.
pub trait Matcher {
    fn match_pair(&self, query: &Raster, dop: &Raster) -> Result<CorrespondenceSet, MatchError>;

    /// Whether the matcher already handles arbitrary in-plane rotation.
    fn rotation_invariant(&self) -> bool {
        false
    }
}

/// Optional criteria for [`filter_matches`].
#[derive(Clone, Copy, Default)]
pub struct FilterOptions<'a> {
    /// Drop pairs with confidence strictly below this value.
    pub min_confidence: f64,
    /// When present, drop pairs whose DOP pixel cannot be lifted to a valid
    /// 3D point (no-data cell or outside the DSM).
    pub lift: Option<(&'a GeoRef, &'a Raster)>,
    /// When present, drop pairs whose lifted 3D point falls outside the
    /// camera's field of view under this pose.
    pub fov: Option<(&'a CameraIntrinsics, &'a CameraPose)>,
}

/// Drops pairs failing any enabled criterion; order is preserved and the
/// operation is idempotent.
pub fn filter_matches(corrs: &CorrespondenceSet, opts: &FilterOptions<'_>) -> CorrespondenceSet {
    let kept = corrs
        .iter()
        .filter(|c| {
            if c.confidence < opts.min_confidence {
                return false;
            }
            if opts.lift.is_none() && opts.fov.is_none() {
                return true;
            }
            if let Some((dop_georef, dsm)) = opts.lift {
                let map = RasterMap::between(dop_georef, &dsm.georef);
                match lift_dop_to_3d(&c.dop, dop_georef, dsm, &map, SampleMode::Bilinear) {
                    Ok(p3) => {
                        if let Some((k, pose)) = opts.fov {
                            match project_perspective(&p3, k, pose) {
                                Ok((px, _)) => k.contains(&px),
                                Err(_) => false,
                            }
                        } else {
                            true
                        }
                    }
                    Err(_) => false,
                }
            } else {
                true
            }
        })
        .cloned()
        .collect();
    CorrespondenceSet { pairs: kept }
}

/// Rotates a 3-channel image clockwise by `quarter_turns` * 90 degrees.
pub fn rotate90_image(r: &Raster, quarter_turns: u8) -> Result<Raster, MatchError> {
    let RasterData::U8(_) = r.data else {
        return Err(MatchError::NotAnImage);
    };
    let mut cur = r.clone();
    for _ in 0..(quarter_turns % 4) {
        let (w, h) = (cur.width, cur.height);
        let mut out = vec![0u8; (w * h * 3) as usize];
        for y in 0..h {
            for x in 0..w {
                let px = cur.pixel_u8(x, y);
                // Clockwise: (x, y) -> (h - 1 - y, x) in the (h, w) output.
                let nx = h - 1 - y;
                let ny = x;
                let i = ((ny * h + nx) * 3) as usize;
                out[i..i + 3].copy_from_slice(&px);
            }
        }
        cur = Raster {
            width: h,
            height: w,
            channels: 3,
            data: RasterData::U8(out),
            georef: cur.georef,
            nodata: cur.nodata,
        };
    }
    Ok(cur)
}

/// Maps a pixel coordinate in an image rotated by `quarter_turns` clockwise
/// back into the original image frame (`orig_w` x `orig_h`).
pub fn unrotate_coord(p: &Vector2<f64>, quarter_turns: u8, orig_w: u32, orig_h: u32) -> Vector2<f64> {
    let mut p = *p;
    for j in (0..(quarter_turns % 4)).rev() {
        let (_, h) = if j % 2 == 0 {
            (orig_w, orig_h)
        } else {
            (orig_h, orig_w)
        };
        // Inverse of the clockwise turn applied to an image of height h.
        p = Vector2::new(p.y, (h as f64 - 1.0) - p.x);
    }
    p
}

/// Runs the matcher with the query in four orientations (0, 90, 180, 270
/// degrees), keeps the orientation with the most matches (ties break toward
/// the smallest angle), and maps the winning query coordinates back through
/// the exact inverse rotation.
pub fn rotation_invariant_match(
    matcher: &dyn Matcher,
    query: &Raster,
    dop: &Raster,
) -> Result<CorrespondenceSet, MatchError> {
    let mut best: Option<(u8, CorrespondenceSet)> = None;
    let mut last_err = String::new();
    for k in 0..4u8 {
        let rotated = rotate90_image(query, k)?;
        match matcher.match_pair(&rotated, dop) {
            Ok(set) => {
                let better = match &best {
                    Some((_, b)) => set.len() > b.len(),
                    None => true,
                };
                if better {
                    best = Some((k, set));
                }
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    match best {
        Some((k, set)) => {
            let pairs = set
                .iter()
                .map(|c| Correspondence {
                    query: unrotate_coord(&c.query, k, query.width, query.height),
                    dop: c.dop,
                    confidence: c.confidence,
                })
                .collect();
            Ok(CorrespondenceSet::from_pairs(pairs))
        }
        None => Err(MatchError::AllOrientationsFailed(last_err)),
    }
}
