//! The dataset sample: query image, per-pixel 3D point map, paired DOP/DSM
//! crops, camera parameters, and verification keypoints.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{project_perspective, CameraIntrinsics, CameraPose};
use crate::raster::{Raster, RasterError, DEFAULT_NODATA};

/// Per-pixel 3D world coordinates for a query image, with a shared sentinel
/// marking pixels that saw no surface.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: u32,
    pub height: u32,
    pub sentinel: f32,
    data: Vec<[f32; 3]>,
}

impl PointMap {
    pub fn new_invalid(width: u32, height: u32) -> Self {
        let sentinel = DEFAULT_NODATA as f32;
        Self {
            width,
            height,
            sentinel,
            data: vec![[sentinel; 3]; width as usize * height as usize],
        }
    }

    pub fn from_parts(
        width: u32,
        height: u32,
        sentinel: f32,
        data: Vec<[f32; 3]>,
    ) -> Result<Self, RasterError> {
        if data.len() != width as usize * height as usize {
            return Err(RasterError::InconsistentDims(format!(
                "point map has {} entries for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            sentinel,
            data,
        })
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.data[self.idx(x, y)][2] != self.sentinel
    }

    pub fn set(&mut self, x: u32, y: u32, p: &Vector3<f64>) {
        let i = self.idx(x, y);
        self.data[i] = [p.x as f32, p.y as f32, p.z as f32];
    }

    pub fn set_invalid(&mut self, x: u32, y: u32) {
        let i = self.idx(x, y);
        self.data[i] = [self.sentinel; 3];
    }

    pub fn get(&self, x: u32, y: u32) -> Option<Vector3<f64>> {
        if x >= self.width || y >= self.height || !self.is_valid(x, y) {
            return None;
        }
        let v = self.data[self.idx(x, y)];
        Some(Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64))
    }

    /// Valid entries as `(x, y, point)`.
    pub fn iter_valid(&self) -> impl Iterator<Item = (u32, u32, Vector3<f64>)> + '_ {
        (0..self.height).flat_map(move |y| {
            (0..self.width).filter_map(move |x| self.get(x, y).map(|p| (x, y, p)))
        })
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v[2] != self.sentinel).count()
    }

    /// Raw channel planes, for serialization.
    pub fn channel_plane(&self, c: usize) -> Vec<f32> {
        self.data.iter().map(|v| v[c]).collect()
    }

    /// Applies a translation to every valid entry, leaving sentinels alone.
    pub fn translate(&mut self, offset: &Vector3<f64>) {
        for v in &mut self.data {
            if v[2] != self.sentinel {
                v[0] = (v[0] as f64 + offset.x) as f32;
                v[1] = (v[1] as f64 + offset.y) as f32;
                v[2] = (v[2] as f64 + offset.z) as f32;
            }
        }
    }
}

/// One benchmark sample: a perspective query image paired with the
/// orthographic reference data that covers it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub query: Raster,
    pub point_map: PointMap,
    pub dop: Raster,
    pub dsm: Raster,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Option<CameraPose>,
    pub keypoints3d: Vec<Vector3<f64>>,
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    /// Structural validation: matching dimensions, and (when ground truth is
    /// present) every valid point-map entry reprojects into the query image
    /// within half a pixel.
    pub fn validate(&self) -> Result<(), RasterError> {
        if self.point_map.width != self.query.width || self.point_map.height != self.query.height {
            return Err(RasterError::InconsistentDims(format!(
                "point map {}x{} vs query {}x{}",
                self.point_map.width, self.point_map.height, self.query.width, self.query.height
            )));
        }
        if self.intrinsics.width != self.query.width || self.intrinsics.height != self.query.height
        {
            return Err(RasterError::InconsistentDims(
                "intrinsics image size does not match the query raster".into(),
            ));
        }
        if let Some(pose) = &self.gt_pose {
            for (x, y, p) in self.point_map.iter_valid() {
                let (proj, _) = project_perspective(&p, &self.intrinsics, pose).map_err(|_| {
                    RasterError::InconsistentDims(format!(
                        "point map entry at ({x}, {y}) lies behind the ground-truth camera"
                    ))
                })?;
                let err = (proj - Vector2::new(x as f64, y as f64)).norm();
                if err >= 0.5 {
                    return Err(RasterError::InconsistentDims(format!(
                        "point map entry at ({x}, {y}) reprojects {err:.3} px away"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of valid point-map entries whose world XY falls inside the
    /// DOP raster.
    pub fn covisibility(&self) -> f64 {
        let mut total = 0usize;
        let mut inside = 0usize;
        for (_, _, p) in self.point_map.iter_valid() {
            total += 1;
            let (px, py) = self.dop.georef.world_to_pixel(p.x, p.y);
            if self.dop.in_bounds(px, py) {
                inside += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            inside as f64 / total as f64
        }
    }
}

/// Measured covisibility if the DOP were cropped to the given pixel window.
fn covis_for_window(sample: &Sample, x0: u32, y0: u32, w: u32, h: u32) -> f64 {
    let g = &sample.dop.georef;
    let mut total = 0usize;
    let mut inside = 0usize;
    for (_, _, p) in sample.point_map.iter_valid() {
        total += 1;
        let (px, py) = g.world_to_pixel(p.x, p.y);
        if px >= x0 as f64 - 0.5
            && px <= (x0 + w) as f64 - 0.5
            && py >= y0 as f64 - 0.5
            && py <= (y0 + h) as f64 - 0.5
        {
            inside += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// Crops the reference rasters so that only `covis_ratio` of the valid query
/// points remain covered, within ±0.02. The crop anchor corner is chosen by
/// the seeded RNG; the window shrinks toward it.
pub fn crop_covis(sample: &Sample, covis_ratio: f64, rng_seed: u64) -> Result<Sample, RasterError> {
    if !(covis_ratio > 0.0 && covis_ratio <= 1.0) {
        return Err(RasterError::Unachievable(covis_ratio));
    }
    if covis_ratio == 1.0 {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let corner = rng.random_range(0..4u8);
    let (dw, dh) = (sample.dop.width, sample.dop.height);

    let window = |frac: f64| -> (u32, u32, u32, u32) {
        let w = ((dw as f64 * frac).round() as u32).clamp(1, dw);
        let h = ((dh as f64 * frac).round() as u32).clamp(1, dh);
        let (x0, y0) = match corner {
            0 => (0, 0),
            1 => (dw - w, 0),
            2 => (0, dh - h),
            _ => (dw - w, dh - h),
        };
        (x0, y0, w, h)
    };

    let tol = 0.02;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut chosen = None;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let (x0, y0, w, h) = window(mid);
        let c = covis_for_window(sample, x0, y0, w, h);
        if (c - covis_ratio).abs() <= tol {
            chosen = Some((x0, y0, w, h));
            break;
        }
        if c > covis_ratio {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (x0, y0, w, h) = chosen.ok_or(RasterError::Unachievable(covis_ratio))?;

    // The DSM crop covers the same world window, via its own georef.
    let dop_crop = sample.dop.crop(x0, y0, w, h)?;
    let map = crate::geo::RasterMap::between(&sample.dop.georef, &sample.dsm.georef);
    let c0 = map.apply(&nalgebra::Vector2::new(x0 as f64, y0 as f64));
    let c1 = map.apply(&nalgebra::Vector2::new((x0 + w - 1) as f64, (y0 + h - 1) as f64));
    let (sx0, sx1) = (c0.x.min(c1.x), c0.x.max(c1.x));
    let (sy0, sy1) = (c0.y.min(c1.y), c0.y.max(c1.y));
    let sx0 = (sx0.floor().max(0.0) as u32).min(sample.dsm.width - 1);
    let sy0 = (sy0.floor().max(0.0) as u32).min(sample.dsm.height - 1);
    let sx1 = (sx1.ceil().max(0.0) as u32).min(sample.dsm.width - 1);
    let sy1 = (sy1.ceil().max(0.0) as u32).min(sample.dsm.height - 1);
    let dsm_crop = sample.dsm.crop(sx0, sy0, sx1 - sx0 + 1, sy1 - sy0 + 1)?;

    let mut out = sample.clone();
    out.dop = dop_crop;
    out.dsm = dsm_crop;
    Ok(out)
}
