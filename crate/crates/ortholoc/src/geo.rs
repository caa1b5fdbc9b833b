//! Georeferencing and the orthographic (nadir) projection model, plus the
//! lifting of orthophoto pixels to 3D points through an elevation raster.
//!
//! Raster coordinates follow the pixel-center convention: pixel `(0, 0)`
//! is the center of the top-left cell, so the world position of pixel
//! `(x, y)` is `(origin_x + scale_x * x, origin_y + scale_y * y)`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::GeometryError;
use crate::raster::Raster;

/// Geographic anchoring of a raster grid: world position of pixel (0, 0)
/// and signed meters-per-pixel scales.
///
/// Standard geodata puts the origin at the top-left corner with
/// `scale_x > 0` and `scale_y < 0`; [`GeoRef::follows_raster_convention`]
/// reports whether that holds (violations are legal, just unusual).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl GeoRef {
    pub fn new(origin_x: f64, origin_y: f64, scale_x: f64, scale_y: f64) -> Result<Self, GeometryError> {
        if scale_x == 0.0 || scale_y == 0.0 || !scale_x.is_finite() || !scale_y.is_finite() {
            return Err(GeometryError::InvalidGeoRef(format!(
                "scales must be nonzero and finite, got ({scale_x}, {scale_y})"
            )));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(GeometryError::InvalidGeoRef("non-finite origin".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            scale_x,
            scale_y,
        })
    }

    /// `scale_x > 0 && scale_y < 0`, the usual top-left-origin convention.
    pub fn follows_raster_convention(&self) -> bool {
        self.scale_x > 0.0 && self.scale_y < 0.0
    }

    /// World XY of a (fractional) pixel coordinate.
    pub fn pixel_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        (self.origin_x + self.scale_x * x, self.origin_y + self.scale_y * y)
    }

    /// (Fractional) pixel coordinate of a world XY position.
    pub fn world_to_pixel(&self, wx: f64, wy: f64) -> (f64, f64) {
        ((wx - self.origin_x) / self.scale_x, (wy - self.origin_y) / self.scale_y)
    }
}

/// Nadir orthographic camera over a georeferenced raster grid. Rays are
/// vertical and parallel, so the Z component of a world point never affects
/// its projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub georef: GeoRef,
}

impl OrthoCamera {
    pub fn new(georef: GeoRef) -> Self {
        Self { georef }
    }

    /// Projects a world point to raster pixel coordinates. Out-of-raster
    /// results are legal outputs; bounds are the caller's concern.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let (x, y) = self.georef.world_to_pixel(p.x, p.y);
        Vector2::new(x, y)
    }

    /// The projection assembled as an explicit `K * Pi * T` product with
    /// `fx = 1/scale_x`, `fy = 1/scale_y`, identity rotation, and a
    /// projection matrix that drops Z. Applying it to a homogeneous point
    /// must agree with [`OrthoCamera::project`].
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let k = Matrix3::new(
            1.0 / self.georef.scale_x,
            0.0,
            0.0,
            0.0,
            1.0 / self.georef.scale_y,
            0.0,
            0.0,
            0.0,
            1.0,
        );
        let pi = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let t = Matrix4::new(
            1.0,
            0.0,
            0.0,
            -self.georef.origin_x,
            0.0,
            1.0,
            0.0,
            -self.georef.origin_y,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
        );
        k * pi * t
    }

    /// Projects via the assembled matrix; exists so tests can check the
    /// decomposition against the closed form.
    pub fn project_via_matrix(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let hp = self.projection_matrix() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector2::new(hp.x / hp.z, hp.y / hp.z)
    }
}

/// Projects a world point onto a georeferenced raster grid.
pub fn project_ortho(p: &Vector3<f64>, cam: &OrthoCamera) -> Vector2<f64> {
    cam.project(p)
}

/// Affine map between the pixel grids of two georeferenced rasters, derived
/// from their origins and scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterMap {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl RasterMap {
    /// Map taking pixel coordinates of `src` to pixel coordinates of `dst`.
    pub fn between(src: &GeoRef, dst: &GeoRef) -> Self {
        Self {
            scale_x: src.scale_x / dst.scale_x,
            scale_y: src.scale_y / dst.scale_y,
            offset_x: (src.origin_x - dst.origin_x) / dst.scale_x,
            offset_y: (src.origin_y - dst.origin_y) / dst.scale_y,
        }
    }

    pub fn identity() -> Self {
        Self {
            scale_x: 1.0,
            scale_y: 1.0,
            offset_x: 0.0,
            offset_y: 0.0,
        }
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(self.scale_x * p.x + self.offset_x, self.scale_y * p.y + self.offset_y)
    }

    /// The map as a homogeneous 3x3 matrix.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.scale_x,
            0.0,
            self.offset_x,
            0.0,
            self.scale_y,
            self.offset_y,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Interpolation mode for raster sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    Nearest,
    Bilinear,
}

/// Lifts an orthophoto pixel to a 3D world point: XY from the orthophoto
/// georeferencing, Z sampled from the elevation raster through `map`.
///
/// No-data detection always uses the nearest cell (interpolating across a
/// sentinel is meaningless); in bilinear mode the elevation interpolates
/// over the valid neighbors.
pub fn lift_dop_to_3d(
    p_dop: &Vector2<f64>,
    dop_georef: &GeoRef,
    dsm: &Raster,
    map: &RasterMap,
    mode: SampleMode,
) -> Result<Vector3<f64>, GeometryError> {
    let (wx, wy) = dop_georef.pixel_to_world(p_dop.x, p_dop.y);
    let p_dsm = map.apply(p_dop);
    let z = dsm.sample_single(p_dsm.x, p_dsm.y, mode)?;
    Ok(Vector3::new(wx, wy, z))
}
