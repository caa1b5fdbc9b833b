//! Perspective camera model: intrinsics, world-to-camera pose, projection,
//! unprojection, and reprojection residuals.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::nearest_rotation;

/// Depth below which a point counts as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-9;

/// Orthonormality tolerance enforced when constructing a pose.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {0:.3e} m)")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation matrix is not orthonormal with determinant +1 (tolerance {ROTATION_TOLERANCE:.0e})")]
    NotARotation,
    #[error("invalid georeference: {0}")]
    InvalidGeoRef(String),
    #[error("empty correspondence list")]
    EmptyCorrespondences,
    #[error("coordinate ({0:.2}, {1:.2}) outside raster bounds")]
    OutOfBounds(f64, f64),
    #[error("raster cell is marked as no-data")]
    NoData,
}

/// Pinhole intrinsics in pixels. `fx`, `fy` are focal lengths, `(cx, cy)`
/// the principal point, and `width`/`height` the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Validated constructor: positive focal lengths, principal point inside
    /// the image.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self::new_unchecked(fx, fy, cx, cy, width, height))
    }

    /// Skips validation; intended for test fixtures with synthetic values.
    pub fn new_unchecked(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Average of `fx` and `fy`; used as the scalar focal under the shared
    /// focal constraint.
    pub fn shared_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Standard initial focal guess for calibration: the larger image side.
    pub fn focal_guess(width: u32, height: u32) -> f64 {
        width.max(height) as f64
    }

    /// Same intrinsics with both focal lengths replaced by `f`.
    pub fn with_shared_focal(&self, f: f64) -> Self {
        Self {
            fx: f,
            fy: f,
            ..*self
        }
    }

    /// True when a pixel coordinate lies inside the image area
    /// (pixel-center convention, half a pixel of margin at the border).
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5 && p.x <= self.width as f64 - 0.5 && p.y >= -0.5 && p.y <= self.height as f64 - 0.5
    }
}

/// World-to-camera rigid transform: `p_cam = R * p_world + t`.
///
/// The rotation is guaranteed orthonormal with determinant +1 by the checked
/// constructor. Poses built from a quaternion remember it so serializing
/// them back reproduces the original bytes (matrix-to-quaternion extraction
/// is not a bitwise inverse of the quaternion-to-matrix build).
#[derive(Debug, Clone, Copy)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    source_quaternion: Option<[f64; 4]>,
}

impl PartialEq for CameraPose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if orth > ROTATION_TOLERANCE * 10.0_f64.sqrt() || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotARotation);
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
            source_quaternion: None,
        })
    }

    /// Skips the orthonormality check.
    pub fn new_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            source_quaternion: None,
        }
    }

    /// Re-orthonormalizes `rotation` before storing, for inputs assembled
    /// from noisy numerics.
    pub fn from_parts_renormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
            source_quaternion: None,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            source_quaternion: None,
        }
    }

    /// Pose from a camera center in world coordinates: `t = -R * C`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, GeometryError> {
        let t = -rotation * center;
        Self::new(rotation, t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates: `C = -R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies a left rigid increment in the camera frame:
    /// `R <- exp(w^) R`, `t <- exp(w^) t + dt`.
    pub fn apply_increment(&self, w: &Vector3<f64>, dt: &Vector3<f64>) -> Self {
        let dr = crate::rotation::so3_exp(w);
        Self {
            rotation: nearest_rotation(&(dr * self.rotation)),
            translation: dr * self.translation + dt,
            source_quaternion: None,
        }
    }

    /// Builds a pose from a unit quaternion (`w, x, y, z`) and translation;
    /// used at serialization boundaries.
    pub fn from_quaternion(
        qw: f64,
        qx: f64,
        qy: f64,
        qz: f64,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let uq = nalgebra::UnitQuaternion::try_new(q, 1e-12).ok_or(GeometryError::NotARotation)?;
        let mut pose = Self::new(*uq.to_rotation_matrix().matrix(), translation)?;
        pose.source_quaternion = Some([qw, qx, qy, qz]);
        Ok(pose)
    }

    /// Quaternion `(w, x, y, z)` for the stored rotation. When the pose was
    /// built from a quaternion, that exact quaternion comes back.
    pub fn to_quaternion(&self) -> [f64; 4] {
        if let Some(q) = self.source_quaternion {
            return q;
        }
        let uq = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(self.rotation),
        );
        let q = uq.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// Projects a world point through `(K, T)`. Returns the pixel coordinate
/// and the depth along the optical axis.
pub fn project_perspective(
    p: &Vector3<f64>,
    k: &CameraIntrinsics,
    t: &CameraPose,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let pc = t.transform_point(p);
    if pc.z <= DEPTH_EPSILON {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    Ok((Vector2::new(u, v), pc.z))
}

/// Inverse of [`project_perspective`] at a known depth.
pub fn unproject_perspective(
    p: &Vector2<f64>,
    depth: f64,
    k: &CameraIntrinsics,
    t: &CameraPose,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let xc = (p.x - k.cx) / k.fx * depth;
    let yc = (p.y - k.cy) / k.fy * depth;
    let pc = Vector3::new(xc, yc, depth);
    Ok(t.rotation().transpose() * (pc - t.translation()))
}

/// Single reprojection residual `projected - observed`. Behind-camera points
/// yield an infinite-magnitude residual so robust scoring can discard them
/// without aborting a batch.
pub fn residual(
    p3: &Vector3<f64>,
    p2: &Vector2<f64>,
    k: &CameraIntrinsics,
    t: &CameraPose,
) -> Vector2<f64> {
    match project_perspective(p3, k, t) {
        Ok((proj, _)) => proj - p2,
        Err(_) => Vector2::new(f64::INFINITY, f64::INFINITY),
    }
}

/// Residual vectors for a batch of 3D-2D correspondences.
pub fn reprojection_residuals(
    corrs: &[(Vector3<f64>, Vector2<f64>)],
    k: &CameraIntrinsics,
    t: &CameraPose,
) -> Result<Vec<Vector2<f64>>, GeometryError> {
    if corrs.is_empty() {
        return Err(GeometryError::EmptyCorrespondences);
    }
    Ok(corrs.iter().map(|(p3, p2)| residual(p3, p2, k, t)).collect())
}
