//! Synthetic scene and sample generation: an analytic heightfield (smooth
//! value noise plus axis-aligned box buildings) with procedural albedo.
//! Every surface is a closed-form function, so rendered point maps, DSM
//! rasters, and orthophotos are exact and usable as ground-truth oracles.

mod augment;
mod render;

pub use augment::{anonymize, domain_shift, DomainShiftKind};
pub use render::{pair_sample, pair_sample_from, rasterize_dsm, render_dop, render_query, PairOptions};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::raster::RasterError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("camera center is inside or below the scene surface")]
    CameraInsideGeometry,
    #[error("view footprint lies outside the scene")]
    FootprintOutsideScene,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Smooth multi-octave terrain relief added to the base elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    /// Peak-to-mean amplitude of the first octave, meters.
    pub amplitude_m: f64,
    /// Horizontal size of the largest features, meters.
    pub feature_scale_m: f64,
    pub octaves: u32,
    pub seed: u64,
}

/// Axis-aligned box building; the roof sits at base elevation + height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingSpec {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub height_m: f64,
}

/// Ground albedo definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TextureSpec {
    /// Exact two-tone checkerboard.
    Checker { period_m: f64 },
    /// Smooth noise shading with dark road lines; high-contrast and
    /// band-limited so template correlation works across renderings.
    Procedural {
        seed: u64,
        detail_m: f64,
        road_spacing_m: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Scene rectangle: x in [0, extent.0], y in [0, extent.1] meters.
    pub extent_m: (f64, f64),
    pub base_elevation_m: f64,
    pub terrain: Option<TerrainSpec>,
    pub buildings: Vec<BuildingSpec>,
    pub texture: TextureSpec,
    /// Raster cell size for the DSM/DOP renderings, meters per pixel.
    pub raster_scale_m: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent_m: (128.0, 128.0),
            base_elevation_m: 100.0,
            terrain: None,
            buildings: Vec::new(),
            texture: TextureSpec::Procedural {
                seed: 1,
                detail_m: 4.0,
                road_spacing_m: 40.0,
            },
            raster_scale_m: 0.05,
        }
    }
}

/// Camera placement relative to a look-at point: `altitude_m` above it,
/// tilted `obliqueness_deg` from nadir toward `azimuth_deg`, with an
/// optional in-plane image rotation `yaw_deg`.
///
/// At zero yaw the image axes stay aligned with the raster grid (image x
/// east, image y south) for every azimuth, so correlation-based matching
/// remains possible; arbitrary yaw exercises the rotation-invariance
/// machinery instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub altitude_m: f64,
    pub obliqueness_deg: f64,
    pub azimuth_deg: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    pub intrinsics: CameraIntrinsics,
    pub look_at: [f64; 3],
}

impl ViewSpec {
    /// World-to-camera pose for this view. Camera x is horizontal, camera z
    /// points along the viewing direction.
    pub fn camera_pose(&self) -> Result<CameraPose, SynthError> {
        if !(0.0..=85.0).contains(&self.obliqueness_deg) {
            return Err(SynthError::InvalidSpec(format!(
                "obliqueness {} outside [0, 85] degrees",
                self.obliqueness_deg
            )));
        }
        let theta = self.obliqueness_deg.to_radians();
        let phi = self.azimuth_deg.to_radians();
        let yaw = self.yaw_deg.to_radians();

        // Nadir basis aligned with the raster grid, yawed in-plane.
        let right0 = Vector3::new(yaw.cos(), -yaw.sin(), 0.0);
        let down0 = Vector3::new(-yaw.sin(), -yaw.cos(), 0.0);
        let forward0 = Vector3::new(0.0, 0.0, -1.0);

        // Tilt toward the azimuth direction without twisting the image.
        let axis = Vector3::new(phi.sin(), -phi.cos(), 0.0) * theta;
        let tilt = crate::rotation::so3_exp(&axis);
        let right = tilt * right0;
        let down = tilt * down0;
        let forward = tilt * forward0;

        let look = Vector3::new(self.look_at[0], self.look_at[1], self.look_at[2]);
        let center = look - forward * (self.altitude_m / theta.cos());
        #[rustfmt::skip]
        let r_c2w = Matrix3::new(
            right.x, down.x, forward.x,
            right.y, down.y, forward.y,
            right.z, down.z, forward.z,
        );
        CameraPose::from_center(r_c2w.transpose(), center)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }
}

/// Geometry quantum for generated coordinates and elevations: a power of
/// two near one millimeter. Storing dyadic multiples keeps f32 rasters and
/// point maps exact under integer-meter coordinate shifts, so the
/// anonymization transform is lossless on stored data.
pub const GEOMETRY_QUANTUM: f64 = 1.0 / 1024.0;

pub(crate) fn quantize(v: f64) -> f64 {
    (v / GEOMETRY_QUANTUM).round() * GEOMETRY_QUANTUM
}

pub(crate) fn quantize_point(p: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(quantize(p.x), quantize(p.y), quantize(p.z))
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    // splitmix64 over the packed lattice coordinate.
    let mut z = (ix as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iy as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(seed.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in [0, 1] with smoothstep easing; C1 in (x, y).
pub(crate) fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let fx = smoothstep(x - ix);
    let fy = smoothstep(y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash2(ix, iy, seed);
    let v10 = hash2(ix + 1, iy, seed);
    let v01 = hash2(ix, iy + 1, seed);
    let v11 = hash2(ix + 1, iy + 1, seed);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Compiled scene: the closed-form surface and albedo functions, plus a
/// slope bound used by the conservative ray march.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    lipschitz: f64,
    max_height: f64,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self, SynthError> {
        if !(spec.extent_m.0 > 0.0 && spec.extent_m.1 > 0.0) {
            return Err(SynthError::InvalidSpec("extent must be positive".into()));
        }
        if !(spec.raster_scale_m > 0.0) {
            return Err(SynthError::InvalidSpec("raster scale must be positive".into()));
        }
        for (i, b) in spec.buildings.iter().enumerate() {
            if b.height_m < 0.0 {
                return Err(SynthError::InvalidSpec(format!("building {i} has negative height")));
            }
            if !(b.x0 < b.x1 && b.y0 < b.y1) {
                return Err(SynthError::InvalidSpec(format!("building {i} footprint is inverted")));
            }
            if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > spec.extent_m.0 || b.y1 > spec.extent_m.1 {
                return Err(SynthError::InvalidSpec(format!(
                    "building {i} footprint outside the scene extent"
                )));
            }
        }
        // Slope bound: smoothstep interpolation has max derivative 1.5 per
        // lattice cell; every octave halves both amplitude and cell size,
        // keeping the per-octave bound constant.
        let lipschitz = spec
            .terrain
            .map(|t| t.octaves as f64 * 3.0 * t.amplitude_m / t.feature_scale_m.max(1e-6))
            .unwrap_or(0.0);
        let terrain_amp = spec
            .terrain
            .map(|t| {
                let mut a = 0.0;
                let mut amp = t.amplitude_m;
                for _ in 0..t.octaves {
                    a += amp;
                    amp *= 0.5;
                }
                a
            })
            .unwrap_or(0.0);
        let max_building = spec
            .buildings
            .iter()
            .map(|b| b.height_m)
            .fold(0.0f64, f64::max);
        let max_height = spec.base_elevation_m + terrain_amp + max_building;
        Ok(Self {
            spec,
            lipschitz,
            max_height,
        })
    }

    pub(crate) fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub(crate) fn max_height(&self) -> f64 {
        self.max_height
    }

    /// Terrain elevation (without buildings) at a world position.
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        let mut z = self.spec.base_elevation_m;
        if let Some(t) = &self.spec.terrain {
            let mut amp = t.amplitude_m;
            let mut cell = t.feature_scale_m.max(1e-6);
            for o in 0..t.octaves {
                z += amp * (2.0 * value_noise(x / cell, y / cell, t.seed.wrapping_add(o as u64)) - 1.0);
                amp *= 0.5;
                cell *= 0.5;
            }
        }
        z
    }

    /// Index of the building covering (x, y) at its roof, if any wins over
    /// the terrain there.
    pub fn building_at(&self, x: f64, y: f64) -> Option<usize> {
        let ground = self.ground_height(x, y);
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in self.spec.buildings.iter().enumerate() {
            if x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1 {
                let top = self.spec.base_elevation_m + b.height_m;
                if top > ground && best.map_or(true, |(_, bz)| top > bz) {
                    best = Some((i, top));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    /// Full surface elevation: terrain or the tallest covering roof.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut z = self.ground_height(x, y);
        for b in &self.spec.buildings {
            if x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1 {
                z = z.max(self.spec.base_elevation_m + b.height_m);
            }
        }
        z
    }

    pub fn in_extent(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x <= self.spec.extent_m.0 && y >= 0.0 && y <= self.spec.extent_m.1
    }

    /// Ground albedo (never a roof) at a world position.
    pub fn ground_albedo(&self, x: f64, y: f64) -> [u8; 3] {
        match self.spec.texture {
            TextureSpec::Checker { period_m } => {
                let c = ((x / period_m).floor() as i64 + (y / period_m).floor() as i64).rem_euclid(2);
                if c == 0 {
                    [230, 230, 230]
                } else {
                    [40, 40, 40]
                }
            }
            TextureSpec::Procedural {
                seed,
                detail_m,
                road_spacing_m,
            } => {
                let d = detail_m.max(0.25);
                let v = 0.55 * value_noise(x / d, y / d, seed)
                    + 0.3 * value_noise(2.0 * x / d, 2.0 * y / d, seed.wrapping_add(1))
                    + 0.15 * value_noise(4.0 * x / d, 4.0 * y / d, seed.wrapping_add(2));
                let g = 35.0 + 190.0 * v;
                let tint_r = 24.0 * (value_noise(x / (3.0 * d), y / (3.0 * d), seed.wrapping_add(3)) - 0.5);
                let tint_g = 24.0 * (value_noise(x / (3.0 * d), y / (3.0 * d), seed.wrapping_add(4)) - 0.5);
                let mut rgb = [
                    (g + tint_r).clamp(0.0, 255.0),
                    (g + tint_g).clamp(0.0, 255.0),
                    (g - 12.0).clamp(0.0, 255.0),
                ];
                if road_spacing_m > 0.0 {
                    let half_road = 1.6;
                    let rx = (x / road_spacing_m - (x / road_spacing_m).round()).abs() * road_spacing_m;
                    let ry = (y / road_spacing_m - (y / road_spacing_m).round()).abs() * road_spacing_m;
                    if rx < half_road || ry < half_road {
                        rgb = [58.0, 58.0, 64.0];
                    }
                }
                [rgb[0] as u8, rgb[1] as u8, rgb[2] as u8]
            }
        }
    }

    /// Roof albedo for a building index: stable per-building shades.
    pub fn roof_albedo(&self, index: usize) -> [u8; 3] {
        let h = hash2(index as i64, 17, 0xB00F);
        let base = 120.0 + 90.0 * h;
        [
            base as u8,
            (base * 0.82) as u8,
            (base * 0.72) as u8,
        ]
    }

    /// Facade albedo for a building index.
    pub fn facade_albedo(&self, index: usize) -> [u8; 3] {
        let h = hash2(index as i64, 91, 0xFACE);
        let base = 140.0 + 70.0 * h;
        [base as u8, base as u8, (base * 0.95) as u8]
    }

    /// Surface albedo seen from straight above (roof wins over ground).
    pub fn albedo_top(&self, x: f64, y: f64) -> [u8; 3] {
        match self.building_at(x, y) {
            Some(i) => self.roof_albedo(i),
            None => self.ground_albedo(x, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_box() -> SceneSpec {
        SceneSpec {
            extent_m: (64.0, 64.0),
            base_elevation_m: 100.0,
            terrain: None,
            buildings: vec![BuildingSpec {
                x0: 20.0,
                y0: 20.0,
                x1: 30.0,
                y1: 34.0,
                height_m: 10.0,
            }],
            texture: TextureSpec::Checker { period_m: 8.0 },
            raster_scale_m: 0.5,
        }
    }

    #[test]
    fn height_is_max_of_ground_and_roof() {
        let scene = Scene::new(spec_with_box()).unwrap();
        assert_eq!(scene.height(10.0, 10.0), 100.0);
        assert_eq!(scene.height(25.0, 25.0), 110.0);
        assert_eq!(scene.height(19.99, 25.0), 100.0);
    }

    #[test]
    fn building_outside_extent_rejected() {
        let mut spec = spec_with_box();
        spec.buildings[0].x1 = 80.0;
        assert!(Scene::new(spec).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_bounded() {
        for (x, y) in [(0.3, 0.7), (100.5, -3.25), (7.0, 7.0)] {
            let a = value_noise(x, y, 5);
            let b = value_noise(x, y, 5);
            assert_eq!(a, b);
            assert!((0.0..=1.0).contains(&a));
        }
        assert_ne!(value_noise(0.4, 0.4, 1), value_noise(0.4, 0.4, 2));
    }

    #[test]
    fn terrain_slope_respects_lipschitz_bound() {
        let spec = SceneSpec {
            terrain: Some(TerrainSpec {
                amplitude_m: 5.0,
                feature_scale_m: 20.0,
                octaves: 3,
                seed: 9,
            }),
            ..spec_with_box()
        };
        let scene = Scene::new(spec).unwrap();
        let l = scene.lipschitz();
        let step = 0.05;
        for i in 0..200 {
            let x = 1.0 + 0.3 * i as f64;
            let y = 2.0 + 0.29 * i as f64;
            let dz = (scene.ground_height(x + step, y) - scene.ground_height(x, y)).abs();
            assert!(dz <= l * step * 1.01, "slope {} exceeds bound {}", dz / step, l);
        }
    }

    #[test]
    fn camera_pose_geometry() {
        let view = ViewSpec {
            altitude_m: 50.0,
            obliqueness_deg: 30.0,
            azimuth_deg: 90.0,
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(400.0, 400.0, 160.0, 120.0, 320, 240),
            look_at: [32.0, 32.0, 100.0],
        };
        let pose = view.camera_pose().unwrap();
        let c = pose.camera_center();
        // Altitude above the look-at point.
        assert!((c.z - 150.0).abs() < 1e-9);
        // Horizontal standoff = altitude * tan(30 deg), opposite the view
        // azimuth (+y): the camera sits at negative y offset.
        let standoff = 50.0 * 30.0f64.to_radians().tan();
        assert!((c.x - 32.0).abs() < 1e-9);
        assert!((c.y - (32.0 - standoff)).abs() < 1e-9);
        // The look-at point projects onto the optical axis.
        let pc = pose.transform_point(&Vector3::new(32.0, 32.0, 100.0));
        assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9);
        assert!(pc.z > 0.0);
    }

    #[test]
    fn nadir_pose_is_well_defined() {
        let view = ViewSpec {
            altitude_m: 80.0,
            obliqueness_deg: 0.0,
            azimuth_deg: 45.0,
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(400.0, 400.0, 160.0, 120.0, 320, 240),
            look_at: [10.0, 20.0, 100.0],
        };
        let pose = view.camera_pose().unwrap();
        let c = pose.camera_center();
        assert!((c - Vector3::new(10.0, 20.0, 180.0)).norm() < 1e-9);
    }

    #[test]
    fn obliqueness_limit_enforced() {
        let view = ViewSpec {
            altitude_m: 80.0,
            obliqueness_deg: 86.0,
            azimuth_deg: 0.0,
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(400.0, 400.0, 160.0, 120.0, 320, 240),
            look_at: [0.0, 0.0, 100.0],
        };
        assert!(view.camera_pose().is_err());
    }
}
