//! Rendering of the analytic scene: DSM rasterization, orthographic DOP
//! rendering, perspective query rendering by ray marching, and assembly of
//! paired benchmark samples.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scene, SynthError, ViewSpec};
use crate::camera::project_perspective;
use crate::geo::{lift_dop_to_3d, GeoRef, RasterMap, SampleMode};
use crate::raster::{Raster, RasterData, DEFAULT_NODATA};
use crate::sample::{PointMap, Sample};

/// Georef of the full-scene rasters: top-left origin, pixel centers.
fn scene_georef(scene: &Scene) -> GeoRef {
    let s = scene.spec.raster_scale_m;
    GeoRef {
        origin_x: 0.5 * s,
        origin_y: scene.spec.extent_m.1 - 0.5 * s,
        scale_x: s,
        scale_y: -s,
    }
}

fn raster_dims(scene: &Scene) -> (u32, u32) {
    let s = scene.spec.raster_scale_m;
    (
        ((scene.spec.extent_m.0 / s).round() as u32).max(1),
        ((scene.spec.extent_m.1 / s).round() as u32).max(1),
    )
}

/// Maximum-elevation raster of the scene surface. Cells outside the scene
/// extent (possible when the extent is not a multiple of the cell size)
/// hold the no-data sentinel.
pub fn rasterize_dsm(scene: &Scene) -> Raster {
    let (w, h) = raster_dims(scene);
    let g = scene_georef(scene);
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for j in 0..h {
        for i in 0..w {
            let (x, y) = g.pixel_to_world(i as f64, j as f64);
            if scene.in_extent(x, y) {
                data.push(super::quantize(scene.height(x, y)) as f32);
            } else {
                data.push(DEFAULT_NODATA as f32);
            }
        }
    }
    Raster {
        width: w,
        height: h,
        channels: 1,
        data: RasterData::F32(data),
        georef: g,
        nodata: DEFAULT_NODATA,
    }
}

/// Nadir orthographic rendering of the top surface; shares the DSM grid.
pub fn render_dop(scene: &Scene) -> Raster {
    let (w, h) = raster_dims(scene);
    let g = scene_georef(scene);
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for j in 0..h {
        for i in 0..w {
            let (x, y) = g.pixel_to_world(i as f64, j as f64);
            let rgb = if scene.in_extent(x, y) {
                scene.albedo_top(x, y)
            } else {
                [0, 0, 0]
            };
            data.extend_from_slice(&rgb);
        }
    }
    Raster {
        width: w,
        height: h,
        channels: 3,
        data: RasterData::U8(data),
        georef: g,
        nodata: DEFAULT_NODATA,
    }
}

enum Hit {
    Terrain(f64),
    /// (t, building index, roof or facade)
    Building(f64, usize, bool),
}

/// Entry parameter of the ray into the solid column {footprint, z <= top},
/// plus whether it enters through the roof plane.
fn ray_box_entry(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    b: &super::BuildingSpec,
    top: f64,
) -> Option<(f64, bool)> {
    let mut t_lo = 0.0f64;
    let mut t_hi = f64::INFINITY;
    let mut roof_entry = false;

    // x and y slabs.
    for (o, d, lo, hi) in [
        (origin.x, dir.x, b.x0, b.x1),
        (origin.y, dir.y, b.y0, b.y1),
    ] {
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let t0 = (lo - o) / d;
            let t1 = (hi - o) / d;
            let (t0, t1) = (t0.min(t1), t0.max(t1));
            if t0 > t_lo {
                t_lo = t0;
                roof_entry = false;
            }
            t_hi = t_hi.min(t1);
        }
    }
    // Half-space z <= top.
    if dir.z.abs() < 1e-15 {
        if origin.z > top {
            return None;
        }
    } else {
        let tz = (top - origin.z) / dir.z;
        if dir.z < 0.0 {
            // Descending: inside the half-space after tz.
            if tz > t_lo {
                t_lo = tz;
                roof_entry = true;
            }
        } else {
            // Ascending: inside before tz.
            t_hi = t_hi.min(tz);
        }
    }
    if t_lo > t_hi || t_lo <= 1e-9 {
        return None;
    }
    Some((t_lo, roof_entry))
}

/// First intersection of a ray with the scene surface.
fn ray_cast(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<Hit> {
    // Exact building entries.
    let mut best_building: Option<(f64, usize, bool)> = None;
    for (i, b) in scene.spec.buildings.iter().enumerate() {
        let top = scene.spec.base_elevation_m + b.height_m;
        if let Some((t, roof)) = ray_box_entry(origin, dir, b, top) {
            if t < t_max && best_building.map_or(true, |(bt, _, _)| t < bt) {
                // The box solid only counts where it pokes above the
                // terrain; entries below ground are handled by the terrain
                // hit instead.
                let p = origin + dir * t;
                if p.z >= scene.ground_height(p.x, p.y) - 1e-9 {
                    best_building = Some((t, i, roof));
                }
            }
        }
    }
    let t_cap = best_building.map(|(t, _, _)| t).unwrap_or(t_max);

    // Terrain: flat ground solves in closed form, relief marches with the
    // conservative slope bound and refines by bisection.
    let terrain_t = if scene.spec.terrain.is_none() {
        let base = scene.spec.base_elevation_m;
        if dir.z.abs() < 1e-15 {
            None
        } else {
            let t = (base - origin.z) / dir.z;
            (t > 1e-9 && t < t_cap).then_some(t)
        }
    } else {
        march_terrain(scene, origin, dir, t_cap)
    };

    match (terrain_t, best_building) {
        (Some(tt), Some((bt, i, roof))) => {
            if tt < bt {
                Some(Hit::Terrain(tt))
            } else {
                Some(Hit::Building(bt, i, roof))
            }
        }
        (Some(tt), None) => Some(Hit::Terrain(tt)),
        (None, Some((bt, i, roof))) => Some(Hit::Building(bt, i, roof)),
        (None, None) => None,
    }
}

fn march_terrain(
    scene: &Scene,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_max: f64,
) -> Option<f64> {
    let lipschitz = scene.lipschitz();
    let d_xy = (dir.x * dir.x + dir.y * dir.y).sqrt();
    let denom = (dir.z.abs() + lipschitz * d_xy).max(1e-9);
    let mut t = 1e-6;
    let mut above = origin.z - scene.ground_height(origin.x, origin.y);
    if above <= 0.0 {
        return Some(0.0);
    }
    for _ in 0..20_000 {
        let step = (0.8 * above / denom).max(1e-4);
        let t_next = t + step;
        if t_next > t_max {
            // Check whether the surface can still be reached inside t_max.
            let p = origin + dir * t_max;
            let gap = p.z - scene.ground_height(p.x, p.y);
            if gap > 0.0 {
                return None;
            }
            return Some(bisect_terrain(scene, origin, dir, t, t_max));
        }
        let p = origin + dir * t_next;
        // Ascending ray already above every possible surface: miss.
        if dir.z >= 0.0 && p.z > scene.max_height() {
            return None;
        }
        let gap = p.z - scene.ground_height(p.x, p.y);
        if gap <= 0.0 {
            return Some(bisect_terrain(scene, origin, dir, t, t_next));
        }
        t = t_next;
        above = gap;
    }
    None
}

fn bisect_terrain(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let p = origin + dir * mid;
        if p.z - scene.ground_height(p.x, p.y) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Sky fill for rays that never hit the surface.
const SKY: [u8; 3] = [136, 168, 214];

/// Renders a perspective view of the scene: image plus per-pixel 3D hit
/// points. Pixels that miss the surface or land outside the scene extent
/// are marked invalid.
pub fn render_query(scene: &Scene, view: &ViewSpec) -> Result<(Raster, PointMap), SynthError> {
    let pose = view.camera_pose()?;
    let k = &view.intrinsics;
    let center = pose.camera_center();
    if center.z <= scene.height(center.x, center.y) + 0.5 {
        return Err(SynthError::CameraInsideGeometry);
    }
    let r_c2w = pose.rotation().transpose();
    let (w, h) = (k.width, k.height);
    let mut img = vec![0u8; (w * h * 3) as usize];
    let mut pm = PointMap::new_invalid(w, h);

    let diag = (scene.spec.extent_m.0.powi(2) + scene.spec.extent_m.1.powi(2)).sqrt();
    let t_max = 4.0 * (center.z - scene.spec.base_elevation_m).abs() + 3.0 * diag + 100.0;

    for py in 0..h {
        for px in 0..w {
            let dir_cam = Vector3::new(
                (px as f64 - k.cx) / k.fx,
                (py as f64 - k.cy) / k.fy,
                1.0,
            );
            let dir = (r_c2w * dir_cam).normalize();
            let hit = ray_cast(scene, &center, &dir, t_max);
            let i = ((py * w + px) * 3) as usize;
            match hit {
                Some(Hit::Terrain(t)) => {
                    let p = center + dir * t;
                    let rgb = scene.ground_albedo(p.x, p.y);
                    img[i..i + 3].copy_from_slice(&rgb);
                    if scene.in_extent(p.x, p.y) {
                        pm.set(px, py, &super::quantize_point(&p));
                    }
                }
                Some(Hit::Building(t, idx, roof)) => {
                    let p = center + dir * t;
                    let rgb = if roof {
                        scene.roof_albedo(idx)
                    } else {
                        scene.facade_albedo(idx)
                    };
                    img[i..i + 3].copy_from_slice(&rgb);
                    if scene.in_extent(p.x, p.y) {
                        pm.set(px, py, &super::quantize_point(&p));
                    }
                }
                None => {
                    img[i..i + 3].copy_from_slice(&SKY);
                }
            }
        }
    }

    let query = Raster {
        width: w,
        height: h,
        channels: 3,
        data: RasterData::U8(img),
        georef: GeoRef::new(0.0, 0.0, 1.0, -1.0).expect("unit georef"),
        nodata: DEFAULT_NODATA,
    };
    Ok((query, pm))
}

/// Reference-crop randomization for sample pairing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairOptions {
    /// Deterministic outward margin added around the visible footprint,
    /// meters.
    pub expansion_m: f64,
    /// Range of the per-corner random offsets, meters (uniform in
    /// [-perturbation, +perturbation] per axis).
    pub perturbation_m: f64,
    pub seed: u64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            expansion_m: 5.0,
            perturbation_m: 20.0,
            seed: 0,
        }
    }
}

impl PairOptions {
    /// Smaller offset preset (0-10 m range).
    pub fn compact(seed: u64) -> Self {
        Self {
            expansion_m: 5.0,
            perturbation_m: 10.0,
            seed,
        }
    }
}

/// Renders a view and pairs it with reference crops (see
/// [`pair_sample_from`] for the cropping rules).
pub fn pair_sample(scene: &Scene, view: &ViewSpec, opts: &PairOptions) -> Result<Sample, SynthError> {
    let dop = render_dop(scene);
    let dsm = rasterize_dsm(scene);
    pair_sample_from(scene, &dop, &dsm, view, opts)
}

/// Pairs a rendered view with crops of precomputed full-scene rasters: the
/// crop covers the bounding box of the visible footprint, expanded outward
/// by `expansion_m` and perturbed per corner by the seeded offsets.
pub fn pair_sample_from(
    scene: &Scene,
    full_dop: &Raster,
    full_dsm: &Raster,
    view: &ViewSpec,
    opts: &PairOptions,
) -> Result<Sample, SynthError> {
    if opts.expansion_m < 0.0 {
        return Err(SynthError::InvalidSpec("expansion must be non-negative".into()));
    }
    let (query, pm) = render_query(scene, view)?;
    let pose = view.camera_pose()?;

    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut n_valid = 0usize;
    for (_, _, p) in pm.iter_valid() {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
        n_valid += 1;
    }
    if n_valid < 16 {
        return Err(SynthError::FootprintOutsideScene);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut jitter = || {
        if opts.perturbation_m > 0.0 {
            rng.random_range(-opts.perturbation_m..opts.perturbation_m)
        } else {
            0.0
        }
    };
    // Four corners, each pushed outward by the expansion and shifted by its
    // own random offset.
    let corners = [
        (min_x - opts.expansion_m + jitter(), min_y - opts.expansion_m + jitter()),
        (max_x + opts.expansion_m + jitter(), min_y - opts.expansion_m + jitter()),
        (max_x + opts.expansion_m + jitter(), max_y + opts.expansion_m + jitter()),
        (min_x - opts.expansion_m + jitter(), max_y + opts.expansion_m + jitter()),
    ];
    let crop_min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let crop_max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let crop_min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let crop_max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);

    // World window to pixel window on the full rasters.
    let g = &full_dop.georef;
    let (px0, py0) = g.world_to_pixel(crop_min_x, crop_max_y);
    let (px1, py1) = g.world_to_pixel(crop_max_x, crop_min_y);
    let x0 = px0.min(px1).floor().max(0.0) as u32;
    let y0 = py0.min(py1).floor().max(0.0) as u32;
    let x1 = (px0.max(px1).ceil() as u32).min(full_dop.width.saturating_sub(1));
    let y1 = (py0.max(py1).ceil() as u32).min(full_dop.height.saturating_sub(1));
    if x1 <= x0 + 4 || y1 <= y0 + 4 {
        return Err(SynthError::FootprintOutsideScene);
    }
    let dop = full_dop.crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1)?;

    let map = RasterMap::between(&full_dop.georef, &full_dsm.georef);
    let c0 = map.apply(&Vector2::new(x0 as f64, y0 as f64));
    let c1 = map.apply(&Vector2::new(x1 as f64, y1 as f64));
    let sx0 = (c0.x.min(c1.x).floor().max(0.0) as u32).min(full_dsm.width - 1);
    let sy0 = (c0.y.min(c1.y).floor().max(0.0) as u32).min(full_dsm.height - 1);
    let sx1 = (c0.x.max(c1.x).ceil() as u32).min(full_dsm.width - 1);
    let sy1 = (c0.y.max(c1.y).ceil() as u32).min(full_dsm.height - 1);
    let dsm = full_dsm.crop(sx0, sy0, sx1 - sx0 + 1, sy1 - sy0 + 1)?;

    // Verification keypoints: crop pixels lifted through the DSM, kept when
    // they project into the query image.
    let lift_map = RasterMap::between(&dop.georef, &dsm.georef);
    let mut keypoints3d = Vec::new();
    let mut attempts = 0;
    while keypoints3d.len() < 60 && attempts < 2000 {
        attempts += 1;
        let px = rng.random_range(0.0..dop.width as f64 - 1.0);
        let py = rng.random_range(0.0..dop.height as f64 - 1.0);
        let Ok(p3) = lift_dop_to_3d(
            &Vector2::new(px, py),
            &dop.georef,
            &dsm,
            &lift_map,
            SampleMode::Bilinear,
        ) else {
            continue;
        };
        if let Ok((uv, _)) = project_perspective(&p3, &view.intrinsics, &pose) {
            if view.intrinsics.contains(&uv) {
                keypoints3d.push(p3);
            }
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("altitude_m".into(), format!("{}", view.altitude_m));
    meta.insert("obliqueness_deg".into(), format!("{}", view.obliqueness_deg));
    meta.insert("azimuth_deg".into(), format!("{}", view.azimuth_deg));
    meta.insert("raster_scale_m".into(), format!("{}", scene.spec.raster_scale_m));

    Ok(Sample {
        id: String::new(),
        query,
        point_map: pm,
        dop,
        dsm,
        intrinsics: view.intrinsics,
        gt_pose: Some(pose),
        keypoints3d,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::geo::{project_ortho, OrthoCamera};
    use crate::synth::{BuildingSpec, SceneSpec, TerrainSpec, TextureSpec};

    fn flat_scene() -> Scene {
        Scene::new(SceneSpec {
            extent_m: (64.0, 64.0),
            base_elevation_m: 100.0,
            terrain: None,
            buildings: vec![],
            texture: TextureSpec::Checker { period_m: 8.0 },
            raster_scale_m: 0.5,
        })
        .unwrap()
    }

    fn boxy_scene() -> Scene {
        Scene::new(SceneSpec {
            extent_m: (64.0, 64.0),
            base_elevation_m: 100.0,
            terrain: None,
            buildings: vec![BuildingSpec {
                x0: 24.0,
                y0: 24.0,
                x1: 40.0,
                y1: 40.0,
                height_m: 10.0,
            }],
            texture: TextureSpec::Checker { period_m: 8.0 },
            raster_scale_m: 0.5,
        })
        .unwrap()
    }

    fn view(obliq: f64, azim: f64) -> ViewSpec {
        ViewSpec {
            altitude_m: 60.0,
            obliqueness_deg: obliq,
            azimuth_deg: azim,
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(300.0, 300.0, 120.0, 90.0, 240, 180),
            look_at: [32.0, 32.0, 100.0],
        }
    }

    #[test]
    fn flat_scene_rasterizes_constant() {
        let dsm = rasterize_dsm(&flat_scene());
        assert_eq!(dsm.width, 128);
        match &dsm.data {
            RasterData::F32(d) => assert!(d.iter().all(|v| (*v - 100.0).abs() < 1e-6)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn box_cells_at_roof_elevation() {
        let scene = boxy_scene();
        let dsm = rasterize_dsm(&scene);
        let g = dsm.georef;
        // Inside footprint.
        let (px, py) = g.world_to_pixel(32.0, 32.0);
        assert_eq!(dsm.value_f32(px.round() as u32, py.round() as u32), 110.0);
        // Outside footprint.
        let (px, py) = g.world_to_pixel(10.0, 10.0);
        assert_eq!(dsm.value_f32(px.round() as u32, py.round() as u32), 100.0);
    }

    #[test]
    fn dop_checker_is_exact() {
        let scene = flat_scene();
        let dop = render_dop(&scene);
        let g = dop.georef;
        for (wx, wy) in [(1.0, 1.0), (9.0, 1.0), (9.0, 9.0), (17.0, 1.0)] {
            let (px, py) = g.world_to_pixel(wx, wy);
            let got = dop.pixel_u8(px.round() as u32, py.round() as u32);
            let expect = scene.ground_albedo(wx, wy);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn dop_and_dsm_share_georef() {
        let scene = boxy_scene();
        assert_eq!(render_dop(&scene).georef, rasterize_dsm(&scene).georef);
    }

    #[test]
    fn roof_color_differs_from_ground_inside_footprint() {
        let scene = boxy_scene();
        let dop = render_dop(&scene);
        let g = dop.georef;
        let (px, py) = g.world_to_pixel(32.0, 32.0);
        let roof = dop.pixel_u8(px.round() as u32, py.round() as u32);
        assert_eq!(roof, scene.roof_albedo(0));
        assert_ne!(roof, scene.ground_albedo(32.0, 32.0));
    }

    /// Point-map self-consistency: every valid entry reprojects onto its
    /// own pixel.
    #[test]
    fn point_map_reprojects_within_half_pixel() {
        for scene in [flat_scene(), boxy_scene()] {
            for v in [view(0.0, 0.0), view(30.0, 45.0)] {
                let (_, pm) = render_query(&scene, &v).unwrap();
                let pose = v.camera_pose().unwrap();
                assert!(pm.valid_count() > 1000);
                let mut worst = 0.0f64;
                for (x, y, p) in pm.iter_valid() {
                    let (uv, _) = project_perspective(&p, &v.intrinsics, &pose).unwrap();
                    let e = (uv - Vector2::new(x as f64, y as f64)).norm();
                    worst = worst.max(e);
                }
                assert!(worst < 0.5, "worst reprojection {worst}");
            }
        }
    }

    /// Similar-triangles oracle: a nadir view of flat ground at altitude h
    /// with focal f images the ground at h/f meters per pixel.
    #[test]
    fn nadir_ground_sampling_distance() {
        let scene = flat_scene();
        let v = view(0.0, 0.0);
        let (_, pm) = render_query(&scene, &v).unwrap();
        // Twenty pixels around the image center; the long baseline averages
        // out the millimeter quantization of stored points.
        let p0 = pm.get(110, 90).unwrap();
        let p1 = pm.get(130, 90).unwrap();
        let gsd = (p1 - p0).norm() / 20.0;
        let expect = 60.0 / 300.0; // altitude / focal
        assert!(
            (gsd - expect).abs() < 2e-4,
            "gsd {gsd} vs expected {expect}"
        );
    }

    #[test]
    fn oblique_view_heights_stay_in_scene_range() {
        let scene = boxy_scene();
        let (_, pm) = render_query(&scene, &view(30.0, 10.0)).unwrap();
        for (_, _, p) in pm.iter_valid() {
            assert!(p.z >= 100.0 - 1e-6 && p.z <= 110.0 + 1e-6);
        }
    }

    /// Terrain marching agrees with the closed-form surface: hit points
    /// must lie on the heightfield.
    #[test]
    fn terrain_hits_lie_on_surface() {
        let scene = Scene::new(SceneSpec {
            extent_m: (64.0, 64.0),
            base_elevation_m: 100.0,
            terrain: Some(TerrainSpec {
                amplitude_m: 3.0,
                feature_scale_m: 18.0,
                octaves: 2,
                seed: 4,
            }),
            buildings: vec![],
            texture: TextureSpec::Checker { period_m: 8.0 },
            raster_scale_m: 0.5,
        })
        .unwrap();
        let (_, pm) = render_query(&scene, &view(25.0, 120.0)).unwrap();
        assert!(pm.valid_count() > 1000);
        for (_, _, p) in pm.iter_valid().step_by(97) {
            let dz = (p.z - scene.ground_height(p.x, p.y)).abs();
            assert!(dz < 1e-3, "hit off surface by {dz}");
        }
    }

    #[test]
    fn camera_inside_geometry_rejected() {
        let scene = boxy_scene();
        let v = ViewSpec {
            altitude_m: 2.0,
            obliqueness_deg: 0.0,
            azimuth_deg: 0.0,
            yaw_deg: 0.0,
            intrinsics: CameraIntrinsics::new_unchecked(300.0, 300.0, 120.0, 90.0, 240, 180),
            look_at: [32.0, 32.0, 100.0],
        };
        // Camera at z = 102 is inside the 110 m tall box column.
        assert!(matches!(
            render_query(&scene, &v),
            Err(SynthError::CameraInsideGeometry)
        ));
    }

    /// With outward-only offsets the crop contains the whole visible
    /// footprint, so covisibility is exactly 1.
    #[test]
    fn outward_pairing_gives_full_covisibility() {
        let scene = boxy_scene();
        let opts = PairOptions {
            expansion_m: 4.0,
            perturbation_m: 0.0,
            seed: 3,
        };
        let sample = pair_sample(&scene, &view(20.0, 200.0), &opts).unwrap();
        assert_eq!(sample.covisibility(), 1.0);
        sample.validate().unwrap();
    }

    #[test]
    fn different_seeds_give_different_crops() {
        let scene = boxy_scene();
        let v = view(10.0, 0.0);
        let a = pair_sample(
            &scene,
            &v,
            &PairOptions {
                expansion_m: 2.0,
                perturbation_m: 15.0,
                seed: 1,
            },
        )
        .unwrap();
        let b = pair_sample(
            &scene,
            &v,
            &PairOptions {
                expansion_m: 2.0,
                perturbation_m: 15.0,
                seed: 2,
            },
        )
        .unwrap();
        assert_ne!(a.dop.georef, b.dop.georef);
    }

    /// Crop bounds track the visible footprint when no randomness is added.
    #[test]
    fn zero_margin_crop_matches_footprint() {
        let scene = flat_scene();
        let v = view(0.0, 0.0);
        let sample = pair_sample(
            &scene,
            &v,
            &PairOptions {
                expansion_m: 0.0,
                perturbation_m: 0.0,
                seed: 0,
            },
        )
        .unwrap();
        // Recompute the footprint from the point map.
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        for (_, _, p) in sample.point_map.iter_valid() {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
        }
        let g = &sample.dop.georef;
        let world_left = g.origin_x - 0.5 * g.scale_x;
        let world_right = g.origin_x + (sample.dop.width as f64 - 0.5) * g.scale_x;
        let cell = g.scale_x;
        assert!((world_left - min_x).abs() <= 2.0 * cell + 1e-9);
        assert!((world_right - max_x).abs() <= 2.0 * cell + 1e-9);
    }

    /// Lifting the orthographic projection of a point-map entry through the
    /// paired crop recovers the entry for top-surface pixels.
    #[test]
    fn point_map_lifts_back_through_crop() {
        let scene = flat_scene();
        let sample = pair_sample(
            &scene,
            &view(15.0, 30.0),
            &PairOptions {
                expansion_m: 3.0,
                perturbation_m: 0.0,
                seed: 5,
            },
        )
        .unwrap();
        let cam = OrthoCamera::new(sample.dop.georef);
        let map = RasterMap::between(&sample.dop.georef, &sample.dsm.georef);
        for (_, _, p) in sample.point_map.iter_valid().step_by(211) {
            let px = project_ortho(&p, &cam);
            let lifted = lift_dop_to_3d(&px, &sample.dop.georef, &sample.dsm, &map, SampleMode::Bilinear)
                .unwrap();
            assert!((lifted - p).norm() < 1e-3, "lift error {}", (lifted - p).norm());
        }
    }
}
