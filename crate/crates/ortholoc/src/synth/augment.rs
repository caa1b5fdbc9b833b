//! Sample-level augmentation: the coordinate anonymization transform and
//! simulated photometric/structural domain shifts.

use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::value_noise;
use crate::raster::{Raster, RasterData};
use crate::sample::Sample;

/// Shifts a sample into a local coordinate frame by subtracting a randomly
/// chosen visible scene point from all geometry. The camera rotation is
/// unchanged; the translation becomes `t + R * v`.
///
/// The offset is rounded to whole meters so the subtraction is exact on the
/// f32-stored point map and DSM (integer offsets below the mantissa limit
/// introduce no rounding), keeping downstream metrics bit-stable.
pub fn anonymize(sample: &Sample, rng_seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // A random valid point-map entry as the frame origin.
    let valid: Vec<Vector3<f64>> = sample.point_map.iter_valid().map(|(_, _, p)| p).collect();
    if valid.is_empty() {
        return sample.clone();
    }
    let pick = valid[rng.random_range(0..valid.len())];
    let v = Vector3::new(pick.x.round(), pick.y.round(), pick.z.round());
    anonymize_with(sample, &v)
}

/// Applies the anonymization transform with an explicit offset `v`.
pub fn anonymize_with(sample: &Sample, v: &Vector3<f64>) -> Sample {
    let mut out = sample.clone();
    out.point_map.translate(&-v);
    for kp in &mut out.keypoints3d {
        *kp -= v;
    }
    for raster in [&mut out.dop, &mut out.dsm] {
        raster.georef.origin_x -= v.x;
        raster.georef.origin_y -= v.y;
    }
    // Elevations shift by the vertical component; sentinels stay put.
    if let RasterData::F32(d) = &mut out.dsm.data {
        let sentinel = out.dsm.nodata as f32;
        for val in d.iter_mut() {
            if *val != sentinel {
                *val = (*val as f64 - v.z) as f32;
            }
        }
    }
    if let Some(pose) = &sample.gt_pose {
        let t_new = pose.translation() + pose.rotation() * v;
        out.gt_pose = Some(crate::camera::CameraPose::new_unchecked(*pose.rotation(), t_new));
    }
    out
}

/// Which domain gap to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainShiftKind {
    /// Appearance-only changes to the DOP (color, illumination, season).
    Photometric,
    /// Structural changes to the DSM (construction, vegetation growth).
    Geometric,
    /// Both, with DOP recoloring kept consistent with the DSM edits.
    Both,
}

/// Simulates reference data captured at a different time: photometric
/// changes recolor the DOP, geometric changes add/remove structures in the
/// DSM. The query image, point map, and ground-truth pose are untouched.
pub fn domain_shift(
    sample: &Sample,
    kind: DomainShiftKind,
    strength: f64,
    rng_seed: u64,
) -> Sample {
    let strength = strength.clamp(0.0, 1.0);
    if strength == 0.0 {
        return sample.clone();
    }
    let mut out = sample.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    if matches!(kind, DomainShiftKind::Photometric | DomainShiftKind::Both) {
        photometric_shift(&mut out.dop, strength, &mut rng);
    }
    if matches!(kind, DomainShiftKind::Geometric | DomainShiftKind::Both) {
        geometric_shift(
            &mut out.dsm,
            &mut out.dop,
            matches!(kind, DomainShiftKind::Both),
            strength,
            &mut rng,
        );
    }
    out
}

/// Global color affine + a smooth multiplicative illumination field + a
/// seasonal shift of the green/red balance.
fn photometric_shift(dop: &mut Raster, strength: f64, rng: &mut ChaCha8Rng) {
    let gain: [f64; 3] = std::array::from_fn(|_| 1.0 + strength * rng.random_range(-0.25..0.25));
    let bias: [f64; 3] = std::array::from_fn(|_| strength * rng.random_range(-25.0..25.0));
    let season = strength * rng.random_range(-0.25..0.25);
    let field_seed: u64 = rng.random_range(0..u64::MAX / 2);
    let (w, h) = (dop.width, dop.height);
    let cells = 3.0;
    if let RasterData::U8(d) = &mut dop.data {
        for y in 0..h {
            for x in 0..w {
                let illum = 1.0
                    + strength
                        * 0.35
                        * (2.0
                            * value_noise(
                                x as f64 / w as f64 * cells,
                                y as f64 / h as f64 * cells,
                                field_seed,
                            )
                            - 1.0);
                let i = ((y * w + x) * 3) as usize;
                let r = d[i] as f64;
                let g = d[i + 1] as f64;
                let b = d[i + 2] as f64;
                // Seasonal hue: push green toward red (dry) or back (lush).
                let r2 = r + season * g;
                let g2 = g * (1.0 - 0.5 * season.abs());
                let vals = [r2, g2, b];
                for c in 0..3 {
                    d[i + c] = ((vals[c] * gain[c] * illum) + bias[c]).clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
}

/// Adds box structures and vegetation-like bumps to the DSM, and flattens a
/// patch (structure removal). In consistent mode the DOP is recolored where
/// the surface changed.
fn geometric_shift(
    dsm: &mut Raster,
    dop: &mut Raster,
    recolor: bool,
    strength: f64,
    rng: &mut ChaCha8Rng,
) {
    let (w, h) = (dsm.width, dsm.height);
    let map = crate::geo::RasterMap::between(&dsm.georef, &dop.georef);
    let n_boxes = (3.0 * strength).round() as usize;
    let n_bumps = (4.0 * strength).round() as usize;
    let cell = dsm.georef.scale_x.abs().max(1e-6);

    let mut paint_dop = |x: u32, y: u32, rgb: [u8; 3]| {
        let p = map.apply(&nalgebra::Vector2::new(x as f64, y as f64));
        let (px, py) = (p.x.round(), p.y.round());
        if px >= 0.0 && py >= 0.0 && (px as u32) < dop.width && (py as u32) < dop.height {
            dop.set_pixel_u8(px as u32, py as u32, rgb);
        }
    };

    // New constructions: raised boxes.
    for b in 0..n_boxes {
        let bw = (rng.random_range(4.0..12.0) / cell) as u32;
        let bh = (rng.random_range(4.0..12.0) / cell) as u32;
        if w <= bw + 2 || h <= bh + 2 {
            continue;
        }
        let x0 = rng.random_range(0..w - bw);
        let y0 = rng.random_range(0..h - bh);
        let raise = strength * rng.random_range(3.0..9.0);
        let shade = 90 + (b as u8 % 3) * 30;
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                if !dsm.is_nodata_at(x, y) {
                    let v = dsm.value_f32(x, y);
                    dsm.set_f32(x, y, v + raise as f32);
                    if recolor {
                        paint_dop(x, y, [shade, shade.saturating_sub(10), shade.saturating_sub(20)]);
                    }
                }
            }
        }
    }

    // Vegetation growth: smooth radial bumps.
    for _ in 0..n_bumps {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let radius = rng.random_range(2.0..6.0) / cell;
        let height = strength * rng.random_range(2.0..6.0);
        let x0 = (cx - radius).floor().max(0.0) as u32;
        let x1 = ((cx + radius).ceil() as u32).min(w - 1);
        let y0 = (cy - radius).floor().max(0.0) as u32;
        let y1 = ((cy + radius).ceil() as u32).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - cx) / radius;
                let dy = (y as f64 - cy) / radius;
                let r2 = dx * dx + dy * dy;
                if r2 < 1.0 && !dsm.is_nodata_at(x, y) {
                    let v = dsm.value_f32(x, y);
                    dsm.set_f32(x, y, v + (height * (1.0 - r2)) as f32);
                    if recolor {
                        paint_dop(x, y, [52, 96, 48]);
                    }
                }
            }
        }
    }

    // Demolition: flatten one patch to its border minimum.
    if strength > 0.3 && w > 12 && h > 12 {
        let pw = (w / 6).max(4);
        let ph = (h / 6).max(4);
        let x0 = rng.random_range(0..w - pw);
        let y0 = rng.random_range(0..h - ph);
        let mut floor_z = f32::INFINITY;
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                if !dsm.is_nodata_at(x, y) {
                    floor_z = floor_z.min(dsm.value_f32(x, y));
                }
            }
        }
        if floor_z.is_finite() {
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    if !dsm.is_nodata_at(x, y) {
                        dsm.set_f32(x, y, floor_z);
                        if recolor {
                            paint_dop(x, y, [150, 144, 132]);
                        }
                    }
                }
            }
        }
    }
}
