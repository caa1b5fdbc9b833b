//! Inverse-mapping image warp: every output pixel samples the source image
//! at the inverse-transformed coordinate with bilinear interpolation.

use super::{EstimateError, Homography};
use crate::geo::GeoRef;
use crate::raster::{Raster, RasterData};

/// A warped image plus a per-pixel validity mask; pixels whose source
/// coordinate fell outside the input carry the fill value and `false`.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub image: Raster,
    pub valid: Vec<bool>,
}

/// Warps `image` by `h` (which maps source pixel coordinates to output
/// pixel coordinates) onto an `out_dims` canvas. The output lives in plain
/// pixel space, so its georef is the unit grid.
pub fn warp_by_homography(
    image: &Raster,
    h: &Homography,
    out_dims: (u32, u32),
    fill: [f64; 3],
) -> Result<WarpResult, EstimateError> {
    let h_inv = h.inverse()?;
    let (out_w, out_h) = out_dims;
    let n = out_w as usize * out_h as usize;
    let mut valid = vec![false; n];

    let is_color = matches!(image.data, RasterData::U8(_));
    let mut color = if is_color { Vec::with_capacity(n * 3) } else { Vec::new() };
    let mut gray = if is_color { Vec::new() } else { Vec::with_capacity(n) };

    for y in 0..out_h {
        for x in 0..out_w {
            let src = h_inv.apply(&nalgebra::Vector2::new(x as f64, y as f64));
            let inside = src.x.is_finite() && src.y.is_finite() && image.in_bounds(src.x, src.y);
            if is_color {
                let rgb = if inside {
                    image.sample_rgb(src.x, src.y).unwrap_or(fill)
                } else {
                    fill
                };
                color.push(rgb[0].round().clamp(0.0, 255.0) as u8);
                color.push(rgb[1].round().clamp(0.0, 255.0) as u8);
                color.push(rgb[2].round().clamp(0.0, 255.0) as u8);
            } else {
                let v = if inside {
                    image
                        .sample_single(src.x, src.y, crate::geo::SampleMode::Bilinear)
                        .unwrap_or(fill[0])
                } else {
                    fill[0]
                };
                gray.push(v as f32);
            }
            if inside {
                valid[(y * out_w + x) as usize] = true;
            }
        }
    }

    let georef = GeoRef::new(0.0, 0.0, 1.0, -1.0).expect("unit georef");
    let out = Raster {
        width: out_w,
        height: out_h,
        channels: image.channels,
        data: if is_color {
            RasterData::U8(color)
        } else {
            RasterData::F32(gray)
        },
        georef,
        nodata: image.nodata,
    };
    Ok(WarpResult { image: out, valid })
}
