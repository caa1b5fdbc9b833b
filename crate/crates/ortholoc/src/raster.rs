//! Georeferenced raster containers: single-channel f32 elevation grids and
//! three-channel u8 color grids, with nodata-aware sampling, cropping, and
//! resampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::GeometryError;
use crate::geo::{GeoRef, SampleMode};

/// Default no-data sentinel, far below any plausible elevation. Stored in
/// the file header; logic always reads the per-raster value.
pub const DEFAULT_NODATA: f64 = -10000.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad magic bytes, not a raster file")]
    BadMagic,
    #[error("unsupported raster format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated raster file: {0}")]
    TruncatedFile(String),
    #[error("unsupported channel count {0}")]
    UnsupportedChannelCount(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    DataLength {
        got: usize,
        width: u32,
        height: u32,
        channels: u8,
    },
    #[error("non-finite value at index {0} (only the nodata sentinel may be non-finite)")]
    NonFiniteValue(usize),
    #[error("resampling would produce an empty raster")]
    DegenerateOutput,
    #[error("missing sample component: {0}")]
    MissingComponent(String),
    #[error("inconsistent dimensions: {0}")]
    InconsistentDims(String),
    #[error("covisibility target {0} not achievable for this geometry")]
    Unachievable(f64),
    #[error("crop rectangle outside raster")]
    CropOutOfBounds,
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pixel payload: `F32` for single-channel elevation data, `U8` for
/// interleaved RGB imagery.
#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Row-major georeferenced grid. Elevation rasters are one f32 channel with
/// a nodata sentinel; color rasters are three u8 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: RasterData,
    pub georef: GeoRef,
    pub nodata: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    U8,
}

impl Raster {
    /// Single-channel f32 raster. Every non-sentinel value must be finite.
    pub fn new_f32(
        width: u32,
        height: u32,
        georef: GeoRef,
        nodata: f64,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        let expect = width as usize * height as usize;
        if data.len() != expect {
            return Err(RasterError::DataLength {
                got: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        let sentinel = nodata as f32;
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() && *v != sentinel {
                return Err(RasterError::NonFiniteValue(i));
            }
        }
        Ok(Self {
            width,
            height,
            channels: 1,
            data: RasterData::F32(data),
            georef,
            nodata,
        })
    }

    /// Three-channel interleaved u8 raster.
    pub fn new_u8(
        width: u32,
        height: u32,
        georef: GeoRef,
        data: Vec<u8>,
    ) -> Result<Self, RasterError> {
        let expect = width as usize * height as usize * 3;
        if data.len() != expect {
            return Err(RasterError::DataLength {
                got: data.len(),
                width,
                height,
                channels: 3,
            });
        }
        Ok(Self {
            width,
            height,
            channels: 3,
            data: RasterData::U8(data),
            georef,
            nodata: DEFAULT_NODATA,
        })
    }

    pub fn constant_f32(width: u32, height: u32, georef: GeoRef, value: f32) -> Self {
        Self::new_f32(
            width,
            height,
            georef,
            DEFAULT_NODATA,
            vec![value; width as usize * height as usize],
        )
        .expect("constant raster is always valid")
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            RasterData::F32(_) => Dtype::F32,
            RasterData::U8(_) => Dtype::U8,
        }
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    /// Raw f32 value at an integer pixel (single-channel rasters).
    pub fn value_f32(&self, x: u32, y: u32) -> f32 {
        match &self.data {
            RasterData::F32(d) => d[self.idx(x, y)],
            RasterData::U8(_) => panic!("value_f32 on a u8 raster"),
        }
    }

    pub fn set_f32(&mut self, x: u32, y: u32, v: f32) {
        let i = self.idx(x, y);
        match &mut self.data {
            RasterData::F32(d) => d[i] = v,
            RasterData::U8(_) => panic!("set_f32 on a u8 raster"),
        }
    }

    pub fn pixel_u8(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.idx(x, y);
        match &self.data {
            RasterData::U8(d) => [d[i], d[i + 1], d[i + 2]],
            RasterData::F32(_) => panic!("pixel_u8 on an f32 raster"),
        }
    }

    pub fn set_pixel_u8(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.idx(x, y);
        match &mut self.data {
            RasterData::U8(d) => {
                d[i] = rgb[0];
                d[i + 1] = rgb[1];
                d[i + 2] = rgb[2];
            }
            RasterData::F32(_) => panic!("set_pixel_u8 on an f32 raster"),
        }
    }

    pub fn is_nodata_value(&self, v: f32) -> bool {
        v == self.nodata as f32
    }

    pub fn is_nodata_at(&self, x: u32, y: u32) -> bool {
        matches!(&self.data, RasterData::F32(_)) && self.is_nodata_value(self.value_f32(x, y))
    }

    /// Pixel-center convention: coordinates within half a pixel of the grid
    /// count as inside.
    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && x <= self.width as f64 - 0.5 && y >= -0.5 && y <= self.height as f64 - 0.5
    }

    /// Samples a single-channel raster at a fractional pixel coordinate.
    ///
    /// Validity is decided by the nearest cell; bilinear interpolation then
    /// averages over the valid neighborhood so a sentinel never leaks into
    /// the value.
    pub fn sample_single(&self, x: f64, y: f64, mode: SampleMode) -> Result<f64, GeometryError> {
        if !self.in_bounds(x, y) {
            return Err(GeometryError::OutOfBounds(x, y));
        }
        let nx = (x.round().max(0.0) as u32).min(self.width - 1);
        let ny = (y.round().max(0.0) as u32).min(self.height - 1);
        if self.is_nodata_at(nx, ny) {
            return Err(GeometryError::NoData);
        }
        match mode {
            SampleMode::Nearest => Ok(self.value_f32(nx, ny) as f64),
            SampleMode::Bilinear => {
                let cx = x.clamp(0.0, self.width as f64 - 1.0);
                let cy = y.clamp(0.0, self.height as f64 - 1.0);
                let x0 = cx.floor() as u32;
                let y0 = cy.floor() as u32;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let fx = cx - x0 as f64;
                let fy = cy - y0 as f64;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (px, py, w) in [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x1, y0, fx * (1.0 - fy)),
                    (x0, y1, (1.0 - fx) * fy),
                    (x1, y1, fx * fy),
                ] {
                    if !self.is_nodata_at(px, py) {
                        acc += w * self.value_f32(px, py) as f64;
                        wsum += w;
                    }
                }
                if wsum <= 0.0 {
                    return Err(GeometryError::NoData);
                }
                Ok(acc / wsum)
            }
        }
    }

    /// Bilinear RGB sample; `None` outside bounds.
    pub fn sample_rgb(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        if !self.in_bounds(x, y) {
            return None;
        }
        let cx = x.clamp(0.0, self.width as f64 - 1.0);
        let cy = y.clamp(0.0, self.height as f64 - 1.0);
        let x0 = cx.floor() as u32;
        let y0 = cy.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        let mut out = [0.0; 3];
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let p00 = self.pixel_u8(x0, y0);
        let p10 = self.pixel_u8(x1, y0);
        let p01 = self.pixel_u8(x0, y1);
        let p11 = self.pixel_u8(x1, y1);
        for c in 0..3 {
            out[c] = w00 * p00[c] as f64
                + w10 * p10[c] as f64
                + w01 * p01[c] as f64
                + w11 * p11[c] as f64;
        }
        Some(out)
    }

    /// Luminance image as f32 in [0, 255]; single-channel rasters pass
    /// through.
    pub fn to_gray(&self) -> Vec<f32> {
        match &self.data {
            RasterData::F32(d) => d.clone(),
            RasterData::U8(d) => d
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
                .collect(),
        }
    }

    /// Per-channel mean of a color raster.
    pub fn channel_means(&self) -> [f64; 3] {
        match &self.data {
            RasterData::U8(d) => {
                let mut sums = [0.0f64; 3];
                for p in d.chunks_exact(3) {
                    for c in 0..3 {
                        sums[c] += p[c] as f64;
                    }
                }
                let n = (self.width as usize * self.height as usize).max(1) as f64;
                [sums[0] / n, sums[1] / n, sums[2] / n]
            }
            RasterData::F32(_) => panic!("channel_means on an f32 raster"),
        }
    }

    /// Axis-aligned crop; the georef origin moves with the crop so world
    /// positions of retained pixels are unchanged.
    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Result<Raster, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::DegenerateOutput);
        }
        if x0 + width > self.width || y0 + height > self.height {
            return Err(RasterError::CropOutOfBounds);
        }
        let georef = GeoRef {
            origin_x: self.georef.origin_x + self.georef.scale_x * x0 as f64,
            origin_y: self.georef.origin_y + self.georef.scale_y * y0 as f64,
            ..self.georef
        };
        let c = self.channels as usize;
        let row_len = width as usize * c;
        let data = match &self.data {
            RasterData::F32(d) => {
                let mut out = Vec::with_capacity(row_len * height as usize);
                for y in y0..y0 + height {
                    let start = (y as usize * self.width as usize + x0 as usize) * c;
                    out.extend_from_slice(&d[start..start + row_len]);
                }
                RasterData::F32(out)
            }
            RasterData::U8(d) => {
                let mut out = Vec::with_capacity(row_len * height as usize);
                for y in y0..y0 + height {
                    let start = (y as usize * self.width as usize + x0 as usize) * c;
                    out.extend_from_slice(&d[start..start + row_len]);
                }
                RasterData::U8(out)
            }
        };
        Ok(Raster {
            width,
            height,
            channels: self.channels,
            data,
            georef,
            nodata: self.nodata,
        })
    }
}

/// Rescales a raster by `factor` (output dimensions = input * factor,
/// rounded, at least 1x1). Scales divide by the effective factor so world
/// coverage is preserved, and the origin shifts for the pixel-center
/// convention.
pub fn resample(raster: &Raster, factor: f64, mode: SampleMode) -> Result<Raster, RasterError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(RasterError::DegenerateOutput);
    }
    if factor == 1.0 {
        return Ok(raster.clone());
    }
    let out_w = ((raster.width as f64 * factor).round() as u32).max(1);
    let out_h = ((raster.height as f64 * factor).round() as u32).max(1);
    // Effective per-axis factor after rounding keeps coverage exact.
    let kx = out_w as f64 / raster.width as f64;
    let ky = out_h as f64 / raster.height as f64;
    let scale_x = raster.georef.scale_x / kx;
    let scale_y = raster.georef.scale_y / ky;
    let georef = GeoRef {
        origin_x: raster.georef.origin_x - raster.georef.scale_x * 0.5 + scale_x * 0.5,
        origin_y: raster.georef.origin_y - raster.georef.scale_y * 0.5 + scale_y * 0.5,
        scale_x,
        scale_y,
    };
    // Source pixel center for output pixel i: (i + 0.5) / k - 0.5.
    let src_x = |i: u32| (i as f64 + 0.5) / kx - 0.5;
    let src_y = |j: u32| (j as f64 + 0.5) / ky - 0.5;
    match &raster.data {
        RasterData::F32(_) => {
            let mut out = Vec::with_capacity(out_w as usize * out_h as usize);
            for j in 0..out_h {
                for i in 0..out_w {
                    let v = raster
                        .sample_single(src_x(i), src_y(j), mode)
                        .map(|v| v as f32)
                        .unwrap_or(raster.nodata as f32);
                    out.push(v);
                }
            }
            Ok(Raster {
                width: out_w,
                height: out_h,
                channels: 1,
                data: RasterData::F32(out),
                georef,
                nodata: raster.nodata,
            })
        }
        RasterData::U8(_) => {
            let mut out = Vec::with_capacity(out_w as usize * out_h as usize * 3);
            for j in 0..out_h {
                for i in 0..out_w {
                    let (x, y) = (src_x(i), src_y(j));
                    let rgb = match mode {
                        SampleMode::Nearest => {
                            let nx = (x.round().max(0.0) as u32).min(raster.width - 1);
                            let ny = (y.round().max(0.0) as u32).min(raster.height - 1);
                            let p = raster.pixel_u8(nx, ny);
                            [p[0] as f64, p[1] as f64, p[2] as f64]
                        }
                        SampleMode::Bilinear => raster.sample_rgb(x, y).unwrap_or([0.0; 3]),
                    };
                    out.push(rgb[0].round().clamp(0.0, 255.0) as u8);
                    out.push(rgb[1].round().clamp(0.0, 255.0) as u8);
                    out.push(rgb[2].round().clamp(0.0, 255.0) as u8);
                }
            }
            Ok(Raster {
                width: out_w,
                height: out_h,
                channels: 3,
                data: RasterData::U8(out),
                georef,
                nodata: raster.nodata,
            })
        }
    }
}
