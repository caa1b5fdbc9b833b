//! On-disk formats: the `.orlr` binary raster container, the sample
//! directory layout, and the correspondence CSV exchange format.
//!
//! Raster container layout (little-endian):
//! magic `ORLR`, u8 version = 1, u8 channels, u8 dtype (0 = f32, 1 = u8),
//! u8 pad, u32 width, u32 height, f64 origin_x, origin_y, scale_x, scale_y,
//! f64 nodata, then the row-major payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::geo::GeoRef;
use crate::matching::{Correspondence, CorrespondenceSet};
use crate::raster::{Raster, RasterData, RasterError};
use crate::sample::{PointMap, Sample};

const MAGIC: &[u8; 4] = b"ORLR";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Writes a raster to `path`; the parent directory must exist.
pub fn write_raster(raster: &Raster, path: &Path) -> Result<(), RasterError> {
    let mut buf = Vec::with_capacity(56 + raster.width as usize * raster.height as usize * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(raster.channels);
    buf.push(match raster.data {
        RasterData::F32(_) => DTYPE_F32,
        RasterData::U8(_) => DTYPE_U8,
    });
    buf.push(0); // pad
    buf.extend_from_slice(&raster.width.to_le_bytes());
    buf.extend_from_slice(&raster.height.to_le_bytes());
    for v in [
        raster.georef.origin_x,
        raster.georef.origin_y,
        raster.georef.scale_x,
        raster.georef.scale_y,
        raster.nodata,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match &raster.data {
        RasterData::F32(d) => {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        RasterData::U8(d) => buf.extend_from_slice(d),
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a raster written by [`write_raster`]; the round trip is
/// bit-identical.
pub fn read_raster(path: &Path) -> Result<Raster, RasterError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(RasterError::BadMagic);
    }
    if bytes.len() < 56 {
        return Err(RasterError::TruncatedFile("header".into()));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(RasterError::UnsupportedVersion(version));
    }
    let channels = bytes[5];
    let dtype = bytes[6];
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let mut f64s = [0.0f64; 5];
    for (i, v) in f64s.iter_mut().enumerate() {
        let o = 16 + i * 8;
        *v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    }
    let georef = GeoRef::new(f64s[0], f64s[1], f64s[2], f64s[3])?;
    let nodata = f64s[4];
    let n_px = width as usize * height as usize;
    let payload = &bytes[56..];
    match (dtype, channels) {
        (DTYPE_F32, 1) => {
            if payload.len() != n_px * 4 {
                return Err(RasterError::TruncatedFile(format!(
                    "expected {} payload bytes, got {}",
                    n_px * 4,
                    payload.len()
                )));
            }
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            // Construct directly: the validity rules were enforced at write
            // time and a bit-exact round trip must not re-interpret values.
            Ok(Raster {
                width,
                height,
                channels: 1,
                data: RasterData::F32(data),
                georef,
                nodata,
            })
        }
        (DTYPE_U8, 3) => {
            if payload.len() != n_px * 3 {
                return Err(RasterError::TruncatedFile(format!(
                    "expected {} payload bytes, got {}",
                    n_px * 3,
                    payload.len()
                )));
            }
            Ok(Raster {
                width,
                height,
                channels: 3,
                data: RasterData::U8(payload.to_vec()),
                georef,
                nodata,
            })
        }
        (DTYPE_F32, c) | (DTYPE_U8, c) => Err(RasterError::UnsupportedChannelCount(c)),
        (d, _) => Err(RasterError::UnsupportedDtype(d)),
    }
}

/// camera.json contents: intrinsics plus an optional world-to-camera pose
/// as a quaternion and translation.
#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tz: Option<f64>,
}

/// Writes a sample as a directory of rasters plus JSON/CSV sidecars.
pub fn save_sample(sample: &Sample, dir: &Path) -> Result<(), RasterError> {
    fs::create_dir_all(dir)?;
    write_raster(&sample.query, &dir.join("query.orlr"))?;
    write_raster(&sample.dop, &dir.join("dop.orlr"))?;
    write_raster(&sample.dsm, &dir.join("dsm.orlr"))?;

    let pm_georef = GeoRef::new(0.0, 0.0, 1.0, -1.0)?;
    for (name, c) in [("pm_x", 0usize), ("pm_y", 1), ("pm_z", 2)] {
        let plane = sample.point_map.channel_plane(c);
        let r = Raster {
            width: sample.point_map.width,
            height: sample.point_map.height,
            channels: 1,
            data: RasterData::F32(plane),
            georef: pm_georef,
            nodata: sample.point_map.sentinel as f64,
        };
        write_raster(&r, &dir.join(format!("{name}.orlr")))?;
    }

    let k = &sample.intrinsics;
    let mut cam = CameraFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
        qw: None,
        qx: None,
        qy: None,
        qz: None,
        tx: None,
        ty: None,
        tz: None,
    };
    if let Some(pose) = &sample.gt_pose {
        let [qw, qx, qy, qz] = pose.to_quaternion();
        let t = pose.translation();
        cam.qw = Some(qw);
        cam.qx = Some(qx);
        cam.qy = Some(qy);
        cam.qz = Some(qz);
        cam.tx = Some(t.x);
        cam.ty = Some(t.y);
        cam.tz = Some(t.z);
    }
    fs::write(dir.join("camera.json"), serde_json::to_string_pretty(&cam)?)?;

    let mut kp = String::new();
    for p in &sample.keypoints3d {
        kp.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
    }
    fs::write(dir.join("keypoints.csv"), kp)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&sample.meta)?)?;
    Ok(())
}

fn read_component(dir: &Path, name: &str) -> Result<Raster, RasterError> {
    let path = dir.join(format!("{name}.orlr"));
    if !path.exists() {
        return Err(RasterError::MissingComponent(name.into()));
    }
    read_raster(&path)
}

/// Loads a sample directory written by [`save_sample`]. The sample id is
/// the directory name.
pub fn load_sample(dir: &Path) -> Result<Sample, RasterError> {
    let query = read_component(dir, "query")?;
    let dop = read_component(dir, "dop")?;
    let dsm = read_component(dir, "dsm")?;
    let pm_x = read_component(dir, "pm_x")?;
    let pm_y = read_component(dir, "pm_y")?;
    let pm_z = read_component(dir, "pm_z")?;
    if pm_x.width != query.width || pm_x.height != query.height {
        return Err(RasterError::InconsistentDims(
            "point map planes do not match the query size".into(),
        ));
    }
    let (xs, ys, zs) = match (&pm_x.data, &pm_y.data, &pm_z.data) {
        (RasterData::F32(a), RasterData::F32(b), RasterData::F32(c)) => (a, b, c),
        _ => {
            return Err(RasterError::InconsistentDims(
                "point map planes must be f32 rasters".into(),
            ))
        }
    };
    if xs.len() != ys.len() || ys.len() != zs.len() {
        return Err(RasterError::InconsistentDims("point map plane sizes differ".into()));
    }
    let data: Vec<[f32; 3]> = xs
        .iter()
        .zip(ys.iter())
        .zip(zs.iter())
        .map(|((x, y), z)| [*x, *y, *z])
        .collect();
    let point_map = PointMap::from_parts(pm_x.width, pm_x.height, pm_z.nodata as f32, data)?;

    let cam_path = dir.join("camera.json");
    if !cam_path.exists() {
        return Err(RasterError::MissingComponent("camera".into()));
    }
    let cam: CameraFile = serde_json::from_str(&fs::read_to_string(cam_path)?)?;
    let intrinsics =
        CameraIntrinsics::new_unchecked(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height);
    let gt_pose = match (cam.qw, cam.qx, cam.qy, cam.qz, cam.tx, cam.ty, cam.tz) {
        (Some(qw), Some(qx), Some(qy), Some(qz), Some(tx), Some(ty), Some(tz)) => Some(
            CameraPose::from_quaternion(qw, qx, qy, qz, Vector3::new(tx, ty, tz))
                .map_err(RasterError::Geometry)?,
        ),
        _ => None,
    };

    let kp_path = dir.join("keypoints.csv");
    if !kp_path.exists() {
        return Err(RasterError::MissingComponent("keypoints".into()));
    }
    let mut keypoints3d = Vec::new();
    for (ln, line) in fs::read_to_string(kp_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(RasterError::Parse(format!("keypoints.csv line {}", ln + 1)));
        }
        let mut v = [0.0f64; 3];
        for (i, s) in parts.iter().enumerate() {
            v[i] = s
                .trim()
                .parse::<f64>()
                .map_err(|e| RasterError::Parse(format!("keypoints.csv line {}: {e}", ln + 1)))?;
        }
        keypoints3d.push(Vector3::new(v[0], v[1], v[2]));
    }

    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(RasterError::MissingComponent("meta".into()));
    }
    let meta: BTreeMap<String, String> = serde_json::from_str(&fs::read_to_string(meta_path)?)?;

    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());

    Ok(Sample {
        id,
        query,
        point_map,
        dop,
        dsm,
        intrinsics,
        gt_pose,
        keypoints3d,
        meta,
    })
}

/// Writes correspondences as `qx,qy,dx,dy,conf` CSV, the exchange format
/// for plugging in externally computed matches.
pub fn write_correspondences(corrs: &CorrespondenceSet, path: &Path) -> Result<(), RasterError> {
    let mut out = String::from("qx,qy,dx,dy,conf\n");
    for c in corrs.iter() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.query.x, c.query.y, c.dop.x, c.dop.y, c.confidence
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the correspondence CSV written by [`write_correspondences`].
pub fn read_correspondences(path: &Path) -> Result<Vec<Correspondence>, RasterError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "qx,qy,dx,dy,conf" => {}
        _ => return Err(RasterError::Parse("missing correspondence CSV header".into())),
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(RasterError::Parse(format!("correspondence CSV line {}", ln + 2)));
        }
        let mut v = [0.0f64; 5];
        for (i, s) in parts.iter().enumerate() {
            v[i] = s
                .trim()
                .parse::<f64>()
                .map_err(|e| RasterError::Parse(format!("correspondence CSV line {}: {e}", ln + 2)))?;
        }
        out.push(Correspondence {
            query: Vector2::new(v[0], v[1]),
            dop: Vector2::new(v[2], v[3]),
            confidence: v[4],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA as ND;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ortholoc-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn f32_raster_round_trip_bit_exact() {
        let dir = tmpdir("f32");
        let g = GeoRef::new(7.25, -3.5, 0.05, -0.05).unwrap();
        let r = Raster::new_f32(2, 2, g, ND, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = dir.join("r.orlr");
        write_raster(&r, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back, r);
        // Bit-exact: rewriting the loaded raster yields identical bytes.
        let path2 = dir.join("r2.orlr");
        write_raster(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn u8_raster_payload_size() {
        let dir = tmpdir("u8");
        let g = GeoRef::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let n = 64u32;
        let r = Raster::new_u8(n, n, g, vec![9; (n * n * 3) as usize]).unwrap();
        let path = dir.join("dop.orlr");
        write_raster(&r, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 56 + (n * n * 3) as usize);
        assert_eq!(read_raster(&path).unwrap(), r);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tmpdir("magic");
        let path = dir.join("bad.orlr");
        fs::write(&path, b"NOPE0000000000000000000000000000000000000000000000000000").unwrap();
        assert!(matches!(read_raster(&path), Err(RasterError::BadMagic)));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tmpdir("trunc");
        let g = GeoRef::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let r = Raster::constant_f32(4, 4, g, 1.0);
        let path = dir.join("r.orlr");
        write_raster(&r, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_raster(&path), Err(RasterError::TruncatedFile(_))));
    }

    #[test]
    fn correspondence_csv_round_trip() {
        let dir = tmpdir("csv");
        let pairs = vec![
            Correspondence {
                query: Vector2::new(1.5, 2.25),
                dop: Vector2::new(10.0, 20.0),
                confidence: 0.75,
            },
            Correspondence {
                query: Vector2::new(0.0, 0.0),
                dop: Vector2::new(3.125, 9.5),
                confidence: 1.0,
            },
        ];
        let set = CorrespondenceSet::from_pairs(pairs.clone());
        let path = dir.join("corrs.csv");
        write_correspondences(&set, &path).unwrap();
        let back = read_correspondences(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(pairs.iter()) {
            assert_eq!(a.query, b.query);
            assert_eq!(a.dop, b.dop);
            assert_eq!(a.confidence, b.confidence);
        }
    }
}
