//! KITTI-style point cloud binaries and pose text files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};

/// Bytes per point record: x, y, z, reflectance as little-endian f32.
pub const KITTI_RECORD: usize = 16;

pub fn decode_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % KITTI_RECORD != 0 {
        return Err(Error::Format(format!(
            "point file has {} bytes, not a multiple of {KITTI_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / KITTI_RECORD;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(KITTI_RECORD) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        points.push(Point3::new(f(0) as f64, f(1) as f64, f(2) as f64));
        intensity.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

pub fn load_kitti_bin(path: &Path) -> Result<PointCloud> {
    decode_kitti_bin(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Coordinates are narrowed to f32; missing intensity is written as 0.
pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        let r = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_kitti_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, encode_kitti_bin(cloud))?;
    Ok(())
}

/// Largest rotation drift accepted without re-orthonormalizing.
pub const POSE_DRIFT_TOLERANCE: f64 = 1e-6;

/// One pose per non-empty line: 12 floats, the row-major 3x4 matrix `[R|t]`.
pub fn parse_pose_file(text: &str, path: &Path) -> Result<Vec<RigidTransform>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad number {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(err(format!("expected 12 values, found {}", vals.len())));
        }
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let r = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        let t = Vector3::new(vals[3], vals[7], vals[11]);
        let drift = (r.transpose() * r - Matrix3::identity()).abs().max().max((r.determinant() - 1.0).abs());
        let pose = if drift <= POSE_DRIFT_TOLERANCE {
            RigidTransform::new(Rotation3::from_matrix_unchecked(r), t)
        } else if drift < 0.1 && r.determinant() > 0.0 {
            log::warn!(
                "{}:{line_no}: rotation drift {drift:.3e} exceeds {POSE_DRIFT_TOLERANCE:e}; re-orthonormalizing",
                path.display()
            );
            RigidTransform::from_matrix_orthonormalized(r, t)
        } else {
            return Err(err(format!("matrix is not a rotation (drift {drift:.3e})")));
        };
        poses.push(pose);
    }
    Ok(poses)
}

pub fn load_pose_file(path: &Path) -> Result<Vec<RigidTransform>> {
    parse_pose_file(&fs::read_to_string(path)?, path)
}

/// Shortest round-trip decimal for every entry, one pose per line.
pub fn format_poses(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for p in poses {
        let m = p.matrix3x4();
        let row: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{}", m[(r, c)]))
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn save_pose_file(poses: &[RigidTransform], path: &Path) -> Result<()> {
    fs::write(path, format_poses(poses))?;
    Ok(())
}
