//! Readers/writers for KITTI velodyne scans, SemanticKITTI labels,
//! calibration, and trajectory files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::se3::Pose3;
use crate::types::{LabeledPoint, Scan};
use crate::{Error, Result};

/// Locations of one KITTI odometry sequence.
#[derive(Debug, Clone)]
pub struct SequencePaths {
    pub velodyne_dir: PathBuf,
    pub labels_dir: Option<PathBuf>,
    pub calib_file: Option<PathBuf>,
    pub poses_file: Option<PathBuf>,
}

impl SequencePaths {
    /// Enumerates consecutive zero-padded 6-digit `.bin` files starting at
    /// 000000.
    pub fn scan_files(&self) -> Result<Vec<(PathBuf, Option<PathBuf>)>> {
        let mut out = Vec::new();
        for index in 0.. {
            let bin = self.velodyne_dir.join(format!("{index:06}.bin"));
            if !bin.is_file() {
                break;
            }
            let label = self
                .labels_dir
                .as_ref()
                .map(|d| d.join(format!("{index:06}.label")))
                .filter(|p| p.is_file());
            out.push((bin, label));
        }
        if out.is_empty() {
            return Err(Error::MissingInput(self.velodyne_dir.clone()));
        }
        Ok(out)
    }
}

/// Normalized sweep time from the firing azimuth: KITTI scanners start a
/// revolution facing rearward (azimuth π), so the offset runs from 0 there
/// around the full turn.
pub fn azimuth_time_offset(x: f64, y: f64) -> f64 {
    let azimuth = y.atan2(x); // (−π, π]
    let t = (std::f64::consts::PI - azimuth) / std::f64::consts::TAU;
    t.rem_euclid(1.0)
}

/// Reads a KITTI `.bin` scan (float32 x,y,z,intensity) and, when given, its
/// SemanticKITTI `.label` companion (uint32: low 16 bits semantic class,
/// high 16 bits instance id).
pub fn read_scan(bin_path: &Path, label_path: Option<&Path>) -> Result<Scan> {
    let bytes = fs::read(bin_path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedScan(format!(
            "{}: size {} is not a multiple of 16",
            bin_path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;

    let labels: Option<Vec<u32>> = match label_path {
        None => None,
        Some(path) => {
            let lb = fs::read(path)?;
            if lb.len() % 4 != 0 {
                return Err(Error::MalformedScan(format!(
                    "{}: size {} is not a multiple of 4",
                    path.display(),
                    lb.len()
                )));
            }
            let entries: Vec<u32> = lb
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if entries.len() != n {
                return Err(Error::LabelLengthMismatch {
                    scan_points: n,
                    label_entries: entries.len(),
                });
            }
            Some(entries)
        }
    };

    let mut points = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes([chunk[o], chunk[o + 1], chunk[o + 2], chunk[o + 3]]);
        let x = f(0) as f64;
        let y = f(4) as f64;
        let z = f(8) as f64;
        let label = labels
            .as_ref()
            .map(|l| (l[i] & 0xFFFF) as u16)
            .unwrap_or(0);
        points.push(LabeledPoint {
            position: Vector3::new(x, y, z),
            label,
            // ground-truth labels carry no probability channel
            confidence: 1.0,
            time_offset: azimuth_time_offset(x, y),
        });
    }
    Ok(Scan::new(points, 0))
}

/// Instance id of a raw SemanticKITTI label value.
pub fn label_instance(raw: u32) -> u16 {
    (raw >> 16) as u16
}

/// Semantic class of a raw SemanticKITTI label value.
pub fn label_semantic(raw: u32) -> u16 {
    (raw & 0xFFFF) as u16
}

/// Reads a KITTI pose file: one row-major 3×4 matrix per line.
pub fn read_poses_kitti(path: &Path) -> Result<Vec<Pose3>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_pose_line(&line, i + 1)?);
    }
    Ok(out)
}

fn parse_pose_line(line: &str, lineno: usize) -> Result<Pose3> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedPoseLine(lineno))?;
    if vals.len() != 12 {
        return Err(Error::MalformedPoseLine(lineno));
    }
    let r = Matrix3::new(
        vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
    );
    let deviation = (r * r.transpose() - Matrix3::identity()).norm();
    if deviation > 1e-3 {
        return Err(Error::NonOrthonormalRotation(lineno));
    }
    let t = Vector3::new(vals[3], vals[7], vals[11]);
    Ok(Pose3::from_matrix(&r, t))
}

/// Writes a trajectory in KITTI pose format, 9 significant digits.
pub fn write_poses_kitti(trajectory: &[Pose3], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for pose in trajectory {
        let r = pose.rotation_matrix();
        let t = pose.translation;
        writeln!(
            file,
            "{:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        )?;
    }
    Ok(())
}

/// Writes a trajectory in TUM format: timestamp tx ty tz qx qy qz qw.
/// Timestamps are synthesized from the frame index at `rate_hz`.
pub fn write_poses_tum(trajectory: &[Pose3], rate_hz: f64, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for (i, pose) in trajectory.iter().enumerate() {
        let q = pose.rotation.quaternion();
        let t = pose.translation;
        writeln!(
            file,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            i as f64 / rate_hz,
            t.x,
            t.y,
            t.z,
            q.i,
            q.j,
            q.k,
            q.w,
        )?;
    }
    Ok(())
}

/// Reads the `Tr` (velodyne → camera) transform from a KITTI calib.txt.
pub fn read_calib_tr(path: &Path) -> Result<Pose3> {
    let file = fs::File::open(path)?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("Tr:") {
            return parse_pose_line(rest, i + 1);
        }
    }
    Err(Error::MalformedFile {
        path: path.to_path_buf(),
        reason: "no Tr: line".into(),
    })
}
