//! Final map aggregation with class filtering, plus PLY/CSV export.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use crate::preprocessing::voxel_key;
use crate::se3::Pose3;
use crate::types::{LabeledPoint, Scan};
use crate::{Error, Result};

/// Transforms all scans into the world frame, drops excluded labels, and
/// voxel-deduplicates at `voxel` (first point per voxel kept, scan order).
pub fn aggregate_map(
    scans: &[Scan],
    poses: &[Pose3],
    voxel: f64,
    exclude: &BTreeSet<u16>,
) -> Result<Vec<LabeledPoint>> {
    if scans.len() != poses.len() {
        return Err(Error::TrajectoryLengthMismatch(scans.len(), poses.len()));
    }
    if voxel <= 0.0 {
        return Err(Error::Config(format!("export voxel must be positive, got {voxel}")));
    }
    let mut taken: HashSet<(i64, i64, i64)> = HashSet::new();
    let mut out = Vec::new();
    for (scan, pose) in scans.iter().zip(poses) {
        for p in &scan.points {
            if exclude.contains(&p.label) {
                continue;
            }
            let world = pose.transform_point(&p.position);
            if taken.insert(voxel_key(&world, voxel)) {
                out.push(LabeledPoint {
                    position: world,
                    ..*p
                });
            }
        }
    }
    Ok(out)
}

/// Writes points as PLY with x, y, z, label, and confidence per vertex.
pub fn export_ply(points: &[LabeledPoint], path: &Path, binary: bool) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let format = if binary {
        "binary_little_endian"
    } else {
        "ascii"
    };
    write!(
        file,
        "ply\nformat {} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty ushort label\nproperty float confidence\nend_header\n",
        format,
        points.len()
    )?;
    if binary {
        let mut buf = Vec::with_capacity(points.len() * 18);
        for p in points {
            buf.extend_from_slice(&(p.position.x as f32).to_le_bytes());
            buf.extend_from_slice(&(p.position.y as f32).to_le_bytes());
            buf.extend_from_slice(&(p.position.z as f32).to_le_bytes());
            buf.extend_from_slice(&p.label.to_le_bytes());
            buf.extend_from_slice(&(p.confidence as f32).to_le_bytes());
        }
        file.write_all(&buf)?;
    } else {
        for p in points {
            writeln!(
                file,
                "{} {} {} {} {}",
                p.position.x as f32, p.position.y as f32, p.position.z as f32, p.label, p.confidence as f32
            )?;
        }
    }
    Ok(())
}

/// Minimal PLY reader for files produced by `export_ply` (both formats).
pub fn import_ply(path: &Path) -> Result<Vec<LabeledPoint>> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("no end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-utf8 header"))?;
    let mut binary = false;
    let mut count = 0usize;
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("format ") {
            binary = rest.starts_with("binary_little_endian");
        } else if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.trim().parse().map_err(|_| bad("bad vertex count"))?;
        }
    }
    let mut out = Vec::with_capacity(count);
    if binary {
        let body = &bytes[header_end..];
        if body.len() < count * 18 {
            return Err(bad("truncated binary body"));
        }
        for i in 0..count {
            let c = &body[i * 18..(i + 1) * 18];
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            out.push(LabeledPoint {
                position: nalgebra::Vector3::new(f(0), f(4), f(8)),
                label: u16::from_le_bytes([c[12], c[13]]),
                confidence: f(14),
                time_offset: 0.0,
            });
        }
    } else {
        let body = std::str::from_utf8(&bytes[header_end..]).map_err(|_| bad("non-utf8 body"))?;
        for line in body.lines().take(count) {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 5 {
                return Err(bad("bad vertex line"));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            out.push(LabeledPoint {
                position: nalgebra::Vector3::new(f(toks[0])?, f(toks[1])?, f(toks[2])?),
                label: toks[3].parse().map_err(|_| bad("bad label"))?,
                confidence: f(toks[4])?,
                time_offset: 0.0,
            });
        }
    }
    if out.len() != count {
        return Err(bad("vertex count mismatch"));
    }
    Ok(out)
}

/// CSV alternative: x,y,z,label.
pub fn export_csv(points: &[LabeledPoint], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "x,y,z,label")?;
    for p in points {
        writeln!(
            file,
            "{},{},{},{}",
            p.position.x, p.position.y, p.position.z, p.label
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::labels;
    use nalgebra::Vector3;

    fn pt(x: f64, y: f64, z: f64, label: u16) -> LabeledPoint {
        LabeledPoint::new(Vector3::new(x, y, z), label)
    }

    #[test]
    fn no_exclusion_identity_scan() {
        let scan = Scan::new(
            vec![pt(0.0, 0.0, 0.0, labels::ROAD), pt(5.0, 0.0, 0.0, labels::CAR)],
            0,
        );
        let out = aggregate_map(&[scan.clone()], &[Pose3::identity()], 0.05, &BTreeSet::new()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].position, scan.points[0].position);
    }

    #[test]
    fn excluded_label_filtered() {
        let mut points = vec![pt(0.0, 0.0, 0.0, labels::ROAD); 0];
        for i in 0..100 {
            let label = if i < 10 { labels::CAR } else { labels::ROAD };
            points.push(pt(i as f64, 0.0, 0.0, label));
        }
        let exclude: BTreeSet<u16> = [labels::CAR].into();
        let out = aggregate_map(&[Scan::new(points, 0)], &[Pose3::identity()], 0.05, &exclude).unwrap();
        assert_eq!(out.len(), 90);
        assert!(out.iter().all(|p| p.label != labels::CAR));
    }

    #[test]
    fn excluding_all_labels_empties_map() {
        let points = vec![pt(0.0, 0.0, 0.0, labels::ROAD), pt(1.0, 0.0, 0.0, labels::CAR)];
        let exclude: BTreeSet<u16> = [labels::ROAD, labels::CAR].into();
        let out = aggregate_map(&[Scan::new(points, 0)], &[Pose3::identity()], 0.05, &exclude).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(aggregate_map(&[], &[Pose3::identity()], 0.05, &BTreeSet::new()).is_err());
    }

    #[test]
    fn filtering_commutes_with_aggregation() {
        let points: Vec<_> = (0..50)
            .map(|i| {
                pt(
                    i as f64 * 0.3,
                    (i % 5) as f64,
                    0.0,
                    if i % 4 == 0 { labels::CAR } else { labels::BUILDING },
                )
            })
            .collect();
        let scans = vec![Scan::new(points.clone(), 0), Scan::new(points, 1)];
        let poses = vec![
            Pose3::identity(),
            Pose3::from_translation(Vector3::new(0.4, 0.0, 0.0)),
        ];
        let exclude: BTreeSet<u16> = [labels::CAR].into();

        let filtered_first: Vec<Scan> = scans
            .iter()
            .map(|s| {
                Scan::new(
                    s.points
                        .iter()
                        .filter(|p| !exclude.contains(&p.label))
                        .copied()
                        .collect(),
                    s.index,
                )
            })
            .collect();
        let a = aggregate_map(&filtered_first, &poses, 0.05, &BTreeSet::new()).unwrap();
        let b = aggregate_map(&scans, &poses, 0.05, &exclude).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn ply_empty_set_writes_zero_count_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        export_ply(&[], &path, false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(import_ply(&path).unwrap().is_empty());
    }

    #[test]
    fn ply_single_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        export_ply(&[pt(1.0, 2.0, 3.0, labels::POLE)], &path, false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 10); // 9 header lines + 1 vertex
    }

    #[test]
    fn ply_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let points: Vec<_> = (0..25)
            .map(|i| {
                let mut p = pt(i as f64 * 0.37, -i as f64 * 0.21, i as f64 * 0.05, labels::BUILDING);
                p.confidence = 0.75;
                p
            })
            .collect();
        for (name, binary) in [("a.ply", false), ("b.ply", true)] {
            let path = dir.path().join(name);
            export_ply(&points, &path, binary).unwrap();
            let back = import_ply(&path).unwrap();
            assert_eq!(back.len(), points.len());
            for (a, b) in points.iter().zip(&back) {
                assert!((a.position - b.position).norm() < 1e-5);
                assert_eq!(a.label, b.label);
                assert!((a.confidence - b.confidence).abs() < 1e-5);
            }
        }
    }
}
