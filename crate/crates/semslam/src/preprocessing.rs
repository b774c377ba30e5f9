//! Per-scan pipeline stage: dynamic-class removal, motion deskewing, and the
//! two label-aware voxel downsampling passes.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::se3::{se3_exp, se3_log, Pose3};
use crate::types::{LabeledPoint, Scan, SemanticConfig};
use crate::{Error, Result};

/// Removes every point whose label is in the dynamic set. Order preserved.
pub fn filter_dynamic(scan: &Scan, cfg: &SemanticConfig) -> Scan {
    let points = scan
        .points
        .iter()
        .filter(|p| !cfg.dynamic_labels.contains(&p.label))
        .copied()
        .collect();
    Scan {
        points,
        index: scan.index,
        duration: scan.duration,
    }
}

/// Motion-compensates a sweep under a constant-velocity model so every point
/// is expressed in the sweep-end frame.
///
/// A point captured at normalized time t is moved by exp((t − 1)·log(motion)),
/// the remaining ego-motion between its capture instant and the sweep end.
pub fn deskew(scan: &Scan, relative_motion: &Pose3) -> Scan {
    let xi = match se3_log(relative_motion) {
        Ok(xi) => xi,
        // A half-turn per sweep is outside the model; leave the scan as-is.
        Err(_) => return scan.clone(),
    };
    if xi.norm() < 1e-12 {
        return scan.clone();
    }
    let points = scan
        .points
        .iter()
        .map(|p| {
            let motion = se3_exp(&xi.scaled(p.time_offset - 1.0));
            LabeledPoint {
                position: motion.transform_point(&p.position),
                ..*p
            }
        })
        .collect();
    Scan {
        points,
        index: scan.index,
        duration: scan.duration,
    }
}

pub fn voxel_key(position: &Vector3<f64>, voxel_size: f64) -> (i64, i64, i64) {
    (
        (position.x / voxel_size).floor() as i64,
        (position.y / voxel_size).floor() as i64,
        (position.z / voxel_size).floor() as i64,
    )
}

/// First downsampling pass: at most `max_per_voxel` non-critical points per
/// v×v×v voxel in scan order, while critical-label points are always kept.
pub fn adaptive_voxel_downsample(
    scan: &Scan,
    v: f64,
    max_per_voxel: usize,
    cfg: &SemanticConfig,
) -> Result<Scan> {
    if v <= 0.0 {
        return Err(Error::Config(format!("voxel size must be positive, got {v}")));
    }
    if max_per_voxel == 0 {
        return Err(Error::Config("max_per_voxel must be at least 1".into()));
    }
    let mut non_critical_count: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut points = Vec::with_capacity(scan.points.len());
    for p in &scan.points {
        if cfg.critical_labels.contains(&p.label) {
            points.push(*p);
            continue;
        }
        let count = non_critical_count.entry(voxel_key(&p.position, v)).or_insert(0);
        if *count < max_per_voxel {
            *count += 1;
            points.push(*p);
        }
    }
    Ok(Scan {
        points,
        index: scan.index,
        duration: scan.duration,
    })
}

/// Second, coarser pass used for registration: one point per α·v voxel,
/// critical-label points exempt.
pub fn registration_downsample(scan: &Scan, v: f64, alpha: f64, cfg: &SemanticConfig) -> Scan {
    let coarse = v * alpha;
    let mut taken: HashMap<(i64, i64, i64), ()> = HashMap::new();
    let points = scan
        .points
        .iter()
        .filter(|p| {
            if cfg.critical_labels.contains(&p.label) {
                return true;
            }
            taken.insert(voxel_key(&p.position, coarse), ()).is_none()
        })
        .copied()
        .collect();
    Scan {
        points,
        index: scan.index,
        duration: scan.duration,
    }
}
