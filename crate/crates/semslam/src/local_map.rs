//! The ICP target structure: a voxel hash grid of labeled points in the world
//! frame with exact nearest-neighbor queries and range-based pruning.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::preprocessing::voxel_key;
use crate::se3::Pose3;
use crate::types::{LabeledPoint, Scan, SemanticConfig};

#[derive(Debug, Clone)]
pub struct SemanticVoxelMap {
    pub voxel_size: f64,
    pub max_points_per_voxel: usize,
    pub max_range: f64,
    cells: HashMap<(i64, i64, i64), Vec<LabeledPoint>>,
    critical_labels: std::collections::BTreeSet<u16>,
}

impl SemanticVoxelMap {
    pub fn new(voxel_size: f64, max_points_per_voxel: usize, max_range: f64, cfg: &SemanticConfig) -> Self {
        Self {
            voxel_size,
            max_points_per_voxel,
            max_range,
            cells: HashMap::new(),
            critical_labels: cfg.critical_labels.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &LabeledPoint> {
        self.cells.values().flatten()
    }

    /// Inserts a downsampled scan, transformed by `pose` into the world frame.
    /// Per cell at most `max_points_per_voxel` non-critical points are kept;
    /// critical-label points always enter. Near-duplicates (< 1e-6 m) are
    /// skipped.
    pub fn insert_scan(&mut self, scan: &Scan, pose: &Pose3) {
        for p in &scan.points {
            let world = LabeledPoint {
                position: pose.transform_point(&p.position),
                ..*p
            };
            self.insert_point(world);
        }
    }

    pub fn insert_point(&mut self, point: LabeledPoint) {
        let key = voxel_key(&point.position, self.voxel_size);
        let cell = self.cells.entry(key).or_default();
        if cell
            .iter()
            .any(|q| (q.position - point.position).norm() < 1e-6)
        {
            return;
        }
        let critical = self.critical_labels.contains(&point.label);
        if !critical {
            let non_critical = cell
                .iter()
                .filter(|q| !self.critical_labels.contains(&q.label))
                .count();
            if non_critical >= self.max_points_per_voxel {
                return;
            }
        }
        cell.push(point);
    }

    /// Exact nearest neighbor within `max_dist`, or None.
    ///
    /// Voxel shells around the query cell are searched outward; a shell at
    /// Chebyshev index k cannot contain a point closer than (k−1)·voxel_size,
    /// so the search stops as soon as the current best beats that bound.
    pub fn nearest_neighbor(
        &self,
        query: &Vector3<f64>,
        max_dist: f64,
    ) -> Option<(LabeledPoint, f64)> {
        if self.cells.is_empty() {
            return None;
        }
        let center = voxel_key(query, self.voxel_size);
        // `as i64` saturates for huge/infinite max_dist; avoid overflowing
        // past i64::MAX.
        let max_shell = ((max_dist / self.voxel_size).ceil() as i64).saturating_add(1);
        let mut best: Option<(LabeledPoint, f64)> = None;
        for k in 0..=max_shell {
            let lower_bound = (k - 1).max(0) as f64 * self.voxel_size;
            if lower_bound > max_dist {
                break;
            }
            if let Some((_, d)) = best {
                if d <= lower_bound {
                    break;
                }
            }
            self.visit_shell(center, k, |cell| {
                for p in cell {
                    let d = (p.position - query).norm();
                    if d <= max_dist && best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((*p, d));
                    }
                }
            });
        }
        best
    }

    fn visit_shell(&self, center: (i64, i64, i64), k: i64, mut f: impl FnMut(&Vec<LabeledPoint>)) {
        if k == 0 {
            if let Some(cell) = self.cells.get(&center) {
                f(cell);
            }
            return;
        }
        for dx in -k..=k {
            for dy in -k..=k {
                for dz in -k..=k {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != k {
                        continue;
                    }
                    if let Some(cell) = self.cells.get(&(center.0 + dx, center.1 + dy, center.2 + dz)) {
                        f(cell);
                    }
                }
            }
        }
    }

    /// Drops every cell whose center is farther than `max_range` from
    /// `center`.
    pub fn prune_far(&mut self, center: &Vector3<f64>) {
        let v = self.voxel_size;
        let max_range = self.max_range;
        self.cells.retain(|key, _| {
            let cell_center = Vector3::new(
                (key.0 as f64 + 0.5) * v,
                (key.1 as f64 + 0.5) * v,
                (key.2 as f64 + 0.5) * v,
            );
            (cell_center - center).norm() <= max_range
        });
    }
}
