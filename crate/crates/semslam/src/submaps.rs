//! 2D semantic occupancy submaps.
//!
//! Every scan point is ray-cast into a per-label hit-count grid: the endpoint
//! cell collects a hit under the point's label, intermediate cells collect
//! misses. Keeping counts per label makes ground points harmless (they form
//! their own layer) so no explicit ground segmentation is needed.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::se3::Pose3;
use crate::types::{Scan, UNLABELED};
use crate::{Error, Result};

/// Height band (relative to the sensor) admitted into the grid.
pub const HEIGHT_BAND_ABOVE: f64 = 1.0;
pub const HEIGHT_BAND_BELOW: f64 = 3.0;

const SUBMAP_MAGIC: &[u8; 8] = b"SEMSUBM\x01";

/// Per-cell label hit counts plus a miss count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cell {
    pub hits: BTreeMap<u16, u32>,
    pub misses: u32,
}

impl Cell {
    pub fn total_hits(&self) -> u32 {
        self.hits.values().sum()
    }

    /// Label with the most hits (ties broken by smaller id) and its fraction
    /// of all observations in the cell.
    pub fn dominant_label(&self) -> (u16, f64) {
        let Some((&label, &count)) = self
            .hits
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        else {
            return (UNLABELED, 0.0);
        };
        let denom = self.total_hits() + self.misses;
        (label, count as f64 / denom as f64)
    }

    /// Fraction of observations in this cell carrying `label`.
    pub fn label_fraction(&self, label: u16) -> f64 {
        let denom = self.total_hits() + self.misses;
        if denom == 0 {
            return 0.0;
        }
        *self.hits.get(&label).unwrap_or(&0) as f64 / denom as f64
    }
}

/// Sparse multi-layer occupancy grid; grows on demand.
#[derive(Debug, Clone)]
pub struct SemanticGrid {
    pub resolution: f64,
    pub origin: Vector2<f64>,
    /// Pose of the grid frame in the world.
    pub local_pose: Pose3,
    cells: HashMap<(i32, i32), Cell>,
}

impl SemanticGrid {
    pub fn new(resolution: f64, local_pose: Pose3) -> Self {
        Self {
            resolution,
            origin: Vector2::zeros(),
            local_pose,
            cells: HashMap::new(),
        }
    }

    pub fn cell_index(&self, p: &Vector2<f64>) -> (i32, i32) {
        (
            ((p.x - self.origin.x) / self.resolution).floor() as i32,
            ((p.y - self.origin.y) / self.resolution).floor() as i32,
        )
    }

    pub fn cell(&self, idx: (i32, i32)) -> Option<&Cell> {
        self.cells.get(&idx)
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (&(i32, i32), &Cell)> {
        self.cells.iter()
    }

    pub fn num_occupied(&self) -> usize {
        self.cells.values().filter(|c| c.total_hits() > 0).count()
    }

    pub fn total_hits(&self) -> u64 {
        self.cells.values().map(|c| c.total_hits() as u64).sum()
    }

    /// Casts one ray in grid-frame coordinates: hit at the endpoint under the
    /// point's label, one miss per intermediate Bresenham cell.
    pub fn insert_ray(&mut self, origin_2d: &Vector2<f64>, endpoint: &Vector2<f64>, label: u16) {
        let start = self.cell_index(origin_2d);
        let end = self.cell_index(endpoint);
        for cell in bresenham(start, end) {
            if cell == end {
                *self
                    .cells
                    .entry(cell)
                    .or_default()
                    .hits
                    .entry(label)
                    .or_insert(0) += 1;
            } else {
                self.cells.entry(cell).or_default().misses += 1;
            }
        }
    }
}

/// Integer line trace from `start` to `end`, inclusive.
pub fn bresenham(start: (i32, i32), end: (i32, i32)) -> Vec<(i32, i32)> {
    let (mut x, mut y) = start;
    let dx = (end.0 - x).abs();
    let dy = -(end.1 - y).abs();
    let sx = if x < end.0 { 1 } else { -1 };
    let sy = if y < end.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((x, y));
        if (x, y) == end {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// A bounded-lifetime grid fed by consecutive scans; immutable once finished.
#[derive(Debug, Clone)]
pub struct Submap {
    pub grid: SemanticGrid,
    pub scan_range: Option<(usize, usize)>,
    pub finished: bool,
}

impl Submap {
    pub fn new(resolution: f64, local_pose: Pose3) -> Self {
        Self {
            grid: SemanticGrid::new(resolution, local_pose),
            scan_range: None,
            finished: false,
        }
    }

    /// Ray-casts every point of `scan` from the sensor position given by
    /// `pose`, the sensor pose expressed in the grid frame. Points outside
    /// the height band around the sensor are skipped.
    pub fn insert_scan(&mut self, scan: &Scan, pose: &Pose3) -> Result<()> {
        if self.finished {
            return Err(Error::SubmapFinished);
        }
        let sensor = pose.translation;
        let origin_2d = Vector2::new(sensor.x, sensor.y);
        for p in &scan.points {
            let g = pose.transform_point(&p.position);
            let rel_z = g.z - sensor.z;
            if rel_z > HEIGHT_BAND_ABOVE || rel_z < -HEIGHT_BAND_BELOW {
                continue;
            }
            self.grid
                .insert_ray(&origin_2d, &Vector2::new(g.x, g.y), p.label);
        }
        self.scan_range = Some(match self.scan_range {
            None => (scan.index, scan.index),
            Some((first, last)) => (first.min(scan.index), last.max(scan.index)),
        });
        Ok(())
    }

    pub fn finalize(&mut self) {
        self.finished = true;
    }
}

fn write_pose3(buf: &mut Vec<u8>, pose: &Pose3) {
    let q = pose.rotation.quaternion();
    for v in [q.w, q.i, q.j, q.k, pose.translation.x, pose.translation.y, pose.translation.z] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i32(r: &mut impl Read) -> Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

impl Submap {
    /// Versioned binary serialization: header (resolution, origin, pose,
    /// bounding box) followed by run-length-encoded row-major cells.
    pub fn serialize(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(SUBMAP_MAGIC);
        buf.extend_from_slice(&self.grid.resolution.to_le_bytes());
        buf.extend_from_slice(&self.grid.origin.x.to_le_bytes());
        buf.extend_from_slice(&self.grid.origin.y.to_le_bytes());
        write_pose3(&mut buf, &self.grid.local_pose);
        let (first, last) = self.scan_range.unwrap_or((0, 0));
        buf.extend_from_slice(&(first as u32).to_le_bytes());
        buf.extend_from_slice(&(last as u32).to_le_bytes());
        buf.push(self.finished as u8);

        let keys: Vec<_> = self.grid.cells.keys().copied().collect();
        let (min_x, max_x, min_y, max_y) = if keys.is_empty() {
            (0, -1, 0, -1)
        } else {
            (
                keys.iter().map(|k| k.0).min().unwrap(),
                keys.iter().map(|k| k.0).max().unwrap(),
                keys.iter().map(|k| k.1).min().unwrap(),
                keys.iter().map(|k| k.1).max().unwrap(),
            )
        };
        buf.extend_from_slice(&min_x.to_le_bytes());
        buf.extend_from_slice(&min_y.to_le_bytes());
        let dims = (
            (max_x - min_x + 1).max(0) as u32,
            (max_y - min_y + 1).max(0) as u32,
        );
        buf.extend_from_slice(&dims.0.to_le_bytes());
        buf.extend_from_slice(&dims.1.to_le_bytes());

        // row-major over the bounding box; empty runs collapsed
        let mut empty_run: u32 = 0;
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                match self.grid.cells.get(&(x, y)) {
                    None => empty_run += 1,
                    Some(cell) => {
                        if empty_run > 0 {
                            buf.push(0);
                            buf.extend_from_slice(&empty_run.to_le_bytes());
                            empty_run = 0;
                        }
                        buf.push(1);
                        buf.extend_from_slice(&cell.misses.to_le_bytes());
                        buf.extend_from_slice(&(cell.hits.len() as u16).to_le_bytes());
                        for (&label, &count) in &cell.hits {
                            buf.extend_from_slice(&label.to_le_bytes());
                            buf.extend_from_slice(&count.to_le_bytes());
                        }
                    }
                }
            }
        }
        if empty_run > 0 {
            buf.push(0);
            buf.extend_from_slice(&empty_run.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn deserialize(r: &mut impl Read) -> Result<Submap> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SUBMAP_MAGIC {
            return Err(Error::MalformedScan("bad submap magic".into()));
        }
        let resolution = read_f64(r)?;
        let origin = Vector2::new(read_f64(r)?, read_f64(r)?);
        let qw = read_f64(r)?;
        let qi = read_f64(r)?;
        let qj = read_f64(r)?;
        let qk = read_f64(r)?;
        let t = Vector3::new(read_f64(r)?, read_f64(r)?, read_f64(r)?);
        let rotation = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(qw, qi, qj, qk));
        let first = read_u32(r)? as usize;
        let last = read_u32(r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let min_x = read_i32(r)?;
        let min_y = read_i32(r)?;
        let dims_x = read_u32(r)? as i64;
        let dims_y = read_u32(r)? as i64;

        let mut grid = SemanticGrid::new(resolution, Pose3::new(rotation, t));
        grid.origin = origin;
        let total = dims_x * dims_y;
        let mut pos: i64 = 0;
        while pos < total {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            match tag[0] {
                0 => pos += read_u32(r)? as i64,
                1 => {
                    let misses = read_u32(r)?;
                    let nlabels = read_u16(r)?;
                    let mut cell = Cell {
                        misses,
                        ..Default::default()
                    };
                    for _ in 0..nlabels {
                        let label = read_u16(r)?;
                        let count = read_u32(r)?;
                        cell.hits.insert(label, count);
                    }
                    let x = min_x + (pos % dims_x) as i32;
                    let y = min_y + (pos / dims_x) as i32;
                    grid.cells.insert((x, y), cell);
                    pos += 1;
                }
                t => {
                    return Err(Error::MalformedScan(format!(
                        "bad submap cell tag {t}"
                    )))
                }
            }
        }
        Ok(Submap {
            grid,
            scan_range: if total == 0 && first == 0 && last == 0 {
                None
            } else {
                Some((first, last))
            },
            finished: flag[0] != 0,
        })
    }
}

/// Renders dominant labels as an RGB image for debugging.
pub fn grid_to_image(grid: &SemanticGrid) -> image::RgbImage {
    let keys: Vec<_> = grid.iter_cells().map(|(k, _)| *k).collect();
    if keys.is_empty() {
        return image::RgbImage::new(1, 1);
    }
    let min_x = keys.iter().map(|k| k.0).min().unwrap();
    let max_x = keys.iter().map(|k| k.0).max().unwrap();
    let min_y = keys.iter().map(|k| k.1).min().unwrap();
    let max_y = keys.iter().map(|k| k.1).max().unwrap();
    let w = (max_x - min_x + 1) as u32;
    let h = (max_y - min_y + 1) as u32;
    let mut img = image::RgbImage::new(w, h);
    for ((x, y), cell) in grid.iter_cells() {
        let (label, frac) = cell.dominant_label();
        let px = (x - min_x) as u32;
        // image rows grow downward, grid y grows upward
        let py = (max_y - y) as u32;
        let color = label_color(label, frac);
        img.put_pixel(px, py, image::Rgb(color));
    }
    img
}

fn label_color(label: u16, fraction: f64) -> [u8; 3] {
    if label == UNLABELED {
        return [40, 40, 40];
    }
    // deterministic hash-based palette, scaled by the hit fraction
    let h = (label as u32).wrapping_mul(2654435761);
    let base = [
        (h >> 16 & 0xFF) as u8,
        (h >> 8 & 0xFF) as u8,
        (h & 0xFF) as u8,
    ];
    let s = 0.35 + 0.65 * fraction.clamp(0.0, 1.0);
    [
        (base[0] as f64 * s) as u8,
        (base[1] as f64 * s) as u8,
        (base[2] as f64 * s) as u8,
    ]
}
