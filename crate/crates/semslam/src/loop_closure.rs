//! Semantic branch-and-bound scan matching against finished submaps and loop
//! constraint generation.
//!
//! The search space is the discrete window of (angle, x, y) offsets around an
//! initial guess. Upper bounds come from per-label max-pooled grids: at level
//! h each cell stores the maximum hit fraction of that label over the
//! 2^h × 2^h window, so a block's bound can never miss a candidate inside it
//! and pruning is exact. A point scores the hit fraction of its own label in
//! the cell it lands in; unlabeled points score the dominant label's
//! fraction.

use std::collections::{HashMap, HashSet};

use nalgebra::Vector2;

use crate::pose_graph::{Constraint, ConstraintKind, PoseGraph, VarId};
use crate::se2::Se2;
use crate::submaps::{SemanticGrid, Submap};
use crate::types::UNLABELED;

/// A scan projected into the grid plane for matching.
pub type Scan2d = Vec<(Vector2<f64>, u16)>;

/// Mean own-label hit fraction of `scan_2d` transformed by `pose` into the
/// grid frame.
pub fn score(grid: &SemanticGrid, scan_2d: &[(Vector2<f64>, u16)], pose: &Se2) -> f64 {
    if scan_2d.is_empty() {
        return 0.0;
    }
    let sum: f64 = scan_2d
        .iter()
        .map(|(p, label)| {
            let cell = grid.cell_index(&pose.transform_point(p));
            match grid.cell(cell) {
                None => 0.0,
                Some(c) => {
                    if *label == UNLABELED {
                        c.dominant_label().1
                    } else {
                        c.label_fraction(*label)
                    }
                }
            }
        })
        .sum();
    sum / scan_2d.len() as f64
}

/// Per-label max-pooled grids. Channel 0 holds the dominant-label fraction
/// (used by unlabeled points); one channel per label seen in the grid.
///
/// Level 0 is stored sparsely with exact values; levels above it store
/// upper bounds quantized to u8 with ceiling rounding, so they stay
/// admissible while costing one byte per cell instead of eight. Only the
/// exact level feeds candidate scores, so the search result is unaffected.
#[derive(Debug, Clone)]
pub struct MaxGridPyramid {
    min: (i32, i32),
    width: usize,
    height: usize,
    depth: usize,
    channel_of: HashMap<u16, usize>,
    /// Exact per-channel values of occupied cells (channel-major per cell).
    exact: HashMap<(i32, i32), Vec<f64>>,
    /// upper[h - 1][channel] is a dense width×height array (row-major by y)
    /// of ceil-quantized bounds for level h ≥ 1.
    upper: Vec<Vec<Vec<u8>>>,
}

impl MaxGridPyramid {
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Upper bound (exact at level 0) of the hit fraction of `label` over the
    /// 2^level × 2^level block whose lower corner is `cell`.
    pub fn value(&self, level: usize, cell: (i32, i32), label: u16) -> f64 {
        let chan = if label == UNLABELED {
            0
        } else {
            match self.channel_of.get(&label) {
                Some(&c) => c,
                None => return 0.0,
            }
        };
        if level == 0 {
            return self.exact.get(&cell).map_or(0.0, |v| v[chan]);
        }
        let x = cell.0 - self.min.0;
        let y = cell.1 - self.min.1;
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return 0.0;
        }
        f64::from(self.upper[level - 1][chan][y as usize * self.width + x as usize]) / 255.0
    }
}

/// Quantizes a fraction in [0, 1] upward onto the u8 scale.
fn quantize_up(v: f64) -> u8 {
    (v * 255.0).ceil().min(255.0) as u8
}

/// Builds the max-pooled pyramid for a grid up to `depth` levels.
pub fn precompute_max_grids(grid: &SemanticGrid, depth: usize) -> MaxGridPyramid {
    let occupied: Vec<_> = grid
        .iter_cells()
        .filter(|(_, c)| c.total_hits() > 0)
        .collect();
    if occupied.is_empty() {
        return MaxGridPyramid {
            min: (0, 0),
            width: 0,
            height: 0,
            depth,
            channel_of: HashMap::new(),
            exact: HashMap::new(),
            upper: vec![vec![]; depth],
        };
    }
    let min_x = occupied.iter().map(|(k, _)| k.0).min().unwrap();
    let max_x = occupied.iter().map(|(k, _)| k.0).max().unwrap();
    let min_y = occupied.iter().map(|(k, _)| k.1).min().unwrap();
    let max_y = occupied.iter().map(|(k, _)| k.1).max().unwrap();
    // pad on the low side so blocks whose corner lies below the occupied
    // region still see it
    let pad = (1i64 << depth) as i32 - 1;
    let min = (min_x - pad, min_y - pad);
    let width = (max_x - min.0 + 1) as usize;
    let height = (max_y - min.1 + 1) as usize;

    let mut labels: Vec<u16> = occupied
        .iter()
        .flat_map(|(_, c)| c.hits.keys().copied())
        .collect();
    labels.sort_unstable();
    labels.dedup();
    let mut channel_of = HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        channel_of.insert(l, i + 1);
    }
    let n_channels = labels.len() + 1;

    let mut exact = HashMap::with_capacity(occupied.len());
    let mut base = vec![vec![0u8; width * height]; n_channels];
    for (&(x, y), cell) in &occupied {
        let mut values = vec![0.0f64; n_channels];
        values[0] = cell.dominant_label().1;
        for &label in cell.hits.keys() {
            values[channel_of[&label]] = cell.label_fraction(label);
        }
        let ix = (x - min.0) as usize;
        let iy = (y - min.1) as usize;
        for (chan, &v) in values.iter().enumerate() {
            base[chan][iy * width + ix] = quantize_up(v);
        }
        exact.insert((x, y), values);
    }

    let mut upper: Vec<Vec<Vec<u8>>> = Vec::with_capacity(depth);
    for h in 1..=depth {
        let stride = 1usize << (h - 1);
        let prev = if h == 1 { &base } else { &upper[h - 2] };
        let mut next = vec![vec![0u8; width * height]; n_channels];
        for chan in 0..n_channels {
            for y in 0..height {
                for x in 0..width {
                    let mut m = prev[chan][y * width + x];
                    if x + stride < width {
                        m = m.max(prev[chan][y * width + x + stride]);
                    }
                    if y + stride < height {
                        m = m.max(prev[chan][(y + stride) * width + x]);
                    }
                    if x + stride < width && y + stride < height {
                        m = m.max(prev[chan][(y + stride) * width + x + stride]);
                    }
                    next[chan][y * width + x] = m;
                }
            }
        }
        upper.push(next);
    }

    MaxGridPyramid {
        min,
        width,
        height,
        depth,
        channel_of,
        exact,
        upper,
    }
}

/// Search window half-extents around the initial guess.
#[derive(Debug, Clone, Copy)]
pub struct SearchWindow {
    pub linear_x: f64,
    pub linear_y: f64,
    pub angular: f64,
}

impl Default for SearchWindow {
    fn default() -> Self {
        Self {
            linear_x: 7.0,
            linear_y: 7.0,
            angular: 30.0_f64.to_radians(),
        }
    }
}

/// The discrete candidate set shared by the exhaustive and branch-and-bound
/// searches: angle steps follow the arc-length rule so rotating the scan by
/// one step moves the farthest point by at most one cell.
#[derive(Debug)]
pub struct DiscreteWindow {
    pub angle_step: f64,
    pub n_angle: i32,
    pub n_x: i32,
    pub n_y: i32,
    /// Base cell indices of the scan per angle index (offset candidates add
    /// integer cell offsets to these).
    pub cells_per_angle: Vec<Vec<(i32, i32)>>,
    pub labels: Vec<u16>,
    pub initial: Se2,
    pub resolution: f64,
}

impl DiscreteWindow {
    pub fn build(
        grid: &SemanticGrid,
        scan_2d: &[(Vector2<f64>, u16)],
        initial: &Se2,
        window: &SearchWindow,
    ) -> Option<DiscreteWindow> {
        if scan_2d.is_empty() {
            return None;
        }
        let res = grid.resolution;
        let d_max = scan_2d
            .iter()
            .map(|(p, _)| p.norm())
            .fold(res, f64::max);
        let angle_step = (1.0 - res * res / (2.0 * d_max * d_max)).acos();
        let n_angle = (window.angular / angle_step).ceil() as i32;
        let n_x = (window.linear_x / res).ceil() as i32;
        let n_y = (window.linear_y / res).ceil() as i32;

        let mut cells_per_angle = Vec::with_capacity((2 * n_angle + 1) as usize);
        for ia in -n_angle..=n_angle {
            let pose = Se2::new(initial.x, initial.y, initial.yaw + ia as f64 * angle_step);
            let cells = scan_2d
                .iter()
                .map(|(p, _)| grid.cell_index(&pose.transform_point(p)))
                .collect();
            cells_per_angle.push(cells);
        }
        Some(DiscreteWindow {
            angle_step,
            n_angle,
            n_x,
            n_y,
            cells_per_angle,
            labels: scan_2d.iter().map(|(_, l)| *l).collect(),
            initial: *initial,
            resolution: res,
        })
    }

    pub fn num_candidates(&self) -> u64 {
        (2 * self.n_angle as u64 + 1)
            * (2 * self.n_x as u64 + 1)
            * (2 * self.n_y as u64 + 1)
    }

    pub fn candidate_pose(&self, ia: i32, ix: i32, iy: i32) -> Se2 {
        Se2::new(
            self.initial.x + ix as f64 * self.resolution,
            self.initial.y + iy as f64 * self.resolution,
            self.initial.yaw + ia as f64 * self.angle_step,
        )
    }

    /// Score of one candidate at pyramid level 0 (the exact value).
    pub fn candidate_score(&self, pyramid: &MaxGridPyramid, ia: i32, ix: i32, iy: i32) -> f64 {
        self.block_bound(pyramid, 0, ia, ix, iy)
    }

    /// Upper bound for the block of candidates with corner (ix, iy) and side
    /// 2^level at angle index ia. Level 0 is the exact candidate score.
    fn block_bound(&self, pyramid: &MaxGridPyramid, level: usize, ia: i32, ix: i32, iy: i32) -> f64 {
        let cells = &self.cells_per_angle[(ia + self.n_angle) as usize];
        let sum: f64 = cells
            .iter()
            .zip(&self.labels)
            .map(|(&(cx, cy), &label)| pyramid.value(level, (cx + ix, cy + iy), label))
            .sum();
        sum / cells.len() as f64
    }
}

/// Exhaustive evaluation of the full discrete window: the reference the
/// branch-and-bound search must reproduce bit for bit.
pub fn exhaustive_match(
    submap: &Submap,
    pyramid: &MaxGridPyramid,
    scan_2d: &[(Vector2<f64>, u16)],
    initial: &Se2,
    window: &SearchWindow,
    min_score: f64,
) -> Option<(Se2, f64)> {
    let dw = DiscreteWindow::build(&submap.grid, scan_2d, initial, window)?;
    let mut best: Option<(i32, i32, i32, f64)> = None;
    for ia in -dw.n_angle..=dw.n_angle {
        for ix in -dw.n_x..=dw.n_x {
            for iy in -dw.n_y..=dw.n_y {
                let s = dw.candidate_score(pyramid, ia, ix, iy);
                if best.map_or(true, |(.., bs)| s > bs) {
                    best = Some((ia, ix, iy, s));
                }
            }
        }
    }
    let (ia, ix, iy, s) = best?;
    if s < min_score {
        return None;
    }
    Some((dw.candidate_pose(ia, ix, iy), s))
}

/// Branch-and-bound search over the same discrete window.
///
/// Blocks are explored depth-first in the exhaustive iteration order and a
/// candidate only replaces the incumbent on a strictly greater score, so the
/// result is identical to `exhaustive_match`.
pub fn branch_and_bound_match(
    submap: &Submap,
    pyramid: &MaxGridPyramid,
    scan_2d: &[(Vector2<f64>, u16)],
    initial: &Se2,
    window: &SearchWindow,
    min_score: f64,
) -> Option<(Se2, f64)> {
    let dw = DiscreteWindow::build(&submap.grid, scan_2d, initial, window)?;
    let span = (2 * dw.n_x + 1).max(2 * dw.n_y + 1) as u32;
    let top_level = pyramid
        .depth()
        .min((32 - span.leading_zeros()) as usize);

    let mut best_score = f64::NEG_INFINITY;
    let mut best_pose: Option<(i32, i32, i32)> = None;

    let side = 1i32 << top_level;
    for ia in -dw.n_angle..=dw.n_angle {
        let mut ix = -dw.n_x;
        while ix <= dw.n_x {
            let mut iy = -dw.n_y;
            while iy <= dw.n_y {
                descend(
                    &dw,
                    pyramid,
                    top_level,
                    ia,
                    ix,
                    iy,
                    min_score,
                    &mut best_score,
                    &mut best_pose,
                );
                iy += side;
            }
            ix += side;
        }
    }

    let (ia, ix, iy) = best_pose?;
    if best_score < min_score {
        return None;
    }
    Some((dw.candidate_pose(ia, ix, iy), best_score))
}

#[allow(clippy::too_many_arguments)]
fn descend(
    dw: &DiscreteWindow,
    pyramid: &MaxGridPyramid,
    level: usize,
    ia: i32,
    ix: i32,
    iy: i32,
    min_score: f64,
    best_score: &mut f64,
    best_pose: &mut Option<(i32, i32, i32)>,
) {
    let bound = dw.block_bound(pyramid, level, ia, ix, iy);
    if bound <= *best_score || bound < min_score {
        return;
    }
    if level == 0 {
        *best_score = bound;
        *best_pose = Some((ia, ix, iy));
        return;
    }
    let half = 1i32 << (level - 1);
    // children in exhaustive (ix-major, then iy) order
    for (dx, dy) in [(0, 0), (0, half), (half, 0), (half, half)] {
        let cx = ix + dx;
        let cy = iy + dy;
        if cx > dw.n_x || cy > dw.n_y {
            continue;
        }
        descend(dw, pyramid, level - 1, ia, cx, cy, min_score, best_score, best_pose);
    }
}

/// Configuration of the loop constraint search.
#[derive(Debug, Clone)]
pub struct LoopClosureConfig {
    pub search_radius: f64,
    pub window: SearchWindow,
    pub min_score: f64,
    /// Scan points farther than this from the sensor are not used for
    /// matching (keeps the angular discretization coarse).
    pub matching_range: f64,
    pub pyramid_depth: usize,
    pub loop_weight: (f64, f64),
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        Self {
            search_radius: 50.0,
            window: SearchWindow::default(),
            min_score: 0.55,
            matching_range: 25.0,
            pyramid_depth: 7,
            loop_weight: (1.0, 10.0),
        }
    }
}

/// Incremental loop constraint search with memoized pyramids and attempted
/// pairs.
#[derive(Debug, Default)]
pub struct LoopCloser {
    pub config: LoopClosureConfig,
    pyramids: HashMap<usize, MaxGridPyramid>,
    attempted: HashSet<(usize, usize)>,
}

impl LoopCloser {
    pub fn new(config: LoopClosureConfig) -> Self {
        Self {
            config,
            pyramids: HashMap::new(),
            attempted: HashSet::new(),
        }
    }

    /// Pyramids cached at once; older ones are rebuilt on demand so memory
    /// stays bounded on long sequences.
    const MAX_CACHED_PYRAMIDS: usize = 4;

    fn pyramid_for<'a>(&'a mut self, submap_id: usize, submap: &Submap) -> &'a MaxGridPyramid {
        let depth = self.config.pyramid_depth;
        if !self.pyramids.contains_key(&submap_id)
            && self.pyramids.len() >= Self::MAX_CACHED_PYRAMIDS
        {
            self.pyramids.clear();
        }
        self.pyramids
            .entry(submap_id)
            .or_insert_with(|| precompute_max_grids(&submap.grid, depth))
    }

    /// Tries to close loops between every finished submap and every node.
    ///
    /// A (submap, node) pair is a candidate when the current estimated
    /// distance between them is below the search radius and the node is not
    /// already covered by odometry adjacency (its scan lies within or next to
    /// the submap's scan range). Each pair is attempted at most once.
    pub fn add_loop_constraints(
        &mut self,
        graph: &mut PoseGraph,
        submaps: &[(usize, Submap)],
        node_scans: &[(usize, Scan2d)],
        node_scan_index: &[usize],
    ) -> usize {
        let mut added = 0;
        for (submap_id, submap) in submaps {
            if !submap.finished {
                continue;
            }
            let Some((first, last)) = submap.scan_range else {
                continue;
            };
            let span = last - first + 1;
            let submap_pose = graph.submap_poses[*submap_id];
            for (node_id, scan_2d) in node_scans {
                let scan_idx = node_scan_index[*node_id];
                // odometry adjacency: skip nodes in or next to this submap
                if scan_idx + span >= first && scan_idx <= last + span {
                    continue;
                }
                if !self.attempted.insert((*submap_id, *node_id)) {
                    continue;
                }
                let node_pose = graph.nodes[*node_id].se2;
                let dist = (node_pose.translation() - submap_pose.translation()).norm();
                if dist > self.config.search_radius {
                    continue;
                }
                let initial = submap_pose.inverse().compose(&node_pose);
                let window = self.config.window;
                let min_score = self.config.min_score;
                let pyramid = self.pyramid_for(*submap_id, submap);
                if let Some((matched, _score)) = branch_and_bound_match(
                    submap, pyramid, scan_2d, &initial, &window, min_score,
                ) {
                    graph.add_constraint(Constraint {
                        kind: ConstraintKind::Loop,
                        from: VarId::Submap(*submap_id),
                        to: VarId::Node(*node_id),
                        relative: matched,
                        weight: self.config.loop_weight,
                    });
                    added += 1;
                }
            }
        }
        added
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Pose3;
    use crate::types::{labels, LabeledPoint, Scan};
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Grid populated by rays from the origin to points on two walls.
    fn sample_submap(rng: &mut ChaCha8Rng) -> (Submap, Scan2d) {
        let mut sm = Submap::new(0.1, Pose3::identity());
        let mut points = Vec::new();
        for i in 0..240 {
            let t = i as f64 / 240.0;
            // wall along x at y = 4 and along y at x = 6
            let (p, label) = if i % 2 == 0 {
                (Vector3::new(-5.0 + 11.0 * t, 4.0, 0.0), labels::BUILDING)
            } else {
                (Vector3::new(6.0, -3.0 + 7.0 * t, 0.0), labels::FENCE)
            };
            let jitter = Vector3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), 0.0);
            points.push(LabeledPoint::new(p + jitter, label));
        }
        let scan = Scan::new(points.clone(), 0);
        sm.insert_scan(&scan, &Pose3::identity()).unwrap();
        sm.finalize();
        let scan_2d: Scan2d = points
            .iter()
            .map(|p| (Vector2::new(p.position.x, p.position.y), p.label))
            .collect();
        (sm, scan_2d)
    }

    #[test]
    fn score_perfect_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (sm, scan_2d) = sample_submap(&mut rng);
        // Grazing rays add misses to wall cells, so even the generating
        // scan does not score a perfect 1.0.
        let s = score(&sm.grid, &scan_2d, &Se2::identity());
        assert!(s > 0.85, "self score {s}");
        let far = Se2::new(500.0, 500.0, 0.0);
        assert_eq!(score(&sm.grid, &scan_2d, &far), 0.0);
    }

    #[test]
    fn score_matches_per_point_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (sm, scan_2d) = sample_submap(&mut rng);
        let pose = Se2::new(0.3, -0.2, 0.05);
        let got = score(&sm.grid, &scan_2d, &pose);
        let mut sum = 0.0;
        for (p, label) in &scan_2d {
            let cell_idx = sm.grid.cell_index(&pose.transform_point(p));
            sum += sm.grid.cell(cell_idx).map_or(0.0, |c| {
                if *label == UNLABELED {
                    c.dominant_label().1
                } else {
                    c.label_fraction(*label)
                }
            });
        }
        assert_eq!(got, sum / scan_2d.len() as f64);
    }

    #[test]
    fn pyramid_depth_zero_equals_base_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sm, _) = sample_submap(&mut rng);
        let pyr = precompute_max_grids(&sm.grid, 0);
        for (&key, cell) in sm.grid.iter_cells() {
            if cell.total_hits() == 0 {
                continue;
            }
            for &label in cell.hits.keys() {
                assert_eq!(pyr.value(0, key, label), cell.label_fraction(label));
            }
            assert_eq!(pyr.value(0, key, UNLABELED), cell.dominant_label().1);
        }
    }

    #[test]
    fn pyramid_single_cell_hand_trace() {
        let mut sm = Submap::new(0.1, Pose3::identity());
        let scan = Scan::new(
            vec![LabeledPoint::new(Vector3::new(0.05, 0.05, 0.0), labels::CAR)],
            0,
        );
        sm.insert_scan(&scan, &Pose3::identity()).unwrap();
        let pyr = precompute_max_grids(&sm.grid, 3);
        // any level-3 block whose 8×8 window covers cell (0,0) carries 1.0
        for dx in -7..=0 {
            for dy in -7..=0 {
                assert_eq!(pyr.value(3, (dx, dy), labels::CAR), 1.0, "({dx},{dy})");
            }
        }
        assert_eq!(pyr.value(3, (1, 1), labels::CAR), 0.0);
    }

    #[test]
    fn pyramid_admissibility_on_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (sm, _) = sample_submap(&mut rng);
        let depth = 4;
        let pyr = precompute_max_grids(&sm.grid, depth);
        let labels_present = [labels::BUILDING, labels::FENCE, UNLABELED];
        for _ in 0..1000 {
            let cx = rng.gen_range(-80..80);
            let cy = rng.gen_range(-60..60);
            let h = rng.gen_range(1..=depth);
            let label = labels_present[rng.gen_range(0..3)];
            let bound = pyr.value(h, (cx, cy), label);
            let side = 1i32 << h;
            for dx in 0..side {
                for dy in 0..side {
                    let base = pyr.value(0, (cx + dx, cy + dy), label);
                    assert!(
                        bound >= base,
                        "bound {bound} < base {base} at ({cx},{cy})+({dx},{dy}) level {h}"
                    );
                }
            }
        }
    }

    #[test]
    fn bnb_self_match_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (sm, scan_2d) = sample_submap(&mut rng);
        let pyr = precompute_max_grids(&sm.grid, 7);
        let window = SearchWindow {
            linear_x: 1.0,
            linear_y: 1.0,
            angular: 0.05,
        };
        let (pose, s) = branch_and_bound_match(
            &sm,
            &pyr,
            &scan_2d,
            &Se2::identity(),
            &window,
            0.55,
        )
        .expect("self match must succeed");
        assert!(s >= 0.85, "score {s}");
        assert!(pose.translation().norm() <= 0.15, "pose {pose:?}");
        assert!(pose.yaw.abs() <= 0.01);
    }

    #[test]
    fn bnb_rejects_unrelated_submap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (sm, _) = sample_submap(&mut rng);
        let pyr = precompute_max_grids(&sm.grid, 7);
        // unrelated scan: a diagonal line of vegetation points
        let scan_2d: Scan2d = (0..200)
            .map(|i| {
                let t = i as f64 * 0.05;
                (Vector2::new(t, -t), labels::VEGETATION)
            })
            .collect();
        let window = SearchWindow {
            linear_x: 2.0,
            linear_y: 2.0,
            angular: 0.2,
        };
        assert!(branch_and_bound_match(
            &sm,
            &pyr,
            &scan_2d,
            &Se2::identity(),
            &window,
            0.55
        )
        .is_none());
    }

    #[test]
    fn bnb_equals_exhaustive_on_small_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..20 {
            let (sm, scan_2d) = sample_submap(&mut rng);
            let pyr = precompute_max_grids(&sm.grid, 7);
            let initial = Se2::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.05..0.05),
            );
            let window = SearchWindow {
                linear_x: rng.gen_range(0.2..0.8),
                linear_y: rng.gen_range(0.2..0.8),
                angular: rng.gen_range(0.005..0.02),
            };
            let min_score = if case % 3 == 0 { 0.99 } else { 0.3 };
            let a = branch_and_bound_match(&sm, &pyr, &scan_2d, &initial, &window, min_score);
            let b = exhaustive_match(&sm, &pyr, &scan_2d, &initial, &window, min_score);
            match (a, b) {
                (None, None) => {}
                (Some((pa, sa)), Some((pb, sb))) => {
                    assert_eq!(pa, pb, "case {case}");
                    assert_eq!(sa.to_bits(), sb.to_bits(), "case {case}");
                }
                other => panic!("case {case}: {other:?}"),
            }
        }
    }

    #[test]
    fn tiny_window_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (sm, scan_2d) = sample_submap(&mut rng);
        let pyr = precompute_max_grids(&sm.grid, 7);
        // 5×5×3 candidates
        let window = SearchWindow {
            linear_x: 0.2,
            linear_y: 0.2,
            angular: 0.0008,
        };
        let a = branch_and_bound_match(&sm, &pyr, &scan_2d, &Se2::identity(), &window, 0.0);
        let b = exhaustive_match(&sm, &pyr, &scan_2d, &Se2::identity(), &window, 0.0);
        let (pa, sa) = a.unwrap();
        let (pb, sb) = b.unwrap();
        assert_eq!(pa, pb);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }
}
