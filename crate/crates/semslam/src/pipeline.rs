//! Per-scan orchestration: preprocess → predict → register → map update →
//! submap update → loop closure → final optimization.
//!
//! Registration and the local map live purely in the odometry frame; the
//! pose graph collects loop constraints as submaps finish and is optimized
//! in a single final pass, so a run is deterministic regardless of when
//! loops are found.

use std::path::Path;

use nalgebra::Vector2;

use crate::io_kitti::SequencePaths;
use crate::local_map::SemanticVoxelMap;
use crate::loop_closure::{LoopCloser, LoopClosureConfig, Scan2d, SearchWindow};
use crate::pose_graph::{Constraint, ConstraintKind, Node, PoseGraph, VarId};
use crate::preprocessing::{adaptive_voxel_downsample, deskew, filter_dynamic, registration_downsample};
use crate::registration::{predict_motion, register_scan, AdaptiveThreshold};
use crate::se2::Se2;
use crate::se3::Pose3;
use crate::submaps::{Submap, HEIGHT_BAND_ABOVE, HEIGHT_BAND_BELOW};
use crate::types::{Scan, SemanticConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Odometry,
    Slam,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "odometry" => Ok(Mode::Odometry),
            "slam" => Ok(Mode::Slam),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Every tunable of the system, with the defaults used throughout.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Local map voxel size, meters.
    pub map_voxel_size: f64,
    pub max_points_per_voxel: usize,
    /// Registration source voxel = alpha × map voxel.
    pub registration_alpha: f64,
    pub initial_threshold: f64,
    pub min_motion: f64,
    pub max_range: f64,
    /// Scans per submap.
    pub submap_scans: usize,
    pub grid_resolution: f64,
    pub loop_search_radius: f64,
    /// Loop search half-window, meters.
    pub window_linear: f64,
    /// Loop search half-window, degrees.
    pub window_angular_deg: f64,
    pub min_score: f64,
    pub matching_range: f64,
    pub pyramid_depth: usize,
    /// Classes never fed to the loop-closure matcher. Ground-plane points
    /// collect heavy ray-miss traffic in the grids, so their hit fractions
    /// are structurally low and they only dilute the match score; they are
    /// still inserted into submaps and used by odometry.
    pub matching_exclude_labels: std::collections::BTreeSet<u16>,
    /// (translation, rotation) information weights.
    pub odometry_weight: (f64, f64),
    pub loop_weight: (f64, f64),
    /// Final map export voxel, meters.
    pub export_voxel: f64,
    pub semantic: SemanticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            map_voxel_size: 1.0,
            max_points_per_voxel: 20,
            registration_alpha: 1.5,
            initial_threshold: 2.0,
            min_motion: 0.1,
            max_range: 100.0,
            submap_scans: 20,
            grid_resolution: 0.1,
            loop_search_radius: 50.0,
            window_linear: 7.0,
            window_angular_deg: 30.0,
            min_score: 0.55,
            matching_range: 25.0,
            pyramid_depth: 7,
            matching_exclude_labels: [crate::types::labels::ROAD, crate::types::labels::SIDEWALK]
                .into(),
            odometry_weight: (10.0, 100.0),
            loop_weight: (1.0, 10.0),
            export_voxel: 0.05,
            semantic: SemanticConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("map_voxel_size", self.map_voxel_size),
            ("registration_alpha", self.registration_alpha),
            ("initial_threshold", self.initial_threshold),
            ("max_range", self.max_range),
            ("grid_resolution", self.grid_resolution),
            ("loop_search_radius", self.loop_search_radius),
            ("window_linear", self.window_linear),
            ("window_angular_deg", self.window_angular_deg),
            ("matching_range", self.matching_range),
            ("export_voxel", self.export_voxel),
            ("odometry_weight_translation", self.odometry_weight.0),
            ("odometry_weight_rotation", self.odometry_weight.1),
            ("loop_weight_translation", self.loop_weight.0),
            ("loop_weight_rotation", self.loop_weight.1),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if self.min_motion < 0.0 {
            return Err(Error::Config(format!(
                "min_motion must be non-negative, got {}",
                self.min_motion
            )));
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be at least 1".into()));
        }
        if self.submap_scans == 0 {
            return Err(Error::Config("submap_scans must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config(format!(
                "min_score must be in [0, 1], got {}",
                self.min_score
            )));
        }
        self.semantic.validate()?;
        Ok(())
    }

    /// Parses a flat `key = value` text config ('#' starts a comment).
    /// Unknown keys are rejected by name.
    pub fn from_str(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |key: &str| Error::Config(format!("invalid value for {key}"));
            let f = |v: &str, key: &str| v.parse::<f64>().map_err(|_| bad(key));
            let u = |v: &str, key: &str| v.parse::<usize>().map_err(|_| bad(key));
            match key {
                "map_voxel_size" => cfg.map_voxel_size = f(value, key)?,
                "max_points_per_voxel" => cfg.max_points_per_voxel = u(value, key)?,
                "registration_alpha" => cfg.registration_alpha = f(value, key)?,
                "initial_threshold" => cfg.initial_threshold = f(value, key)?,
                "min_motion" => cfg.min_motion = f(value, key)?,
                "max_range" => cfg.max_range = f(value, key)?,
                "submap_scans" => cfg.submap_scans = u(value, key)?,
                "grid_resolution" => cfg.grid_resolution = f(value, key)?,
                "loop_search_radius" => cfg.loop_search_radius = f(value, key)?,
                "window_linear" => cfg.window_linear = f(value, key)?,
                "window_angular_deg" => cfg.window_angular_deg = f(value, key)?,
                "min_score" => cfg.min_score = f(value, key)?,
                "matching_range" => cfg.matching_range = f(value, key)?,
                "matching_exclude" => {
                    cfg.matching_exclude_labels = value
                        .split(',')
                        .map(str::trim)
                        .filter(|n| !n.is_empty())
                        .map(|n| {
                            cfg.semantic.label_by_name(n).ok_or_else(|| {
                                Error::Config(format!("matching_exclude: unknown class '{n}'"))
                            })
                        })
                        .collect::<Result<_>>()?;
                }
                "pyramid_depth" => cfg.pyramid_depth = u(value, key)?,
                "odometry_weight_translation" => cfg.odometry_weight.0 = f(value, key)?,
                "odometry_weight_rotation" => cfg.odometry_weight.1 = f(value, key)?,
                "loop_weight_translation" => cfg.loop_weight.0 = f(value, key)?,
                "loop_weight_rotation" => cfg.loop_weight.1 = f(value, key)?,
                "export_voxel" => cfg.export_voxel = f(value, key)?,
                "kappa_neutral" => cfg.semantic.kappa_neutral = f(value, key)?,
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn loop_closure_config(&self) -> LoopClosureConfig {
        LoopClosureConfig {
            search_radius: self.loop_search_radius,
            window: SearchWindow {
                linear_x: self.window_linear,
                linear_y: self.window_linear,
                angular: self.window_angular_deg.to_radians(),
            },
            min_score: self.min_score,
            matching_range: self.matching_range,
            pyramid_depth: self.pyramid_depth,
            loop_weight: self.loop_weight,
        }
    }
}

/// Worker-count cap from `SEMSLAM_THREADS` (the pipeline itself runs one
/// deterministic worker; the cap is an upper bound).
pub fn worker_threads() -> Result<usize> {
    match std::env::var("SEMSLAM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "SEMSLAM_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanResult {
    pub pose: Pose3,
    /// True when the pose is the motion prediction rather than a
    /// registration result (empty scan after dynamic filtering).
    pub degraded: bool,
    /// Id of the submap this scan completed, if any.
    pub finalized_submap: Option<usize>,
}

pub struct SequenceOutput {
    /// Final per-scan poses (optimized in slam mode).
    pub trajectory: Vec<Pose3>,
    /// Raw odometry poses, before any optimization.
    pub odometry: Vec<Pose3>,
    pub graph: PoseGraph,
    pub submaps: Vec<(usize, Submap)>,
    pub num_loop_constraints: usize,
    pub degraded_scans: Vec<usize>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    mode: Mode,
    map: SemanticVoxelMap,
    threshold: AdaptiveThreshold,
    poses: Vec<Pose3>,
    last_relative: Option<Pose3>,
    degraded_scans: Vec<usize>,
    // submap state
    active_submap: Option<(usize, Submap, Pose3)>, // id, submap, world-from-submap frame
    scans_in_active: usize,
    next_submap_id: usize,
    finished_submaps: Vec<(usize, Submap)>,
    // graph state (slam mode)
    graph: PoseGraph,
    node_scans: Vec<(usize, Scan2d)>,
    node_scan_index: Vec<usize>,
    loop_closer: LoopCloser,
    num_loops: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, mode: Mode) -> Result<Pipeline> {
        config.validate()?;
        let map = SemanticVoxelMap::new(
            config.map_voxel_size,
            config.max_points_per_voxel,
            config.max_range,
            &config.semantic,
        );
        let threshold = AdaptiveThreshold::new(
            config.initial_threshold,
            config.min_motion,
            config.max_range,
        );
        let loop_closer = LoopCloser::new(config.loop_closure_config());
        Ok(Pipeline {
            config,
            mode,
            map,
            threshold,
            poses: Vec::new(),
            last_relative: None,
            degraded_scans: Vec::new(),
            active_submap: None,
            scans_in_active: 0,
            next_submap_id: 0,
            finished_submaps: Vec::new(),
            graph: PoseGraph::default(),
            node_scans: Vec::new(),
            node_scan_index: Vec::new(),
            loop_closer,
            num_loops: 0,
        })
    }

    /// Registers `scan` against the local map and runs all bookkeeping.
    pub fn process_scan(&mut self, scan: &Scan) -> Result<ScanResult> {
        let filtered = filter_dynamic(scan, &self.config.semantic);
        let predicted_rel = predict_motion(self.last_relative.as_ref());
        let last_pose = self.poses.last().copied().unwrap_or_else(Pose3::identity);
        let predicted = last_pose.compose(&predicted_rel);

        if filtered.points.is_empty() {
            self.degraded_scans.push(scan.index);
            let finalized = self.bookkeep(scan, &filtered, &predicted)?;
            return Ok(ScanResult {
                pose: predicted,
                degraded: true,
                finalized_submap: finalized,
            });
        }

        let deskewed = deskew(&filtered, &predicted_rel);
        let down = adaptive_voxel_downsample(
            &deskewed,
            self.config.map_voxel_size,
            self.config.max_points_per_voxel,
            &self.config.semantic,
        )?;
        let pose = if self.map.is_empty() {
            predicted
        } else {
            let source = registration_downsample(
                &down,
                self.config.map_voxel_size,
                self.config.registration_alpha,
                &self.config.semantic,
            );
            let result = register_scan(
                &source,
                &self.map,
                &predicted,
                self.threshold.current(),
                &self.config.semantic,
            );
            self.threshold.update(&predicted, &result.pose);
            result.pose
        };

        self.map.insert_scan(&down, &pose);
        self.map.prune_far(&pose.translation);
        let finalized = self.bookkeep(scan, &down, &pose)?;
        Ok(ScanResult {
            pose,
            degraded: false,
            finalized_submap: finalized,
        })
    }

    /// Runs all bookkeeping for a scan whose pose is supplied externally
    /// (e.g. an upstream odometry source), skipping registration. The scan
    /// is expected to be motion-compensated already.
    pub fn process_scan_with_pose(&mut self, scan: &Scan, pose: &Pose3) -> Result<ScanResult> {
        let filtered = filter_dynamic(scan, &self.config.semantic);
        let down = adaptive_voxel_downsample(
            &filtered,
            self.config.map_voxel_size,
            self.config.max_points_per_voxel,
            &self.config.semantic,
        )?;
        let finalized = self.bookkeep(scan, &down, pose)?;
        Ok(ScanResult {
            pose: *pose,
            degraded: false,
            finalized_submap: finalized,
        })
    }

    /// Common per-scan state update: pose log, graph node + odometry edge,
    /// submap insertion/rotation, loop search on submap completion.
    fn bookkeep(&mut self, scan: &Scan, down: &Scan, pose: &Pose3) -> Result<Option<usize>> {
        self.last_relative = self
            .poses
            .last()
            .map(|prev| prev.inverse().compose(pose));
        self.poses.push(*pose);

        if self.mode == Mode::Slam {
            let node_id = self.graph.add_node(Node::from_pose3(pose));
            self.node_scan_index.push(scan.index);
            if node_id > 0 {
                let prev = self.graph.nodes[node_id - 1].se2;
                let cur = self.graph.nodes[node_id].se2;
                self.graph.add_constraint(Constraint {
                    kind: ConstraintKind::Odometry,
                    from: VarId::Node(node_id - 1),
                    to: VarId::Node(node_id),
                    relative: prev.inverse().compose(&cur),
                    weight: self.config.odometry_weight,
                });
            }
            let scan_2d: Scan2d = down
                .points
                .iter()
                .filter(|p| {
                    p.position.norm() <= self.config.matching_range
                        && p.position.z <= HEIGHT_BAND_ABOVE
                        && p.position.z >= -HEIGHT_BAND_BELOW
                        && !self.config.matching_exclude_labels.contains(&p.label)
                })
                .map(|p| (Vector2::new(p.position.x, p.position.y), p.label))
                .collect();
            self.node_scans.push((node_id, scan_2d));
        }

        // Submap rotation.
        if self.active_submap.is_none() {
            let id = self.next_submap_id;
            self.next_submap_id += 1;
            self.active_submap = Some((
                id,
                Submap::new(self.config.grid_resolution, *pose),
                *pose,
            ));
            self.scans_in_active = 0;
            if self.mode == Mode::Slam {
                let sid = self.graph.add_submap_pose(Se2::from_pose3(pose));
                debug_assert_eq!(sid, id);
            }
        }
        let (id, submap, frame) = self.active_submap.as_mut().unwrap();
        let local = frame.inverse().compose(pose);
        submap.insert_scan(down, &local)?;
        self.scans_in_active += 1;
        if self.mode == Mode::Slam {
            // Tie the submap variable to this node at the insertion-time
            // estimate, so optimization can move submaps with their scans.
            let node_id = self.graph.nodes.len() - 1;
            let submap_se2 = self.graph.submap_poses[*id];
            let node_se2 = self.graph.nodes[node_id].se2;
            self.graph.add_constraint(Constraint {
                kind: ConstraintKind::Odometry,
                from: VarId::Submap(*id),
                to: VarId::Node(node_id),
                relative: submap_se2.inverse().compose(&node_se2),
                weight: self.config.odometry_weight,
            });
        }

        let mut finalized = None;
        if self.scans_in_active >= self.config.submap_scans {
            let (id, mut submap, _) = self.active_submap.take().unwrap();
            submap.finalize();
            self.finished_submaps.push((id, submap));
            finalized = Some(id);
            if self.mode == Mode::Slam {
                self.num_loops += self.loop_closer.add_loop_constraints(
                    &mut self.graph,
                    &self.finished_submaps,
                    &self.node_scans,
                    &self.node_scan_index,
                );
            }
        }
        Ok(finalized)
    }

    /// Finishes the run: closes the active submap, runs a last loop search,
    /// and (slam mode, if any loops were found) optimizes the graph.
    pub fn finish(mut self) -> Result<SequenceOutput> {
        if let Some((id, mut submap, _)) = self.active_submap.take() {
            submap.finalize();
            self.finished_submaps.push((id, submap));
            if self.mode == Mode::Slam {
                self.num_loops += self.loop_closer.add_loop_constraints(
                    &mut self.graph,
                    &self.finished_submaps,
                    &self.node_scans,
                    &self.node_scan_index,
                );
            }
        }
        let trajectory = if self.mode == Mode::Slam && !self.poses.is_empty() {
            if self.num_loops > 0 {
                self.graph.optimize()?;
            }
            self.graph.node_poses()
        } else {
            self.poses.clone()
        };
        Ok(SequenceOutput {
            trajectory,
            odometry: self.poses,
            graph: self.graph,
            submaps: self.finished_submaps,
            num_loop_constraints: self.num_loops,
            degraded_scans: self.degraded_scans,
        })
    }

    pub fn poses(&self) -> &[Pose3] {
        &self.poses
    }
}

/// Runs the full pipeline over in-memory scans.
pub fn run_scans(scans: &[Scan], config: &PipelineConfig, mode: Mode) -> Result<SequenceOutput> {
    let mut pipeline = Pipeline::new(config.clone(), mode)?;
    for scan in scans {
        pipeline.process_scan(scan)?;
    }
    pipeline.finish()
}

/// Runs submapping, loop closure, and optimization over scans with poses
/// from an external odometry source.
pub fn run_with_odometry(
    scans: &[Scan],
    odometry: &[Pose3],
    config: &PipelineConfig,
    mode: Mode,
) -> Result<SequenceOutput> {
    if scans.len() != odometry.len() {
        return Err(Error::TrajectoryLengthMismatch(scans.len(), odometry.len()));
    }
    let mut pipeline = Pipeline::new(config.clone(), mode)?;
    for (scan, pose) in scans.iter().zip(odometry) {
        pipeline.process_scan_with_pose(scan, pose)?;
    }
    pipeline.finish()
}

/// Runs the pipeline over a KITTI-layout sequence directory.
pub fn run_sequence(
    paths: &SequencePaths,
    config: &PipelineConfig,
    mode: Mode,
) -> Result<SequenceOutput> {
    let files = paths.scan_files()?;
    let mut pipeline = Pipeline::new(config.clone(), mode)?;
    for (bin, label) in &files {
        let scan = crate::io_kitti::read_scan(bin, label.as_deref())?;
        pipeline.process_scan(&scan)?;
    }
    pipeline.finish()
}
