//! SE(2) pose graph over scan nodes and submap frames, with a bespoke
//! Gauss-Newton solver. Out-of-plane components (z, roll, pitch) ride along
//! unchanged from odometry and are reattached after optimization.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Rotation2, UnitQuaternion, Vector3};

use crate::se2::{wrap_angle, Se2};
use crate::se3::Pose3;
use crate::{Error, Result};

pub const MAX_OPT_ITERATIONS: usize = 200;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

/// A scan pose: planar component optimized by the graph plus the retained
/// out-of-plane side channel.
#[derive(Debug, Clone, Copy)]
pub struct Node {
    pub se2: Se2,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
}

impl Node {
    pub fn from_pose3(pose: &Pose3) -> Self {
        let (roll, pitch, _yaw) = pose.rotation.euler_angles();
        Self {
            se2: Se2::from_pose3(pose),
            z: pose.translation.z,
            roll,
            pitch,
        }
    }

    /// Re-assembles the full pose with the optimized planar part.
    pub fn to_pose3(&self) -> Pose3 {
        Pose3::new(
            UnitQuaternion::from_euler_angles(self.roll, self.pitch, self.se2.yaw),
            Vector3::new(self.se2.x, self.se2.y, self.z),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarId {
    Node(usize),
    Submap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Odometry,
    Loop,
}

#[derive(Debug, Clone, Copy)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub from: VarId,
    pub to: VarId,
    pub relative: Se2,
    /// (translation weight, rotation weight), applied as information values.
    pub weight: (f64, f64),
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub nodes: Vec<Node>,
    pub submap_poses: Vec<Se2>,
    pub constraints: Vec<Constraint>,
}

impl PoseGraph {
    pub fn add_node(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn add_submap_pose(&mut self, pose: Se2) -> usize {
        self.submap_poses.push(pose);
        self.submap_poses.len() - 1
    }

    pub fn add_constraint(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    fn var_pose(&self, id: VarId) -> Se2 {
        match id {
            VarId::Node(i) => self.nodes[i].se2,
            VarId::Submap(i) => self.submap_poses[i],
        }
    }

    fn num_vars(&self) -> usize {
        self.nodes.len() + self.submap_poses.len()
    }

    fn var_index(&self, id: VarId) -> usize {
        match id {
            VarId::Node(i) => i,
            VarId::Submap(i) => self.nodes.len() + i,
        }
    }

    fn residual(&self, c: &Constraint) -> Vector3<f64> {
        let xi = self.var_pose(c.from);
        let xj = self.var_pose(c.to);
        let rel = xi.inverse().compose(&xj);
        let err = c.relative.inverse().compose(&rel);
        Vector3::new(err.x, err.y, wrap_angle(err.yaw))
    }

    /// Total weighted squared residual of all constraints.
    pub fn total_error(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let r = self.residual(c);
                c.weight.0 * (r.x * r.x + r.y * r.y) + c.weight.1 * r.z * r.z
            })
            .sum()
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.num_vars();
        if n <= 1 {
            return Ok(());
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for c in &self.constraints {
            let a = self.var_index(c.from);
            let b = self.var_index(c.to);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::DisconnectedGraph)
        }
    }

    /// Gauss-Newton over all planar poses with the first node held fixed.
    pub fn optimize(&mut self) -> Result<()> {
        self.check_connected()?;
        let n = self.num_vars();
        if n <= 1 || self.constraints.is_empty() {
            return Ok(());
        }
        // variable 0 (first node) is the gauge; its 3 entries are pinned
        let dim = 3 * n;
        let rot90 = Matrix2::new(0.0, 1.0, -1.0, 0.0);

        for _ in 0..MAX_OPT_ITERATIONS {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);

            for c in &self.constraints {
                let xi = self.var_pose(c.from);
                let xj = self.var_pose(c.to);
                let r = self.residual(c);

                let ri_t = Rotation2::new(-xi.yaw).matrix().to_owned();
                let rz_t = Rotation2::new(-c.relative.yaw).matrix().to_owned();
                let dt = xj.translation() - xi.translation();

                // rows: (tx, ty, yaw); columns per variable (x, y, yaw)
                let a_t = -(rz_t * ri_t); // ∂r_t/∂t_i
                let a_theta = rz_t * rot90 * ri_t * dt; // ∂r_t/∂θ_i
                let b_t = rz_t * ri_t; // ∂r_t/∂t_j

                let ii = 3 * self.var_index(c.from);
                let jj = 3 * self.var_index(c.to);
                let (wt, wr) = c.weight;

                // assemble per-constraint jacobian blocks into H and g
                let mut ja = nalgebra::Matrix3::<f64>::zeros();
                ja.fixed_view_mut::<2, 2>(0, 0).copy_from(&a_t);
                ja.fixed_view_mut::<2, 1>(0, 2).copy_from(&a_theta);
                ja[(2, 2)] = -1.0;
                let mut jb = nalgebra::Matrix3::<f64>::zeros();
                jb.fixed_view_mut::<2, 2>(0, 0).copy_from(&b_t);
                jb[(2, 2)] = 1.0;

                let w = nalgebra::Matrix3::<f64>::from_diagonal(&Vector3::new(wt, wt, wr));
                let haa = ja.transpose() * w * ja;
                let hab = ja.transpose() * w * jb;
                let hbb = jb.transpose() * w * jb;
                let ga = ja.transpose() * w * r;
                let gb = jb.transpose() * w * r;

                for a in 0..3 {
                    for b in 0..3 {
                        h[(ii + a, ii + b)] += haa[(a, b)];
                        h[(ii + a, jj + b)] += hab[(a, b)];
                        h[(jj + a, ii + b)] += hab[(b, a)];
                        h[(jj + a, jj + b)] += hbb[(a, b)];
                    }
                    g[ii + a] += ga[a];
                    g[jj + a] += gb[a];
                }
            }

            // gauge fixing: clamp the first node
            for k in 0..3 {
                for c in 0..dim {
                    h[(k, c)] = 0.0;
                    h[(c, k)] = 0.0;
                }
                h[(k, k)] = 1.0;
                g[k] = 0.0;
            }

            if g.amax() < GRADIENT_TOLERANCE {
                return Ok(());
            }

            let delta = h
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&(-&g)))
                .or_else(|| h.lu().solve(&(-&g)))
                .ok_or(Error::DisconnectedGraph)?;

            for (idx, pose) in self
                .nodes
                .iter_mut()
                .map(|n| &mut n.se2)
                .chain(self.submap_poses.iter_mut())
                .enumerate()
            {
                let o = 3 * idx;
                *pose = Se2::new(
                    pose.x + delta[o],
                    pose.y + delta[o + 1],
                    pose.yaw + delta[o + 2],
                );
            }
        }
        Ok(())
    }

    /// Full 3D node poses with the optimized planar components.
    pub fn node_poses(&self) -> Vec<Pose3> {
        self.nodes.iter().map(Node::to_pose3).collect()
    }

    /// Line-oriented serialization (NODE/SUBMAP/CONSTRAINT records).
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "POSEGRAPH v1")?;
        for (i, n) in self.nodes.iter().enumerate() {
            writeln!(
                w,
                "NODE {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                i, n.se2.x, n.se2.y, n.se2.yaw, n.z, n.roll, n.pitch
            )?;
        }
        for (i, s) in self.submap_poses.iter().enumerate() {
            writeln!(w, "SUBMAP {} {:.9} {:.9} {:.9}", i, s.x, s.y, s.yaw)?;
        }
        for c in &self.constraints {
            let kind = match c.kind {
                ConstraintKind::Odometry => "odometry",
                ConstraintKind::Loop => "loop",
            };
            let fmt_var = |v: VarId| match v {
                VarId::Node(i) => format!("node {i}"),
                VarId::Submap(i) => format!("submap {i}"),
            };
            writeln!(
                w,
                "CONSTRAINT {} {} {} {:.9} {:.9} {:.9} {:.9} {:.9}",
                kind,
                fmt_var(c.from),
                fmt_var(c.to),
                c.relative.x,
                c.relative.y,
                c.relative.yaw,
                c.weight.0,
                c.weight.1
            )?;
        }
        Ok(())
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<PoseGraph> {
        let mut graph = PoseGraph::default();
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedScan("empty pose graph file".into()))??;
        if header.trim() != "POSEGRAPH v1" {
            return Err(Error::MalformedScan("bad pose graph header".into()));
        }
        let parse_var = |ty: &str, id: &str| -> Result<VarId> {
            let id: usize = id
                .parse()
                .map_err(|_| Error::MalformedScan(format!("bad var id {id}")))?;
            match ty {
                "node" => Ok(VarId::Node(id)),
                "submap" => Ok(VarId::Submap(id)),
                other => Err(Error::MalformedScan(format!("bad var type {other}"))),
            }
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let bad = || Error::MalformedScan(format!("bad pose graph record on line {}", lineno + 2));
            let f = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad()) };
            match toks[0] {
                "NODE" if toks.len() == 8 => {
                    graph.nodes.push(Node {
                        se2: Se2::new(f(toks[2])?, f(toks[3])?, f(toks[4])?),
                        z: f(toks[5])?,
                        roll: f(toks[6])?,
                        pitch: f(toks[7])?,
                    });
                }
                "SUBMAP" if toks.len() == 5 => {
                    graph
                        .submap_poses
                        .push(Se2::new(f(toks[2])?, f(toks[3])?, f(toks[4])?));
                }
                "CONSTRAINT" if toks.len() == 11 => {
                    let kind = match toks[1] {
                        "odometry" => ConstraintKind::Odometry,
                        "loop" => ConstraintKind::Loop,
                        _ => return Err(bad()),
                    };
                    graph.constraints.push(Constraint {
                        kind,
                        from: parse_var(toks[2], toks[3])?,
                        to: parse_var(toks[4], toks[5])?,
                        relative: Se2::new(f(toks[6])?, f(toks[7])?, f(toks[8])?),
                        weight: (f(toks[9])?, f(toks[10])?),
                    });
                }
                _ => return Err(bad()),
            }
        }
        Ok(graph)
    }

    /// Pairs (submap, node) already linked by a loop constraint.
    pub fn loop_pairs(&self) -> HashSet<(usize, usize)> {
        self.constraints
            .iter()
            .filter(|c| c.kind == ConstraintKind::Loop)
            .filter_map(|c| match (c.from, c.to) {
                (VarId::Submap(s), VarId::Node(n)) => Some((s, n)),
                (VarId::Node(n), VarId::Submap(s)) => Some((s, n)),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node_at(x: f64, y: f64, yaw: f64) -> Node {
        Node {
            se2: Se2::new(x, y, yaw),
            z: 0.0,
            roll: 0.0,
            pitch: 0.0,
        }
    }

    fn odo(from: usize, to: usize, rel: Se2) -> Constraint {
        Constraint {
            kind: ConstraintKind::Odometry,
            from: VarId::Node(from),
            to: VarId::Node(to),
            relative: rel,
            weight: (10.0, 100.0),
        }
    }

    #[test]
    fn consistent_odometry_chain_is_a_fixed_point() {
        let mut g = PoseGraph::default();
        g.add_node(node_at(0.0, 0.0, 0.0));
        g.add_node(node_at(1.0, 0.0, 0.0));
        g.add_node(node_at(2.0, 0.0, 0.1));
        g.add_constraint(odo(0, 1, Se2::new(1.0, 0.0, 0.0)));
        g.add_constraint(odo(
            1,
            2,
            g.nodes[1].se2.inverse().compose(&g.nodes[2].se2),
        ));
        let before: Vec<_> = g.nodes.iter().map(|n| n.se2).collect();
        g.optimize().unwrap();
        for (a, b) in before.iter().zip(g.nodes.iter().map(|n| n.se2)) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.y - b.y).abs() < 1e-9);
            assert!((a.yaw - b.yaw).abs() < 1e-9);
        }
    }

    /// 4-node square with drifted odometry and one exact loop constraint.
    fn drifted_square() -> PoseGraph {
        let mut g = PoseGraph::default();
        // truth: unit square corners, 90° turns
        // odometry relative motions carry a yaw bias
        let bias = 0.05;
        let rel_true = Se2::new(1.0, 0.0, std::f64::consts::FRAC_PI_2);
        let rel_odo = Se2::new(1.0, 0.0, std::f64::consts::FRAC_PI_2 + bias);
        let mut pose = Se2::identity();
        g.add_node(node_at(0.0, 0.0, 0.0));
        for i in 0..3 {
            pose = pose.compose(&rel_odo);
            g.add_node(Node {
                se2: pose,
                z: 0.0,
                roll: 0.0,
                pitch: 0.0,
            });
            g.add_constraint(odo(i, i + 1, rel_odo));
        }
        // exact loop: node 3 observed relative to node 0 with the true motion
        let true3 = rel_true.compose(&rel_true).compose(&rel_true);
        let loop_rel = true3.inverse(); // from node 3 back to node 0
        g.add_constraint(Constraint {
            kind: ConstraintKind::Loop,
            from: VarId::Node(3),
            to: VarId::Node(0),
            relative: loop_rel,
            weight: (1.0, 10.0),
        });
        g
    }

    #[test]
    fn loop_constraint_reduces_error_on_drifted_square() {
        let mut g = drifted_square();
        let truth: Vec<Se2> = {
            let rel = Se2::new(1.0, 0.0, std::f64::consts::FRAC_PI_2);
            let mut p = Se2::identity();
            let mut v = vec![p];
            for _ in 0..3 {
                p = p.compose(&rel);
                v.push(p);
            }
            v
        };
        let ate = |g: &PoseGraph| -> f64 {
            let e: f64 = g
                .nodes
                .iter()
                .zip(&truth)
                .map(|(n, t)| (n.se2.translation() - t.translation()).norm_squared())
                .sum();
            (e / truth.len() as f64).sqrt()
        };
        let before_err = g.total_error();
        let before_ate = ate(&g);
        g.optimize().unwrap();
        assert!(g.total_error() <= before_err);
        assert!(ate(&g) < before_ate, "{} !< {}", ate(&g), before_ate);
    }

    #[test]
    fn optimize_never_increases_total_error() {
        let mut g = drifted_square();
        let before = g.total_error();
        g.optimize().unwrap();
        assert!(g.total_error() <= before + 1e-12);
    }

    #[test]
    fn weight_scaling_leaves_argmin_unchanged() {
        let mut g1 = drifted_square();
        let mut g2 = drifted_square();
        for c in &mut g2.constraints {
            c.weight = (c.weight.0 * 10.0, c.weight.1 * 10.0);
        }
        g1.optimize().unwrap();
        g2.optimize().unwrap();
        for (a, b) in g1.nodes.iter().zip(&g2.nodes) {
            assert!((a.se2.x - b.se2.x).abs() < 1e-7);
            assert!((a.se2.y - b.se2.y).abs() < 1e-7);
            assert!((wrap_angle(a.se2.yaw - b.se2.yaw)).abs() < 1e-7);
        }
    }

    #[test]
    fn disconnected_graph_rejected() {
        let mut g = PoseGraph::default();
        g.add_node(node_at(0.0, 0.0, 0.0));
        g.add_node(node_at(1.0, 0.0, 0.0));
        g.add_node(node_at(5.0, 0.0, 0.0));
        g.add_constraint(odo(0, 1, Se2::new(1.0, 0.0, 0.0)));
        assert!(matches!(g.optimize(), Err(Error::DisconnectedGraph)));
    }

    #[test]
    fn text_round_trip() {
        let g = drifted_square();
        let mut buf = Vec::new();
        g.write_text(&mut buf).unwrap();
        let back = PoseGraph::read_text(&mut buf.as_slice()).unwrap();
        assert_eq!(back.nodes.len(), g.nodes.len());
        assert_eq!(back.constraints.len(), g.constraints.len());
        for (a, b) in g.nodes.iter().zip(&back.nodes) {
            assert!((a.se2.x - b.se2.x).abs() < 1e-8);
            assert!((a.se2.yaw - b.se2.yaw).abs() < 1e-8);
        }
    }

    #[test]
    fn side_channel_survives_round_trip_through_pose3() {
        let p = Pose3::new(
            UnitQuaternion::from_euler_angles(0.02, -0.03, 1.2),
            Vector3::new(4.0, 5.0, -0.7),
        );
        let n = Node::from_pose3(&p);
        let back = n.to_pose3();
        assert!((back.translation - p.translation).norm() < 1e-9);
        assert!(back.inverse().compose(&p).rotation_angle() < 1e-9);
    }
}
