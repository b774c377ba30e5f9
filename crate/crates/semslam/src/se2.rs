//! Planar rigid transforms used by submaps and the pose graph.

use nalgebra::{Rotation2, Vector2};

use crate::se3::Pose3;

/// Normalize an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Se2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se2 {
    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn compose(&self, other: &Se2) -> Se2 {
        let r = Rotation2::new(self.yaw);
        let t = r * other.translation() + self.translation();
        Se2::new(t.x, t.y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Se2 {
        let r = Rotation2::new(-self.yaw);
        let t = -(r * self.translation());
        Se2::new(t.x, t.y, -self.yaw)
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(self.yaw) * p + self.translation()
    }

    /// Planar projection of an SE(3) pose: (x, y, yaw).
    pub fn from_pose3(pose: &Pose3) -> Se2 {
        let m = pose.rotation_matrix();
        Se2::new(pose.translation.x, pose.translation.y, m[(1, 0)].atan2(m[(0, 0)]))
    }
}
