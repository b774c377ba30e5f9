//! SE(3) rigid transforms and their exponential/logarithm maps.
//!
//! Orientation is stored as a unit quaternion and renormalized after every
//! composition so long trajectories do not accumulate drift away from the
//! group manifold.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::{Error, Result};

const SMALL_ANGLE: f64 = 1e-8;

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(*rotation.quaternion()),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// Builds a pose from a rotation matrix and translation. The matrix is
    /// projected onto the closest unit quaternion.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = UnitQuaternion::from_matrix(rotation);
        Self {
            rotation: rot,
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        let rotation =
            UnitQuaternion::new_normalize(*(self.rotation * other.rotation).quaternion());
        Pose3 {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv_rot = self.rotation.inverse();
        Pose3 {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotation angle in radians, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }
}

/// Element of se(3): rotational and translational velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist6 {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist6 {
    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rot: self.rot * s,
            trans: self.trans * s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rot.norm_squared() + self.trans.norm_squared()).sqrt()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Closed-form exponential map se(3) → SE(3).
pub fn se3_exp(xi: &Twist6) -> Pose3 {
    let theta = xi.rot.norm();
    let omega_hat = skew(&xi.rot);
    let omega_hat2 = omega_hat * omega_hat;

    // V = I + b·ω̂ + c·ω̂² with b = (1-cosθ)/θ², c = (θ-sinθ)/θ³.
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let v_mat = Matrix3::identity() + omega_hat * b + omega_hat2 * c;

    Pose3 {
        rotation: UnitQuaternion::from_scaled_axis(xi.rot),
        translation: v_mat * xi.trans,
    }
}

/// Logarithm map SE(3) → se(3), principal branch.
///
/// Fails when the rotation angle reaches π, where the axis is not unique.
pub fn se3_log(p: &Pose3) -> Result<Twist6> {
    let angle = p.rotation.angle();
    if angle > std::f64::consts::PI - 1e-9 {
        return Err(Error::LogBranchSingularity);
    }
    let omega = p.rotation.scaled_axis();
    let omega_hat = skew(&omega);
    let omega_hat2 = omega_hat * omega_hat;

    // V⁻¹ = I − ½ω̂ + d·ω̂².
    let d = if angle < SMALL_ANGLE {
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        let half = angle / 2.0;
        (1.0 - half * half.cos() / half.sin()) / (angle * angle)
    };
    let v_inv = Matrix3::identity() - omega_hat * 0.5 + omega_hat2 * d;

    Ok(Twist6 {
        rot: omega,
        trans: v_inv * p.translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exp_of_zero_twist_is_identity() {
        let p = se3_exp(&Twist6::zero());
        assert_relative_eq!(p.rotation_angle(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.translation.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = se3_exp(&Twist6::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)));
        assert_relative_eq!(p.rotation_angle(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_maps_x_axis_to_y_axis() {
        let p = se3_exp(&Twist6::new(
            Vector3::new(0.0, 0.0, FRAC_PI_2),
            Vector3::zeros(),
        ));
        let y = p.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(y, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let xi = se3_log(&Pose3::identity()).unwrap();
        assert_relative_eq!(xi.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_of_pure_translation() {
        let p = Pose3::from_translation(Vector3::new(4.0, -1.0, 0.5));
        let xi = se3_log(&p).unwrap();
        assert_relative_eq!(xi.rot.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(xi.trans, Vector3::new(4.0, -1.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn log_at_pi_is_singular() {
        let p = se3_exp(&Twist6::new(
            Vector3::new(std::f64::consts::PI, 0.0, 0.0),
            Vector3::zeros(),
        ));
        assert!(matches!(se3_log(&p), Err(Error::LogBranchSingularity)));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = se3_exp(&Twist6::new(
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(1.0, 2.0, -0.5),
        ));
        let id = p.compose(&p.inverse());
        assert!(id.rotation_angle() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(
            wx in -1.7f64..1.7, wy in -1.7f64..1.7, wz in -1.7f64..1.7,
            vx in -10.0f64..10.0, vy in -10.0f64..10.0, vz in -10.0f64..10.0,
        ) {
            let mut rot = Vector3::new(wx, wy, wz);
            // keep the sample on the principal branch with margin
            if rot.norm() > 3.0 {
                rot *= 3.0 / rot.norm();
            }
            let xi = Twist6::new(rot, Vector3::new(vx, vy, vz));
            let back = se3_log(&se3_exp(&xi)).unwrap();
            prop_assert!((back.rot - xi.rot).norm() < 1e-9);
            prop_assert!((back.trans - xi.trans).norm() < 1e-9);
        }

        #[test]
        fn transform_respects_composition(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            bx in -1.0f64..1.0, by in -1.0f64..1.0, bz in -1.0f64..1.0,
            px in -10.0f64..10.0, py in -10.0f64..10.0, pz in -10.0f64..10.0,
        ) {
            let a = se3_exp(&Twist6::new(Vector3::new(ax, ay, az), Vector3::new(1.0, -2.0, 0.3)));
            let b = se3_exp(&Twist6::new(Vector3::new(bx, by, bz), Vector3::new(-0.4, 0.8, 2.0)));
            let x = Vector3::new(px, py, pz);
            let lhs = a.compose(&b).transform_point(&x);
            let rhs = a.transform_point(&b.transform_point(&x));
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn group_axioms(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
        ) {
            let p = se3_exp(&Twist6::new(Vector3::new(ax, ay, az), Vector3::new(tx, ty, tz)));
            let det = p.rotation_matrix().determinant();
            prop_assert!((det - 1.0).abs() < 1e-9);
            let id = p.inverse().compose(&p);
            prop_assert!(id.rotation_angle() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }
    }
}
