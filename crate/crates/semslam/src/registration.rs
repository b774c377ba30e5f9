//! Semantic ICP: constant-velocity motion prediction, the adaptive
//! correspondence threshold, and robust label-weighted Gauss-Newton
//! alignment.
//!
//! Each correspondence (s, q) found within τ contributes a point-to-point
//! residual weighted by the product of the Geman-McClure influence weight and
//! the label-fitness term κ: matching labels weigh in with the segmentation
//! confidence, mismatching labels with its complement, so confidently
//! mislabeled structure is suppressed instead of dragging the alignment.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use crate::local_map::SemanticVoxelMap;
use crate::se3::{se3_exp, Pose3, Twist6};
use crate::types::{Scan, SemanticConfig, UNLABELED};

pub const MAX_ITERATIONS: usize = 500;
pub const CONVERGENCE_STEP_NORM: f64 = 1e-4;

/// Constant-velocity prediction: the next inter-scan motion equals the last.
pub fn predict_motion(prev_relative: Option<&Pose3>) -> Pose3 {
    prev_relative.copied().unwrap_or_else(Pose3::identity)
}

/// Label-fitness weight of a correspondence.
///
/// The confidence is clamped into (p_min, p_max) first so that a mismatch
/// with ground-truth confidence 1 never annihilates a residual. Pairs with an
/// unlabeled side fall back to the configured neutral weight.
pub fn kappa(y_s: u16, y_q: u16, p: f64, cfg: &SemanticConfig) -> f64 {
    if y_s == UNLABELED || y_q == UNLABELED {
        return cfg.kappa_neutral;
    }
    let (p_min, p_max) = cfg.confidence_clamp;
    let p = p.clamp(p_min, p_max);
    if y_s == y_q {
        p
    } else {
        1.0 - p
    }
}

/// Geman-McClure influence weight σ⁴/(σ² + r²)², normalized to 1 at r = 0.
pub fn gm_weight(residual_norm: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let denom = s2 + residual_norm * residual_norm;
    (s2 / denom) * (s2 / denom)
}

/// Geman-McClure loss ρ(r) = (r²/2)/(1 + r²/σ²), whose IRLS weight is
/// `gm_weight`.
pub fn gm_loss(residual_norm: f64, sigma: f64) -> f64 {
    let r2 = residual_norm * residual_norm;
    (r2 / 2.0) / (1.0 + r2 / (sigma * sigma))
}

/// One source/target pairing with its weight decomposition.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub source_index: usize,
    pub residual: Vector3<f64>,
    pub gm: f64,
    pub kappa: f64,
    /// gm · kappa, the weight applied in the normal equations.
    pub weight: f64,
}

/// Finds nearest-neighbor correspondences of `source` (transformed by `pose`)
/// in `map` within `tau` and computes their weights with σ = τ/3.
pub fn correspondences(
    source: &Scan,
    map: &SemanticVoxelMap,
    pose: &Pose3,
    tau: f64,
    cfg: &SemanticConfig,
) -> Vec<Correspondence> {
    let sigma = tau / 3.0;
    let mut out = Vec::new();
    for (i, s) in source.points.iter().enumerate() {
        let world = pose.transform_point(&s.position);
        if let Some((q, dist)) = map.nearest_neighbor(&world, tau) {
            let gm = gm_weight(dist, sigma);
            let k = kappa(s.label, q.label, s.confidence, cfg);
            out.push(Correspondence {
                source_index: i,
                residual: world - q.position,
                gm,
                kappa: k,
                weight: gm * k,
            });
        }
    }
    out
}

/// Jacobian of the residual exp(ξ)·p − q with respect to the twist
/// (rot, trans) at ξ = 0, where p is the current world-frame source point.
pub fn point_jacobian(world: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    // ∂/∂ω (ω × p) = −p̂
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::new(
        0.0, world.z, -world.y, -world.z, 0.0, world.x, world.y, -world.x, 0.0,
    ));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    j
}

#[derive(Debug, Clone, Copy)]
pub struct RegistrationResult {
    /// World-from-sensor pose.
    pub pose: Pose3,
    pub iterations: usize,
    pub final_correspondences: usize,
    pub converged: bool,
}

/// Aligns `source` against the local map starting from `initial`
/// (world-from-sensor), recomputing correspondences every iteration.
pub fn register_scan(
    source: &Scan,
    map: &SemanticVoxelMap,
    initial: &Pose3,
    tau: f64,
    cfg: &SemanticConfig,
) -> RegistrationResult {
    let mut pose = *initial;
    let mut last_count = 0;
    for iteration in 0..MAX_ITERATIONS {
        let corrs = correspondences(source, map, &pose, tau, cfg);
        if corrs.is_empty() {
            return RegistrationResult {
                pose: *initial,
                iterations: iteration,
                final_correspondences: 0,
                converged: false,
            };
        }
        last_count = corrs.len();

        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in &corrs {
            let world = pose.transform_point(&source.points[c.source_index].position);
            let j = point_jacobian(&world);
            h += j.transpose() * j * c.weight;
            g += j.transpose() * c.residual * c.weight;
        }
        let step = match h.cholesky() {
            Some(chol) => chol.solve(&(-g)),
            None => {
                return RegistrationResult {
                    pose,
                    iterations: iteration,
                    final_correspondences: last_count,
                    converged: false,
                }
            }
        };
        let delta = Twist6::new(
            Vector3::new(step[0], step[1], step[2]),
            Vector3::new(step[3], step[4], step[5]),
        );
        pose = se3_exp(&delta).compose(&pose);
        if delta.norm() < CONVERGENCE_STEP_NORM {
            return RegistrationResult {
                pose,
                iterations: iteration + 1,
                final_correspondences: last_count,
                converged: true,
            };
        }
    }
    RegistrationResult {
        pose,
        iterations: MAX_ITERATIONS,
        final_correspondences: last_count,
        converged: false,
    }
}

/// Running-RMS correspondence threshold, seeded with an initial value until
/// enough motion has been observed.
#[derive(Debug, Clone)]
pub struct AdaptiveThreshold {
    sigma_sq_accum: f64,
    sample_count: usize,
    pub initial_threshold: f64,
    pub min_motion: f64,
    pub max_range: f64,
}

impl AdaptiveThreshold {
    pub fn new(initial_threshold: f64, min_motion: f64, max_range: f64) -> Self {
        Self {
            sigma_sq_accum: 0.0,
            sample_count: 0,
            initial_threshold,
            min_motion,
            max_range,
        }
    }

    pub fn current(&self) -> f64 {
        if self.sample_count == 0 {
            self.initial_threshold
        } else {
            3.0 * (self.sigma_sq_accum / self.sample_count as f64).sqrt()
        }
    }

    /// Folds in the deviation between the predicted and computed motion and
    /// returns the updated threshold. Deviations below `min_motion` leave the
    /// threshold unchanged.
    pub fn update(&mut self, predicted: &Pose3, computed: &Pose3) -> f64 {
        let deviation = predicted.inverse().compose(computed);
        let theta = deviation.rotation_angle();
        let delta = deviation.translation.norm() + 2.0 * self.max_range * (theta / 2.0).sin();
        if delta > self.min_motion {
            self.sigma_sq_accum += delta * delta;
            self.sample_count += 1;
        }
        self.current()
    }
}

impl Default for AdaptiveThreshold {
    fn default() -> Self {
        Self::new(2.0, 0.1, 100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{labels, LabeledPoint};
    use nalgebra::UnitQuaternion;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SemanticConfig {
        SemanticConfig::default()
    }

    #[test]
    fn predict_motion_identity_without_history() {
        let p = predict_motion(None);
        assert_eq!(p, Pose3::identity());
    }

    #[test]
    fn predict_motion_repeats_last_relative() {
        let prev = Pose3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(predict_motion(Some(&prev)), prev);
    }

    #[test]
    fn kappa_match_branch() {
        assert!((kappa(40, 40, 0.9, &cfg()) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn kappa_mismatch_branch() {
        assert!((kappa(40, 48, 0.9, &cfg()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kappa_indifference_point() {
        assert!((kappa(40, 40, 0.5, &cfg()) - 0.5).abs() < 1e-12);
        assert!((kappa(40, 48, 0.5, &cfg()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kappa_unlabeled_is_neutral() {
        let c = cfg();
        assert_eq!(kappa(0, 40, 0.9, &c), c.kappa_neutral);
        assert_eq!(kappa(40, 0, 0.9, &c), c.kappa_neutral);
    }

    #[test]
    fn kappa_never_zero() {
        let c = cfg();
        for &(ys, yq, p) in &[(40u16, 48u16, 1.0f64), (40, 40, 0.0), (10, 50, 0.999)] {
            let k = kappa(ys, yq, p, &c);
            assert!(k > 0.0, "kappa({ys},{yq},{p}) = {k}");
            assert!((c.confidence_clamp.0..=c.confidence_clamp.1).contains(&k));
        }
    }

    #[test]
    fn gm_weight_is_one_at_zero_residual() {
        assert!((gm_weight(0.0, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gm_weight_quarter_at_sigma() {
        // σ⁴/(σ²+σ²)² = 1/4
        assert!((gm_weight(0.7, 0.7) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gm_weight_vanishes_for_outliers() {
        assert!(gm_weight(1e6, 0.5) < 1e-12);
        let mut prev = gm_weight(0.0, 0.5);
        for i in 1..100 {
            let w = gm_weight(i as f64 * 0.1, 0.5);
            assert!(w < prev);
            prev = w;
        }
    }

    fn grid_scan(n: usize, label: u16) -> Scan {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points = (0..n)
            .map(|_| {
                LabeledPoint::new(
                    Vector3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-2.0..2.0),
                    ),
                    label,
                )
            })
            .collect();
        Scan::new(points, 0)
    }

    fn map_of(scan: &Scan) -> SemanticVoxelMap {
        let mut m = SemanticVoxelMap::new(1.0, 50, 200.0, &cfg());
        m.insert_scan(scan, &Pose3::identity());
        m
    }

    #[test]
    fn register_identity_on_identical_clouds() {
        let scan = grid_scan(300, labels::ROAD);
        let m = map_of(&scan);
        let res = register_scan(&scan, &m, &Pose3::identity(), 1.0, &cfg());
        assert!(res.converged);
        assert!(res.pose.translation.norm() < 1e-9);
        assert!(res.pose.rotation_angle() < 1e-9);
    }

    #[test]
    fn register_recovers_small_perturbation() {
        let scan = grid_scan(500, labels::ROAD);
        let m = map_of(&scan);
        // source = perturbed scene; registration should find the inverse
        let perturb = se3_exp(&Twist6::new(
            Vector3::new(0.0, 0.0, 0.03),
            Vector3::new(0.2, -0.1, 0.05),
        ));
        let moved = Scan::new(
            scan.points
                .iter()
                .map(|p| LabeledPoint {
                    position: perturb.transform_point(&p.position),
                    ..*p
                })
                .collect(),
            0,
        );
        let res = register_scan(&moved, &m, &Pose3::identity(), 1.0, &cfg());
        assert!(res.converged);
        let err = res.pose.compose(&perturb);
        assert!(err.translation.norm() < 1e-3, "{}", err.translation.norm());
        assert!(err.rotation_angle() < 1e-4);
    }

    #[test]
    fn register_empty_correspondences_falls_back_to_initial() {
        let scan = grid_scan(50, labels::ROAD);
        let m = map_of(&scan);
        let far = Pose3::from_translation(Vector3::new(1000.0, 0.0, 0.0));
        let res = register_scan(&scan, &m, &far, 1.0, &cfg());
        assert!(!res.converged);
        assert_eq!(res.final_correspondences, 0);
        assert_eq!(res.pose, far);
    }

    #[test]
    fn equivariance_under_rigid_conjugation() {
        let scan = grid_scan(400, labels::ROAD);
        let m = map_of(&scan);
        let perturb = se3_exp(&Twist6::new(
            Vector3::new(0.0, 0.0, 0.02),
            Vector3::new(0.15, 0.1, 0.0),
        ));
        let moved = Scan::new(
            scan.points
                .iter()
                .map(|p| LabeledPoint {
                    position: perturb.transform_point(&p.position),
                    ..*p
                })
                .collect(),
            0,
        );
        let res_plain = register_scan(&moved, &m, &Pose3::identity(), 1.0, &cfg());

        let r = Pose3::new(
            UnitQuaternion::from_euler_angles(0.0, 0.0, 0.8),
            Vector3::new(5.0, -3.0, 0.4),
        );
        let scan_r = Scan::new(
            scan.points
                .iter()
                .map(|p| LabeledPoint {
                    position: r.transform_point(&p.position),
                    ..*p
                })
                .collect(),
            0,
        );
        let moved_r = Scan::new(
            moved
                .points
                .iter()
                .map(|p| LabeledPoint {
                    position: r.transform_point(&p.position),
                    ..*p
                })
                .collect(),
            0,
        );
        let mut m_r = SemanticVoxelMap::new(1.0, 50, 200.0, &cfg());
        m_r.insert_scan(&scan_r, &Pose3::identity());
        let res_conj = register_scan(&moved_r, &m_r, &Pose3::identity(), 1.0, &cfg());

        let expected = r.compose(&res_plain.pose).compose(&r.inverse());
        let diff = expected.inverse().compose(&res_conj.pose);
        assert!(diff.translation.norm() < 1e-6, "{}", diff.translation.norm());
        assert!(diff.rotation_angle() < 1e-6);
    }

    #[test]
    fn irls_objective_non_increasing_on_frozen_correspondences() {
        // freeze correspondences once, then run IRLS steps on them
        let scan = grid_scan(300, labels::ROAD);
        let m = map_of(&scan);
        let perturb = se3_exp(&Twist6::new(
            Vector3::new(0.0, 0.0, 0.05),
            Vector3::new(0.3, 0.0, 0.0),
        ));
        let mut pose = perturb;
        let corrs = correspondences(&scan, &m, &pose, 2.0, &cfg());
        assert!(!corrs.is_empty());
        let sigma: f64 = 2.0 / 3.0;
        let targets: Vec<Vector3<f64>> = corrs
            .iter()
            .map(|c| pose.transform_point(&scan.points[c.source_index].position) - c.residual)
            .collect();
        let objective = |pose: &Pose3| -> f64 {
            corrs
                .iter()
                .zip(&targets)
                .map(|(c, q)| {
                    let w = pose.transform_point(&scan.points[c.source_index].position);
                    c.kappa * gm_loss((w - q).norm(), sigma)
                })
                .sum()
        };
        let mut prev = objective(&pose);
        for _ in 0..10 {
            let mut h = Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            for (c, q) in corrs.iter().zip(&targets) {
                let w = pose.transform_point(&scan.points[c.source_index].position);
                let r = w - q;
                let weight = gm_weight(r.norm(), sigma) * c.kappa;
                let j = point_jacobian(&w);
                h += j.transpose() * j * weight;
                g += j.transpose() * r * weight;
            }
            let step = h.cholesky().unwrap().solve(&(-g));
            pose = se3_exp(&Twist6::new(
                Vector3::new(step[0], step[1], step[2]),
                Vector3::new(step[3], step[4], step[5]),
            ))
            .compose(&pose);
            let now = objective(&pose);
            assert!(now <= prev + 1e-12, "objective increased: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let s = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let q = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let t = se3_exp(&Twist6::new(
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
            ));
            let world = t.transform_point(&s);
            let r = world - q;
            let analytic: Vector6<f64> = 2.0 * point_jacobian(&world).transpose() * r;

            let f = |xi: &Twist6| -> f64 {
                let p = se3_exp(xi).compose(&t).transform_point(&s);
                (p - q).norm_squared()
            };
            let eps = 1e-6;
            let mut numeric = Vector6::<f64>::zeros();
            for k in 0..6 {
                let mut plus = [0.0; 6];
                plus[k] = eps;
                let xi_p = Twist6::new(
                    Vector3::new(plus[0], plus[1], plus[2]),
                    Vector3::new(plus[3], plus[4], plus[5]),
                );
                let xi_m = xi_p.scaled(-1.0);
                numeric[k] = (f(&xi_p) - f(&xi_m)) / (2.0 * eps);
            }
            let rel = (analytic - numeric).norm() / numeric.norm().max(1e-9);
            assert!(rel < 1e-5, "relative error {rel}");
        }
    }

    #[test]
    fn threshold_cold_start_returns_initial() {
        let at = AdaptiveThreshold::default();
        assert!((at.current() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_unchanged_when_prediction_exact() {
        let mut at = AdaptiveThreshold::default();
        let p = Pose3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let tau = at.update(&p, &p);
        assert!((tau - 2.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_converges_to_three_times_constant_deviation() {
        let mut at = AdaptiveThreshold::new(2.0, 0.1, 100.0);
        let predicted = Pose3::identity();
        let computed = Pose3::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let mut tau = 0.0;
        for _ in 0..100 {
            tau = at.update(&predicted, &computed);
        }
        assert!((tau - 1.5).abs() < 1e-9, "tau = {tau}");
    }
}
