//! Trajectory metrics: Umeyama alignment, ATE in 3D and 2D, KITTI
//! segment-based RTE, and per-axis error decomposition.

use nalgebra::{Matrix3, Vector3};

use crate::se3::Pose3;
use crate::{Error, Result};

/// Closed-form least-squares alignment est → gt.
///
/// Returns the rigid (or similarity, when `with_scale`) transform and scale
/// minimizing Σ‖gt_i − (s·R·est_i + t)‖².
pub fn umeyama_align(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(Pose3, f64)> {
    if est.len() != gt.len() {
        return Err(Error::TrajectoryLengthMismatch(est.len(), gt.len()));
    }
    if est.len() < 3 {
        return Err(Error::DegenerateAlignment);
    }
    let n = est.len() as f64;
    let mean_est: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mean_gt: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::<f64>::zeros();
    let mut var_est = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mean_est;
        let dg = g - mean_gt;
        cov += dg * de.transpose();
        var_est += de.norm_squared();
    }
    cov /= n;
    var_est /= n;

    let svd = nalgebra::SVD::new(cov, true, true);
    let u = svd.u.ok_or(Error::DegenerateAlignment)?;
    let v_t = svd.v_t.ok_or(Error::DegenerateAlignment)?;
    let singular = svd.singular_values;
    if singular[1] < 1e-12 {
        return Err(Error::DegenerateAlignment);
    }
    // proper-rotation sign correction
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;

    let scale = if with_scale {
        (singular[0] * s_diag[0] + singular[1] * s_diag[1] + singular[2] * s_diag[2]) / var_est
    } else {
        1.0
    };
    let translation = mean_gt - rotation * mean_est * scale;
    Ok((Pose3::from_matrix(&rotation, translation), scale))
}

fn positions(traj: &[Pose3]) -> Vec<Vector3<f64>> {
    traj.iter().map(|p| p.translation).collect()
}

fn flatten(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| Vector3::new(p.x, p.y, 0.0))
        .collect()
}

fn rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e - g).norm_squared())
        .sum();
    (sum / est.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AteMode {
    ThreeD,
    TwoD,
}

/// RMSE of pairwise position distances, optionally Umeyama-aligned first.
/// The 2D mode projects onto the ground plane before alignment and error
/// computation.
pub fn ate(est: &[Pose3], gt: &[Pose3], mode: AteMode, align: bool) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::TrajectoryLengthMismatch(est.len(), gt.len()));
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    let mut p_est = positions(est);
    let mut p_gt = positions(gt);
    if mode == AteMode::TwoD {
        p_est = flatten(&p_est);
        p_gt = flatten(&p_gt);
    }
    if align {
        let (t, _) = umeyama_align(&p_est, &p_gt, false)?;
        p_est = p_est.iter().map(|p| t.transform_point(p)).collect();
    }
    Ok(rmse(&p_est, &p_gt))
}

/// Per-pose translation errors (after optional rigid alignment), for APE
/// plots.
pub fn ape_per_pose(est: &[Pose3], gt: &[Pose3], align: bool) -> Result<Vec<f64>> {
    if est.len() != gt.len() {
        return Err(Error::TrajectoryLengthMismatch(est.len(), gt.len()));
    }
    let mut p_est = positions(est);
    let p_gt = positions(gt);
    if align {
        let (t, _) = umeyama_align(&p_est, &p_gt, false)?;
        p_est = p_est.iter().map(|p| t.transform_point(p)).collect();
    }
    Ok(p_est
        .iter()
        .zip(&p_gt)
        .map(|(e, g)| (e - g).norm())
        .collect())
}

/// Componentwise RMSE, optionally after rigid alignment.
pub fn per_axis_error(est: &[Pose3], gt: &[Pose3], aligned: bool) -> Result<Vector3<f64>> {
    if est.len() != gt.len() {
        return Err(Error::TrajectoryLengthMismatch(est.len(), gt.len()));
    }
    let mut p_est = positions(est);
    let p_gt = positions(gt);
    if aligned {
        let (t, _) = umeyama_align(&p_est, &p_gt, false)?;
        p_est = p_est.iter().map(|p| t.transform_point(p)).collect();
    }
    let n = p_est.len() as f64;
    let mut acc = Vector3::zeros();
    for (e, g) in p_est.iter().zip(&p_gt) {
        let d = e - g;
        acc += d.component_mul(&d);
    }
    Ok((acc / n).map(f64::sqrt))
}

/// KITTI segment lengths in meters.
pub const RTE_SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// KITTI relative trajectory error: start/end pose error over segments of
/// 100–800 m of ground-truth path length, averaged over all valid (start,
/// length) pairs. Translation error in percent, rotation in degrees/meter.
pub fn rte_kitti(est: &[Pose3], gt: &[Pose3]) -> Result<(f64, f64)> {
    if est.len() != gt.len() {
        return Err(Error::TrajectoryLengthMismatch(est.len(), gt.len()));
    }
    // cumulative ground-truth path length
    let mut dist = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    dist.push(0.0);
    for w in gt.windows(2) {
        acc += (w[1].translation - w[0].translation).norm();
        dist.push(acc);
    }

    let last_frame_from = |start: usize, len: f64| -> Option<usize> {
        let target = dist[start] + len;
        (start..dist.len()).find(|&i| dist[i] > target)
    };

    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut count = 0usize;
    for start in 0..est.len() {
        for &len in &RTE_SEGMENT_LENGTHS {
            let Some(end) = last_frame_from(start, len) else {
                continue;
            };
            let gt_rel = gt[start].inverse().compose(&gt[end]);
            let est_rel = est[start].inverse().compose(&est[end]);
            let err = gt_rel.inverse().compose(&est_rel);
            t_sum += err.translation.norm() / len;
            r_sum += err.rotation_angle().to_degrees() / len;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidSegments);
    }
    Ok((
        100.0 * t_sum / count as f64,
        r_sum / count as f64,
    ))
}

/// Writes per-pose APE values as CSV (index, error).
pub fn write_ape_csv(values: &[f64], w: &mut impl std::io::Write) -> Result<()> {
    writeln!(w, "index,ape")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i},{v:.9}")?;
    }
    Ok(())
}
