//! Deterministic synthetic worlds, LiDAR scans, and loop trajectories.
//!
//! Everything here is seeded: the same seed always produces byte-identical
//! worlds and scans, which lets integration tests use the generator itself
//! as a ground-truth oracle.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io_kitti::azimuth_time_offset;
use crate::se3::{se3_exp, Pose3, Twist6};
use crate::types::{labels, LabeledPoint, Scan};
use crate::Result;

/// A ray-castable world primitive carrying a semantic label.
#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// Horizontal square plane at height `z`, spanning `±half_extent` in x/y.
    Ground { z: f64, half_extent: f64, label: u16 },
    /// Finite parallelogram: `origin + s·u + t·v` for `s, t ∈ [0, 1]`.
    Rect {
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        label: u16,
    },
    /// Vertical cylinder shell between heights `z0` and `z1`.
    Cylinder {
        center: Vector2<f64>,
        radius: f64,
        z0: f64,
        z1: f64,
        label: u16,
    },
    /// Axis-aligned box.
    Cuboid {
        min: Vector3<f64>,
        max: Vector3<f64>,
        label: u16,
    },
}

const RAY_EPS: f64 = 1e-6;

impl Surface {
    pub fn label(&self) -> u16 {
        match self {
            Surface::Ground { label, .. }
            | Surface::Rect { label, .. }
            | Surface::Cylinder { label, .. }
            | Surface::Cuboid { label, .. } => *label,
        }
    }

    /// Distance along the unit ray `origin + t·dir` to the nearest hit.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Ground { z, half_extent, .. } => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                if t <= RAY_EPS {
                    return None;
                }
                let p = origin + dir * t;
                (p.x.abs() <= *half_extent && p.y.abs() <= *half_extent).then_some(t)
            }
            Surface::Rect { origin: o, u, v, .. } => {
                let n = u.cross(v);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(o - origin)) / denom;
                if t <= RAY_EPS {
                    return None;
                }
                let rel = origin + dir * t - o;
                let s = rel.dot(u) / u.norm_squared();
                let w = rel.dot(v) / v.norm_squared();
                ((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&w)).then_some(t)
            }
            Surface::Cylinder {
                center,
                radius,
                z0,
                z1,
                ..
            } => {
                let ox = origin.x - center.x;
                let oy = origin.y - center.y;
                let a = dir.x * dir.x + dir.y * dir.y;
                if a < 1e-12 {
                    return None;
                }
                let b = 2.0 * (ox * dir.x + oy * dir.y);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if t > RAY_EPS {
                        let z = origin.z + dir.z * t;
                        if z >= *z0 && z <= *z1 {
                            return Some(t);
                        }
                    }
                }
                None
            }
            Surface::Cuboid { min, max, .. } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for axis in 0..3 {
                    if dir[axis].abs() < 1e-12 {
                        if origin[axis] < min[axis] || origin[axis] > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (min[axis] - origin[axis]) / dir[axis];
                    let mut t1 = (max[axis] - origin[axis]) / dir[axis];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > RAY_EPS {
                    Some(t_near)
                } else if t_far > RAY_EPS {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }

    /// Unsigned distance from `p` to this surface (large when `p` projects
    /// outside the finite extent). Used to verify zero-noise scans lie on
    /// world geometry.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        const FAR: f64 = f64::INFINITY;
        const EDGE_EPS: f64 = 1e-9;
        match self {
            Surface::Ground { z, half_extent, .. } => {
                if p.x.abs() <= half_extent + EDGE_EPS && p.y.abs() <= half_extent + EDGE_EPS {
                    (p.z - z).abs()
                } else {
                    FAR
                }
            }
            Surface::Rect { origin, u, v, .. } => {
                let n = u.cross(v).normalize();
                let rel = p - origin;
                let s = rel.dot(u) / u.norm_squared();
                let w = rel.dot(v) / v.norm_squared();
                if (-EDGE_EPS..=1.0 + EDGE_EPS).contains(&s)
                    && (-EDGE_EPS..=1.0 + EDGE_EPS).contains(&w)
                {
                    rel.dot(&n).abs()
                } else {
                    FAR
                }
            }
            Surface::Cylinder {
                center,
                radius,
                z0,
                z1,
                ..
            } => {
                if p.z >= z0 - EDGE_EPS && p.z <= z1 + EDGE_EPS {
                    ((Vector2::new(p.x, p.y) - center).norm() - radius).abs()
                } else {
                    FAR
                }
            }
            Surface::Cuboid { min, max, .. } => {
                let mut best = FAR;
                for axis in 0..3 {
                    let others_inside = (0..3).filter(|a| *a != axis).all(|a| {
                        p[a] >= min[a] - EDGE_EPS && p[a] <= max[a] + EDGE_EPS
                    });
                    if others_inside {
                        best = best.min((p[axis] - min[axis]).abs());
                        best = best.min((p[axis] - max[axis]).abs());
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub surfaces: Vec<Surface>,
}

impl World {
    pub fn empty() -> Self {
        World { surfaces: Vec::new() }
    }

    /// Nearest intersection across all surfaces: `(distance, label)`.
    pub fn cast_ray(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_range: f64,
    ) -> Option<(f64, u16)> {
        let mut best: Option<(f64, u16)> = None;
        for s in &self.surfaces {
            if let Some(t) = s.intersect(origin, dir) {
                if t <= max_range && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, s.label()));
                }
            }
        }
        best
    }

    /// Distance from `p` to the nearest surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.surfaces
            .iter()
            .map(|s| s.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Samples `per_surface` labeled points uniformly on every surface.
    /// Deterministic in `seed`.
    pub fn sample_points(&self, seed: u64, per_surface: usize) -> Vec<LabeledPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.surfaces.len() * per_surface);
        for s in &self.surfaces {
            for _ in 0..per_surface {
                let p = match s {
                    Surface::Ground { z, half_extent, .. } => Vector3::new(
                        rng.gen_range(-half_extent..=*half_extent),
                        rng.gen_range(-half_extent..=*half_extent),
                        *z,
                    ),
                    Surface::Rect { origin, u, v, .. } => {
                        origin + u * rng.gen_range(0.0..=1.0) + v * rng.gen_range(0.0..=1.0)
                    }
                    Surface::Cylinder {
                        center,
                        radius,
                        z0,
                        z1,
                        ..
                    } => {
                        let a = rng.gen_range(0.0..std::f64::consts::TAU);
                        Vector3::new(
                            center.x + radius * a.cos(),
                            center.y + radius * a.sin(),
                            rng.gen_range(*z0..=*z1),
                        )
                    }
                    Surface::Cuboid { min, max, .. } => {
                        // Pick a face, then a point on it.
                        let axis = rng.gen_range(0..3usize);
                        let high: bool = rng.gen();
                        let mut p = Vector3::new(
                            rng.gen_range(min.x..=max.x),
                            rng.gen_range(min.y..=max.y),
                            rng.gen_range(min.z..=max.z),
                        );
                        p[axis] = if high { max[axis] } else { min[axis] };
                        p
                    }
                };
                out.push(LabeledPoint::new(p, s.label()));
            }
        }
        out
    }
}

/// Object counts for [`generate_world`].
#[derive(Debug, Clone, Copy)]
pub struct WorldSpec {
    pub walls: usize,
    pub poles: usize,
    pub signs: usize,
    pub parked_cars: usize,
    /// Half-extent of the ground plane and the object placement area, meters.
    pub extent: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            walls: 6,
            poles: 4,
            signs: 2,
            parked_cars: 3,
            extent: 60.0,
        }
    }
}

/// Randomly places the requested objects on a ground plane, keeping a 5 m
/// disc around the origin clear so a sensor at the origin never starts
/// inside geometry. Deterministic in `seed`.
pub fn generate_world(seed: u64, spec: &WorldSpec) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut surfaces = vec![Surface::Ground {
        z: 0.0,
        half_extent: spec.extent,
        label: labels::ROAD,
    }];
    let place = |rng: &mut ChaCha8Rng, clearance: f64| -> Vector2<f64> {
        loop {
            let p = Vector2::new(
                rng.gen_range(-spec.extent..=spec.extent),
                rng.gen_range(-spec.extent..=spec.extent),
            );
            if p.norm() >= 5.0 + clearance {
                return p;
            }
        }
    };
    for _ in 0..spec.walls {
        let base = place(&mut rng, 2.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let length = rng.gen_range(8.0..20.0);
        let height = rng.gen_range(3.0..6.0);
        surfaces.push(Surface::Rect {
            origin: Vector3::new(base.x, base.y, 0.0),
            u: Vector3::new(angle.cos(), angle.sin(), 0.0) * length,
            v: Vector3::new(0.0, 0.0, height),
            label: labels::BUILDING,
        });
    }
    for _ in 0..spec.poles {
        let c = place(&mut rng, 1.0);
        surfaces.push(Surface::Cylinder {
            center: c,
            radius: 0.15,
            z0: 0.0,
            z1: 4.0,
            label: labels::POLE,
        });
    }
    for _ in 0..spec.signs {
        let base = place(&mut rng, 1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        surfaces.push(Surface::Rect {
            origin: Vector3::new(base.x, base.y, 1.8),
            u: Vector3::new(angle.cos(), angle.sin(), 0.0) * 0.6,
            v: Vector3::new(0.0, 0.0, 0.6),
            label: labels::TRAFFIC_SIGN,
        });
    }
    for _ in 0..spec.parked_cars {
        let c = place(&mut rng, 3.0);
        surfaces.push(Surface::Cuboid {
            min: Vector3::new(c.x - 2.0, c.y - 0.9, 0.0),
            max: Vector3::new(c.x + 2.0, c.y + 0.9, 1.5),
            label: labels::CAR,
        });
    }
    World { surfaces }
}

/// World purpose-built for square-loop runs: a corridor of walls outside a
/// square path of the given side length, with poles and parked cars along
/// it. All geometry keeps ≥ 4 m clearance from the path so scans are never
/// taken from inside an object.
pub fn loop_world(side: f64) -> World {
    let margin = 12.0;
    let lo = -margin;
    let hi = side + margin;
    let h = 5.0;
    let mut surfaces = vec![Surface::Ground {
        z: 0.0,
        half_extent: side + 2.0 * margin,
        label: labels::ROAD,
    }];
    // Outer wall enclosing the path: a zig-zag facade rather than a straight
    // line. Long straight walls constrain only the cross-track direction of a
    // scan match; the irregular jogs (different on every side) make the wall
    // itself pin the along-track position as well.
    let sides = [
        (Vector2::new(lo, lo), Vector2::new(1.0, 0.0), Vector2::new(0.0, -1.0)),
        (Vector2::new(hi, lo), Vector2::new(0.0, 1.0), Vector2::new(1.0, 0.0)),
        (Vector2::new(hi, hi), Vector2::new(-1.0, 0.0), Vector2::new(0.0, 1.0)),
        (Vector2::new(lo, hi), Vector2::new(0.0, -1.0), Vector2::new(-1.0, 0.0)),
    ];
    // (fraction along the side where a jog starts, extra outward depth)
    let facade: [&[(f64, f64)]; 4] = [
        &[(0.0, 0.0), (0.17, 1.5), (0.34, 0.5), (0.52, 2.5), (0.71, 1.0), (0.88, 0.0)],
        &[(0.0, 0.0), (0.14, 2.0), (0.37, 0.5), (0.58, 1.5), (0.79, 3.0), (0.92, 0.0)],
        &[(0.0, 0.0), (0.21, 1.0), (0.43, 2.5), (0.62, 0.5), (0.83, 1.5), (0.94, 0.0)],
        &[(0.0, 0.0), (0.12, 2.5), (0.31, 1.0), (0.55, 0.0), (0.69, 2.0), (0.86, 0.5)],
    ];
    let len = hi - lo;
    let wall = |a: Vector2<f64>, b: Vector2<f64>| Surface::Rect {
        origin: Vector3::new(a.x, a.y, 0.0),
        u: Vector3::new(b.x - a.x, b.y - a.y, 0.0),
        v: Vector3::new(0.0, 0.0, h),
        label: labels::BUILDING,
    };
    for ((start, along, outward), segments) in sides.iter().zip(facade) {
        let vertex = |f: f64, d: f64| start + along * (f * len) + outward * d;
        let mut prev = vertex(0.0, 0.0);
        for k in 1..segments.len() {
            let (f, d) = segments[k];
            let (_, d_prev) = segments[k - 1];
            let jog_start = vertex(f, d_prev);
            let jog_end = vertex(f, d);
            surfaces.push(wall(prev, jog_start));
            surfaces.push(wall(jog_start, jog_end));
            prev = jog_end;
        }
        surfaces.push(wall(prev, vertex(1.0, 0.0)));
    }
    // Inner wall box inside the loop (breaks rotational ambiguity of the
    // outer square together with the asymmetric clutter below).
    let ilo = side * 0.25;
    let ihi = side * 0.75;
    let inner = [
        (Vector3::new(ilo, ilo, 0.0), Vector3::new(ihi - ilo, 0.0, 0.0)),
        (Vector3::new(ihi, ilo, 0.0), Vector3::new(0.0, ihi - ilo, 0.0)),
        (Vector3::new(ihi, ihi, 0.0), Vector3::new(ilo - ihi, 0.0, 0.0)),
        (Vector3::new(ilo, ihi, 0.0), Vector3::new(0.0, ilo - ihi, 0.0)),
    ];
    for (origin, u) in inner {
        surfaces.push(Surface::Rect {
            origin,
            u,
            v: Vector3::new(0.0, 0.0, h),
            label: labels::BUILDING,
        });
    }
    // Stub walls jutting into the corridor at irregular positions, different
    // on every side. Long corridor walls only constrain the cross-track
    // direction; these perpendicular faces pin the along-track position too.
    let sides = [
        (Vector2::new(lo, lo), Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)),
        (Vector2::new(hi, lo), Vector2::new(0.0, 1.0), Vector2::new(-1.0, 0.0)),
        (Vector2::new(hi, hi), Vector2::new(-1.0, 0.0), Vector2::new(0.0, -1.0)),
        (Vector2::new(lo, hi), Vector2::new(0.0, -1.0), Vector2::new(1.0, 0.0)),
    ];
    let stub_fractions: [&[f64]; 4] = [
        &[0.07, 0.22, 0.55, 0.93],
        &[0.18, 0.47, 0.81],
        &[0.11, 0.36, 0.64, 0.89],
        &[0.29, 0.58, 0.76],
    ];
    let len = hi - lo;
    for ((start, along, inward), fracs) in sides.iter().zip(stub_fractions) {
        for &f in fracs {
            let base = start + along * (f * len);
            surfaces.push(Surface::Rect {
                origin: Vector3::new(base.x, base.y, 0.0),
                u: Vector3::new(inward.x, inward.y, 0.0) * 3.0,
                v: Vector3::new(0.0, 0.0, h),
                label: labels::BUILDING,
            });
        }
    }
    // Poles between path and outer wall, spaced unevenly per side.
    let pole_offsets = [0.13, 0.41, 0.68, 0.87];
    for (i, f) in pole_offsets.iter().enumerate() {
        let along = side * f;
        let out = 6.0 + i as f64;
        let centers = [
            Vector2::new(along, -out),
            Vector2::new(side + out, along),
            Vector2::new(side - along, side + out),
            Vector2::new(-out, side - along),
        ];
        for c in centers {
            surfaces.push(Surface::Cylinder {
                center: c,
                radius: 0.15,
                z0: 0.0,
                z1: 4.0,
                label: labels::POLE,
            });
        }
    }
    // Parked cars along the corridor, deliberately asymmetric.
    let cars = [
        (side * 0.3, -7.0),
        (side * 0.85, -6.5),
        (side + 7.0, side * 0.55),
        (side + 6.0, side * 0.12),
        (side * 0.8, side + 8.0),
        (side * 0.45, side + 6.5),
        (-7.0, side * 0.33),
        (-6.0, side * 0.72),
    ];
    for (cx, cy) in cars {
        surfaces.push(Surface::Cuboid {
            min: Vector3::new(cx - 2.0, cy - 0.9, 0.0),
            max: Vector3::new(cx + 2.0, cy + 0.9, 1.5),
            label: labels::CAR,
        });
    }
    World { surfaces }
}

/// Sensor model for [`simulate_scan`].
#[derive(Debug, Clone)]
pub struct ScanModel {
    pub channels: usize,
    pub azimuth_steps: usize,
    /// Elevation range in radians, low to high.
    pub elevation: (f64, f64),
    pub max_range: f64,
    /// Gaussian range noise, meters.
    pub noise_sigma: f64,
    /// Uniform per-ray beam divergence in elevation, radians. Breaks the
    /// perfectly coherent ground rings an ideal scanner would paint on the
    /// flat synthetic ground, which would otherwise act as sensor-relative
    /// features and bias point-to-point registration toward zero motion.
    pub elevation_jitter: f64,
    /// Uniform per-ray firing-angle jitter as a fraction of one azimuth
    /// step (0.5 spreads rays over the whole step, like an asynchronous
    /// scanner). Decoheres the sensor-fixed azimuth pattern for the same
    /// reason as `elevation_jitter`.
    pub azimuth_jitter: f64,
    /// Probability of flipping a point's label; confidence becomes `1 - q`.
    pub label_noise_q: f64,
    pub seed: u64,
}

impl Default for ScanModel {
    fn default() -> Self {
        ScanModel {
            channels: 64,
            azimuth_steps: 1024,
            elevation: (-15f64.to_radians(), 15f64.to_radians()),
            max_range: 100.0,
            noise_sigma: 0.0,
            elevation_jitter: 0.2f64.to_radians(),
            azimuth_jitter: 0.5,
            label_noise_q: 0.0,
            seed: 0,
        }
    }
}

impl ScanModel {
    /// Coarse model for fast tests.
    pub fn desk() -> Self {
        ScanModel {
            channels: 16,
            azimuth_steps: 256,
            ..ScanModel::default()
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; both inputs are in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const FLIP_POOL: [u16; 6] = [
    labels::CAR,
    labels::ROAD,
    labels::BUILDING,
    labels::VEGETATION,
    labels::POLE,
    labels::SIDEWALK,
];

/// Ray-casts one scan from `pose`, captured instantaneously (no sensor
/// motion during the sweep). Points are in the sensor frame with
/// azimuth-derived `time_offset`. Deterministic in `(model.seed, index)`.
pub fn simulate_scan(world: &World, pose: &Pose3, model: &ScanModel, index: usize) -> Scan {
    simulate_scan_moving(world, pose, &Pose3::identity(), model, index)
}

/// Like [`simulate_scan`], but the sensor moves during the sweep:
/// `end_pose` is the pose at sweep end and `relative_motion` the motion
/// over the whole sweep, so the instantaneous pose at normalized time `t`
/// is `end_pose ∘ exp((t − 1)·log(relative_motion))`. Each point is
/// recorded in its instantaneous sensor frame, producing the rolling-
/// shutter skew that [`crate::preprocessing::deskew`] undoes exactly.
pub fn simulate_scan_moving(
    world: &World,
    end_pose: &Pose3,
    relative_motion: &Pose3,
    model: &ScanModel,
    index: usize,
) -> Scan {
    let mut rng = ChaCha8Rng::seed_from_u64(
        model.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let twist = crate::se3::se3_log(relative_motion).unwrap_or_default();
    let mut points = Vec::new();
    for ch in 0..model.channels {
        let el = if model.channels == 1 {
            (model.elevation.0 + model.elevation.1) / 2.0
        } else {
            model.elevation.0
                + (model.elevation.1 - model.elevation.0) * ch as f64
                    / (model.channels - 1) as f64
        };
        for step in 0..model.azimuth_steps {
            let el = if model.elevation_jitter > 0.0 {
                el + model.elevation_jitter * rng.gen_range(-1.0..1.0)
            } else {
                el
            };
            let (sin_el, cos_el) = el.sin_cos();
            let step = step as f64
                + if model.azimuth_jitter > 0.0 {
                    model.azimuth_jitter * rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                };
            let az = std::f64::consts::TAU * step / model.azimuth_steps as f64;
            let dir_sensor = Vector3::new(cos_el * az.cos(), cos_el * az.sin(), sin_el);
            let time = azimuth_time_offset(dir_sensor.x, dir_sensor.y);
            let pose_t = end_pose.compose(&se3_exp(&twist.scaled(time - 1.0)));
            let dir_world = pose_t.rotation * dir_sensor;
            let Some((t, surface_label)) =
                world.cast_ray(&pose_t.translation, &dir_world, model.max_range)
            else {
                continue;
            };
            let range = t + model.noise_sigma * if model.noise_sigma > 0.0 { gauss(&mut rng) } else { 0.0 };
            let mut label = surface_label;
            let mut confidence = 1.0;
            if model.label_noise_q > 0.0 {
                confidence = 1.0 - model.label_noise_q;
                if rng.gen::<f64>() < model.label_noise_q {
                    let mut alt = FLIP_POOL[rng.gen_range(0..FLIP_POOL.len())];
                    if alt == label {
                        alt = FLIP_POOL[(FLIP_POOL.iter().position(|l| *l == alt).unwrap() + 1)
                            % FLIP_POOL.len()];
                    }
                    label = alt;
                }
            }
            let p = dir_sensor * range;
            points.push(LabeledPoint {
                position: p,
                label,
                confidence,
                time_offset: time,
            });
        }
    }
    Scan::new(points, index)
}

/// Views a fixed world point cloud from `pose`: points within `max_range`
/// expressed in the sensor frame, captured instantaneously (`time_offset`
/// 1, i.e. at sweep end, so deskewing is a no-op). Unlike ray casting this
/// re-observes the same physical points from every pose, which makes
/// point-to-point registration exact and suits tight-tolerance pipeline
/// oracles.
pub fn snapshot_scan(
    world_points: &[LabeledPoint],
    pose: &Pose3,
    max_range: f64,
    index: usize,
) -> Scan {
    let inv = pose.inverse();
    let points = world_points
        .iter()
        .filter_map(|p| {
            let local = inv.transform_point(&p.position);
            (local.norm() <= max_range).then_some(LabeledPoint {
                position: local,
                time_offset: 1.0,
                ..*p
            })
        })
        .collect();
    Scan::new(points, index)
}

/// Square loop of `4 * scans_per_side` poses at sensor height 1.7 m,
/// starting at the origin heading +x. Returns `(true_poses, odometry)`,
/// where odometry composes each true relative motion with `exp(drift)`.
pub fn generate_loop_trajectory(
    side: f64,
    scans_per_side: usize,
    drift: &Twist6,
) -> (Vec<Pose3>, Vec<Pose3>) {
    let z = 1.7;
    let step = side / scans_per_side as f64;
    let n = 4 * scans_per_side;
    let corners = [
        Vector2::new(0.0, 0.0),
        Vector2::new(side, 0.0),
        Vector2::new(side, side),
        Vector2::new(0.0, side),
    ];
    let headings = [0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::PI, -std::f64::consts::FRAC_PI_2];
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let s = i / scans_per_side;
        let j = (i % scans_per_side) as f64;
        let dir = Vector2::new(headings[s].cos(), headings[s].sin());
        let pos = corners[s] + dir * (j * step);
        truth.push(Pose3::new(
            nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), headings[s]),
            Vector3::new(pos.x, pos.y, z),
        ));
    }
    let bias = se3_exp(drift);
    let mut odo = Vec::with_capacity(n);
    odo.push(truth[0]);
    for i in 1..n {
        let rel = truth[i - 1].inverse().compose(&truth[i]);
        let prev = odo[i - 1];
        odo.push(prev.compose(&rel).compose(&bias));
    }
    (truth, odo)
}

/// Emits a KITTI-layout sequence directory from a world and trajectory:
/// `velodyne/{i:06}.bin`, `labels/{i:06}.label`, `poses.txt`, `calib.txt`.
pub fn write_kitti_sequence(
    world: &World,
    poses: &[Pose3],
    model: &ScanModel,
    dir: &Path,
) -> Result<()> {
    let velo = dir.join("velodyne");
    let labels_dir = dir.join("labels");
    std::fs::create_dir_all(&velo)?;
    std::fs::create_dir_all(&labels_dir)?;
    for (i, pose) in poses.iter().enumerate() {
        let scan = simulate_scan(world, pose, model, i);
        let mut bin = Vec::with_capacity(scan.points.len() * 16);
        let mut lab = Vec::with_capacity(scan.points.len() * 4);
        for p in &scan.points {
            bin.extend_from_slice(&(p.position.x as f32).to_le_bytes());
            bin.extend_from_slice(&(p.position.y as f32).to_le_bytes());
            bin.extend_from_slice(&(p.position.z as f32).to_le_bytes());
            bin.extend_from_slice(&1.0f32.to_le_bytes());
            lab.extend_from_slice(&(p.label as u32).to_le_bytes());
        }
        std::fs::write(velo.join(format!("{i:06}.bin")), bin)?;
        std::fs::write(labels_dir.join(format!("{i:06}.label")), lab)?;
    }
    crate::io_kitti::write_poses_kitti(poses, &dir.join("poses.txt"))?;
    let mut calib = std::fs::File::create(dir.join("calib.txt"))?;
    writeln!(calib, "Tr: 1 0 0 0 0 1 0 0 0 0 1 0")?;
    Ok(())
}
