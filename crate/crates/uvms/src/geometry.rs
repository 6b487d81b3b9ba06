//! Superellipsoid collision bodies and signed distance to plane obstacles.
//!
//! Every UVMS body carries a superellipsoid hull; obstacles are planes.
//! The closest point on the hull to a plane is the support point in the
//! direction of the inward plane normal, computed in closed form through
//! the dual-norm maximizer of the nested p-norm that defines the surface.

use nalgebra::{Isometry3, Rotation3, Vector3, Vector6};
use thiserror::Error;

use crate::model::{body_twist, forward_kinematics_state, UvmsModel, UvmsState};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("superellipsoid parameter out of range: {0}")]
    InvalidParameter(String),
    #[error("body index {0} out of range")]
    BodyIndexOutOfRange(usize),
}

/// Exponent bounds: keeps the surface convex and the support map stable.
pub const EXPONENT_MIN: f64 = 0.1;
pub const EXPONENT_MAX: f64 = 2.0;

/// Implicit surface
/// `((|x/a|^(2/e1) + |y/b|^(2/e1))^(e1/e2) + |z/c|^(2/e2) = 1`.
#[derive(Debug, Clone)]
pub struct Superellipsoid {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Pose of the superellipsoid frame relative to its parent link frame.
    pub offset: Isometry3<f64>,
}

impl Superellipsoid {
    /// Exponents are clamped into `[0.1, 2.0]`.
    pub fn new(a: f64, b: f64, c: f64, eps1: f64, eps2: f64, offset: Isometry3<f64>) -> Self {
        assert!(a > 0.0 && b > 0.0 && c > 0.0, "semi-axes must be positive");
        Self {
            a,
            b,
            c,
            eps1: eps1.clamp(EXPONENT_MIN, EXPONENT_MAX),
            eps2: eps2.clamp(EXPONENT_MIN, EXPONENT_MAX),
            offset,
        }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::new(radius, radius, radius, 1.0, 1.0, Isometry3::identity())
    }

    pub fn max_semi_axis(&self) -> f64 {
        self.a.max(self.b).max(self.c)
    }

    /// Implicit value `F(p)`: negative inside, zero on the surface,
    /// positive outside. `p` in the superellipsoid's own frame.
    pub fn implicit_value(&self, p: &Vector3<f64>) -> f64 {
        let u = (p.x / self.a).abs().powf(2.0 / self.eps1);
        let v = (p.y / self.b).abs().powf(2.0 / self.eps1);
        let w = (p.z / self.c).abs().powf(2.0 / self.eps2);
        (u + v).powf(self.eps1 / self.eps2) + w - 1.0
    }

    /// Support point: the surface point maximizing `dir . p`, in the
    /// superellipsoid's own frame.
    pub fn support_point(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let p1 = 2.0 / self.eps1;
        let p2 = 2.0 / self.eps2;
        // Inner lp-ball over the scaled (x, y) block.
        let dx = self.a * dir.x;
        let dy = self.b * dir.y;
        let dz = self.c * dir.z;
        let (ux, uy, s) = dual_map_2d(p1, dx, dy);
        let (rho, wz, _) = dual_map_2d(p2, s, dz);
        Vector3::new(self.a * rho * ux, self.b * rho * uy, self.c * wz)
    }

    /// Exact surface point on the ray through `dir` (radial projection);
    /// used by the sampling oracle and for seeding.
    pub fn radial_surface_point(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let g = self.implicit_value(dir) + 1.0;
        dir * g.powf(-self.eps2 / 2.0)
    }
}

/// Maximizer of `x*u + y*v` over the lp unit ball `|u|^p + |v|^p <= 1`
/// (p >= 1), returned with the attained value (the dual-norm of `(x, y)`).
fn dual_map_2d(p: f64, x: f64, y: f64) -> (f64, f64, f64) {
    let ax = x.abs();
    let ay = y.abs();
    let m = ax.max(ay);
    if m < 1e-300 {
        return (0.0, 0.0, 0.0);
    }
    if p <= 1.0 + 1e-12 {
        // l1 ball: vertex solution.
        return if ax >= ay {
            (x.signum(), 0.0, ax)
        } else {
            (0.0, y.signum(), ay)
        };
    }
    let e = 1.0 / (p - 1.0); // q - 1
    let t1 = (ax / m).powf(e);
    let t2 = (ay / m).powf(e);
    let den = (t1.powf(p) + t2.powf(p)).powf(1.0 / p);
    let u = x.signum() * t1 / den;
    let v = y.signum() * t2 / den;
    (u, v, x * u + y * v)
}

/// Plane obstacle `{x : n^T x + D = 0}` with `n` pointing into free space.
#[derive(Debug, Clone)]
pub struct PlaneObstacle {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub friction: f64,
    /// Wall frame: column 1 is `n`, the other two span the plane.
    pub wall_frame: Rotation3<f64>,
}

impl PlaneObstacle {
    pub fn new(normal: Vector3<f64>, offset: f64, friction: f64) -> Self {
        let n = normal.normalize();
        // Fixed orthonormal completion: pick the axis least aligned with n.
        let seed = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
            Vector3::x()
        } else if n.y.abs() <= n.z.abs() {
            Vector3::y()
        } else {
            Vector3::z()
        };
        let t1 = (seed - n * n.dot(&seed)).normalize();
        let t2 = n.cross(&t1);
        let wall_frame = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[n, t1, t2]));
        Self { normal: n, offset, friction: friction.max(0.0), wall_frame }
    }

    /// Signed distance of a point: positive on the free-space side.
    pub fn point_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Closest-pair result for one body against a plane.
#[derive(Debug, Clone)]
pub struct ProximityResult {
    /// Signed distance: sign by the body-center side test.
    pub distance: f64,
    /// Closest point on the body, inertial frame.
    pub body_point: Vector3<f64>,
    /// Its projection on the plane, inertial frame.
    pub plane_point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Signed distance between a posed superellipsoid and a plane.
pub fn distance_to_plane(
    se: &Superellipsoid,
    body_pose: &Isometry3<f64>,
    plane: &PlaneObstacle,
) -> ProximityResult {
    let pose = body_pose * se.offset;
    let dir_local = pose.rotation.inverse() * (-plane.normal);
    let support_local = se.support_point(&dir_local);
    let x1 = pose * nalgebra::Point3::from(support_local);
    let x1 = x1.coords;
    // Signed plane distance of the support point. This equals the
    // two-case center-side distance in both the separated and the
    // shallow-contact regime, and stays negative (continuously) once the
    // body crosses the plane.
    let s = plane.point_distance(&x1);
    let x2 = x1 - plane.normal * s;
    ProximityResult { distance: s, body_point: x1, plane_point: x2, normal: plane.normal }
}

/// Distance of collision body `j` (0 = hull) at state `h`.
pub fn body_distance(
    model: &UvmsModel,
    h: &UvmsState,
    j: usize,
    plane: &PlaneObstacle,
) -> Result<ProximityResult, GeometryError> {
    if j >= model.n_bodies() {
        return Err(GeometryError::BodyIndexOutOfRange(j));
    }
    let kin = forward_kinematics_state(model, h);
    let se = if j == 0 { &model.vehicle_collision } else { &model.links[j - 1].collision };
    Ok(distance_to_plane(se, kin.body_pose(j), plane))
}

/// Closing speed of body `j` toward the plane: the plane-normal component
/// of the inertial velocity of the material point at the closest point
/// (frozen to the body). Positive = separating.
pub fn closing_speed(
    model: &UvmsModel,
    h: &UvmsState,
    j: usize,
    plane: &PlaneObstacle,
) -> Result<f64, GeometryError> {
    let prox = body_distance(model, h, j, plane)?;
    Ok(material_point_speed(model, h, j, &prox.body_point, plane))
}

/// Inertial velocity of the body-`j` material point currently at the
/// inertial position `point`.
pub fn body_point_velocity(
    model: &UvmsModel,
    h: &UvmsState,
    j: usize,
    point: &Vector3<f64>,
) -> Vector3<f64> {
    let kin = forward_kinematics_state(model, h);
    let pose = kin.body_pose(j);
    let twist: Vector6<f64> = body_twist(model, h, j);
    let v_b = twist.fixed_rows::<3>(0).into_owned();
    let w_b = twist.fixed_rows::<3>(3).into_owned();
    let r = pose.rotation.inverse() * (point - pose.translation.vector);
    pose.rotation * (v_b + w_b.cross(&r))
}

fn material_point_speed(
    model: &UvmsModel,
    h: &UvmsState,
    j: usize,
    point: &Vector3<f64>,
    plane: &PlaneObstacle,
) -> f64 {
    plane.normal.dot(&body_point_velocity(model, h, j, point))
}

/// `(d_j, d_dot_j)` for every body `j = 0..N_l`.
pub fn all_body_distances(
    model: &UvmsModel,
    h: &UvmsState,
    plane: &PlaneObstacle,
) -> Result<Vec<(f64, f64)>, GeometryError> {
    (0..model.n_bodies())
        .map(|j| {
            let prox = body_distance(model, h, j, plane)?;
            let dd = material_point_speed(model, h, j, &prox.body_point, plane);
            Ok((prox.distance, dd))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{integrate_step, ControlInput, UvmsModel};
    use approx::assert_relative_eq;
    use nalgebra::{DVector, UnitQuaternion, UnitVector3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn implicit_value_basics() {
        let se = Superellipsoid::new(0.8, 0.5, 0.3, 0.7, 1.3, Isometry3::identity());
        assert_relative_eq!(se.implicit_value(&Vector3::zeros()), -1.0, epsilon = 1e-12);
        assert!(se.implicit_value(&Vector3::new(0.8, 0.0, 0.0)).abs() < 1e-12);
        assert!(se.implicit_value(&Vector3::new(0.0, 0.5, 0.0)).abs() < 1e-12);
        assert!(se.implicit_value(&Vector3::new(0.0, 0.0, 0.3)).abs() < 1e-12);
        let sphere = Superellipsoid::sphere(1.0);
        assert_relative_eq!(
            sphere.implicit_value(&Vector3::new(2.0, 0.0, 0.0)),
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sphere_distance_analytic() {
        let sphere = Superellipsoid::sphere(0.5);
        // Plane z = 0 with n = +z, body centered at z = 2.
        let plane = PlaneObstacle::new(Vector3::z(), 0.0, 0.3);
        let pose = Isometry3::translation(0.0, 0.0, 2.0);
        let prox = distance_to_plane(&sphere, &pose, &plane);
        assert_relative_eq!(prox.distance, 1.5, epsilon = 1e-9);
        assert_relative_eq!(prox.body_point, Vector3::new(0.0, 0.0, 1.5), epsilon = 1e-9);
        assert_relative_eq!(prox.plane_point, Vector3::new(0.0, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn ellipsoid_axis_aligned_tangency() {
        let se = Superellipsoid::new(1.0, 1.0, 0.5, 1.0, 1.0, Isometry3::identity());
        // Plane z = 2 with n = (0,0,-1): free space below.
        let plane = PlaneObstacle::new(Vector3::new(0.0, 0.0, -1.0), 2.0, 0.3);
        let pose = Isometry3::identity();
        let prox = distance_to_plane(&se, &pose, &plane);
        assert_relative_eq!(prox.distance, 1.5, epsilon = 1e-9);
        assert_relative_eq!(prox.body_point, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-9);
    }

    #[test]
    fn sign_flips_across_plane() {
        let sphere = Superellipsoid::sphere(0.2);
        let plane = PlaneObstacle::new(Vector3::z(), 0.0, 0.3);
        for z in [-1.0, -0.5, 0.1, 0.5, 1.0] {
            let pose = Isometry3::translation(0.3, -0.2, z);
            let prox = distance_to_plane(&sphere, &pose, &plane);
            assert_relative_eq!(prox.distance, z - 0.2, epsilon = 1e-9);
            assert_eq!(prox.distance > 0.0, z > 0.2);
        }
    }

    fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
        let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = 2.0 * std::f64::consts::PI * (i as f64) / golden;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect()
    }

    /// Brute-force oracle: min plane distance over surface samples. Half
    /// the budget scans the whole surface, the other half resamples the
    /// spherical cap around the best coarse direction so the minimum is
    /// resolved even on high-curvature edges.
    fn sampled_distance(
        se: &Superellipsoid,
        pose: &Isometry3<f64>,
        plane: &PlaneObstacle,
        n: usize,
    ) -> f64 {
        let total = pose * se.offset;
        let eval = |dir: &Vector3<f64>| {
            let p_local = se.radial_surface_point(dir);
            let p = total * nalgebra::Point3::from(p_local);
            plane.point_distance(&p.coords)
        };
        let stages = 4;
        let m = n / stages;
        let mut best = f64::INFINITY;
        let mut best_dir = Vector3::x();
        for dir in fibonacci_directions(m) {
            let d = eval(&dir);
            if d < best {
                best = d;
                best_dir = dir;
            }
        }
        // Zoom stages: resample a shrinking cap around the running argmin.
        let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let mut cap = 16.0 * (4.0 * std::f64::consts::PI / m as f64).sqrt();
        for _ in 1..stages {
            let center = best_dir;
            let u = if center.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let t1 = (u - center * center.dot(&u)).normalize();
            let t2 = center.cross(&t1);
            for i in 0..m {
                let r = cap * ((i as f64 + 0.5) / m as f64).sqrt();
                let phi = 2.0 * std::f64::consts::PI * (i as f64) / golden;
                let dir =
                    (center + (t1 * phi.cos() + t2 * phi.sin()) * r.tan()).normalize();
                let d = eval(&dir);
                if d < best {
                    best = d;
                    best_dir = dir;
                }
            }
            cap *= 16.0 * 2.0 / (m as f64).sqrt();
        }
        best
    }

    #[test]
    fn support_point_on_surface_and_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let se = Superellipsoid::new(
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                Isometry3::identity(),
            );
            let dir = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let s = se.support_point(&dir);
            assert!(se.implicit_value(&s).abs() < 1e-9, "support not on surface");
            // No radial sample beats the support value.
            for d2 in fibonacci_directions(500) {
                let p = se.radial_surface_point(&d2);
                assert!(dir.dot(&p) <= dir.dot(&s) + 1e-9);
            }
        }
    }

    #[test]
    fn distance_matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..40 {
            let se = Superellipsoid::new(
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.2..0.9),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                Isometry3::identity(),
            );
            let pose = Isometry3::from_parts(
                nalgebra::Translation3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(1.5..3.0),
                ),
                UnitQuaternion::from_axis_angle(
                    &UnitVector3::new_normalize(Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))),
                    rng.gen_range(0.0..3.0),
                ),
            );
            let plane = PlaneObstacle::new(Vector3::z(), 0.0, 0.3);
            let prox = distance_to_plane(&se, &pose, &plane);
            let oracle = sampled_distance(&se, &pose, &plane, 20_000);
            let tol = 2e-3 * se.max_semi_axis();
            assert!(
                (prox.distance - oracle).abs() <= tol,
                "distance {} vs sampled {}",
                prox.distance,
                oracle
            );
            // Closest-pair invariants.
            assert!(plane.point_distance(&prox.plane_point).abs() < 1e-9);
            let gap = prox.body_point - prox.plane_point;
            assert!(gap.cross(&plane.normal).norm() <= 1e-6 * gap.norm().max(1.0));
        }
    }

    #[test]
    fn distance_continuity_in_pose() {
        let se = Superellipsoid::new(0.6, 0.4, 0.3, 0.4, 1.6, Isometry3::identity());
        let plane = PlaneObstacle::new(Vector3::z(), 0.0, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let pose = Isometry3::from_parts(
                nalgebra::Translation3::new(0.0, 0.0, rng.gen_range(0.5..2.0)),
                UnitQuaternion::from_axis_angle(
                    &UnitVector3::new_normalize(Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))),
                    rng.gen_range(0.0..3.0),
                ),
            );
            let d0 = distance_to_plane(&se, &pose, &plane).distance;
            let nudged = Isometry3::from_parts(
                nalgebra::Translation3::new(1e-6, -1e-6, pose.translation.z + 1e-6),
                pose.rotation,
            );
            let d1 = distance_to_plane(&se, &nudged, &plane).distance;
            assert!((d1 - d0).abs() <= 1e-4, "discontinuous distance");
        }
    }

    #[test]
    fn closing_speed_trivial_cases() {
        let model = UvmsModel::default_article();
        let plane = PlaneObstacle::new(Vector3::new(-1.0, 0.0, 0.0), 3.0, 0.5);
        let h = UvmsState::zero(3);
        for j in 0..model.n_bodies() {
            assert!(closing_speed(&model, &h, j, &plane).unwrap().abs() < 1e-12);
        }
        // Vehicle translating along +n at 1 m/s, arm frozen.
        let mut hm = UvmsState::zero(3);
        hm.linear_velocity = Vector3::new(-1.0, 0.0, 0.0); // body x == inertial x here
        for j in 0..model.n_bodies() {
            assert_relative_eq!(closing_speed(&model, &hm, j, &plane).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn closing_speed_matches_integrator_fd() {
        let model = UvmsModel::default_article();
        let plane = PlaneObstacle::new(Vector3::new(-1.0, 0.15, 0.1), 3.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let u = ControlInput::zero(3);
        let f0 = DVector::zeros(model.n_dof());
        for _ in 0..25 {
            let mut h = UvmsState::zero(3);
            h.position = Vector3::new(rng.gen_range(-0.5..0.8), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            h.orientation = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5));
            h.joint_angles = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            h.linear_velocity = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            h.angular_velocity = Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
            h.joint_rates = DVector::from_fn(3, |_, _| rng.gen_range(-0.4..0.4));
            let dt = 1e-5;
            let hp = integrate_step(&model, &h, &u, &f0, dt).unwrap();
            let mut hm = h.clone();
            hm.linear_velocity = -hm.linear_velocity;
            hm.angular_velocity = -hm.angular_velocity;
            hm.joint_rates = -hm.joint_rates.clone();
            let hm = integrate_step(&model, &hm, &u, &f0, dt).unwrap();
            for j in 0..model.n_bodies() {
                let dd = closing_speed(&model, &h, j, &plane).unwrap();
                let dp = body_distance(&model, &hp, j, &plane).unwrap().distance;
                let dm = body_distance(&model, &hm, j, &plane).unwrap().distance;
                let fd = (dp - dm) / (2.0 * dt);
                assert!((dd - fd).abs() <= 1e-3, "body {j}: {dd} vs fd {fd}");
            }
        }
    }

    #[test]
    fn all_body_distances_composition() {
        let model = UvmsModel::default_article();
        let plane = PlaneObstacle::new(Vector3::new(-1.0, 0.0, 0.0), 3.0, 0.5);
        let mut h = UvmsState::zero(3);
        h.linear_velocity = Vector3::new(0.4, 0.0, 0.0);
        let all = all_body_distances(&model, &h, &plane).unwrap();
        assert_eq!(all.len(), model.n_bodies());
        for (j, (d, dd)) in all.iter().enumerate() {
            assert!(*d > 0.0, "far-field body {j} must have positive distance");
            let prox = body_distance(&model, &h, j, &plane).unwrap();
            assert_relative_eq!(*d, prox.distance, epsilon = 1e-12);
            assert_relative_eq!(*dd, closing_speed(&model, &h, j, &plane).unwrap(), epsilon = 1e-12);
        }
    }
}
