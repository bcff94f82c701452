//! Small math helpers shared by the simulation engines: poses, axis-aligned
//! boxes, and a fast 3x3 SVD used by the constitutive models.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Rigid transform: position plus unit quaternion orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    /// Unit quaternion, (w, x, y, z) order.
    pub orientation: [f64; 4],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn new(position: Vec3, orientation: Quat) -> Self {
        let q = orientation.into_inner();
        Pose {
            position: [position.x, position.y, position.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
    }

    pub fn from_position(position: Vec3) -> Self {
        Pose::new(position, Quat::identity())
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.position[0], self.position[1], self.position[2])
    }

    pub fn rotation(&self) -> Quat {
        let [w, x, y, z] = self.orientation;
        Quat::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }

    /// Transform a body-frame point into the world frame.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    /// Inverse transform: world-frame point into the body frame.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation().inverse() * (p - self.translation())
    }

    /// Compose with another pose applied in this pose's frame.
    pub fn compose(&self, local: &Pose) -> Pose {
        Pose::new(
            self.transform_point(&local.translation()),
            self.rotation() * local.rotation(),
        )
    }

    /// Quaternion norm error; construction keeps this within 1e-6.
    pub fn orientation_norm_error(&self) -> f64 {
        let [w, x, y, z] = self.orientation;
        ((w * w + x * x + y * y + z * z).sqrt() - 1.0).abs()
    }

    /// Renormalize the stored quaternion in place.
    pub fn renormalize(&mut self) {
        let q = self.rotation();
        let q = q.into_inner();
        self.orientation = [q.w, q.i, q.j, q.k];
    }

    /// Angle in radians between the body z-axis and the world z-axis.
    pub fn tilt_from_vertical(&self) -> f64 {
        let up = self.rotation() * Vec3::z();
        up.z.clamp(-1.0, 1.0).acos()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.orientation.iter().all(|v| v.is_finite())
    }
}

/// Yaw rotation about the world z-axis.
pub fn yaw_quat(yaw: f64) -> Quat {
    Quat::from_axis_angle(&Vector3::z_axis(), yaw)
}

/// Quaternion from roll/pitch/yaw in radians (XYZ convention).
pub fn rpy_quat(roll: f64, pitch: f64, yaw: f64) -> Quat {
    Quat::from_euler_angles(roll, pitch, yaw)
}

/// Axis-aligned box, used for workspace bounds and broad-phase culling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb {
            min: [min.x, min.y, min.z],
            max: [max.x, max.y, max.z],
        }
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::new(self.min[0], self.min[1], self.min[2])
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::new(self.max[0], self.max[1], self.max[2])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && self.max[i] >= other.min[i])
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut iter = points.into_iter();
        let first = iter.next()?;
        let mut min = *first;
        let mut max = *first;
        for p in iter {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Aabb::new(min, max))
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_v() - self.min_v()).norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min_v() + self.max_v()) * 0.5
    }

    pub fn grown(&self, margin: f64) -> Aabb {
        Aabb::new(
            self.min_v() - Vec3::repeat(margin),
            self.max_v() + Vec3::repeat(margin),
        )
    }
}

/// SVD of a 3x3 matrix with proper rotations: `a = u * diag(sigma) * v^T`,
/// det(u) = det(v) = +1. Negative determinants are absorbed into the last
/// singular value, so `sigma[2]` may be negative for inverted inputs.
///
/// Built on a Jacobi eigensolver of `a^T a`; much faster than the general
/// iterative SVD and accurate enough for constitutive updates.
pub fn svd3(a: &Mat3) -> (Mat3, Vec3, Mat3) {
    let ata = a.transpose() * a;
    let (mut eigvals, mut v) = sym_eigen3(&ata);

    // Sort descending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap());
    let sorted_vals = Vec3::new(eigvals[order[0]], eigvals[order[1]], eigvals[order[2]]);
    let sorted_v = Mat3::from_columns(&[
        v.column(order[0]).into_owned(),
        v.column(order[1]).into_owned(),
        v.column(order[2]).into_owned(),
    ]);
    eigvals = sorted_vals;
    v = sorted_v;

    if v.determinant() < 0.0 {
        v.set_column(2, &(-v.column(2)));
    }

    let mut sigma = Vec3::new(
        eigvals.x.max(0.0).sqrt(),
        eigvals.y.max(0.0).sqrt(),
        eigvals.z.max(0.0).sqrt(),
    );

    // u = a v sigma^-1, with Gram-Schmidt fallback for tiny singular values.
    let mut u = Mat3::zeros();
    let tol = 1e-12 * sigma.x.max(1e-30);
    for c in 0..3 {
        let col = a * v.column(c);
        if sigma[c] > tol {
            u.set_column(c, &(col / sigma[c]));
        } else {
            // Complete to an orthonormal basis.
            let a0 = u.column(0).into_owned();
            let a1 = u.column(1).into_owned();
            let filler = if c == 2 {
                a0.cross(&a1)
            } else if c == 1 {
                orthogonal_to(&a0)
            } else {
                Vec3::x()
            };
            let n = filler.norm();
            u.set_column(c, &(filler / n.max(1e-30)));
        }
    }
    // Re-orthonormalize u (cheap Gram-Schmidt pass).
    let u0 = u.column(0).normalize();
    let mut u1 = u.column(1).into_owned();
    u1 -= u0 * u0.dot(&u1);
    let u1 = u1.normalize();
    let u2 = u0.cross(&u1);
    u = Mat3::from_columns(&[u0, u1, u2]);

    if (a * v.column(2)).dot(&u.column(2)) < 0.0 {
        sigma.z = -sigma.z;
    }

    (u, sigma, v)
}

/// Polar decomposition rotation factor of `a` (proper rotation closest to `a`).
pub fn polar_rotation(a: &Mat3) -> Mat3 {
    let (u, _, v) = svd3(a);
    u * v.transpose()
}

fn orthogonal_to(v: &Vec3) -> Vec3 {
    if v.x.abs() < 0.9 {
        v.cross(&Vec3::x())
    } else {
        v.cross(&Vec3::y())
    }
}

/// Eigendecomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, column eigenvectors), unsorted.
fn sym_eigen3(m: &Mat3) -> (Vec3, Mat3) {
    let mut a = *m;
    let mut v = Mat3::identity();
    for _ in 0..16 {
        let off = a[(0, 1)].abs() + a[(0, 2)].abs() + a[(1, 2)].abs();
        if off < 1e-14 * (a[(0, 0)].abs() + a[(1, 1)].abs() + a[(2, 2)].abs() + 1e-300) {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq.abs() < 1e-300 {
                continue;
            }
            let app = a[(p, p)];
            let aqq = a[(q, q)];
            let tau = (aqq - app) / (2.0 * apq);
            let t = if tau >= 0.0 {
                1.0 / (tau + (1.0 + tau * tau).sqrt())
            } else {
                -1.0 / (-tau + (1.0 + tau * tau).sqrt())
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            let mut rot = Mat3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            v *= rot;
        }
    }
    (Vec3::new(a[(0, 0)], a[(1, 1)], a[(2, 2)]), v)
}

/// Deterministic voxel-grid downsample: points bucketed at `pitch`, one
/// centroid per occupied voxel, output ordered by voxel key.
pub fn voxel_downsample(points: &[Vec3], pitch: f64) -> Vec<Vec3> {
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / pitch).floor() as i64,
            (p.y / pitch).floor() as i64,
            (p.z / pitch).floor() as i64,
        );
        let entry = cells.entry(key).or_insert((Vec3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    cells
        .values()
        .map(|(sum, n)| sum / *n as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_mat3(rng: &mut impl Rng) -> Mat3 {
        Mat3::from_fn(|_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn svd3_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let a = random_mat3(&mut rng);
            let (u, s, v) = svd3(&a);
            let rec = u * Mat3::from_diagonal(&s) * v.transpose();
            assert!((rec - a).norm() < 1e-8, "reconstruction error {}", (rec - a).norm());
            assert!((u.determinant() - 1.0).abs() < 1e-8);
            assert!((v.determinant() - 1.0).abs() < 1e-8);
            assert!((u.transpose() * u - Mat3::identity()).norm() < 1e-8);
        }
    }

    #[test]
    fn polar_of_rotation_is_identity_map() {
        let rot = Rotation3::from_euler_angles(0.3, -0.7, 1.2);
        let r = polar_rotation(&rot.into_inner());
        assert!((r - rot.into_inner()).norm() < 1e-9);
    }

    #[test]
    fn pose_compose_and_invert() {
        let p = Pose::new(Vec3::new(1.0, 2.0, 3.0), yaw_quat(0.7));
        let world = p.transform_point(&Vec3::new(0.1, 0.0, 0.0));
        let back = p.inverse_transform_point(&world);
        assert!((back - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
        assert!(p.orientation_norm_error() < 1e-6);
    }

    #[test]
    fn voxel_downsample_merges_nearby_points() {
        let pts = vec![
            Vec3::new(0.001, 0.001, 0.0),
            Vec3::new(0.003, 0.002, 0.0),
            Vec3::new(0.051, 0.0, 0.0),
        ];
        let out = voxel_downsample(&pts, 0.02);
        assert_eq!(out.len(), 2);
    }
}
