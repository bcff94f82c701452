//! Kinematic gripper model: two finger boxes driven by the commanded
//! end-effector pose and open width. The pose is the tool center point
//! between the fingertips; fingers offset along the gripper's local x-axis.

use crate::hull::ConvexHull;
use crate::math::{Pose, Vec3};
use crate::mesh::box_mesh;
use crate::scene::GripperSpec;

/// Friction coefficient used for finger and table surfaces; contact pairs
/// take the pairwise minimum, so the body's own coefficient governs.
pub const SURFACE_FRICTION: f64 = 1.0;

/// One finger as a kinematic collision body.
#[derive(Debug, Clone)]
pub struct FingerBody {
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub half_extents: Vec3,
}

/// Gripper kinematics shared by all engines.
#[derive(Debug, Clone)]
pub struct GripperKinematics {
    pub finger_half_extents: Vec3,
    pub finger_hull: ConvexHull,
}

impl GripperKinematics {
    pub fn new(spec: &GripperSpec) -> Self {
        let he = spec.finger_half_extents_v();
        GripperKinematics {
            finger_half_extents: he,
            finger_hull: ConvexHull::from_mesh(&box_mesh(he)).expect("finger box hull"),
        }
    }

    /// Finger center in the gripper frame for finger `side` (0 = -x, 1 = +x).
    fn finger_local(&self, width: f64, side: usize) -> Vec3 {
        let sign = if side == 0 { -1.0 } else { 1.0 };
        Vec3::new(sign * (width / 2.0 + self.finger_half_extents.x), 0.0, 0.0)
    }

    pub fn finger_pose(&self, gripper: &Pose, width: f64, side: usize) -> Pose {
        Pose::new(
            gripper.transform_point(&self.finger_local(width, side)),
            gripper.rotation(),
        )
    }

    /// Finger bodies for the current command, with velocities finite-differenced
    /// from the previous command over `dt`.
    pub fn fingers(
        &self,
        prev_pose: &Pose,
        prev_width: f64,
        pose: &Pose,
        width: f64,
        dt: f64,
    ) -> [FingerBody; 2] {
        let omega = angular_velocity_between(prev_pose, pose, dt);
        [0, 1].map(|side| {
            let p_prev = self.finger_pose(prev_pose, prev_width, side);
            let p_cur = self.finger_pose(pose, width, side);
            FingerBody {
                pose: p_cur,
                linear_velocity: (p_cur.translation() - p_prev.translation()) / dt,
                angular_velocity: omega,
                half_extents: self.finger_half_extents,
            }
        })
    }

    /// Axis-aligned box in the gripper frame spanning the gap between the
    /// closed fingers; used by the grasp tests.
    pub fn gap_half_extents(&self, width: f64) -> Vec3 {
        Vec3::new(
            width / 2.0,
            self.finger_half_extents.y,
            self.finger_half_extents.z,
        )
    }
}

/// World-frame angular velocity taking `a` to `b` over `dt`.
pub fn angular_velocity_between(a: &Pose, b: &Pose, dt: f64) -> Vec3 {
    let dq = b.rotation() * a.rotation().inverse();
    match dq.axis_angle() {
        Some((axis, angle)) => axis.into_inner() * (angle / dt),
        None => Vec3::zeros(),
    }
}

/// Velocity of a world point on a rigid frame moving with (v, omega) about
/// `center`.
pub fn point_velocity(v: &Vec3, omega: &Vec3, center: &Vec3, point: &Vec3) -> Vec3 {
    v + omega.cross(&(point - center))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::yaw_quat;
    use crate::scene::ToolKind;

    fn spec() -> GripperSpec {
        GripperSpec {
            pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.2)),
            width: 0.08,
            finger_half_extents: [0.008, 0.012, 0.018],
            tool: ToolKind::ParallelJaw,
        }
    }

    #[test]
    fn fingers_straddle_the_gap() {
        let g = GripperKinematics::new(&spec());
        let pose = Pose::from_position(Vec3::new(0.1, 0.0, 0.2));
        let fingers = g.fingers(&pose, 0.08, &pose, 0.08, 0.002);
        let left = fingers[0].pose.translation();
        let right = fingers[1].pose.translation();
        assert!((right.x - left.x - (0.08 + 2.0 * 0.008)).abs() < 1e-12);
        assert!((left.y - 0.0).abs() < 1e-12);
        assert_eq!(fingers[0].linear_velocity.norm(), 0.0);
    }

    #[test]
    fn closing_width_gives_opposed_finger_velocities() {
        let g = GripperKinematics::new(&spec());
        let pose = Pose::from_position(Vec3::new(0.0, 0.0, 0.2));
        let fingers = g.fingers(&pose, 0.08, &pose, 0.06, 0.002);
        // Each finger moves inward by dwidth/2 over dt.
        assert!((fingers[0].linear_velocity.x - 5.0).abs() < 1e-9);
        assert!((fingers[1].linear_velocity.x + 5.0).abs() < 1e-9);
    }

    #[test]
    fn yaw_motion_produces_angular_velocity() {
        let g = GripperKinematics::new(&spec());
        let a = Pose::new(Vec3::new(0.0, 0.0, 0.2), yaw_quat(0.0));
        let b = Pose::new(Vec3::new(0.0, 0.0, 0.2), yaw_quat(0.01));
        let fingers = g.fingers(&a, 0.08, &b, 0.08, 0.002);
        assert!((fingers[0].angular_velocity.z - 5.0).abs() < 1e-9);
    }
}
