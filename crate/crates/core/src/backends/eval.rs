//! Deterministic geometric task evaluators and the scalar distance scores
//! the sampling-based optimizer needs.
//!
//! Object conventions (documented in the scene schema): for rigid tasks the
//! manipulated object is `rigid_objects[0]` and the stacking target is
//! `rigid_objects[1]`; deformable tasks use `deformable_objects[0]`.

use crate::backends::{BackendError, Evaluator, Verdict, VerdictSource};
use crate::math::Vec3;
use crate::planner::RolloutTrace;
use crate::scene::{SceneDescription, TaskId};
use crate::sim_mpm::squeeze_bbox;
use crate::world::StateSummary;
use std::collections::BTreeMap;

pub const DEFAULT_TILT_THRESHOLD_DEG: f64 = 15.0;
pub const DEFAULT_ALIGN_TOL: f64 = 0.01;
pub const DEFAULT_VERTICAL_TOL_DEG: f64 = 10.0;
pub const DEFAULT_REST_SPEED: f64 = 1e-3;
/// Published success bands: rope opening ratio and dough side ratio.
pub const ROPE_RATIO_MIN: f64 = 0.5;
pub const ROPE_RATIO_MAX: f64 = 2.0;
pub const DOUGH_RATIO_MAX: f64 = 1.5;

fn param(params: &BTreeMap<String, f64>, key: &str) -> Result<f64, BackendError> {
    params
        .get(key)
        .copied()
        .ok_or_else(|| BackendError::MissingCriterionParam(key.to_string()))
}

fn param_or(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn verdict(success: bool, rationale: String) -> Verdict {
    Verdict {
        success,
        rationale,
        source: VerdictSource::Programmatic,
    }
}

/// Longest body-frame bounding-box axis of a mesh (unit vector).
fn long_axis_body(mesh: &crate::mesh::TriMesh) -> Vec3 {
    let bbox = mesh.aabb().expect("mesh has vertices");
    let extent = bbox.max_v() - bbox.min_v();
    if extent.x >= extent.y && extent.x >= extent.z {
        Vec3::x()
    } else if extent.y >= extent.z {
        Vec3::y()
    } else {
        Vec3::z()
    }
}

/// Rope-U opening ratio: distance between the rope endpoints divided by the
/// perpendicular depth from the endpoint chord to the farthest rope point,
/// measured in the table plane.
pub fn rope_opening_ratio(particles: &[Vec3]) -> Option<f64> {
    if particles.len() < 3 {
        return None;
    }
    let a = particles[0];
    let b = particles[particles.len() - 1];
    let chord = Vec3::new(b.x - a.x, b.y - a.y, 0.0);
    let gap = chord.norm();
    let depth = particles
        .iter()
        .map(|p| {
            let rel = Vec3::new(p.x - a.x, p.y - a.y, 0.0);
            if gap < 1e-9 {
                rel.norm()
            } else {
                (rel.x * chord.y - rel.y * chord.x).abs() / gap
            }
        })
        .fold(0.0, f64::max);
    if depth < 1e-9 {
        return None;
    }
    Some(gap / depth)
}

/// Table-1-style deterministic success checks over the final state.
pub fn programmatic_evaluate(
    task_id: TaskId,
    criterion_params: &BTreeMap<String, f64>,
    scene: &SceneDescription,
    final_state: &StateSummary,
) -> Result<Verdict, BackendError> {
    match task_id {
        TaskId::NonTopplingPush => {
            let target_x = param(criterion_params, "target_x")?;
            let tilt_thr = param_or(criterion_params, "tilt_threshold_deg", DEFAULT_TILT_THRESHOLD_DEG);
            let align_tol = param_or(criterion_params, "align_tol", DEFAULT_ALIGN_TOL);
            let body = final_state
                .rigid
                .first()
                .ok_or_else(|| BackendError::Unsupported("no rigid object in state".into()))?;
            let tilt = body.pose.tilt_from_vertical().to_degrees();
            let dx = (body.pose.translation().x - target_x).abs();
            let success = tilt < tilt_thr && dx < align_tol;
            Ok(verdict(
                success,
                format!("tilt {tilt:.2} deg (limit {tilt_thr}), |x - target_x| = {dx:.4} m (limit {align_tol})"),
            ))
        }
        TaskId::BowlStacking => {
            let rim_radius = param(criterion_params, "rim_radius")?;
            let floor_z = param(criterion_params, "floor_z")?;
            let rest_speed = param_or(criterion_params, "rest_speed", DEFAULT_REST_SPEED);
            if final_state.rigid.len() < 2 {
                return Err(BackendError::Unsupported("bowl stacking needs two rigid bodies".into()));
            }
            let upper = &final_state.rigid[0];
            let lower = &final_state.rigid[1];
            let du = upper.pose.translation() - lower.pose.translation();
            let horiz = (du.x * du.x + du.y * du.y).sqrt();
            let speed = Vec3::from(upper.linear_velocity).norm();
            let floor_world = lower.pose.transform_point(&Vec3::new(0.0, 0.0, floor_z)).z;
            let mesh = &scene.rigid_objects[0].mesh;
            let min_z = mesh
                .vertex_iter()
                .map(|v| upper.pose.transform_point(&v).z)
                .fold(f64::INFINITY, f64::min);
            let inside = min_z >= floor_world - 1e-3;
            let success = horiz < rim_radius && speed < rest_speed && inside;
            Ok(verdict(
                success,
                format!(
                    "horizontal offset {horiz:.4} m (rim {rim_radius}), speed {speed:.5} m/s, base z {min_z:.4} vs floor {floor_world:.4}"
                ),
            ))
        }
        TaskId::Pivoting => {
            let tol = param_or(criterion_params, "vertical_tol_deg", DEFAULT_VERTICAL_TOL_DEG);
            let body = final_state
                .rigid
                .first()
                .ok_or_else(|| BackendError::Unsupported("no rigid object in state".into()))?;
            let axis_body = long_axis_body(&scene.rigid_objects[0].mesh);
            let axis_world = body.pose.rotation() * axis_body;
            let angle = axis_world.z.abs().clamp(0.0, 1.0).acos().to_degrees();
            let success = angle < tol;
            Ok(verdict(
                success,
                format!("long-axis angle to vertical {angle:.2} deg (limit {tol})"),
            ))
        }
        TaskId::ShapeRope => {
            let rope = final_state
                .deformable
                .first()
                .ok_or_else(|| BackendError::Unsupported("no deformable object in state".into()))?;
            let particles: Vec<Vec3> = rope.particles.iter().map(|p| Vec3::from(*p)).collect();
            match rope_opening_ratio(&particles) {
                Some(ratio) => {
                    let success = (ROPE_RATIO_MIN..=ROPE_RATIO_MAX).contains(&ratio);
                    Ok(verdict(
                        success,
                        format!("opening ratio {ratio:.3}, success band [{ROPE_RATIO_MIN}, {ROPE_RATIO_MAX}]"),
                    ))
                }
                None => Ok(verdict(false, "rope is degenerate (no U depth)".into())),
            }
        }
        TaskId::ShapeDough => {
            let dough = final_state
                .deformable
                .first()
                .ok_or_else(|| BackendError::Unsupported("no deformable object in state".into()))?;
            let particles: Vec<Vec3> = dough.particles.iter().map(|p| Vec3::from(*p)).collect();
            let (major, minor) = squeeze_bbox(&particles);
            let ratio = major / minor;
            let success = ratio <= DOUGH_RATIO_MAX;
            Ok(verdict(
                success,
                format!("side extents ({major:.4}, {minor:.4}), ratio {ratio:.4} (limit {DOUGH_RATIO_MAX} inclusive)"),
            ))
        }
        TaskId::Custom => Err(BackendError::Unsupported(
            "custom tasks have no programmatic evaluator".into(),
        )),
    }
}

/// Scalar distance-to-goal for a rollout (lower is better). The boolean
/// evaluator stays authoritative; this score only ranks rollouts for the
/// sampling-based optimizer.
pub fn task_score(task: &crate::scene::TaskSpec, scene: &SceneDescription, trace: &RolloutTrace) -> f64 {
    if trace.diverged || trace.failure.is_some() {
        return 1e9;
    }
    let state = &trace.final_state;
    match task.task_id {
        TaskId::NonTopplingPush => {
            let Some(body) = state.rigid.first() else { return 1e9 };
            let target_x = param_or(&task.criterion_params, "target_x", 0.0);
            let thr = param_or(&task.criterion_params, "tilt_threshold_deg", DEFAULT_TILT_THRESHOLD_DEG);
            let tilt = body.pose.tilt_from_vertical().to_degrees();
            let dx = (body.pose.translation().x - target_x).abs();
            dx + if tilt >= thr { 1.0 + tilt / 90.0 } else { 0.0 }
        }
        TaskId::BowlStacking => {
            if state.rigid.len() < 2 {
                return 1e9;
            }
            let upper = &state.rigid[0];
            let lower = &state.rigid[1];
            let du = upper.pose.translation() - lower.pose.translation();
            let horiz = (du.x * du.x + du.y * du.y).sqrt();
            let floor_z = param_or(&task.criterion_params, "floor_z", 0.0);
            let floor_world = lower.pose.transform_point(&Vec3::new(0.0, 0.0, floor_z)).z;
            let min_z = scene.rigid_objects[0]
                .mesh
                .vertex_iter()
                .map(|v| upper.pose.transform_point(&v).z)
                .fold(f64::INFINITY, f64::min);
            horiz + 10.0 * (floor_world - 1e-3 - min_z).max(0.0)
                + Vec3::from(upper.linear_velocity).norm()
        }
        TaskId::Pivoting => {
            let Some(body) = state.rigid.first() else { return 1e9 };
            let axis_body = long_axis_body(&scene.rigid_objects[0].mesh);
            let axis_world = body.pose.rotation() * axis_body;
            axis_world.z.abs().clamp(0.0, 1.0).acos()
        }
        TaskId::ShapeRope => {
            let Some(rope) = state.deformable.first() else { return 1e9 };
            let particles: Vec<Vec3> = rope.particles.iter().map(|p| Vec3::from(*p)).collect();
            match rope_opening_ratio(&particles) {
                Some(ratio) => (ratio - 1.25).abs(),
                None => 10.0,
            }
        }
        TaskId::ShapeDough => {
            let Some(dough) = state.deformable.first() else { return 1e9 };
            let particles: Vec<Vec3> = dough.particles.iter().map(|p| Vec3::from(*p)).collect();
            let (major, minor) = squeeze_bbox(&particles);
            major / minor - 1.0
        }
        TaskId::Custom => 1e9,
    }
}

/// Evaluator backend over [`programmatic_evaluate`].
pub struct ProgrammaticEvaluator;

impl Evaluator for ProgrammaticEvaluator {
    fn evaluate(
        &mut self,
        scene: &SceneDescription,
        trace: &RolloutTrace,
    ) -> Result<Verdict, BackendError> {
        if trace.diverged || trace.failure.is_some() {
            return Ok(Verdict {
                success: false,
                rationale: format!(
                    "rollout failed: {}",
                    trace.failure.as_deref().unwrap_or("numerical divergence")
                ),
                source: VerdictSource::Programmatic,
            });
        }
        programmatic_evaluate(
            scene.task.task_id,
            &scene.task.criterion_params,
            scene,
            &trace.final_state,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{yaw_quat, Pose};
    use crate::world::{DeformableSnapshot, StateSummary};

    fn state_with_dough(particles: Vec<[f64; 3]>) -> StateSummary {
        StateSummary {
            time: 1.0,
            gripper_pose: Pose::identity(),
            gripper_width: 0.1,
            rigid: vec![],
            deformable: vec![DeformableSnapshot {
                name: "dough".into(),
                particles,
            }],
        }
    }

    fn grid_block(ex: f64, ey: f64, n: usize) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..2 {
                    out.push([
                        -ex / 2.0 + ex * i as f64 / (n - 1) as f64,
                        -ey / 2.0 + ey * j as f64 / (n - 1) as f64,
                        0.005 + 0.005 * k as f64,
                    ]);
                }
            }
        }
        out
    }

    fn dough_scene() -> SceneDescription {
        crate::scenes::build_scene(TaskId::ShapeDough)
    }

    #[test]
    fn dough_square_passes_elongated_fails() {
        let scene = dough_scene();
        let square = state_with_dough(grid_block(0.05, 0.05, 9));
        let v = programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &square).unwrap();
        assert!(v.success, "{}", v.rationale);

        let oblong = state_with_dough(grid_block(0.08, 0.05, 9));
        let v = programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &oblong).unwrap();
        assert!(!v.success, "ratio 1.6 must fail: {}", v.rationale);
    }

    #[test]
    fn dough_boundary_ratio_is_inclusive() {
        let scene = dough_scene();
        // Extents (0.075, 0.05): ratio exactly at the published bound.
        let at_bound = state_with_dough(grid_block(0.075, 0.05, 11));
        let v =
            programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &at_bound).unwrap();
        assert!(v.success, "ratio 1.5 is within (inclusive): {}", v.rationale);

        let just_over = state_with_dough(grid_block(0.075 * 1.001, 0.05, 11));
        let v =
            programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &just_over).unwrap();
        assert!(!v.success, "1.5 + eps must fail: {}", v.rationale);
    }

    #[test]
    fn rope_semicircle_hits_inclusive_upper_bound() {
        // Half circle of radius r: endpoints gap 2r, depth r, ratio 2.0.
        let r = 0.1;
        let particles: Vec<Vec3> = (0..=32)
            .map(|i| {
                let t = std::f64::consts::PI * i as f64 / 32.0;
                Vec3::new(r * t.cos(), r * t.sin(), 0.005)
            })
            .collect();
        let ratio = rope_opening_ratio(&particles).unwrap();
        assert!((ratio - 2.0).abs() < 1e-9, "semicircle ratio {ratio}");
        let scene = crate::scenes::build_scene(TaskId::ShapeRope);
        let state = StateSummary {
            time: 1.0,
            gripper_pose: Pose::identity(),
            gripper_width: 0.1,
            rigid: vec![],
            deformable: vec![DeformableSnapshot {
                name: "rope".into(),
                particles: particles.iter().map(|p| [p.x, p.y, p.z]).collect(),
            }],
        };
        let v = programmatic_evaluate(TaskId::ShapeRope, &Default::default(), &scene, &state).unwrap();
        assert!(v.success, "ratio 2.0 inclusive: {}", v.rationale);
    }

    #[test]
    fn straight_rope_fails() {
        let particles: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 0.02, 0.0, 0.005)).collect();
        let scene = crate::scenes::build_scene(TaskId::ShapeRope);
        let state = StateSummary {
            time: 1.0,
            gripper_pose: Pose::identity(),
            gripper_width: 0.1,
            rigid: vec![],
            deformable: vec![DeformableSnapshot {
                name: "rope".into(),
                particles: particles.iter().map(|p| [p.x, p.y, p.z]).collect(),
            }],
        };
        let v = programmatic_evaluate(TaskId::ShapeRope, &Default::default(), &scene, &state).unwrap();
        assert!(!v.success);
    }

    #[test]
    fn push_verdict_checks_tilt_and_alignment() {
        let scene = crate::scenes::build_scene(TaskId::NonTopplingPush);
        let mut state = crate::world::initial_summary(&scene);
        let target_x = scene.task.criterion_params["target_x"];
        // Aligned and upright.
        state.rigid[0].pose = Pose::from_position(Vec3::new(target_x, 0.0, 0.12));
        let v = programmatic_evaluate(
            TaskId::NonTopplingPush,
            &scene.task.criterion_params,
            &scene,
            &state,
        )
        .unwrap();
        assert!(v.success, "{}", v.rationale);
        // Aligned but toppled.
        state.rigid[0].pose = Pose::new(
            Vec3::new(target_x, 0.0, 0.02),
            crate::math::rpy_quat(0.0, std::f64::consts::FRAC_PI_2, 0.0),
        );
        let v = programmatic_evaluate(
            TaskId::NonTopplingPush,
            &scene.task.criterion_params,
            &scene,
            &state,
        )
        .unwrap();
        assert!(!v.success);
    }

    #[test]
    fn missing_required_param_is_typed_error() {
        let scene = crate::scenes::build_scene(TaskId::NonTopplingPush);
        let state = crate::world::initial_summary(&scene);
        let err = programmatic_evaluate(TaskId::NonTopplingPush, &Default::default(), &scene, &state)
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingCriterionParam(k) if k == "target_x"));
    }

    #[test]
    fn evaluation_invariant_to_rigid_translation_and_dough_rotation() {
        let scene = dough_scene();
        let base = state_with_dough(grid_block(0.06, 0.05, 9));
        let v0 = programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &base).unwrap();
        // Translate the whole final state.
        let shifted = state_with_dough(
            base.deformable[0]
                .particles
                .iter()
                .map(|p| [p[0] + 0.05, p[1] - 0.02, p[2]])
                .collect(),
        );
        let v1 = programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &shifted).unwrap();
        assert_eq!(v0.success, v1.success);
        // In-plane rotation.
        let q = yaw_quat(0.9);
        let rotated = state_with_dough(
            base.deformable[0]
                .particles
                .iter()
                .map(|p| {
                    let r = q * Vec3::from(*p);
                    [r.x, r.y, r.z]
                })
                .collect(),
        );
        let v2 = programmatic_evaluate(TaskId::ShapeDough, &Default::default(), &scene, &rotated).unwrap();
        assert_eq!(v0.success, v2.success);
    }
}
