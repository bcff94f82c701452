//! The five shipped benchmark scenes, authored to match the task semantics
//! (not any particular real-world dimensions), plus the per-trial pose
//! jitter used by the benchmark harness.

use crate::math::{rpy_quat, yaw_quat, Aabb, Pose, Quat, Vec3};
use crate::mesh::{box_mesh, TriMesh};
use crate::render::Camera;
use crate::scene::{
    DeformableObjectSpec, EngineKind, GripperSpec, MaterialClass, RigidObjectSpec,
    SceneDescription, TaskId, TaskSpec, ToolKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn all_tasks() -> [TaskId; 5] {
    [
        TaskId::NonTopplingPush,
        TaskId::BowlStacking,
        TaskId::Pivoting,
        TaskId::ShapeRope,
        TaskId::ShapeDough,
    ]
}

/// Extruded prism over a convex 2-D polygon (counter-clockwise), spanning
/// z in [z0, z1].
fn prism_mesh(polygon: &[(f64, f64)], z0: f64, z1: f64) -> TriMesh {
    let n = polygon.len();
    let mut vertices = Vec::with_capacity(2 * n);
    for &(x, y) in polygon {
        vertices.push([x, y, z0]);
    }
    for &(x, y) in polygon {
        vertices.push([x, y, z1]);
    }
    let mut triangles = Vec::new();
    // Bottom cap (faces -z) and top cap (faces +z).
    for i in 1..n - 1 {
        triangles.push([0, i + 1, i]);
        triangles.push([n, n + i, n + i + 1]);
    }
    for i in 0..n {
        let j = (i + 1) % n;
        triangles.push([i, j, n + i]);
        triangles.push([j, n + j, n + i]);
    }
    TriMesh::new(vertices, triangles)
}

fn regular_polygon(radius: f64, sides: usize) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / sides as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

/// Bowl as an authored convex decomposition: an octagonal base plate plus a
/// ring of wall segments. Returns (visual mesh, collision hulls); the body
/// frame origin sits at the base center, z up.
pub fn bowl_meshes(
    outer_r: f64,
    inner_r: f64,
    height: f64,
    base_h: f64,
    segments: usize,
) -> (TriMesh, Vec<TriMesh>) {
    let mut hulls = Vec::new();
    hulls.push(prism_mesh(&regular_polygon(outer_r, 8), 0.0, base_h));
    for i in 0..segments {
        let a0 = 2.0 * std::f64::consts::PI * i as f64 / segments as f64;
        let a1 = 2.0 * std::f64::consts::PI * (i + 1) as f64 / segments as f64;
        let quad = vec![
            (inner_r * a0.cos(), inner_r * a0.sin()),
            (outer_r * a0.cos(), outer_r * a0.sin()),
            (outer_r * a1.cos(), outer_r * a1.sin()),
            (inner_r * a1.cos(), inner_r * a1.sin()),
        ];
        hulls.push(prism_mesh(&quad, base_h, height));
    }
    // Visual mesh: concatenation of the hull meshes, deduplicated so the
    // authored mesh matches what scene ingestion produces.
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for hull in &hulls {
        let offset = vertices.len();
        vertices.extend(hull.vertices.iter().cloned());
        triangles.extend(hull.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
    }
    let visual = TriMesh::new(vertices, triangles).cleaned().expect("bowl mesh");
    let hulls = hulls
        .into_iter()
        .map(|h| h.cleaned().expect("bowl hull"))
        .collect();
    (visual, hulls)
}

fn particle_block(center: Vec3, counts: [usize; 3], spacing: f64) -> Vec<[f64; 3]> {
    let half = Vec3::new(
        counts[0] as f64 * spacing / 2.0,
        counts[1] as f64 * spacing / 2.0,
        counts[2] as f64 * spacing / 2.0,
    );
    let mut out = Vec::with_capacity(counts[0] * counts[1] * counts[2]);
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let p = center - half
                    + Vec3::new(
                        (i as f64 + 0.5) * spacing,
                        (j as f64 + 0.5) * spacing,
                        (k as f64 + 0.5) * spacing,
                    );
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    out
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Build one of the five authored scenes at its nominal (unjittered) layout.
pub fn build_scene(task: TaskId) -> SceneDescription {
    match task {
        TaskId::NonTopplingPush => non_toppling_push(),
        TaskId::BowlStacking => bowl_stacking(),
        TaskId::Pivoting => pivoting(),
        TaskId::ShapeRope => shape_rope(),
        TaskId::ShapeDough => shape_dough(),
        TaskId::Custom => panic!("no shipped scene for custom tasks"),
    }
}

fn non_toppling_push() -> SceneDescription {
    let carton = |name: &str, x: f64, y: f64, color: [u8; 3]| RigidObjectSpec {
        name: name.into(),
        mesh: box_mesh(Vec3::new(0.02, 0.02, 0.12)),
        pose: Pose::from_position(Vec3::new(x, y, 0.12)),
        mass: 0.2,
        friction: 0.5,
        com_offset: [0.0; 3],
        collision_hulls: vec![],
        color,
    };
    SceneDescription {
        gravity: [0.0, 0.0, -9.81],
        table_height: 0.0,
        rigid_objects: vec![
            carton("white_carton", 0.0, 0.0, [245, 245, 238]),
            carton("carton_left", 0.12, 0.13, [226, 224, 210]),
            carton("carton_right", 0.12, -0.13, [226, 224, 210]),
        ],
        deformable_objects: vec![],
        gripper: GripperSpec {
            pose: Pose::from_position(Vec3::new(-0.14, 0.0, 0.15)),
            width: 0.08,
            finger_half_extents: [0.008, 0.015, 0.012],
            tool: ToolKind::ParallelJaw,
        },
        workspace_bounds: Aabb::new(Vec3::new(-0.30, -0.30, -0.005), Vec3::new(0.35, 0.30, 0.45)),
        task: TaskSpec {
            task_id: TaskId::NonTopplingPush,
            instruction: "Push the white carton forward to align horizontally with the others."
                .into(),
            criterion_params: params(&[("target_x", 0.12), ("align_tol", 0.015)]),
        },
        camera: Camera {
            position: [0.30, -0.42, 0.34],
            look_at: [0.04, 0.0, 0.10],
            ..Camera::default()
        },
    }
}

fn bowl_stacking() -> SceneDescription {
    let (pink_mesh, pink_hulls) = bowl_meshes(0.048, 0.037, 0.035, 0.008, 8);
    let (blue_mesh, blue_hulls) = bowl_meshes(0.065, 0.0545, 0.045, 0.008, 8);
    SceneDescription {
        gravity: [0.0, 0.0, -9.81],
        table_height: 0.0,
        rigid_objects: vec![
            RigidObjectSpec {
                name: "pink_bowl".into(),
                mesh: pink_mesh,
                pose: Pose::from_position(Vec3::new(0.15, 0.0, 0.0)),
                mass: 0.12,
                friction: 0.4,
                com_offset: [0.0, 0.0, 0.012],
                collision_hulls: pink_hulls,
                color: [235, 122, 160],
            },
            RigidObjectSpec {
                name: "blue_bowl".into(),
                mesh: blue_mesh,
                pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.0)),
                mass: 0.25,
                friction: 0.5,
                com_offset: [0.0, 0.0, 0.015],
                collision_hulls: blue_hulls,
                color: [72, 110, 220],
            },
        ],
        deformable_objects: vec![],
        gripper: GripperSpec {
            pose: Pose::from_position(Vec3::new(0.0, -0.16, 0.18)),
            width: 0.06,
            finger_half_extents: [0.006, 0.010, 0.018],
            tool: ToolKind::ParallelJaw,
        },
        workspace_bounds: Aabb::new(Vec3::new(-0.28, -0.30, -0.005), Vec3::new(0.35, 0.28, 0.45)),
        task: TaskSpec {
            task_id: TaskId::BowlStacking,
            instruction: "Grasp the pink bowl at its edge and stack it with the blue bowl.".into(),
            criterion_params: params(&[("rim_radius", 0.0545), ("floor_z", 0.008)]),
        },
        camera: Camera {
            position: [0.34, -0.38, 0.30],
            look_at: [0.07, 0.0, 0.04],
            ..Camera::default()
        },
    }
}

/// Crate body with a low step protruding from its -x face; the body frame
/// origin is at the base center of the main crate.
fn crate_step_parts() -> (TriMesh, TriMesh) {
    let mut main = box_mesh(Vec3::new(0.05, 0.08, 0.085));
    for v in &mut main.vertices {
        v[2] += 0.085;
    }
    let mut step = box_mesh(Vec3::new(0.020, 0.08, 0.0075));
    for v in &mut step.vertices {
        v[0] -= 0.05 + 0.020;
        v[2] += 0.0075;
    }
    (main, step)
}

fn crate_with_step_mesh() -> TriMesh {
    let (main, step) = crate_step_parts();
    let mut vertices = main.vertices.clone();
    let offset = vertices.len();
    vertices.extend(step.vertices.iter().cloned());
    let mut triangles = main.triangles.clone();
    triangles.extend(step.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
    TriMesh::new(vertices, triangles).cleaned().expect("crate mesh")
}

fn crate_with_step_hulls() -> Vec<TriMesh> {
    let (main, step) = crate_step_parts();
    vec![main, step]
}

fn pivoting() -> SceneDescription {
    SceneDescription {
        gravity: [0.0, 0.0, -9.81],
        table_height: 0.0,
        rigid_objects: vec![
            RigidObjectSpec {
                name: "red_box".into(),
                // Long axis along body x; lying flat on the table.
                mesh: box_mesh(Vec3::new(0.075, 0.02, 0.02)),
                pose: Pose::from_position(Vec3::new(-0.13, 0.0, 0.02)),
                mass: 0.15,
                friction: 0.6,
                // Contents settled toward the +x end: bottom-heavy once
                // pivoted upright.
                com_offset: [0.05, 0.0, 0.0],
                collision_hulls: vec![],
                color: [222, 48, 48],
            },
            RigidObjectSpec {
                name: "brown_box".into(),
                // Crate with a protruding base step (pallet foot): the step
                // gives a low fulcrum so a pushed box can pivot up against
                // the crate face.
                mesh: crate_with_step_mesh(),
                pose: Pose::from_position(Vec3::new(0.05, 0.0, 0.0)),
                mass: 20.0,
                friction: 0.9,
                com_offset: [0.0, 0.0, 0.085],
                collision_hulls: crate_with_step_hulls(),
                color: [142, 94, 52],
            },
        ],
        deformable_objects: vec![],
        gripper: GripperSpec {
            pose: Pose::from_position(Vec3::new(-0.28, 0.0, 0.10)),
            width: 0.04,
            finger_half_extents: [0.008, 0.035, 0.02],
            tool: ToolKind::ParallelJaw,
        },
        workspace_bounds: Aabb::new(Vec3::new(-0.38, -0.25, -0.005), Vec3::new(0.25, 0.25, 0.40)),
        task: TaskSpec {
            task_id: TaskId::Pivoting,
            instruction: "Make the red box lean vertically against the brown box.".into(),
            criterion_params: params(&[("vertical_tol_deg", 12.0)]),
        },
        camera: Camera {
            position: [-0.02, -0.45, 0.32],
            look_at: [-0.04, 0.0, 0.08],
            ..Camera::default()
        },
    }
}

fn shape_rope() -> SceneDescription {
    let n = 26;
    let spacing = 0.02;
    let particles: Vec<[f64; 3]> = (0..n)
        .map(|i| [-0.15 + i as f64 * spacing, -0.04, 0.0])
        .collect();
    SceneDescription {
        gravity: [0.0, 0.0, -9.81],
        table_height: 0.0,
        rigid_objects: vec![],
        deformable_objects: vec![DeformableObjectSpec {
            name: "rope".into(),
            particles,
            engine: EngineKind::Pd,
            material_class: MaterialClass::Jelly,
            youngs_modulus: 1e6,
            poisson_ratio: 0.3,
            density: 1000.0,
            friction_angle: None,
            yield_stress: None,
            particle_spacing: spacing,
            color: [206, 162, 66],
        }],
        gripper: GripperSpec {
            pose: Pose::from_position(Vec3::new(0.0, 0.18, 0.18)),
            width: 0.05,
            finger_half_extents: [0.006, 0.010, 0.016],
            tool: ToolKind::ParallelJaw,
        },
        workspace_bounds: Aabb::new(Vec3::new(-0.32, -0.30, -0.005), Vec3::new(0.50, 0.32, 0.40)),
        task: TaskSpec {
            task_id: TaskId::ShapeRope,
            instruction: "Grab the free end of the rope and arrange the rope to a U shape.".into(),
            criterion_params: params(&[]),
        },
        camera: Camera {
            position: [0.10, -0.48, 0.40],
            look_at: [0.08, -0.02, 0.02],
            ..Camera::default()
        },
    }
}

fn shape_dough() -> SceneDescription {
    let spacing = 0.01;
    let particles = particle_block(Vec3::new(0.0, 0.0, 0.015), [8, 5, 3], spacing);
    SceneDescription {
        gravity: [0.0, 0.0, -9.81],
        table_height: 0.0,
        rigid_objects: vec![],
        deformable_objects: vec![DeformableObjectSpec {
            name: "dough".into(),
            particles,
            engine: EngineKind::Mpm,
            material_class: MaterialClass::Plasticine,
            youngs_modulus: 1e5,
            poisson_ratio: 0.35,
            density: 1200.0,
            friction_angle: None,
            yield_stress: Some(5e3),
            particle_spacing: spacing,
            color: [96, 200, 124],
        }],
        gripper: GripperSpec {
            pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.10)),
            width: 0.095,
            finger_half_extents: [0.004, 0.045, 0.035],
            tool: ToolKind::FlatPlate,
        },
        workspace_bounds: Aabb::new(Vec3::new(-0.16, -0.16, -0.005), Vec3::new(0.16, 0.16, 0.26)),
        task: TaskSpec {
            task_id: TaskId::ShapeDough,
            instruction: "Squeeze the dough to a square shape with equal sides.".into(),
            criterion_params: params(&[]),
        },
        camera: Camera {
            position: [0.16, -0.30, 0.26],
            look_at: [0.0, 0.0, 0.02],
            ..Camera::default()
        },
    }
}

// ---------------------------------------------------------------------------
// Per-trial jitter
// ---------------------------------------------------------------------------

/// Authored jitter ranges per task: (xy half-range, yaw half-range).
fn jitter_ranges(task: TaskId) -> (f64, f64) {
    match task {
        // The pivot maneuver needs the box roughly facing the support.
        TaskId::Pivoting => (0.015, 6.0_f64.to_radians()),
        TaskId::BowlStacking => (0.02, 15.0_f64.to_radians()),
        _ => (0.03, 15.0_f64.to_radians()),
    }
}

fn rotate_about(p: Vec3, center: Vec3, q: &Quat) -> Vec3 {
    q * (p - center) + center
}

/// The authored scene with the manipulated object's pose jittered by the
/// trial seed: uniform xy offset and yaw within the task's authored ranges.
pub fn perturbed_scene(task: TaskId, seed: u64) -> SceneDescription {
    let mut scene = build_scene(task);
    let (xy, yaw_range) = jitter_ranges(task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(task as u64));
    let dx = rng.gen_range(-xy..=xy);
    let dy = rng.gen_range(-xy..=xy);
    let dyaw = rng.gen_range(-yaw_range..=yaw_range);

    if !scene.rigid_objects.is_empty() {
        let obj = &mut scene.rigid_objects[0];
        let pos = obj.pose.translation() + Vec3::new(dx, dy, 0.0);
        let rot = yaw_quat(dyaw) * obj.pose.rotation();
        obj.pose = Pose::new(pos, rot);
    } else if !scene.deformable_objects.is_empty() {
        let obj = &mut scene.deformable_objects[0];
        let pts = obj.particle_positions();
        let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let q = yaw_quat(dyaw);
        obj.particles = pts
            .iter()
            .map(|p| {
                let r = rotate_about(*p, centroid, &q) + Vec3::new(dx, dy, 0.0);
                [r.x, r.y, r.z]
            })
            .collect();
    }
    scene
}

/// Write all five scenes as canonical JSON files into `dir`.
pub fn write_all(dir: &std::path::Path) -> Result<(), crate::scene::SceneError> {
    std::fs::create_dir_all(dir).map_err(|source| crate::scene::SceneError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for task in all_tasks() {
        let scene = build_scene(task);
        scene.save(&dir.join(format!("{}.json", task.name())))?;
    }
    Ok(())
}

/// Convenience for tests: a yaw-rotated pose.
pub fn posed(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    Pose::new(Vec3::new(x, y, z), rpy_quat(0.0, 0.0, yaw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_scenes_validate() {
        for task in all_tasks() {
            let scene = build_scene(task);
            scene.validate().unwrap_or_else(|e| panic!("{task:?}: {e}"));
        }
    }

    #[test]
    fn scenes_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        write_all(dir.path()).unwrap();
        for task in all_tasks() {
            let path = dir.path().join(format!("{}.json", task.name()));
            let loaded = crate::scene::load_scene(&path).unwrap();
            assert_eq!(loaded, build_scene(task), "round-trip mismatch for {task:?}");
        }
    }

    #[test]
    fn perturbation_is_seeded_and_bounded() {
        for task in all_tasks() {
            let a = perturbed_scene(task, 7);
            let b = perturbed_scene(task, 7);
            assert_eq!(a, b, "same seed must give the same scene");
            let c = perturbed_scene(task, 8);
            assert_ne!(a, c, "different seeds should perturb differently");
            a.validate().unwrap();
            c.validate().unwrap();
        }
    }

    #[test]
    fn bowl_hulls_are_convex_and_cover_the_rim() {
        let (mesh, hulls) = bowl_meshes(0.065, 0.0545, 0.045, 0.008, 8);
        assert_eq!(hulls.len(), 9);
        assert!(mesh.aabb().unwrap().max[2] > 0.044);
        for hull in &hulls {
            crate::hull::ConvexHull::from_mesh(hull).expect("segment must be convex");
        }
    }
}
