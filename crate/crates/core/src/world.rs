//! Combined simulator: one world owns the rigid solver plus per-object PD
//! and MPM solvers, advances them on a shared 2 ms control clock, and
//! manages grasp attachments. Deformables interact with the table and
//! gripper only; rigid bodies also contact each other.

use crate::actions::GripperCommand;
use crate::gripper::{angular_velocity_between, GripperKinematics};
use crate::hull::ConvexHull;
use crate::math::{Pose, Vec3};
use crate::scene::{EngineKind, SceneDescription};
use crate::sim_mpm::{MPMGrid, MPMState, MpmError, MpmSolver};
use crate::sim_pd::{grasp_test, PDState, PdError, PdGripperCommand, PdSolver, GRASP_ATTACH_WIDTH};
use crate::sim_rigid::{KinematicDrive, RigidBodyParams, RigidError, RigidSim, RigidState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physics/control step, seconds (500 Hz command stream).
pub const CONTROL_DT: f64 = 0.002;
pub const CONTROL_RATE: f64 = 1.0 / CONTROL_DT;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Rigid(#[from] RigidError),
    #[error(transparent)]
    Pd(#[from] PdError),
    #[error(transparent)]
    Mpm(#[from] MpmError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

impl WorldError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            WorldError::Rigid(RigidError::NumericalDivergence(_))
                | WorldError::Pd(PdError::NumericalDivergence)
                | WorldError::Mpm(MpmError::NumericalDivergence(_))
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidSnapshot {
    pub name: String,
    pub pose: Pose,
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableSnapshot {
    pub name: String,
    pub particles: Vec<[f64; 3]>,
}

/// Full dynamic-state summary at one instant: the per-primitive record the
/// planner persists and the renderer consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub time: f64,
    pub gripper_pose: Pose,
    pub gripper_width: f64,
    pub rigid: Vec<RigidSnapshot>,
    pub deformable: Vec<DeformableSnapshot>,
}

/// State summary at t=0 straight from the scene description, without
/// building a world (objects at authored poses, everything at rest).
pub fn initial_summary(scene: &SceneDescription) -> StateSummary {
    StateSummary {
        time: 0.0,
        gripper_pose: scene.gripper.pose,
        gripper_width: scene.gripper.width,
        rigid: scene
            .rigid_objects
            .iter()
            .map(|o| RigidSnapshot {
                name: o.name.clone(),
                pose: o.pose,
                linear_velocity: [0.0; 3],
                angular_velocity: [0.0; 3],
            })
            .collect(),
        deformable: scene
            .deformable_objects
            .iter()
            .map(|o| DeformableSnapshot {
                name: o.name.clone(),
                particles: o.particles.clone(),
            })
            .collect(),
    }
}

enum DeformableSim {
    Pd { solver: PdSolver, state: PDState },
    Mpm {
        solver: MpmSolver,
        state: MPMState,
        grid: MPMGrid,
    },
}

pub struct World {
    pub scene: SceneDescription,
    rigid_sim: RigidSim,
    rigid_states: Vec<RigidState>,
    deformables: Vec<(String, DeformableSim)>,
    gripper: GripperKinematics,
    gripper_pose: Pose,
    gripper_width: f64,
    /// Rigid bodies welded to the gripper: (body index, gripper-local pose).
    welds: Vec<(usize, Pose)>,
    time: f64,
}

impl World {
    pub fn new(scene: &SceneDescription) -> Result<World, WorldError> {
        scene.validate()?;
        let gravity = scene.gravity_v();

        let mut rigid_params = Vec::new();
        let mut rigid_states = Vec::new();
        for obj in &scene.rigid_objects {
            rigid_params.push(RigidBodyParams::new(
                obj.name.clone(),
                &obj.mesh,
                &obj.collision_hulls,
                obj.mass,
                obj.friction,
                Vec3::from(obj.com_offset),
            )?);
            rigid_states.push(RigidState::at_rest(obj.pose));
        }

        let mut deformables = Vec::new();
        for obj in &scene.deformable_objects {
            let sim = match obj.engine {
                EngineKind::Pd => DeformableSim::Pd {
                    solver: PdSolver::from_spec(obj, gravity, scene.table_height)?,
                    state: PDState::at_rest(obj.particle_positions()),
                },
                EngineKind::Mpm => {
                    let solver = MpmSolver::from_spec(obj, gravity, scene.table_height)?;
                    let grid = MPMGrid::new(
                        &scene.workspace_bounds,
                        2.0 * obj.particle_spacing,
                        obj.particle_spacing,
                        scene.table_height,
                    )?;
                    DeformableSim::Mpm {
                        solver,
                        state: MPMState::at_rest(obj.particle_positions()),
                        grid,
                    }
                }
            };
            deformables.push((obj.name.clone(), sim));
        }

        Ok(World {
            scene: scene.clone(),
            rigid_sim: RigidSim::new(rigid_params, gravity, scene.table_height),
            rigid_states,
            deformables,
            gripper: GripperKinematics::new(&scene.gripper),
            gripper_pose: scene.gripper.pose,
            gripper_width: scene.gripper.width,
            welds: Vec::new(),
            time: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn gripper_pose(&self) -> Pose {
        self.gripper_pose
    }

    pub fn gripper_width(&self) -> f64 {
        self.gripper_width
    }

    /// Advance one control tick toward `command`.
    pub fn step(&mut self, command: &GripperCommand) -> Result<(), WorldError> {
        let prev_pose = self.gripper_pose;
        let prev_width = self.gripper_width;
        let fingers = self
            .gripper
            .fingers(&prev_pose, prev_width, &command.pose, command.width, CONTROL_DT);

        // Grasp transitions on the threshold crossing.
        if prev_width >= GRASP_ATTACH_WIDTH && command.width < GRASP_ATTACH_WIDTH {
            self.attach_grasp(&command.pose, command.width);
        } else if prev_width < GRASP_ATTACH_WIDTH && command.width >= GRASP_ATTACH_WIDTH {
            self.release_grasp();
        }

        // Rigid bodies (welded ones follow the gripper kinematically).
        let mut drives: Vec<Option<KinematicDrive>> = vec![None; self.rigid_states.len()];
        let omega = angular_velocity_between(&prev_pose, &command.pose, CONTROL_DT);
        for (body, local) in &self.welds {
            let pose_next = command.pose.compose(local);
            let pose_prev = prev_pose.compose(local);
            drives[*body] = Some(KinematicDrive {
                pose: pose_next,
                linear_velocity: (pose_next.translation() - pose_prev.translation()) / CONTROL_DT,
                angular_velocity: omega,
            });
        }
        self.rigid_sim
            .step(&mut self.rigid_states, &drives, &fingers, CONTROL_DT)?;

        // Deformables.
        for (_, sim) in self.deformables.iter_mut() {
            match sim {
                DeformableSim::Pd { solver, state } => {
                    let cmd = PdGripperCommand {
                        pose: command.pose,
                        width: command.width,
                    };
                    solver.step(state, Some(&cmd), CONTROL_DT)?;
                }
                DeformableSim::Mpm { solver, state, grid } => {
                    let n = solver.substeps_per_tick;
                    let dt = CONTROL_DT / n as f64;
                    for _ in 0..n {
                        solver.substep(state, grid, &fingers, dt)?;
                    }
                }
            }
        }

        self.gripper_pose = command.pose;
        self.gripper_width = command.width;
        self.time += CONTROL_DT;
        Ok(())
    }

    /// Closing below the grasp threshold: capture PD particles inside the
    /// finger gap and weld any rigid body overlapping it.
    fn attach_grasp(&mut self, pose: &Pose, width: f64) {
        for (_, sim) in self.deformables.iter_mut() {
            if let DeformableSim::Pd { solver, state } = sim {
                let _ = solver;
                let spacing = (state.positions.len() > 1)
                    .then(|| (state.position(1) - state.position(0)).norm())
                    .unwrap_or(0.01);
                let indices = grasp_test(state, &self.gripper, pose, width, spacing);
                state.attached = indices
                    .into_iter()
                    .map(|i| {
                        let local = pose.inverse_transform_point(&state.position(i));
                        (i, [local.x, local.y, local.z])
                    })
                    .collect();
            }
        }

        // Rigid weld: any body whose hull overlaps the gap volume.
        let gap_he = self.gripper.gap_half_extents(width.max(1e-3)) + Vec3::repeat(2e-3);
        let gap_hull = ConvexHull::from_mesh(&crate::mesh::box_mesh(gap_he)).expect("gap hull");
        for (i, (state, params)) in self
            .rigid_states
            .iter()
            .zip(&self.rigid_sim.bodies)
            .enumerate()
        {
            if self.welds.iter().any(|(b, _)| *b == i) {
                continue;
            }
            let overlap = crate::sim_rigid::detect_contacts(
                &[
                    crate::sim_rigid::BodyCollision {
                        id: crate::sim_rigid::ContactBody::Body(0),
                        hulls: std::slice::from_ref(&gap_hull),
                        pose: *pose,
                    },
                    crate::sim_rigid::BodyCollision {
                        id: crate::sim_rigid::ContactBody::Body(1),
                        hulls: &params.hulls,
                        pose: state.pose,
                    },
                ],
                f64::NEG_INFINITY,
            );
            if !overlap.is_empty() {
                // Gripper-local pose of the body at capture time.
                let inv_rot = pose.rotation().inverse();
                let local = Pose::new(
                    inv_rot * (state.pose.translation() - pose.translation()),
                    inv_rot * state.pose.rotation(),
                );
                self.welds.push((i, local));
            }
        }
    }

    fn release_grasp(&mut self) {
        self.welds.clear();
        for (_, sim) in self.deformables.iter_mut() {
            if let DeformableSim::Pd { state, .. } = sim {
                state.attached.clear();
            }
        }
    }

    pub fn summary(&self) -> StateSummary {
        StateSummary {
            time: self.time,
            gripper_pose: self.gripper_pose,
            gripper_width: self.gripper_width,
            rigid: self
                .rigid_states
                .iter()
                .zip(&self.rigid_sim.bodies)
                .map(|(s, p)| RigidSnapshot {
                    name: p.name.clone(),
                    pose: s.pose,
                    linear_velocity: s.linear_velocity,
                    angular_velocity: s.angular_velocity,
                })
                .collect(),
            deformable: self
                .deformables
                .iter()
                .map(|(name, sim)| DeformableSnapshot {
                    name: name.clone(),
                    particles: match sim {
                        DeformableSim::Pd { state, .. } => state.positions.clone(),
                        DeformableSim::Mpm { state, .. } => state
                            .positions
                            .iter()
                            .map(|p| [p.x, p.y, p.z])
                            .collect(),
                    },
                })
                .collect(),
        }
    }

    /// Hold the current gripper command for `seconds` (statics runs).
    pub fn hold(&mut self, seconds: f64) -> Result<(), WorldError> {
        let cmd = GripperCommand {
            pose: self.gripper_pose,
            width: self.gripper_width,
        };
        let steps = (seconds / CONTROL_DT).round() as usize;
        for _ in 0..steps {
            self.step(&cmd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;
    use crate::mesh::box_mesh;
    use crate::render::Camera;
    use crate::scene::{
        GripperSpec, RigidObjectSpec, TaskId, TaskSpec, ToolKind,
    };

    fn box_scene() -> SceneDescription {
        SceneDescription {
            gravity: [0.0, 0.0, -9.81],
            table_height: 0.0,
            rigid_objects: vec![RigidObjectSpec {
                name: "box".into(),
                mesh: box_mesh(Vec3::new(0.02, 0.02, 0.12)),
                pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.12)),
                mass: 0.2,
                friction: 0.5,
                com_offset: [0.0; 3],
                collision_hulls: vec![],
                color: [240, 240, 240],
            }],
            deformable_objects: vec![],
            gripper: GripperSpec {
                pose: Pose::from_position(Vec3::new(-0.15, 0.0, 0.10)),
                width: 0.0,
                finger_half_extents: [0.008, 0.015, 0.01],
                tool: ToolKind::ParallelJaw,
            },
            workspace_bounds: Aabb::new(Vec3::new(-0.5, -0.5, -0.01), Vec3::new(0.5, 0.5, 0.6)),
            task: TaskSpec {
                task_id: TaskId::Custom,
                instruction: "test".into(),
                criterion_params: Default::default(),
            },
            camera: Camera::default(),
        }
    }

    #[test]
    fn tall_box_is_static_without_actions() {
        let scene = box_scene();
        let mut world = World::new(&scene).unwrap();
        world.hold(5.0).unwrap();
        let summary = world.summary();
        let pose = summary.rigid[0].pose;
        let drift = (pose.translation() - Vec3::new(0.0, 0.0, 0.12)).norm();
        assert!(drift < 1e-3, "box drifted {drift}");
        assert!(pose.tilt_from_vertical().to_degrees() < 0.5);
    }

    /// Quasi-static torque-balance oracle for pushing a box of base
    /// half-width b at contact height h with friction mu: it topples when
    /// mu * h > b (tipping needs less force than sliding), else it slides.
    fn push_at_height(h_push: f64) -> (f64, f64) {
        let mut scene = box_scene();
        scene.gripper.pose = Pose::from_position(Vec3::new(-0.055, 0.0, h_push));
        let mut world = World::new(&scene).unwrap();
        // Advance the gripper 0.12 m in +x at 0.05 m/s, closed fingers.
        let steps = 1200;
        for i in 0..steps {
            let t = (i + 1) as f64 / steps as f64;
            let cmd = GripperCommand {
                pose: Pose::from_position(Vec3::new(-0.055 + 0.12 * t, 0.0, h_push)),
                width: 0.0,
            };
            world.step(&cmd).unwrap();
        }
        world.hold(1.0).unwrap();
        let summary = world.summary();
        let pose = summary.rigid[0].pose;
        let tilt = pose.tilt_from_vertical().to_degrees();
        let displacement = pose.translation().x;
        (tilt, displacement)
    }

    #[test]
    fn high_push_topples_box() {
        // mu * h = 0.5 * 0.10 = 0.05 > b = 0.02 -> topple branch.
        let (tilt, _) = push_at_height(0.10);
        assert!(tilt > 15.0, "expected topple, tilt {tilt}");
    }

    #[test]
    fn low_push_slides_box() {
        // mu * h = 0.5 * 0.02 = 0.01 < b = 0.02 -> sliding branch.
        let (tilt, displacement) = push_at_height(0.02);
        assert!(tilt < 5.0, "expected slide, tilt {tilt}");
        assert!(displacement >= 0.05, "displacement {displacement}");
    }

    #[test]
    fn grasp_weld_lifts_rigid_box() {
        let mut scene = box_scene();
        // Small box graspable by the fingers.
        scene.rigid_objects[0].mesh = box_mesh(Vec3::new(0.008, 0.03, 0.03));
        scene.rigid_objects[0].pose = Pose::from_position(Vec3::new(0.0, 0.0, 0.03));
        scene.gripper.pose = Pose::from_position(Vec3::new(0.0, 0.0, 0.045));
        scene.gripper.width = 0.06;
        let mut world = World::new(&scene).unwrap();

        // Close, then lift.
        for i in 0..250 {
            let w = 0.06 - (0.06 - 0.01) * (i + 1) as f64 / 250.0;
            let cmd = GripperCommand {
                pose: scene.gripper.pose,
                width: w,
            };
            world.step(&cmd).unwrap();
        }
        assert!(!world.welds.is_empty(), "grasp should weld the box");
        for i in 0..500 {
            let z = 0.045 + 0.1 * (i + 1) as f64 / 500.0;
            let cmd = GripperCommand {
                pose: Pose::from_position(Vec3::new(0.0, 0.0, z)),
                width: 0.01,
            };
            world.step(&cmd).unwrap();
        }
        let lifted = world.summary().rigid[0].pose.translation().z;
        assert!(lifted > 0.10, "box should be lifted, z={lifted}");

        // Release drops it.
        let cmd = GripperCommand {
            pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.145)),
            width: 0.09,
        };
        world.step(&cmd).unwrap();
        assert!(world.welds.is_empty());
    }
}
