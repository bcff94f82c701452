//! Simulation-enabled action planning at desk scale: declarative scenes are
//! compiled into a multi-physics world (rigid bodies, projective-dynamics
//! ropes, MPM soft bodies), a pluggable proposer generates symbolic action
//! sequences, rollouts ground them physically, and an iterative optimizer
//! refines them until a task-success check passes.

pub mod actions;
pub mod backends;
pub mod bench;
pub mod gripper;
pub mod hull;
pub mod math;
pub mod mesh;
pub mod planner;
pub mod render;
pub mod scene;
pub mod scenes;
pub mod sim_mpm;
pub mod sim_pd;
pub mod sim_rigid;
pub mod world;

pub use actions::{ActionKind, ActionSequence, SymbolicAction, Waypoint};
pub use math::{Aabb, Pose, Vec3};
pub use planner::{plan, sim_rollout, OptimizationContext, PlanConfig, PlanResult, RolloutTrace};
pub use scene::{load_scene, SceneDescription, TaskId, TaskSpec};
pub use world::{StateSummary, World, CONTROL_DT, CONTROL_RATE};
