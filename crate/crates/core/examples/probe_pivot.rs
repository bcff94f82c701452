//! Dev probe: pure-arc cartwheel pivot.
use simpact_core::actions::{ActionKind, ActionSequence, SymbolicAction};
use simpact_core::math::Vec3;
use simpact_core::scene::TaskId;

fn main() {
    let a: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let r_push = a.first().copied().unwrap_or(0.150);
    let press = a.get(1).copied().unwrap_or(0.004);
    let phi_end: f64 = a.get(2).copied().unwrap_or(86.0);
    let scene = simpact_core::scenes::build_scene(TaskId::Pivoting);
    let start = scene.gripper.pose.translation();
    let pivot_x = -0.04;
    let h0 = 0.02;
    let approach = Vec3::new(-0.13 - 0.075 - 0.008 - 0.02, 0.0, h0);
    let mut actions = vec![
        SymbolicAction::new(ActionKind::Grasp { width: 0.0 }),
        SymbolicAction::new(ActionKind::Move {
            delta_x: approach.x - start.x,
            delta_y: approach.y - start.y,
            delta_z: approach.z - start.z,
        }),
    ];
    let mut prev = approach;
    for phi_deg in [15.0_f64, 35.0, 55.0, 72.0, phi_end] {
        let phi = phi_deg.to_radians();
        let target = Vec3::new(
            pivot_x - r_push * phi.cos() - press - 0.008,
            0.0,
            (r_push * phi.sin() - 0.01).max(h0),
        );
        actions.push(SymbolicAction::new(ActionKind::Move {
            delta_x: target.x - prev.x,
            delta_y: 0.0,
            delta_z: target.z - prev.z,
        }));
        prev = target;
    }
    actions.push(SymbolicAction::new(ActionKind::Move { delta_x: -0.09, delta_y: 0.0, delta_z: 0.0 }));
    let seq = ActionSequence::new("cartwheel", actions);
    let trace = simpact_core::planner::sim_rollout(&scene, &seq, None);
    for (pi, s) in &trace.per_primitive_states {
        let b = &s.rigid[0];
        let brown = &s.rigid[1];
        let axis = b.pose.rotation() * Vec3::x();
        let angle_v = axis.z.abs().acos().to_degrees();
        let p = b.pose.translation();
        println!(
            "prim {}: red ({:.3}, {:.3}, {:.3}) from-vertical {:.1} | brown x {:.3}",
            pi, p.x, p.y, p.z, angle_v, brown.pose.translation().x
        );
    }
    println!("failure: {:?}, diverged: {}", trace.failure, trace.diverged);
}
