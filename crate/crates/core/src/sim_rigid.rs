//! Mesh-based rigid-body dynamics: semi-implicit Euler integration with
//! sequential-impulse contact resolution (Coulomb friction, restitution 0,
//! split-impulse positional stabilization). Gripper fingers are kinematic
//! bodies with infinite mass.

use crate::gripper::{point_velocity, FingerBody, SURFACE_FRICTION};
use crate::hull::ConvexHull;
use crate::math::{Mat3, Pose, Quat, Vec3};
use crate::mesh::{MeshError, TriMesh};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VELOCITY_ITERATIONS: usize = 25;
pub const POSITION_ITERATIONS: usize = 15;
pub const BAUMGARTE: f64 = 0.2;
pub const PENETRATION_SLOP: f64 = 1e-4;
/// Table penetration allowance after resolution.
pub const MAX_TABLE_PENETRATION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RigidError {
    #[error("numerical divergence in body {0}")]
    NumericalDivergence(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Dynamic state of one rigid body. Velocities are world frame; the pose
/// orientation is renormalized after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidState {
    pub pose: Pose,
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
}

impl RigidState {
    pub fn at_rest(pose: Pose) -> Self {
        RigidState {
            pose,
            linear_velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
        }
    }

    pub fn linear_v(&self) -> Vec3 {
        Vec3::from(self.linear_velocity)
    }

    pub fn angular_v(&self) -> Vec3 {
        Vec3::from(self.angular_velocity)
    }

    pub fn speed(&self) -> f64 {
        self.linear_v().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.pose.is_finite()
            && self.linear_velocity.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }
}

/// Identifies one side of a contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactBody {
    Table,
    Body(usize),
    Finger(usize),
}

#[derive(Debug, Clone)]
pub struct ContactPoint {
    pub point: Vec3,
    /// Unit normal pointing from `bodies.0` toward `bodies.1`.
    pub normal: Vec3,
    pub depth: f64,
    pub bodies: (ContactBody, ContactBody),
}

/// Inertia tensor (body frame, about the center of mass) from the convex
/// hull volume integral of the mesh, scaled to the given mass.
pub fn compute_inertia(mesh: &TriMesh, mass: f64, com_offset: &Vec3) -> Result<Mat3, RigidError> {
    let hull = ConvexHull::from_mesh(mesh)?;
    let (volume, centroid, inertia_unit) = hull.volume_integrals();
    if volume <= 0.0 || !volume.is_finite() {
        return Err(RigidError::Mesh(MeshError::DegenerateMesh(
            "non-positive hull volume".into(),
        )));
    }
    let density = mass / volume;
    let about_centroid = inertia_unit * density;
    // Parallel-axis shift from the hull centroid to the declared COM.
    let d = com_offset - centroid;
    let d2 = d.dot(&d);
    let mut shift = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            shift[(i, j)] = mass * (if i == j { d2 } else { 0.0 } - d[i] * d[j]);
        }
    }
    Ok(about_centroid + shift)
}

/// Immutable per-body simulation parameters, derived from the scene.
#[derive(Debug, Clone)]
pub struct RigidBodyParams {
    pub name: String,
    pub hulls: Vec<ConvexHull>,
    pub mass: f64,
    pub inv_mass: f64,
    pub inertia_body: Mat3,
    pub inv_inertia_body: Mat3,
    /// COM position in the body frame.
    pub com_offset: Vec3,
    pub friction: f64,
}

impl RigidBodyParams {
    pub fn new(
        name: String,
        mesh: &TriMesh,
        collision_hulls: &[TriMesh],
        mass: f64,
        friction: f64,
        com_offset: Vec3,
    ) -> Result<Self, RigidError> {
        let hulls = if collision_hulls.is_empty() {
            vec![ConvexHull::from_mesh(mesh)?]
        } else {
            collision_hulls
                .iter()
                .map(ConvexHull::from_mesh)
                .collect::<Result<Vec<_>, _>>()?
        };
        let inertia_body = compute_inertia(mesh, mass, &com_offset)?;
        let inv_inertia_body = inertia_body
            .try_inverse()
            .ok_or_else(|| RigidError::Mesh(MeshError::DegenerateMesh("singular inertia".into())))?;
        Ok(RigidBodyParams {
            name,
            hulls,
            mass,
            inv_mass: 1.0 / mass,
            inertia_body,
            inv_inertia_body,
            com_offset,
            friction,
        })
    }
}

/// Kinematic override for a body welded to the gripper: the solver treats it
/// as infinite mass moving at the given velocity, and the integrator snaps it
/// to `pose`.
#[derive(Debug, Clone)]
pub struct KinematicDrive {
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
}

// ---------------------------------------------------------------------------
// Contact detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct WorldHull {
    verts: Vec<Vec3>,
    faces: Vec<(Vec3, f64, Vec<usize>)>,
    edges: Vec<(usize, usize)>,
    center: Vec3,
    aabb: crate::math::Aabb,
}

fn transform_hull(hull: &ConvexHull, pose: &Pose) -> WorldHull {
    let rot = pose.rotation();
    let t = pose.translation();
    let verts: Vec<Vec3> = hull.vertices.iter().map(|v| rot * v + t).collect();
    let faces = hull
        .faces
        .iter()
        .map(|f| {
            let n = rot * f.normal;
            let off = n.dot(&verts[f.indices[0]]);
            (n, off, f.indices.clone())
        })
        .collect();
    let center = verts.iter().sum::<Vec3>() / verts.len() as f64;
    let aabb = crate::math::Aabb::from_points(verts.iter()).expect("hull verts");
    WorldHull {
        verts,
        faces,
        edges: hull.edges.clone(),
        center,
        aabb,
    }
}

/// One collision body: a set of world-posed convex hulls.
pub struct BodyCollision<'a> {
    pub id: ContactBody,
    pub hulls: &'a [ConvexHull],
    pub pose: Pose,
}

/// All hull-table and hull-hull contacts with positive penetration, up to 4
/// points per hull pair. Normals point from `bodies.0` toward `bodies.1`.
pub fn detect_contacts(bodies: &[BodyCollision<'_>], table_height: f64) -> Vec<ContactPoint> {
    let world: Vec<(ContactBody, Vec<WorldHull>)> = bodies
        .iter()
        .map(|b| {
            (
                b.id,
                b.hulls.iter().map(|h| transform_hull(h, &b.pose)).collect(),
            )
        })
        .collect();

    let mut contacts = Vec::new();

    // Hull vs table plane.
    for (id, hulls) in &world {
        if *id == ContactBody::Table {
            continue;
        }
        for hull in hulls {
            let mut touching: Vec<(usize, f64)> = hull
                .verts
                .iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    let depth = table_height - v.z;
                    (depth >= -1e-7).then_some((i, depth))
                })
                .collect();
            if touching.is_empty() {
                continue;
            }
            // Keep at most 4: deepest first, then spread by distance.
            touching.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let selected = reduce_manifold(
                &touching.iter().map(|&(i, d)| (hull.verts[i], d)).collect::<Vec<_>>(),
            );
            for (point, depth) in selected {
                contacts.push(ContactPoint {
                    point,
                    normal: Vec3::z(),
                    depth: depth.max(0.0),
                    bodies: (ContactBody::Table, *id),
                });
            }
        }
    }

    // Hull vs hull between distinct bodies (finger-finger pairs skipped).
    for i in 0..world.len() {
        for j in (i + 1)..world.len() {
            let (id_a, hulls_a) = &world[i];
            let (id_b, hulls_b) = &world[j];
            if matches!(id_a, ContactBody::Finger(_)) && matches!(id_b, ContactBody::Finger(_)) {
                continue;
            }
            for ha in hulls_a {
                for hb in hulls_b {
                    if !ha.aabb.grown(1e-4).overlaps(&hb.aabb) {
                        continue;
                    }
                    if let Some(manifold) = sat_contact(ha, hb) {
                        for (point, depth, normal) in manifold {
                            contacts.push(ContactPoint {
                                point,
                                normal,
                                depth: depth.max(0.0),
                                bodies: (*id_a, *id_b),
                            });
                        }
                    }
                }
            }
        }
    }

    contacts
}

/// Keep at most 4 manifold points: the deepest, then greedily the most
/// spread-out remainder. Deterministic for a fixed input order.
fn reduce_manifold(points: &[(Vec3, f64)]) -> Vec<(Vec3, f64)> {
    if points.len() <= 4 {
        return points.to_vec();
    }
    let mut selected: Vec<(Vec3, f64)> = vec![points[0]];
    while selected.len() < 4 {
        let mut best = None;
        let mut best_score = -1.0;
        for (k, cand) in points.iter().enumerate() {
            if selected.iter().any(|s| (s.0 - cand.0).norm() < 1e-12) {
                continue;
            }
            let score: f64 = selected.iter().map(|s| (s.0 - cand.0).norm()).sum();
            if score > best_score {
                best_score = score;
                best = Some(k);
            }
        }
        match best {
            Some(k) => selected.push(points[k]),
            None => break,
        }
    }
    selected
}

/// SAT for a convex hull pair. Returns manifold points as
/// (point, depth, normal-from-a-to-b), or None when separated.
fn sat_contact(a: &WorldHull, b: &WorldHull) -> Option<Vec<(Vec3, f64, Vec3)>> {
    let face_sep = |from: &WorldHull, to: &WorldHull| -> (f64, usize) {
        let mut best = f64::NEG_INFINITY;
        let mut best_face = 0;
        for (fi, (n, off, _)) in from.faces.iter().enumerate() {
            let mut min_proj = f64::INFINITY;
            for v in &to.verts {
                min_proj = min_proj.min(n.dot(v));
            }
            let sep = min_proj - off;
            if sep > best {
                best = sep;
                best_face = fi;
            }
        }
        (best, best_face)
    };

    let (sep_a, face_a) = face_sep(a, b);
    if sep_a > 0.0 {
        return None;
    }
    let (sep_b, face_b) = face_sep(b, a);
    if sep_b > 0.0 {
        return None;
    }

    // Edge-edge axes.
    let mut sep_e = f64::NEG_INFINITY;
    let mut edge_best: Option<(usize, usize, Vec3)> = None;
    let center_dir = b.center - a.center;
    for (eai, &(a0, a1)) in a.edges.iter().enumerate() {
        let da = a.verts[a1] - a.verts[a0];
        for (ebi, &(b0, b1)) in b.edges.iter().enumerate() {
            let db = b.verts[b1] - b.verts[b0];
            let mut axis = da.cross(&db);
            let norm = axis.norm();
            if norm < 1e-9 {
                continue;
            }
            axis /= norm;
            if axis.dot(&center_dir) < 0.0 {
                axis = -axis;
            }
            let max_a = a.verts.iter().map(|v| axis.dot(v)).fold(f64::NEG_INFINITY, f64::max);
            let min_b = b.verts.iter().map(|v| axis.dot(v)).fold(f64::INFINITY, f64::min);
            let sep = min_b - max_a;
            if sep > 0.0 {
                return None;
            }
            if sep > sep_e {
                sep_e = sep;
                edge_best = Some((eai, ebi, axis));
            }
        }
    }

    // Prefer face contacts unless the edge axis is clearly less penetrating.
    const FACE_BIAS: f64 = 1e-5;
    let face_best = sep_a.max(sep_b);
    if let Some((eai, ebi, axis)) = edge_best {
        if sep_e > face_best + FACE_BIAS {
            let (a0, a1) = a.edges[eai];
            let (b0, b1) = b.edges[ebi];
            let (pa, pb) = closest_points_on_edges(
                a.verts[a0], a.verts[a1], b.verts[b0], b.verts[b1],
            );
            let point = (pa + pb) * 0.5;
            return Some(vec![(point, -sep_e, axis)]);
        }
    }

    // Face contact: clip the incident face against the reference face.
    let (reference_on_a, ref_face) = if sep_a >= sep_b - FACE_BIAS {
        (true, face_a)
    } else {
        (false, face_b)
    };
    let (ref_hull, inc_hull) = if reference_on_a { (a, b) } else { (b, a) };
    let (ref_n, ref_off, ref_idx) = &ref_hull.faces[ref_face];

    // Incident face: most anti-parallel to the reference normal.
    let mut inc_face = 0;
    let mut best_dot = f64::INFINITY;
    for (fi, (n, _, _)) in inc_hull.faces.iter().enumerate() {
        let d = n.dot(ref_n);
        if d < best_dot {
            best_dot = d;
            inc_face = fi;
        }
    }
    let mut poly: Vec<Vec3> = inc_hull.faces[inc_face]
        .2
        .iter()
        .map(|&i| inc_hull.verts[i])
        .collect();

    // Clip against the side planes of the reference polygon.
    let ref_poly: Vec<Vec3> = ref_idx.iter().map(|&i| ref_hull.verts[i]).collect();
    for k in 0..ref_poly.len() {
        let v0 = ref_poly[k];
        let v1 = ref_poly[(k + 1) % ref_poly.len()];
        let edge = v1 - v0;
        let side_n = edge.cross(ref_n); // outward of a CCW polygon
        let side_off = side_n.dot(&v0);
        poly = clip_polygon(&poly, &side_n, side_off);
        if poly.is_empty() {
            return None;
        }
    }

    let mut manifold: Vec<(Vec3, f64)> = poly
        .into_iter()
        .filter_map(|p| {
            let depth = ref_off - ref_n.dot(&p);
            (depth >= -1e-7).then_some((p, depth))
        })
        .collect();
    if manifold.is_empty() {
        return None;
    }
    manifold.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
    let manifold = reduce_manifold(&manifold);
    let normal = if reference_on_a { *ref_n } else { -ref_n };
    Some(manifold.into_iter().map(|(p, d)| (p, d, normal)).collect())
}

fn clip_polygon(poly: &[Vec3], n: &Vec3, off: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for k in 0..poly.len() {
        let cur = poly[k];
        let next = poly[(k + 1) % poly.len()];
        let d_cur = n.dot(&cur) - off;
        let d_next = n.dot(&next) - off;
        if d_cur <= 0.0 {
            out.push(cur);
        }
        if (d_cur < 0.0 && d_next > 0.0) || (d_cur > 0.0 && d_next < 0.0) {
            let t = d_cur / (d_cur - d_next);
            out.push(cur + (next - cur) * t);
        }
    }
    out
}

fn closest_points_on_edges(p1: Vec3, q1: Vec3, p2: Vec3, q2: Vec3) -> (Vec3, Vec3) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let c = d1.dot(&r);
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let s = if denom.abs() > 1e-12 {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let t = if e.abs() > 1e-12 {
        ((b * s + f) / e).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p1 + d1 * s, p2 + d2 * t)
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct SolverBody {
    inv_mass: f64,
    inv_inertia: Mat3,
    com: Vec3,
    v: Vec3,
    w: Vec3,
    // Pseudo velocities for split-impulse position correction.
    pv: Vec3,
    pw: Vec3,
}

struct ContactConstraint {
    a: usize,
    b: usize,
    point: Vec3,
    normal: Vec3,
    t1: Vec3,
    t2: Vec3,
    depth: f64,
    friction: f64,
    lambda_n: f64,
    lambda_t1: f64,
    lambda_t2: f64,
    lambda_pseudo: f64,
}

/// Rigid-body world: immutable parameters plus gravity and the table plane.
pub struct RigidSim {
    pub bodies: Vec<RigidBodyParams>,
    pub gravity: Vec3,
    pub table_height: f64,
    /// Table contact plane entirely disabled when false (test harness knob).
    pub table_enabled: bool,
}

impl RigidSim {
    pub fn new(bodies: Vec<RigidBodyParams>, gravity: Vec3, table_height: f64) -> Self {
        RigidSim {
            bodies,
            gravity,
            table_height,
            table_enabled: true,
        }
    }

    /// Advance all bodies by `dt`: integrate gravity, resolve contacts among
    /// bodies, fingers, and the table, then integrate poses. Bodies with a
    /// `KinematicDrive` follow it exactly.
    pub fn step(
        &self,
        states: &mut [RigidState],
        drives: &[Option<KinematicDrive>],
        fingers: &[FingerBody],
        dt: f64,
    ) -> Result<(), RigidError> {
        assert!(dt > 0.0 && dt <= 0.01, "dt must lie in (0, 0.01]");
        assert_eq!(states.len(), self.bodies.len());

        // Solver bodies: dynamics first, then one slot per finger, then table.
        let nb = self.bodies.len();
        let mut solver: Vec<SolverBody> = Vec::with_capacity(nb + fingers.len() + 1);
        for (i, (state, params)) in states.iter().zip(&self.bodies).enumerate() {
            let rot = state.pose.rotation().to_rotation_matrix().into_inner();
            let com = state.pose.transform_point(&params.com_offset);
            match drives.get(i).and_then(|d| d.as_ref()) {
                Some(drive) => solver.push(SolverBody {
                    inv_mass: 0.0,
                    inv_inertia: Mat3::zeros(),
                    com,
                    v: drive.linear_velocity,
                    w: drive.angular_velocity,
                    pv: Vec3::zeros(),
                    pw: Vec3::zeros(),
                }),
                None => solver.push(SolverBody {
                    inv_mass: params.inv_mass,
                    inv_inertia: rot * params.inv_inertia_body * rot.transpose(),
                    com,
                    v: state.linear_v() + self.gravity * dt,
                    w: state.angular_v(),
                    pv: Vec3::zeros(),
                    pw: Vec3::zeros(),
                }),
            }
        }
        for f in fingers {
            solver.push(SolverBody {
                inv_mass: 0.0,
                inv_inertia: Mat3::zeros(),
                com: f.pose.translation(),
                v: f.linear_velocity,
                w: f.angular_velocity,
                pv: Vec3::zeros(),
                pw: Vec3::zeros(),
            });
        }
        let table_slot = solver.len();
        solver.push(SolverBody {
            inv_mass: 0.0,
            inv_inertia: Mat3::zeros(),
            com: Vec3::zeros(),
            v: Vec3::zeros(),
            w: Vec3::zeros(),
            pv: Vec3::zeros(),
            pw: Vec3::zeros(),
        });

        // Contact detection at the pre-integration poses.
        let finger_hulls: Vec<ConvexHull> = fingers
            .iter()
            .map(|f| {
                ConvexHull::from_mesh(&crate::mesh::box_mesh(f.half_extents)).expect("finger hull")
            })
            .collect();
        let mut collision: Vec<BodyCollision<'_>> = Vec::new();
        for (i, (state, params)) in states.iter().zip(&self.bodies).enumerate() {
            collision.push(BodyCollision {
                id: ContactBody::Body(i),
                hulls: &params.hulls,
                pose: state.pose,
            });
        }
        for (fi, f) in fingers.iter().enumerate() {
            collision.push(BodyCollision {
                id: ContactBody::Finger(fi),
                hulls: std::slice::from_ref(&finger_hulls[fi]),
                pose: f.pose,
            });
        }
        let mut raw_contacts = detect_contacts(&collision, self.table_height);
        if !self.table_enabled {
            raw_contacts.retain(|c| c.bodies.0 != ContactBody::Table && c.bodies.1 != ContactBody::Table);
        }

        let slot_of = |cb: ContactBody| -> usize {
            match cb {
                ContactBody::Body(i) => i,
                ContactBody::Finger(f) => nb + f,
                ContactBody::Table => table_slot,
            }
        };
        let friction_of = |cb: ContactBody| -> f64 {
            match cb {
                ContactBody::Body(i) => self.bodies[i].friction,
                _ => SURFACE_FRICTION,
            }
        };

        let mut constraints: Vec<ContactConstraint> = raw_contacts
            .iter()
            .map(|c| {
                let t1 = orthonormal_tangent(&c.normal);
                let t2 = c.normal.cross(&t1);
                ContactConstraint {
                    a: slot_of(c.bodies.0),
                    b: slot_of(c.bodies.1),
                    point: c.point,
                    normal: c.normal,
                    t1,
                    t2,
                    depth: c.depth,
                    friction: friction_of(c.bodies.0).min(friction_of(c.bodies.1)),
                    lambda_n: 0.0,
                    lambda_t1: 0.0,
                    lambda_t2: 0.0,
                    lambda_pseudo: 0.0,
                }
            })
            .collect();

        // Velocity iterations: restitution 0, Coulomb friction.
        for _ in 0..VELOCITY_ITERATIONS {
            for c in constraints.iter_mut() {
                let (sa, sb) = (solver[c.a], solver[c.b]);
                let ra = c.point - sa.com;
                let rb = c.point - sb.com;

                // Normal.
                let vn = (point_velocity(&sb.v, &sb.w, &sb.com, &c.point)
                    - point_velocity(&sa.v, &sa.w, &sa.com, &c.point))
                .dot(&c.normal);
                let k = effective_mass(&sa, &sb, &ra, &rb, &c.normal);
                if k > 1e-12 {
                    let mut d_lambda = -vn / k;
                    let new_total = (c.lambda_n + d_lambda).max(0.0);
                    d_lambda = new_total - c.lambda_n;
                    c.lambda_n = new_total;
                    apply_impulse(&mut solver, c.a, c.b, &c.point, &(c.normal * d_lambda));
                }

                // Friction, clamped by the updated normal impulse.
                let max_f = c.friction * c.lambda_n;
                for (tangent, acc) in [(c.t1, &mut c.lambda_t1), (c.t2, &mut c.lambda_t2)] {
                    let (sa, sb) = (solver[c.a], solver[c.b]);
                    let vt = (point_velocity(&sb.v, &sb.w, &sb.com, &c.point)
                        - point_velocity(&sa.v, &sa.w, &sa.com, &c.point))
                    .dot(&tangent);
                    let kt = effective_mass(&sa, &sb, &ra, &rb, &tangent);
                    if kt > 1e-12 {
                        let mut d = -vt / kt;
                        let new_total = (*acc + d).clamp(-max_f, max_f);
                        d = new_total - *acc;
                        *acc = new_total;
                        apply_impulse(&mut solver, c.a, c.b, &c.point, &(tangent * d));
                    }
                }
            }
        }

        // Split-impulse position correction on pseudo velocities.
        for _ in 0..POSITION_ITERATIONS {
            for c in constraints.iter_mut() {
                if c.depth <= PENETRATION_SLOP {
                    continue;
                }
                let (sa, sb) = (solver[c.a], solver[c.b]);
                let ra = c.point - sa.com;
                let rb = c.point - sb.com;
                let bias = BAUMGARTE * (c.depth - PENETRATION_SLOP) / dt;
                let pvn = (point_velocity(&sb.pv, &sb.pw, &sb.com, &c.point)
                    - point_velocity(&sa.pv, &sa.pw, &sa.com, &c.point))
                .dot(&c.normal);
                let k = effective_mass(&sa, &sb, &ra, &rb, &c.normal);
                if k > 1e-12 {
                    let mut d = (bias - pvn) / k;
                    let new_total = (c.lambda_pseudo + d).max(0.0);
                    d = new_total - c.lambda_pseudo;
                    c.lambda_pseudo = new_total;
                    apply_pseudo_impulse(&mut solver, c.a, c.b, &c.point, &(c.normal * d));
                }
            }
        }

        // Integrate.
        for (i, state) in states.iter_mut().enumerate() {
            if let Some(drive) = drives.get(i).and_then(|d| d.as_ref()) {
                state.pose = drive.pose;
                state.linear_velocity = drive.linear_velocity.into();
                state.angular_velocity = drive.angular_velocity.into();
                continue;
            }
            let s = &solver[i];
            let params = &self.bodies[i];
            let com = s.com + (s.v + s.pv) * dt;
            let w_total = s.w + s.pw;
            let rot = integrate_rotation(&state.pose.rotation(), &w_total, dt);
            let origin = com - rot * params.com_offset;
            state.pose = Pose::new(origin, rot);
            state.linear_velocity = s.v.into();
            state.angular_velocity = s.w.into();
            if !state.is_finite() {
                return Err(RigidError::NumericalDivergence(i));
            }
        }
        Ok(())
    }
}

fn effective_mass(sa: &SolverBody, sb: &SolverBody, ra: &Vec3, rb: &Vec3, dir: &Vec3) -> f64 {
    let ra_x_d = ra.cross(dir);
    let rb_x_d = rb.cross(dir);
    sa.inv_mass
        + sb.inv_mass
        + ra_x_d.dot(&(sa.inv_inertia * ra_x_d))
        + rb_x_d.dot(&(sb.inv_inertia * rb_x_d))
}

fn apply_impulse(solver: &mut [SolverBody], a: usize, b: usize, point: &Vec3, impulse: &Vec3) {
    let ra = point - solver[a].com;
    let rb = point - solver[b].com;
    let sa = &mut solver[a];
    sa.v -= impulse * sa.inv_mass;
    sa.w -= sa.inv_inertia * ra.cross(impulse);
    let sb = &mut solver[b];
    sb.v += impulse * sb.inv_mass;
    sb.w += sb.inv_inertia * rb.cross(impulse);
}

fn apply_pseudo_impulse(solver: &mut [SolverBody], a: usize, b: usize, point: &Vec3, impulse: &Vec3) {
    let ra = point - solver[a].com;
    let rb = point - solver[b].com;
    let sa = &mut solver[a];
    sa.pv -= impulse * sa.inv_mass;
    sa.pw -= sa.inv_inertia * ra.cross(impulse);
    let sb = &mut solver[b];
    sb.pv += impulse * sb.inv_mass;
    sb.pw += sb.inv_inertia * rb.cross(impulse);
}

fn orthonormal_tangent(n: &Vec3) -> Vec3 {
    let candidate = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    (candidate - n * n.dot(&candidate)).normalize()
}

fn integrate_rotation(q: &Quat, omega: &Vec3, dt: f64) -> Quat {
    let dq = nalgebra::Quaternion::new(0.0, omega.x, omega.y, omega.z) * q.into_inner() * 0.5 * dt;
    Quat::from_quaternion(q.into_inner() + dq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::yaw_quat;
    use crate::mesh::box_mesh;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_cube_params(mass: f64) -> RigidBodyParams {
        RigidBodyParams::new(
            "cube".into(),
            &box_mesh(Vec3::repeat(0.5)),
            &[],
            mass,
            0.5,
            Vec3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn cube_inertia_is_analytic() {
        let inertia = compute_inertia(&box_mesh(Vec3::repeat(0.5)), 1.0, &Vec3::zeros()).unwrap();
        for i in 0..3 {
            assert!((inertia[(i, i)] - 1.0 / 6.0).abs() < 1e-9);
            for j in 0..3 {
                if i != j {
                    assert!(inertia[(i, j)].abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn scaled_cube_inertia_scales_quadratically() {
        let inertia = compute_inertia(&box_mesh(Vec3::repeat(1.0)), 1.0, &Vec3::zeros()).unwrap();
        for i in 0..3 {
            assert!((inertia[(i, i)] - 2.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn random_hull_inertia_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let hull = ConvexHull::from_points(&pts).unwrap();
        let mesh = TriMesh::new(
            hull.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            // compute_inertia re-hulls, so triangles are irrelevant here; use a fan.
            (1..hull.vertices.len() - 1).map(|i| [0, i, i + 1]).collect(),
        );
        let mass = 0.7;
        let inertia = compute_inertia(&mesh, mass, &{
            let (_, c, _) = hull.volume_integrals();
            c
        })
        .unwrap();

        // Monte Carlo volume-integral oracle by rejection sampling in the AABB.
        let bbox = hull.aabb();
        let inside = |p: &Vec3| hull.faces.iter().all(|f| f.normal.dot(p) - f.offset <= 0.0);
        let n = 400_000;
        let mut count = 0usize;
        let mut sum = Vec3::zeros();
        let mut samples = Vec::new();
        for _ in 0..n {
            let p = Vec3::new(
                rng.gen_range(bbox.min[0]..bbox.max[0]),
                rng.gen_range(bbox.min[1]..bbox.max[1]),
                rng.gen_range(bbox.min[2]..bbox.max[2]),
            );
            if inside(&p) {
                count += 1;
                sum += p;
                samples.push(p);
            }
        }
        let centroid = sum / count as f64;
        let particle_mass = mass / count as f64;
        let mut mc = Mat3::zeros();
        for p in &samples {
            let d = p - centroid;
            let d2 = d.dot(&d);
            for i in 0..3 {
                for j in 0..3 {
                    mc[(i, j)] += particle_mass * (if i == j { d2 } else { 0.0 } - d[i] * d[j]);
                }
            }
        }
        let rel = (inertia - mc).norm() / inertia.norm();
        assert!(rel < 0.02, "inertia Monte Carlo mismatch {rel}");
    }

    #[test]
    fn separated_cubes_have_no_contacts() {
        let params = unit_cube_params(1.0);
        let bodies = [
            BodyCollision {
                id: ContactBody::Body(0),
                hulls: &params.hulls,
                pose: Pose::from_position(Vec3::new(0.0, 0.0, 3.0)),
            },
            BodyCollision {
                id: ContactBody::Body(1),
                hulls: &params.hulls,
                pose: Pose::from_position(Vec3::new(3.0, 0.0, 3.0)),
            },
        ];
        assert!(detect_contacts(&bodies, -10.0).is_empty());
    }

    #[test]
    fn flush_cube_on_table_has_four_zero_depth_contacts() {
        let params = unit_cube_params(1.0);
        let bodies = [BodyCollision {
            id: ContactBody::Body(0),
            hulls: &params.hulls,
            pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.5)),
        }];
        let contacts = detect_contacts(&bodies, 0.0);
        assert_eq!(contacts.len(), 4);
        for c in &contacts {
            assert!((c.normal - Vec3::z()).norm() < 1e-6);
            assert!(c.depth.abs() < 1e-6);
        }
    }

    #[test]
    fn sunk_cube_reports_penetration_depth() {
        let params = unit_cube_params(1.0);
        let bodies = [BodyCollision {
            id: ContactBody::Body(0),
            hulls: &params.hulls,
            pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.49)),
        }];
        let contacts = detect_contacts(&bodies, 0.0);
        assert_eq!(contacts.len(), 4);
        for c in &contacts {
            assert!((c.depth - 0.01).abs() < 1e-4);
        }
    }

    #[test]
    fn overlapping_cubes_produce_face_manifold() {
        let params = unit_cube_params(1.0);
        let bodies = [
            BodyCollision {
                id: ContactBody::Body(0),
                hulls: &params.hulls,
                pose: Pose::from_position(Vec3::new(0.0, 0.0, 0.0)),
            },
            BodyCollision {
                id: ContactBody::Body(1),
                hulls: &params.hulls,
                pose: Pose::new(Vec3::new(0.0, 0.0, 0.99), yaw_quat(0.3)),
            },
        ];
        let contacts = detect_contacts(&bodies, -10.0);
        let pair: Vec<_> = contacts
            .iter()
            .filter(|c| c.bodies == (ContactBody::Body(0), ContactBody::Body(1)))
            .collect();
        assert!(!pair.is_empty() && pair.len() <= 4);
        for c in &pair {
            assert!((c.normal.norm() - 1.0).abs() < 1e-6);
            assert!(c.normal.z > 0.9, "normal should point up from lower to upper");
            assert!((c.depth - 0.01).abs() < 1e-3);
        }
    }

    fn resting_cube_sim() -> (RigidSim, Vec<RigidState>) {
        let params = unit_cube_params(1.0);
        let sim = RigidSim::new(vec![params], Vec3::new(0.0, 0.0, -9.81), 0.0);
        let states = vec![RigidState::at_rest(Pose::from_position(Vec3::new(0.0, 0.0, 0.5)))];
        (sim, states)
    }

    #[test]
    fn resting_cube_stays_put() {
        let (sim, mut states) = resting_cube_sim();
        let start = states[0].pose.translation();
        for _ in 0..1000 {
            sim.step(&mut states, &[None], &[], 0.002).unwrap();
        }
        let drift = (states[0].pose.translation() - start).norm();
        assert!(drift < 1e-3, "drift {drift}");
        assert!(states[0].pose.tilt_from_vertical() < 0.5_f64.to_radians());
        // No penetration beyond the allowance.
        assert!(states[0].pose.translation().z > 0.5 - MAX_TABLE_PENETRATION);
    }

    #[test]
    fn momentum_conserved_without_external_forces() {
        let params = unit_cube_params(1.0);
        let mut sim = RigidSim::new(
            vec![params.clone(), params],
            Vec3::zeros(),
            -100.0,
        );
        sim.table_enabled = false;
        let mut states = vec![
            RigidState {
                pose: Pose::from_position(Vec3::new(-1.0, 0.02, 0.0)),
                linear_velocity: [1.0, 0.0, 0.0],
                angular_velocity: [0.0, 0.0, 0.2],
            },
            RigidState {
                pose: Pose::new(Vec3::new(0.05, 0.0, 0.1), yaw_quat(0.4)),
                linear_velocity: [-0.5, 0.0, 0.0],
                angular_velocity: [0.0; 3],
            },
        ];
        let momentum = |s: &[RigidState]| s.iter().map(|x| x.linear_v()).sum::<Vec3>();
        let p0 = momentum(&states);
        for _ in 0..300 {
            sim.step(&mut states, &[None, None], &[], 0.002).unwrap();
            let drift = (momentum(&states) - p0).norm();
            assert!(drift < 1e-8, "momentum drift {drift}");
        }
    }

    #[test]
    fn contact_resolution_never_adds_kinetic_energy() {
        let params = unit_cube_params(1.0);
        let sim = RigidSim::new(vec![params.clone()], Vec3::zeros(), 0.0);
        let ke = |s: &RigidState, p: &RigidBodyParams| {
            let rot = s.pose.rotation().to_rotation_matrix().into_inner();
            let iw = rot * p.inertia_body * rot.transpose();
            0.5 * p.mass * s.linear_v().norm_squared() + 0.5 * s.angular_v().dot(&(iw * s.angular_v()))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut states = vec![RigidState {
                pose: Pose::new(
                    Vec3::new(0.0, 0.0, rng.gen_range(0.45..0.55)),
                    yaw_quat(rng.gen_range(-0.5..0.5)),
                ),
                linear_velocity: [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-1.0..0.0),
                ],
                angular_velocity: [rng.gen_range(-1.0..1.0), 0.0, 0.0],
            }];
            let before = ke(&states[0], &params);
            sim.step(&mut states, &[None], &[], 0.002).unwrap();
            let after = ke(&states[0], &params);
            assert!(after <= before + 1e-9, "KE grew {before} -> {after}");
        }
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let (sim, mut states) = resting_cube_sim();
            let mut out = Vec::new();
            for step in 0..200 {
                let fingers = if step > 50 {
                    vec![FingerBody {
                        pose: Pose::from_position(Vec3::new(-0.6 + step as f64 * 0.0005, 0.0, 0.3)),
                        linear_velocity: Vec3::new(0.25, 0.0, 0.0),
                        angular_velocity: Vec3::zeros(),
                        half_extents: Vec3::new(0.01, 0.02, 0.02),
                    }]
                } else {
                    Vec::new()
                };
                sim.step(&mut states, &[None], &fingers, 0.002).unwrap();
                out.push(states[0].clone());
            }
            out
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pose.position, y.pose.position);
            assert_eq!(x.pose.orientation, y.pose.orientation);
            assert_eq!(x.linear_velocity, y.linear_velocity);
        }
    }
}
