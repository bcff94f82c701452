//! Scene description: the declarative format that carries object geometry
//! and physical parameters into the simulator, replacing a perception
//! front-end. Files are UTF-8 JSON; lengths in meters, masses in kg, file
//! angles in degrees.

use crate::math::{rpy_quat, Aabb, Pose, Vec3};
use crate::mesh::{self, MeshError, TriMesh};
use crate::render::Camera;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation error on `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("empty volume: surface entirely at table height")]
    EmptyVolume,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, message: impl Into<String>) -> SceneError {
    SceneError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialClass {
    Jelly,
    Metal,
    Sand,
    Foam,
    Plasticine,
}

impl MaterialClass {
    pub fn needs_friction_angle(&self) -> bool {
        matches!(self, MaterialClass::Sand)
    }

    pub fn needs_yield_stress(&self) -> bool {
        matches!(self, MaterialClass::Metal | MaterialClass::Plasticine)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaterialClass::Jelly => "jelly",
            MaterialClass::Metal => "metal",
            MaterialClass::Sand => "sand",
            MaterialClass::Foam => "foam",
            MaterialClass::Plasticine => "plasticine",
        }
    }

    pub fn parse(s: &str) -> Option<MaterialClass> {
        match s {
            "jelly" => Some(MaterialClass::Jelly),
            "metal" => Some(MaterialClass::Metal),
            "sand" => Some(MaterialClass::Sand),
            "foam" => Some(MaterialClass::Foam),
            "plasticine" => Some(MaterialClass::Plasticine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Pd,
    Mpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    ParallelJaw,
    FlatPlate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    NonTopplingPush,
    BowlStacking,
    Pivoting,
    ShapeRope,
    ShapeDough,
    Custom,
}

impl TaskId {
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::NonTopplingPush => "non_toppling_push",
            TaskId::BowlStacking => "bowl_stacking",
            TaskId::Pivoting => "pivoting",
            TaskId::ShapeRope => "shape_rope",
            TaskId::ShapeDough => "shape_dough",
            TaskId::Custom => "custom",
        }
    }

    /// Criterion parameters that must be present in the scene file; the
    /// remaining knobs have documented defaults.
    pub fn required_criterion_params(&self) -> &'static [&'static str] {
        match self {
            TaskId::NonTopplingPush => &["target_x"],
            TaskId::BowlStacking => &["rim_radius", "floor_z"],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub instruction: String,
    #[serde(default)]
    pub criterion_params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidObjectSpec {
    pub name: String,
    pub mesh: TriMesh,
    pub pose: Pose,
    pub mass: f64,
    pub friction: f64,
    /// Center of mass in the body frame.
    pub com_offset: [f64; 3],
    /// Authored convex decomposition for non-convex bodies (e.g. bowls).
    /// Empty means: use the convex hull of `mesh`.
    #[serde(default)]
    pub collision_hulls: Vec<TriMesh>,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
}

fn default_color() -> [u8; 3] {
    [160, 160, 160]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableObjectSpec {
    pub name: String,
    pub particles: Vec<[f64; 3]>,
    pub engine: EngineKind,
    pub material_class: MaterialClass,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub friction_angle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yield_stress: Option<f64>,
    pub particle_spacing: f64,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
}

impl DeformableObjectSpec {
    pub fn particle_positions(&self) -> Vec<Vec3> {
        self.particles
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]))
            .collect()
    }
}

/// Gripper open width is in [0, 0.1]: 0 fully closed, 0.1 fully open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperSpec {
    pub pose: Pose,
    pub width: f64,
    pub finger_half_extents: [f64; 3],
    pub tool: ToolKind,
}

impl GripperSpec {
    pub fn finger_half_extents_v(&self) -> Vec3 {
        let h = self.finger_half_extents;
        Vec3::new(h[0], h[1], h[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub gravity: [f64; 3],
    /// Table plane is z = table_height.
    pub table_height: f64,
    pub rigid_objects: Vec<RigidObjectSpec>,
    pub deformable_objects: Vec<DeformableObjectSpec>,
    pub gripper: GripperSpec,
    pub workspace_bounds: Aabb,
    pub task: TaskSpec,
    pub camera: Camera,
}

impl SceneDescription {
    pub fn gravity_v(&self) -> Vec3 {
        Vec3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }

    pub fn object_names(&self) -> Vec<&str> {
        self.rigid_objects
            .iter()
            .map(|o| o.name.as_str())
            .chain(self.deformable_objects.iter().map(|o| o.name.as_str()))
            .collect()
    }

    /// Serialize to the canonical scene-file JSON (inline meshes,
    /// quaternion orientations).
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_json_string()).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        validate_scene(self)
    }
}

// ---------------------------------------------------------------------------
// Default physical parameters
// ---------------------------------------------------------------------------

/// Full parameter set a material class requires.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    pub friction_angle: Option<f64>,
    pub yield_stress: Option<f64>,
}

/// Fallback parameter table used when the scene file omits values and no
/// parameter-inference backend is configured. Values sit in the ranges
/// common in graphics MPM work (soft-body scale, not engineering-handbook
/// scale): jelly/foam are soft elastics, plasticine follows the usual
/// E=3e5 Pa / yield 1e4 Pa soft-clay setup, sand uses a 35 degree friction
/// angle, and "metal" is the soft ductile analog used in MPM demos.
pub fn default_params(class: MaterialClass) -> MaterialParams {
    match class {
        MaterialClass::Jelly => MaterialParams {
            youngs_modulus: 1e4,
            poisson_ratio: 0.3,
            density: 1000.0,
            friction_angle: None,
            yield_stress: None,
        },
        MaterialClass::Metal => MaterialParams {
            youngs_modulus: 5e5,
            poisson_ratio: 0.4,
            density: 2700.0,
            friction_angle: None,
            yield_stress: Some(2e4),
        },
        MaterialClass::Sand => MaterialParams {
            youngs_modulus: 3e5,
            poisson_ratio: 0.3,
            density: 1600.0,
            friction_angle: Some(35.0),
            yield_stress: None,
        },
        MaterialClass::Foam => MaterialParams {
            youngs_modulus: 5e3,
            poisson_ratio: 0.25,
            density: 300.0,
            friction_angle: None,
            yield_stress: None,
        },
        MaterialClass::Plasticine => MaterialParams {
            youngs_modulus: 3e5,
            poisson_ratio: 0.35,
            density: 1200.0,
            friction_angle: None,
            yield_stress: Some(1e4),
        },
    }
}

pub const DEFAULT_RIGID_FRICTION: f64 = 0.5;
pub const DEFAULT_RIGID_MASS: f64 = 0.3;
pub const DEFAULT_PARTICLE_SPACING: f64 = 0.01;

// ---------------------------------------------------------------------------
// Volume particle sampling
// ---------------------------------------------------------------------------

/// Fill the volume between a surface point set and the table with a
/// deterministic grid of particles at pitch `spacing`.
///
/// Each (x, y) grid cell touched by a surface point gets a column of
/// particles from `table_height + spacing/2` strictly up to the cell's
/// surface height (the z of the in-cell surface point nearest the cell
/// center). No randomness: the same input always yields the same output.
pub fn sample_volume_particles(
    surface_points: &[Vec3],
    table_height: f64,
    spacing: f64,
) -> Result<Vec<Vec3>, SceneError> {
    assert!(!surface_points.is_empty(), "surface_points must be non-empty");
    assert!(spacing > 0.0, "spacing must be positive");
    for (i, p) in surface_points.iter().enumerate() {
        if p.z < table_height - 1e-9 {
            return Err(invalid(
                "surface_points",
                format!("point {i} lies below the table plane"),
            ));
        }
    }

    let min_x = surface_points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let min_y = surface_points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);

    // cell -> (surface z, distance of its source point to the cell center)
    let mut cells: BTreeMap<(i64, i64), (f64, f64)> = BTreeMap::new();
    for p in surface_points {
        let ix = ((p.x - min_x) / spacing).floor() as i64;
        let iy = ((p.y - min_y) / spacing).floor() as i64;
        let cx = min_x + (ix as f64 + 0.5) * spacing;
        let cy = min_y + (iy as f64 + 0.5) * spacing;
        let d = (p.x - cx).hypot(p.y - cy);
        match cells.get(&(ix, iy)) {
            Some(&(_, best)) if best <= d => {}
            _ => {
                cells.insert((ix, iy), (p.z, d));
            }
        }
    }

    let mut particles = Vec::new();
    for (&(ix, iy), &(height, _)) in &cells {
        let cx = min_x + (ix as f64 + 0.5) * spacing;
        let cy = min_y + (iy as f64 + 0.5) * spacing;
        let mut z = table_height + spacing / 2.0;
        while z < height {
            particles.push(Vec3::new(cx, cy, z));
            z += spacing;
        }
    }

    if particles.is_empty() {
        return Err(SceneError::EmptyVolume);
    }
    Ok(particles)
}

// ---------------------------------------------------------------------------
// File schema (raw form) and loading
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    #[serde(default = "default_gravity")]
    gravity: [f64; 3],
    #[serde(default)]
    table_height: f64,
    #[serde(default)]
    rigid_objects: Vec<RawRigid>,
    #[serde(default)]
    deformable_objects: Vec<RawDeformable>,
    gripper: RawGripper,
    workspace_bounds: Aabb,
    task: RawTask,
    #[serde(default)]
    camera: Option<Camera>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    position: [f64; 3],
    /// Roll/pitch/yaw in degrees; mutually exclusive with the quaternion
    /// forms.
    #[serde(default)]
    rpy_deg: Option<[f64; 3]>,
    /// Unit quaternion (w, x, y, z). `orientation` is the canonical-output
    /// spelling of the same field.
    #[serde(default)]
    quat: Option<[f64; 4]>,
    #[serde(default)]
    orientation: Option<[f64; 4]>,
}

impl RawPose {
    fn build(&self, field: &str) -> Result<Pose, SceneError> {
        let position = Vec3::new(self.position[0], self.position[1], self.position[2]);
        let quat = match (&self.quat, &self.orientation) {
            (Some(_), Some(_)) => return Err(invalid(field, "give quat or orientation, not both")),
            (q, o) => q.or(*o),
        };
        let rotation = match (&self.rpy_deg, &quat) {
            (Some(_), Some(_)) => {
                return Err(invalid(field, "give either rpy_deg or a quaternion, not both"))
            }
            (Some(rpy), None) => rpy_quat(
                rpy[0].to_radians(),
                rpy[1].to_radians(),
                rpy[2].to_radians(),
            ),
            (None, Some(q)) => {
                let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(invalid(field, format!("quaternion norm {norm} too far from 1")));
                }
                crate::math::Quat::from_quaternion(nalgebra::Quaternion::new(
                    q[0], q[1], q[2], q[3],
                ))
            }
            (None, None) => crate::math::Quat::identity(),
        };
        Ok(Pose::new(position, rotation))
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawMesh {
    Inline {
        vertices: Vec<[f64; 3]>,
        triangles: Vec<[usize; 3]>,
    },
    ObjPath {
        obj: String,
    },
}

impl RawMesh {
    fn build(&self, base_dir: &Path) -> Result<TriMesh, SceneError> {
        let mesh = match self {
            RawMesh::Inline { vertices, triangles } => TriMesh::new(vertices.clone(), triangles.clone()),
            RawMesh::ObjPath { obj } => mesh::load_obj(&base_dir.join(obj))?,
        };
        Ok(mesh.cleaned()?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRigid {
    name: String,
    mesh: RawMesh,
    pose: RawPose,
    mass: Option<f64>,
    friction: Option<f64>,
    #[serde(default)]
    com_offset: [f64; 3],
    #[serde(default)]
    collision_hulls: Vec<RawMesh>,
    color: Option<[u8; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDeformable {
    name: String,
    engine: EngineKind,
    material_class: MaterialClass,
    /// Inline particle set; mutually exclusive with `surface_points`.
    #[serde(default)]
    particles: Option<Vec<[f64; 3]>>,
    /// Surface point set from which the volume is filled at load time.
    #[serde(default)]
    surface_points: Option<Vec<[f64; 3]>>,
    youngs_modulus: Option<f64>,
    poisson_ratio: Option<f64>,
    density: Option<f64>,
    friction_angle: Option<f64>,
    yield_stress: Option<f64>,
    #[serde(default)]
    particle_spacing: Option<f64>,
    color: Option<[u8; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGripper {
    pose: RawPose,
    #[serde(default = "default_open_width")]
    width: f64,
    finger_half_extents: Option<[f64; 3]>,
    #[serde(default = "default_tool")]
    tool: ToolKind,
}

fn default_open_width() -> f64 {
    0.1
}

fn default_tool() -> ToolKind {
    ToolKind::ParallelJaw
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    task_id: TaskId,
    instruction: String,
    #[serde(default)]
    criterion_params: BTreeMap<String, f64>,
}

/// Load and validate a scene file. Omitted physical parameters are filled
/// from the default tables; every invariant in the scene schema is checked.
pub fn load_scene(path: &Path) -> Result<SceneDescription, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    load_scene_str(&text, base_dir, &path.display().to_string())
}

pub fn load_scene_str(
    text: &str,
    base_dir: &Path,
    origin: &str,
) -> Result<SceneDescription, SceneError> {
    let raw: RawScene = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;

    let mut rigid_objects = Vec::new();
    for r in &raw.rigid_objects {
        let mesh = r.mesh.build(base_dir)?;
        let collision_hulls = r
            .collision_hulls
            .iter()
            .map(|m| m.build(base_dir))
            .collect::<Result<Vec<_>, _>>()?;
        rigid_objects.push(RigidObjectSpec {
            name: r.name.clone(),
            mesh,
            pose: r.pose.build(&format!("rigid_objects[{}].pose", r.name))?,
            mass: r.mass.unwrap_or(DEFAULT_RIGID_MASS),
            friction: r.friction.unwrap_or(DEFAULT_RIGID_FRICTION),
            com_offset: r.com_offset,
            collision_hulls,
            color: r.color.unwrap_or_else(default_color),
        });
    }

    let mut deformable_objects = Vec::new();
    for d in &raw.deformable_objects {
        let spacing = d.particle_spacing.unwrap_or(DEFAULT_PARTICLE_SPACING);
        if spacing <= 0.0 {
            return Err(invalid(
                &format!("deformable_objects[{}].particle_spacing", d.name),
                "must be positive",
            ));
        }
        let particles = match (&d.particles, &d.surface_points) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    &format!("deformable_objects[{}]", d.name),
                    "give either particles or surface_points, not both",
                ))
            }
            (Some(p), None) => p.clone(),
            (None, Some(sp)) => {
                let pts: Vec<Vec3> = sp.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
                sample_volume_particles(&pts, raw.table_height, spacing)?
                    .into_iter()
                    .map(|p| [p.x, p.y, p.z])
                    .collect()
            }
            (None, None) => {
                return Err(invalid(
                    &format!("deformable_objects[{}]", d.name),
                    "needs particles or surface_points",
                ))
            }
        };
        let defaults = default_params(d.material_class);
        let friction_angle = match (d.material_class.needs_friction_angle(), d.friction_angle) {
            (true, given) => Some(given.unwrap_or_else(|| defaults.friction_angle.unwrap())),
            (false, Some(_)) => {
                return Err(invalid(
                    &format!("deformable_objects[{}].friction_angle", d.name),
                    format!("not allowed for material_class {}", d.material_class.name()),
                ))
            }
            (false, None) => None,
        };
        let yield_stress = match (d.material_class.needs_yield_stress(), d.yield_stress) {
            (true, given) => Some(given.unwrap_or_else(|| defaults.yield_stress.unwrap())),
            (false, Some(_)) => {
                return Err(invalid(
                    &format!("deformable_objects[{}].yield_stress", d.name),
                    format!("not allowed for material_class {}", d.material_class.name()),
                ))
            }
            (false, None) => None,
        };
        deformable_objects.push(DeformableObjectSpec {
            name: d.name.clone(),
            particles,
            engine: d.engine,
            material_class: d.material_class,
            youngs_modulus: d.youngs_modulus.unwrap_or(defaults.youngs_modulus),
            poisson_ratio: d.poisson_ratio.unwrap_or(defaults.poisson_ratio),
            density: d.density.unwrap_or(defaults.density),
            friction_angle,
            yield_stress,
            particle_spacing: spacing,
            color: d.color.unwrap_or_else(default_color),
        });
    }

    let tool = raw.gripper.tool;
    let gripper = GripperSpec {
        pose: raw.gripper.pose.build("gripper.pose")?,
        width: raw.gripper.width,
        finger_half_extents: raw.gripper.finger_half_extents.unwrap_or(match tool {
            ToolKind::ParallelJaw => [0.008, 0.012, 0.018],
            ToolKind::FlatPlate => [0.004, 0.045, 0.035],
        }),
        tool,
    };

    let scene = SceneDescription {
        gravity: raw.gravity,
        table_height: raw.table_height,
        rigid_objects,
        deformable_objects,
        gripper,
        workspace_bounds: raw.workspace_bounds,
        task: TaskSpec {
            task_id: raw.task.task_id,
            instruction: raw.task.instruction.clone(),
            criterion_params: raw.task.criterion_params.clone(),
        },
        camera: raw.camera.unwrap_or_default(),
    };
    validate_scene(&scene)?;
    Ok(scene)
}

fn validate_scene(scene: &SceneDescription) -> Result<(), SceneError> {
    let mut names: Vec<&str> = scene.object_names();
    names.sort_unstable();
    for w in names.windows(2) {
        if w[0] == w[1] {
            return Err(invalid("object names", format!("duplicate object name `{}`", w[0])));
        }
    }

    for r in &scene.rigid_objects {
        if r.mass <= 0.0 {
            return Err(invalid(&format!("rigid_objects[{}].mass", r.name), "must be > 0"));
        }
        if r.friction < 0.0 {
            return Err(invalid(
                &format!("rigid_objects[{}].friction", r.name),
                "must be >= 0",
            ));
        }
        if r.mesh.vertices.len() < 4 {
            return Err(invalid(
                &format!("rigid_objects[{}].mesh", r.name),
                "needs at least 4 vertices",
            ));
        }
        if !r.pose.is_finite() || r.pose.orientation_norm_error() > 1e-6 {
            return Err(invalid(
                &format!("rigid_objects[{}].pose", r.name),
                "orientation must be a unit quaternion",
            ));
        }
    }

    for d in &scene.deformable_objects {
        let field = |f: &str| format!("deformable_objects[{}].{f}", d.name);
        if d.particles.len() < 8 {
            return Err(invalid(
                &field("particles"),
                format!("particle count {} below minimum 8", d.particles.len()),
            ));
        }
        let floor = scene.table_height - d.particle_spacing / 2.0;
        for (i, p) in d.particles.iter().enumerate() {
            if p[2] < floor {
                return Err(invalid(
                    &field("particles"),
                    format!("particle {i} at z={} below table plane", p[2]),
                ));
            }
        }
        if !(d.poisson_ratio > 0.0 && d.poisson_ratio < 0.5) {
            return Err(invalid(&field("poisson_ratio"), "must lie in (0, 0.5)"));
        }
        if d.youngs_modulus <= 0.0 {
            return Err(invalid(&field("youngs_modulus"), "must be > 0"));
        }
        if d.density <= 0.0 {
            return Err(invalid(&field("density"), "must be > 0"));
        }
        if d.material_class.needs_friction_angle() != d.friction_angle.is_some() {
            return Err(invalid(
                &field("friction_angle"),
                format!(
                    "must be present exactly when material_class is sand (class is {})",
                    d.material_class.name()
                ),
            ));
        }
        if d.material_class.needs_yield_stress() != d.yield_stress.is_some() {
            return Err(invalid(
                &field("yield_stress"),
                format!(
                    "must be present exactly when material_class is metal or plasticine (class is {})",
                    d.material_class.name()
                ),
            ));
        }
        if d.engine == EngineKind::Mpm {
            // CFL guard: the solver substeps the 2 ms control tick; reject
            // parameter combinations that would need absurd substep counts.
            let substeps = crate::sim_mpm::required_substeps(d);
            if substeps > crate::sim_mpm::MAX_SUBSTEPS_PER_TICK {
                return Err(invalid(
                    &field("youngs_modulus"),
                    format!(
                        "CFL violation: parameters need {substeps} substeps per control tick (max {})",
                        crate::sim_mpm::MAX_SUBSTEPS_PER_TICK
                    ),
                ));
            }
        }
    }

    if !(0.0..=0.1).contains(&scene.gripper.width) {
        return Err(invalid(
            "gripper.width",
            format!("width {} outside [0.0, 0.1] (0.1 is fully open)", scene.gripper.width),
        ));
    }
    if !scene
        .workspace_bounds
        .contains(&scene.gripper.pose.translation())
    {
        return Err(invalid("gripper.pose", "gripper pose outside workspace_bounds"));
    }

    for key in scene.task.task_id.required_criterion_params() {
        if !scene.task.criterion_params.contains_key(*key) {
            return Err(invalid(
                "task.criterion_params",
                format!("missing required key `{key}` for task {}", scene.task.task_id.name()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_scene_json() -> String {
        r#"{
            "table_height": 0.0,
            "rigid_objects": [{
                "name": "box",
                "mesh": {"vertices": [[-0.02,-0.02,-0.02],[0.02,-0.02,-0.02],[-0.02,0.02,-0.02],[0.02,0.02,-0.02],[-0.02,-0.02,0.02],[0.02,-0.02,0.02],[-0.02,0.02,0.02],[0.02,0.02,0.02]],
                         "triangles": [[0,2,1],[1,2,3],[4,5,6],[5,7,6],[0,1,4],[1,5,4],[2,6,3],[3,6,7],[0,4,2],[2,4,6],[1,3,5],[3,7,5]]},
                "pose": {"position": [0.0, 0.0, 0.02]},
                "mass": 0.2
            }],
            "gripper": {"pose": {"position": [0.0, 0.0, 0.2]}},
            "workspace_bounds": {"min": [-0.5,-0.5,-0.01], "max": [0.5,0.5,0.5]},
            "task": {"task_id": "custom", "instruction": "do nothing"}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_scene_loads() {
        let scene = load_scene_str(&minimal_scene_json(), Path::new("."), "test").unwrap();
        assert_eq!(scene.rigid_objects.len(), 1);
        assert_eq!(scene.deformable_objects.len(), 0);
        // friction omitted -> default table value
        assert_eq!(scene.rigid_objects[0].friction, 0.5);
    }

    #[test]
    fn gripper_width_bound_enforced() {
        let text = minimal_scene_json().replace(
            r#""pose": {"position": [0.0, 0.0, 0.2]}"#,
            r#""pose": {"position": [0.0, 0.0, 0.2]}, "width": 0.15"#,
        );
        let err = load_scene_str(&text, Path::new("."), "test").unwrap_err();
        match err {
            SceneError::Validation { field, message } => {
                assert_eq!(field, "gripper.width");
                assert!(message.contains("0.1"));
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn malformed_json_reports_parse_error() {
        let err = load_scene_str("{not json", Path::new("."), "test").unwrap_err();
        assert!(matches!(err, SceneError::Parse { .. }));
    }

    #[test]
    fn scene_round_trips_through_serialization() {
        let scene = load_scene_str(&minimal_scene_json(), Path::new("."), "test").unwrap();
        let json = scene.to_json_string();
        let back: SceneDescription = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn default_params_follow_optional_field_rules() {
        let jelly = default_params(MaterialClass::Jelly);
        assert!(jelly.yield_stress.is_none() && jelly.friction_angle.is_none());
        let sand = default_params(MaterialClass::Sand);
        assert!(sand.friction_angle.is_some() && sand.yield_stress.is_none());
        let plasticine = default_params(MaterialClass::Plasticine);
        assert!(plasticine.yield_stress.is_some() && plasticine.friction_angle.is_none());
        let metal = default_params(MaterialClass::Metal);
        assert!(metal.yield_stress.is_some());
    }

    #[test]
    fn volume_sampling_fills_flat_patch() {
        // 4x4 covered cells at spacing 0.025 under a surface at 0.05:
        // two layers (0.0125, 0.0375) per column.
        let mut surface = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                surface.push(Vec3::new(
                    0.0125 + 0.025 * i as f64,
                    0.0125 + 0.025 * j as f64,
                    0.05,
                ));
            }
        }
        let particles = sample_volume_particles(&surface, 0.0, 0.025).unwrap();
        assert_eq!(particles.len(), 32);
        for p in &particles {
            assert!(p.z > 0.0 && p.z < 0.05);
        }
    }

    #[test]
    fn volume_sampling_rejects_flat_at_table() {
        let surface = vec![Vec3::new(0.0, 0.0, 0.0)];
        assert!(matches!(
            sample_volume_particles(&surface, 0.0, 0.01),
            Err(SceneError::EmptyVolume)
        ));
    }

    #[test]
    fn volume_sampling_matches_voxel_oracle_on_hemisphere() {
        // Hemispherical cap of radius 0.05 over the table.
        let r: f64 = 0.05;
        let spacing = 0.01;
        let mut surface = Vec::new();
        let n = 40;
        for i in 0..n {
            for j in 0..n {
                let x = -r + 2.0 * r * (i as f64 + 0.5) / n as f64;
                let y = -r + 2.0 * r * (j as f64 + 0.5) / n as f64;
                let d2 = x * x + y * y;
                if d2 <= r * r {
                    surface.push(Vec3::new(x, y, (r * r - d2).sqrt()));
                }
            }
        }
        let particles = sample_volume_particles(&surface, 0.0, spacing).unwrap();

        // Brute-force voxel fill over the same cells: count voxels whose
        // center column lies under the analytic cap height.
        let min_x = surface.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let min_y = surface.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let mut covered: std::collections::BTreeSet<(i64, i64)> = Default::default();
        for p in &surface {
            covered.insert((
                ((p.x - min_x) / spacing).floor() as i64,
                ((p.y - min_y) / spacing).floor() as i64,
            ));
        }
        let mut oracle_count = 0usize;
        let mut max_layer_error = 0usize;
        for &(ix, iy) in &covered {
            let cx = min_x + (ix as f64 + 0.5) * spacing;
            let cy = min_y + (iy as f64 + 0.5) * spacing;
            let d2 = cx * cx + cy * cy;
            let h = if d2 <= r * r { (r * r - d2).sqrt() } else { 0.0 };
            let layers = ((h - spacing / 2.0) / spacing).floor().max(-1.0) as i64 + 1;
            let got = particles
                .iter()
                .filter(|p| (p.x - cx).abs() < 1e-9 && (p.y - cy).abs() < 1e-9)
                .count();
            oracle_count += layers.max(0) as usize;
            max_layer_error = max_layer_error.max((got as i64 - layers).unsigned_abs() as usize);
        }
        // Within one voxel layer per column of the analytic fill.
        assert!(max_layer_error <= 1, "layer error {max_layer_error}");
        let diff = (particles.len() as i64 - oracle_count as i64).unsigned_abs() as usize;
        assert!(diff <= covered.len(), "count diff {diff} vs {} columns", covered.len());
    }

    #[test]
    fn missing_criterion_param_rejected() {
        let text = minimal_scene_json().replace(
            r#""task_id": "custom""#,
            r#""task_id": "non_toppling_push""#,
        );
        let err = load_scene_str(&text, Path::new("."), "test").unwrap_err();
        match err {
            SceneError::Validation { field, message } => {
                assert_eq!(field, "task.criterion_params");
                assert!(message.contains("target_x"));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
