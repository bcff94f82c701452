//! Symbolic action DSL and its deterministic lowering to end-effector
//! waypoints. The JSON wire format matches the proposal schema the sampling
//! and optimization prompts ask for.

use crate::math::{yaw_quat, Aabb, Pose, Vec3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_ACTIONS_PER_SEQUENCE: usize = 30;
pub const FULLY_OPEN_WIDTH: f64 = 0.1;
/// Path speed for translations, m/s.
pub const TRANSLATION_SPEED: f64 = 0.05;
/// Yaw speed for rotations, rad/s.
pub const ROTATION_SPEED: f64 = 0.5;
/// Floor on any waypoint duration, seconds.
pub const MIN_MOVE_DURATION: f64 = 0.2;
/// Fixed duration of grasp/release width changes, seconds.
pub const GRASP_DURATION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("no JSON object found in response text")]
    NoJsonFound,
    #[error("workspace violation at action {action_index}: waypoint {position:?} leaves workspace bounds")]
    WorkspaceViolation {
        action_index: usize,
        position: [f64; 3],
    },
    #[error("invalid parameter at action {action_index}: {message}")]
    InvalidParameter {
        action_index: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionKind {
    /// Horizontal end-effector translation at constant height.
    Push { delta_x: f64, delta_y: f64 },
    /// Upward translation along +z; delta is non-negative.
    Lift { delta_z: f64 },
    /// Downward translation along -z; delta is non-negative.
    Descend { delta_z: f64 },
    /// Set gripper width: 0.0 fully closed, 0.1 fully open.
    Grasp { width: f64 },
    /// Fully open the gripper.
    Release,
    /// Yaw the end-effector about the world z-axis, radians.
    Rotate { delta_yaw: f64 },
    /// Free translation.
    Move { delta_x: f64, delta_y: f64, delta_z: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicAction {
    pub kind: ActionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl SymbolicAction {
    pub fn new(kind: ActionKind) -> Self {
        SymbolicAction { kind, reasoning: None }
    }

    pub fn with_reasoning(kind: ActionKind, reasoning: impl Into<String>) -> Self {
        SymbolicAction {
            kind,
            reasoning: Some(reasoning.into()),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self.kind {
            ActionKind::Push { .. } => "PUSH",
            ActionKind::Lift { .. } => "LIFT",
            ActionKind::Descend { .. } => "DESCEND",
            ActionKind::Grasp { .. } => "GRASP",
            ActionKind::Release => "RELEASE",
            ActionKind::Rotate { .. } => "ROTATE",
            ActionKind::Move { .. } => "MOVE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub description: String,
    pub actions: Vec<SymbolicAction>,
}

impl ActionSequence {
    pub fn new(description: impl Into<String>, actions: Vec<SymbolicAction>) -> Self {
        ActionSequence {
            description: description.into(),
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// End-effector target plus gripper width held for `duration` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pose: Pose,
    pub width: f64,
    pub duration: f64,
}

/// One dense control-stream sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperCommand {
    pub pose: Pose,
    pub width: f64,
}

// ---------------------------------------------------------------------------
// Lowering (Action2Pose)
// ---------------------------------------------------------------------------

/// Deterministically lower a symbolic sequence to one waypoint per action,
/// tracking the running end-effector state from `start`.
pub fn action_to_pose(
    seq: &ActionSequence,
    start_pose: &Pose,
    start_width: f64,
    workspace: &Aabb,
) -> Result<Vec<Waypoint>, ActionError> {
    assert!(
        workspace.contains(&start_pose.translation()),
        "start pose must be inside the workspace"
    );
    let mut waypoints = Vec::with_capacity(seq.actions.len());
    let mut position = start_pose.translation();
    let mut rotation = start_pose.rotation();
    let mut width = start_width;

    for (index, action) in seq.actions.iter().enumerate() {
        let duration;
        match action.kind {
            ActionKind::Push { delta_x, delta_y } => {
                let delta = Vec3::new(delta_x, delta_y, 0.0);
                position += delta;
                duration = (delta.norm() / TRANSLATION_SPEED).max(MIN_MOVE_DURATION);
            }
            ActionKind::Move { delta_x, delta_y, delta_z } => {
                let delta = Vec3::new(delta_x, delta_y, delta_z);
                position += delta;
                duration = (delta.norm() / TRANSLATION_SPEED).max(MIN_MOVE_DURATION);
            }
            ActionKind::Lift { delta_z } => {
                if delta_z < 0.0 {
                    return Err(ActionError::InvalidParameter {
                        action_index: index,
                        message: format!("LIFT delta_z {delta_z} must be non-negative"),
                    });
                }
                position.z += delta_z;
                duration = (delta_z / TRANSLATION_SPEED).max(MIN_MOVE_DURATION);
            }
            ActionKind::Descend { delta_z } => {
                if delta_z < 0.0 {
                    return Err(ActionError::InvalidParameter {
                        action_index: index,
                        message: format!("DESCEND delta_z {delta_z} must be non-negative"),
                    });
                }
                position.z -= delta_z;
                duration = (delta_z / TRANSLATION_SPEED).max(MIN_MOVE_DURATION);
            }
            ActionKind::Rotate { delta_yaw } => {
                rotation = yaw_quat(delta_yaw) * rotation;
                duration = (delta_yaw.abs() / ROTATION_SPEED).max(MIN_MOVE_DURATION);
            }
            ActionKind::Grasp { width: w } => {
                if !(0.0..=FULLY_OPEN_WIDTH).contains(&w) {
                    return Err(ActionError::InvalidParameter {
                        action_index: index,
                        message: format!("GRASP width {w} outside [0.0, {FULLY_OPEN_WIDTH}]"),
                    });
                }
                width = w;
                duration = GRASP_DURATION;
            }
            ActionKind::Release => {
                width = FULLY_OPEN_WIDTH;
                duration = GRASP_DURATION;
            }
        }
        if !workspace.contains(&position) {
            return Err(ActionError::WorkspaceViolation {
                action_index: index,
                position: [position.x, position.y, position.z],
            });
        }
        waypoints.push(Waypoint {
            pose: Pose::new(position, rotation),
            width,
            duration,
        });
    }
    Ok(waypoints)
}

// ---------------------------------------------------------------------------
// Dense interpolation
// ---------------------------------------------------------------------------

/// Interpolate waypoints into a dense command stream at `control_rate` Hz:
/// linear position and width, spherical-linear orientation. Each segment
/// contributes `ceil(duration * rate)` commands ending exactly on its target.
pub fn interpolate_waypoints(
    waypoints: &[Waypoint],
    start_pose: &Pose,
    start_width: f64,
    control_rate: f64,
) -> Vec<GripperCommand> {
    assert!(control_rate > 0.0, "control_rate must be positive");
    let mut stream = Vec::new();
    let mut prev_pos = start_pose.translation();
    let mut prev_rot = start_pose.rotation();
    let mut prev_width = start_width;

    for wp in waypoints {
        let steps = (wp.duration * control_rate).ceil() as usize;
        let steps = steps.max(1);
        let target_pos = wp.pose.translation();
        let target_rot = wp.pose.rotation();
        for i in 1..=steps {
            let t = i as f64 / steps as f64;
            let pos = prev_pos + (target_pos - prev_pos) * t;
            let rot = prev_rot.slerp(&target_rot, t);
            let width = prev_width + (wp.width - prev_width) * t;
            stream.push(GripperCommand {
                pose: Pose::new(pos, rot),
                width,
            });
        }
        prev_pos = target_pos;
        prev_rot = target_rot;
        prev_width = wp.width;
    }
    stream
}

/// Command count each waypoint contributes at `control_rate`.
pub fn segment_lengths(waypoints: &[Waypoint], control_rate: f64) -> Vec<usize> {
    waypoints
        .iter()
        .map(|wp| ((wp.duration * control_rate).ceil() as usize).max(1))
        .collect()
}

// ---------------------------------------------------------------------------
// Proposal JSON parsing / serialization
// ---------------------------------------------------------------------------

/// A proposal rejected during parsing, with its index in the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaError {
    pub proposal_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedProposals {
    pub sequences: Vec<ActionSequence>,
    pub rejected: Vec<SchemaError>,
}

/// Extract the first valid JSON object from free-form text (tolerating
/// surrounding prose and markdown fences) and parse the
/// `{"action_proposals": [...]}` payload. A malformed proposal rejects only
/// itself; its siblings are kept.
pub fn parse_action_json(text: &str) -> Result<ParsedProposals, ActionError> {
    let value = extract_first_json_object(text).ok_or(ActionError::NoJsonFound)?;
    let proposals = value
        .get("action_proposals")
        .and_then(Value::as_array)
        .ok_or(ActionError::NoJsonFound)?;

    let mut out = ParsedProposals::default();
    for (index, proposal) in proposals.iter().enumerate() {
        match parse_proposal(proposal) {
            Ok(seq) => out.sequences.push(seq),
            Err(message) => out.rejected.push(SchemaError {
                proposal_index: index,
                message,
            }),
        }
    }
    Ok(out)
}

fn extract_first_json_object(text: &str) -> Option<Value> {
    for (pos, ch) in text.char_indices() {
        if ch != '{' {
            continue;
        }
        let mut iter = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        if let Some(Ok(v)) = iter.next() {
            if v.is_object() {
                return Some(v);
            }
        }
    }
    None
}

fn parse_proposal(proposal: &Value) -> Result<ActionSequence, String> {
    let obj = proposal.as_object().ok_or("proposal is not an object")?;
    let description = obj
        .get("description")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let raw_actions = obj
        .get("action_sequence")
        .and_then(Value::as_array)
        .ok_or("missing action_sequence array")?;
    if raw_actions.is_empty() {
        return Err("action_sequence is empty".into());
    }

    let mut actions = Vec::new();
    for (i, raw) in raw_actions.iter().enumerate() {
        let parsed = parse_action(raw).map_err(|e| format!("action {i}: {e}"))?;
        actions.extend(parsed);
    }
    if actions.is_empty() {
        return Err("action_sequence lowered to no actions".into());
    }
    if actions.len() > MAX_ACTIONS_PER_SEQUENCE {
        return Err(format!(
            "action_sequence has {} actions, limit is {MAX_ACTIONS_PER_SEQUENCE}",
            actions.len()
        ));
    }
    Ok(ActionSequence { description, actions })
}

fn get_f64(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, String> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("missing or non-numeric field `{key}`"))
}

fn get_reasoning(obj: &serde_json::Map<String, Value>) -> Option<String> {
    obj.get("reasoning").and_then(Value::as_str).map(str::to_string)
}

/// Parse one action entry. The optimizer's richer `move` form expands to a
/// MOVE plus a ROTATE restricted to yaw; nonzero roll/pitch deltas are a
/// schema error because the gripper model is top-down.
fn parse_action(raw: &Value) -> Result<Vec<SymbolicAction>, String> {
    let obj = raw.as_object().ok_or("action is not an object")?;
    let ty = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or("missing `type` field")?;
    let reasoning = get_reasoning(obj);
    let single = |kind: ActionKind| {
        Ok(vec![SymbolicAction {
            kind,
            reasoning: reasoning.clone(),
        }])
    };

    match ty {
        "PUSH" => single(ActionKind::Push {
            delta_x: get_f64(obj, "delta_x")?,
            delta_y: get_f64(obj, "delta_y")?,
        }),
        "LIFT" => {
            let dz = get_f64(obj, "delta_z")?;
            if dz < 0.0 {
                return Err(format!("LIFT delta_z {dz} must be non-negative"));
            }
            single(ActionKind::Lift { delta_z: dz })
        }
        "DESCEND" => {
            let dz = get_f64(obj, "delta_z")?;
            if dz < 0.0 {
                return Err(format!("DESCEND delta_z {dz} must be non-negative"));
            }
            single(ActionKind::Descend { delta_z: dz })
        }
        "GRASP" => {
            let width = get_f64(obj, "width")?;
            if !(0.0..=FULLY_OPEN_WIDTH).contains(&width) {
                return Err(format!("GRASP width {width} outside [0.0, {FULLY_OPEN_WIDTH}]"));
            }
            single(ActionKind::Grasp { width })
        }
        "RELEASE" => single(ActionKind::Release),
        "ROTATE" => single(ActionKind::Rotate {
            delta_yaw: get_f64(obj, "delta_yaw")?,
        }),
        "MOVE" => single(ActionKind::Move {
            delta_x: get_f64(obj, "delta_x")?,
            delta_y: get_f64(obj, "delta_y")?,
            delta_z: get_f64(obj, "delta_z")?,
        }),
        "move" => {
            let dx = get_f64(obj, "delta_x")?;
            let dy = get_f64(obj, "delta_y")?;
            let dz = get_f64(obj, "delta_z")?;
            let roll = obj.get("delta_roll").and_then(Value::as_f64).unwrap_or(0.0);
            let pitch = obj.get("delta_pitch").and_then(Value::as_f64).unwrap_or(0.0);
            let yaw = obj.get("delta_yaw").and_then(Value::as_f64).unwrap_or(0.0);
            if roll != 0.0 || pitch != 0.0 {
                return Err(format!(
                    "move with nonzero delta_roll/delta_pitch ({roll}, {pitch}) is unsupported; only yaw is controllable"
                ));
            }
            let mut out = Vec::new();
            if dx != 0.0 || dy != 0.0 || dz != 0.0 || yaw == 0.0 {
                out.push(SymbolicAction {
                    kind: ActionKind::Move { delta_x: dx, delta_y: dy, delta_z: dz },
                    reasoning: reasoning.clone(),
                });
            }
            if yaw != 0.0 {
                out.push(SymbolicAction {
                    kind: ActionKind::Rotate { delta_yaw: yaw },
                    reasoning,
                });
            }
            Ok(out)
        }
        "gripper_control" => {
            let width = get_f64(obj, "width")?;
            if !(0.0..=FULLY_OPEN_WIDTH).contains(&width) {
                return Err(format!(
                    "gripper_control width {width} outside [0.0, {FULLY_OPEN_WIDTH}]"
                ));
            }
            single(ActionKind::Grasp { width })
        }
        other => Err(format!("unknown action type `{other}`")),
    }
}

/// Serialize one action to its wire-format JSON object.
pub fn action_to_value(action: &SymbolicAction) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("type".into(), Value::String(action.type_name().into()));
    let mut num = |k: &str, v: f64| {
        obj.insert(k.into(), serde_json::json!(v));
    };
    match action.kind {
        ActionKind::Push { delta_x, delta_y } => {
            num("delta_x", delta_x);
            num("delta_y", delta_y);
        }
        ActionKind::Lift { delta_z } | ActionKind::Descend { delta_z } => num("delta_z", delta_z),
        ActionKind::Grasp { width } => num("width", width),
        ActionKind::Release => {}
        ActionKind::Rotate { delta_yaw } => num("delta_yaw", delta_yaw),
        ActionKind::Move { delta_x, delta_y, delta_z } => {
            num("delta_x", delta_x);
            num("delta_y", delta_y);
            num("delta_z", delta_z);
        }
    }
    if let Some(r) = &action.reasoning {
        obj.insert("reasoning".into(), Value::String(r.clone()));
    }
    Value::Object(obj)
}

pub fn sequence_to_value(seq: &ActionSequence) -> Value {
    serde_json::json!({
        "description": seq.description,
        "action_sequence": seq.actions.iter().map(action_to_value).collect::<Vec<_>>(),
    })
}

/// Serialize sequences as a proposals payload (the ℓ-prompt wire format).
pub fn sequences_to_json(seqs: &[ActionSequence]) -> String {
    let payload = serde_json::json!({
        "action_proposals": seqs.iter().map(sequence_to_value).collect::<Vec<_>>(),
    });
    serde_json::to_string_pretty(&payload).expect("serializable")
}
