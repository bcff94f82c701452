//! Action planning loop: sample K initial proposals, roll each out in
//! simulation, then iterate optimize -> rollout -> evaluate until success or
//! the iteration budget runs out. Every backend call and verdict lands in
//! the audit trail.

use crate::actions::{action_to_pose, interpolate_waypoints, ActionSequence};
use crate::backends::{BackendError, BackendSet, Verdict, VerdictSource};
use crate::math::{voxel_downsample, Aabb, Pose, Vec3};
use crate::render::{frame_filename, render_state, save_frame};
use crate::scene::{SceneDescription, TaskId, TaskSpec};
use crate::world::{StateSummary, World, CONTROL_RATE};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Voxel pitch for deformable keypoint downsampling in optimizer contexts.
pub const KEYPOINT_VOXEL_PITCH: f64 = 0.02;
/// Keypoint budget per deformable snapshot.
pub const MAX_KEYPOINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub action_sequence: ActionSequence,
    /// (primitive index, end-of-primitive state); truncated at the
    /// divergence point when `diverged` is set.
    pub per_primitive_states: Vec<(usize, StateSummary)>,
    /// Frame paths: fig_0 is the initial state, fig_i the end of primitive i.
    pub frames: Vec<String>,
    pub final_state: StateSummary,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RolloutTrace {
    pub fn succeeded_simulation(&self) -> bool {
        !self.diverged && self.failure.is_none()
    }
}

/// Roll out one action sequence from the scene's initial state: lower to
/// waypoints, interpolate at the control rate, step every engine, and record
/// an end-of-primitive snapshot (plus one rendered frame when `frames_dir`
/// is given). Deterministic for identical inputs.
pub fn sim_rollout(
    scene: &SceneDescription,
    seq: &ActionSequence,
    frames_dir: Option<&Path>,
) -> RolloutTrace {
    let mut world = match World::new(scene) {
        Ok(w) => w,
        Err(e) => {
            let initial = StateSummary {
                time: 0.0,
                gripper_pose: scene.gripper.pose,
                gripper_width: scene.gripper.width,
                rigid: vec![],
                deformable: vec![],
            };
            return RolloutTrace {
                action_sequence: seq.clone(),
                per_primitive_states: vec![],
                frames: vec![],
                final_state: initial,
                diverged: false,
                failure: Some(format!("scene rejected: {e}")),
            };
        }
    };
    let initial = world.summary();

    let mut frames = Vec::new();
    let mut render_frame = |n: usize, summary: &StateSummary| {
        if let Some(dir) = frames_dir {
            let name = frame_filename(n);
            let img = render_state(summary, scene, &scene.camera);
            if save_frame(&img, &dir.join(&name)).is_ok() {
                frames.push(name);
            }
        }
    };
    render_frame(0, &initial);

    let waypoints = match action_to_pose(
        seq,
        &scene.gripper.pose,
        scene.gripper.width,
        &scene.workspace_bounds,
    ) {
        Ok(w) => w,
        Err(e) => {
            return RolloutTrace {
                action_sequence: seq.clone(),
                per_primitive_states: vec![],
                frames,
                final_state: initial,
                diverged: false,
                failure: Some(e.to_string()),
            };
        }
    };

    let mut per_primitive_states = Vec::new();
    let mut diverged = false;
    let mut failure = None;
    let mut start_pose = scene.gripper.pose;
    let mut start_width = scene.gripper.width;

    'primitives: for (pi, wp) in waypoints.iter().enumerate() {
        let commands =
            interpolate_waypoints(std::slice::from_ref(wp), &start_pose, start_width, CONTROL_RATE);
        for cmd in &commands {
            if let Err(e) = world.step(cmd) {
                diverged = e.is_divergence();
                failure = Some(e.to_string());
                let snap = world.summary();
                per_primitive_states.push((pi, snap.clone()));
                render_frame(pi + 1, &snap);
                break 'primitives;
            }
        }
        start_pose = wp.pose;
        start_width = wp.width;
        let snap = world.summary();
        per_primitive_states.push((pi, snap.clone()));
        render_frame(pi + 1, &snap);
    }

    let final_state = world.summary();
    RolloutTrace {
        action_sequence: seq.clone(),
        per_primitive_states,
        frames,
        final_state,
        diverged,
        failure,
    }
}

// ---------------------------------------------------------------------------
// Optimization context
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableKeypoints {
    pub name: String,
    /// Voxel-downsampled representatives, at most [`MAX_KEYPOINTS`].
    pub keypoints: Vec<[f64; 3]>,
    pub bbox: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSnapshot {
    pub primitive_index: usize,
    pub gripper_pose: Pose,
    pub gripper_width: f64,
    pub rigid_poses: Vec<(String, Pose)>,
    pub deformables: Vec<DeformableKeypoints>,
}

/// One rollout's record inside the optimizer context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub rollout_index: usize,
    pub action_sequence: ActionSequence,
    pub snapshots: Vec<PrimitiveSnapshot>,
    /// Boundary frames (initial and final), in rollout order.
    pub frames: Vec<String>,
    pub verdict: Option<Verdict>,
    /// Programmatic distance-to-goal score (lower is better), when the task
    /// has a programmatic evaluator. Required by the CEM backend.
    pub score: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationContext {
    pub task: TaskSpec,
    pub workspace: Aabb,
    pub start_pose: Pose,
    pub start_width: f64,
    pub records: Vec<ContextRecord>,
}

fn summarize_state(summary: &StateSummary, primitive_index: usize) -> PrimitiveSnapshot {
    let mut deformables = Vec::new();
    for d in &summary.deformable {
        let points: Vec<Vec3> = d.particles.iter().map(|p| Vec3::from(*p)).collect();
        let bbox = Aabb::from_points(points.iter())
            .unwrap_or(Aabb::new(Vec3::zeros(), Vec3::zeros()));
        let mut pitch = KEYPOINT_VOXEL_PITCH;
        let mut keypoints = voxel_downsample(&points, pitch);
        while keypoints.len() > MAX_KEYPOINTS {
            pitch *= 2.0;
            keypoints = voxel_downsample(&points, pitch);
        }
        deformables.push(DeformableKeypoints {
            name: d.name.clone(),
            keypoints: keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            bbox,
        });
    }
    PrimitiveSnapshot {
        primitive_index,
        gripper_pose: summary.gripper_pose,
        gripper_width: summary.gripper_width,
        rigid_poses: summary.rigid.iter().map(|r| (r.name.clone(), r.pose)).collect(),
        deformables,
    }
}

/// Assemble the optimizer context from all traces so far, preserving rollout
/// order. Deformable states are voxel-downsampled; each record carries its
/// boundary frames and any verdict/score already known.
pub fn build_context(
    scene: &SceneDescription,
    traces: &[RolloutTrace],
    verdicts: &[Option<Verdict>],
    scores: &[Option<f64>],
) -> OptimizationContext {
    assert!(!traces.is_empty(), "build_context needs at least one trace");
    let records = traces
        .iter()
        .enumerate()
        .map(|(i, trace)| {
            let snapshots = trace
                .per_primitive_states
                .iter()
                .map(|(pi, s)| summarize_state(s, *pi))
                .collect();
            let frames = match trace.frames.len() {
                0 => vec![],
                1 => vec![trace.frames[0].clone()],
                n => vec![trace.frames[0].clone(), trace.frames[n - 1].clone()],
            };
            ContextRecord {
                rollout_index: i,
                action_sequence: trace.action_sequence.clone(),
                snapshots,
                frames,
                verdict: verdicts.get(i).cloned().flatten(),
                score: scores.get(i).cloned().flatten(),
                diverged: trace.diverged,
            }
        })
        .collect();
    OptimizationContext {
        task: scene.task.clone(),
        workspace: scene.workspace_bounds,
        start_pose: scene.gripper.pose,
        start_width: scene.gripper.width,
        records,
    }
}

// ---------------------------------------------------------------------------
// The planning loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Initial proposal count K.
    pub k: usize,
    /// Total rollout budget K_max (initial samples included).
    pub k_max: usize,
    pub seed: u64,
    /// Run directory for frames/traces; no frames are rendered when absent.
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    /// When false, rollouts are skipped and proposals go straight to the
    /// evaluator with the initial frame (the no-simulation ablation).
    pub rollout_enabled: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            k: 10,
            k_max: 15,
            seed: 0,
            out_dir: None,
            rollout_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Success,
    BudgetExhausted,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    /// 1-based rollout index the verdict belongs to.
    pub rollout_index: usize,
    pub verdict: Verdict,
    /// Initial-sample verdicts are recorded but never acted on.
    pub acted_on: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub selected: Option<ActionSequence>,
    pub iterations_used: usize,
    pub traces: Vec<RolloutTrace>,
    pub verdicts: Vec<VerdictRecord>,
    pub termination: Termination,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
}

fn trace_dir(out_dir: Option<&Path>, k: usize) -> Option<PathBuf> {
    out_dir.map(|d| {
        let dir = d.join("traces").join(k.to_string());
        let _ = std::fs::create_dir_all(&dir);
        dir
    })
}

/// A rollout with simulation disabled: the trace carries only the initial
/// state and frame, mirroring a proposer-verifier loop without physics.
fn stub_rollout(scene: &SceneDescription, seq: &ActionSequence, dir: Option<&Path>) -> RolloutTrace {
    let initial = match World::new(scene) {
        Ok(w) => w.summary(),
        Err(e) => {
            return RolloutTrace {
                action_sequence: seq.clone(),
                per_primitive_states: vec![],
                frames: vec![],
                final_state: StateSummary {
                    time: 0.0,
                    gripper_pose: scene.gripper.pose,
                    gripper_width: scene.gripper.width,
                    rigid: vec![],
                    deformable: vec![],
                },
                diverged: false,
                failure: Some(format!("scene rejected: {e}")),
            }
        }
    };
    let mut frames = Vec::new();
    if let Some(dir) = dir {
        let img = render_state(&initial, scene, &scene.camera);
        if save_frame(&img, &dir.join(frame_filename(0))).is_ok() {
            frames.push(frame_filename(0));
        }
    }
    RolloutTrace {
        action_sequence: seq.clone(),
        per_primitive_states: vec![],
        frames,
        final_state: initial,
        diverged: false,
        failure: None,
    }
}

/// Run the planning loop over pluggable sampler/optimizer/evaluator
/// backends. Initial samples are rolled out but only optimizer outputs are
/// evaluated for success; a successful initial sample cannot terminate the
/// loop by itself. Rollout divergences are recorded as failed rollouts and
/// never abort the plan.
pub fn plan(scene: &SceneDescription, backends: &mut BackendSet, config: &PlanConfig) -> PlanResult {
    assert!(config.k >= 1, "K must be at least 1");
    assert!(config.k_max >= config.k + 1, "K_max must exceed K");

    let mut result = PlanResult {
        selected: None,
        iterations_used: 0,
        traces: Vec::new(),
        verdicts: Vec::new(),
        termination: Termination::BudgetExhausted,
        backend_error: None,
    };
    let mut scores: Vec<Option<f64>> = Vec::new();
    let out_dir = config.out_dir.as_deref();
    let has_programmatic = scene.task.task_id != TaskId::Custom;

    let rollout = |seq: &ActionSequence, k: usize| -> RolloutTrace {
        let dir = trace_dir(out_dir, k);
        if config.rollout_enabled {
            sim_rollout(scene, seq, dir.as_deref())
        } else {
            stub_rollout(scene, seq, dir.as_deref())
        }
    };
    let score_of = |trace: &RolloutTrace| -> Option<f64> {
        if !has_programmatic || !config.rollout_enabled {
            return None;
        }
        Some(crate::backends::eval::task_score(&scene.task, scene, trace))
    };

    // Initial sampling: K sampler calls, one proposal each.
    for k in 1..=config.k {
        backends.log(&format!("sample call {k}"));
        let seq = match backends.sampler.sample(scene, config.k, config.seed) {
            Ok(s) => s,
            Err(e) => {
                result.termination = Termination::BackendError;
                result.backend_error = Some(format!("sampler: {e}"));
                return result;
            }
        };
        let trace = rollout(&seq, k);
        result.iterations_used = k;
        // Recorded for context enrichment, never acted on.
        if has_programmatic && config.rollout_enabled {
            if let Ok(v) = crate::backends::eval::programmatic_evaluate(
                scene.task.task_id,
                &scene.task.criterion_params,
                scene,
                &trace.final_state,
            ) {
                result.verdicts.push(VerdictRecord {
                    rollout_index: k,
                    verdict: v,
                    acted_on: false,
                });
            }
        }
        scores.push(score_of(&trace));
        result.traces.push(trace);
    }

    // Optimization iterations.
    for k in config.k + 1..=config.k_max {
        let verdict_by_trace: Vec<Option<Verdict>> = (0..result.traces.len())
            .map(|i| {
                result
                    .verdicts
                    .iter()
                    .find(|v| v.rollout_index == i + 1)
                    .map(|v| v.verdict.clone())
            })
            .collect();
        let context = build_context(scene, &result.traces, &verdict_by_trace, &scores);
        backends.log(&format!("optimize call at k={k}"));

        let mut inner_rollout = |seq: &ActionSequence| -> RolloutTrace { sim_rollout(scene, seq, None) };
        let seq = match backends.optimizer.optimize(&context, scene, &mut inner_rollout) {
            Ok(s) => s,
            Err(BackendError::MalformedAfterRetries { .. }) if k < config.k_max => {
                // Iteration consumed; keep going while budget remains.
                result.backend_error = Some("optimizer produced no valid proposal".into());
                continue;
            }
            Err(e) => {
                result.termination = Termination::BackendError;
                result.backend_error = Some(format!("optimizer: {e}"));
                return result;
            }
        };

        let trace = rollout(&seq, k);
        result.iterations_used = k;
        backends.log(&format!("evaluate call at k={k}"));
        let verdict = match backends.evaluator.evaluate(scene, &trace) {
            Ok(v) => v,
            Err(BackendError::MalformedAfterRetries { .. }) => Verdict {
                success: false,
                rationale: "evaluator response unusable after retries; fail-safe verdict".into(),
                source: VerdictSource::Llm,
            },
            Err(e) => {
                scores.push(score_of(&trace));
                result.traces.push(trace);
                result.termination = Termination::BackendError;
                result.backend_error = Some(format!("evaluator: {e}"));
                return result;
            }
        };
        result.verdicts.push(VerdictRecord {
            rollout_index: k,
            verdict: verdict.clone(),
            acted_on: true,
        });
        scores.push(score_of(&trace));
        result.traces.push(trace);

        if verdict.success {
            result.selected = Some(seq);
            result.termination = Termination::Success;
            break;
        }
    }

    result
}

// ---------------------------------------------------------------------------
// Run-directory persistence
// ---------------------------------------------------------------------------

/// Persist the canonical result and per-trace state files:
/// `plan.json`, `traces/<k>/states.jsonl` (frames are written during the
/// rollouts themselves).
pub fn persist_plan(result: &PlanResult, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(result).expect("plan result serializes");
    std::fs::write(dir.join("plan.json"), json)?;
    for (i, trace) in result.traces.iter().enumerate() {
        let tdir = dir.join("traces").join((i + 1).to_string());
        std::fs::create_dir_all(&tdir)?;
        let mut lines = String::new();
        for (pi, state) in &trace.per_primitive_states {
            let line = serde_json::json!({
                "primitive_index": pi,
                "state": state,
            });
            lines.push_str(&serde_json::to_string(&line).expect("state serializes"));
            lines.push('\n');
        }
        std::fs::write(tdir.join("states.jsonl"), lines)?;
    }
    Ok(())
}

pub fn load_plan(dir: &Path) -> std::io::Result<PlanResult> {
    let text = std::fs::read_to_string(dir.join("plan.json"))?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
