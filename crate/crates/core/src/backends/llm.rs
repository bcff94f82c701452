//! Chat-service client for the sampler/optimizer/evaluator roles: a
//! provider-agnostic chat-completions wire protocol, versioned prompt
//! templates, and a fixture transport that replays recorded transcripts so
//! the whole path tests offline.

use crate::actions::{parse_action_json, ActionSequence};
use crate::backends::{BackendError, Evaluator, Optimizer, Sampler, Verdict, VerdictSource};
use crate::math::Vec3;
use crate::planner::{OptimizationContext, RolloutTrace};
use crate::scene::{MaterialClass, MaterialParams, SceneDescription, TaskId};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const ENV_ENDPOINT: &str = "SIMPACT_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "SIMPACT_LLM_API_KEY";
pub const ENV_MODEL: &str = "SIMPACT_LLM_MODEL";

pub const SAMPLE_PROMPT: &str = include_str!("../../prompts/sample.txt");
pub const OPTIMIZE_PROMPT: &str = include_str!("../../prompts/optimize.txt");
pub const EVALUATE_PROMPT: &str = include_str!("../../prompts/evaluate.txt");
pub const INFER_PARAMS_PROMPT: &str = include_str!("../../prompts/infer_params.txt");

/// Proposals requested per sampling call; multiple smaller queries encourage
/// diversity across the batch.
pub const SAMPLE_BATCH: usize = 5;

/// One chat request: a system prompt, a user text block, and optional image
/// attachments (raw PNG bytes).
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub images: Vec<Vec<u8>>,
    pub temperature: f64,
    pub model: String,
}

impl ChatRequest {
    /// Stable content hash identifying this request in fixture files.
    pub fn request_hash(&self) -> String {
        let image_hashes: Vec<String> = self
            .images
            .iter()
            .map(|bytes| hex_digest(bytes))
            .collect();
        let canonical = serde_json::json!({
            "system": self.system,
            "user": self.user,
            "images": image_hashes,
            "temperature": self.temperature,
            "model": self.model,
        });
        hex_digest(canonical.to_string().as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub trait ChatTransport: Send {
    fn send(&mut self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Live HTTPS transport speaking the chat-completions shape. Endpoint and
/// credentials come from the environment.
pub struct HttpTransport {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| BackendError::MissingCredentials(format!("{ENV_ENDPOINT} not set")))?;
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| BackendError::MissingCredentials(format!("{ENV_API_KEY} not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpTransport {
            endpoint,
            api_key,
            client,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&mut self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut user_content = vec![serde_json::json!({"type": "text", "text": request.user})];
        for image in &request.images {
            let b64 = base64::engine::general_purpose::STANDARD.encode(image);
            user_content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        let body = serde_json::json!({
            "model": request.model,
            "temperature": request.temperature,
            "max_tokens": 4096,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": user_content},
            ],
        });
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureLine {
    request_hash: String,
    response: String,
}

/// Replays recorded transcripts keyed by request hash. Unknown requests are
/// transport errors, so tests can never silently go to the network.
pub struct FixtureTransport {
    responses: BTreeMap<String, Vec<String>>,
    cursor: BTreeMap<String, usize>,
}

impl FixtureTransport {
    pub fn new() -> Self {
        FixtureTransport {
            responses: BTreeMap::new(),
            cursor: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Transport(format!("fixture {}: {e}", path.display())))?;
        let mut this = FixtureTransport::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine = serde_json::from_str(line).map_err(|e| {
                BackendError::Transport(format!("fixture {} line {}: {e}", path.display(), i + 1))
            })?;
            this.insert(parsed.request_hash, parsed.response);
        }
        Ok(this)
    }

    pub fn insert(&mut self, request_hash: String, response: String) {
        self.responses.entry(request_hash).or_default().push(response);
    }

    /// Register a response for a request built by the same prompt builders.
    pub fn insert_for(&mut self, request: &ChatRequest, response: impl Into<String>) {
        self.insert(request.request_hash(), response.into());
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (hash, responses) in &self.responses {
            for response in responses {
                let line = FixtureLine {
                    request_hash: hash.clone(),
                    response: response.clone(),
                };
                out.push_str(&serde_json::to_string(&line).expect("fixture serializes"));
                out.push('\n');
            }
        }
        out
    }
}

impl Default for FixtureTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatTransport for FixtureTransport {
    fn send(&mut self, request: &ChatRequest) -> Result<String, BackendError> {
        let hash = request.request_hash();
        let responses = self.responses.get(&hash).ok_or_else(|| {
            BackendError::Transport(format!("no fixture recorded for request {hash}"))
        })?;
        let cursor = self.cursor.entry(hash.clone()).or_insert(0);
        // Repeated identical requests replay successive recordings, then
        // stick on the last one.
        let idx = (*cursor).min(responses.len() - 1);
        *cursor += 1;
        Ok(responses[idx].clone())
    }
}

/// Chat client shared by the llm_* operations.
pub struct LlmClient {
    pub transport: Box<dyn ChatTransport>,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
}

impl LlmClient {
    pub fn new(transport: Box<dyn ChatTransport>, model: impl Into<String>) -> Self {
        LlmClient {
            transport,
            model: model.into(),
            temperature: 0.7,
            max_retries: 2,
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gemini-2.5-pro".to_string());
        Ok(LlmClient::new(Box::new(HttpTransport::from_env()?), model))
    }

    fn request(&self, system: &str, user: String, images: Vec<Vec<u8>>) -> ChatRequest {
        ChatRequest {
            system: system.to_string(),
            user,
            images,
            temperature: self.temperature,
            model: self.model.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Scene-context block: object and end-effector coordinates in the world
/// frame plus workspace constraints.
pub fn scene_context_block(scene: &SceneDescription) -> String {
    let mut out = String::new();
    let ws = scene.workspace_bounds;
    out.push_str(&format!(
        "Workspace bounds (m): x in [{:.3}, {:.3}], y in [{:.3}, {:.3}], z in [{:.3}, {:.3}]; table plane z = {:.3}.\n",
        ws.min[0], ws.max[0], ws.min[1], ws.max[1], ws.min[2], ws.max[2], scene.table_height
    ));
    let g = scene.gripper.pose.translation();
    out.push_str(&format!(
        "End-effector at ({:.3}, {:.3}, {:.3}), gripper width {:.3} m (0.0 closed, 0.1 open), tool {:?}.\n",
        g.x, g.y, g.z, scene.gripper.width, scene.gripper.tool
    ));
    for obj in &scene.rigid_objects {
        let p = obj.pose.translation();
        let bbox = obj.mesh.aabb().expect("mesh");
        let e = bbox.max_v() - bbox.min_v();
        out.push_str(&format!(
            "Rigid object \"{}\": position ({:.3}, {:.3}, {:.3}), bounding box {:.3} x {:.3} x {:.3} m, mass {:.3} kg, friction {:.2}.\n",
            obj.name, p.x, p.y, p.z, e.x, e.y, e.z, obj.mass, obj.friction
        ));
    }
    for obj in &scene.deformable_objects {
        let pts = obj.particle_positions();
        let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let bbox = crate::math::Aabb::from_points(pts.iter()).expect("particles");
        let e = bbox.max_v() - bbox.min_v();
        out.push_str(&format!(
            "Deformable object \"{}\" ({:?}, {}): centroid ({:.3}, {:.3}, {:.3}), extents {:.3} x {:.3} x {:.3} m, {} particles.\n",
            obj.name,
            obj.engine,
            obj.material_class.name(),
            c.x, c.y, c.z, e.x, e.y, e.z,
            pts.len()
        ));
    }
    out
}

/// Published success-condition text per task, handed to the evaluator.
pub fn success_condition_text(task_id: TaskId, instruction: &str) -> String {
    match task_id {
        TaskId::NonTopplingPush => {
            "The pushed object does not topple and aligns horizontally with the others.".into()
        }
        TaskId::BowlStacking => "The upper bowl stably lies inside the lower bowl.".into(),
        TaskId::Pivoting => "The box reaches a vertical pose leaning against the support.".into(),
        TaskId::ShapeRope => {
            "The U shape of the deformed rope has an opening ratio in [0.5, 2.0].".into()
        }
        TaskId::ShapeDough => "Two sides of the dough have a ratio within 1.5.".into(),
        TaskId::Custom => instruction.to_string(),
    }
}

pub fn build_sample_request(
    client: &LlmClient,
    scene: &SceneDescription,
    initial_frame: Option<&[u8]>,
    num_proposals: usize,
) -> ChatRequest {
    let system = fill(
        SAMPLE_PROMPT,
        &[
            ("num_proposals", num_proposals.to_string()),
            ("scene_context", scene_context_block(scene)),
            ("instruction", scene.task.instruction.clone()),
        ],
    );
    client.request(
        &system,
        format!(
            "Propose {num_proposals} action plans for: {}",
            scene.task.instruction
        ),
        initial_frame.map(|f| vec![f.to_vec()]).unwrap_or_default(),
    )
}

fn context_rollouts_block(context: &OptimizationContext) -> String {
    let mut out = String::new();
    for record in &context.records {
        out.push_str(&format!(
            "## Rollout {} {}\n",
            record.rollout_index,
            if record.diverged { "(diverged)" } else { "" }
        ));
        out.push_str(&format!(
            "actions: {}\n",
            serde_json::to_string(&crate::actions::sequence_to_value(&record.action_sequence))
                .expect("serializes")
        ));
        for snap in &record.snapshots {
            let g = snap.gripper_pose.translation();
            out.push_str(&format!(
                "after primitive {}: gripper ({:.3}, {:.3}, {:.3}) width {:.3}",
                snap.primitive_index, g.x, g.y, g.z, snap.gripper_width
            ));
            for (name, pose) in &snap.rigid_poses {
                let p = pose.translation();
                out.push_str(&format!(
                    "; {} at ({:.3}, {:.3}, {:.3}) tilt {:.1} deg",
                    name,
                    p.x,
                    p.y,
                    p.z,
                    pose.tilt_from_vertical().to_degrees()
                ));
            }
            for d in &snap.deformables {
                out.push_str(&format!(
                    "; {} bbox [{:.3},{:.3},{:.3}]..[{:.3},{:.3},{:.3}] with {} keypoints",
                    d.name,
                    d.bbox.min[0], d.bbox.min[1], d.bbox.min[2],
                    d.bbox.max[0], d.bbox.max[1], d.bbox.max[2],
                    d.keypoints.len()
                ));
            }
            out.push('\n');
        }
        if let Some(v) = &record.verdict {
            out.push_str(&format!("verdict: {} ({})\n", v.success, v.rationale));
        }
        if !record.frames.is_empty() {
            out.push_str(&format!("frames: {}\n", record.frames.join(", ")));
        }
        out.push('\n');
    }
    out
}

pub fn build_optimize_request(
    client: &LlmClient,
    context: &OptimizationContext,
    frames: Vec<Vec<u8>>,
) -> ChatRequest {
    let ws = context.workspace;
    let system = fill(
        OPTIMIZE_PROMPT,
        &[
            ("instruction", context.task.instruction.clone()),
            (
                "workspace_context",
                format!(
                    "x in [{:.3}, {:.3}], y in [{:.3}, {:.3}], z in [{:.3}, {:.3}]",
                    ws.min[0], ws.max[0], ws.min[1], ws.max[1], ws.min[2], ws.max[2]
                ),
            ),
            ("rollouts", context_rollouts_block(context)),
        ],
    );
    client.request(
        &system,
        "Analyze the rollouts above and produce exactly one optimized action plan.".into(),
        frames,
    )
}

pub fn build_evaluate_request(
    client: &LlmClient,
    scene: &SceneDescription,
    final_state_text: &str,
    final_frame: Option<&[u8]>,
) -> ChatRequest {
    let system = fill(
        EVALUATE_PROMPT,
        &[
            ("instruction", scene.task.instruction.clone()),
            (
                "success_condition",
                success_condition_text(scene.task.task_id, &scene.task.instruction),
            ),
            ("final_state", final_state_text.to_string()),
        ],
    );
    client.request(
        &system,
        "Judge the rollout and return the JSON verdict.".into(),
        final_frame.map(|f| vec![f.to_vec()]).unwrap_or_default(),
    )
}

pub fn build_infer_params_request(
    client: &LlmClient,
    object_label: &str,
    instruction: &str,
    frame: Option<&[u8]>,
) -> ChatRequest {
    let system = fill(
        INFER_PARAMS_PROMPT,
        &[
            ("object", object_label.to_string()),
            ("instruction", instruction.to_string()),
        ],
    );
    client.request(
        &system,
        format!("Infer the simulation parameters for \"{object_label}\"."),
        frame.map(|f| vec![f.to_vec()]).unwrap_or_default(),
    )
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Gather `n` proposals over `ceil(n / SAMPLE_BATCH)` requests, retrying
/// malformed responses up to `max_retries`. Returns what it has (flagged via
/// Err only when nothing parsed at all).
pub fn llm_sample(
    client: &mut LlmClient,
    scene: &SceneDescription,
    initial_frame: Option<&[u8]>,
    n: usize,
) -> Result<Vec<ActionSequence>, BackendError> {
    let mut collected = Vec::new();
    let mut last_error = String::new();
    let mut remaining = n;
    while remaining > 0 {
        let want = remaining.min(SAMPLE_BATCH);
        let request = build_sample_request(client, scene, initial_frame, want);
        let mut got_any = false;
        for _attempt in 0..=client.max_retries {
            let response = client.transport.send(&request)?;
            match parse_action_json(&response) {
                Ok(parsed) if !parsed.sequences.is_empty() => {
                    for rejected in &parsed.rejected {
                        log::warn!(
                            "proposal {} rejected: {}",
                            rejected.proposal_index,
                            rejected.message
                        );
                    }
                    collected.extend(parsed.sequences);
                    got_any = true;
                    break;
                }
                Ok(_) => last_error = "all proposals failed schema validation".into(),
                Err(e) => last_error = e.to_string(),
            }
        }
        if !got_any {
            // A batch produced nothing valid: return what earlier batches
            // yielded, flagged, rather than spinning on new requests.
            break;
        }
        // A partially valid batch consumes its slot; rejected proposals are
        // not re-requested.
        remaining -= want;
    }
    if collected.is_empty() {
        return Err(BackendError::MalformedAfterRetries {
            attempts: client.max_retries + 1,
            last_error,
        });
    }
    collected.truncate(n);
    Ok(collected)
}

/// One optimized sequence from the full rollout context. A response with
/// multiple proposals keeps the first and logs a warning.
pub fn llm_optimize(
    client: &mut LlmClient,
    context: &OptimizationContext,
    frames: Vec<Vec<u8>>,
) -> Result<ActionSequence, BackendError> {
    let request = build_optimize_request(client, context, frames);
    let mut last_error = String::new();
    for _attempt in 0..=client.max_retries {
        let response = client.transport.send(&request)?;
        match parse_action_json(&response) {
            Ok(parsed) if !parsed.sequences.is_empty() => {
                if parsed.sequences.len() > 1 {
                    log::warn!(
                        "optimizer returned {} proposals; taking the first",
                        parsed.sequences.len()
                    );
                }
                return Ok(parsed.sequences.into_iter().next().unwrap());
            }
            Ok(parsed) => {
                last_error = parsed
                    .rejected
                    .first()
                    .map(|r| r.message.clone())
                    .unwrap_or_else(|| "no proposals in response".into());
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(BackendError::MalformedAfterRetries {
        attempts: client.max_retries + 1,
        last_error,
    })
}

/// Boolean verdict plus rationale from the final frame and state. An
/// unusable reply after retries becomes a flagged failure verdict.
pub fn llm_evaluate(
    client: &mut LlmClient,
    scene: &SceneDescription,
    final_state_text: &str,
    final_frame: Option<&[u8]>,
) -> Result<Verdict, BackendError> {
    let request = build_evaluate_request(client, scene, final_state_text, final_frame);
    let mut last_error = String::new();
    for _attempt in 0..=client.max_retries {
        let response = client.transport.send(&request)?;
        if let Some(value) = extract_json(&response) {
            if let Some(success) = value.get("success").and_then(|v| v.as_bool()) {
                return Ok(Verdict {
                    success,
                    rationale: value
                        .get("rationale")
                        .and_then(|v| v.as_str())
                        .unwrap_or("")
                        .to_string(),
                    source: VerdictSource::Llm,
                });
            }
            last_error = "missing boolean `success` key".into();
        } else {
            last_error = "no JSON object in response".into();
        }
    }
    Ok(Verdict {
        success: false,
        rationale: format!("unparseable evaluator reply after retries ({last_error}); fail-safe"),
        source: VerdictSource::Llm,
    })
}

fn extract_json(text: &str) -> Option<serde_json::Value> {
    for (pos, ch) in text.char_indices() {
        if ch != '{' {
            continue;
        }
        let mut iter = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = iter.next() {
            if v.is_object() {
                return Some(v);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredParams {
    pub simulator: String,
    pub mass: Option<f64>,
    pub friction: Option<f64>,
    pub material: Option<MaterialClass>,
    pub params: Option<MaterialParams>,
    pub warnings: Vec<String>,
}

/// Run the five-question parameter-inference protocol for one object.
/// Out-of-range values are clamped to documented physical bounds with a
/// warning; an unknown material is an error so the caller can fall back to
/// scene-file values or the default table.
pub fn llm_infer_params(
    client: &mut LlmClient,
    object_label: &str,
    instruction: &str,
    frame: Option<&[u8]>,
) -> Result<InferredParams, BackendError> {
    let request = build_infer_params_request(client, object_label, instruction, frame);
    let mut last_error = String::new();
    for _attempt in 0..=client.max_retries {
        let response = client.transport.send(&request)?;
        let Some(value) = extract_json(&response) else {
            last_error = "no JSON object in response".into();
            continue;
        };
        let Some(simulator) = value.get("simulator").and_then(|v| v.as_str()) else {
            last_error = "missing `simulator` key".into();
            continue;
        };
        let mut warnings = Vec::new();
        let mut clamp = |name: &str, v: f64, lo: f64, hi: f64| -> f64 {
            if v < lo || v > hi {
                let clamped = v.clamp(lo, hi);
                warnings.push(format!("{name} {v} out of range [{lo}, {hi}], clamped to {clamped}"));
                clamped
            } else {
                v
            }
        };
        let num = |key: &str| value.get(key).and_then(|v| v.as_f64());

        let material = match value.get("material").and_then(|v| v.as_str()) {
            Some(name) => Some(MaterialClass::parse(name).ok_or_else(|| {
                BackendError::Unsupported(format!("unknown material class `{name}`"))
            })?),
            None => None,
        };

        let params = if simulator != "rigid" {
            let class = material.unwrap_or(MaterialClass::Jelly);
            let defaults = crate::scene::default_params(class);
            let e = clamp("youngs_modulus", num("youngs_modulus").unwrap_or(defaults.youngs_modulus), 1e2, 1e9);
            let nu = clamp("poisson_ratio", num("poisson_ratio").unwrap_or(defaults.poisson_ratio), 0.01, 0.49);
            let rho = clamp("density", num("density").unwrap_or(defaults.density), 10.0, 2e4);
            let friction_angle = num("friction_angle")
                .map(|v| clamp("friction_angle", v, 5.0, 60.0))
                .or(defaults.friction_angle);
            let yield_stress = num("yield_stress")
                .map(|v| clamp("yield_stress", v, 1e2, 1e7))
                .or(defaults.yield_stress);
            Some(MaterialParams {
                youngs_modulus: e,
                poisson_ratio: nu,
                density: rho,
                friction_angle: if class.needs_friction_angle() { friction_angle } else { None },
                yield_stress: if class.needs_yield_stress() { yield_stress } else { None },
            })
        } else {
            None
        };

        return Ok(InferredParams {
            simulator: simulator.to_string(),
            mass: num("mass").map(|v| clamp("mass", v, 1e-3, 50.0)),
            friction: num("friction").map(|v| clamp("friction", v, 0.0, 2.0)),
            material,
            params,
            warnings,
        });
    }
    Err(BackendError::MalformedAfterRetries {
        attempts: client.max_retries + 1,
        last_error,
    })
}

// ---------------------------------------------------------------------------
// Backend adapters
// ---------------------------------------------------------------------------

/// Sampler backend over [`llm_sample`]: fetches a batch on first use and
/// serves one proposal per planner call.
pub struct LlmSampler {
    pub client: LlmClient,
    queue: Vec<ActionSequence>,
    fetched: bool,
}

impl LlmSampler {
    pub fn new(client: LlmClient) -> Self {
        LlmSampler {
            client,
            queue: Vec::new(),
            fetched: false,
        }
    }
}

impl Sampler for LlmSampler {
    fn sample(
        &mut self,
        scene: &SceneDescription,
        total: usize,
        _seed: u64,
    ) -> Result<ActionSequence, BackendError> {
        if !self.fetched {
            let initial = crate::world::initial_summary(scene);
            let image = crate::render::render_state(&initial, scene, &scene.camera);
            let mut png = Vec::new();
            image
                .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
                .ok();
            let mut batch = llm_sample(&mut self.client, scene, Some(&png), total.max(1))?;
            batch.reverse();
            self.queue = batch;
            self.fetched = true;
        }
        self.queue.pop().ok_or(BackendError::MalformedAfterRetries {
            attempts: 1,
            last_error: "fewer valid proposals than requested".into(),
        })
    }
}

pub struct LlmOptimizer {
    pub client: LlmClient,
    /// Run directory holding trace frames to attach, when present.
    pub frames_root: Option<std::path::PathBuf>,
}

impl Optimizer for LlmOptimizer {
    fn optimize(
        &mut self,
        context: &OptimizationContext,
        _scene: &SceneDescription,
        _rollout: &mut dyn FnMut(&ActionSequence) -> RolloutTrace,
    ) -> Result<ActionSequence, BackendError> {
        let mut frames = Vec::new();
        if let Some(root) = &self.frames_root {
            for record in &context.records {
                for frame in &record.frames {
                    let path = root
                        .join("traces")
                        .join((record.rollout_index + 1).to_string())
                        .join(frame);
                    if let Ok(bytes) = std::fs::read(path) {
                        frames.push(bytes);
                    }
                }
            }
        }
        llm_optimize(&mut self.client, context, frames)
    }
}

pub struct LlmEvaluator {
    pub client: LlmClient,
    pub frames_root: Option<std::path::PathBuf>,
}

impl Evaluator for LlmEvaluator {
    fn evaluate(
        &mut self,
        scene: &SceneDescription,
        trace: &RolloutTrace,
    ) -> Result<Verdict, BackendError> {
        let state_text = serde_json::to_string(&trace.final_state).expect("state serializes");
        let frame = self
            .frames_root
            .as_ref()
            .zip(trace.frames.last())
            .and_then(|(root, name)| std::fs::read(root.join(name)).ok());
        llm_evaluate(&mut self.client, scene, &state_text, frame.as_deref())
    }
}
