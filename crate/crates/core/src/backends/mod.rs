//! Pluggable Sample / Optimize / TaskSuccess backends: an LLM chat client
//! driven by versioned prompt templates, plus deterministic scripted
//! backends covering every ablation combination.

pub mod cem;
pub mod eval;
pub mod gaussian;
pub mod llm;
pub mod scripted;

use crate::actions::ActionSequence;
use crate::planner::{OptimizationContext, RolloutTrace};
use crate::scene::SceneDescription;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response after {attempts} attempts: {last_error}")]
    MalformedAfterRetries { attempts: u32, last_error: String },
    #[error("missing criterion parameter `{0}`")]
    MissingCriterionParam(String),
    #[error("missing credentials: {0}")]
    MissingCredentials(String),
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Llm,
    GaussianSampler,
    CemOptimizer,
    BestOfN,
    Scripted,
    ProgrammaticEval,
}

/// Declarative backend selection: one per role in a plan/bench config file.
/// LLM endpoints and credentials come from the environment, never from
/// scene files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    0.7
}

fn default_max_retries() -> u32 {
    2
}

impl BackendConfig {
    pub fn of_kind(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            endpoint: None,
            model_name: None,
            temperature: default_temperature(),
            max_retries: default_max_retries(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Llm,
    Programmatic,
}

/// TaskSuccess output: boolean plus rationale. Programmatic verdicts are
/// deterministic functions of the final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub rationale: String,
    pub source: VerdictSource,
}

pub trait Sampler {
    /// Produce one action-sequence proposal. The planner makes K such calls;
    /// `total` tells batching backends how many will be requested overall,
    /// and `seed` fixes the stream for scripted backends.
    fn sample(
        &mut self,
        scene: &SceneDescription,
        total: usize,
        seed: u64,
    ) -> Result<ActionSequence, BackendError>;
}

pub trait Optimizer {
    /// Produce one refined action sequence from the full rollout history.
    /// `rollout` lets sampling-based optimizers run their own simulations;
    /// reasoning backends ignore it.
    fn optimize(
        &mut self,
        context: &OptimizationContext,
        scene: &SceneDescription,
        rollout: &mut dyn FnMut(&ActionSequence) -> RolloutTrace,
    ) -> Result<ActionSequence, BackendError>;
}

pub trait Evaluator {
    fn evaluate(
        &mut self,
        scene: &SceneDescription,
        trace: &RolloutTrace,
    ) -> Result<Verdict, BackendError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub timestamp_ms: u128,
    pub message: String,
}

/// The three roles handed to `plan`, plus the decision log that backs
/// `backend_log.jsonl`.
pub struct BackendSet {
    pub sampler: Box<dyn Sampler>,
    pub optimizer: Box<dyn Optimizer>,
    pub evaluator: Box<dyn Evaluator>,
    log: Vec<LogEntry>,
}

impl BackendSet {
    pub fn new(
        sampler: Box<dyn Sampler>,
        optimizer: Box<dyn Optimizer>,
        evaluator: Box<dyn Evaluator>,
    ) -> Self {
        BackendSet {
            sampler,
            optimizer,
            evaluator,
            log: Vec::new(),
        }
    }

    pub fn log(&mut self, message: &str) {
        let timestamp_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.log.push(LogEntry {
            timestamp_ms,
            message: message.to_string(),
        });
    }

    pub fn log_entries(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn write_log(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// Named backend combinations used by the benchmark ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComboName {
    /// Scripted task-aware sampler + CEM optimizer + programmatic evaluator.
    Full,
    /// Uninformed Gaussian sampler at 5x the sample budget.
    WoSampler,
    /// No simulation in the loop: proposals go straight to a verifier.
    WoRollout,
    /// No iterative refinement: best initial proposal by simulation outcome.
    WoOptimizer,
    /// Gaussian sampler + CEM optimizer (the sampling-based MPC analog).
    CemVariant,
}

impl ComboName {
    pub fn parse(s: &str) -> Option<ComboName> {
        match s {
            "full" => Some(ComboName::Full),
            "wo_sampler" => Some(ComboName::WoSampler),
            "wo_rollout" => Some(ComboName::WoRollout),
            "wo_optimizer" => Some(ComboName::WoOptimizer),
            "cem_variant" => Some(ComboName::CemVariant),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ComboName::Full => "full",
            ComboName::WoSampler => "wo_sampler",
            ComboName::WoRollout => "wo_rollout",
            ComboName::WoOptimizer => "wo_optimizer",
            ComboName::CemVariant => "cem_variant",
        }
    }

    pub fn all() -> [ComboName; 5] {
        [
            ComboName::Full,
            ComboName::WoSampler,
            ComboName::WoRollout,
            ComboName::WoOptimizer,
            ComboName::CemVariant,
        ]
    }

    /// Whether simulation rollouts run inside the planning loop.
    pub fn rollout_enabled(&self) -> bool {
        !matches!(self, ComboName::WoRollout)
    }

    /// Sample-count multiplier relative to the configured K.
    pub fn sample_multiplier(&self) -> usize {
        match self {
            ComboName::WoSampler => 5,
            _ => 1,
        }
    }
}

/// Build the scripted backend set for one ablation combo. All pieces are
/// deterministic functions of (inputs, seed); no network involved.
pub fn scripted_combo(combo: ComboName, seed: u64) -> BackendSet {
    let sampler: Box<dyn Sampler> = match combo {
        ComboName::WoSampler | ComboName::CemVariant => {
            Box::new(gaussian::GaussianSampler::with_defaults(seed))
        }
        _ => Box::new(scripted::ScriptedSampler::new(seed)),
    };
    let optimizer: Box<dyn Optimizer> = match combo {
        ComboName::WoRollout => Box::new(scripted::ProposalPickOptimizer::median()),
        ComboName::WoOptimizer => Box::new(scripted::BestOfNOptimizer),
        _ => Box::new(cem::CemOptimizer::new(cem::CemConfig {
            seed,
            ..Default::default()
        })),
    };
    let evaluator: Box<dyn Evaluator> = match combo {
        ComboName::WoRollout => Box::new(scripted::OptimisticVerifier),
        _ => Box::new(eval::ProgrammaticEvaluator),
    };
    BackendSet::new(sampler, optimizer, evaluator)
}
