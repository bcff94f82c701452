//! Command-line driver: run single rollouts, full planning loops, the
//! benchmark matrix, or re-render persisted traces.
//!
//! Exit codes: 0 success, 1 input/config error, 2 rollout divergence,
//! 3 plan budget exhausted, 4 backend error.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use simpact_core::backends::{
    cem::{CemConfig, CemOptimizer},
    eval::ProgrammaticEvaluator,
    gaussian::GaussianSampler,
    llm::{LlmClient, LlmEvaluator, LlmOptimizer, LlmSampler},
    scripted::{BestOfNOptimizer, OptimisticVerifier, ProposalPickOptimizer, ScriptedSampler},
    BackendConfig, BackendKind, BackendSet,
};
use simpact_core::planner::{persist_plan, plan, sim_rollout, PlanConfig, Termination};
use simpact_core::scene::load_scene;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "simpact",
    about = "Simulation-enabled action planning: simulate, plan, bench, render",
    version
)]
struct Cli {
    /// Master seed for scripted backends and scene perturbation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out one action file in one scene, writing trace and frames.
    Simulate(SimulateArgs),
    /// Run the full sample/rollout/optimize/evaluate planning loop.
    Plan(PlanArgs),
    /// Run the benchmark matrix and emit a report.
    Bench(BenchArgs),
    /// Re-render frames from a persisted trace directory.
    Render(RenderArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene JSON file.
    scene: PathBuf,
    /// Action JSON file (proposals payload; the first proposal runs).
    actions: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Scene JSON file.
    scene: PathBuf,
    /// Backend configuration JSON (sampler/optimizer/evaluator roles).
    backends: PathBuf,
    /// Initial proposal count K (overrides the config file).
    #[arg(long)]
    k: Option<usize>,
    /// Total rollout budget K_max (overrides the config file).
    #[arg(long)]
    k_max: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench configuration JSON.
    config: PathBuf,
    /// Parallel trial workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene JSON file.
    scene: PathBuf,
    /// Run directory holding traces/<k>/states.jsonl.
    run_dir: PathBuf,
    /// Trace index to re-render (1-based).
    #[arg(long, default_value_t = 1)]
    trace: usize,
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    tool_version: String,
    started_unix_ms: u128,
    finished_unix_ms: Option<u128>,
    outcome: Option<String>,
    output_directory: String,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    fn begin(command: &str, config: serde_json::Value, seed: u64, out_dir: &Path) -> Self {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            outcome: None,
            output_directory: out_dir.display().to_string(),
        };
        manifest.write(out_dir);
        manifest
    }

    fn write(&self, out_dir: &Path) {
        let _ = std::fs::create_dir_all(out_dir);
        if let Ok(json) = serde_json::to_string_pretty(self) {
            let _ = std::fs::write(out_dir.join("manifest.json"), json);
        }
    }

    fn finish(mut self, out_dir: &Path, outcome: &str) {
        self.finished_unix_ms = Some(now_ms());
        self.outcome = Some(outcome.to_string());
        self.write(out_dir);
    }
}

// ---------------------------------------------------------------------------
// Backend construction
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct PlanFileConfig {
    sampler: BackendConfig,
    optimizer: BackendConfig,
    evaluator: BackendConfig,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    k_max: Option<usize>,
}

fn needs_llm(config: &PlanFileConfig) -> bool {
    [&config.sampler, &config.optimizer, &config.evaluator]
        .iter()
        .any(|c| c.kind == BackendKind::Llm)
}

fn build_backends(
    config: &PlanFileConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<BackendSet, String> {
    let llm_client = |role: &BackendConfig| -> Result<LlmClient, String> {
        let mut client = LlmClient::from_env().map_err(|e| e.to_string())?;
        if let Some(model) = &role.model_name {
            client.model = model.clone();
        }
        client.temperature = role.temperature;
        client.max_retries = role.max_retries;
        Ok(client)
    };

    let sampler: Box<dyn simpact_core::backends::Sampler> = match config.sampler.kind {
        BackendKind::Llm => Box::new(LlmSampler::new(llm_client(&config.sampler)?)),
        BackendKind::GaussianSampler => {
            Box::new(GaussianSampler::with_defaults(config.sampler.seed ^ seed))
        }
        BackendKind::Scripted => Box::new(ScriptedSampler::new(config.sampler.seed ^ seed)),
        other => return Err(format!("backend kind {other:?} cannot act as a sampler")),
    };
    let optimizer: Box<dyn simpact_core::backends::Optimizer> = match config.optimizer.kind {
        BackendKind::Llm => Box::new(LlmOptimizer {
            client: llm_client(&config.optimizer)?,
            frames_root: Some(out_dir.to_path_buf()),
        }),
        BackendKind::CemOptimizer => Box::new(CemOptimizer::new(CemConfig {
            seed: config.optimizer.seed ^ seed,
            ..CemConfig::default()
        })),
        BackendKind::BestOfN => Box::new(BestOfNOptimizer),
        BackendKind::Scripted => Box::new(ProposalPickOptimizer::median()),
        other => return Err(format!("backend kind {other:?} cannot act as an optimizer")),
    };
    let evaluator: Box<dyn simpact_core::backends::Evaluator> = match config.evaluator.kind {
        BackendKind::Llm => Box::new(LlmEvaluator {
            client: llm_client(&config.evaluator)?,
            frames_root: Some(out_dir.to_path_buf()),
        }),
        BackendKind::ProgrammaticEval => Box::new(ProgrammaticEvaluator),
        BackendKind::Scripted => Box::new(OptimisticVerifier),
        other => return Err(format!("backend kind {other:?} cannot act as an evaluator")),
    };
    Ok(BackendSet::new(sampler, optimizer, evaluator))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &SimulateArgs, seed: u64, out_dir: &Path) -> (u8, String) {
    let scene = match load_scene(&args.scene) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("input error: {e}"));
        }
    };
    let text = match std::fs::read_to_string(&args.actions) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("IoError: {e}");
            return (1, format!("input error: {e}"));
        }
    };
    let parsed = match simpact_core::actions::parse_action_json(&text) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("input error: {e}"));
        }
    };
    let Some(seq) = parsed.sequences.first() else {
        for r in &parsed.rejected {
            eprintln!("SchemaError: proposal {}: {}", r.proposal_index, r.message);
        }
        return (1, "input error: no valid proposal in action file".into());
    };
    let _ = seed;
    let trace_dir = out_dir.join("traces").join("1");
    let _ = std::fs::create_dir_all(&trace_dir);
    let trace = sim_rollout(&scene, seq, Some(&trace_dir));
    let result = simpact_core::planner::PlanResult {
        selected: Some(seq.clone()),
        iterations_used: 1,
        traces: vec![trace.clone()],
        verdicts: vec![],
        termination: Termination::Success,
        backend_error: None,
    };
    if let Err(e) = persist_plan(&result, out_dir) {
        eprintln!("IoError: {e}");
        return (1, format!("io error: {e}"));
    }
    if trace.diverged {
        eprintln!(
            "NumericalDivergence: {}",
            trace.failure.as_deref().unwrap_or("state became non-finite")
        );
        (2, "divergence (truncated trace persisted)".into())
    } else if let Some(failure) = &trace.failure {
        eprintln!("{failure}");
        (1, format!("input error: {failure}"))
    } else {
        println!("rollout complete: {} primitives", trace.per_primitive_states.len());
        (0, "clean rollout".into())
    }
}

fn cmd_plan(args: &PlanArgs, seed: u64, out_dir: &Path) -> (u8, String) {
    let scene = match load_scene(&args.scene) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("input error: {e}"));
        }
    };
    let text = match std::fs::read_to_string(&args.backends) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("IoError: {e}");
            return (1, format!("input error: {e}"));
        }
    };
    let file_config: PlanFileConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ParseError in backend config: {e}");
            return (1, format!("input error: {e}"));
        }
    };
    // Fail fast on missing LLM credentials before any rollout.
    if needs_llm(&file_config) {
        if let Err(e) = LlmClient::from_env() {
            eprintln!("{e}");
            return (4, format!("backend error: {e}"));
        }
    }
    let mut backends = match build_backends(&file_config, seed, out_dir) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("input error: {e}"));
        }
    };
    // Precedence: flags > config file > defaults.
    let defaults = PlanConfig::default();
    let config = PlanConfig {
        k: args.k.or(file_config.k).unwrap_or(defaults.k),
        k_max: args.k_max.or(file_config.k_max).unwrap_or(defaults.k_max),
        seed,
        out_dir: Some(out_dir.to_path_buf()),
        rollout_enabled: true,
    };
    if config.k < 1 || config.k_max < config.k + 1 {
        eprintln!("ValidationError: need K >= 1 and K_max >= K+1");
        return (1, "input error: bad K/K_max".into());
    }

    let result = plan(&scene, &mut backends, &config);
    if let Err(e) = persist_plan(&result, out_dir) {
        eprintln!("IoError: {e}");
        return (1, format!("io error: {e}"));
    }
    let _ = backends.write_log(&out_dir.join("backend_log.jsonl"));
    match result.termination {
        Termination::Success => {
            println!(
                "plan succeeded after {} rollouts; result in {}",
                result.iterations_used,
                out_dir.display()
            );
            (0, "success".into())
        }
        Termination::BudgetExhausted => {
            println!("budget exhausted after {} rollouts", result.iterations_used);
            (3, "budget exhausted".into())
        }
        Termination::BackendError => {
            eprintln!(
                "BackendError: {}",
                result.backend_error.as_deref().unwrap_or("unknown")
            );
            (4, "backend error".into())
        }
    }
}

fn cmd_bench(args: &BenchArgs, out_dir: &Path) -> (u8, String) {
    let config = match simpact_core::bench::BenchConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("config error: {e}"));
        }
    };
    let report = match simpact_core::bench::run_bench(&config, args.workers.max(1)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("config error: {e}"));
        }
    };
    if let Err(e) = simpact_core::bench::emit_report(&report, out_dir) {
        eprintln!("{e}");
        return (1, format!("io error: {e}"));
    }
    println!(
        "bench complete: {} cells; report in {}",
        report.cells.len(),
        out_dir.display()
    );
    (0, "report emitted".into())
}

fn cmd_render(args: &RenderArgs, out_dir: &Path) -> (u8, String) {
    let scene = match load_scene(&args.scene) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return (1, format!("input error: {e}"));
        }
    };
    let states_path = args
        .run_dir
        .join("traces")
        .join(args.trace.to_string())
        .join("states.jsonl");
    let text = match std::fs::read_to_string(&states_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("IoError reading {}: {e}", states_path.display());
            return (1, format!("input error: {e}"));
        }
    };
    let _ = std::fs::create_dir_all(out_dir);
    let mut count = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("ParseError at line {}: {e}", i + 1);
                return (1, format!("input error: {e}"));
            }
        };
        let state: simpact_core::world::StateSummary =
            match serde_json::from_value(value["state"].clone()) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("ParseError at line {}: {e}", i + 1);
                    return (1, format!("input error: {e}"));
                }
            };
        let img = simpact_core::render::render_state(&state, &scene, &scene.camera);
        let path = out_dir.join(simpact_core::render::frame_filename(i + 1));
        if let Err(e) = simpact_core::render::save_frame(&img, &path) {
            eprintln!("{e}");
            return (1, format!("io error: {e}"));
        }
        count += 1;
    }
    println!("re-rendered {count} frames into {}", out_dir.display());
    (0, format!("{count} frames rendered"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let (name, config_snapshot) = match &cli.command {
        Command::Simulate(a) => (
            "simulate",
            serde_json::json!({"scene": a.scene, "actions": a.actions}),
        ),
        Command::Plan(a) => (
            "plan",
            serde_json::json!({"scene": a.scene, "backends": a.backends, "k": a.k, "k_max": a.k_max}),
        ),
        Command::Bench(a) => (
            "bench",
            serde_json::json!({"config": a.config, "workers": a.workers}),
        ),
        Command::Render(a) => (
            "render",
            serde_json::json!({"scene": a.scene, "run_dir": a.run_dir, "trace": a.trace}),
        ),
    };

    let out_dir = cli.out.clone().unwrap_or_else(|| {
        if matches!(cli.command, Command::Bench(_)) {
            PathBuf::from("reports").join(now_ms().to_string())
        } else {
            PathBuf::from("runs").join(now_ms().to_string())
        }
    });

    // The manifest exists before any work starts and is finalized on every
    // exit path.
    let manifest = RunManifest::begin(name, config_snapshot, cli.seed, &out_dir);
    let (code, outcome) = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, cli.seed, &out_dir),
        Command::Plan(a) => cmd_plan(a, cli.seed, &out_dir),
        Command::Bench(a) => cmd_bench(a, &out_dir),
        Command::Render(a) => cmd_render(a, &out_dir),
    };
    manifest.finish(&out_dir, &outcome);
    ExitCode::from(code)
}
