//! Benchmark harness: runs the planning stack over the shipped scenes for
//! every requested (task, combo, K) cell, scores each trial by executing the
//! selected plan and judging it programmatically, and emits machine- and
//! human-readable reports.

use crate::backends::{scripted_combo, ComboName, VerdictSource};
use crate::planner::{plan, sim_rollout, PlanConfig, Termination};
use crate::scene::TaskId;
use crate::scenes::perturbed_scene;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimizer-iteration budget added on top of K (the 10 -> 15 ratio).
pub const OPT_BUDGET: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub tasks: Vec<TaskId>,
    pub trials: usize,
    /// Per-trial seeds; extended arithmetically when shorter than `trials`.
    pub seeds: Vec<u64>,
    pub backend_matrix: Vec<ComboName>,
    pub k_values: Vec<usize>,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.trials < 1 {
            return Err(BenchError::InvalidConfig("trials must be >= 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(BenchError::InvalidConfig("tasks must be non-empty".into()));
        }
        if self.backend_matrix.is_empty() {
            return Err(BenchError::InvalidConfig("backend_matrix must be non-empty".into()));
        }
        if self.k_values.iter().any(|&k| k == 0) {
            return Err(BenchError::InvalidConfig("k_values must be positive".into()));
        }
        if self.tasks.contains(&TaskId::Custom) {
            return Err(BenchError::InvalidConfig("custom tasks cannot be benchmarked".into()));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        match self.seeds.get(trial) {
            Some(&s) => s,
            None => self.seeds.first().copied().unwrap_or(0) + trial as u64,
        }
    }

    pub fn load(path: &Path) -> Result<BenchConfig, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        // Name unknown combos explicitly before serde rejects the document.
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(matrix) = value.get("backend_matrix").and_then(|v| v.as_array()) {
                for entry in matrix {
                    if let Some(name) = entry.as_str() {
                        if ComboName::parse(name).is_none() {
                            return Err(BenchError::InvalidConfig(format!(
                                "unknown backend combo `{name}`"
                            )));
                        }
                    }
                }
            }
        }
        let config: BenchConfig = serde_json::from_str(&text)
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            tasks: crate::scenes::all_tasks().to_vec(),
            trials: 10,
            seeds: (1..=10).collect(),
            backend_matrix: vec![ComboName::Full],
            k_values: vec![4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub success: bool,
    pub iterations_used: usize,
    pub divergences: usize,
    pub termination: Termination,
    /// Provenance of the in-loop verdict that terminated the plan, if any.
    pub verdict_source: Option<VerdictSource>,
    /// Programmatic distance score of the executed plan (lower is better).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub task: TaskId,
    pub combo: ComboName,
    pub k: usize,
    pub trials: Vec<TrialRecord>,
    pub success_rate: f64,
    pub mean_iterations: f64,
    pub divergence_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, task: TaskId, combo: ComboName, k: usize) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.combo == combo && c.k == k)
    }

    /// Summed successes for a combo across all tasks (at every K).
    pub fn combo_successes(&self, combo: ComboName) -> usize {
        self.cells
            .iter()
            .filter(|c| c.combo == combo)
            .map(|c| c.trials.iter().filter(|t| t.success).count())
            .sum()
    }
}

/// Run one trial and score it by executing the selected sequence in a fresh
/// simulation and judging the final state programmatically. Bench scoring
/// never trusts the in-loop evaluator.
pub fn run_trial(task: TaskId, combo: ComboName, k: usize, seed: u64) -> TrialRecord {
    let scene = perturbed_scene(task, seed);
    let mut backends = scripted_combo(combo, seed);
    let k_eff = k * combo.sample_multiplier();
    let config = PlanConfig {
        k: k_eff,
        k_max: k_eff + OPT_BUDGET,
        seed,
        out_dir: None,
        rollout_enabled: combo.rollout_enabled(),
    };
    let result = plan(&scene, &mut backends, &config);
    let divergences = result.traces.iter().filter(|t| t.diverged).count();
    let verdict_source = result
        .verdicts
        .iter()
        .filter(|v| v.acted_on)
        .next_back()
        .map(|v| v.verdict.source);

    let (success, score) = match &result.selected {
        Some(seq) => {
            let execution = sim_rollout(&scene, seq, None);
            let score = crate::backends::eval::task_score(&scene.task, &scene, &execution);
            let verdict = crate::backends::eval::programmatic_evaluate(
                scene.task.task_id,
                &scene.task.criterion_params,
                &scene,
                &execution.final_state,
            );
            (
                verdict.map(|v| v.success && !execution.diverged).unwrap_or(false),
                score,
            )
        }
        None => (false, f64::INFINITY),
    };

    TrialRecord {
        seed,
        success,
        iterations_used: result.iterations_used,
        divergences,
        termination: result.termination,
        verdict_source,
        score,
    }
}

/// Run the whole matrix with up to `workers` trials in flight. Results are
/// assembled by index, so the report is identical for any worker count.
pub fn run_bench(config: &BenchConfig, workers: usize) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let mut jobs: Vec<(TaskId, ComboName, usize, u64)> = Vec::new();
    for &task in &config.tasks {
        for &combo in &config.backend_matrix {
            for &k in &config.k_values {
                for trial in 0..config.trials {
                    jobs.push((task, combo, k, config.trial_seed(trial)));
                }
            }
        }
    }

    let results: Vec<TrialRecord> = if workers <= 1 {
        jobs.iter()
            .map(|&(task, combo, k, seed)| run_trial(task, combo, k, seed))
            .collect()
    } else {
        let slots: Vec<std::sync::Mutex<Option<TrialRecord>>> =
            jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers.min(jobs.len()) {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= jobs.len() {
                        break;
                    }
                    let (task, combo, k, seed) = jobs[idx];
                    let record = run_trial(task, combo, k, seed);
                    *slots[idx].lock().unwrap() = Some(record);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("trial completed"))
            .collect()
    };

    // Group back into cells in job order.
    let mut cells: Vec<BenchCell> = Vec::new();
    let mut idx = 0;
    for &task in &config.tasks {
        for &combo in &config.backend_matrix {
            for &k in &config.k_values {
                let trials: Vec<TrialRecord> =
                    results[idx..idx + config.trials].to_vec();
                idx += config.trials;
                let successes = trials.iter().filter(|t| t.success).count();
                let mean_iterations =
                    trials.iter().map(|t| t.iterations_used as f64).sum::<f64>() / trials.len() as f64;
                let divergence_count = trials.iter().map(|t| t.divergences).sum();
                cells.push(BenchCell {
                    task,
                    combo,
                    k,
                    success_rate: successes as f64 / trials.len() as f64,
                    mean_iterations,
                    divergence_count,
                    trials,
                });
            }
        }
    }
    Ok(BenchReport { cells })
}

/// Write `report.json` plus a human-readable `report.txt` table
/// (rows = combos, columns = tasks, one block per K).
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(|source| BenchError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let io_err = |path: &Path, source: std::io::Error| BenchError::Io {
        path: path.display().to_string(),
        source,
    };

    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;

    let mut tasks: Vec<TaskId> = report.cells.iter().map(|c| c.task).collect();
    tasks.sort();
    tasks.dedup();
    let mut combos: Vec<ComboName> = report.cells.iter().map(|c| c.combo).collect();
    combos.sort();
    combos.dedup();
    let mut ks: Vec<usize> = report.cells.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();

    let mut text = String::new();
    for &k in &ks {
        text.push_str(&format!("success rate, K = {k}\n"));
        text.push_str(&format!("{:<16}", "combo"));
        for task in &tasks {
            text.push_str(&format!("{:>20}", task.name()));
        }
        text.push('\n');
        for &combo in &combos {
            text.push_str(&format!("{:<16}", combo.name()));
            for &task in &tasks {
                match report.cell(task, combo, k) {
                    Some(cell) => {
                        let pct = cell.success_rate * 100.0;
                        text.push_str(&format!("{:>19.0}%", pct));
                    }
                    None => text.push_str(&format!("{:>20}", "-")),
                }
            }
            text.push('\n');
        }
        text.push('\n');
    }
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, text).map_err(|e| io_err(&txt_path, e))?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<BenchReport, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| BenchError::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_tiny_reports_emit_valid_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = BenchReport { cells: vec![] };
        emit_report(&empty, dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("report.txt").exists());

        let one = BenchReport {
            cells: vec![BenchCell {
                task: TaskId::ShapeDough,
                combo: ComboName::Full,
                k: 3,
                trials: vec![TrialRecord {
                    seed: 1,
                    success: true,
                    iterations_used: 4,
                    divergences: 0,
                    termination: Termination::Success,
                    verdict_source: Some(VerdictSource::Programmatic),
                    score: 0.1,
                }],
                success_rate: 1.0,
                mean_iterations: 4.0,
                divergence_count: 0,
            }],
        };
        emit_report(&one, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("shape_dough"));
        assert!(text.contains("100%"));

        let loaded = load_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(loaded, one);
    }

    #[test]
    fn config_rejects_unknown_combo_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.json");
        std::fs::write(
            &path,
            r#"{"tasks": ["shape_dough"], "trials": 1, "seeds": [1], "backend_matrix": ["warp_drive"], "k_values": [2]}"#,
        )
        .unwrap();
        let err = BenchConfig::load(&path).unwrap_err();
        match err {
            BenchError::InvalidConfig(msg) => assert!(msg.contains("warp_drive"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn seeds_extend_deterministically() {
        let config = BenchConfig {
            seeds: vec![100],
            trials: 3,
            ..Default::default()
        };
        assert_eq!(config.trial_seed(0), 100);
        assert_eq!(config.trial_seed(1), 101);
        assert_eq!(config.trial_seed(2), 102);
    }
}
