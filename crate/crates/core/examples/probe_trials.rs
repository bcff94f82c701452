//! Dev probe: run scripted-stack trials per task and print outcomes.
use simpact_core::backends::ComboName;
use simpact_core::bench::run_trial;
use simpact_core::scene::TaskId;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let filter = args.get(1).cloned();
    let trials: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let combo = args
        .get(3)
        .and_then(|s| ComboName::parse(s))
        .unwrap_or(ComboName::Full);
    for task in simpact_core::scenes::all_tasks() {
        if let Some(f) = &filter {
            if f != "all" && task.name() != f {
                continue;
            }
        }
        let mut wins = 0;
        let start = std::time::Instant::now();
        for trial in 0..trials {
            let seed = (trial + 1) as u64;
            let t0 = std::time::Instant::now();
            let rec = run_trial(task, combo, 4, seed);
            if rec.success {
                wins += 1;
            }
            println!(
                "{} seed {} -> success={} score={:.4} iters={} div={} [{:.1}s]",
                task.name(),
                seed,
                rec.success,
                rec.score,
                rec.iterations_used,
                rec.divergences,
                t0.elapsed().as_secs_f64()
            );
        }
        println!(
            "== {}: {}/{} [{:.1}s total]\n",
            task.name(),
            wins,
            trials,
            start.elapsed().as_secs_f64()
        );
    }
}
