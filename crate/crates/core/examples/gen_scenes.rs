//! Regenerate the shipped scene files and default bench config.
use std::path::Path;

fn main() {
    let dir = Path::new("scenes");
    simpact_core::scenes::write_all(dir).expect("write scenes");
    println!("wrote scene files into {}", dir.display());

    let bench = simpact_core::bench::BenchConfig::default();
    std::fs::write(
        "bench.json",
        serde_json::to_string_pretty(&bench).expect("serialize"),
    )
    .expect("write bench.json");
    println!("wrote bench.json");
}
