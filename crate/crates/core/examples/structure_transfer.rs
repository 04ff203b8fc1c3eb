//! Searches on one task, writes the run directory, then retrains the saved
//! structure on a different task.

use s3pet::config::ExperimentConfig;
use s3pet::harness::{run_retrain, run_search};
use s3pet::structure::SearchedStructure;
use s3pet::task::{TaskKind, TaskSpec};

fn main() -> s3pet::Result<()> {
    let root = std::env::temp_dir().join("s3pet-transfer");
    let mut cfg = ExperimentConfig::default();
    cfg.search.steps = 100;
    cfg.output_dir = root.join("search");
    let summary = run_search(&cfg)?;
    println!(
        "searched on {}: {} modules, {} params, test {:.3}",
        summary.task, summary.modules, summary.total_params, summary.test
    );

    let path = cfg.output_dir.join("structure.json");
    let structure = SearchedStructure::load(&path)?;
    println!("structure fingerprint {}", structure.header.backbone_fingerprint);

    let mut target = cfg.clone();
    target.output_dir = root.join("parity");
    target.task = TaskSpec {
        kind: TaskKind::ParityClassification,
        label_space: 2,
        ..cfg.task.clone()
    };
    let r = run_retrain(&path, &target)?;
    println!(
        "retrained on {}: test {:.3}, fingerprint matches: {}",
        r.task, r.metrics.test, r.fingerprint_matches
    );
    println!("artifacts under {}", root.display());
    Ok(())
}
