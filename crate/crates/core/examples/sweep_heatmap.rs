//! A two-budget sweep over both sparsity modes, then a heatmap of the keep
//! probabilities from its runs. Set S3PET_THREADS to cap parallel runs.

use s3pet::config::ExperimentConfig;
use s3pet::gating::SparsityMode;
use s3pet::harness::{emit_heatmap, run_sweep};

fn main() -> s3pet::Result<()> {
    let root = std::env::temp_dir().join("s3pet-sweep");
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = root.clone();
    cfg.search.steps = 100;
    cfg.retrain.steps = 300;
    cfg.sweep.budgets_bp = vec![1.39, 0.35];
    cfg.sweep.seeds = vec![0, 1];
    cfg.sweep.modes = vec![SparsityMode::GlobalSigmoid, SparsityMode::L0];

    let report = run_sweep(&cfg)?;
    for g in &report.groups {
        println!(
            "{:<15} {:>5} bp ({:>4} params): test {:.3} +- {:.3}",
            g.sparsity_mode.to_string(),
            g.budget_bp,
            g.budget_params,
            g.mean_test,
            g.std_test
        );
    }

    let inputs = [root.join("global-sigmoid/bp-1.39/seed-0/p.csv"), root.join("global-sigmoid/bp-1.39/seed-1/p.csv")];
    let grid = emit_heatmap(&inputs, &root.join("heatmap.csv"))?;
    println!("heatmap: {} cells over layers {:?}", grid.filled(), grid.columns);
    Ok(())
}
