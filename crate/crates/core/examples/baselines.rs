//! Hand-designed structures and a random one at the same budget.

use s3pet::config::ExperimentConfig;
use s3pet::gating::Budget;
use s3pet::harness::{run_baseline, BaselineKind};

fn main() -> s3pet::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = std::env::temp_dir().join("s3pet-baselines");
    for kind in BaselineKind::ALL {
        let budget = (kind == BaselineKind::RandomSubset).then_some(Budget::Params(486));
        let s = run_baseline(kind, budget, &cfg)?;
        println!(
            "{:<14} {:>3} modules {:>5} params  test {:.3}{}",
            kind.name(),
            s.modules,
            s.metrics.params,
            s.metrics.test,
            if s.truncated { "  (truncated)" } else { "" }
        );
    }
    Ok(())
}
