//! Searches a structure for key-value recall on the toy backbone and retrains
//! it from scratch. Pass a step count to shorten the run.

use s3pet::backbone::{Backbone, BackboneConfig};
use s3pet::gating::Budget;
use s3pet::search::{search, SearchConfig};
use s3pet::task::{SyntheticTask, TaskSpec};
use s3pet::train::{retrain, TrainConfig};

fn main() -> s3pet::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let bb = Backbone::new(BackboneConfig::default())?;
    let split = SyntheticTask::new(TaskSpec::default())?.generate()?;
    let cfg = SearchConfig {
        budget: Budget::Params(486),
        steps,
        ..SearchConfig::default()
    };
    let out = search(&cfg, &bb, &split)?;
    for row in out.history.iter().filter(|r| r.val_metric.is_some()) {
        println!(
            "step {:>4}  loss {:.3}/{:.3}  E[N] {:.1}  zeta {:+.3}  val {:.3}",
            row.step + 1,
            row.loss_delta,
            row.loss_alpha,
            row.expected_params,
            row.zeta,
            row.val_metric.unwrap()
        );
    }
    let best = &out.best;
    println!("best snapshot at step {} ({} params):", best.step, best.selection.total_params);
    for &i in &best.selection.indices {
        let m = &out.space.modules()[i];
        println!("  {}:{}  p = {:.3}", m.site, m.kind.name(), best.p[i]);
    }
    let sub = out.space.subset(&best.selection.indices);
    let r = retrain(&bb, sub, &split, &TrainConfig::default(), cfg.seed)?;
    println!("retrained: val {:.3} test {:.3}", r.metrics.val, r.metrics.test);
    Ok(())
}
