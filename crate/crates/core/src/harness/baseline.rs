use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{create_dir, load_task, write_json};
use crate::backbone::enumerate_sites;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gating::Budget;
use crate::pet::{Candidate, PetKind, SearchSpace};
use crate::rng::{stream, Stream};
use crate::train::{retrain, Metrics};

/// Hand-designed structures to compare searched ones against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// BitFit on every linear and layer-norm site.
    Bitfit,
    /// LNFit on every layer norm.
    Lnfit,
    /// Rank-1 LoRA on every linear site.
    LoraR1,
    /// Low-rank adapter after every attention and feed-forward block.
    AdapterLr,
    /// Mix-space modules sampled in random order until the budget is spent.
    RandomSubset,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Bitfit,
        BaselineKind::Lnfit,
        BaselineKind::LoraR1,
        BaselineKind::AdapterLr,
        BaselineKind::RandomSubset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Bitfit => "bitfit",
            BaselineKind::Lnfit => "lnfit",
            BaselineKind::LoraR1 => "lora_r1",
            BaselineKind::AdapterLr => "adapter_lr",
            BaselineKind::RandomSubset => "random_subset",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown baseline '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub kind: BaselineKind,
    pub budget: Option<Budget>,
    pub budget_params: Option<u64>,
    pub seed: u64,
    pub modules: usize,
    pub truncated: bool,
    pub metrics: Metrics,
}

/// Indices of `space` visited in a seeded random order, keeping each module
/// that still fits in `budget`.
pub fn random_subset(space: &SearchSpace, budget: u64, seed: u64) -> Vec<usize> {
    let counts = space.counts();
    let mut order: Vec<usize> = (0..space.len()).collect();
    order.shuffle(&mut stream(seed, Stream::RandomStructure));
    let mut used = 0;
    let mut chosen = Vec::new();
    for i in order {
        if used + counts[i] <= budget {
            used += counts[i];
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

fn uniform(cfg: &ExperimentConfig, kind: PetKind, rank: usize) -> Result<SearchSpace> {
    let cands: Vec<Candidate> = enumerate_sites(&cfg.backbone)
        .into_iter()
        .filter(|s| kind.is_legal_at(s, &cfg.backbone))
        .map(|site| Candidate { site, kind, rank })
        .collect();
    SearchSpace::custom(&cfg.backbone, &cands)
}

/// Builds and retrains a baseline structure, writing
/// `baseline-<kind>.json` to `cfg.output_dir`.
///
/// Manual structures ignore a missing budget and are cut to the first
/// modules in canonical order when a budget is given and exceeded.
/// `random_subset` falls back to the search budget.
pub fn run_baseline(kind: BaselineKind, budget: Option<Budget>, cfg: &ExperimentConfig) -> Result<BaselineSummary> {
    cfg.validate()?;
    let bb = cfg.backbone()?;
    let backbone_params = bb.param_count() as u64;
    let budget = match kind {
        BaselineKind::RandomSubset => Some(budget.unwrap_or(cfg.search.budget)),
        _ => budget,
    };
    let limit = budget.map(|b| b.resolve(backbone_params));
    let rank = cfg.search.rank;
    let full = match kind {
        BaselineKind::Bitfit => uniform(cfg, PetKind::BitFit, rank)?,
        BaselineKind::Lnfit => uniform(cfg, PetKind::LnFit, rank)?,
        BaselineKind::LoraR1 => uniform(cfg, PetKind::Lora, 1)?,
        BaselineKind::AdapterLr => uniform(cfg, PetKind::Adapter, rank)?,
        BaselineKind::RandomSubset => SearchSpace::mix(&cfg.backbone, rank)?,
    };
    let counts = full.counts();
    if let (Some(b), Some(&min)) = (limit, counts.iter().min()) {
        if b < min {
            return Err(Error::config(format!(
                "budget of {b} parameters is below one {kind} module ({min})"
            )));
        }
    }
    let (space, truncated) = match (kind, limit) {
        (BaselineKind::RandomSubset, Some(b)) => (full.subset(&random_subset(&full, b, cfg.search.seed)), false),
        (_, Some(b)) if full.total_params() > b => {
            let mut used = 0;
            let keep: Vec<usize> = (0..full.len())
                .take_while(|&i| {
                    used += counts[i];
                    used <= b
                })
                .collect();
            log::warn!(
                "{kind} needs {} parameters; keeping the first {} of {} modules",
                full.total_params(),
                keep.len(),
                full.len()
            );
            (full.subset(&keep), true)
        }
        _ => (full, false),
    };
    let (_, split) = load_task(cfg)?;
    let modules = space.len();
    let re = retrain(&bb, space, &split, &cfg.retrain, cfg.search.seed).map_err(|e| e.context(kind.name()))?;
    let summary = BaselineSummary {
        kind,
        budget,
        budget_params: limit,
        seed: cfg.search.seed,
        modules,
        truncated,
        metrics: re.metrics,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("baseline-{kind}.json")), &summary)?;
    Ok(summary)
}
