//! End-to-end runs driven by an [`ExperimentConfig`], writing their artifacts
//! to the configured output directory.
//!
//! `run_search` writes
//!
//! * `config.json`: the effective configuration, with `output_dir` set to `.`;
//! * `structure.json`: the extracted structure;
//! * `history.csv`: one row per search step;
//! * `p.csv`: keep probabilities at every evaluation;
//! * `heatmap.csv`: the final probabilities as a layer grid;
//! * `summary.json`: search and retrain results.
//!
//! Nothing written depends on the clock, so two runs of one config produce
//! identical directories.

mod baseline;
mod heatmap;
mod selftest;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gating::{Budget, SparsityMode};
use crate::pet::{SearchSpace, SpaceKind};
use crate::search::{search, HistoryRow, SearchOutcome};
use crate::structure::{fingerprint_hex, SearchedStructure, StructureSource};
use crate::task::{DataSplit, SyntheticTask};
use crate::train::{ratio_bp, retrain, Metrics};

pub use baseline::{random_subset, run_baseline, BaselineKind, BaselineSummary};
pub use heatmap::{emit_heatmap, heatmap_from_rows, HeatmapGrid};
pub use selftest::{selftest, SelfTestCheck};

/// Environment variable capping the number of concurrent sweep runs.
pub const THREADS_ENV: &str = "S3PET_THREADS";

/// One row of `p.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub step: usize,
    pub layer: String,
    pub position: String,
    pub pet_kind: String,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub task: String,
    pub search_space: SpaceKind,
    pub sparsity_mode: SparsityMode,
    pub seed: u64,
    pub budget: Budget,
    pub budget_params: u64,
    pub backbone_params: u64,
    pub best_step: usize,
    /// D_val metric of the chosen snapshot, before retraining.
    pub search_val: f64,
    /// Expected parameter count at the last step.
    pub expected_params: f64,
    pub total_params: u64,
    pub modules: usize,
    pub approximate: bool,
    /// Trainable parameters relative to the backbone, in basis points.
    pub ratio_bp: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub structure_task: String,
    pub task: String,
    pub seed: u64,
    pub fingerprint_matches: bool,
    pub modules: usize,
    pub metrics: Metrics,
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| -> Error {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse(format!("{}: {other:?}", path.display())),
        }
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

/// `p.csv` rows for every logged evaluation of a search.
pub fn probability_rows(space: &SearchSpace, p_log: &[(usize, Vec<f64>)]) -> Vec<ProbabilityRow> {
    let mut rows = Vec::with_capacity(p_log.len() * space.len());
    for (step, p) in p_log {
        for (m, &pi) in space.modules().iter().zip(p) {
            rows.push(ProbabilityRow {
                step: *step,
                layer: m.site.layer_label(),
                position: m.site.position(),
                pet_kind: m.kind.name().to_string(),
                p: pi,
            });
        }
    }
    rows
}

#[derive(Serialize)]
struct HistoryCsvRow {
    step: usize,
    loss_delta: f64,
    loss_alpha: f64,
    expected_params: f64,
    zeta: f64,
    val_metric: Option<f64>,
}

impl From<&HistoryRow> for HistoryCsvRow {
    fn from(h: &HistoryRow) -> Self {
        HistoryCsvRow {
            step: h.step,
            loss_delta: h.loss_delta,
            loss_alpha: h.loss_alpha,
            expected_params: h.expected_params,
            zeta: h.zeta,
            val_metric: h.val_metric,
        }
    }
}

fn load_task(cfg: &ExperimentConfig) -> Result<(SyntheticTask, DataSplit)> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let split = task.generate()?;
    Ok((task, split))
}

/// Search, extract, retrain, and write every artifact to `cfg.output_dir`.
pub fn run_search(cfg: &ExperimentConfig) -> Result<SearchSummary> {
    cfg.validate()?;
    let bb = cfg.backbone()?;
    let (task, split) = load_task(cfg)?;
    let out = search(&cfg.search, &bb, &split).map_err(|e| e.context("search"))?;
    let structure = SearchedStructure::from_selection(
        &bb,
        &out.space,
        &out.best.selection,
        &out.best.p,
        StructureSource {
            task: task.name(),
            seed: cfg.search.seed,
            budget: cfg.search.budget,
        },
    );
    let space = structure.check_backbone(&bb)?;
    let re = retrain(&bb, space, &split, &cfg.retrain, cfg.search.seed).map_err(|e| e.context("retrain"))?;
    let summary = summarize(cfg, &bb, task.name(), &out, re.metrics);
    write_search_artifacts(cfg, &out, &structure, &summary)?;
    Ok(summary)
}

fn summarize(cfg: &ExperimentConfig, bb: &Backbone, task: &str, out: &SearchOutcome, m: Metrics) -> SearchSummary {
    SearchSummary {
        task: task.to_string(),
        search_space: cfg.search.search_space,
        sparsity_mode: cfg.search.sparsity_mode,
        seed: cfg.search.seed,
        budget: cfg.search.budget,
        budget_params: out.budget_params,
        backbone_params: bb.param_count() as u64,
        best_step: out.best.step,
        search_val: out.best.val_metric,
        expected_params: out.history.last().map_or(0.0, |h| h.expected_params),
        total_params: out.best.selection.total_params,
        modules: out.best.selection.indices.len(),
        approximate: out.best.selection.approximate,
        ratio_bp: ratio_bp(out.best.selection.total_params, bb.param_count() as u64),
        val: m.val,
        test: m.test,
    }
}

fn write_search_artifacts(
    cfg: &ExperimentConfig,
    out: &SearchOutcome,
    structure: &SearchedStructure,
    summary: &SearchSummary,
) -> Result<()> {
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    // recorded relative to the run directory so same-config runs compare equal
    let mut recorded = cfg.clone();
    recorded.output_dir = PathBuf::from(".");
    recorded.save(dir.join("config.json"))?;
    structure.save(dir.join("structure.json"))?;
    let history: Vec<HistoryCsvRow> = out.history.iter().map(HistoryCsvRow::from).collect();
    write_csv(&dir.join("history.csv"), &history)?;
    let rows = probability_rows(&out.space, &out.p_log);
    write_csv(&dir.join("p.csv"), &rows)?;
    let last = out.p_log.last().map_or(0, |(s, _)| *s);
    let final_rows: Vec<ProbabilityRow> = rows.into_iter().filter(|r| r.step == last).collect();
    heatmap_from_rows(&[final_rows])?.save(&dir.join("heatmap.csv"))?;
    write_json(&dir.join("summary.json"), summary)
}

/// Retrains a saved structure on the configured task and writes
/// `retrain.json` to `cfg.output_dir`.
pub fn run_retrain(structure_path: &Path, cfg: &ExperimentConfig) -> Result<RetrainSummary> {
    cfg.validate()?;
    let structure = SearchedStructure::load(structure_path)?;
    let bb = cfg.backbone()?;
    let space = structure.check_backbone(&bb)?;
    let (task, split) = load_task(cfg)?;
    let modules = space.len();
    let re = retrain(&bb, space, &split, &cfg.retrain, cfg.search.seed).map_err(|e| e.context("retrain"))?;
    let summary = RetrainSummary {
        structure_task: structure.header.task.clone(),
        task: task.name().to_string(),
        seed: cfg.search.seed,
        fingerprint_matches: structure.header.backbone_fingerprint == fingerprint_hex(bb.fingerprint()),
        modules,
        metrics: re.metrics,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("retrain.json"), &summary)?;
    Ok(summary)
}

/// Mean and spread of one (mode, budget) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGroup {
    pub sparsity_mode: SparsityMode,
    pub budget_bp: f64,
    pub budget_params: u64,
    pub seeds: Vec<u64>,
    pub test: Vec<f64>,
    pub mean_test: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_test: f64,
    pub mean_params: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparsity_mode: SparsityMode,
    pub budget_bp: f64,
    pub budget_params: u64,
    pub seed: u64,
    pub total_params: u64,
    pub ratio_bp: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub groups: Vec<SweepGroup>,
}

/// Parallelism cap from [`THREADS_ENV`], if set.
pub fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

fn mode_dir(mode: SparsityMode) -> &'static str {
    match mode {
        SparsityMode::GlobalSigmoid => "global-sigmoid",
        SparsityMode::L0 => "l0",
    }
}

/// Runs a search per (mode, budget, seed) of `cfg.sweep`, each into its own
/// subdirectory `<mode>/bp-<budget>/seed-<seed>`, then writes `sweep.csv` and
/// a `summary.json` per (mode, budget).
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let budgets = cfg.sweep.budget_params(&cfg.backbone)?;
    let modes = if cfg.sweep.modes.is_empty() {
        vec![cfg.search.sparsity_mode]
    } else {
        cfg.sweep.modes.clone()
    };
    let mut jobs = Vec::new();
    for &mode in &modes {
        for (&bp, &params) in cfg.sweep.budgets_bp.iter().zip(&budgets) {
            for &seed in &cfg.sweep.seeds {
                let mut run = cfg.clone();
                run.search.budget = Budget::Params(params);
                run.search.seed = seed;
                run.search.sparsity_mode = mode;
                run.output_dir = cfg
                    .output_dir
                    .join(mode_dir(mode))
                    .join(format!("bp-{bp}"))
                    .join(format!("seed-{seed}"));
                jobs.push((mode, bp, params, seed, run));
            }
        }
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = sweep_threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::config(format!("cannot start sweep workers: {e}")))?;
    let results: Vec<Result<SweepRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|(mode, bp, params, seed, run)| {
                let s = run_search(run).map_err(|e| e.context(format!("sweep {} {bp} bp seed {seed}", mode_dir(*mode))))?;
                log::info!("sweep {} {bp} bp seed {seed}: test {:.4}", mode_dir(*mode), s.test);
                Ok(SweepRow {
                    sparsity_mode: *mode,
                    budget_bp: *bp,
                    budget_params: *params,
                    seed: *seed,
                    total_params: s.total_params,
                    ratio_bp: s.ratio_bp,
                    val: s.val,
                    test: s.test,
                })
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut groups = Vec::new();
    for &mode in &modes {
        for (&bp, &params) in cfg.sweep.budgets_bp.iter().zip(&budgets) {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.sparsity_mode == mode && r.budget_bp == bp)
                .collect();
            let test: Vec<f64> = cell.iter().map(|r| r.test).collect();
            let (mean, std) = mean_std(&test);
            let group = SweepGroup {
                sparsity_mode: mode,
                budget_bp: bp,
                budget_params: params,
                seeds: cell.iter().map(|r| r.seed).collect(),
                mean_test: mean,
                std_test: std,
                mean_params: cell.iter().map(|r| r.total_params as f64).sum::<f64>() / cell.len() as f64,
                test,
            };
            let dir: PathBuf = cfg.output_dir.join(mode_dir(mode)).join(format!("bp-{bp}"));
            write_json(&dir.join("summary.json"), &group)?;
            groups.push(group);
        }
    }
    write_csv(&cfg.output_dir.join("sweep.csv"), &rows)?;
    Ok(SweepReport { rows, groups })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
