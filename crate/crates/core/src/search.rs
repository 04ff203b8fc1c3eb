//! Bi-level structure search.
//!
//! Each step: solve zeta and draw one set of uniforms; take `g_delta` on a
//! `D_delta` batch; form the structural gradient on a `D_alpha` batch,
//! either first order or with the finite-difference second-order correction
//!
//! ```text
//! delta'  = delta - xi * g_delta
//! g       = d_alpha L_alpha(delta') - xi * (d_alpha L_delta(delta+) - d_alpha L_delta(delta-)) / (2 eps)
//! delta+- = delta +- eps * d_delta' L_alpha(delta')
//! ```
//!
//! then step `alpha` and `delta` with their own AdamW optimizers. Every
//! `eval_interval` steps the current probabilities are turned into a
//! structure and scored on `D_val`; the best snapshot is returned.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Backbone, Batch};
use crate::error::{Error, Result};
use crate::gating::{expected_param_count, Budget, GateState, SparsityMode};
use crate::optim::{AdamW, AdamWConfig};
use crate::pet::{Gates, SearchSpace, SpaceKind, Supernet};
use crate::rng::{stream, Stream};
use crate::structure::{select_structure, Selection};
use crate::task::{BatchStream, DataSplit};
use crate::train::evaluate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub budget: Budget,
    pub search_space: SpaceKind,
    pub rank: usize,
    pub sparsity_mode: SparsityMode,
    /// Weight of the expected-parameter penalty in `l0` mode; `None` uses
    /// `1 / B`, so the penalty at `E[N] = B` is one nat.
    pub l0_lambda: Option<f64>,
    /// Rate of the virtual SGD step in the second-order gradient.
    pub inner_lr: f64,
    /// AdamW rate for `delta` (decayed linearly over the search).
    pub delta_lr: f64,
    pub alpha_lr: f64,
    /// Finite-difference radius; `None` uses `0.01 / |grad|`.
    pub epsilon: Option<f64>,
    pub first_order_only: bool,
    pub tau: f64,
    pub beta: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: Budget::Params(486),
            search_space: SpaceKind::Mix,
            rank: 1,
            sparsity_mode: SparsityMode::GlobalSigmoid,
            l0_lambda: None,
            inner_lr: 1e-2,
            delta_lr: 1e-2,
            alpha_lr: 0.1,
            epsilon: None,
            first_order_only: false,
            tau: 1.0,
            beta: 1.0,
            steps: 300,
            eval_interval: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("search.{m}")));
        if self.search_space == SpaceKind::Custom {
            return bad("search_space must be mix or lora");
        }
        if !(self.inner_lr >= 0.0) || !self.inner_lr.is_finite() {
            return bad("inner_lr must be finite and non-negative");
        }
        if matches!(self.epsilon, Some(e) if !(e > 0.0)) {
            return bad("epsilon must be positive");
        }
        if !(self.delta_lr > 0.0) || !(self.alpha_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.tau > 0.0) || !(self.beta > 0.0) {
            return bad("tau and beta must be positive");
        }
        if matches!(self.l0_lambda, Some(l) if !(l >= 0.0)) {
            return bad("l0_lambda must be non-negative");
        }
        if self.eval_interval == 0 || self.batch_size == 0 || self.rank == 0 {
            return bad("eval_interval, batch_size and rank must be positive");
        }
        Ok(())
    }
}

/// Everything a loss evaluation needs besides `delta`, the gates and the batch.
pub struct LossContext<'a> {
    pub backbone: &'a Backbone,
    pub net: &'a Supernet,
    pub counts: &'a [u64],
    pub mode: SparsityMode,
    pub l0_lambda: f64,
}

/// Loss value and the requested gradients.
#[derive(Clone, Debug)]
pub struct Pass {
    pub loss: f64,
    pub g_delta: Option<Vec<f64>>,
    pub g_alpha: Option<Vec<f64>>,
}

impl LossContext<'_> {
    /// Cross-entropy of the supernet on `batch` under the gate's current soft
    /// samples; the outer loss (`outer = true`) also carries the L0 penalty in
    /// `l0` mode.
    pub fn pass(
        &self,
        delta: &[f64],
        gate: &GateState,
        batch: &Batch,
        want_delta: bool,
        want_alpha: bool,
        outer: bool,
    ) -> Result<Pass> {
        let mut tape = Tape::new();
        let global = self.mode == SparsityMode::GlobalSigmoid;
        let gv = gate.record(&mut tape, global, want_alpha)?;
        let mut hook = self.net.hook(&tape, delta, Gates::Soft(gv.z), want_delta)?;
        let logits = self.backbone.forward(&mut tape, batch, &mut hook)?;
        let mut loss = tape.cross_entropy(logits, &batch.targets)?;
        if outer && self.mode == SparsityMode::L0 && self.l0_lambda > 0.0 {
            let pen = crate::gating::l0_penalty_on(&mut tape, gv.p, self.counts, self.l0_lambda)?;
            loss = tape.add(loss, pen)?;
        }
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {value}")));
        }
        if !(want_delta || want_alpha) {
            return Ok(Pass {
                loss: value,
                g_delta: None,
                g_alpha: None,
            });
        }
        tape.backward(loss)?;
        let g_delta = want_delta.then(|| hook.delta_grad(&tape));
        let g_alpha = want_alpha.then(|| {
            tape.grad(gv.alpha)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; gate.len()])
        });
        Ok(Pass {
            loss: value,
            g_delta,
            g_alpha,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StructuralGradient {
    pub grad: Vec<f64>,
    /// `L_alpha` at `delta'` (at `delta` in first-order mode).
    pub loss_alpha: f64,
    /// Radius used for the finite difference, if one was taken.
    pub epsilon: Option<f64>,
}

/// Structural gradient for one step. `g_delta` is `d_delta L_delta(delta)`
/// on `batch_delta` under the same gate sample. `xi = 0` reduces to the
/// first-order gradient without evaluating the correction.
#[allow(clippy::too_many_arguments)]
pub fn structural_gradient(
    ctx: &LossContext<'_>,
    delta: &[f64],
    gate: &GateState,
    g_delta: &[f64],
    batch_delta: &Batch,
    batch_alpha: &Batch,
    xi: f64,
    epsilon: Option<f64>,
) -> Result<StructuralGradient> {
    if xi == 0.0 {
        let pass = ctx.pass(delta, gate, batch_alpha, false, true, true)?;
        return Ok(StructuralGradient {
            grad: pass.g_alpha.expect("requested"),
            loss_alpha: pass.loss,
            epsilon: None,
        });
    }
    let virt: Vec<f64> = delta.iter().zip(g_delta).map(|(d, g)| d - xi * g).collect();
    let outer = ctx.pass(&virt, gate, batch_alpha, true, true, true)?;
    let g_alpha = outer.g_alpha.expect("requested");
    let g_virt = outer.g_delta.expect("requested");
    let norm = g_virt.iter().map(|g| g * g).sum::<f64>().sqrt();
    let eps = match epsilon {
        Some(e) => e,
        None if norm > 0.0 => 0.01 / norm,
        None => 1e-3,
    };
    let shifted = |sign: f64| -> Vec<f64> {
        delta.iter().zip(&g_virt).map(|(d, g)| d + sign * eps * g).collect()
    };
    let plus = ctx.pass(&shifted(1.0), gate, batch_delta, false, true, false)?;
    let minus = ctx.pass(&shifted(-1.0), gate, batch_delta, false, true, false)?;
    let (gp, gm) = (plus.g_alpha.expect("requested"), minus.g_alpha.expect("requested"));
    let grad: Vec<f64> = (0..g_alpha.len())
        .map(|i| g_alpha[i] - xi * (gp[i] - gm[i]) / (2.0 * eps))
        .collect();
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite structural gradient {g}")));
    }
    Ok(StructuralGradient {
        grad,
        loss_alpha: outer.loss,
        epsilon: Some(eps),
    })
}

/// One row of the per-step search history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss_delta: f64,
    pub loss_alpha: f64,
    pub expected_params: f64,
    pub zeta: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub val_metric: f64,
    pub selection: Selection,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub space: SearchSpace,
    pub budget_params: u64,
    pub best: Snapshot,
    pub history: Vec<HistoryRow>,
    /// `p` at every evaluation, as `(step, p)`.
    pub p_log: Vec<(usize, Vec<f64>)>,
    pub final_alpha: Vec<f64>,
    pub final_delta: Vec<f64>,
}

fn resolve_budget(cfg: &SearchConfig, bb: &Backbone, counts: &[u64]) -> Result<u64> {
    let b = cfg.budget.resolve(bb.param_count() as u64);
    let min = counts.iter().copied().min().unwrap_or(0);
    if b < min {
        return Err(Error::config(format!(
            "budget {} ({b} parameters) is below the smallest candidate module ({min})",
            cfg.budget
        )));
    }
    Ok(b)
}

/// Runs the search. `split.delta`, `split.alpha` and `split.val` are used.
pub fn search(cfg: &SearchConfig, bb: &Backbone, split: &DataSplit) -> Result<SearchOutcome> {
    search_observed(cfg, bb, split, |_, _| {})
}

/// [`search`], calling `observe(step, gate)` right after each step's gates
/// are refreshed.
pub fn search_observed(
    cfg: &SearchConfig,
    bb: &Backbone,
    split: &DataSplit,
    mut observe: impl FnMut(usize, &GateState),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let space = SearchSpace::build(cfg.search_space, bb.config(), cfg.rank)?;
    let counts = space.counts();
    let budget = resolve_budget(cfg, bb, &counts)?;
    let net = Supernet::new(space.clone());
    let ctx = LossContext {
        backbone: bb,
        net: &net,
        counts: &counts,
        mode: cfg.sparsity_mode,
        l0_lambda: cfg.l0_lambda.unwrap_or(1.0 / budget as f64),
    };
    let zeta_budget = match cfg.sparsity_mode {
        SparsityMode::GlobalSigmoid => Some(budget as f64),
        SparsityMode::L0 => None,
    };

    let mut gate = GateState::new(space.len(), cfg.tau, cfg.beta, &mut stream(cfg.seed, Stream::AlphaInit))?;
    let mut gate_rng = stream(cfg.seed, Stream::Gate);
    let mut delta = net.init_params(cfg.seed);
    let mut delta_opt = AdamW::new(
        AdamWConfig {
            lr: cfg.delta_lr,
            decay_steps: cfg.steps,
            ..Default::default()
        },
        delta.len(),
    );
    let mut alpha_opt = AdamW::new(
        AdamWConfig {
            lr: cfg.alpha_lr,
            ..Default::default()
        },
        gate.len(),
    );
    let mut delta_batches = BatchStream::new(&split.delta, cfg.batch_size, stream(cfg.seed, Stream::DeltaBatches))?;
    let mut alpha_batches = BatchStream::new(&split.alpha, cfg.batch_size, stream(cfg.seed, Stream::AlphaBatches))?;
    let xi = if cfg.first_order_only { 0.0 } else { cfg.inner_lr };

    let mut history = Vec::with_capacity(cfg.steps);
    let mut p_log = Vec::new();
    let mut best: Option<Snapshot> = None;

    let snapshot = |step: usize, p: &[f64], delta: &[f64], best: &mut Option<Snapshot>| -> Result<f64> {
        let selection = select_structure(p, &counts, budget)?;
        let mut gates = vec![0.0; space.len()];
        for &i in &selection.indices {
            gates[i] = 1.0;
        }
        let metric = evaluate(bb, &net, delta, &gates, &split.val)?;
        if best.as_ref().is_none_or(|b| metric > b.val_metric) {
            *best = Some(Snapshot {
                step,
                val_metric: metric,
                selection,
                p: p.to_vec(),
            });
        }
        Ok(metric)
    };

    for step in 0..cfg.steps {
        gate.refresh(&counts, zeta_budget, &mut gate_rng)?;
        observe(step, &gate);
        let expected = expected_param_count(&gate.p, &counts)?;
        let bd = delta_batches.next_batch()?;
        let ba = alpha_batches.next_batch()?;

        let inner = ctx
            .pass(&delta, &gate, &bd, true, false, false)
            .map_err(|e| e.context(format!("search step {step}")))?;
        let g_delta = inner.g_delta.expect("requested");
        let sg = structural_gradient(&ctx, &delta, &gate, &g_delta, &bd, &ba, xi, cfg.epsilon)
            .map_err(|e| e.context(format!("search step {step}")))?;

        alpha_opt.step(&mut gate.alpha, &sg.grad)?;
        delta_opt.step(&mut delta, &g_delta)?;

        let val_metric = if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            p_log.push((step + 1, gate.p.clone()));
            Some(snapshot(step + 1, &gate.p, &delta, &mut best)?)
        } else {
            None
        };
        history.push(HistoryRow {
            step,
            loss_delta: inner.loss,
            loss_alpha: sg.loss_alpha,
            expected_params: expected,
            zeta: gate.zeta,
            val_metric,
        });
    }

    if best.is_none() {
        // no steps: the structure implied by the initial alpha
        gate.refresh(&counts, zeta_budget, &mut gate_rng)?;
        p_log.push((0, gate.p.clone()));
        snapshot(0, &gate.p, &delta, &mut best)?;
    }
    Ok(SearchOutcome {
        space,
        budget_params: budget,
        best: best.expect("at least one snapshot"),
        history,
        p_log,
        final_alpha: gate.alpha,
        final_delta: delta,
    })
}
