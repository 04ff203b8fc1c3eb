//! Plain training of a fixed set of PET modules, and evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Backbone, Batch};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::pet::{Gates, SearchSpace, Supernet};
use crate::rng::{stream, Stream};
use crate::task::{BatchStream, DataSplit, Dataset};

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid retrain settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub val: f64,
    pub test: f64,
    pub params: u64,
    /// Trainable parameters relative to the backbone, in basis points.
    pub ratio_bp: f64,
}

pub fn ratio_bp(params: u64, backbone_params: u64) -> f64 {
    params as f64 / backbone_params as f64 * 10_000.0
}

/// Mean cross-entropy of one batch and its gradient w.r.t. `delta`, all gates
/// hard-open.
fn loss_and_grad(bb: &Backbone, net: &Supernet, delta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let ones = vec![1.0; net.len()];
    let mut tape = Tape::new();
    let mut hook = net.hook(&tape, delta, Gates::Hard(&ones), true)?;
    let logits = bb.forward(&mut tape, batch, &mut hook)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    let value = tape.item(loss);
    if !value.is_finite() {
        return Err(Error::numeric(format!("non-finite training loss {value}")));
    }
    tape.backward(loss)?;
    Ok((value, hook.delta_grad(&tape)))
}

/// Token accuracy of argmax predictions with the given hard gates.
pub fn evaluate(bb: &Backbone, net: &Supernet, delta: &[f64], gates: &[f64], data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in data.chunks(EVAL_CHUNK) {
        let batch = batch?;
        let mut tape = Tape::new();
        let mut hook = net.hook(&tape, delta, Gates::Hard(gates), false)?;
        let logits = bb.forward(&mut tape, &batch, &mut hook)?;
        let v = tape.shape(logits)[1];
        for (row, &t) in tape.value(logits).chunks(v).zip(&batch.targets) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                .0;
            correct += usize::from(arg == t);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub metrics: Metrics,
    pub delta: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Fresh init of the modules in `space`, trained with gates fixed at 1 on the
/// full training split.
pub fn retrain(
    bb: &Backbone,
    space: SearchSpace,
    split: &DataSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    let net = Supernet::new(space);
    let mut delta = net.init_params(seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    if !net.is_empty() {
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                decay_steps: cfg.steps,
                ..Default::default()
            },
            delta.len(),
        );
        let mut batches = BatchStream::new(&split.train, cfg.batch_size, stream(seed, Stream::TrainBatches))?;
        for step in 0..cfg.steps {
            let batch = batches.next_batch()?;
            let (loss, grad) =
                loss_and_grad(bb, &net, &delta, &batch).map_err(|e| e.context(format!("retrain step {step}")))?;
            losses.push(loss);
            opt.step(&mut delta, &grad)?;
        }
    }
    let ones = vec![1.0; net.len()];
    let params = net.space().total_params();
    let metrics = Metrics {
        val: evaluate(bb, &net, &delta, &ones, &split.val)?,
        test: evaluate(bb, &net, &delta, &ones, &split.test)?,
        params,
        ratio_bp: ratio_bp(params, bb.param_count() as u64),
    };
    Ok(RetrainOutcome {
        metrics,
        delta,
        losses,
    })
}
