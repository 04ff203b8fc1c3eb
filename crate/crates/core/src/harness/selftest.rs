use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_gradients, Tape, Tensor};
use crate::backbone::{Backbone, BackboneConfig, Batch, NoHook};
use crate::error::Result;
use crate::gating::{expected_param_count, open_uniform, sample_binary_concrete, solve_zeta};
use crate::pet::{Gates, SearchSpace, Supernet};
use crate::structure::select_structure;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfTestCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> SelfTestCheck {
    SelfTestCheck { name, passed, detail }
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<SelfTestCheck> {
    let x = Tensor::param(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = Tensor::param(vec![4, 5], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let gc = check_gradients(&[x, w], 1e-5, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.sigmoid(h);
        let h = t.var_normalize(h);
        t.cross_entropy(h, &[0, 3, 4])
    })?;
    let err = gc.max_rel_err();
    Ok(check("gradients", err < 1e-4, format!("max relative error {err:.2e}")))
}

fn identity(rng: &mut ChaCha8Rng) -> Result<SelfTestCheck> {
    let cfg = BackboneConfig {
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        hidden_dim: 8,
        ffn_dim: 12,
        vocab_size: 10,
        max_seq_len: 6,
        seed: 5,
    };
    let bb = Backbone::new(cfg.clone())?;
    let net = Supernet::new(SearchSpace::mix(&cfg, 1)?);
    let enc: Vec<usize> = (0..8).map(|_| rng.random_range(1..10)).collect();
    let batch = Batch::new(2, 4, 1, enc, vec![0, 0], vec![1, 2])?;
    let mut tape = Tape::new();
    let frozen = bb.forward(&mut tape, &batch, &mut NoHook)?;
    let frozen = tape.value(frozen).to_vec();
    let delta = net.init_params(9);
    let z: Vec<f64> = (0..net.len()).map(|_| rng.random()).collect();
    let mut tape = Tape::new();
    let zv = tape.constant(vec![net.len()], z)?;
    let mut hook = net.hook(&tape, &delta, Gates::Soft(zv), false)?;
    let out = bb.forward(&mut tape, &batch, &mut hook)?;
    let same = tape.value(out) == frozen.as_slice();
    Ok(check(
        "identity",
        same,
        "fresh modules leave the frozen output bitwise unchanged".into(),
    ))
}

fn budget(rng: &mut ChaCha8Rng) -> Result<SelfTestCheck> {
    let counts: Vec<u64> = (0..40).map(|_| rng.random_range(8..100)).collect();
    let alpha: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b = 0.1 * counts.iter().sum::<u64>() as f64;
    let zeta = solve_zeta(&alpha, 1.0, &counts, b)?;
    let p: Vec<f64> = alpha.iter().map(|a| crate::autodiff::sigmoid(a - zeta)).collect();
    let en = expected_param_count(&p, &counts)?;
    Ok(check(
        "budget",
        en <= b + 1e-9 && en > b - 1.0,
        format!("E[N] = {en:.6} for budget {b:.1}"),
    ))
}

fn knapsack(rng: &mut ChaCha8Rng) -> Result<SelfTestCheck> {
    let n = 10;
    let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let c: Vec<u64> = (0..n).map(|_| rng.random_range(1..30)).collect();
    let budget = 60;
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let (mut w, mut v) = (0, 0.0);
        for i in 0..n {
            if mask & (1 << i) != 0 {
                w += c[i];
                v += p[i];
            }
        }
        if w <= budget && v > best {
            best = v;
        }
    }
    let s = select_structure(&p, &c, budget)?;
    Ok(check(
        "knapsack",
        s.value == best && s.total_params <= budget,
        format!("value {} vs enumeration {best}", s.value),
    ))
}

fn concrete(rng: &mut ChaCha8Rng) -> SelfTestCheck {
    let n = 20_000;
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.5, 0.9] {
        let hits = (0..n)
            .filter(|_| sample_binary_concrete(p, 1.0, open_uniform(rng)) > 0.5)
            .count();
        worst = worst.max((hits as f64 / n as f64 - p).abs());
    }
    check("binary-concrete", worst < 0.02, format!("largest |P(z > 0.5) - p| = {worst:.4}"))
}

/// Fast internal consistency checks, for a quick look at a fresh build.
pub fn selftest() -> Result<Vec<SelfTestCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    Ok(vec![
        gradients(&mut rng)?,
        identity(&mut rng)?,
        budget(&mut rng)?,
        knapsack(&mut rng)?,
        concrete(&mut rng),
    ])
}
