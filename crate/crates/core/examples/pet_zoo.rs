//! The five module kinds over the mixed search space: how many candidates of
//! each, how big they are, and that a fresh supernet leaves the backbone
//! output untouched.

use std::collections::BTreeMap;

use s3pet::autodiff::Tape;
use s3pet::backbone::{Backbone, BackboneConfig, Batch, NoHook};
use s3pet::pet::{Gates, SearchSpace, Supernet};

fn main() -> s3pet::Result<()> {
    let cfg = BackboneConfig::default();
    let bb = Backbone::new(cfg.clone())?;
    let mix = SearchSpace::mix(&cfg, 1)?;
    let lora = SearchSpace::lora(&cfg, 1)?;

    let mut by_kind: BTreeMap<&str, (usize, u64)> = BTreeMap::new();
    for m in mix.modules() {
        let e = by_kind.entry(m.kind.name()).or_default();
        e.0 += 1;
        e.1 += m.param_count() as u64;
    }
    println!("mix space: {} candidates, {} parameters", mix.len(), mix.total_params());
    for (kind, (n, params)) in &by_kind {
        println!("  {kind:<16} {n:>3} modules {params:>5} params");
    }
    println!("lora space: {} candidates, {} parameters", lora.len(), lora.total_params());

    let net = Supernet::new(mix);
    let delta = net.init_params(0);
    let batch = Batch::new(1, 3, 1, vec![5, 6, 7], vec![0], vec![2])?;
    let mut tape = Tape::new();
    let base = bb.forward(&mut tape, &batch, &mut NoHook)?;
    let base = tape.value(base).to_vec();
    let ones = vec![1.0; net.len()];
    let mut tape = Tape::new();
    let mut hook = net.hook(&tape, &delta, Gates::Hard(&ones), false)?;
    let out = bb.forward(&mut tape, &batch, &mut hook)?;
    println!("fresh supernet with all gates open changes the output: {}", tape.value(out) != base.as_slice());
    Ok(())
}
