use std::collections::HashMap;
use std::ops::Range;

use super::{apply_gated, SearchSpace};
use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{SiteHook, SublayerId};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Gate values for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a> {
    /// A `[n]` node on the tape, typically the relaxed samples `z_hat`.
    Soft(Var),
    /// Constants. A gate of exactly 0 skips the module, exactly 1 adds its
    /// delta unscaled.
    Hard(&'a [f64]),
}

/// Backbone-independent bookkeeping for a set of candidate modules whose
/// parameters live in one flat vector.
#[derive(Clone, Debug)]
pub struct Supernet {
    space: SearchSpace,
    offsets: Vec<usize>,
    by_site: HashMap<SublayerId, Vec<usize>>,
}

impl Supernet {
    pub fn new(space: SearchSpace) -> Self {
        let mut offsets = Vec::with_capacity(space.len() + 1);
        let mut by_site: HashMap<SublayerId, Vec<usize>> = HashMap::new();
        let mut off = 0;
        for (i, m) in space.modules().iter().enumerate() {
            offsets.push(off);
            off += m.param_count();
            by_site.entry(m.site).or_default().push(i);
        }
        offsets.push(off);
        Supernet {
            space,
            offsets,
            by_site,
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    /// Length of the flat parameter vector.
    pub fn num_params(&self) -> usize {
        *self.offsets.last().expect("offsets has a sentinel")
    }

    pub fn param_range(&self, module: usize) -> Range<usize> {
        self.offsets[module]..self.offsets[module + 1]
    }

    /// Fresh parameters for every module, drawn in canonical order.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, Stream::PetInit);
        let mut flat = Vec::with_capacity(self.num_params());
        for m in self.space.modules() {
            for t in m.init_params(&mut rng) {
                flat.extend_from_slice(t.data());
            }
        }
        flat
    }

    /// A hook that attaches every module with parameters `delta`.
    pub fn hook<'a>(
        &'a self,
        tape: &Tape,
        delta: &'a [f64],
        gates: Gates<'a>,
        trainable: bool,
    ) -> Result<SupernetHook<'a>> {
        if delta.len() != self.num_params() {
            return Err(Error::shape(format!(
                "supernet has {} parameters, got {}",
                self.num_params(),
                delta.len()
            )));
        }
        let n = match gates {
            Gates::Soft(z) => tape.value(z).len(),
            Gates::Hard(z) => z.len(),
        };
        if n != self.len() {
            return Err(Error::shape(format!(
                "supernet has {} modules, got {n} gates",
                self.len()
            )));
        }
        Ok(SupernetHook {
            net: self,
            delta,
            gates,
            trainable,
            vars: vec![None; self.len()],
        })
    }
}

pub struct SupernetHook<'a> {
    net: &'a Supernet,
    delta: &'a [f64],
    gates: Gates<'a>,
    trainable: bool,
    vars: Vec<Option<Vec<Var>>>,
}

impl SupernetHook<'_> {
    fn leaves(&mut self, tape: &mut Tape, module: usize) -> Result<Vec<Var>> {
        let m = &self.net.space.modules()[module];
        let mut off = self.net.offsets[module];
        let mut vars = Vec::with_capacity(m.shapes().len());
        for shape in m.shapes() {
            let n: usize = shape.iter().product();
            let data = self.delta[off..off + n].to_vec();
            let t = if self.trainable {
                Tensor::param(shape.clone(), data)?
            } else {
                Tensor::new(shape.clone(), data)?
            };
            vars.push(tape.leaf(&t));
            off += n;
        }
        self.vars[module] = Some(vars.clone());
        Ok(vars)
    }

    /// Flat gradient of the last `backward` w.r.t. the parameters; modules
    /// that never ran get zeros.
    pub fn delta_grad(&self, tape: &Tape) -> Vec<f64> {
        let mut g = vec![0.0; self.net.num_params()];
        for (i, vars) in self.vars.iter().enumerate() {
            let Some(vars) = vars else { continue };
            let mut off = self.net.offsets[i];
            for &v in vars {
                let n = tape.value(v).len();
                if let Some(gv) = tape.grad(v) {
                    g[off..off + n].copy_from_slice(gv);
                }
                off += n;
            }
        }
        g
    }
}

impl SiteHook for SupernetHook<'_> {
    fn apply(&mut self, tape: &mut Tape, site: SublayerId, input: Var, output: Var) -> Result<Var> {
        let net = self.net;
        let Some(modules) = net.by_site.get(&site) else {
            return Ok(output);
        };
        let mut out = output;
        for &i in modules {
            if let Gates::Hard(z) = self.gates {
                if z[i] == 0.0 {
                    continue;
                }
            }
            let params = self.leaves(tape, i)?;
            let delta = net.space.modules()[i].delta(tape, &params, input, output)?;
            out = match self.gates {
                Gates::Soft(z) => {
                    let zi = tape.select(z, i)?;
                    apply_gated(tape, out, delta, zi)?
                }
                Gates::Hard(z) if z[i] == 1.0 => tape.add(out, delta)?,
                Gates::Hard(z) => {
                    let zi = tape.scalar(z[i]);
                    apply_gated(tape, out, delta, zi)?
                }
            };
        }
        Ok(out)
    }
}
