//! PET modules in the unified view `H_out = m(H_in) + z * Delta`.
//!
//! | kind             | Delta                          | sites                 |
//! |------------------|--------------------------------|-----------------------|
//! | LoRA             | `H_in A B`                     | linear projections    |
//! | Adapter (LR)     | `relu(m(H_in) W_down) W_up`    | attention/FFN outputs |
//! | Parallel adapter | `relu(H_in W_down) W_up`       | attention/FFN outputs |
//! | BitFit           | `b` broadcast over rows        | linear projections, LN|
//! | LNFit            | `H_in / var(H_in) * s`         | LN                    |
//!
//! The "up" half of every module is zero at init, so a fresh module is an
//! exact identity.

mod space;
mod supernet;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use space::{Candidate, SearchSpace, SpaceKind};
pub use supernet::{Gates, Supernet, SupernetHook};

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{BackboneConfig, SiteClass, SublayerId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetKind {
    Lora,
    Adapter,
    ParallelAdapter,
    #[serde(rename = "bitfit")]
    BitFit,
    #[serde(rename = "lnfit")]
    LnFit,
}

impl PetKind {
    pub const ALL: [PetKind; 5] = [
        PetKind::Lora,
        PetKind::Adapter,
        PetKind::ParallelAdapter,
        PetKind::BitFit,
        PetKind::LnFit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PetKind::Lora => "lora",
            PetKind::Adapter => "adapter",
            PetKind::ParallelAdapter => "parallel_adapter",
            PetKind::BitFit => "bitfit",
            PetKind::LnFit => "lnfit",
        }
    }

    pub fn is_legal_at(self, site: &SublayerId, cfg: &BackboneConfig) -> bool {
        if site.validate(cfg).is_err() {
            return false;
        }
        match (self, site.class(cfg)) {
            (PetKind::Lora, SiteClass::Linear { .. }) => true,
            (PetKind::Adapter | PetKind::ParallelAdapter, SiteClass::ModuleOutput { .. }) => true,
            (PetKind::BitFit, SiteClass::Linear { .. } | SiteClass::Norm { .. }) => true,
            (PetKind::LnFit, SiteClass::Norm { .. }) => true,
            _ => false,
        }
    }
}

impl fmt::Display for PetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One PET module: its kind, where it attaches, and the shapes of its `delta`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PetModule {
    pub kind: PetKind,
    pub site: SublayerId,
    pub rank: usize,
    shapes: Vec<Vec<usize>>,
}

impl PetModule {
    pub fn new(kind: PetKind, site: SublayerId, rank: usize, cfg: &BackboneConfig) -> Result<Self> {
        if !kind.is_legal_at(&site, cfg) {
            return Err(Error::config(format!("{kind} cannot attach at {site}")));
        }
        if rank == 0 {
            return Err(Error::config(format!("{kind} at {site}: rank must be >= 1")));
        }
        let shapes = match (kind, site.class(cfg)) {
            (PetKind::Lora, SiteClass::Linear { d_in, d_out }) => {
                vec![vec![d_in, rank], vec![rank, d_out]]
            }
            (PetKind::Adapter | PetKind::ParallelAdapter, SiteClass::ModuleOutput { d }) => {
                vec![vec![d, rank], vec![rank, d]]
            }
            (PetKind::BitFit, SiteClass::Linear { d_out, .. }) => vec![vec![d_out]],
            (PetKind::BitFit | PetKind::LnFit, SiteClass::Norm { d }) => vec![vec![d]],
            _ => unreachable!("legality checked above"),
        };
        Ok(PetModule {
            kind,
            site,
            rank,
            shapes,
        })
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// `|delta|`, the number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fresh parameters: the "down"/A half Gaussian, the "up"/B half, biases
    /// and scales zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        match self.kind {
            PetKind::Lora => vec![
                Tensor::randn(self.shapes[0].clone(), 1.0 / (self.rank as f64).sqrt(), rng),
                Tensor::zeros(self.shapes[1].clone()),
            ],
            PetKind::Adapter | PetKind::ParallelAdapter => {
                let d = self.shapes[0][0];
                vec![
                    Tensor::randn(self.shapes[0].clone(), 1.0 / (d as f64).sqrt(), rng),
                    Tensor::zeros(self.shapes[1].clone()),
                ]
            }
            PetKind::BitFit | PetKind::LnFit => vec![Tensor::zeros(self.shapes[0].clone())],
        }
    }

    /// Delta for this module given the site's input and frozen output.
    pub fn delta(&self, tape: &mut Tape, params: &[Var], h_in: Var, m_out: Var) -> Result<Var> {
        match self.kind {
            PetKind::Lora => lora_delta(tape, h_in, params[0], params[1]),
            PetKind::Adapter => adapter_delta(tape, m_out, params[0], params[1]),
            PetKind::ParallelAdapter => parallel_adapter_delta(tape, h_in, params[0], params[1]),
            PetKind::BitFit => {
                let rows = tape.shape(m_out)[0];
                bitfit_delta(tape, params[0], rows)
            }
            PetKind::LnFit => lnfit_delta(tape, h_in, params[0]),
        }
    }
}

/// `h_in A B`.
pub fn lora_delta(tape: &mut Tape, h_in: Var, a: Var, b: Var) -> Result<Var> {
    let ha = tape.matmul(h_in, a)?;
    tape.matmul(ha, b)
}

/// `relu(m_out W_down) W_up`.
pub fn adapter_delta(tape: &mut Tape, m_out: Var, w_down: Var, w_up: Var) -> Result<Var> {
    let x = tape.matmul(m_out, w_down)?;
    let x = tape.relu(x);
    tape.matmul(x, w_up)
}

/// `relu(h_in W_down) W_up`.
pub fn parallel_adapter_delta(tape: &mut Tape, h_in: Var, w_down: Var, w_up: Var) -> Result<Var> {
    adapter_delta(tape, h_in, w_down, w_up)
}

/// `b` repeated over `rows` rows.
pub fn bitfit_delta(tape: &mut Tape, b: Var, rows: usize) -> Result<Var> {
    let d = tape.shape(b)[0];
    let zeros = tape.constant(vec![rows, d], vec![0.0; rows * d])?;
    tape.add(zeros, b)
}

/// `h_in / var(h_in) * s`, the variance-normalized input rescaled by `s`.
pub fn lnfit_delta(tape: &mut Tape, h_in: Var, s: Var) -> Result<Var> {
    let n = tape.var_normalize(h_in);
    tape.mul(n, s)
}

/// `m_out + z * delta` with `z` a scalar node.
pub fn apply_gated(tape: &mut Tape, m_out: Var, delta: Var, z: Var) -> Result<Var> {
    if tape.shape(m_out) != tape.shape(delta) {
        return Err(Error::shape(format!(
            "apply_gated: output {:?} vs delta {:?}",
            tape.shape(m_out),
            tape.shape(delta)
        )));
    }
    let zd = tape.mul(delta, z)?;
    tape.add(m_out, zd)
}
