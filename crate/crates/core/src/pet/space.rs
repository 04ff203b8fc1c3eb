use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{PetKind, PetModule};
use crate::backbone::{enumerate_sites, BackboneConfig, SublayerId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// LoRA on every projection, Adapter-LR on attention/FFN outputs, BitFit
    /// on projections and norms, LNFit on norms.
    Mix,
    /// LoRA on every projection.
    Lora,
    /// An explicit candidate list, e.g. a searched structure being retrained.
    Custom,
}

impl SpaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Mix => "mix",
            SpaceKind::Lora => "lora",
            SpaceKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix" => Ok(SpaceKind::Mix),
            "lora" => Ok(SpaceKind::Lora),
            "custom" => Ok(SpaceKind::Custom),
            other => Err(Error::config(format!("unknown search space '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Candidate {
    pub site: SublayerId,
    pub kind: PetKind,
    pub rank: usize,
}

/// The ordered candidate modules of a supernet.
///
/// Order is canonical: forward order of sites, then kind in the order
/// LoRA, Adapter, ParallelAdapter, BitFit, LNFit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    kind: SpaceKind,
    modules: Vec<PetModule>,
}

impl SearchSpace {
    pub fn build(kind: SpaceKind, cfg: &BackboneConfig, rank: usize) -> Result<Self> {
        let kinds: &[PetKind] = match kind {
            SpaceKind::Mix => &[PetKind::Lora, PetKind::Adapter, PetKind::BitFit, PetKind::LnFit],
            SpaceKind::Lora => &[PetKind::Lora],
            SpaceKind::Custom => {
                return Err(Error::config("a custom space needs an explicit candidate list"))
            }
        };
        let mut modules = Vec::new();
        for site in enumerate_sites(cfg) {
            for &k in kinds {
                if k.is_legal_at(&site, cfg) {
                    modules.push(PetModule::new(k, site, rank, cfg)?);
                }
            }
        }
        Ok(SearchSpace { kind, modules })
    }

    pub fn mix(cfg: &BackboneConfig, rank: usize) -> Result<Self> {
        Self::build(SpaceKind::Mix, cfg, rank)
    }

    pub fn lora(cfg: &BackboneConfig, rank: usize) -> Result<Self> {
        Self::build(SpaceKind::Lora, cfg, rank)
    }

    /// Validates and canonically orders an explicit candidate list.
    pub fn custom(cfg: &BackboneConfig, candidates: &[Candidate]) -> Result<Self> {
        let order: HashMap<SublayerId, usize> = enumerate_sites(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let mut seen = HashSet::new();
        let mut modules = Vec::with_capacity(candidates.len());
        for c in candidates {
            c.site.validate(cfg)?;
            if !seen.insert((c.site, c.kind)) {
                return Err(Error::config(format!("duplicate {} at {}", c.kind, c.site)));
            }
            modules.push(PetModule::new(c.kind, c.site, c.rank, cfg)?);
        }
        modules.sort_by_key(|m| (order[&m.site], m.kind));
        Ok(SearchSpace {
            kind: SpaceKind::Custom,
            modules,
        })
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn modules(&self) -> &[PetModule] {
        &self.modules
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        self.modules
            .iter()
            .map(|m| Candidate {
                site: m.site,
                kind: m.kind,
                rank: m.rank,
            })
            .collect()
    }

    /// `|delta_i|` per candidate.
    pub fn counts(&self) -> Vec<u64> {
        self.modules.iter().map(|m| m.param_count() as u64).collect()
    }

    pub fn total_params(&self) -> u64 {
        self.counts().iter().sum()
    }

    /// Subspace holding the candidates at the given indices.
    pub fn subset(&self, indices: &[usize]) -> SearchSpace {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        SearchSpace {
            kind: SpaceKind::Custom,
            modules: idx.iter().map(|&i| self.modules[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn custom_space_is_canonical_and_rejects_duplicates() {
        let cfg = BackboneConfig::default();
        let mix = SearchSpace::mix(&cfg, 1).unwrap();
        let mut cands = mix.candidates();
        cands.reverse();
        let back = SearchSpace::custom(&cfg, &cands).unwrap();
        assert_eq!(back.modules(), mix.modules());
        cands.push(cands[0]);
        assert!(SearchSpace::custom(&cfg, &cands).is_err());
    }
}
