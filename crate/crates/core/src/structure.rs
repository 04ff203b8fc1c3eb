//! Extracting a budgeted structure from keep probabilities, and the
//! structure file format.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Projection, Stack, SublayerId, SublayerKind};
use crate::error::{Error, Result};
use crate::gating::Budget;
use crate::pet::{Candidate, PetKind, SearchSpace, SpaceKind};

/// Above this many DP cells the greedy fallback is used even when the exact
/// path would be allowed.
const MAX_DP_CELLS: usize = 50_000_000;

/// Indices chosen by [`select_structure`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub total_params: u64,
    /// `sum p_i` over the selection, accumulated in index order.
    pub value: f64,
    /// True when the greedy fallback produced the selection.
    pub approximate: bool,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Maximizes `sum p_i` subject to `sum counts_i <= budget`.
///
/// Exact 0/1 knapsack when there are at most 64 candidates or at most 8
/// distinct counts; greedy by `p_i / counts_i` otherwise. Among selections of
/// equal value the lighter one wins.
pub fn select_structure(p: &[f64], counts: &[u64], budget: u64) -> Result<Selection> {
    if p.len() != counts.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} modules",
            p.len(),
            counts.len()
        )));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite probability {v}")));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::config("module with zero parameters"));
    }
    let empty = Selection {
        indices: Vec::new(),
        total_params: 0,
        value: 0.0,
        approximate: false,
    };
    let Some(&min) = counts.iter().min() else {
        return Ok(empty);
    };
    if budget < min {
        log::warn!("budget {budget} is below the smallest module ({min} parameters); selecting nothing");
        return Ok(empty);
    }
    let total: u64 = counts.iter().sum();
    let distinct: HashSet<u64> = counts.iter().copied().collect();
    let exact_allowed = p.len() <= 64 || distinct.len() <= 8;
    let g = counts.iter().fold(0, |a, &c| gcd(a, c));
    let cap = (budget.min(total) / g) as usize;
    if exact_allowed && p.len().saturating_mul(cap + 1) <= MAX_DP_CELLS {
        Ok(knapsack(p, counts, g, cap))
    } else {
        Ok(greedy(p, counts, budget))
    }
}

fn knapsack(p: &[f64], counts: &[u64], g: u64, cap: usize) -> Selection {
    let n = p.len();
    let w: Vec<usize> = counts.iter().map(|&c| (c / g) as usize).collect();
    // best[c]: (value, weight) of the best subset of the items so far with
    // weight <= c; values are left folds in index order
    let mut best = vec![(0.0f64, 0usize); cap + 1];
    let mut take = vec![false; n * (cap + 1)];
    for i in 0..n {
        for c in (w[i]..=cap).rev() {
            let (bv, bw) = best[c - w[i]];
            let cand = (bv + p[i], bw + w[i]);
            let cur = best[c];
            if cand.0 > cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                best[c] = cand;
                take[i * (cap + 1) + c] = true;
            }
        }
    }
    let mut indices = Vec::new();
    let mut c = cap;
    for i in (0..n).rev() {
        if take[i * (cap + 1) + c] {
            indices.push(i);
            c -= w[i];
        }
    }
    indices.reverse();
    finish(p, counts, indices, false)
}

fn greedy(p: &[f64], counts: &[u64], budget: u64) -> Selection {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let da = p[a] / counts[a] as f64;
        let db = p[b] / counts[b] as f64;
        db.total_cmp(&da)
            .then(p[b].total_cmp(&p[a]))
            .then(a.cmp(&b))
    });
    let mut used = 0;
    let mut indices = Vec::new();
    for i in order {
        if used + counts[i] <= budget {
            used += counts[i];
            indices.push(i);
        }
    }
    indices.sort_unstable();
    finish(p, counts, indices, true)
}

fn finish(p: &[f64], counts: &[u64], indices: Vec<usize>, approximate: bool) -> Selection {
    let value = indices.iter().fold(0.0, |acc, &i| acc + p[i]);
    let total_params = indices.iter().map(|&i| counts[i]).sum();
    Selection {
        indices,
        total_params,
        value,
        approximate,
    }
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureHeader {
    pub format_version: u32,
    /// Hex digest of the backbone the structure was searched on.
    pub backbone_fingerprint: String,
    pub budget: Budget,
    pub budget_params: u64,
    pub search_space: SpaceKind,
    pub task: String,
    pub seed: u64,
    pub total_params: u64,
    pub approximate: bool,
    pub backbone: BackboneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureEntry {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SublayerKind,
    pub projection: Option<Projection>,
    pub pet_kind: PetKind,
    pub rank: usize,
    pub p_at_extraction: f64,
}

impl StructureEntry {
    pub fn site(&self) -> SublayerId {
        SublayerId {
            stack: self.stack,
            layer: self.layer,
            kind: self.kind,
            projection: self.projection,
        }
    }
}

/// A searched structure: which modules to train, and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchedStructure {
    pub header: StructureHeader,
    pub sites: Vec<StructureEntry>,
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

/// Provenance recorded alongside an extracted structure.
#[derive(Clone, Debug)]
pub struct StructureSource<'a> {
    pub task: &'a str,
    pub seed: u64,
    pub budget: Budget,
}

impl SearchedStructure {
    /// Builds the structure for `selection` out of `space`, with `p` the
    /// probabilities the selection was made from.
    pub fn from_selection(
        backbone: &Backbone,
        space: &SearchSpace,
        selection: &Selection,
        p: &[f64],
        source: StructureSource<'_>,
    ) -> Self {
        let sites = selection
            .indices
            .iter()
            .map(|&i| {
                let m = &space.modules()[i];
                StructureEntry {
                    stack: m.site.stack,
                    layer: m.site.layer,
                    kind: m.site.kind,
                    projection: m.site.projection,
                    pet_kind: m.kind,
                    rank: m.rank,
                    p_at_extraction: p[i],
                }
            })
            .collect();
        SearchedStructure {
            header: StructureHeader {
                format_version: FORMAT_VERSION,
                backbone_fingerprint: fingerprint_hex(backbone.fingerprint()),
                budget: source.budget,
                budget_params: source.budget.resolve(backbone.param_count() as u64),
                search_space: space.kind(),
                task: source.task.to_string(),
                seed: source.seed,
                total_params: selection.total_params,
                approximate: selection.approximate,
                backbone: backbone.config().clone(),
            },
            sites,
        }
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        self.sites
            .iter()
            .map(|e| Candidate {
                site: e.site(),
                kind: e.pet_kind,
                rank: e.rank,
            })
            .collect()
    }

    /// The structure as a search space over `cfg`; fails if a site does not
    /// exist there.
    pub fn space(&self, cfg: &BackboneConfig) -> Result<SearchSpace> {
        for (i, e) in self.sites.iter().enumerate() {
            e.site()
                .validate(cfg)
                .map_err(|err| Error::Mismatch(format!("sites[{i}]: {err}")))?;
        }
        SearchSpace::custom(cfg, &self.candidates()).map_err(|e| match e {
            Error::Config(m) => Error::Mismatch(m),
            other => other,
        })
    }

    /// Checks the structure against the backbone it is about to be trained
    /// on. Site mismatches are errors; a different fingerprint only warns.
    pub fn check_backbone(&self, backbone: &Backbone) -> Result<SearchSpace> {
        let space = self.space(backbone.config())?;
        let fp = fingerprint_hex(backbone.fingerprint());
        if fp != self.header.backbone_fingerprint {
            log::warn!(
                "structure was searched on backbone {}, retraining on {fp}",
                self.header.backbone_fingerprint
            );
        }
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("structure serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SearchedStructure =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "header.format_version: unsupported version {}",
                h.format_version
            )));
        }
        if u64::from_str_radix(&h.backbone_fingerprint, 16).is_err() || h.backbone_fingerprint.len() != 16 {
            return Err(Error::Parse(format!(
                "header.backbone_fingerprint: expected 16 hex digits, got '{}'",
                h.backbone_fingerprint
            )));
        }
        h.backbone
            .validate()
            .map_err(|e| Error::Parse(format!("header.backbone: {e}")))?;
        let cfg = &h.backbone;
        let mut seen = HashSet::new();
        let mut total = 0u64;
        for (i, e) in self.sites.iter().enumerate() {
            let layers = match e.stack {
                Stack::Encoder => cfg.num_encoder_layers,
                Stack::Decoder => cfg.num_decoder_layers,
            };
            if e.layer >= layers {
                return Err(Error::Parse(format!(
                    "sites[{i}].layer: {} out of range ({:?} stack has {layers} layers)",
                    e.layer, e.stack
                )));
            }
            let module = crate::pet::PetModule::new(e.pet_kind, e.site(), e.rank, cfg)
                .map_err(|err| Error::Parse(format!("sites[{i}]: {err}")))?;
            if !seen.insert((e.site(), e.pet_kind)) {
                return Err(Error::Parse(format!(
                    "sites[{i}]: duplicate {} at {}",
                    e.pet_kind,
                    e.site()
                )));
            }
            if !(0.0..=1.0).contains(&e.p_at_extraction) {
                return Err(Error::Parse(format!(
                    "sites[{i}].p_at_extraction: {} is not a probability",
                    e.p_at_extraction
                )));
            }
            total += module.param_count() as u64;
        }
        if total != h.total_params {
            return Err(Error::Parse(format!(
                "header.total_params: {} but the listed sites hold {total}",
                h.total_params
            )));
        }
        if total > h.budget_params {
            return Err(Error::Parse(format!(
                "header.total_params: {total} exceeds budget {}",
                h.budget_params
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }
}
