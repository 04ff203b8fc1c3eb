//! Synthetic sequence tasks small enough for a frozen random backbone.
//!
//! Token 0 is the decoder start token; content tokens are `1..vocab_size`.
//!
//! * `sequence-copy`: the decoder reproduces the source, teacher-forced.
//! * `parity-classification`: one output token, `1 + XOR` of the low bits of
//!   the tokens at a few seed-chosen positions.
//! * `key-value-recall`: the token at a seed-chosen source position is a key;
//!   a fixed seed-derived table maps keys to `label_space` values, and the
//!   single output token is `1 + value`. The other positions are distractors.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Batch;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

const BOS: usize = 0;
/// Positions read by the parity label.
const PARITY_BITS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SequenceCopy,
    ParityClassification,
    KeyValueRecall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SequenceCopy => "sequence-copy",
            TaskKind::ParityClassification => "parity-classification",
            TaskKind::KeyValueRecall => "key-value-recall",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence-copy" => Ok(TaskKind::SequenceCopy),
            "parity-classification" => Ok(TaskKind::ParityClassification),
            "key-value-recall" => Ok(TaskKind::KeyValueRecall),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Alphabet size for copy, 2 for parity, number of values for recall.
    pub label_space: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::KeyValueRecall,
            vocab_size: 16,
            seq_len: 8,
            train_size: 1024,
            val_size: 256,
            test_size: 512,
            label_space: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub enc: Vec<usize>,
    pub dec: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub enc_len: usize,
    pub dec_len: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Batch of the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut enc = Vec::with_capacity(indices.len() * self.enc_len);
        let mut dec = Vec::with_capacity(indices.len() * self.dec_len);
        let mut tgt = Vec::with_capacity(indices.len() * self.dec_len);
        for &i in indices {
            let e = &self.examples[i];
            enc.extend_from_slice(&e.enc);
            dec.extend_from_slice(&e.dec);
            tgt.extend_from_slice(&e.target);
        }
        Batch::new(indices.len(), self.enc_len, self.dec_len, enc, dec, tgt)
    }

    /// Consecutive batches covering the whole set.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |c| {
            let end = ((c + 1) * size).min(idx.len());
            self.batch(&idx[c * size..end])
        })
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            enc_len: self.enc_len,
            dec_len: self.dec_len,
            examples: self.examples[range].to_vec(),
        }
    }
}

/// All splits of one task. `delta` and `alpha` are the two halves of `train`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Dataset,
    pub delta: Dataset,
    pub alpha: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// A task instance: the spec plus the seed-derived rule behind its labels.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: TaskSpec,
    positions: Vec<usize>,
    table: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let s = &spec;
        if s.vocab_size < 3 || s.seq_len == 0 {
            return Err(Error::config("task: vocab_size >= 3 and seq_len >= 1 required"));
        }
        if s.train_size < 2 || s.val_size == 0 || s.test_size == 0 {
            return Err(Error::config("task: train_size >= 2 and positive val/test sizes required"));
        }
        let content = s.vocab_size - 1;
        match s.kind {
            TaskKind::SequenceCopy if !(2..=content).contains(&s.label_space) => {
                return Err(Error::config(format!(
                    "sequence-copy: label_space must be in 2..={content}"
                )))
            }
            TaskKind::ParityClassification if s.label_space != 2 => {
                return Err(Error::config("parity-classification: label_space must be 2"))
            }
            TaskKind::ParityClassification if s.seq_len < PARITY_BITS => {
                return Err(Error::config(format!(
                    "parity-classification: seq_len must be >= {PARITY_BITS}"
                )))
            }
            TaskKind::KeyValueRecall if !(2..=content).contains(&s.label_space) => {
                return Err(Error::config(format!(
                    "key-value-recall: label_space must be in 2..={content}"
                )))
            }
            _ => {}
        }
        let mut rng = stream(s.seed, Stream::TaskRule);
        let mut all: Vec<usize> = (0..s.seq_len).collect();
        all.shuffle(&mut rng);
        let positions = match s.kind {
            TaskKind::SequenceCopy => Vec::new(),
            TaskKind::ParityClassification => {
                let mut p = all[..PARITY_BITS].to_vec();
                p.sort_unstable();
                p
            }
            TaskKind::KeyValueRecall => vec![all[0]],
        };
        let table = match s.kind {
            // balanced: key k maps to value perm[k] mod label_space
            TaskKind::KeyValueRecall => {
                let mut t: Vec<usize> = (0..content).map(|k| k % s.label_space).collect();
                t.shuffle(&mut rng);
                t
            }
            _ => Vec::new(),
        };
        Ok(SyntheticTask {
            spec,
            positions,
            table,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &'static str {
        self.spec.kind.name()
    }

    /// Source positions the label depends on (empty for copy).
    pub fn designated_positions(&self) -> &[usize] {
        &self.positions
    }

    /// Value index of a key token, for recall.
    pub fn value_of(&self, key: usize) -> Option<usize> {
        key.checked_sub(1).and_then(|k| self.table.get(k).copied())
    }

    pub fn dec_len(&self) -> usize {
        match self.spec.kind {
            TaskKind::SequenceCopy => self.spec.seq_len,
            _ => 1,
        }
    }

    /// Decoder input and targets for a source sequence.
    pub fn label(&self, enc: &[usize]) -> (Vec<usize>, Vec<usize>) {
        match self.spec.kind {
            TaskKind::SequenceCopy => {
                let mut dec = vec![BOS];
                dec.extend_from_slice(&enc[..enc.len() - 1]);
                (dec, enc.to_vec())
            }
            TaskKind::ParityClassification => {
                let bit = self.positions.iter().fold(0, |acc, &p| acc ^ (enc[p] & 1));
                (vec![BOS], vec![1 + bit])
            }
            TaskKind::KeyValueRecall => {
                let key = enc[self.positions[0]];
                (vec![BOS], vec![1 + self.table[key - 1]])
            }
        }
    }

    fn source(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let s = &self.spec;
        let hi = match s.kind {
            TaskKind::SequenceCopy => s.label_space + 1,
            _ => s.vocab_size,
        };
        (0..s.seq_len).map(|_| rng.random_range(1..hi)).collect()
    }

    /// Deterministic splits with no source sequence shared between them.
    pub fn generate(&self) -> Result<DataSplit> {
        let s = &self.spec;
        let total = s.train_size + s.val_size + s.test_size;
        let mut rng = stream(s.seed, Stream::TaskData);
        let mut seen = HashSet::with_capacity(total);
        let mut examples = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while examples.len() < total {
            attempts += 1;
            if attempts > 50 * total + 1000 {
                return Err(Error::config(format!(
                    "{}: cannot draw {total} distinct sources with vocab {} and length {}",
                    s.kind, s.vocab_size, s.seq_len
                )));
            }
            let enc = self.source(&mut rng);
            if !seen.insert(enc.clone()) {
                continue;
            }
            let (dec, target) = self.label(&enc);
            examples.push(Example { enc, dec, target });
        }
        let all = Dataset {
            enc_len: s.seq_len,
            dec_len: self.dec_len(),
            examples,
        };
        let (t, v) = (s.train_size, s.val_size);
        let half = t / 2;
        Ok(DataSplit {
            train: all.slice(0..t),
            delta: all.slice(0..half),
            alpha: all.slice(half..t),
            val: all.slice(t..t + v),
            test: all.slice(t + v..total),
        })
    }
}

/// Endless batches over a dataset, reshuffled every epoch.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if data.is_empty() || size == 0 {
            return Err(Error::config("batch stream needs data and a positive batch size"));
        }
        let mut s = BatchStream {
            data,
            size: size.min(data.len()),
            rng,
            order: (0..data.len()).collect(),
            pos: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        self.data.batch(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_labels_are_shifted_source() {
        let t = SyntheticTask::new(TaskSpec {
            kind: TaskKind::SequenceCopy,
            label_space: 10,
            ..Default::default()
        })
        .unwrap();
        let (dec, tgt) = t.label(&[3, 4, 5]);
        assert_eq!(dec, vec![0, 3, 4]);
        assert_eq!(tgt, vec![3, 4, 5]);
    }
}
