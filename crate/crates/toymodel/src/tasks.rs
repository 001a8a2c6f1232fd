//! Synthetic sequence tasks with next-token style targets and a loss mask.
//!
//! * parity: a bit string; the target at position `i` is the XOR of bits `0..=i`.
//!   [`ParityTargets`] selects whether every position or only the last is scored.
//! * copy: `L` symbols, a delimiter, then the same symbols fed back; after the
//!   delimiter each position must predict the next symbol of the copy.
//! * assoc_recall: `n` distinct key/value pairs followed by one of the keys; the
//!   last position must predict that key's value.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ToyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Parity,
    Copy,
    AssocRecall,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Parity => "parity",
            TaskKind::Copy => "copy",
            TaskKind::AssocRecall => "assoc_recall",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "parity" => Ok(Self::Parity),
            "copy" => Ok(Self::Copy),
            "assoc_recall" => Ok(Self::AssocRecall),
            _ => Err(format!("unknown task '{s}' (parity|copy|assoc_recall)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParityTargets {
    /// Score the running XOR at every position.
    #[default]
    Running,
    /// Score only the final position.
    Final,
}

impl fmt::Display for ParityTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParityTargets::Running => "running",
            ParityTargets::Final => "final",
        })
    }
}

impl std::str::FromStr for ParityTargets {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "running" => Ok(Self::Running),
            "final" => Ok(Self::Final),
            _ => Err(format!("unknown parity targets '{s}' (running|final)")),
        }
    }
}

/// Task family plus its size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Parity: bits. Copy: symbols to copy (`L`). Recall: key/value pairs.
    pub length: usize,
    /// Vocabulary the model must cover (ignored by parity, which uses 2).
    pub vocab_size: usize,
    pub parity_targets: ParityTargets,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, length: usize, vocab_size: usize) -> Result<Self> {
        let spec = Self { kind, length, vocab_size, parity_targets: ParityTargets::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(ToyError::Config("task length must be >= 1".into()));
        }
        match self.kind {
            TaskKind::Parity => Ok(()),
            TaskKind::Copy if self.vocab_size < 2 => {
                Err(ToyError::Config("copy needs at least one symbol plus the delimiter".into()))
            }
            TaskKind::AssocRecall if self.vocab_size < 2 * self.length => Err(ToyError::Config(format!(
                "assoc_recall with {} pairs needs vocab >= {}",
                self.length,
                2 * self.length
            ))),
            _ => Ok(()),
        }
    }

    /// Sequence length fed to the model.
    pub fn seq_len(&self) -> usize {
        match self.kind {
            TaskKind::Parity => self.length,
            TaskKind::Copy => 2 * self.length,
            TaskKind::AssocRecall => 2 * self.length + 1,
        }
    }

    /// Vocabulary size the model needs.
    pub fn model_vocab(&self) -> usize {
        match self.kind {
            TaskKind::Parity => 2,
            _ => self.vocab_size,
        }
    }

    pub fn with_length(&self, length: usize) -> Self {
        Self { length, ..*self }
    }
}

/// One example: aligned `tokens`, `targets` and `mask`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// A deterministic example for `(spec, seed)`.
pub fn gen_task(spec: &TaskSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    Ok(sample(spec, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn sample(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.length;
    match spec.kind {
        TaskKind::Parity => {
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let targets = running_xor(&tokens);
            let mask = match spec.parity_targets {
                ParityTargets::Running => vec![true; n],
                ParityTargets::Final => (0..n).map(|i| i + 1 == n).collect(),
            };
            Sample { tokens, targets, mask }
        }
        TaskKind::Copy => {
            let delim = spec.vocab_size - 1;
            let body: Vec<usize> = (0..n).map(|_| rng.gen_range(0..delim)).collect();
            let mut tokens = body.clone();
            tokens.push(delim);
            tokens.extend_from_slice(&body[..n - 1]);
            let mut targets = vec![0; n];
            targets.extend_from_slice(&body);
            let mask = (0..2 * n).map(|i| i >= n).collect();
            Sample { tokens, targets, mask }
        }
        TaskKind::AssocRecall => {
            let half = spec.vocab_size / 2;
            let mut keys: Vec<usize> = (0..half).collect();
            keys.shuffle(rng);
            keys.truncate(n);
            let values: Vec<usize> = (0..n).map(|_| half + rng.gen_range(0..spec.vocab_size - half)).collect();
            let mut tokens = Vec::with_capacity(2 * n + 1);
            for (k, v) in keys.iter().zip(&values) {
                tokens.extend([*k, *v]);
            }
            let q = rng.gen_range(0..n);
            tokens.push(keys[q]);
            let mut targets = vec![0; 2 * n + 1];
            targets[2 * n] = values[q];
            let mask = (0..=2 * n).map(|i| i == 2 * n).collect();
            Sample { tokens, targets, mask }
        }
    }
}

/// XOR of every prefix.
pub fn running_xor(bits: &[usize]) -> Vec<usize> {
    bits.iter()
        .scan(0, |acc, &b| {
            *acc ^= b & 1;
            Some(*acc)
        })
        .collect()
}

/// A flattened batch `[B, T]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// The batch for training step `step`: a pure function of `(seed, step)`, so a
/// resumed run sees exactly the batches it would have seen.
pub fn gen_batch(spec: &TaskSpec, batch: usize, seed: u64, step: u64) -> Result<Batch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let mut out = Batch { batch, seq_len: spec.seq_len(), tokens: Vec::new(), targets: Vec::new(), mask: Vec::new() };
    for _ in 0..batch {
        let s = sample(spec, &mut rng);
        out.tokens.extend(s.tokens);
        out.targets.extend(s.targets);
        out.mask.extend(s.mask);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor() {
        assert_eq!(running_xor(&[1, 0, 1, 1]), vec![1, 1, 0, 1]);
    }

    #[test]
    fn copy_layout() {
        let spec = TaskSpec::new(TaskKind::Copy, 4, 6).unwrap();
        let s = gen_task(&spec, 3).unwrap();
        assert_eq!(s.tokens.len(), 8);
        assert_eq!(s.tokens[4], 5);
        assert_eq!(&s.targets[4..], &s.tokens[..4]);
        assert_eq!(&s.tokens[5..], &s.tokens[..3]);
        assert_eq!(s.mask, [false, false, false, false, true, true, true, true]);
    }

    #[test]
    fn recall_layout() {
        let spec = TaskSpec::new(TaskKind::AssocRecall, 3, 8).unwrap();
        let s = gen_task(&spec, 5).unwrap();
        let q = s.tokens[6];
        let pos = (0..3).find(|&i| s.tokens[2 * i] == q).unwrap();
        assert_eq!(s.targets[6], s.tokens[2 * pos + 1]);
        assert!(s.mask[6] && s.mask.iter().filter(|&&m| m).count() == 1);
        assert!(TaskSpec::new(TaskKind::AssocRecall, 5, 8).is_err());
    }

    #[test]
    fn batches_are_step_addressed() {
        let spec = TaskSpec::new(TaskKind::Parity, 6, 2).unwrap();
        assert_eq!(gen_batch(&spec, 3, 1, 7).unwrap(), gen_batch(&spec, 3, 1, 7).unwrap());
        assert_ne!(gen_batch(&spec, 3, 1, 7).unwrap(), gen_batch(&spec, 3, 1, 8).unwrap());
    }
}
