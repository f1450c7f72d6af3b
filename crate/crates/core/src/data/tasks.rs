use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Vocabulary, RESERVED};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Map every token through a fixed permutation, then reverse.
    ToyTranslation,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "toy-translation" | "toy" => Ok(TaskKind::ToyTranslation),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// A synthetic parallel task over the symbols `"4" .. vocab_size - 1`,
/// so that a vocabulary of `vocab_size` covers it exactly.
#[derive(Clone, Debug)]
pub struct Task {
    kind: TaskKind,
    symbols: Vec<u32>,
    permutation: Vec<u32>,
    min_len: usize,
    max_len: usize,
}

impl Task {
    /// The token permutation is drawn from `task_seed`; samples drawn with
    /// different seeds share it.
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, task_seed: u64) -> Result<Self> {
        let symbols: Vec<u32> = (RESERVED as u32..vocab_size.max(RESERVED) as u32).collect();
        let mut permutation = symbols.clone();
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(task_seed));
        Self::with_permutation(kind, vocab_size, min_len, max_len, permutation)
    }

    /// `permutation[i]` is the image of symbol `i + 4`.
    pub fn with_permutation(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, permutation: Vec<u32>) -> Result<Self> {
        if vocab_size < RESERVED + 1 {
            return Err(Error::Config(format!("task vocabulary must be >= 5, got {vocab_size}")));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!("invalid length range {min_len}..={max_len}")));
        }
        let symbols: Vec<u32> = (RESERVED as u32..vocab_size as u32).collect();
        let mut sorted = permutation.clone();
        sorted.sort_unstable();
        if sorted != symbols {
            return Err(Error::Config("permutation must cover every task symbol exactly once".into()));
        }
        Ok(Task { kind, symbols, permutation, min_len, max_len })
    }

    /// Vocabulary mapping symbol `"n"` to id `n`.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.symbols.iter().map(u32::to_string)).expect("symbols are distinct")
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn target_for(&self, source: &[u32]) -> Vec<u32> {
        match self.kind {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::ToyTranslation => source
                .iter()
                .rev()
                .map(|&s| self.permutation[(s as usize) - RESERVED])
                .collect(),
        }
    }

    pub fn sample_ids(&self, n_pairs: usize, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_pairs)
            .map(|_| {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let src: Vec<u32> = (0..len).map(|_| *self.symbols.choose(&mut rng).expect("non-empty")).collect();
                let tgt = self.target_for(&src);
                (src, tgt)
            })
            .collect()
    }

    /// Sentence pairs as whitespace-joined text.
    pub fn sample(&self, n_pairs: usize, seed: u64) -> Vec<(String, String)> {
        self.sample_ids(n_pairs, seed)
            .into_iter()
            .map(|(s, t)| (join(&s), join(&t)))
            .collect()
    }
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Convenience wrapper drawing both the permutation and the samples from
/// `seed`.
pub fn generate_task(kind: TaskKind, vocab_size: usize, length_range: (usize, usize), n_pairs: usize, seed: u64) -> Result<Vec<(String, String)>> {
    let task = Task::new(kind, vocab_size, length_range.0, length_range.1, seed)?;
    Ok(task.sample(n_pairs, seed))
}
