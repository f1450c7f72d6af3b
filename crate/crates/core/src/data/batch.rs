use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Padded token ids in time-major order (`ids[t·batch + b]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub steps: usize,
    pub batch: usize,
    pub ids: Vec<u32>,
    /// True at real tokens, false at padding.
    pub valid: Vec<bool>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Data("batch sequences must be non-empty".into()));
        }
        let batch = seqs.len();
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(steps * batch);
        let mut valid = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for s in seqs {
                ids.push(s.get(t).copied().unwrap_or(PAD));
                valid.push(t < s.len());
            }
        }
        Ok(TokenBatch { steps, batch, ids, valid })
    }

    pub fn single(seq: &[u32]) -> Result<Self> {
        Self::from_sequences(&[seq.to_vec()])
    }

    /// Unpadded sequence `b`.
    pub fn sequence(&self, b: usize) -> Vec<u32> {
        (0..self.steps)
            .filter(|&t| self.valid[t * self.batch + b])
            .map(|t| self.ids[t * self.batch + b])
            .collect()
    }

    pub fn real_tokens(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// One training batch of sentence pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenBatch,
    /// BOS-prefixed decoder inputs.
    pub tgt_in: TokenBatch,
    /// EOS-suffixed gold outputs, aligned with `tgt_in`.
    pub tgt_gold: TokenBatch,
}

impl Batch {
    pub fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        let src: Vec<Vec<u32>> = pairs.iter().map(|p| p.0.clone()).collect();
        let (tgt_in, tgt_gold): (Vec<Vec<u32>>, Vec<Vec<u32>>) = pairs
            .iter()
            .map(|(_, t)| teacher_forcing_pair(t))
            .unzip();
        let batch = Batch {
            src: TokenBatch::from_sequences(&src)?,
            tgt_in: TokenBatch::from_sequences(&tgt_in)?,
            tgt_gold: TokenBatch::from_sequences(&tgt_gold)?,
        };
        batch.check();
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.src.batch
    }

    pub fn is_empty(&self) -> bool {
        self.src.batch == 0
    }

    /// Target tokens that contribute to the loss (including EOS).
    pub fn target_tokens(&self) -> usize {
        self.tgt_gold.real_tokens()
    }

    fn check(&self) {
        for tb in [&self.src, &self.tgt_in, &self.tgt_gold] {
            for (id, ok) in tb.ids.iter().zip(&tb.valid) {
                assert_eq!(*ok, *id != PAD, "mask must be true exactly at real tokens");
            }
            for b in 0..tb.batch {
                assert!(tb.valid[b], "every row needs a real token");
            }
        }
        assert_eq!(self.tgt_in.valid, self.tgt_gold.valid);
    }
}

/// Builds the BOS-prefixed decoder input and EOS-suffixed gold output for
/// one target sentence.
pub fn teacher_forcing_pair(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(EOS);
    (input, gold)
}

/// Length-filtered, id-encoded sentence pairs ready for batching.
#[derive(Clone, Debug)]
pub struct Batcher {
    examples: Vec<(Vec<u32>, Vec<u32>)>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    /// Drops pairs where either side is empty or longer than `max_len`.
    pub fn new<S: AsRef<str>>(
        pairs: &[(S, S)],
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        batch_size: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let examples: Vec<(Vec<u32>, Vec<u32>)> = pairs
            .iter()
            .map(|(s, t)| (src_vocab.encode(s.as_ref()), tgt_vocab.encode(t.as_ref())))
            .filter(|(s, t)| !s.is_empty() && !t.is_empty() && s.len() <= max_len && t.len() <= max_len)
            .collect();
        if examples.is_empty() {
            return Err(Error::Data("no sentence pair survived length filtering".into()));
        }
        Ok(Batcher { examples, batch_size, seed })
    }

    pub fn examples(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Batches for one epoch: pairs shuffled, bucketed by source length,
    /// cut into batches, and the batch order shuffled. Deterministic in
    /// `(seed, epoch)`.
    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| self.examples[i].0.len());
        let mut batches: Vec<Batch> = order
            .chunks(self.batch_size)
            .map(|chunk| {
                let pairs: Vec<_> = chunk.iter().map(|&i| self.examples[i].clone()).collect();
                Batch::from_pairs(&pairs).expect("filtered pairs are non-empty")
            })
            .collect();
        batches.shuffle(&mut rng);
        batches
    }

    /// Batches in corpus order without shuffling, for evaluation.
    pub fn sequential(&self) -> Vec<Batch> {
        self.examples
            .chunks(self.batch_size)
            .map(|c| Batch::from_pairs(c).expect("filtered pairs are non-empty"))
            .collect()
    }
}

/// One epoch of batches; see [`Batcher::epoch`].
pub fn make_batches<S: AsRef<str>>(
    pairs: &[(S, S)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    Ok(Batcher::new(pairs, src_vocab, tgt_vocab, batch_size, max_len, seed)?.epoch(0))
}
