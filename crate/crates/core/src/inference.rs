//! Greedy and beam-search decoding on top of incremental decoder steps.

use std::cmp::Ordering;

use crate::data::{TokenBatch, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Model, Pass};
use crate::tensor::Scalar;

/// A (possibly unfinished) output sequence and its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// The last token is EOS.
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamOptions {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability per token instead of
    /// total log-probability.
    pub length_normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Up to `width` hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
}

/// Row-wise log-softmax in f64.
fn log_probs<F: Scalar>(logits: &[F], vocab: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(vocab)
        .map(|row| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            row.iter().map(|v| v.as_f64() - lse).collect()
        })
        .collect()
}

/// Highest score wins; equal scores go to the shorter, then the
/// lexicographically smaller sequence.
fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

fn encode_one<F: Scalar>(pass: &mut Pass<'_, F>, src: &[u32]) -> Result<crate::model::Memory> {
    if src.is_empty() {
        return Err(Error::Data("cannot decode an empty source sentence".into()));
    }
    pass.encode(&TokenBatch::single(src)?)
}

/// Picks the most probable token at every step (lowest id on ties) until
/// EOS or `max_len` tokens. A final EOS is included in the output.
pub fn greedy_decode<F: Scalar>(model: &Model<F>, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let mut pass = Pass::eval(model);
    let mem = encode_one(&mut pass, src)?;
    let mut state = pass.begin_decode(&mem);
    let vocab = model.config().tgt_vocab;
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_len {
        let (logits, next) = pass.decode_step(&[prev], &state, &mem)?;
        let lp = &log_probs(pass.tape.values(logits), vocab)[0];
        let mut best = 0;
        for (v, &p) in lp.iter().enumerate() {
            if p > lp[best] {
                best = v;
            }
        }
        prev = best as u32;
        out.push(prev);
        if prev == EOS {
            break;
        }
        state = next;
    }
    Ok(out)
}

pub fn beam_search<F: Scalar>(model: &Model<F>, src: &[u32], width: usize, max_len: usize) -> Result<BeamResult> {
    beam_search_with(model, src, &BeamOptions { width, max_len, length_normalize: false })
}

/// Keeps the `width` best expansions of all live hypotheses at each step.
/// Hypotheses ending in EOS retire to a pool; at `max_len` the remaining
/// live ones join it unfinished.
pub fn beam_search_with<F: Scalar>(model: &Model<F>, src: &[u32], opts: &BeamOptions) -> Result<BeamResult> {
    if opts.width == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    if opts.max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let vocab = model.config().tgt_vocab;
    let mut pass = Pass::eval(model);
    let mem = encode_one(&mut pass, src)?;
    let mut state = pass.begin_decode(&mem);
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..opts.max_len {
        let expanded = pass.expand_memory(&mem, live.len())?;
        let prev: Vec<u32> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (logits, next) = pass.decode_step(&prev, &state, &expanded)?;
        let lp = log_probs(pass.tape.values(logits), vocab);

        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (i, row) in lp.iter().enumerate() {
            for (v, &p) in row.iter().enumerate() {
                cands.push((live[i].log_prob + p, i, v as u32));
            }
        }
        // Every candidate extends its parent by one token, so the length
        // tie-break never fires here; compare parent tokens, then the new one.
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(opts.width);

        let mut next_live = Vec::with_capacity(cands.len());
        let mut parents = Vec::with_capacity(cands.len());
        for (score, i, v) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(v);
            let h = Hypothesis { tokens, log_prob: score, finished: v == EOS };
            if h.finished {
                pool.push(h);
            } else {
                next_live.push(h);
                parents.push(i);
            }
        }
        if next_live.is_empty() {
            live = next_live;
            break;
        }
        state = pass.reorder(&next, &parents)?;
        live = next_live;
    }
    pool.extend(live);

    let key = |h: &Hypothesis| {
        if opts.length_normalize {
            h.log_prob / h.tokens.len() as f64
        } else {
            h.log_prob
        }
    };
    pool.sort_by(|a, b| rank(key(a), &a.tokens, key(b), &b.tokens));
    pool.truncate(opts.width);
    Ok(BeamResult { best: pool[0].clone(), nbest: pool })
}

/// Log-probability of emitting exactly `tokens` (teacher-forced).
pub fn sequence_log_prob<F: Scalar>(model: &Model<F>, src: &[u32], tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let mut pass = Pass::eval(model);
    let mem = encode_one(&mut pass, src)?;
    let mut input = vec![BOS];
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    let logits = pass.decode_train(&TokenBatch::single(&input)?, &mem)?;
    let lp = log_probs(pass.tape.values(logits), model.config().tgt_vocab);
    Ok(tokens.iter().zip(&lp).map(|(&t, row)| row[t as usize]).sum())
}

/// Decodes one whitespace-tokenized sentence; width 1 is greedy.
pub fn translate_line<F: Scalar>(
    model: &Model<F>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    line: &str,
    width: usize,
    max_len: usize,
) -> Result<String> {
    let src = src_vocab.encode(line);
    if src.is_empty() {
        return Ok(String::new());
    }
    let out = if width == 1 {
        greedy_decode(model, &src, max_len)?
    } else {
        beam_search(model, &src, width, max_len)?.best.tokens
    };
    Ok(tgt_vocab.decode(&out))
}

/// Fraction of pairs whose greedy output (without EOS) equals the target.
pub fn exact_match<F: Scalar>(model: &Model<F>, pairs: &[(Vec<u32>, Vec<u32>)], max_len: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0;
    for (src, tgt) in pairs {
        let mut out = greedy_decode(model, src, max_len)?;
        if out.last() == Some(&EOS) {
            out.pop();
            if out == *tgt {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests;
