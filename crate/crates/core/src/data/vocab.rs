use std::collections::HashMap;

use super::{RESERVED, UNK};
use crate::error::{Error, Result};

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Bijection between tokens and ids, with ids `0..4` reserved for
/// PAD, UNK, BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent whitespace tokens; ties go to
    /// the lexicographically smaller token.
    pub fn build<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Self> {
        if max_size <= RESERVED {
            return Err(Error::Config(format!("vocabulary size must exceed {RESERVED}, got {max_size}")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary whose non-reserved tokens are `tokens` in order, starting
    /// at id 4.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut ids = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, ids })
    }

    /// Parses the one-token-per-line file format (line `n` is id `n + 4`).
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Whitespace-joined tokens; stops at EOS and skips PAD and BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                super::EOS => break,
                super::PAD | super::BOS => continue,
                _ => out.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        out.join(" ")
    }
}
