//! Vocabularies and next-token probability vectors.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{CONFIDENT_CLOSE, SPAN_OPEN, TERMINATOR, UNCONFIDENT_CLOSE};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SENTENCE_PUNCTUATION: [&str; 3] = [".", "!", "?"];

/// Tolerance on the total mass of a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Tokens `Vocabulary::new` places, in this order, ahead of ordinary words.
/// Only the pad, terminator and marker tokens are mandatory.
pub const RESERVED: [&str; 9] = [PAD, UNK, TERMINATOR, SPAN_OPEN, CONFIDENT_CLOSE, UNCONFIDENT_CLOSE, ".", "!", "?"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("required token {0:?} missing")]
    Missing(&'static str),
}

/// Ordered token list with stable indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: Option<usize>,
    terminator: usize,
    span_open: usize,
    confident_close: usize,
    unconfident_close: usize,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in first-occurrence order.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::try_from(tokens).expect("reserved tokens present and unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Unknown tokens map to `<unk>`, or to `<pad>` when the vocabulary has
    /// no `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk.unwrap_or(self.pad))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.unk
    }

    pub fn terminator_id(&self) -> usize {
        self.terminator
    }

    pub fn span_open_id(&self) -> usize {
        self.span_open
    }

    pub fn confident_close_id(&self) -> usize {
        self.confident_close
    }

    pub fn unconfident_close_id(&self) -> usize {
        self.unconfident_close
    }

    /// Token ids whose probabilities every backend must report explicitly.
    pub fn required_ids(&self) -> [usize; 4] {
        [self.span_open, self.confident_close, self.unconfident_close, self.terminator]
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabularyError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabularyError::Duplicate(t.clone()));
            }
        }
        let find = |name: &'static str| index.get(name).copied().ok_or(VocabularyError::Missing(name));
        Ok(Vocabulary {
            pad: find(PAD)?,
            unk: index.get(UNK).copied(),
            terminator: find(TERMINATOR)?,
            span_open: find(SPAN_OPEN)?,
            confident_close: find(CONFIDENT_CLOSE)?,
            unconfident_close: find(UNCONFIDENT_CLOSE)?,
            tokens,
            index,
        })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("probability at index {index} is {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}")]
    NotNormalized(f64),
    #[error("index {index} outside vocabulary of {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("index {0} named twice")]
    DuplicateEntry(usize),
}

/// A probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        let mut sum = 0.0;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistributionError::InvalidEntry { index, value });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DistributionError::NotNormalized(sum));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(len: usize) -> Self {
        Distribution { probs: vec![1.0 / len as f64; len] }
    }

    pub fn point_mass(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Distribution { probs }
    }

    /// Builds a distribution from explicitly named entries; the remaining
    /// mass is spread uniformly over the unnamed indices.
    pub fn from_partial(len: usize, named: &[(usize, f64)]) -> Result<Self, DistributionError> {
        let mut probs = vec![f64::NAN; len];
        let mut named_mass = 0.0;
        for &(index, value) in named {
            if index >= len {
                return Err(DistributionError::OutOfRange { index, len });
            }
            if !value.is_finite() || value < 0.0 {
                return Err(DistributionError::InvalidEntry { index, value });
            }
            if !probs[index].is_nan() {
                return Err(DistributionError::DuplicateEntry(index));
            }
            probs[index] = value;
            named_mass += value;
        }
        let unnamed = probs.iter().filter(|p| p.is_nan()).count();
        let remainder = 1.0 - named_mass;
        if remainder < -NORMALIZATION_TOLERANCE {
            return Err(DistributionError::NotNormalized(named_mass));
        }
        if unnamed == 0 {
            return Distribution::new(probs);
        }
        let share = remainder.max(0.0) / unnamed as f64;
        for p in probs.iter_mut().filter(|p| p.is_nan()) {
            *p = share;
        }
        Distribution::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Re-weights by `p^(1/T)` and renormalizes. `T = 1` is the identity.
    pub fn tempered(&self, temperature: f64) -> Vec<f64> {
        if temperature == 1.0 {
            return self.probs.clone();
        }
        let max_log = self.probs.iter().filter(|&&p| p > 0.0).map(|p| p.ln()).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> =
            self.probs.iter().map(|&p| if p > 0.0 { ((p.ln() - max_log) / temperature).exp() } else { 0.0 }).collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }

    /// Draws an index at `temperature`; zero temperature is argmax.
    pub fn sample<R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> usize {
        if temperature <= 0.0 {
            return self.argmax();
        }
        let weights = self.tempered(temperature);
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut last_positive = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                last_positive = i;
                if u < *w {
                    return i;
                }
                u -= w;
            }
        }
        last_positive
    }
}
