//! Next-token distribution providers.

mod remote;
mod scripted;
mod toy;

pub use remote::{parse_distribution_response, DistributionRequest, Need, RemoteBackend, RemoteConfig};
pub use scripted::{fingerprint, ScriptKey, ScriptedBackend};
pub use toy::ToyBackend;

use thiserror::Error;

use crate::dist::{Distribution, DistributionError, Vocabulary};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no scripted rule for step {step} and no fallback")]
    NoRuleAndNoFallback { step: usize },
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("response lacks probabilities for {0:?}")]
    MissingSpecialTokenProbs(Vec<String>),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("model failure: {0}")]
    Model(String),
    #[error("distribution over {got} tokens for a vocabulary of {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// What the backend conditions on: the prompt (question, hint, image
/// tokens) followed by the tokens generated so far.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a [String],
    pub generated: &'a [String],
}

impl Context<'_> {
    pub fn tokens(&self) -> Vec<String> {
        self.prompt.iter().chain(self.generated).cloned().collect()
    }
}

/// Source of untempered (T = 1) next-token distributions. Implementations
/// report probabilities for the three markers and the terminator.
pub trait DistributionBackend {
    fn vocabulary(&self) -> &Vocabulary;

    fn next_distribution(&mut self, context: Context<'_>) -> Result<Distribution, BackendError>;
}

impl<B: DistributionBackend + ?Sized> DistributionBackend for &mut B {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_distribution(&mut self, context: Context<'_>) -> Result<Distribution, BackendError> {
        (**self).next_distribution(context)
    }
}

impl<B: DistributionBackend + ?Sized> DistributionBackend for Box<B> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_distribution(&mut self, context: Context<'_>) -> Result<Distribution, BackendError> {
        (**self).next_distribution(context)
    }
}

/// Builds a distribution from `(token, probability)` pairs, spreading the
/// remaining mass over unnamed tokens.
pub fn named_distribution(vocab: &Vocabulary, named: &[(&str, f64)]) -> Result<Distribution, BackendError> {
    let mut entries = Vec::with_capacity(named.len());
    for (token, p) in named {
        let id = vocab
            .id(token)
            .ok_or_else(|| BackendError::MalformedResponse(format!("token {token:?} not in vocabulary")))?;
        entries.push((id, *p));
    }
    Ok(Distribution::from_partial(vocab.len(), &entries)?)
}
