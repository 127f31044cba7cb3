use std::sync::Arc;

use super::{BackendError, Context, DistributionBackend};
use crate::dist::{Distribution, Vocabulary};
use crate::model::{forward, ModelParams};

/// The fixed-window model as a backend. Unknown tokens map to `<unk>`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    params: Arc<ModelParams>,
}

impl ToyBackend {
    pub fn new(params: Arc<ModelParams>) -> Self {
        ToyBackend { params }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Distribution for an arbitrary token context.
    pub fn distribution_for<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Distribution, BackendError> {
        let vocab = self.params.vocab();
        let ids: Vec<usize> = tokens.iter().map(|t| vocab.id_or_unk(t.as_ref())).collect();
        forward(&self.params, &ids, 1.0).map_err(|e| BackendError::Model(e.to_string()))
    }
}

impl DistributionBackend for ToyBackend {
    fn vocabulary(&self) -> &Vocabulary {
        self.params.vocab()
    }

    fn next_distribution(&mut self, context: Context<'_>) -> Result<Distribution, BackendError> {
        self.distribution_for(&context.tokens())
    }
}
