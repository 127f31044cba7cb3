//! Hallucination-aware span annotation, masked NLL training of a toy
//! next-token model, and a retrospective-resampling decoder that backtracks
//! when the probability of `</UN>` crosses a threshold.

pub mod backends;
pub mod curation;
pub mod decode;
pub mod dist;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod synthetic;

pub use backends::{BackendError, Context, DistributionBackend, RemoteBackend, ScriptedBackend, ToyBackend};
pub use decode::{decode, decode_open_ended, DecodeConfig, DecodeError, DecodeOutcome, Prompt};
pub use dist::{Distribution, Vocabulary};
pub use protocol::{AnnotatedText, Polarity, ProtocolError, SpanRecord};
