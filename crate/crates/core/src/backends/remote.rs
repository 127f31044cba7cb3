use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, Context, DistributionBackend};
use crate::dist::{Distribution, Vocabulary, NORMALIZATION_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Need {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "special+topk")]
    SpecialTopK,
}

/// Body of `POST /v1/distribution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRequest {
    pub context: Vec<String>,
    pub need: Need,
    #[serde(default)]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub need: Need,
    pub k: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { endpoint: "http://127.0.0.1:8088".into(), timeout_ms: 5000, retries: 2, need: Need::Full, k: 20 }
    }
}

/// Turns a `{"probs": {token: p}}` body into a distribution over `vocab`.
///
/// Unnamed tokens share the unreported mass equally. The three markers and
/// the terminator must be named.
pub fn parse_distribution_response(vocab: &Vocabulary, body: &str) -> Result<Distribution, BackendError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let probs = value
        .get("probs")
        .and_then(|p| p.as_object())
        .ok_or_else(|| BackendError::MalformedResponse("missing `probs` object".into()))?;
    let mut named = Vec::with_capacity(probs.len());
    for (token, p) in probs {
        let id = vocab.id(token).ok_or_else(|| BackendError::MalformedResponse(format!("unknown token {token:?}")))?;
        let p = p
            .as_f64()
            .filter(|p| p.is_finite() && (0.0..=1.0 + NORMALIZATION_TOLERANCE).contains(p))
            .ok_or_else(|| BackendError::MalformedResponse(format!("bad probability for {token:?}")))?;
        named.push((id, p));
    }
    let missing: Vec<String> = vocab
        .required_ids()
        .iter()
        .filter(|id| !named.iter().any(|(n, _)| n == *id))
        .map(|&id| vocab.token(id).to_string())
        .collect();
    if !missing.is_empty() {
        return Err(BackendError::MissingSpecialTokenProbs(missing));
    }
    Distribution::from_partial(vocab.len(), &named).map_err(|e| BackendError::MalformedResponse(e.to_string()))
}

/// HTTP client for the distribution protocol.
#[derive(Debug)]
pub struct RemoteBackend {
    vocab: Vocabulary,
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(vocab: Vocabulary, config: RemoteConfig) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_millis(config.timeout_ms))).build().into();
        RemoteBackend { vocab, config, agent }
    }

    /// Fetches the vocabulary from `GET /v1/vocabulary` and builds a client.
    pub fn connect(config: RemoteConfig) -> Result<Self, BackendError> {
        let probe = Self::new(Vocabulary::new::<_, &str>([]), config);
        let url = format!("{}/v1/vocabulary", probe.config.endpoint.trim_end_matches('/'));
        let body = probe.with_retries(|agent| {
            agent.get(&url).call().map_err(map_ureq)?.body_mut().read_to_string().map_err(map_ureq)
        })?;
        #[derive(Deserialize)]
        struct VocabBody {
            tokens: Vec<String>,
        }
        let parsed: VocabBody =
            serde_json::from_str(&body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let vocab = Vocabulary::try_from(parsed.tokens).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        Ok(Self::new(vocab, probe.config))
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut(&ureq::Agent) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call(&self.agent) {
                Err(e @ (BackendError::Timeout(_) | BackendError::Transport(_))) if attempt < self.config.retries => {
                    let _ = e;
                    std::thread::sleep(Duration::from_millis(50 << attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn map_ureq(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
        ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
            BackendError::MalformedResponse(format!("server rejected request with status {code}"))
        }
        other => BackendError::Transport(other.to_string()),
    }
}

impl DistributionBackend for RemoteBackend {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&mut self, context: Context<'_>) -> Result<Distribution, BackendError> {
        let request = DistributionRequest { context: context.tokens(), need: self.config.need, k: self.config.k };
        let payload = serde_json::to_string(&request).expect("request serializes");
        let url = format!("{}/v1/distribution", self.config.endpoint.trim_end_matches('/'));
        let body = self.with_retries(|agent| {
            agent
                .post(&url)
                .header("content-type", "application/json")
                .send(payload.as_str())
                .map_err(map_ureq)?
                .body_mut()
                .read_to_string()
                .map_err(map_ureq)
        })?;
        parse_distribution_response(&self.vocab, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["dog", "cat", "cup"])
    }

    #[test]
    fn full_response_passes_through() {
        let v = vocab();
        let mut probs = serde_json::Map::new();
        let p = 1.0 / v.len() as f64;
        for t in v.tokens() {
            probs.insert(t.clone(), p.into());
        }
        let body = serde_json::json!({ "probs": probs }).to_string();
        let d = parse_distribution_response(&v, &body).unwrap();
        assert_eq!(d, Distribution::new(vec![p; v.len()]).unwrap());
    }

    #[test]
    fn partial_response_spreads_remainder() {
        let v = vocab();
        let body = r#"{"probs":{"<SPAN>":0.1,"</CN>":0.1,"</UN>":0.03,"<eos>":0.1,"dog":0.6}}"#;
        let d = parse_distribution_response(&v, body).unwrap();
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let unnamed = v.len() - 5;
        let share = (1.0 - 0.93) / unnamed as f64;
        assert!((d.prob(v.id("cat").unwrap()) - share).abs() < 1e-12);
        assert_eq!(d.prob(v.unconfident_close_id()), 0.03);
    }

    #[test]
    fn missing_unconfident_probability_is_an_error() {
        let v = vocab();
        let body = r#"{"probs":{"<SPAN>":0.1,"</CN>":0.1,"<eos>":0.1}}"#;
        match parse_distribution_response(&v, body) {
            Err(BackendError::MissingSpecialTokenProbs(m)) => assert_eq!(m, vec!["</UN>".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_responses() {
        let v = vocab();
        for body in [
            "",
            "[]",
            r#"{"probs":3}"#,
            r#"{"probs":{"zebra":1.0}}"#,
            r#"{"probs":{"<SPAN>":0.6,"</CN>":0.6,"</UN>":0.0,"<eos>":0.0}}"#,
            r#"{"probs":{"<SPAN>":-0.1,"</CN>":0.1,"</UN>":0.0,"<eos>":0.0}}"#,
        ] {
            assert!(matches!(parse_distribution_response(&v, body), Err(BackendError::MalformedResponse(_))), "{body}");
        }
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let cfg =
            RemoteConfig { endpoint: "http://127.0.0.1:9".into(), timeout_ms: 200, retries: 0, ..Default::default() };
        let mut b = RemoteBackend::new(vocab(), cfg);
        let err = b.next_distribution(Context { prompt: &[], generated: &[] }).unwrap_err();
        assert!(matches!(err, BackendError::Transport(_) | BackendError::Timeout(_)), "{err:?}");
    }
}
