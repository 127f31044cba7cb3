//! Retrospective resampling.
//!
//! Every position is checked against `tau` on the untempered probability of
//! `</UN>`. A hit discards the tail back to the last `</CN>` (or the last
//! sentence boundary when there is none), records the discarded phrase as a
//! hint, and regenerates at a stepped-up temperature until a span closes
//! cleanly. `K` consecutive failures widen the backtrack to the last
//! sentence boundary; `N` attempts in total exhaust the budget.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::backends::{BackendError, Context, DistributionBackend};
use crate::dist::{Distribution, Vocabulary, SENTENCE_PUNCTUATION};
use crate::protocol::{
    detokenize, is_marker, repair_generated, rewrite_query, tokenize, AnnotatedText, CONFIDENT_CLOSE, SPAN_OPEN,
    TERMINATOR, UNCONFIDENT_CLOSE,
};
use crate::rng::{SeedStream, Stream};

pub const CLARIFICATION: &str = "For this question, please point out the false premises or note what information is missing, rather than answering it directly.";

/// Headroom above the base temperature.
pub const TEMPERATURE_HEADROOM: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Temperature,
    Greedy,
}

/// What happens once `N` correction attempts are used up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// Stop and return the text so far, flagged.
    #[default]
    Finalize,
    /// Keep generating without further corrections.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub tau: f64,
    pub max_total_corrections: usize,
    pub max_local_attempts: usize,
    pub base_temperature: f64,
    pub temperature_step: f64,
    pub max_length: usize,
    pub seed: u64,
    pub sentence_punctuation: Vec<String>,
    pub sampling: Sampling,
    pub on_budget_exhausted: BudgetPolicy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            tau: 0.003,
            max_total_corrections: 50,
            max_local_attempts: 10,
            base_temperature: 1.0,
            temperature_step: 0.1,
            max_length: 64,
            seed: 0,
            sentence_punctuation: SENTENCE_PUNCTUATION.iter().map(|s| s.to_string()).collect(),
            sampling: Sampling::Temperature,
            on_budget_exhausted: BudgetPolicy::Finalize,
        }
    }
}

impl DecodeConfig {
    pub fn temperature_cap(&self) -> f64 {
        self.base_temperature + TEMPERATURE_HEADROOM
    }

    /// Same settings with correction disabled.
    pub fn baseline(&self) -> Self {
        DecodeConfig {
            max_total_corrections: 0,
            max_local_attempts: 0,
            on_budget_exhausted: BudgetPolicy::Continue,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let fail = |m: String| Err(DecodeError::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.max_local_attempts > self.max_total_corrections {
            return fail(format!(
                "local attempts {} exceed total corrections {}",
                self.max_local_attempts, self.max_total_corrections
            ));
        }
        if !(self.base_temperature.is_finite() && self.base_temperature > 0.0) {
            return fail(format!("base temperature {} must be positive", self.base_temperature));
        }
        if !(self.temperature_step.is_finite() && self.temperature_step >= 0.0) {
            return fail(format!("temperature step {} must be non-negative", self.temperature_step));
        }
        if self.max_length == 0 {
            return fail("max_length must be at least 1".into());
        }
        Ok(())
    }
}

/// An image reference plus a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub question: String,
    #[serde(default, rename = "image")]
    pub image: Option<String>,
}

impl Prompt {
    pub fn new(question: impl Into<String>, image: Option<&str>) -> Self {
        Prompt { question: question.into(), image: image.map(str::to_string) }
    }

    /// Question (with a hint when `hint` is non-empty) followed by the image
    /// tokens, so a fixed-window model keeps the image in view.
    pub fn tokens(&self, hint: &[String]) -> Vec<String> {
        let question = if hint.is_empty() { self.question.clone() } else { rewrite_query(&self.question, hint) };
        let mut tokens = tokenize(&question);
        if let Some(image) = &self.image {
            tokens.extend(tokenize(image));
        }
        tokens
    }
}

pub fn un_probability(dist: &Distribution, vocab: &Vocabulary) -> f64 {
    dist.prob(vocab.unconfident_close_id())
}

pub fn detect(dist: &Distribution, vocab: &Vocabulary, tau: f64) -> bool {
    un_probability(dist, vocab) >= tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Threshold,
    Unconfident,
    MaxLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Terminator,
    Unconfident,
    MaxLength,
    Budget,
}

fn round9<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(r9(*x))
}

fn r9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Token {
        phase: Phase,
        position: usize,
        token: String,
        #[serde(serialize_with = "round9")]
        p_un: f64,
        #[serde(serialize_with = "round9")]
        temperature: f64,
    },
    Detect {
        position: usize,
        #[serde(serialize_with = "round9")]
        p_un: f64,
        n_total: usize,
        k_local: usize,
    },
    BacktrackLocal {
        to: usize,
        placeholders: Vec<String>,
    },
    BacktrackGlobal {
        to: usize,
        k_local: usize,
        placeholders: Vec<String>,
    },
    ResampleAccept {
        n_total: usize,
        #[serde(serialize_with = "round9")]
        temperature: f64,
        tokens: Vec<String>,
    },
    ResampleFail {
        n_total: usize,
        k_local: usize,
        #[serde(serialize_with = "round9")]
        temperature: f64,
        reason: FailReason,
    },
    Finalize {
        stage: u8,
        reason: FinishReason,
        length: usize,
        n_total: usize,
        flagged: bool,
    },
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// One event per line, compact enough to write expected traces by hand.
impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceEvent::Token { phase, position, token, p_un, temperature } => {
                write!(f, "token {} {position} {token} un={} T={}", snake(phase), r9(*p_un), r9(*temperature))
            }
            TraceEvent::Detect { position, p_un, n_total, k_local } => {
                write!(f, "detect {position} un={} n={n_total} k={k_local}", r9(*p_un))
            }
            TraceEvent::BacktrackLocal { to, placeholders } => {
                write!(f, "backtrack_local to={to} P=[{}]", placeholders.join(", "))
            }
            TraceEvent::BacktrackGlobal { to, k_local, placeholders } => {
                write!(f, "backtrack_global to={to} k={k_local} P=[{}]", placeholders.join(", "))
            }
            TraceEvent::ResampleAccept { n_total, temperature, tokens } => {
                write!(f, "resample_accept n={n_total} T={} [{}]", r9(*temperature), tokens.join(" "))
            }
            TraceEvent::ResampleFail { n_total, k_local, temperature, reason } => {
                write!(f, "resample_fail n={n_total} k={k_local} T={} {}", r9(*temperature), snake(reason))
            }
            TraceEvent::Finalize { stage, reason, length, n_total, flagged } => {
                write!(f, "finalize stage={stage} {} len={length} n={n_total} flagged={flagged}", snake(reason))
            }
        }
    }
}

/// Result of decoding one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub clean_text: String,
    pub annotated_text: AnnotatedText,
    pub corrections_applied: usize,
    pub flagged_uncorrected: bool,
    pub hit_max_length: bool,
    pub tokens_generated_total: usize,
    pub tokens_emitted: usize,
    pub stage: u8,
    pub abstained: bool,
    pub placeholders: Vec<String>,
}

/// Live generation state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub sequence: Vec<String>,
    pub n_total: usize,
    pub k_local: usize,
    pub temperature: f64,
    pub placeholders: Vec<String>,
    pub flagged: bool,
}

/// Where a backtrack landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backtrack {
    Local(usize),
    Global(usize),
}

impl DecodeState {
    pub fn new(base_temperature: f64) -> Self {
        DecodeState {
            sequence: Vec::new(),
            n_total: 0,
            k_local: 0,
            temperature: base_temperature,
            placeholders: Vec::new(),
            flagged: false,
        }
    }

    pub fn last_cn_index(&self) -> Option<usize> {
        self.sequence.iter().rposition(|t| t == CONFIDENT_CLOSE)
    }

    pub fn last_sentence_index<S: AsRef<str>>(&self, punctuation: &[S]) -> Option<usize> {
        self.sequence.iter().rposition(|t| punctuation.iter().any(|p| p.as_ref() == t))
    }

    /// Records a phrase once, in discovery order.
    pub fn add_placeholder(&mut self, phrase: String) {
        if !self.placeholders.contains(&phrase) {
            self.placeholders.push(phrase);
        }
    }

    /// Truncates after the last `</CN>`, falling through to the global
    /// checkpoint when there is none. `pending` is the detected token that
    /// was not appended; the discarded phrase joins the placeholders.
    pub fn backtrack_local<S: AsRef<str>>(&mut self, pending: &str, punctuation: &[S]) -> Backtrack {
        let (to, kind) = match self.last_cn_index() {
            Some(i) => (i + 1, Backtrack::Local(i + 1)),
            None => {
                let to = self.last_sentence_index(punctuation).map_or(0, |i| i + 1);
                (to, Backtrack::Global(to))
            }
        };
        let mut region = self.sequence[to..].to_vec();
        region.push(pending.to_string());
        if let Some(phrase) = placeholder_phrase(&region) {
            self.add_placeholder(phrase);
        }
        self.sequence.truncate(to);
        kind
    }

    /// Truncates after the last sentence punctuation and clears the local
    /// failure count.
    pub fn backtrack_global<S: AsRef<str>>(&mut self, punctuation: &[S]) -> usize {
        let to = self.last_sentence_index(punctuation).map_or(0, |i| i + 1);
        self.sequence.truncate(to);
        self.k_local = 0;
        to
    }
}

fn is_content(token: &str) -> bool {
    !is_marker(token) && token != TERMINATOR
}

/// Content of the innermost discarded span, or of the whole discarded
/// region when no span was opened in it.
pub fn placeholder_phrase(region: &[String]) -> Option<String> {
    let content = |ts: &[String]| ts.iter().filter(|t| is_content(t)).cloned().collect::<Vec<_>>();
    let mut words = match region.iter().rposition(|t| t == SPAN_OPEN) {
        Some(i) => content(&region[i + 1..]),
        None => Vec::new(),
    };
    if words.is_empty() {
        words = content(region);
    }
    (!words.is_empty()).then(|| words.join(" "))
}

enum Attempt {
    Accept { tokens: Vec<String>, ended: bool },
    Fail(FailReason),
}

enum Correction {
    Accepted { ended: bool },
    Exhausted,
}

struct Engine<'a, B: DistributionBackend + ?Sized> {
    backend: &'a mut B,
    config: &'a DecodeConfig,
    prompt: &'a Prompt,
    prompt_tokens: Vec<String>,
    state: DecodeState,
    rng: ChaCha8Rng,
    trace: &'a mut Vec<TraceEvent>,
    drawn: usize,
}

impl<B: DistributionBackend + ?Sized> Engine<'_, B> {
    fn query(&mut self, buffer: &[String]) -> Result<Distribution, DecodeError> {
        let generated: Vec<String>;
        let generated: &[String] = if buffer.is_empty() {
            &self.state.sequence
        } else {
            generated = self.state.sequence.iter().chain(buffer).cloned().collect();
            &generated
        };
        let dist = self.backend.next_distribution(Context { prompt: &self.prompt_tokens, generated })?;
        let expected = self.backend.vocabulary().len();
        if dist.len() != expected {
            return Err(BackendError::WrongLength { expected, got: dist.len() }.into());
        }
        Ok(dist)
    }

    fn draw(&mut self, dist: &Distribution) -> String {
        let t = match self.config.sampling {
            Sampling::Greedy => 0.0,
            Sampling::Temperature => self.state.temperature,
        };
        let id = dist.sample(t, &mut self.rng);
        self.drawn += 1;
        self.backend.vocabulary().token(id).to_string()
    }

    fn un(&self, dist: &Distribution) -> f64 {
        un_probability(dist, self.backend.vocabulary())
    }

    fn refresh_prompt(&mut self) {
        self.prompt_tokens = self.prompt.tokens(&self.state.placeholders);
    }

    fn punctuation(&self) -> &[String] {
        &self.config.sentence_punctuation
    }

    fn span_open(&self, buffer: &[String]) -> bool {
        let all = self.state.sequence.iter().chain(buffer);
        let mut open = false;
        for t in all {
            if t == SPAN_OPEN {
                open = true;
            } else if t == CONFIDENT_CLOSE || t == UNCONFIDENT_CLOSE {
                open = false;
            }
        }
        open
    }

    fn run(&mut self) -> Result<(FinishReason, bool), DecodeError> {
        let tau = self.config.tau;
        loop {
            let position = self.state.sequence.len();
            if position >= self.config.max_length {
                return Ok((FinishReason::MaxLength, false));
            }
            let dist = self.query(&[])?;
            let p_un = self.un(&dist);
            let token = self.draw(&dist);
            self.trace.push(TraceEvent::Token {
                phase: Phase::Main,
                position,
                token: token.clone(),
                p_un,
                temperature: self.state.temperature,
            });
            if p_un >= tau {
                self.trace.push(TraceEvent::Detect {
                    position,
                    p_un,
                    n_total: self.state.n_total,
                    k_local: self.state.k_local,
                });
                if self.state.n_total < self.config.max_total_corrections {
                    match self.correct(&token)? {
                        Correction::Accepted { ended: true } => return Ok((FinishReason::Terminator, true)),
                        Correction::Accepted { ended: false } => continue,
                        Correction::Exhausted => match self.config.on_budget_exhausted {
                            BudgetPolicy::Finalize => {
                                self.state.flagged = true;
                                return Ok((FinishReason::Budget, false));
                            }
                            BudgetPolicy::Continue => {
                                self.state.temperature = self.config.base_temperature;
                                continue;
                            }
                        },
                    }
                } else if self.config.on_budget_exhausted == BudgetPolicy::Finalize {
                    let ended = token == TERMINATOR;
                    if !ended {
                        self.state.sequence.push(token);
                    }
                    self.state.flagged = true;
                    return Ok((FinishReason::Budget, ended));
                }
            }
            if token == TERMINATOR {
                return Ok((FinishReason::Terminator, true));
            }
            let unconfident = token == UNCONFIDENT_CLOSE;
            self.state.sequence.push(token);
            if unconfident {
                return Ok((FinishReason::Unconfident, false));
            }
        }
    }

    fn correct(&mut self, pending: &str) -> Result<Correction, DecodeError> {
        let punctuation = self.config.sentence_punctuation.clone();
        let landed = self.state.backtrack_local(pending, &punctuation);
        self.refresh_prompt();
        let placeholders = self.state.placeholders.clone();
        self.trace.push(match landed {
            Backtrack::Local(to) => TraceEvent::BacktrackLocal { to, placeholders },
            Backtrack::Global(to) => TraceEvent::BacktrackGlobal { to, k_local: self.state.k_local, placeholders },
        });
        while self.state.n_total < self.config.max_total_corrections {
            self.state.temperature =
                (self.state.temperature + self.config.temperature_step).min(self.config.temperature_cap());
            let attempt = self.attempt()?;
            self.state.n_total += 1;
            match attempt {
                Attempt::Accept { tokens, ended } => {
                    self.trace.push(TraceEvent::ResampleAccept {
                        n_total: self.state.n_total,
                        temperature: self.state.temperature,
                        tokens: tokens.clone(),
                    });
                    self.state.sequence.extend(tokens);
                    self.state.temperature = self.config.base_temperature;
                    self.state.k_local = 0;
                    return Ok(Correction::Accepted { ended });
                }
                Attempt::Fail(reason) => {
                    self.state.k_local += 1;
                    self.trace.push(TraceEvent::ResampleFail {
                        n_total: self.state.n_total,
                        k_local: self.state.k_local,
                        temperature: self.state.temperature,
                        reason,
                    });
                    if self.state.k_local >= self.config.max_local_attempts {
                        let k_local = self.state.k_local;
                        let to = self.state.backtrack_global(&self.config.sentence_punctuation);
                        self.trace.push(TraceEvent::BacktrackGlobal {
                            to,
                            k_local,
                            placeholders: self.state.placeholders.clone(),
                        });
                    }
                }
            }
        }
        Ok(Correction::Exhausted)
    }

    fn attempt(&mut self) -> Result<Attempt, DecodeError> {
        let mut buffer: Vec<String> = Vec::new();
        loop {
            let position = self.state.sequence.len() + buffer.len();
            if position >= self.config.max_length {
                return Ok(Attempt::Fail(FailReason::MaxLength));
            }
            let dist = self.query(&buffer)?;
            let p_un = self.un(&dist);
            let token = self.draw(&dist);
            self.trace.push(TraceEvent::Token {
                phase: Phase::Resample,
                position,
                token: token.clone(),
                p_un,
                temperature: self.state.temperature,
            });
            if p_un >= self.config.tau {
                return Ok(Attempt::Fail(FailReason::Threshold));
            }
            if token == UNCONFIDENT_CLOSE {
                return Ok(Attempt::Fail(FailReason::Unconfident));
            }
            if token == TERMINATOR {
                return Ok(Attempt::Accept { tokens: buffer, ended: true });
            }
            let closes = token == CONFIDENT_CLOSE;
            let boundary = self.punctuation().contains(&token);
            buffer.push(token);
            if closes || (boundary && !self.span_open(&buffer)) {
                return Ok(Attempt::Accept { tokens: buffer, ended: false });
            }
        }
    }
}

fn run_stage<B: DistributionBackend + ?Sized>(
    prompt: &Prompt,
    backend: &mut B,
    config: &DecodeConfig,
    rng: ChaCha8Rng,
    stage: u8,
    trace: &mut Vec<TraceEvent>,
) -> Result<DecodeOutcome, DecodeError> {
    config.validate()?;
    let mut engine = Engine {
        backend,
        config,
        prompt,
        prompt_tokens: prompt.tokens(&[]),
        state: DecodeState::new(config.base_temperature),
        rng,
        trace,
        drawn: 0,
    };
    let (reason, ended) = engine.run()?;
    let state = engine.state;
    engine.trace.push(TraceEvent::Finalize {
        stage,
        reason,
        length: state.sequence.len(),
        n_total: state.n_total,
        flagged: state.flagged,
    });
    let annotated = repair_generated(&state.sequence);
    let clean_text = detokenize(&annotated.strip_markers());
    Ok(DecodeOutcome {
        abstained: clean_text.trim().is_empty(),
        clean_text,
        annotated_text: annotated,
        corrections_applied: state.n_total,
        flagged_uncorrected: state.flagged,
        hit_max_length: reason == FinishReason::MaxLength,
        tokens_generated_total: engine.drawn,
        tokens_emitted: state.sequence.len() + usize::from(ended),
        stage,
        placeholders: state.placeholders,
    })
}

/// Decodes one prompt with item `index` of the decode stream.
pub fn decode_traced<B: DistributionBackend + ?Sized>(
    prompt: &Prompt,
    backend: &mut B,
    config: &DecodeConfig,
    index: u64,
    trace: &mut Vec<TraceEvent>,
) -> Result<DecodeOutcome, DecodeError> {
    let rng = SeedStream::new(config.seed).rng(Stream::Decode, index);
    run_stage(prompt, backend, config, rng, 1, trace)
}

pub fn decode<B: DistributionBackend + ?Sized>(
    prompt: &Prompt,
    backend: &mut B,
    config: &DecodeConfig,
) -> Result<DecodeOutcome, DecodeError> {
    decode_traced(prompt, backend, config, 0, &mut Vec::new())
}

/// Two-stage decoding for questions that may be unanswerable: a blank first
/// answer triggers one retry with the clarification request appended.
pub fn decode_open_ended_traced<B: DistributionBackend + ?Sized>(
    prompt: &Prompt,
    backend: &mut B,
    config: &DecodeConfig,
    index: u64,
    trace: &mut Vec<TraceEvent>,
) -> Result<DecodeOutcome, DecodeError> {
    let seeds = SeedStream::new(config.seed);
    let first = run_stage(prompt, backend, config, seeds.rng(Stream::Decode, index), 1, trace)?;
    if !first.abstained {
        return Ok(first);
    }
    let second_prompt =
        Prompt { question: format!("{} {CLARIFICATION}", prompt.question.trim_end()), image: prompt.image.clone() };
    let rng = seeds.rng(Stream::OpenEndedSecondStage, index);
    let mut second = run_stage(&second_prompt, backend, config, rng, 2, trace)?;
    second.tokens_generated_total += first.tokens_generated_total;
    Ok(second)
}

pub fn decode_open_ended<B: DistributionBackend + ?Sized>(
    prompt: &Prompt,
    backend: &mut B,
    config: &DecodeConfig,
) -> Result<DecodeOutcome, DecodeError> {
    decode_open_ended_traced(prompt, backend, config, 0, &mut Vec::new())
}
