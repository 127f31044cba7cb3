//! Fixed-window softmax language model trained with the span-masked NLL.
//!
//! The last `c` token embeddings are concatenated and mapped through one
//! linear layer to vocabulary logits:
//!
//! ```text
//! h      = [E[t_{i-c}], ..., E[t_{i-1}]]          (c·d)
//! logits = h · W + b                               (V)
//! P      = softmax(logits / T)
//! ```
//!
//! Loss targets inside `<SPAN> ... </UN>` carry zero weight; they are still
//! fed back as inputs for later positions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::QASample;
use crate::dist::{Distribution, DistributionError, Vocabulary};
use crate::protocol::AnnotatedText;
use crate::rng::{SeedStream, Stream};

/// Floor applied inside the log of every loss term.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

pub const PARAMS_FORMAT: &str = "reverse-toylm";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),
    #[error("loss became non-finite at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    vocab: Vocabulary,
    context_window: usize,
    dim: usize,
    /// V×d, row-major by token.
    embedding: Vec<f64>,
    /// (c·d)×V, row-major by input feature.
    output: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Vec<f64>,
    pub output: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(p: &ModelParams) -> Self {
        Gradients {
            embedding: vec![0.0; p.embedding.len()],
            output: vec![0.0; p.output.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.embedding.iter().chain(&self.output).chain(&self.bias).copied()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl ModelParams {
    pub fn zeros(vocab: Vocabulary, context_window: usize, dim: usize) -> Self {
        let v = vocab.len();
        ModelParams {
            embedding: vec![0.0; v * dim],
            output: vec![0.0; context_window * dim * v],
            bias: vec![0.0; v],
            vocab,
            context_window,
            dim,
        }
    }

    /// Every entry uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocabulary,
        context_window: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(vocab, context_window, dim);
        for x in p.embedding.iter_mut().chain(p.output.iter_mut()).chain(p.bias.iter_mut()) {
            *x = if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 };
        }
        p
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_parameters(&self) -> usize {
        self.embedding.len() + self.output.len() + self.bias.len()
    }

    /// Flat view in the order embedding, output, bias.
    pub fn get(&self, i: usize) -> f64 {
        let (e, o) = (self.embedding.len(), self.output.len());
        if i < e {
            self.embedding[i]
        } else if i < e + o {
            self.output[i - e]
        } else {
            self.bias[i - e - o]
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let (e, o) = (self.embedding.len(), self.output.len());
        if i < e {
            self.embedding[i] = value;
        } else if i < e + o {
            self.output[i - e] = value;
        } else {
            self.bias[i - e - o] = value;
        }
    }

    fn apply(&mut self, grad: &Gradients, learning_rate: f64) {
        for (p, g) in self.embedding.iter_mut().zip(&grad.embedding) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.output.iter_mut().zip(&grad.output) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&grad.bias) {
            *p -= learning_rate * g;
        }
    }

    /// Last `c` ids of `history`, left-padded with the pad id.
    pub fn window(&self, history: &[usize]) -> Vec<usize> {
        let c = self.context_window;
        let mut ctx = vec![self.vocab.pad_id(); c];
        let take = history.len().min(c);
        ctx[c - take..].copy_from_slice(&history[history.len() - take..]);
        ctx
    }

    fn hidden(&self, ctx: &[usize]) -> Vec<f64> {
        let d = self.dim;
        let mut h = Vec::with_capacity(ctx.len() * d);
        for &t in ctx {
            h.extend_from_slice(&self.embedding[t * d..(t + 1) * d]);
        }
        h
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let v = self.vocab.len();
        let mut logits = self.bias.clone();
        for (k, &hk) in h.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            let row = &self.output[k * v..(k + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hk * w;
            }
        }
        logits
    }

    /// Raw logits for the window ending `history`.
    pub fn logits(&self, history: &[usize]) -> Vec<f64> {
        self.logits_from_hidden(&self.hidden(&self.window(history)))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.vocab.len();
        if self.context_window == 0 || self.dim == 0 {
            return Err(ModelError::Format("context window and dim must be positive".into()));
        }
        if self.embedding.len() != v * self.dim
            || self.output.len() != self.context_window * self.dim * v
            || self.bias.len() != v
        {
            return Err(ModelError::Format("parameter shapes inconsistent with vocabulary".into()));
        }
        if !(self.embedding.iter().chain(&self.output).chain(&self.bias)).all(|x| x.is_finite()) {
            return Err(ModelError::Format("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// `ln(max(p, floor))`, keeping NaN so divergence stays visible.
fn floored_ln(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(PROBABILITY_FLOOR).ln()
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Next-token distribution after `history` at `temperature`.
pub fn forward(params: &ModelParams, history: &[usize], temperature: f64) -> Result<Distribution, ModelError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(ModelError::TemperatureNonPositive(temperature));
    }
    Ok(Distribution::new(softmax(&params.logits(history), temperature))?)
}

/// One (input, target) pair in vocabulary ids with its loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TrainingExample {
    pub fn new<S: AsRef<str>>(vocab: &Vocabulary, input: &[S], target: &AnnotatedText) -> Self {
        TrainingExample {
            input: input.iter().map(|t| vocab.id_or_unk(t.as_ref())).collect(),
            targets: target.tokens().iter().map(|t| vocab.id_or_unk(t)).collect(),
            mask: target.hallucination_mask(),
        }
    }

    /// Adds an unmasked terminator target so the model learns to stop.
    pub fn with_terminator(mut self, vocab: &Vocabulary) -> Self {
        if self.targets.last() != Some(&vocab.terminator_id()) {
            self.targets.push(vocab.terminator_id());
            self.mask.push(true);
        }
        self
    }

    pub fn from_sample(vocab: &Vocabulary, sample: &QASample) -> Self {
        Self::new(vocab, &sample.model_input_tokens(), &sample.answer).with_terminator(vocab)
    }

    /// History preceding target `i`.
    fn history(&self, i: usize) -> Vec<usize> {
        let mut h = self.input.clone();
        h.extend_from_slice(&self.targets[..i]);
        h
    }
}

/// `-Σ mask_i · log P(y_i | X, y_<i)`.
pub fn masked_nll(params: &ModelParams, example: &TrainingExample) -> f64 {
    let mut loss = 0.0;
    for i in 0..example.targets.len() {
        if !example.mask[i] {
            continue;
        }
        let probs = softmax(&params.logits(&example.history(i)), 1.0);
        loss -= floored_ln(probs[example.targets[i]]);
    }
    loss
}

/// Plain NLL over every target.
pub fn unmasked_nll(params: &ModelParams, example: &TrainingExample) -> f64 {
    let all = TrainingExample { mask: vec![true; example.targets.len()], ..example.clone() };
    masked_nll(params, &all)
}

/// Unique contexts of a batch with accumulated unmasked target weights.
struct PositionTable {
    contexts: Vec<Vec<usize>>,
    targets: Vec<Vec<(usize, f64)>>,
    batch_size: usize,
}

impl PositionTable {
    fn compile(params: &ModelParams, batch: &[TrainingExample]) -> Self {
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut contexts = Vec::new();
        let mut targets: Vec<Vec<(usize, f64)>> = Vec::new();
        for ex in batch {
            let mut history = ex.input.clone();
            for (i, &y) in ex.targets.iter().enumerate() {
                if ex.mask[i] {
                    let ctx = params.window(&history);
                    let slot = *index.entry(ctx.clone()).or_insert_with(|| {
                        contexts.push(ctx);
                        targets.push(Vec::new());
                        contexts.len() - 1
                    });
                    match targets[slot].iter_mut().find(|(t, _)| *t == y) {
                        Some((_, w)) => *w += 1.0,
                        None => targets[slot].push((y, 1.0)),
                    }
                }
                history.push(y);
            }
        }
        PositionTable { contexts, targets, batch_size: batch.len() }
    }

    /// Mean loss and its gradient over the batch.
    fn loss_and_gradient(&self, params: &ModelParams) -> (f64, Gradients) {
        let v = params.vocab.len();
        let d = params.dim;
        let scale = 1.0 / self.batch_size as f64;
        let mut grad = Gradients::zeros_like(params);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; v];
        for (ctx, targets) in self.contexts.iter().zip(&self.targets) {
            let h = params.hidden(ctx);
            let probs = softmax(&params.logits_from_hidden(&h), 1.0);
            let mut live = 0.0;
            dlogits.iter_mut().for_each(|x| *x = 0.0);
            for &(y, w) in targets {
                let p = probs[y];
                loss -= w * floored_ln(p);
                // the clamped branch of the loss is flat
                if p >= PROBABILITY_FLOOR {
                    live += w;
                    dlogits[y] -= w;
                }
            }
            if live == 0.0 {
                continue;
            }
            for (dl, p) in dlogits.iter_mut().zip(&probs) {
                *dl = (*dl + live * p) * scale;
            }
            for (b, dl) in grad.bias.iter_mut().zip(&dlogits) {
                *b += dl;
            }
            for (k, &hk) in h.iter().enumerate() {
                let w_row = &params.output[k * v..(k + 1) * v];
                let g_row = &mut grad.output[k * v..(k + 1) * v];
                let mut dh = 0.0;
                for ((g, w), dl) in g_row.iter_mut().zip(w_row).zip(&dlogits) {
                    *g += hk * dl;
                    dh += w * dl;
                }
                let (slot, m) = (k / d, k % d);
                grad.embedding[ctx[slot] * d + m] += dh;
            }
        }
        (loss * scale, grad)
    }
}

/// Mean masked NLL over a batch.
pub fn batch_loss(params: &ModelParams, batch: &[TrainingExample]) -> f64 {
    batch.iter().map(|ex| masked_nll(params, ex)).sum::<f64>() / batch.len() as f64
}

/// Analytic gradient of the mean masked NLL over a non-empty batch.
pub fn gradient(params: &ModelParams, batch: &[TrainingExample]) -> Gradients {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    PositionTable::compile(params, batch).loss_and_gradient(params).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub context_window: usize,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.5, epochs: 200, seed: 0, init_scale: 0.1, context_window: 4, dim: 8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.context_window == 0 || self.dim == 0 {
            return Err(ModelError::InvalidConfig("context_window and dim must be positive".into()));
        }
        if self.init_scale.is_nan() || self.init_scale < 0.0 {
            return Err(ModelError::InvalidConfig("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Loss before each step, then the final loss.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

/// Full-batch gradient descent from a seeded uniform initialisation.
pub fn train(vocab: Vocabulary, corpus: &[TrainingExample], config: &TrainConfig) -> Result<TrainReport, ModelError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut rng = SeedStream::new(config.seed).rng(Stream::Init, 0);
    let mut params = ModelParams::random(vocab, config.context_window, config.dim, config.init_scale, &mut rng);
    let table = PositionTable::compile(&params, corpus);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = table.loss_and_gradient(&params);
        if !loss.is_finite() {
            return Err(ModelError::DivergenceDetected { epoch });
        }
        losses.push(loss);
        params.apply(&grad, config.learning_rate);
        if params.validate().is_err() {
            return Err(ModelError::DivergenceDetected { epoch });
        }
    }
    let (loss, _) = table.loss_and_gradient(&params);
    if !loss.is_finite() {
        return Err(ModelError::DivergenceDetected { epoch: config.epochs });
    }
    losses.push(loss);
    Ok(TrainReport { params, losses })
}

/// Vocabulary covering every input and answer token of `samples`.
pub fn vocabulary_for(samples: &[QASample]) -> Vocabulary {
    let mut words = Vec::new();
    for s in samples {
        words.extend(s.model_input_tokens());
        words.extend(s.answer.tokens().iter().cloned());
    }
    Vocabulary::new(words)
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    vocab: Vocabulary,
    context_window: usize,
    dim: usize,
    embedding: Vec<f64>,
    output: Vec<f64>,
    bias: Vec<f64>,
}

impl ModelParams {
    pub fn to_json(&self) -> String {
        let file = ParamsFile {
            format: PARAMS_FORMAT.to_string(),
            version: PARAMS_VERSION,
            vocab: self.vocab.clone(),
            context_window: self.context_window,
            dim: self.dim,
            embedding: self.embedding.clone(),
            output: self.output.clone(),
            bias: self.bias.clone(),
        };
        serde_json::to_string(&file).expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ParamsFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if file.format != PARAMS_FORMAT {
            return Err(ModelError::Format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != PARAMS_VERSION {
            return Err(ModelError::Format(format!("unsupported version {}", file.version)));
        }
        let params = ModelParams {
            vocab: file.vocab,
            context_window: file.context_window,
            dim: file.dim,
            embedding: file.embedding,
            output: file.output,
            bias: file.bias,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
