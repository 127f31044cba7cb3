//! Hallucination-aware instruction-tuning data.
//!
//! Positive answers get their noun phrases wrapped as confident spans; each
//! positive then yields one negative whose substituted phrase is closed with
//! `</UN>` and where the answer stops. Yes/no and counting answers are
//! negated by rule, general answers through a phrase dictionary or an
//! external phrase-pair provider.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    is_marker, parse_spans, rewrite_query, tokenize, AnnotatedText, Polarity, ProtocolError, CONFIDENT_CLOSE,
    SPAN_OPEN, UNCONFIDENT_CLOSE,
};
use crate::rng::{SeedStream, Stream};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("sample {id}: no taggable span in a general answer")]
    NoTaggableSpan { id: String },
    #[error("sample {id}: no dictionary alternative for any tagged phrase")]
    NoAlternative { id: String },
    #[error("external negative hook selected but no provider is configured")]
    ExternalHookUnavailable,
    #[error("external negative hook failed: {0}")]
    Hook(String),
    #[error("sample {id}: expected a positive sample")]
    NotPositive { id: String },
    #[error("sample {id}: empty answer")]
    EmptyAnswer { id: String },
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplePolarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

/// One curated question/answer turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: Option<String>,
    pub question: String,
    pub answer: AnnotatedText,
    pub polarity: SamplePolarity,
    pub hint: Option<Vec<String>>,
}

impl QASample {
    /// Question tokens followed by the image reference's tokens, the layout
    /// the toy model consumes as its input prefix.
    pub fn model_input_tokens(&self) -> Vec<String> {
        let mut tokens = tokenize(&self.question);
        if let Some(image) = &self.image_ref {
            tokens.extend(tokenize(image));
        }
        tokens
    }

    /// Conversation key: the id up to the first `#`.
    pub fn sample_key(&self) -> &str {
        self.id.split('#').next().unwrap_or(&self.id)
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        let has_un = self.answer.has_unconfident();
        let reason = match self.polarity {
            SamplePolarity::Negative if !has_un => "negative sample without an unconfident span",
            SamplePolarity::Positive if has_un => "positive sample with an unconfident span",
            _ => return Ok(()),
        };
        Err(CurationError::InvalidSample { id: self.id.clone(), reason: reason.into() })
    }

    /// Phrase enclosed by the unconfident span, if any.
    pub fn substituted_phrase(&self) -> Option<String> {
        self.answer.unconfident_span().map(|s| self.answer.span_phrase(s))
    }
}

/// Id of the negative derived from `positive_id`.
pub fn negative_id(positive_id: &str) -> String {
    match positive_id.split_once('#') {
        Some((key, turn)) => format!("{key}-neg#{turn}"),
        None => format!("{positive_id}-neg"),
    }
}

fn positive_id_of(negative: &str) -> Option<String> {
    match negative.split_once('#') {
        Some((key, turn)) => key.strip_suffix("-neg").map(|k| format!("{k}#{turn}")),
        None => negative.strip_suffix("-neg").map(str::to_string),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerType {
    BinaryYesNo,
    Counting,
    General,
}

const NUMBER_WORDS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

fn normalized_head(answer: &str) -> Option<String> {
    tokenize(answer).into_iter().find(|t| t.chars().any(|c| c.is_alphanumeric())).map(|t| t.to_lowercase())
}

/// Cardinal value of a digit string or a number word up to twenty.
pub fn parse_cardinal(token: &str) -> Option<u64> {
    let t = token.to_lowercase();
    if !t.is_empty() && t.chars().all(|c| c.is_ascii_digit()) {
        return t.parse().ok();
    }
    NUMBER_WORDS.iter().position(|w| *w == t).map(|i| i as u64)
}

pub fn classify_answer_type(_question: &str, answer: &str) -> AnswerType {
    match normalized_head(answer) {
        Some(h) if h == "yes" || h == "no" => AnswerType::BinaryYesNo,
        Some(h) if parse_cardinal(&h).is_some() => AnswerType::Counting,
        _ => AnswerType::General,
    }
}

/// Phrases never tagged as spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipList {
    entries: HashSet<String>,
}

const DEFAULT_SKIP_LIST: &str = "\
what, where, which, who, whom, whose, why, how,
What, Where, Which, Who, Whom, Whose, Why, How,
that, this, these, those, That, This, These, Those,
he, she, it, we, you, they, me, him, her, us, them, I,
He, She, It, We, You, They, Me, Him, Her, Us, Them, I,
my, your, his, her, its, our, their, mine, yours, ours, theirs,
My, Your, His, Her, Its, Our, Their, Mine, Yours, Ours, Theirs,
a, an, the, A, An, The,
in the image, the image, The image, In the image,
in the picture, the picture, The picture, In the picture";

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Default for SkipList {
    fn default() -> Self {
        SkipList { entries: DEFAULT_SKIP_LIST.split(',').map(normalize_phrase).filter(|s| !s.is_empty()).collect() }
    }
}

impl SkipList {
    /// One phrase per line; blank lines ignored.
    pub fn from_text(text: &str) -> Self {
        SkipList { entries: text.lines().map(normalize_phrase).filter(|s| !s.is_empty()).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, CurationError> {
        Ok(Self::from_text(&fs::read_to_string(path)?))
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.entries.contains(&normalize_phrase(phrase))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops skip-listed words, lowercasing the rest.
    fn content_words(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().filter(|t| !self.contains(t)).map(|t| t.to_lowercase()).collect()
    }
}

/// Finds candidate noun phrases as token ranges.
pub trait PhraseTagger {
    fn noun_phrases(&self, tokens: &[String]) -> Vec<Range<usize>>;
}

/// Greedy left-to-right longest match against a phrase list,
/// case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct DictionaryTagger {
    phrases: Vec<Vec<String>>,
    longest: usize,
}

impl DictionaryTagger {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let phrases: Vec<Vec<String>> = phrases
            .into_iter()
            .map(|p| p.as_ref().split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        let longest = phrases.iter().map(Vec::len).max().unwrap_or(0);
        DictionaryTagger { phrases, longest }
    }
}

impl PhraseTagger for DictionaryTagger {
    fn noun_phrases(&self, tokens: &[String]) -> Vec<Range<usize>> {
        let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            let mut best = 0;
            for len in (1..=self.longest.min(lower.len() - i)).rev() {
                if self.phrases.iter().any(|p| p.as_slice() == &lower[i..i + len]) {
                    best = len;
                    break;
                }
            }
            if best > 0 {
                out.push(i..i + best);
                i += best;
            } else {
                i += 1;
            }
        }
        out
    }
}

const DETERMINERS: [&str; 3] = ["a", "an", "the"];
const PREPOSITIONS: [&str; 16] = [
    "in", "on", "at", "under", "near", "behind", "beside", "above", "below", "with", "of", "by", "inside", "over",
    "next", "between",
];

/// Wraps each tagged noun phrase, widened over a directly preceding
/// determiner and preposition, in `<SPAN> ... </CN>` unless the phrase is
/// skip-listed.
pub fn tag_spans(answer: &str, skip: &SkipList, tagger: &dyn PhraseTagger) -> AnnotatedText {
    tag_tokens(&tokenize(answer), skip, tagger, 0)
}

fn tag_tokens(tokens: &[String], skip: &SkipList, tagger: &dyn PhraseTagger, floor: usize) -> AnnotatedText {
    let mut ranges = Vec::new();
    let mut prev_end = floor;
    for core in tagger.noun_phrases(tokens) {
        if core.start < prev_end || core.end > tokens.len() || core.is_empty() {
            continue;
        }
        let mut start = core.start;
        let lower = |i: usize| tokens[i].to_lowercase();
        if start > prev_end && DETERMINERS.contains(&lower(start - 1).as_str()) {
            start -= 1;
        }
        if start > prev_end && PREPOSITIONS.contains(&lower(start - 1).as_str()) {
            start -= 1;
        }
        let skipped = (start..=core.start).any(|s| skip.contains(&tokens[s..core.end].join(" ")));
        if skipped {
            continue;
        }
        ranges.push(start..core.end);
        prev_end = core.end;
    }
    let mut out = Vec::with_capacity(tokens.len() + 2 * ranges.len());
    let mut next = ranges.iter().peekable();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(r) = next.next_if(|r| r.start == i) {
            out.push(SPAN_OPEN.to_string());
            out.extend_from_slice(&tokens[r.clone()]);
            out.push(CONFIDENT_CLOSE.to_string());
            i = r.end;
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    parse_spans(out).expect("tagged spans are balanced")
}

/// Groups of interchangeable phrases; a substitute is drawn from the group
/// of the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionDictionary {
    categories: Vec<(String, Vec<String>)>,
}

const DEFAULT_CATEGORIES: &str = "\
animal: dog, cat, horse, cow, sheep, bird, elephant, giraffe, zebra, bear
vehicle: car, bus, truck, bicycle, motorcycle, train, boat, airplane
food: pizza, sandwich, banana, apple, orange, cake, donut, broccoli, carrot
dish: giant hotdog, small burger
container: cup, bottle, bowl, glass, vase, mug
drinkware: red plastic cup, green glass bottle
furniture: chair, couch, bed, table, bench, shelf
household: lamp, clock, book, television, laptop, phone, remote
clothing: shirt, hat, jacket, shoe, umbrella, backpack
scene: street, beach, kitchen, park, field, room
view: back view, frontal view, side view
author: Sinclair Lewis, Mark Twain, Jane Austen
color: red, blue, green, yellow, white, black";

impl SubstitutionDictionary {
    /// `category: phrase, phrase, ...` per line.
    pub fn from_text(text: &str) -> Result<Self, CurationError> {
        let mut categories = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((name, members)) = line.split_once(':') else {
                return Err(CurationError::Line { line: n + 1, message: "expected `category: a, b, ...`".into() });
            };
            let members: Vec<String> = members.split(',').map(normalize_phrase).filter(|m| !m.is_empty()).collect();
            categories.push((name.trim().to_string(), members));
        }
        Ok(SubstitutionDictionary { categories })
    }

    pub fn load(path: &Path) -> Result<Self, CurationError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().flat_map(|(_, m)| m.iter().map(String::as_str))
    }

    /// Alternatives sharing a category with `phrase` (case-insensitive).
    pub fn alternatives(&self, phrase: &str) -> Vec<&str> {
        let key = normalize_phrase(phrase).to_lowercase();
        let mut out = Vec::new();
        for (_, members) in &self.categories {
            if members.iter().any(|m| m.to_lowercase() == key) {
                out.extend(members.iter().filter(|m| m.to_lowercase() != key).map(String::as_str));
            }
        }
        out
    }

    pub fn tagger(&self) -> DictionaryTagger {
        DictionaryTagger::new(self.phrases())
    }
}

impl Default for SubstitutionDictionary {
    fn default() -> Self {
        Self::from_text(DEFAULT_CATEGORIES).expect("built-in dictionary parses")
    }
}

/// External negative generator: given a question and its annotated answer,
/// returns `(original phrase, alternative)`.
pub trait NegativeProvider: Send + Sync {
    fn propose(&self, question: &str, answer: &AnnotatedText) -> Result<(String, String), String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NegativeHook {
    #[default]
    RuleOnly,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub hint_rate: f64,
    pub seed: u64,
    pub negative_hook: NegativeHook,
    pub number_perturb_radius: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig { hint_rate: 0.2, seed: 0, negative_hook: NegativeHook::RuleOnly, number_perturb_radius: 3 }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if !(0.0..=1.0).contains(&self.hint_rate) {
            return Err(CurationError::InvalidConfig(format!("hint_rate {} outside [0, 1]", self.hint_rate)));
        }
        Ok(())
    }
}

/// Lookup tables and hooks shared by every sample.
pub struct CurationResources<'a> {
    pub skip_list: SkipList,
    pub dictionary: SubstitutionDictionary,
    pub tagger: Box<dyn PhraseTagger + Send + Sync + 'a>,
    pub external: Option<&'a dyn NegativeProvider>,
}

impl Default for CurationResources<'_> {
    fn default() -> Self {
        let dictionary = SubstitutionDictionary::default();
        CurationResources {
            skip_list: SkipList::default(),
            tagger: Box::new(dictionary.tagger()),
            dictionary,
            external: None,
        }
    }
}

/// Annotates a raw positive answer. Yes/no and counting heads are spans.
pub fn annotate_positive(answer: &str, kind: AnswerType, resources: &CurationResources<'_>) -> AnnotatedText {
    let tokens = tokenize(answer);
    if kind == AnswerType::General {
        return tag_tokens(&tokens, &resources.skip_list, resources.tagger.as_ref(), 0);
    }
    let Some(head) = tokens.iter().position(|t| is_word(t)) else {
        return tag_tokens(&tokens, &resources.skip_list, resources.tagger.as_ref(), 0);
    };
    let mut wrapped = tokens[..head].to_vec();
    wrapped.push(SPAN_OPEN.into());
    wrapped.push(tokens[head].clone());
    wrapped.push(CONFIDENT_CLOSE.into());
    let rest = tag_tokens(&tokens[head + 1..], &resources.skip_list, resources.tagger.as_ref(), 0);
    wrapped.extend(rest.into_tokens());
    parse_spans(wrapped).expect("balanced")
}

fn is_word(token: &str) -> bool {
    !is_marker(token) && token.chars().any(char::is_alphanumeric)
}

fn flip_yes_no(token: &str) -> String {
    let lower = token.to_lowercase();
    let flipped = if lower.starts_with("yes") { "no" } else { "yes" };
    let mut chars = token.chars();
    let upper_first = chars.next().is_some_and(char::is_uppercase);
    let all_upper = token.len() > 1 && token.chars().all(|c| !c.is_lowercase());
    if all_upper {
        flipped.to_uppercase()
    } else if upper_first {
        let mut s = flipped.to_string();
        s[..1].make_ascii_uppercase();
        s
    } else {
        flipped.to_string()
    }
}

/// Uniform draw from `[max(0, n-r), n+r]` excluding `n`.
pub fn perturb_count<R: Rng + ?Sized>(n: u64, radius: u64, rng: &mut R) -> u64 {
    let lo = n.saturating_sub(radius);
    let hi = n.saturating_add(radius);
    let choices: Vec<u64> = (lo..=hi).filter(|&m| m != n).collect();
    if choices.is_empty() {
        return n + 1;
    }
    choices[rng.random_range(0..choices.len())]
}

fn render_count(original: &str, value: u64) -> String {
    if original.chars().all(|c| c.is_ascii_digit()) {
        return value.to_string();
    }
    match NUMBER_WORDS.get(value as usize) {
        Some(word) if original.chars().next().is_some_and(char::is_uppercase) => {
            let mut s = word.to_string();
            s[..1].make_ascii_uppercase();
            s
        }
        Some(word) => word.to_string(),
        None => value.to_string(),
    }
}

fn unconfident_answer(prefix: &[String], phrase_tokens: Vec<String>) -> AnnotatedText {
    let mut tokens = prefix.to_vec();
    tokens.push(SPAN_OPEN.into());
    tokens.extend(phrase_tokens);
    tokens.push(UNCONFIDENT_CLOSE.into());
    parse_spans(tokens).expect("prefix is balanced")
}

/// Derives the negative counterpart of a positive sample.
pub fn generate_negative<R: Rng + ?Sized>(
    sample: &QASample,
    kind: AnswerType,
    config: &CurationConfig,
    resources: &CurationResources<'_>,
    rng: &mut R,
) -> Result<QASample, CurationError> {
    if sample.polarity != SamplePolarity::Positive {
        return Err(CurationError::NotPositive { id: sample.id.clone() });
    }
    let tokens = sample.answer.tokens();
    let id = sample.id.clone();
    let answer = match kind {
        AnswerType::BinaryYesNo | AnswerType::Counting => {
            let head =
                tokens.iter().position(|t| is_word(t)).ok_or_else(|| CurationError::EmptyAnswer { id: id.clone() })?;
            let replacement = if kind == AnswerType::BinaryYesNo {
                flip_yes_no(&tokens[head])
            } else {
                let n = parse_cardinal(&tokens[head])
                    .ok_or_else(|| CurationError::InvalidSample { id: id.clone(), reason: "no count".into() })?;
                render_count(&tokens[head], perturb_count(n, config.number_perturb_radius, rng))
            };
            // markers ahead of the head belong to its own span
            let prefix: Vec<String> = tokens[..head].iter().filter(|t| *t != SPAN_OPEN).cloned().collect();
            unconfident_answer(&prefix, vec![replacement])
        }
        AnswerType::General => {
            let spans: Vec<_> =
                sample.answer.spans().iter().filter(|s| s.polarity == Polarity::Confident).copied().collect();
            if spans.is_empty() {
                return Err(CurationError::NoTaggableSpan { id });
            }
            match config.negative_hook {
                NegativeHook::External => {
                    let provider = resources.external.ok_or(CurationError::ExternalHookUnavailable)?;
                    let (original, alternative) =
                        provider.propose(&sample.question, &sample.answer).map_err(CurationError::Hook)?;
                    let target = normalize_phrase(&original).to_lowercase();
                    let span = spans
                        .iter()
                        .find(|s| sample.answer.span_phrase(s).to_lowercase() == target)
                        .ok_or_else(|| CurationError::Hook(format!("phrase {original:?} is not a tagged span")))?;
                    unconfident_answer(&tokens[..span.open_index], tokenize(&alternative))
                }
                NegativeHook::RuleOnly => {
                    let mut options = Vec::new();
                    for span in &spans {
                        let content = sample.answer.span_content(span);
                        // whole phrase first, then the phrase without its leading words
                        for skip in 0..content.len() {
                            let alts = resources.dictionary.alternatives(&content[skip..].join(" "));
                            if !alts.is_empty() {
                                options.push((*span, skip, alts));
                                break;
                            }
                        }
                    }
                    if options.is_empty() {
                        return Err(CurationError::NoAlternative { id });
                    }
                    let (span, skip, alts) = &options[rng.random_range(0..options.len())];
                    let alternative = alts[rng.random_range(0..alts.len())];
                    let mut phrase: Vec<String> = sample.answer.span_content(span)[..*skip].to_vec();
                    phrase.extend(tokenize(alternative));
                    unconfident_answer(&tokens[..span.open_index], phrase)
                }
            }
        }
    };
    Ok(QASample {
        id: negative_id(&sample.id),
        image_ref: sample.image_ref.clone(),
        question: sample.question.clone(),
        answer,
        polarity: SamplePolarity::Negative,
        hint: None,
    })
}

/// With probability `hint_rate`, suffixes the question with a rewrite hint
/// naming the substituted phrase.
pub fn inject_rewrite_hint<R: Rng + ?Sized>(sample: &QASample, hint_rate: f64, rng: &mut R) -> QASample {
    let mut out = sample.clone();
    let Some(phrase) = sample.substituted_phrase() else {
        return out;
    };
    if rng.random::<f64>() < hint_rate {
        out.question = rewrite_query(&sample.question, &[phrase.as_str()]);
        out.hint = Some(vec![phrase]);
    }
    out
}

/// One turn of a raw, unannotated conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub question: String,
    pub answer: String,
}

/// Input corpus record: `{"id", "image", "turns": [{"question", "answer"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    #[serde(default)]
    pub image: Option<String>,
    pub turns: Vec<RawTurn>,
}

pub fn parse_raw_line(line: &str) -> Result<RawSample, String> {
    let raw: RawSample = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.id.is_empty() {
        return Err("empty id".into());
    }
    if raw.id.contains('#') {
        return Err("id must not contain '#'".into());
    }
    Ok(raw)
}

/// Reads an input corpus; errors name the offending line.
pub fn load_raw_corpus(text: &str) -> Result<Vec<RawSample>, CurationError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_raw_line(line).map_err(|message| CurationError::Line { line: n + 1, message })?);
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct CurationOutput {
    pub samples: Vec<QASample>,
    /// Positives whose negative could not be derived, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Runs annotation, negative generation and hint injection over a corpus.
pub fn curate(
    corpus: &[RawSample],
    resources: &CurationResources<'_>,
    config: &CurationConfig,
) -> Result<CurationOutput, CurationError> {
    config.validate()?;
    let seeds = SeedStream::new(config.seed);
    let mut out = CurationOutput::default();
    let mut turn_index = 0u64;
    for raw in corpus {
        for (t, turn) in raw.turns.iter().enumerate() {
            let mut rng = seeds.rng(Stream::Curation, turn_index);
            let mut hint_rng = seeds.rng(Stream::Hint, turn_index);
            turn_index += 1;
            let id = format!("{}#{t}", raw.id);
            if tokenize(&turn.answer).is_empty() {
                return Err(CurationError::EmptyAnswer { id });
            }
            let kind = classify_answer_type(&turn.question, &turn.answer);
            let positive = QASample {
                id,
                image_ref: raw.image.clone(),
                question: turn.question.clone(),
                answer: annotate_positive(&turn.answer, kind, resources),
                polarity: SamplePolarity::Positive,
                hint: None,
            };
            match generate_negative(&positive, kind, config, resources, &mut rng) {
                Ok(neg) => {
                    let neg = inject_rewrite_hint(&neg, config.hint_rate, &mut hint_rng);
                    out.samples.push(positive);
                    out.samples.push(neg);
                }
                Err(e @ (CurationError::NoTaggableSpan { .. } | CurationError::NoAlternative { .. })) => {
                    out.skipped.push((positive.id.clone(), e.to_string()));
                    out.samples.push(positive);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub n_turns: usize,
    pub n_positive_turns: usize,
    pub n_negative_turns: usize,
    pub avg_turns_per_sample: f64,
    pub n_filtered_trivial: usize,
}

impl DatasetStats {
    pub fn of(samples: &[QASample]) -> Self {
        let keys: HashSet<&str> = samples.iter().map(QASample::sample_key).collect();
        let n_negative = samples.iter().filter(|s| s.polarity == SamplePolarity::Negative).count();
        let n_samples = keys.len();
        DatasetStats {
            n_samples,
            n_turns: samples.len(),
            n_positive_turns: samples.len() - n_negative,
            n_negative_turns: n_negative,
            avg_turns_per_sample: if n_samples == 0 { 0.0 } else { samples.len() as f64 / n_samples as f64 },
            n_filtered_trivial: 0,
        }
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.n_turns == 0 {
            0.0
        } else {
            self.n_positive_turns as f64 / self.n_turns as f64
        }
    }
}

/// True when the negative's substitution only changes skip-listed words
/// relative to its positive (e.g. a pronoun swap).
pub fn is_trivial_negative(positive: &QASample, negative: &QASample, skip: &SkipList) -> bool {
    let Some(un) = negative.answer.unconfident_span() else {
        return false;
    };
    let Some(orig) = positive.answer.spans().iter().find(|s| s.open_index == un.open_index) else {
        return false;
    };
    let before = skip.content_words(positive.answer.span_content(orig));
    let after = skip.content_words(negative.answer.span_content(un));
    before == after
}

/// Validates, drops trivial negatives, shuffles with `seed` and writes one
/// JSON sample per line, preceded by `header` when given.
pub fn emit_dataset(
    samples: &[QASample],
    path: &Path,
    seed: u64,
    skip: &SkipList,
    header: Option<&serde_json::Value>,
) -> Result<DatasetStats, CurationError> {
    for s in samples {
        s.validate()?;
    }
    let by_id: HashMap<&str, &QASample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut kept: Vec<&QASample> = Vec::with_capacity(samples.len());
    let mut filtered = 0;
    for s in samples {
        if s.polarity == SamplePolarity::Negative {
            let pos = positive_id_of(&s.id).and_then(|p| by_id.get(p.as_str()).copied());
            if pos.is_some_and(|p| is_trivial_negative(p, s, skip)) {
                filtered += 1;
                continue;
            }
        }
        kept.push(s);
    }
    kept.shuffle(&mut SeedStream::new(seed).rng(Stream::Shuffle, 0));

    let mut w = BufWriter::new(fs::File::create(path)?);
    if let Some(h) = header {
        writeln!(w, "{}", serde_json::json!({ "header": h }))?;
    }
    for s in &kept {
        writeln!(w, "{}", serde_json::to_string(s).expect("sample serializes"))?;
    }
    w.flush()?;

    let owned: Vec<QASample> = kept.into_iter().cloned().collect();
    let mut stats = DatasetStats::of(&owned);
    stats.n_filtered_trivial = filtered;
    Ok(stats)
}

/// Parses one dataset line and checks the polarity invariant.
pub fn parse_dataset_line(line: &str) -> Result<QASample, String> {
    let sample: QASample = serde_json::from_str(line).map_err(|e| e.to_string())?;
    sample.validate().map_err(|e| e.to_string())?;
    Ok(sample)
}

fn is_header(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .map(|v| v.as_object().is_some_and(|o| o.len() == 1 && o.contains_key("header")))
        .unwrap_or(false)
}

pub fn parse_dataset(text: &str) -> Result<Vec<QASample>, CurationError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && is_header(line)) {
            continue;
        }
        out.push(parse_dataset_line(line).map_err(|message| CurationError::Line { line: n + 1, message })?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<QASample>, CurationError> {
    parse_dataset(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn positive(id: &str, question: &str, answer: &str) -> QASample {
        let res = CurationResources::default();
        let kind = classify_answer_type(question, answer);
        QASample {
            id: id.into(),
            image_ref: None,
            question: question.into(),
            answer: annotate_positive(answer, kind, &res),
            polarity: SamplePolarity::Positive,
            hint: None,
        }
    }

    #[test]
    fn answer_types() {
        assert_eq!(classify_answer_type("Is there a dog?", "Yes"), AnswerType::BinaryYesNo);
        assert_eq!(classify_answer_type("Is it?", "no, it is not"), AnswerType::BinaryYesNo);
        assert_eq!(classify_answer_type("How many cars are there?", "3"), AnswerType::Counting);
        assert_eq!(classify_answer_type("How many?", "Three cars"), AnswerType::Counting);
        assert_eq!(
            classify_answer_type("Describe the region.", "A red plastic cup with a clear straw"),
            AnswerType::General
        );
        assert_eq!(classify_answer_type("Q", "Yesterday it rained"), AnswerType::General);
    }

    #[test]
    fn yes_flips_to_unconfident_no() {
        let pos = positive("s#0", "Is there a dog?", "Yes");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CurationConfig::default();
        let neg =
            generate_negative(&pos, AnswerType::BinaryYesNo, &cfg, &CurationResources::default(), &mut rng).unwrap();
        assert_eq!(neg.answer.to_string(), "<SPAN> No </UN>");
        assert_eq!(neg.question, "Is there a dog?");
        assert_eq!(neg.polarity, SamplePolarity::Negative);
        assert_eq!(neg.id, "s-neg#0");
    }

    #[test]
    fn count_draw_domain_excludes_original() {
        // exhaustive enumeration of the draw domain for n=3, r=3
        let domain: Vec<u64> = (0..=6).filter(|&m| m != 3).collect();
        let mut seen = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let m = perturb_count(3, 3, &mut rng);
            assert!(domain.contains(&m));
            seen.insert(m);
        }
        assert_eq!(seen.len(), domain.len());
        assert_eq!(perturb_count(0, 0, &mut rng), 1);
        let edge: HashSet<u64> = (0..500).map(|_| perturb_count(1, 3, &mut rng)).collect();
        assert_eq!(edge, [0, 2, 3, 4].into_iter().collect());
    }

    #[test]
    fn counting_negative_keeps_number_form() {
        let pos = positive("c#0", "How many cars?", "3");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let neg = generate_negative(
            &pos,
            AnswerType::Counting,
            &CurationConfig::default(),
            &CurationResources::default(),
            &mut rng,
        )
        .unwrap();
        let phrase = neg.substituted_phrase().unwrap();
        let m: u64 = phrase.parse().unwrap();
        assert!(m <= 6 && m != 3);
    }

    #[test]
    fn general_negative_substitutes_dictionary_phrase() {
        let pos = positive("g#0", "Describe the region.", "A red plastic cup with a clear straw");
        assert_eq!(pos.answer.spans().len(), 1);
        assert_eq!(pos.answer.span_phrase(&pos.answer.spans()[0]), "A red plastic cup");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = generate_negative(
            &pos,
            AnswerType::General,
            &CurationConfig::default(),
            &CurationResources::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(neg.answer.to_string(), "<SPAN> A green glass bottle </UN>");
    }

    struct Fixed;
    impl NegativeProvider for Fixed {
        fn propose(&self, _q: &str, _a: &AnnotatedText) -> Result<(String, String), String> {
            Ok(("a dog".into(), "a cat".into()))
        }
    }

    #[test]
    fn external_hook() {
        let pos = positive("e#0", "What is here?", "There is a dog on the couch");
        let cfg = CurationConfig { negative_hook: NegativeHook::External, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let res = CurationResources::default();
        assert!(matches!(
            generate_negative(&pos, AnswerType::General, &cfg, &res, &mut rng),
            Err(CurationError::ExternalHookUnavailable)
        ));
        let res = CurationResources { external: Some(&Fixed), ..Default::default() };
        let neg = generate_negative(&pos, AnswerType::General, &cfg, &res, &mut rng).unwrap();
        assert_eq!(neg.answer.to_string(), "There is <SPAN> a cat </UN>");
    }

    #[test]
    fn general_answer_without_spans_fails() {
        let pos = positive("n#0", "Why?", "it is in the image");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = generate_negative(
            &pos,
            AnswerType::General,
            &CurationConfig::default(),
            &CurationResources::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, CurationError::NoTaggableSpan { .. }));
    }

    #[test]
    fn skip_list_blocks_image_phrase() {
        let tagger = DictionaryTagger::new(["image", "picture"]);
        let a = tag_spans("it is in the image", &SkipList::default(), &tagger);
        assert!(a.spans().is_empty());
        assert_eq!(a.tokens().len(), 5);
    }

    #[test]
    fn dictionary_tagging_longest_match() {
        let tagger = DictionaryTagger::new(["red cup", "table", "cup"]);
        let a = tag_spans("a red cup on the table", &SkipList::default(), &tagger);
        assert_eq!(a.to_string(), "<SPAN> a red cup </CN> <SPAN> on the table </CN>");
        assert_eq!(a.spans().len(), 2);
        assert!(a.spans().iter().all(|s| s.polarity == Polarity::Confident));
        assert!(tag_spans("", &SkipList::default(), &tagger).is_empty());
    }

    #[test]
    fn skip_list_file_format() {
        let s = SkipList::from_text("foo\n\n  in   the image \n");
        assert_eq!(s.len(), 2);
        assert!(s.contains("in the image"));
        assert!(SkipList::default().contains("The picture"));
        assert!(SkipList::default().contains("theirs"));
    }

    #[test]
    fn hint_rate_boundaries() {
        let neg = QASample {
            id: "h-neg#0".into(),
            image_ref: None,
            question: "What is on the table?".into(),
            answer: AnnotatedText::parse_str("a <SPAN> fork </UN>").unwrap(),
            polarity: SamplePolarity::Negative,
            hint: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let always = inject_rewrite_hint(&neg, 1.0, &mut rng);
            assert_eq!(always.question, "What is on the table? (Hint: potential incorrect phrases → fork)");
            assert_eq!(always.hint, Some(vec!["fork".to_string()]));
            assert_eq!(inject_rewrite_hint(&neg, 0.0, &mut rng), neg);
        }
    }

    #[test]
    fn trivial_negatives_are_detected() {
        let pos = QASample {
            id: "t#0".into(),
            image_ref: None,
            question: "Who holds it?".into(),
            answer: AnnotatedText::parse_str("<SPAN> his hat </CN> is red").unwrap(),
            polarity: SamplePolarity::Positive,
            hint: None,
        };
        let mut neg = pos.clone();
        neg.id = negative_id(&pos.id);
        neg.polarity = SamplePolarity::Negative;
        neg.answer = AnnotatedText::parse_str("<SPAN> her hat </UN>").unwrap();
        assert!(is_trivial_negative(&pos, &neg, &SkipList::default()));
        neg.answer = AnnotatedText::parse_str("<SPAN> her shoe </UN>").unwrap();
        assert!(!is_trivial_negative(&pos, &neg, &SkipList::default()));
    }

    #[test]
    fn raw_corpus_errors_name_lines() {
        let text = "{\"id\":\"a\",\"image\":null,\"turns\":[]}\n\nnot json\n";
        match load_raw_corpus(text) {
            Err(CurationError::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
