//! Caption hallucination metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::DecodeOutcome;
use crate::protocol::tokenize;
use crate::rng::{SeedStream, Stream};

pub type ObjectSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("caption mentions no objects")]
    EmptyMention,
    #[error("record has no annotated objects")]
    EmptyAnnotation,
    #[error("no record mentions any object")]
    AllEmptyMentions,
    #[error("empty input")]
    EmptyInput,
    #[error("bootstrap needs at least one round")]
    NoRounds,
    #[error("{0} outcomes against {1} baseline outcomes")]
    LengthMismatch(usize, usize),
    #[error("baseline generated no tokens")]
    EmptyBaseline,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

fn overlap(a: &ObjectSet, b: &ObjectSet) -> usize {
    a.intersection(b).count()
}

/// `1 - |R' ∩ A| / |R'|`.
pub fn chair(mentioned: &ObjectSet, annotated: &ObjectSet) -> Result<f64, MetricError> {
    if mentioned.is_empty() {
        return Err(MetricError::EmptyMention);
    }
    Ok((mentioned.len() - overlap(mentioned, annotated)) as f64 / mentioned.len() as f64)
}

/// `|R' ∩ A| / |A|`.
pub fn cover(mentioned: &ObjectSet, annotated: &ObjectSet) -> Result<f64, MetricError> {
    if annotated.is_empty() {
        return Err(MetricError::EmptyAnnotation);
    }
    Ok(overlap(mentioned, annotated) as f64 / annotated.len() as f64)
}

/// 1 when any mentioned object is unannotated; 0 for empty mentions.
pub fn hal(mentioned: &ObjectSet, annotated: &ObjectSet) -> u8 {
    match chair(mentioned, annotated) {
        Ok(c) if c != 0.0 => 1,
        _ => 0,
    }
}

/// `|R' ∩ H| / |R'|`.
pub fn cog(mentioned: &ObjectSet, targets: &ObjectSet) -> Result<f64, MetricError> {
    if mentioned.is_empty() {
        return Err(MetricError::EmptyMention);
    }
    Ok(overlap(mentioned, targets) as f64 / mentioned.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub mentioned: ObjectSet,
    pub annotated: ObjectSet,
    pub hallucinatory_targets: Option<ObjectSet>,
}

impl CaptionRecord {
    pub fn new<I, J, S, T>(mentioned: I, annotated: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        CaptionRecord {
            mentioned: mentioned.into_iter().map(Into::into).collect(),
            annotated: annotated.into_iter().map(Into::into).collect(),
            hallucinatory_targets: None,
        }
    }

    pub fn with_targets<I: IntoIterator<Item = S>, S: Into<String>>(mut self, targets: I) -> Self {
        self.hallucinatory_targets = Some(targets.into_iter().map(Into::into).collect());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub chair_i: f64,
    pub chair_s: f64,
}

/// Instance-level CHAIR over all mentions and the fraction of captions with
/// any hallucination.
pub fn aggregate(records: &[CaptionRecord]) -> Result<Aggregate, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mentions: usize = records.iter().map(|r| r.mentioned.len()).sum();
    if mentions == 0 {
        return Err(MetricError::AllEmptyMentions);
    }
    let wrong: usize = records.iter().map(|r| r.mentioned.difference(&r.annotated).count()).sum();
    let hallucinating: usize = records.iter().map(|r| usize::from(hal(&r.mentioned, &r.annotated))).sum();
    Ok(Aggregate { chair_i: wrong as f64 / mentions as f64, chair_s: hallucinating as f64 / records.len() as f64 })
}

/// Turns caption text into a set of canonical object names.
pub trait ObjectExtractor {
    fn extract(&self, caption: &str) -> ObjectSet;
    fn normalize(&self, object: &str) -> String;
}

/// Longest-match lookup over a list of object names. Plural surface forms
/// are derived from each entry and map back to it.
#[derive(Debug, Clone, Default)]
pub struct ObjectDictionary {
    forms: HashMap<Vec<String>, String>,
    longest: usize,
}

fn plurals(word: &str) -> Vec<String> {
    let mut out = vec![format!("{word}s")];
    if ["s", "x", "z", "ch", "sh"].iter().any(|e| word.ends_with(e)) {
        out.push(format!("{word}es"));
    }
    if let Some(stem) = word.strip_suffix('y') {
        if !stem.ends_with(['a', 'e', 'i', 'o', 'u']) {
            out.push(format!("{stem}ies"));
        }
    }
    out
}

impl ObjectDictionary {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(objects: I) -> Self {
        let mut dict = ObjectDictionary::default();
        for o in objects {
            let words: Vec<String> = o.as_ref().split_whitespace().map(str::to_lowercase).collect();
            let Some(last) = words.last().cloned() else { continue };
            let canonical = words.join(" ");
            for p in plurals(&last) {
                let mut form = words.clone();
                *form.last_mut().expect("non-empty") = p;
                dict.forms.entry(form).or_insert_with(|| canonical.clone());
            }
            dict.longest = dict.longest.max(words.len());
            dict.forms.insert(words, canonical);
        }
        dict
    }

    /// Adds an irregular plural.
    pub fn with_plural(mut self, plural: &str, singular: &str) -> Self {
        let form: Vec<String> = plural.split_whitespace().map(str::to_lowercase).collect();
        self.longest = self.longest.max(form.len());
        self.forms.insert(form, singular.to_lowercase());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }
}

impl ObjectExtractor for ObjectDictionary {
    fn extract(&self, caption: &str) -> ObjectSet {
        let words: Vec<String> = tokenize(caption).iter().map(|t| t.to_lowercase()).collect();
        let mut found = ObjectSet::new();
        let mut i = 0;
        while i < words.len() {
            let hit = (1..=self.longest.min(words.len() - i))
                .rev()
                .find_map(|len| self.forms.get(&words[i..i + len]).map(|c| (len, c)));
            match hit {
                Some((len, canonical)) => {
                    found.insert(canonical.clone());
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }

    fn normalize(&self, object: &str) -> String {
        let words: Vec<String> = object.split_whitespace().map(str::to_lowercase).collect();
        self.forms.get(&words).cloned().unwrap_or_else(|| words.join(" "))
    }
}

pub fn extract_objects(caption: &str, dictionary: &dyn ObjectExtractor) -> ObjectSet {
    dictionary.extract(caption)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean of `rounds` resampled means with a 95% percentile interval.
pub fn bootstrap(values: &[f64], rounds: usize, seed: u64) -> Result<BootstrapEstimate, MetricError> {
    bootstrap_stream(values, rounds, seed, 0)
}

fn bootstrap_stream(values: &[f64], rounds: usize, seed: u64, index: u64) -> Result<BootstrapEstimate, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if rounds == 0 {
        return Err(MetricError::NoRounds);
    }
    let mut rng = SeedStream::new(seed).rng(Stream::Bootstrap, index);
    let n = values.len();
    let mut means: Vec<f64> =
        (0..rounds).map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    let mean = means.iter().sum::<f64>() / rounds as f64;
    means.sort_by(f64::total_cmp);
    Ok(BootstrapEstimate { mean, ci_low: percentile(&means, 0.025), ci_high: percentile(&means, 0.975) })
}

/// Engine tokens drawn relative to a baseline run over the same prompts.
pub fn token_ratio(outcomes: &[DecodeOutcome], baseline: &[DecodeOutcome]) -> Result<f64, MetricError> {
    if outcomes.len() != baseline.len() {
        return Err(MetricError::LengthMismatch(outcomes.len(), baseline.len()));
    }
    let total = |o: &[DecodeOutcome]| o.iter().map(|x| x.tokens_generated_total).sum::<usize>() as f64;
    let base = total(baseline);
    if base == 0.0 {
        return Err(MetricError::EmptyBaseline);
    }
    Ok(total(outcomes) / base)
}

/// Per-caption values; `None` where the metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub chair: Option<f64>,
    pub cover: Option<f64>,
    pub hal: u8,
    pub cog: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_records: usize,
    pub chair: Option<f64>,
    pub cover: Option<f64>,
    pub hal: f64,
    pub cog: Option<f64>,
    pub chair_i: Option<f64>,
    pub chair_s: f64,
    pub bootstrap: BTreeMap<String, BootstrapEstimate>,
    pub records: Vec<RecordMetrics>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-caption metrics, their means with bootstrap intervals, and the
/// corpus aggregates. Undefined per-caption values are left out of means.
pub fn evaluate(
    ids: &[String],
    records: &[CaptionRecord],
    rounds: usize,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let per: Vec<RecordMetrics> = records
        .iter()
        .enumerate()
        .map(|(i, r)| RecordMetrics {
            id: ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
            chair: chair(&r.mentioned, &r.annotated).ok(),
            cover: cover(&r.mentioned, &r.annotated).ok(),
            hal: hal(&r.mentioned, &r.annotated),
            cog: r.hallucinatory_targets.as_ref().and_then(|h| cog(&r.mentioned, h).ok()),
        })
        .collect();
    let column = |f: fn(&RecordMetrics) -> Option<f64>| per.iter().filter_map(f).collect::<Vec<f64>>();
    let columns: [(&str, Vec<f64>); 4] = [
        ("chair", column(|r| r.chair)),
        ("cover", column(|r| r.cover)),
        ("hal", column(|r| Some(f64::from(r.hal)))),
        ("cog", column(|r| r.cog)),
    ];
    let mut boot = BTreeMap::new();
    for (i, (name, values)) in columns.iter().enumerate() {
        if !values.is_empty() {
            boot.insert(name.to_string(), bootstrap_stream(values, rounds, seed, i as u64)?);
        }
    }
    let agg = aggregate(records);
    Ok(MetricReport {
        n_records: records.len(),
        chair: mean(&columns[0].1),
        cover: mean(&columns[1].1),
        hal: mean(&columns[2].1).unwrap_or(0.0),
        cog: mean(&columns[3].1),
        chair_i: agg.as_ref().ok().map(|a| a.chair_i),
        chair_s: agg.map(|a| a.chair_s).unwrap_or(0.0),
        bootstrap: boot,
        records: per,
    })
}

/// Aligned-column rendering of a report.
pub fn render_table(report: &MetricReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>8}", "metric", "value", "ci_low", "ci_high");
    let rows: [(&str, Option<f64>); 6] = [
        ("chair", report.chair),
        ("cover", report.cover),
        ("hal", Some(report.hal)),
        ("cog", report.cog),
        ("chair_i", report.chair_i),
        ("chair_s", Some(report.chair_s)),
    ];
    for (name, value) in rows {
        let b = report.bootstrap.get(name);
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>8} {:>8}",
            name,
            fmt(value),
            fmt(b.map(|b| b.ci_low)),
            fmt(b.map(|b| b.ci_high))
        );
    }
    out
}

/// Evaluation corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub id: String,
    pub caption: String,
    pub annotated_objects: Vec<String>,
    #[serde(default)]
    pub hallucinatory_targets: Option<Vec<String>>,
}

impl EvalInput {
    pub fn to_record(&self, extractor: &dyn ObjectExtractor) -> CaptionRecord {
        CaptionRecord {
            mentioned: extractor.extract(&self.caption),
            annotated: self.annotated_objects.iter().map(|o| extractor.normalize(o)).collect(),
            hallucinatory_targets: self
                .hallucinatory_targets
                .as_ref()
                .map(|h| h.iter().map(|o| extractor.normalize(o)).collect()),
        }
    }
}

pub fn parse_eval_line(line: &str) -> Result<EvalInput, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

pub fn parse_eval_corpus(text: &str) -> Result<Vec<EvalInput>, MetricError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 && line.contains("\"header\"") && parse_eval_line(line).is_err() {
            continue;
        }
        out.push(parse_eval_line(line).map_err(|message| MetricError::Line { line: n + 1, message })?);
    }
    Ok(out)
}
