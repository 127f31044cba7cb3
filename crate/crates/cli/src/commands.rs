use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _, Result};
use rayon::prelude::*;
use reverse_core::backends::{RemoteBackend, RemoteConfig};
use reverse_core::curation::{
    curate, emit_dataset, load_raw_corpus, parse_dataset, CurationError, CurationResources, DatasetStats, SkipList,
    SubstitutionDictionary,
};
use reverse_core::decode::{decode_open_ended_traced, decode_traced, DecodeConfig, TraceEvent};
use reverse_core::metrics::{evaluate, parse_eval_line, render_table, EvalInput, MetricReport, ObjectDictionary};
use reverse_core::model::{train, vocabulary_for, ModelParams, TrainingExample};
use reverse_core::synthetic;
use reverse_core::{DecodeOutcome, DistributionBackend, Prompt, ToyBackend, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{writable, RunConfig};
use crate::serve;

/// Error carrying a specific process exit code.
#[derive(Debug)]
pub struct ExitError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for ExitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitError {}

/// Exit code for schema violations in input files.
pub const EXIT_SCHEMA: u8 = 2;

fn schema(e: CurationError) -> anyhow::Error {
    match e {
        CurationError::Line { .. } => anyhow!(ExitError { code: EXIT_SCHEMA, message: e.to_string() }),
        other => other.into(),
    }
}

/// Input record for `decode` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub annotated_objects: Vec<String>,
    #[serde(default)]
    pub hallucinatory_targets: Option<Vec<String>>,
}

impl PromptRecord {
    pub fn prompt(&self) -> Prompt {
        Prompt::new(&self.question, self.image.as_deref())
    }
}

/// One line of `decode` output; also a valid `eval` input line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLine {
    pub id: String,
    pub caption: String,
    pub annotated_objects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucinatory_targets: Option<Vec<String>>,
    pub outcome: DecodeOutcome,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    event: &'a TraceEvent,
}

fn is_header(v: &Value) -> bool {
    v.as_object().is_some_and(|o| o.len() == 1 && o.contains_key("header"))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 && serde_json::from_str::<Value>(line).is_ok_and(|v| is_header(&v)) {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| ExitError {
            code: EXIT_SCHEMA,
            message: format!("{}: line {}: {e}", path.display(), n + 1),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    read_jsonl(path)
}

fn header_line(cfg: &RunConfig) -> String {
    json!({ "header": cfg.header() }).to_string()
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    writable(path)?;
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- synth

pub struct SynthSummary {
    pub training_samples: usize,
    pub prompts: usize,
}

/// Writes the synthetic training dataset and a held-out prompt file.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let seed = cfg.seed();
    let out = cfg.output()?;
    let prompts_path = cfg.paths.prompts.as_deref().context("a prompts path is required (--prompts)")?;
    writable(prompts_path)?;
    let train_scenes = synthetic::scenes(cfg.synth.train_scenes, seed, 0);
    let corpus = synthetic::training_corpus(&train_scenes, seed);
    let stats = emit_dataset(&corpus, out, seed, &SkipList::default(), Some(&cfg.header()))?;
    let scenes = synthetic::scenes(cfg.synth.prompt_scenes, seed, cfg.synth.split);
    let lines = scenes.iter().map(|s| serde_json::to_string(&synthetic_prompt(s)).expect("prompt serializes"));
    write_lines(prompts_path, std::iter::once(header_line(cfg)).chain(lines))?;
    Ok(SynthSummary { training_samples: stats.n_turns, prompts: scenes.len() })
}

pub fn synthetic_prompt(scene: &synthetic::Scene) -> PromptRecord {
    PromptRecord {
        id: scene.id.clone(),
        question: synthetic::QUESTION.into(),
        image: Some(scene.image_ref()),
        annotated_objects: scene.objects.clone(),
        hallucinatory_targets: Some(synthetic::hallucinatory_targets()),
    }
}

// --------------------------------------------------------------- curate

pub fn cmd_curate(cfg: &RunConfig) -> Result<DatasetStats> {
    let input = cfg.input()?;
    let out = cfg.output()?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let corpus = load_raw_corpus(&text).map_err(schema)?;
    let mut resources = CurationResources::default();
    if let Some(p) = &cfg.paths.skip_list {
        resources.skip_list = SkipList::load(p)?;
    }
    if let Some(p) = &cfg.paths.dictionary {
        resources.dictionary = SubstitutionDictionary::load(p)?;
        resources.tagger = Box::new(resources.dictionary.tagger());
    }
    let curated = curate(&corpus, &resources, &cfg.curation)?;
    for (id, reason) in &curated.skipped {
        eprintln!("no negative for {id}: {reason}");
    }
    let stats = emit_dataset(&curated.samples, out, cfg.seed(), &resources.skip_list, Some(&cfg.header()))?;
    if let Some(p) = &cfg.paths.stats {
        writable(p)?;
        let body = json!({ "header": cfg.header(), "stats": stats });
        fs::write(p, serde_json::to_string_pretty(&body)?)?;
    }
    Ok(stats)
}

// ---------------------------------------------------------------- train

pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub params: ModelParams,
}

/// Trains on a dataset and writes the parameters, with the loss trajectory
/// and config header alongside them in the same JSON object.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let input = cfg.input()?;
    let out = cfg.output()?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let samples = parse_dataset(&text).map_err(schema)?;
    if samples.is_empty() {
        bail!("{} holds no samples", input.display());
    }
    let vocab = vocabulary_for(&samples);
    let examples: Vec<TrainingExample> = samples.iter().map(|s| TrainingExample::from_sample(&vocab, s)).collect();
    let report = train(vocab, &examples, &cfg.train)?;
    let mut file: Value = serde_json::from_str(&report.params.to_json())?;
    let obj = file.as_object_mut().expect("params serialize to an object");
    obj.insert("header".into(), cfg.header());
    obj.insert("losses".into(), json!(report.losses));
    fs::write(out, serde_json::to_string(&file)?)?;
    Ok(TrainSummary { losses: report.losses, params: report.params })
}

// --------------------------------------------------------------- decode

/// Where next-token distributions come from.
#[derive(Clone)]
pub enum BackendSource {
    Toy(Arc<ModelParams>),
    Remote(Vocabulary, RemoteConfig),
}

impl BackendSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if let Some(remote) = &cfg.remote {
            let probe = RemoteBackend::connect(remote.clone())
                .with_context(|| format!("fetching vocabulary from {}", remote.endpoint))?;
            return Ok(BackendSource::Remote(probe.vocabulary().clone(), remote.clone()));
        }
        let path =
            cfg.paths.params.as_deref().context("a params file (--params) or endpoint (--endpoint) is required")?;
        let params = ModelParams::load(path).with_context(|| format!("loading {}", path.display()))?;
        Ok(BackendSource::Toy(Arc::new(params)))
    }

    fn run(
        &self,
        prompt: &Prompt,
        dcfg: &DecodeConfig,
        open_ended: bool,
        index: u64,
    ) -> Result<(DecodeOutcome, Vec<TraceEvent>), String> {
        let mut trace = Vec::new();
        let step = |b: &mut dyn DistributionBackend, trace: &mut Vec<TraceEvent>| {
            if open_ended {
                decode_open_ended_traced(prompt, b, dcfg, index, trace)
            } else {
                decode_traced(prompt, b, dcfg, index, trace)
            }
        };
        let result = match self {
            BackendSource::Toy(p) => step(&mut ToyBackend::new(p.clone()), &mut trace),
            BackendSource::Remote(v, c) => step(&mut RemoteBackend::new(v.clone(), c.clone()), &mut trace),
        };
        result.map(|o| (o, trace)).map_err(|e| e.to_string())
    }
}

pub type PromptResult = Result<(DecodeOutcome, Vec<TraceEvent>), String>;

/// Decodes every prompt in parallel; results keep input order.
pub fn decode_prompts(
    source: &BackendSource,
    prompts: &[PromptRecord],
    dcfg: &DecodeConfig,
    open_ended: bool,
) -> Vec<PromptResult> {
    prompts.par_iter().enumerate().map(|(i, p)| source.run(&p.prompt(), dcfg, open_ended, i as u64)).collect()
}

pub struct DecodeSummary {
    pub results: Vec<PromptResult>,
    pub failed: usize,
}

pub fn outcome_line(record: &PromptRecord, outcome: &DecodeOutcome) -> OutcomeLine {
    OutcomeLine {
        id: record.id.clone(),
        caption: outcome.clean_text.clone(),
        annotated_objects: record.annotated_objects.clone(),
        hallucinatory_targets: record.hallucinatory_targets.clone(),
        outcome: outcome.clone(),
    }
}

pub fn cmd_decode(cfg: &RunConfig) -> Result<DecodeSummary> {
    let prompts = load_prompts(cfg.input()?)?;
    let out = cfg.output()?;
    if let Some(t) = &cfg.paths.trace {
        writable(t)?;
    }
    let dcfg = cfg.decode_config();
    dcfg.validate()?;
    let source = BackendSource::from_config(cfg)?;
    let results = decode_prompts(&source, &prompts, &dcfg, cfg.open_ended);

    let mut failed = 0;
    let mut lines = vec![header_line(cfg)];
    for (record, result) in prompts.iter().zip(&results) {
        match result {
            Ok((outcome, _)) => lines.push(serde_json::to_string(&outcome_line(record, outcome))?),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", record.id);
                lines.push(json!({ "id": record.id, "error": e }).to_string());
            }
        }
    }
    write_lines(out, lines)?;
    if let Some(t) = &cfg.paths.trace {
        let mut lines = vec![header_line(cfg)];
        for (record, result) in prompts.iter().zip(&results) {
            if let Ok((_, trace)) = result {
                for event in trace {
                    lines.push(serde_json::to_string(&TraceLine { id: &record.id, event })?);
                }
            }
        }
        write_lines(t, lines)?;
    }
    Ok(DecodeSummary { results, failed })
}

// ----------------------------------------------------------------- eval

/// Extractor over `objects`, or over every object named in `inputs`.
pub fn extractor_for(objects: &[String], inputs: &[EvalInput]) -> ObjectDictionary {
    if !objects.is_empty() {
        return ObjectDictionary::new(objects);
    }
    let mut all = BTreeSet::new();
    for i in inputs {
        all.extend(i.annotated_objects.iter().cloned());
        all.extend(i.hallucinatory_targets.iter().flatten().cloned());
    }
    ObjectDictionary::new(all)
}

pub fn evaluate_inputs(inputs: &[EvalInput], objects: &[String], rounds: usize, seed: u64) -> Result<MetricReport> {
    let dict = extractor_for(objects, inputs);
    let ids: Vec<String> = inputs.iter().map(|i| i.id.clone()).collect();
    let records: Vec<_> = inputs.iter().map(|i| i.to_record(&dict)).collect();
    Ok(evaluate(&ids, &records, rounds, seed)?)
}

/// Reads an eval corpus, skipping the header and failed-decode lines.
pub fn load_eval_inputs(path: &Path) -> Result<Vec<EvalInput>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(v) = serde_json::from_str::<Value>(line) {
            if (n == 0 && is_header(&v)) || v.get("error").is_some() {
                continue;
            }
        }
        let input = parse_eval_line(line).map_err(|e| ExitError {
            code: EXIT_SCHEMA,
            message: format!("{}: line {}: {e}", path.display(), n + 1),
        })?;
        out.push(input);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let inputs = load_eval_inputs(cfg.input()?)?;
    let report = evaluate_inputs(&inputs, &cfg.eval.objects, cfg.eval.bootstrap_rounds, cfg.seed())?;
    if let Some(out) = &cfg.paths.output {
        writable(out)?;
        let body = json!({ "header": cfg.header(), "report": report });
        fs::write(out, serde_json::to_string_pretty(&body)?)?;
    }
    Ok(report)
}

pub fn render_report(report: &MetricReport) -> String {
    render_table(report)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub chair: Option<f64>,
    pub cover: Option<f64>,
    pub chair_i: Option<f64>,
    pub chair_s: f64,
    pub tokens_generated_total: usize,
    pub failed: usize,
}

/// Decode and evaluate the prompt file once per threshold.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let prompts = load_prompts(cfg.input()?)?;
    if let Some(out) = &cfg.paths.output {
        writable(out)?;
    }
    let source = BackendSource::from_config(cfg)?;
    let mut rows = Vec::with_capacity(cfg.sweep.taus.len());
    for &tau in &cfg.sweep.taus {
        let dcfg = DecodeConfig { tau, ..cfg.decode.clone() };
        dcfg.validate()?;
        let results = decode_prompts(&source, &prompts, &dcfg, cfg.open_ended);
        let mut inputs = Vec::with_capacity(prompts.len());
        let mut tokens = 0;
        let mut failed = 0;
        for (record, result) in prompts.iter().zip(&results) {
            match result {
                Ok((o, _)) => {
                    tokens += o.tokens_generated_total;
                    let line = outcome_line(record, o);
                    inputs.push(EvalInput {
                        id: line.id,
                        caption: line.caption,
                        annotated_objects: line.annotated_objects,
                        hallucinatory_targets: line.hallucinatory_targets,
                    });
                }
                Err(e) => {
                    failed += 1;
                    eprintln!("tau {tau}: {}: {e}", record.id);
                }
            }
        }
        let report = evaluate_inputs(&inputs, &cfg.eval.objects, cfg.eval.bootstrap_rounds, cfg.seed())?;
        rows.push(SweepRow {
            tau,
            chair: report.chair,
            cover: report.cover,
            chair_i: report.chair_i,
            chair_s: report.chair_s,
            tokens_generated_total: tokens,
            failed,
        });
    }
    if let Some(out) = &cfg.paths.output {
        let lines = rows.iter().map(|r| serde_json::to_string(r).expect("row serializes"));
        write_lines(out, std::iter::once(header_line(cfg)).chain(lines))?;
    }
    Ok(rows)
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = format!("{:>8} {:>8} {:>8} {:>8} {:>8}\n", "tau", "chair", "cover", "chair_s", "tokens");
    for r in rows {
        out.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>8.4} {:>8}\n",
            r.tau,
            fmt(r.chair),
            fmt(r.cover),
            r.chair_s,
            r.tokens_generated_total
        ));
    }
    out
}

// ---------------------------------------------------------------- serve

pub fn cmd_serve(cfg: &RunConfig, bind: &str) -> Result<()> {
    let path = cfg.paths.params.as_deref().context("a params file is required (--params)")?;
    let params = ModelParams::load(path).with_context(|| format!("loading {}", path.display()))?;
    let addr: std::net::SocketAddr = bind.parse().with_context(|| format!("bad bind address {bind}"))?;
    if !addr.ip().is_loopback() {
        bail!("refusing to bind non-loopback address {addr}");
    }
    serve::run(Arc::new(params), bind)
}
