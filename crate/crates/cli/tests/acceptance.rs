//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#[path = "../../core/tests/decode_traces.rs"]
mod decode_traces;
#[path = "../../core/tests/metrics_oracle.rs"]
mod metrics_oracle;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reverse_cli::commands::{decode_prompts, synthetic_prompt, BackendSource};
use reverse_cli::{cmd_sweep, serve, PromptRecord, RunConfig};
use reverse_core::backends::{RemoteConfig, ToyBackend};
use reverse_core::curation::{
    curate, emit_dataset, CurationConfig, CurationResources, RawSample, RawTurn, SamplePolarity, SkipList,
};
use reverse_core::decode::{decode_traced, BudgetPolicy, DecodeConfig};
use reverse_core::metrics::{bootstrap, evaluate};
use reverse_core::model::{
    batch_loss, gradient, masked_nll, train, unmasked_nll, vocabulary_for, ModelParams, TrainConfig, TrainingExample,
};
use reverse_core::protocol::{parse_spans, AnnotatedText, CONFIDENT_CLOSE, SPAN_OPEN};
use reverse_core::synthetic::{self, Scene};
use reverse_core::{DecodeOutcome, Vocabulary};

const SEED: u64 = 7;
const PROMPTS: usize = 200;
const VALIDATION_TAUS: [f64; 6] = [0.0003, 0.001, 0.003, 0.01, 0.03, 0.1];
const EFFICIENCY_TAU: f64 = 0.03;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ shared model

fn model() -> &'static Arc<ModelParams> {
    static MODEL: OnceLock<Arc<ModelParams>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = synthetic::training_corpus(&synthetic::scenes(200, SEED, 0), SEED);
        let vocab = vocabulary_for(&corpus);
        let examples: Vec<TrainingExample> = corpus.iter().map(|s| TrainingExample::from_sample(&vocab, s)).collect();
        let cfg =
            TrainConfig { learning_rate: 0.1, epochs: 2000, seed: SEED, init_scale: 0.1, context_window: 16, dim: 16 };
        let start = Instant::now();
        let report = train(vocab, &examples, &cfg).expect("synthetic training converges");
        println!(
            "      trained toy model in {:.1}s, loss {:.3} -> {:.3}",
            start.elapsed().as_secs_f64(),
            report.initial_loss(),
            report.final_loss()
        );
        Arc::new(report.params)
    })
}

struct Run {
    chair_s: f64,
    cover: f64,
    tokens: usize,
}

fn run_suite(scenes: &[Scene], cfg: &DecodeConfig) -> Run {
    let dict = synthetic::object_dictionary();
    let backend = ToyBackend::new(model().clone());
    let mut records = Vec::with_capacity(scenes.len());
    let mut tokens = 0;
    for (i, s) in scenes.iter().enumerate() {
        let o = decode_traced(&s.prompt(), &mut backend.clone(), cfg, i as u64, &mut Vec::new()).expect("toy decode");
        tokens += o.tokens_generated_total;
        records.push(s.eval_input(&o.clean_text).to_record(&dict));
    }
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let r = evaluate(&ids, &records, 1, SEED).expect("non-empty suite");
    Run { chair_s: r.chair_s, cover: r.cover.unwrap_or(0.0), tokens }
}

fn decode_config() -> DecodeConfig {
    DecodeConfig { seed: SEED, ..Default::default() }
}

// --------------------------------------------------------------- criteria

fn loss_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words = ["red", "cup", "on", "table", "green", "bottle"];
    let vocab = Vocabulary::new(words);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let params = ModelParams::random(vocab.clone(), 3, 4, 0.7, &mut rng);
        let mut tokens = Vec::new();
        for _ in 0..rng.random_range(1..5) {
            if rng.random_bool(0.5) {
                tokens.push(SPAN_OPEN.to_string());
                tokens.push(words[rng.random_range(0..words.len())].to_string());
                tokens.push(CONFIDENT_CLOSE.to_string());
            } else {
                tokens.push(words[rng.random_range(0..words.len())].to_string());
            }
        }
        let ex = TrainingExample::new(&vocab, &["describe"], &parse_spans(tokens).unwrap()).with_terminator(&vocab);
        worst = worst.max((masked_nll(&params, &ex) - unmasked_nll(&params, &ex)).abs());
    }
    ensure(worst <= 1e-12, format!("max |masked - unmasked| = {worst:e} over 50 corpora"))
}

fn analytic_loss() -> Check {
    let vocab = Vocabulary::new(["x"]);
    if vocab.len() != 10 {
        return Err(format!("vocabulary has {} tokens", vocab.len()));
    }
    let params = ModelParams::zeros(vocab.clone(), 2, 3);
    // four unmasked targets: x x <SPAN> </UN>
    let answer = AnnotatedText::parse_str("x x <SPAN> x x </UN>").unwrap();
    let ex = TrainingExample::new(&vocab, &["x"], &answer);
    let loss = masked_nll(&params, &ex);
    let expected = 4.0 * 10f64.ln();
    ensure((loss - expected).abs() <= 1e-9, format!("loss {loss:.12} vs 4 ln 10 = {expected:.12}"))
}

fn gradient_check() -> Check {
    let vocab: Vocabulary = serde_json::from_str(r#"["<pad>","<eos>","<SPAN>","</CN>","</UN>"]"#).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in [11, 12, 13, 14] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::random(vocab.clone(), 2, 3, 0.8, &mut rng);
        let batch: Vec<TrainingExample> = (0..4)
            .map(|_| {
                let n_out = rng.random_range(1..6);
                TrainingExample {
                    input: (0..rng.random_range(0..3)).map(|_| rng.random_range(0..5)).collect(),
                    targets: (0..n_out).map(|_| rng.random_range(0..5)).collect(),
                    mask: (0..n_out).map(|_| rng.random_bool(0.7)).collect(),
                }
            })
            .collect();
        let analytic: Vec<f64> = gradient(&params, &batch).iter().collect();
        let mut p = params.clone();
        for (i, a) in analytic.into_iter().enumerate() {
            let orig = p.get(i);
            p.set(i, orig + h);
            let up = batch_loss(&p, &batch);
            p.set(i, orig - h);
            let down = batch_loss(&p, &batch);
            p.set(i, orig);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e} over 4 seeds, V=5 d=3 c=2"))
}

fn run_table(table: &[(&str, fn())]) -> Result<usize, String> {
    let failed: Vec<&str> =
        table.iter().filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err()).map(|(name, _)| *name).collect();
    if failed.is_empty() {
        Ok(table.len())
    } else {
        Err(failed.join(", "))
    }
}

fn trace_suite() -> Check {
    match run_table(decode_traces::SCENARIOS) {
        Ok(n) if n >= 8 => Ok(format!("{n} scripted scenarios reproduce their traces")),
        Ok(n) => Err(format!("only {n} scenarios")),
        Err(names) => Err(format!("mismatched: {names}")),
    }
}

fn metric_oracle() -> Check {
    match run_table(metrics_oracle::SCENARIOS) {
        Ok(n) => Ok(format!("{n} oracle checks match hand-computed values")),
        Err(names) => Err(format!("mismatched: {names}")),
    }
}

fn hallucination_reduction() -> Check {
    let validation = synthetic::scenes(PROMPTS, SEED, 1);
    let base_cfg = decode_config().baseline();
    let base_val = run_suite(&validation, &base_cfg);
    let mut best: Option<(f64, f64)> = None;
    for tau in VALIDATION_TAUS {
        let r = run_suite(&validation, &DecodeConfig { tau, ..decode_config() });
        if r.cover >= 0.8 * base_val.cover && best.is_none_or(|(_, c)| r.chair_s < c) {
            best = Some((tau, r.chair_s));
        }
    }
    let Some((tau, _)) = best else {
        return Err("no threshold keeps coverage on the validation split".into());
    };
    let test = synthetic::scenes(PROMPTS, SEED, 2);
    let base = run_suite(&test, &base_cfg);
    let rev = run_suite(&test, &DecodeConfig { tau, ..decode_config() });
    ensure(
        rev.chair_s <= 0.5 * base.chair_s && rev.cover >= 0.8 * base.cover && base.chair_s > 0.0,
        format!(
            "tau {tau}: CHAIRs {:.3} vs baseline {:.3}, Cover {:.3} vs baseline {:.3}",
            rev.chair_s, base.chair_s, rev.cover, base.cover
        ),
    )
}

fn efficiency_trend() -> Check {
    let test = synthetic::scenes(PROMPTS, SEED, 2);
    let rows: Vec<(usize, Run)> = [0usize, 5, 10, 20, 50]
        .into_iter()
        .map(|n| {
            let cfg = DecodeConfig {
                tau: EFFICIENCY_TAU,
                max_total_corrections: n,
                max_local_attempts: n.min(10),
                on_budget_exhausted: BudgetPolicy::Continue,
                ..decode_config()
            };
            (n, run_suite(&test, &cfg))
        })
        .collect();
    let tokens_ok = rows.windows(2).all(|w| w[1].1.tokens >= w[0].1.tokens);
    let chair_ok = rows.windows(2).all(|w| w[1].1.chair_s <= w[0].1.chair_s);
    let base = rows[0].1.tokens as f64;
    let detail = rows
        .iter()
        .map(|(n, r)| format!("N={n}: {:.2}x CHAIRs {:.3}", r.tokens as f64 / base, r.chair_s))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(tokens_ok && chair_ok, detail)
}

fn threshold_tradeoff() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let params = dir.path().join("params.json");
    model().save(&params).map_err(|e| e.to_string())?;
    let prompts = dir.path().join("prompts.jsonl");
    let lines: String = synthetic::scenes(PROMPTS, SEED, 2)
        .iter()
        .map(|s| serde_json::to_string(&synthetic_prompt(s)).unwrap() + "\n")
        .collect();
    fs::write(&prompts, lines).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig { seed: Some(SEED), ..Default::default() };
    cfg.paths.input = Some(prompts);
    cfg.paths.params = Some(params);
    cfg.paths.output = Some(dir.path().join("sweep.jsonl"));
    cfg.eval.bootstrap_rounds = 10;
    cfg.eval.objects = synthetic::MAIN_OBJECTS.iter().chain(&synthetic::SCENE_OBJECTS).map(|s| s.to_string()).collect();
    cfg.sweep.taus = vec![0.03, 0.003, 0.0003];
    let rows = cmd_sweep(&cfg.finalize().map_err(|e| e.to_string())?).map_err(|e| format!("{e:#}"))?;
    let chair = |r: &reverse_cli::SweepRow| r.chair.unwrap_or(0.0);
    let cover = |r: &reverse_cli::SweepRow| r.cover.unwrap_or(0.0);
    let ok = rows.len() == 3 && rows.windows(2).all(|w| chair(&w[1]) <= chair(&w[0]) && cover(&w[1]) <= cover(&w[0]));
    let detail = rows
        .iter()
        .map(|r| format!("tau {}: CHAIR {:.4} Cover {:.4}", r.tau, chair(r), cover(r)))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(ok, detail)
}

fn bootstrap_determinism() -> Check {
    let constant = vec![0.4; 200];
    let c = bootstrap(&constant, 100, 3).map_err(|e| e.to_string())?;
    let balanced: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
    let a = bootstrap(&balanced, 100, 5).map_err(|e| e.to_string())?;
    let b = bootstrap(&balanced, 100, 5).map_err(|e| e.to_string())?;
    ensure(
        a == b && c.ci_high - c.ci_low == 0.0 && (a.mean - 0.5).abs() <= 0.1,
        format!("repeat equal {}, constant CI width {}, balanced mean {:.4}", a == b, c.ci_high - c.ci_low, a.mean),
    )
}

fn loopback_equivalence() -> Check {
    let server = serve::start(model().clone(), "127.0.0.1:0").map_err(|e| e.to_string())?;
    let prompts: Vec<PromptRecord> = synthetic::scenes(40, SEED, 2).iter().map(synthetic_prompt).collect();
    let dcfg = decode_config();
    let local = BackendSource::Toy(model().clone());
    let vocab = model().vocab().clone();
    let remote = BackendSource::Remote(vocab, RemoteConfig { endpoint: server.endpoint(), ..Default::default() });
    let render = |source: &BackendSource| -> Result<Vec<String>, String> {
        decode_prompts(source, &prompts, &dcfg, false)
            .into_iter()
            .map(|r| r.map(|(o, trace): (DecodeOutcome, _)| serde_json::to_string(&(o, trace)).unwrap()))
            .collect()
    };
    let a = render(&local)?;
    let b = render(&remote)?;
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    ensure(a == b, format!("{same}/{} outcomes and traces byte-identical over HTTP", a.len()))
}

fn curation_determinism() -> Check {
    let raw = |i: usize, q: &str, a: &str| RawSample {
        id: format!("c{i}"),
        image: None,
        turns: vec![RawTurn { question: q.into(), answer: a.into() }],
    };
    let corpus: Vec<RawSample> = (0..10_000)
        .map(|i| match i % 3 {
            0 => raw(i, "Is there a dog?", "Yes"),
            1 => raw(i, "How many cars are there?", "3"),
            _ => raw(i, "Describe the region.", "A red plastic cup with a clear straw"),
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let emit = |name: &str| -> Result<(Vec<u8>, Vec<reverse_core::curation::QASample>), String> {
        let out = curate(&corpus, &CurationResources::default(), &CurationConfig { seed: SEED, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let path = dir.path().join(name);
        emit_dataset(&out.samples, &path, SEED, &SkipList::default(), None).map_err(|e| e.to_string())?;
        Ok((fs::read(&path).map_err(|e| e.to_string())?, out.samples))
    };
    let (a, samples) = emit("a.jsonl")?;
    let (b, _) = emit("b.jsonl")?;
    let negatives: Vec<_> = samples.iter().filter(|s| s.polarity == SamplePolarity::Negative).collect();
    let fraction = negatives.iter().filter(|s| s.hint.is_some()).count() as f64 / negatives.len() as f64;
    let terminal =
        negatives.iter().all(|s| s.validate().is_ok() && s.answer.tokens().last().map(String::as_str) == Some("</UN>"));
    ensure(
        a == b && negatives.len() >= 10_000 && (fraction - 0.2).abs() <= 0.02 && terminal,
        format!(
            "byte-identical {}, {} negatives, hint fraction {fraction:.4}, </UN>-terminal {terminal}",
            a == b,
            negatives.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("loss equivalence", loss_equivalence),
        ("analytic loss value", analytic_loss),
        ("gradient check", gradient_check),
        ("state-machine trace suite", trace_suite),
        ("metric oracle", metric_oracle),
        ("end-to-end hallucination reduction", hallucination_reduction),
        ("efficiency trend", efficiency_trend),
        ("threshold trade-off", threshold_tradeoff),
        ("bootstrap determinism", bootstrap_determinism),
        ("loopback protocol equivalence", loopback_equivalence),
        ("curation determinism and composition", curation_determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
