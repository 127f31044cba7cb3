use reverse_core::metrics::{
    aggregate, bootstrap, chair, cog, cover, evaluate, extract_objects, hal, parse_eval_corpus, token_ratio,
    CaptionRecord, MetricError, ObjectDictionary, ObjectSet,
};
use reverse_core::DecodeOutcome;

fn set(items: &[&str]) -> ObjectSet {
    items.iter().map(|s| s.to_string()).collect()
}

/// Ten captions with hand-computed values:
/// (chair, cover, hal, cog) per record, `None` where undefined.
type Row = (CaptionRecord, Option<f64>, Option<f64>, u8, Option<f64>);

fn corpus() -> Vec<Row> {
    vec![
        (CaptionRecord::new(["dog", "cat"], ["dog"]).with_targets(["ghost"]), Some(0.5), Some(1.0), 1, Some(0.0)),
        (CaptionRecord::new(["dog"], ["dog", "cat"]), Some(0.0), Some(0.5), 0, None),
        (CaptionRecord::new(["ghost", "dog"], ["dog"]).with_targets(["ghost"]), Some(0.5), Some(1.0), 1, Some(0.5)),
        (CaptionRecord::new(["cat"], ["dog"]), Some(1.0), Some(0.0), 1, None),
        (CaptionRecord::new(Vec::<&str>::new(), ["dog"]), None, Some(0.0), 0, None),
        (CaptionRecord::new(["dog", "cat", "bird"], ["bird", "cat", "dog"]), Some(0.0), Some(1.0), 0, None),
        (CaptionRecord::new(["mat"], Vec::<&str>::new()), Some(1.0), None, 1, None),
        (
            CaptionRecord::new(["dog", "ghost", "cat", "bird"], ["dog"]).with_targets(["ghost", "cat"]),
            Some(0.75),
            Some(1.0),
            1,
            Some(0.5),
        ),
        (CaptionRecord::new(["dog"], ["dog"]), Some(0.0), Some(1.0), 0, None),
        (CaptionRecord::new(["cat", "dog"], ["cat", "dog", "rug"]), Some(0.0), Some(2.0 / 3.0), 0, None),
    ]
}

pub fn per_caption_values() {
    for (i, (r, c, v, h, g)) in corpus().into_iter().enumerate() {
        assert_eq!(chair(&r.mentioned, &r.annotated).ok(), c, "chair {i}");
        assert_eq!(cover(&r.mentioned, &r.annotated).ok(), v, "cover {i}");
        assert_eq!(hal(&r.mentioned, &r.annotated), h, "hal {i}");
        let cg = r.hallucinatory_targets.as_ref().and_then(|t| cog(&r.mentioned, t).ok());
        assert_eq!(cg, g, "cog {i}");
    }
}

pub fn report_means_and_aggregates() {
    let rows = corpus();
    let records: Vec<CaptionRecord> = rows.iter().map(|r| r.0.clone()).collect();
    let ids: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
    let report = evaluate(&ids, &records, 200, 5).unwrap();
    assert_eq!(report.n_records, 10);
    assert_eq!(report.chair, Some((0.5 + 0.0 + 0.5 + 1.0 + 0.0 + 1.0 + 0.75 + 0.0 + 0.0) / 9.0));
    assert_eq!(report.cover, Some((1.0 + 0.5 + 1.0 + 0.0 + 0.0 + 1.0 + 1.0 + 1.0 + 2.0 / 3.0) / 9.0));
    assert_eq!(report.hal, 0.5);
    assert_eq!(report.cog, Some((0.0 + 0.5 + 0.5) / 3.0));
    assert_eq!(report.chair_i, Some(7.0 / 17.0));
    assert_eq!(report.chair_s, 0.5);
    assert_eq!(report.records[4].chair, None);
    assert_eq!(report.records[6].cover, None);
    let agg = aggregate(&records).unwrap();
    assert_eq!((agg.chair_i, agg.chair_s), (7.0 / 17.0, 0.5));
    let b = &report.bootstrap["chair"];
    assert!(b.ci_low <= b.mean && b.mean <= b.ci_high);
}

pub fn aggregate_examples() {
    let two = [CaptionRecord::new(["dog", "cat"], ["dog"]), CaptionRecord::new(["dog"], ["dog"])];
    let a = aggregate(&two).unwrap();
    assert_eq!((a.chair_i, a.chair_s), (1.0 / 3.0, 0.5));
    let clean = [CaptionRecord::new(["dog"], ["dog"]), CaptionRecord::new(["cat"], ["cat", "dog"])];
    let a = aggregate(&clean).unwrap();
    assert_eq!((a.chair_i, a.chair_s), (0.0, 0.0));
    let single = CaptionRecord::new(["dog", "cat", "bird"], ["dog"]);
    assert_eq!(
        aggregate(std::slice::from_ref(&single)).unwrap().chair_i,
        chair(&single.mentioned, &single.annotated).unwrap()
    );
    assert!(matches!(aggregate(&[]), Err(MetricError::EmptyInput)));
}

pub fn hal_mean_counts_captions() {
    let records: Vec<CaptionRecord> = (0..10)
        .map(|i| if i < 3 { CaptionRecord::new(["cat"], ["dog"]) } else { CaptionRecord::new(["dog"], ["dog"]) })
        .collect();
    let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    assert_eq!(evaluate(&ids, &records, 10, 0).unwrap().hal, 0.3);
}

pub fn extraction_examples() {
    let dict = ObjectDictionary::new(["dog", "fire hydrant", "cat"]);
    assert_eq!(extract_objects("a dog next to a fire hydrant", &dict), set(&["dog", "fire hydrant"]));
    assert_eq!(extract_objects("", &dict), set(&[]));
    let overlapping = ObjectDictionary::new(["fire", "fire hydrant"]);
    assert_eq!(extract_objects("a red fire hydrant", &overlapping), set(&["fire hydrant"]));
    assert_eq!(extract_objects("two dogs and a Cat.", &dict), set(&["dog", "cat"]));
}

pub fn bootstrap_properties() {
    let constant = vec![0.25; 50];
    let b = bootstrap(&constant, 100, 1).unwrap();
    assert_eq!((b.mean, b.ci_low, b.ci_high), (0.25, 0.25, 0.25));

    let balanced: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
    let b = bootstrap(&balanced, 100, 9).unwrap();
    assert!((b.mean - 0.5).abs() <= 0.1);
    assert!(b.ci_low < 0.5 && b.ci_high > 0.5);
    assert_eq!(b, bootstrap(&balanced, 100, 9).unwrap());
    assert_ne!(b, bootstrap(&balanced, 100, 10).unwrap());
    assert!(matches!(bootstrap(&[], 10, 0), Err(MetricError::EmptyInput)));
}

fn outcome(tokens: usize) -> DecodeOutcome {
    serde_json::from_value(serde_json::json!({
        "clean_text": "", "annotated_text": {"tokens": [], "spans": []}, "corrections_applied": 0, "flagged_uncorrected": false,
        "hit_max_length": false, "tokens_generated_total": tokens, "tokens_emitted": tokens, "stage": 1,
        "abstained": true, "placeholders": []
    }))
    .unwrap()
}

pub fn token_ratio_examples() {
    let base = vec![outcome(20)];
    assert_eq!(token_ratio(&base, &base).unwrap(), 1.0);
    assert_eq!(token_ratio(&[outcome(25)], &base).unwrap(), 1.25);
    assert!(token_ratio(&[outcome(1)], &[outcome(0)]).is_err());
}

pub fn eval_corpus_lines() {
    let text = r#"{"header": {"seed": 1}}
{"id": "a", "caption": "a dog and a cat", "annotated_objects": ["dog"]}
{"id": "b", "caption": "a dog", "annotated_objects": ["dog", "cat"], "hallucinatory_targets": ["ghost"]}
"#;
    let inputs = parse_eval_corpus(text).unwrap();
    assert_eq!(inputs.len(), 2);
    let dict = ObjectDictionary::new(["dog", "cat", "ghost"]);
    let r = inputs[0].to_record(&dict);
    assert_eq!(chair(&r.mentioned, &r.annotated).unwrap(), 0.5);
    let bad = "{\"id\": \"a\"}\n";
    assert!(matches!(parse_eval_corpus(bad), Err(MetricError::Line { line: 1, .. })));
}

/// Every oracle check, for reuse outside this test binary.
#[allow(dead_code)]
pub const SCENARIOS: &[(&str, fn())] = &[
    ("per_caption_values", per_caption_values),
    ("report_means_and_aggregates", report_means_and_aggregates),
    ("aggregate_examples", aggregate_examples),
    ("hal_mean_counts_captions", hal_mean_counts_captions),
    ("extraction_examples", extraction_examples),
    ("bootstrap_properties", bootstrap_properties),
    ("token_ratio_examples", token_ratio_examples),
    ("eval_corpus_lines", eval_corpus_lines),
];

#[cfg(test)]
mod run {
    #[test]
    fn per_caption_values() {
        super::per_caption_values()
    }

    #[test]
    fn report_means_and_aggregates() {
        super::report_means_and_aggregates()
    }

    #[test]
    fn aggregate_examples() {
        super::aggregate_examples()
    }

    #[test]
    fn hal_mean_counts_captions() {
        super::hal_mean_counts_captions()
    }

    #[test]
    fn extraction_examples() {
        super::extraction_examples()
    }

    #[test]
    fn bootstrap_properties() {
        super::bootstrap_properties()
    }

    #[test]
    fn token_ratio_examples() {
        super::token_ratio_examples()
    }

    #[test]
    fn eval_corpus_lines() {
        super::eval_corpus_lines()
    }
}
