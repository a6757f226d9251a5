//! Integration tests for the dataset builder and the evaluation runners,
//! exercised through the public pipeline API over a pre-warmed evidence
//! cache and scripted mock backends.

use chrono::TimeZone;
use num_rational::Ratio;
use ooc_engine::backend::{
    install_mock, ChatBackend, EmbedBackend, MockBackend, MockRuleSpec, MockScript,
};
use ooc_engine::data::{Dataset, ImageTextPair, Label};
use ooc_engine::detector::{AFFIRMATIVE_TEMPLATE, NEGATIVE_TEMPLATE};
use ooc_engine::error::RetrievalError;
use ooc_engine::eval::{
    default_ablation_rows, run_ablation, sweep_topk, write_ablation_csv, write_sweep_csv,
};
use ooc_engine::instruct::{build_dataset, write_instruction_jsonl, VerifyConfig};
use ooc_engine::pipeline::{Pipeline, PipelineConfig};
use ooc_engine::rerank::Strategy;
use ooc_engine::retrieval::{
    Crawler, EvidenceCache, EvidenceItem, EvidenceSet, FixtureFetcher, RetrievalConfig, Retriever,
    SearchClient, SearchHit,
};
use ooc_engine::templates::TemplateSet;
use ooc_engine::util::{Clock, FixedClock};
use std::sync::Arc;
use tempfile::tempdir;

/// Search client that must never be reached: every test works from a warm
/// cache.
struct NoSearch;

impl SearchClient for NoSearch {
    fn search(&self, image_ref: &str, _limit: usize) -> Result<Vec<SearchHit>, RetrievalError> {
        panic!("unexpected live search for {image_ref}");
    }
}

fn labeled_pair(id: &str, truth: Label) -> ImageTextPair {
    ImageTextPair::new(id, format!("{id}.jpg"), format!("news caption {id}")).with_truth(truth)
}

fn evidence_for(pair_id: &str) -> EvidenceSet {
    let at = chrono::Utc.timestamp_opt(1_500_000_000, 0).unwrap();
    EvidenceSet::new(
        pair_id,
        (0..3)
            .map(|rank| EvidenceItem {
                source_url: format!("https://news.example/{pair_id}/{rank}"),
                caption: format!("evidence {rank} for {pair_id}"),
                retrieval_rank: rank,
                fetched_at: at,
            })
            .collect(),
        None,
    )
}

/// Pipeline over a warm cache; all model traffic goes to `mock`.
fn pipeline_over(
    cache_dir: &std::path::Path,
    dataset: &Dataset,
    mock: Arc<MockBackend>,
    workers: usize,
) -> Pipeline {
    let clock: Arc<dyn Clock> = Arc::new(FixedClock::epoch());
    let cache = EvidenceCache::new(cache_dir.to_path_buf()).unwrap();
    for pair in &dataset.pairs {
        cache.put(&evidence_for(&pair.pair_id)).unwrap();
    }
    let retriever = Retriever::new(
        Arc::new(NoSearch),
        Crawler::new(
            Box::new(FixtureFetcher::new(cache_dir.join("unused-fixtures"))),
            Arc::clone(&clock),
        ),
        cache,
        RetrievalConfig::default(),
        Arc::clone(&clock),
    );
    Pipeline::new(
        PipelineConfig {
            workers,
            ..Default::default()
        },
        Arc::clone(&mock) as Arc<dyn ChatBackend>,
        Some(mock as Arc<dyn EmbedBackend>),
        Some(Arc::new(retriever)),
        Arc::new(TemplateSet::builtin()),
        clock,
    )
    .unwrap()
}

fn stage_rules() -> Vec<MockRuleSpec> {
    vec![
        MockRuleSpec::substring("Evidence selection task", vec!["[1]".into()]),
        MockRuleSpec::substring(
            "Evidence rewriting task",
            vec!["A single rewritten evidence sentence.".into()],
        ),
    ]
}

#[test]
fn build_dataset_balanced_fixture_all_verified() {
    let dir = tempdir().unwrap();
    let mut pairs = Vec::new();
    for i in 0..10 {
        pairs.push(labeled_pair(&format!("p{i:02}"), Label::Pristine));
        pairs.push(labeled_pair(&format!("f{i:02}"), Label::Falsified));
    }
    let dataset = Dataset::from_pairs("balanced", pairs).unwrap();

    let mut rules = stage_rules();
    rules.push(MockRuleSpec::substring(
        "Authenticity judgment task",
        vec![format!("{NEGATIVE_TEMPLATE} The event is unrelated.")],
    ));
    let mock = Arc::new(
        install_mock(MockScript {
            chat: rules,
            ..Default::default()
        })
        .unwrap(),
    );
    let pipeline = pipeline_over(dir.path(), &dataset, mock, 4);
    let (samples, report) = build_dataset(&dataset, &pipeline, &VerifyConfig::default());

    assert_eq!(samples.len(), 20);
    assert_eq!(report.n_output_pristine, 10);
    assert_eq!(report.n_output_falsified, 10);
    assert!(report.quarantined.is_empty());
    assert!(report.errors.is_empty());
    assert!(report.quarantine_identity_holds());

    // output sorted by pair_id and every target parses back to its label
    let ids: Vec<&str> = samples.iter().map(|s| s.pair_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for sample in &samples {
        let parsed = ooc_engine::detector::parse_judgment(&sample.target_output);
        assert_eq!(
            parsed.verdict,
            Some(sample.label),
            "pair {}",
            sample.pair_id
        );
        if sample.label == Label::Pristine {
            assert_eq!(sample.target_output, AFFIRMATIVE_TEMPLATE);
        } else {
            assert!(sample.target_output.starts_with(NEGATIVE_TEMPLATE));
        }
        assert!(sample.retries_used <= 5);
    }
}

#[test]
fn build_dataset_quarantines_stubborn_pairs() {
    let dir = tempdir().unwrap();
    let mut pairs = Vec::new();
    for i in 0..10 {
        pairs.push(labeled_pair(&format!("p{i:02}"), Label::Pristine));
        pairs.push(labeled_pair(&format!("f{i:02}"), Label::Falsified));
    }
    let dataset = Dataset::from_pairs("mixed", pairs).unwrap();

    // three falsified pairs keep answering with the wrong label
    let mut rules = stage_rules();
    for stubborn in ["f00", "f03", "f07"] {
        rules.push(MockRuleSpec::regex(
            format!("Authenticity judgment task[\\s\\S]*news caption {stubborn}"),
            vec![AFFIRMATIVE_TEMPLATE.to_string()],
        ));
    }
    rules.push(MockRuleSpec::substring(
        "Authenticity judgment task",
        vec![format!("{NEGATIVE_TEMPLATE} The venue differs.")],
    ));
    let mock = Arc::new(
        install_mock(MockScript {
            chat: rules,
            ..Default::default()
        })
        .unwrap(),
    );
    let pipeline = pipeline_over(dir.path(), &dataset, mock, 2);
    let (samples, report) = build_dataset(&dataset, &pipeline, &VerifyConfig::default());

    assert_eq!(samples.len(), 17);
    assert_eq!(report.quarantined, vec!["f00", "f03", "f07"]);
    assert_eq!(report.n_output_pristine, 10);
    assert_eq!(report.n_output_falsified, 7);
    assert!(report.quarantine_identity_holds());

    // quarantined pairs never reach the emitted file
    let out = dir.path().join("instructions.jsonl");
    write_instruction_jsonl(&out, &samples).unwrap();
    let body = std::fs::read_to_string(&out).unwrap();
    assert_eq!(body.lines().count(), 17);
    for stubborn in ["f00", "f03", "f07"] {
        assert!(!body.contains(&format!("\"pair_id\":\"{stubborn}\"")));
    }
}

#[test]
fn ablation_default_rows_and_evidence_margin() {
    let dir = tempdir().unwrap();
    let pairs: Vec<ImageTextPair> = (0..10)
        .map(|i| labeled_pair(&format!("p{i:02}"), Label::Pristine))
        .collect();
    let dataset = Dataset::from_pairs("margin", pairs).unwrap();

    // with evidence in the prompt the judge is always right; without it,
    // three pairs (30%) flip to the wrong verdict
    let mut rules = stage_rules();
    rules.push(MockRuleSpec::substring(
        "External evidence",
        vec![AFFIRMATIVE_TEMPLATE.to_string()],
    ));
    for wrong in ["p00", "p01", "p02"] {
        rules.push(MockRuleSpec::regex(
            format!("Authenticity judgment task[\\s\\S]*news caption {wrong}"),
            vec![format!("{NEGATIVE_TEMPLATE} Scripted miss.")],
        ));
    }
    rules.push(MockRuleSpec::substring(
        "Authenticity judgment task",
        vec![AFFIRMATIVE_TEMPLATE.to_string()],
    ));
    let mock = Arc::new(
        install_mock(MockScript {
            chat: rules,
            ..Default::default()
        })
        .unwrap(),
    );
    let pipeline = pipeline_over(dir.path(), &dataset, mock, 1);

    let rows = run_ablation(&dataset, &default_ablation_rows(), &pipeline);
    assert_eq!(rows.len(), 7);

    for row in &rows {
        let metrics = row.metrics.as_ref().expect("row scored");
        let expected = if row.flags.er {
            Ratio::new(1u64, 1)
        } else {
            Ratio::new(7u64, 10)
        };
        assert_eq!(
            metrics.acc_all(),
            expected,
            "row {:?} scored {:?}",
            row.flags,
            metrics
        );
        // er=false rows provably exclude evidence text from prompts
        if !row.flags.er {
            for outcome in &row.outcomes {
                let prompt = &outcome.record.stages.judge.as_ref().unwrap().prompt;
                assert!(!prompt.contains("External evidence"));
                assert!(outcome.record.stages.retrieval.is_none());
            }
        }
    }

    let csv_path = dir.path().join("ablation.csv");
    write_ablation_csv(&csv_path, &rows).unwrap();
    let body = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(body.lines().count(), 8); // header + 7 rows
    assert!(body.starts_with("er,aesp,aegp,re,tuning,acc_all,"));
}

#[test]
fn sweep_llm_beats_random_by_constructed_margin() {
    // the correct evidence always sits at retrieval rank 2; the scripted
    // selector always picks it, so the judge is right exactly when the
    // prompt carries the rank-2 caption
    let dir = tempdir().unwrap();
    let pairs: Vec<ImageTextPair> = (0..12)
        .map(|i| labeled_pair(&format!("p{i:02}"), Label::Pristine))
        .collect();
    let dataset = Dataset::from_pairs("constructed", pairs).unwrap();

    let script = MockScript {
        chat: vec![
            MockRuleSpec::substring("Evidence selection task", vec!["[3]".into()]),
            MockRuleSpec::regex(
                r"External evidence: [^\n]*evidence 2 for",
                vec![AFFIRMATIVE_TEMPLATE.to_string()],
            ),
            MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![format!("{NEGATIVE_TEMPLATE} Wrong item selected.")],
            ),
        ],
        ..Default::default()
    };
    let mock = Arc::new(install_mock(script).unwrap());
    let pipeline = pipeline_over(dir.path(), &dataset, mock, 1);

    // aegp off so the selected caption reaches the judge verbatim
    let flags = ooc_engine::pipeline::StageFlags {
        er: true,
        aesp: true,
        aegp: false,
        re: false,
    };
    let pipeline = pipeline.with_flags(flags).unwrap();
    let report = sweep_topk(
        &dataset,
        &[Strategy::LlmSelect, Strategy::Random],
        &[1],
        &pipeline,
    )
    .unwrap();

    let llm_acc = report.cells[0].metrics.as_ref().unwrap().acc_all();
    let random_acc = report.cells[1].metrics.as_ref().unwrap().acc_all();
    assert_eq!(llm_acc, Ratio::new(1u64, 1));

    // the random baseline is right only when its seeded draw lands on
    // rank 2; recompute that margin independently from the same seeds
    let cfg = ooc_engine::rerank::RerankConfig {
        strategy: Strategy::Random,
        top_k: 1,
        ..pipeline.cfg.rerank.clone()
    };
    let mut expected_correct = 0u64;
    for pair in &dataset.pairs {
        let sel = ooc_engine::rerank::select_random(&evidence_for(&pair.pair_id), &cfg).unwrap();
        if sel.chosen_indices[0] == 2 {
            expected_correct += 1;
        }
    }
    assert_eq!(random_acc, Ratio::new(expected_correct, 12));
    assert!(llm_acc > random_acc, "constructed margin collapsed");
}

#[test]
fn ablation_csv_is_deterministic() {
    let dir = tempdir().unwrap();
    let pairs: Vec<ImageTextPair> = (0..4)
        .map(|i| labeled_pair(&format!("p{i:02}"), Label::Pristine))
        .collect();
    let dataset = Dataset::from_pairs("det", pairs).unwrap();
    let script = MockScript {
        chat: vec![
            MockRuleSpec::substring("Evidence selection task", vec!["[1]".into()]),
            MockRuleSpec::substring("Evidence rewriting task", vec!["One sentence.".into()]),
            MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![AFFIRMATIVE_TEMPLATE.to_string()],
            ),
        ],
        ..Default::default()
    };
    let mut bodies = Vec::new();
    for run in 0..2 {
        let mock = Arc::new(install_mock(script.clone()).unwrap());
        let pipeline = pipeline_over(dir.path(), &dataset, mock, 2);
        let rows = run_ablation(&dataset, &default_ablation_rows(), &pipeline);
        let path = dir.path().join(format!("ablation-{run}.csv"));
        write_ablation_csv(&path, &rows).unwrap();
        bodies.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn sweep_is_shaped_and_deterministic() {
    let dir = tempdir().unwrap();
    let pairs: Vec<ImageTextPair> = (0..6)
        .map(|i| {
            labeled_pair(
                &format!("p{i:02}"),
                if i % 2 == 0 {
                    Label::Pristine
                } else {
                    Label::Falsified
                },
            )
        })
        .collect();
    let dataset = Dataset::from_pairs("sweep", pairs).unwrap();

    let script = MockScript {
        chat: vec![
            MockRuleSpec::substring("Evidence selection task", vec!["[1, 2, 3]".into()]),
            MockRuleSpec::substring(
                "Evidence rewriting task",
                vec!["One aligned sentence.".into()],
            ),
            MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![AFFIRMATIVE_TEMPLATE.to_string()],
            ),
        ],
        embed_fallback_dim: Some(8),
        ..Default::default()
    };

    let strategies = [Strategy::LlmSelect, Strategy::Cosine, Strategy::Random];
    let mut csv_bodies = Vec::new();
    for run in 0..2 {
        let mock = Arc::new(install_mock(script.clone()).unwrap());
        let pipeline = pipeline_over(dir.path(), &dataset, mock, 3);
        let report = sweep_topk(&dataset, &strategies, &[1, 2, 3], &pipeline).unwrap();
        assert_eq!(report.cells.len(), 9);
        assert!(report.cells.iter().all(|c| c.metrics.is_some()));
        let path = dir.path().join(format!("sweep-{run}.csv"));
        write_sweep_csv(&path, &report).unwrap();
        csv_bodies.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(csv_bodies[0], csv_bodies[1]);

    // out-of-range k rejected up front
    let mock = Arc::new(install_mock(script).unwrap());
    let pipeline = pipeline_over(dir.path(), &dataset, mock, 1);
    assert!(sweep_topk(&dataset, &strategies, &[1, 4], &pipeline).is_err());
}
