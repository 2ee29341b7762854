mod common;

use std::collections::{BTreeSet, HashMap};

use crowdtsc::annotation::{build_tasks, read_records, simulate_annotator};
use crowdtsc::corpus::{read_sample, Corpus, Split};
use crowdtsc::embeddings::load_pretrained;
use crowdtsc::kea::tfidf_keywords;
use crowdtsc::models::read_checkpoint;
use crowdtsc::pipeline::{predict_texts, sweep_table, AnnotationSource};
use crowdtsc::synthetic::SyntheticConfig;
use crowdtsc::{Error, KeywordSets, Manifest, ModelKind, Oracle, Stage, StageStatus, Vocabulary};

fn small() -> SyntheticConfig {
    SyntheticConfig {
        train_docs: 300,
        test_docs: 100,
        ..Default::default()
    }
}

fn quick(c: &mut crowdtsc::PipelineConfig) {
    c.train.epochs = 2;
    c.model.hidden_dim = 8;
    c.model.conv_channels = 8;
}

#[test]
fn stage_before_its_dependency_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    m.run_stage(Stage::Ingest).unwrap();
    match m.run_stage(Stage::Expand) {
        Err(Error::Dependency { stage, missing }) => {
            assert_eq!(stage, "expand");
            assert_eq!(missing, "cluster");
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
    assert!(matches!(m.run_stage(Stage::Eval), Err(Error::Dependency { .. })));
}

#[test]
fn second_run_skips_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    assert!(m.run_all().unwrap().iter().all(|(_, s)| *s == StageStatus::Ran));
    let mut again = Manifest::load(&dir.path().join(common::MANIFEST)).unwrap();
    let statuses = again.run_all().unwrap();
    assert_eq!(statuses.len(), Stage::ALL.len());
    assert!(statuses.iter().all(|(_, s)| *s == StageStatus::Skipped), "{statuses:?}");
}

#[test]
fn upstream_change_reruns_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    m.run_all().unwrap();
    m.config.cluster.method = crowdtsc::ClusterMethod::KMeans;
    m.config.cluster.k = Some(5);
    let statuses: HashMap<Stage, StageStatus> = m.run_all().unwrap().into_iter().collect();
    for s in [Stage::Ingest, Stage::Sample, Stage::Annotate] {
        assert_eq!(statuses[&s], StageStatus::Skipped, "{s}");
    }
    for s in [Stage::Cluster, Stage::Expand, Stage::Train, Stage::Eval] {
        assert_eq!(statuses[&s], StageStatus::Ran, "{s}");
    }
}

#[test]
fn identical_rebuilt_output_stops_propagation() {
    // indicator balls are far tighter than either radius
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    m.run_all().unwrap();
    m.config.cluster.eps = Some(0.8);
    let statuses: HashMap<Stage, StageStatus> = m.run_all().unwrap().into_iter().collect();
    assert_eq!(statuses[&Stage::Cluster], StageStatus::Ran);
    assert_eq!(statuses[&Stage::Expand], StageStatus::Skipped);
}

#[test]
fn edited_artifact_makes_stage_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    for s in [Stage::Ingest, Stage::Sample, Stage::Annotate, Stage::Cluster, Stage::Expand] {
        m.run_stage(s).unwrap();
    }
    std::fs::write(m.artifact("keywords.txt"), "tampered crowd\n").unwrap();
    assert!(!m.is_fresh(Stage::Expand).unwrap());
    assert!(matches!(m.run_stage(Stage::Train), Err(Error::Dependency { .. })));
    assert_eq!(m.run_stage(Stage::Expand).unwrap(), StageStatus::Ran);
    assert!(m.is_fresh(Stage::Expand).unwrap());
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let syn = SyntheticConfig {
        train_docs: 500,
        test_docs: 150,
        ..Default::default()
    };
    let mut m = common::manifest(dir.path(), &syn, |c| c.train.epochs = 3);
    m.run_all().unwrap();
    for name in ["model.ckpt", "train_report.jsonl", "train_summary.txt", "eval.txt", "eval.csv"] {
        assert!(m.artifact(name).exists(), "{name}");
    }
    let report = m.report().unwrap();
    assert!(report.contains("best epoch"), "{report}");

    let ckpt = read_checkpoint(&m.artifact("model.ckpt")).unwrap();
    assert_eq!(ckpt.model.kind(), ModelKind::HdnnC);
    let vocab = Vocabulary::read(&m.artifact("vocab.txt")).unwrap();
    let (table, _) = load_pretrained(&m.artifact("embeddings.txt"), &vocab, syn.dim, 0).unwrap();
    let keywords = KeywordSets::read(&m.artifact("keywords.txt")).unwrap();
    let texts = vec!["w1 w2 k0x3 w4".to_string(), "w5 k1x7 w6".to_string()];
    let p = predict_texts(&ckpt, &vocab, &table, Some(&keywords), 64, &texts).unwrap();
    assert_eq!(p.len(), 2);
    assert!(p.iter().all(|x| (x.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9));

    let mut wrong = keywords.clone();
    wrong.expanded.insert("w1".into());
    assert!(predict_texts(&ckpt, &vocab, &table, Some(&wrong), 64, &texts).is_err());
}

#[test]
fn tfidf_simulation_matches_tfidf_keywords() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), |c| {
        c.annotations = AnnotationSource::Simulate { oracle: Oracle::Tfidf };
    });
    for s in [Stage::Ingest, Stage::Sample, Stage::Annotate] {
        m.run_stage(s).unwrap();
    }
    let st = m.staged().unwrap();
    let sample = read_sample(&m.artifact("sample.txt")).unwrap();
    let records = read_records(&m.artifact("annotations.jsonl")).unwrap();
    assert_eq!(records.len(), sample.len());

    let docs = st.train.documents.iter().filter(|d| sample.contains(&d.id)).cloned().collect();
    let sampled = Corpus::new(docs, 2, Split::Train).unwrap();
    let expected = tfidf_keywords(&sampled, 3);
    for (r, (doc, top)) in records.iter().zip(sampled.documents.iter().zip(&expected)) {
        assert_eq!(r.doc_id, doc.id);
        let got: BTreeSet<&String> = r.tokens.iter().collect();
        assert_eq!(got, top.iter().collect::<BTreeSet<_>>());
        for (&p, t) in r.positions.iter().zip(&r.tokens) {
            assert_eq!(doc.tokens.iter().position(|x| x == t), Some(p));
        }
    }

    // the stage is the standalone simulator applied to the sample
    let tasks = build_tasks(&st.train, &sample).unwrap();
    let labels = st.train.documents.iter().map(|d| (d.id, d.label)).collect();
    let direct = simulate_annotator(&tasks, &labels, Oracle::Tfidf, &st.train, m.config.seed).unwrap();
    assert_eq!(direct, records);
}

#[test]
fn sweep_reports_every_slot_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), |c| {
        quick(c);
        c.train.epochs = 1;
    });
    for s in [Stage::Ingest, Stage::Sample, Stage::Annotate, Stage::Cluster, Stage::Expand] {
        m.run_stage(s).unwrap();
    }
    let rows = m.sweep_fcn_length(&[5, 10, 15, 20, 25, 10]).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [5, 10, 15, 20, 25]);
    let table = sweep_table(&rows);
    assert_eq!(table.rows.len(), 5);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.1)));
    assert_eq!(m.sweep_fcn_length(&[1]).unwrap().len(), 1);

    m.config.model.kind = ModelKind::Karnn;
    assert!(m.sweep_fcn_length(&[5]).is_err());
}

#[test]
fn variant_n_trains_without_expansion() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), |c| {
        quick(c);
        c.train.ablation = crowdtsc::Ablation::N;
    });
    m.run_stage(Stage::Ingest).unwrap();
    assert_eq!(m.run_stage(Stage::Train).unwrap(), StageStatus::Ran);
    let ckpt = read_checkpoint(&m.artifact("model.ckpt")).unwrap();
    assert_eq!(ckpt.keyword_hash, crowdtsc::models::keyword_hash(&BTreeSet::new()));
}

#[test]
fn changed_corpus_invalidates_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    m.run_stage(Stage::Ingest).unwrap();
    assert!(m.is_fresh(Stage::Ingest).unwrap());
    let path = dir.path().join("test.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("1,w1 w2 w3\n");
    std::fs::write(&path, text).unwrap();
    assert!(!m.is_fresh(Stage::Ingest).unwrap());
    assert_eq!(m.run_stage(Stage::Ingest).unwrap(), StageStatus::Ran);
}

#[test]
fn annotation_log_feeds_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = common::manifest(dir.path(), &small(), quick);
    m.run_stage(Stage::Ingest).unwrap();
    m.run_stage(Stage::Sample).unwrap();
    let st = m.staged().unwrap();
    let sample = read_sample(&m.artifact("sample.txt")).unwrap();
    let log = dir.path().join("human.jsonl");
    let svc = crowdtsc::AnnotationService::new();
    svc.initialize(build_tasks(&st.train, &sample).unwrap(), Some(log.clone())).unwrap();
    while let Some(t) = svc.next_task("alice").unwrap() {
        // the first three distinct tokens
        let mut seen = BTreeSet::new();
        let picks: Vec<usize> = (0..t.tokens.len()).filter(|&i| seen.insert(&t.tokens[i])).take(3).collect();
        svc.submit(t.task_id, "alice", &picks).unwrap();
    }
    m.config.annotations = AnnotationSource::Log { path: log.clone() };
    m.run_stage(Stage::Annotate).unwrap();
    let records = read_records(&m.artifact("annotations.jsonl")).unwrap();
    assert_eq!(records, svc.records().unwrap());
    m.run_stage(Stage::Cluster).unwrap();
    m.run_stage(Stage::Expand).unwrap();
    assert!(KeywordSets::read(&m.artifact("keywords.txt")).unwrap().seeds.is_superset(&svc.seeds().unwrap()));

    // a changed log makes the stage stale
    std::fs::write(&log, "").unwrap();
    assert!(!m.is_fresh(Stage::Annotate).unwrap());
}
