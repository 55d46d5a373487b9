mod common;

use std::collections::BTreeSet;

use construct_core::classgen::ClassStatus;
use construct_core::classify::LabelSource;
use construct_core::pipeline::{derived_snapshot, files};
use construct_core::stage::Outcome;

use common::*;

#[test]
fn planted_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = open("planted", dir.path());
    p.run_all(Some(decisions("planted/review.jsonl")), None).unwrap();

    assert_eq!(p.units().unwrap().len(), 200);
    let registry = p.registry().unwrap().unwrap();
    let rules = &registry.normalization_rules;
    let names: BTreeSet<String> = registry.classes.iter().map(|c| rules.normalize(&c.name)).collect();
    for planted in PLANTED {
        assert!(
            names.contains(&rules.normalize(planted)),
            "{planted} missing from registry"
        );
    }

    let final_set = p.final_set().unwrap();
    let kept: BTreeSet<&str> = final_set
        .classes
        .iter()
        .filter(|c| !final_set.is_none_class(&c.name))
        .map(|c| c.name.as_str())
        .collect();
    assert_eq!(kept, PLANTED.into_iter().collect());
    let svc = p.review_service().unwrap();
    assert!(svc
        .state()
        .registry
        .classes
        .iter()
        .any(|c| c.name == "Procedural Remarks" && c.status == ClassStatus::Discarded));

    let truth = planted_truth();
    let results = p.results().unwrap();
    assert_eq!(results.len(), 200);
    for (unit, expected) in &truth {
        let r = results[unit].ok().unwrap_or_else(|| panic!("{unit} failed"));
        assert_eq!(r.labels, vec![expected.clone()], "{unit}");
        assert_eq!(r.source, LabelSource::FinalSelect);
        assert!(!r.step_three);
    }
    assert!(p.invalid_labels().unwrap().is_empty());

    let report = p.eval(None).unwrap();
    assert!(
        report.reports.iter().all(|r| (r.accuracy - 1.0).abs() < 1e-12),
        "{report:?}"
    );
}

#[test]
fn failed_units_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let p = open("small", dir.path());
    let report = p.detect().unwrap();
    assert_eq!(report.total, 10);
    assert_eq!(report.failed, 0);
    let det = p.detections().unwrap();
    assert_eq!(det.len(), 10);
    let yes = det
        .values()
        .filter(|d| d.label == construct_core::detect::DetectLabel::Yes)
        .count();
    assert_eq!(yes, 5);
    // the small mock has no summary rule: every summary fails per unit
    let s = p.summarize().unwrap();
    assert_eq!((s.total, s.failed), (5, 5));
    let stored = p.store().records("summarize");
    assert!(stored.values().all(|v| v["status"] == "failed"));
    let _ = Outcome::<()>::Ok(());
}

#[test]
fn replay_rewrites_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = open("planted", dir.path());
    p.run_all(Some(decisions("planted/review.jsonl")), None).unwrap();
    let before = derived_snapshot(dir.path()).unwrap();
    assert!(before.contains_key(files::RESULTS));
    p.write_derived().unwrap();
    assert_eq!(before, derived_snapshot(dir.path()).unwrap());
}

#[test]
fn eu_shaped_debates_segment_into_19_titled_units() {
    use construct_core::corpus::{ingest, segment, Granularity, IngestFormat, SentenceSplitter};
    let report = ingest(&fixture("eu_debates/speeches.csv"), IngestFormat::DelimitedTable).unwrap();
    assert_eq!(report.documents.len(), 5);
    let splitter = SentenceSplitter::default();
    let units: Vec<_> = report
        .documents
        .iter()
        .flat_map(|d| segment(d, Granularity::Sentence, &splitter))
        .collect();
    assert_eq!(units.len(), 19);
    assert!(units
        .iter()
        .all(|u| u.title.starts_with("Artificial intelligence in criminal law")));
}

#[test]
fn tied_profiles_go_to_the_final_step() {
    use construct_core::gateway::Stage;
    use construct_core::store::Event;

    let dir = tempfile::tempdir().unwrap();
    let planted_mock = std::fs::read_to_string(fixture("planted/mock.toml")).unwrap();
    let mock = format!(
        "[[rule]]\nstage = \"classify_fit\"\nreply = '{{\"Rationale\": \"Plausible.\", \"Fit\": 5}}'\n\n\
         [[rule]]\nstage = \"classify_final\"\nreply = \"<AI Ethics | ai benefits>\"\n\n{planted_mock}"
    );
    std::fs::write(dir.path().join("mock.toml"), mock).unwrap();
    let config = std::fs::read_to_string(fixture("planted/construct.toml"))
        .unwrap()
        .replace("\"corpus.jsonl\"", &format!("{:?}", fixture("planted/corpus.jsonl")))
        .replace("\"gold.csv\"", &format!("{:?}", fixture("planted/gold.csv")));
    std::fs::write(dir.path().join("construct.toml"), config).unwrap();
    let cfg = construct_core::config::RunConfig::load(&dir.path().join("construct.toml")).unwrap();
    let p = construct_core::pipeline::Pipeline::open(cfg, &dir.path().join("run")).unwrap();
    p.run_all(Some(decisions("planted/review.jsonl")), None).unwrap();

    let results = p.results().unwrap();
    let r = results.values().next().unwrap().ok().unwrap();
    assert!(r.step_three);
    assert_eq!(r.presented.len(), 4);
    assert_eq!(
        r.presented,
        ["AI Benefits", "AI Ethics", "AI Innovation", "AI Regulation"]
    );
    assert_eq!(r.labels, ["AI Ethics", "AI Benefits"]);
    assert!(p.invalid_labels().unwrap().is_empty());
    let finals = p
        .store()
        .events()
        .unwrap()
        .iter()
        .filter(|e| {
            matches!(
                e.event,
                Event::Request {
                    stage: Stage::ClassifyFinal,
                    ..
                }
            )
        })
        .count();
    assert_eq!(finals, 200);
}
