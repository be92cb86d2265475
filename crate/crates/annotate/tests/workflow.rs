use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use proptest::prelude::*;
use sarcasm_annotate::*;
use sarcasm_core::corpus::{Corpus, Label, Sample, Split};

use AnnLabel::{NotSarcasm as N, Sarcasm as S, Undecided as U};

fn corpus(pos: usize, neg: usize) -> Corpus {
    let mut v = Vec::new();
    for i in 0..pos {
        v.push(Sample::new(
            format!("p{i:03}"),
            "so great",
            format!("img/p{i}.jpg"),
            Some(Label::Sarcastic),
            Split::Train,
        ));
    }
    for i in 0..neg {
        v.push(Sample::new(
            format!("n{i:03}"),
            "it rains",
            format!("img/n{i}.jpg"),
            Some(Label::NotSarcastic),
            Split::Train,
        ));
    }
    Corpus::new(v).unwrap()
}

fn gold(n: usize) -> Vec<OnboardingItem> {
    (0..n)
        .map(|i| OnboardingItem {
            item_id: format!("g{i}"),
            text: format!("gold {i}"),
            image_ref: format!("gold/{i}.jpg"),
            label: if i % 2 == 0 { S } else { N },
        })
        .collect()
}

/// Answers with exactly `correct` matches against [`gold`].
fn answers(n: usize, correct: usize) -> Vec<AnnLabel> {
    gold(n)
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if i < correct {
                g.label
            } else if g.label == S {
                N
            } else {
                S
            }
        })
        .collect()
}

fn ticking_clock() -> Box<dyn Fn() -> u64 + Send + Sync> {
    let t = AtomicU64::new(1_700_000_000_000);
    Box::new(move || t.fetch_add(1, Ordering::SeqCst))
}

fn service(c: Corpus, config: ServiceConfig) -> Service {
    Service::with_clock(c, gold(100), config, ticking_clock()).unwrap()
}

fn onboarded(svc: &Service, id: &str) {
    svc.register(id, Role::Worker).unwrap();
    assert!(
        svc.submit_onboarding(id, &answers(100, 100))
            .unwrap()
            .passed
    );
}

#[test]
fn candidates_are_the_negatives() {
    assert_eq!(select_candidates(&corpus(2, 3)).len(), 3);
    assert!(select_candidates(&corpus(4, 0)).is_empty());
}

#[test]
fn onboarding_boundary() {
    let g: Vec<AnnLabel> = gold(100).iter().map(|g| g.label).collect();
    let at = grade_onboarding(&answers(100, 85), &g).unwrap();
    assert_eq!((at.score, at.passed), (0.85, true));
    let below = grade_onboarding(&answers(100, 84), &g).unwrap();
    assert_eq!((below.score, below.passed), (0.84, false));
    let all = grade_onboarding(&answers(100, 100), &g).unwrap();
    assert_eq!((all.score, all.passed), (1.0, true));
}

proptest! {
    #[test]
    fn onboarding_pass_iff_score_at_least_85_percent(total in 1usize..400, frac in 0.0f64..=1.0) {
        let correct = ((total as f64) * frac).floor() as usize;
        let g = OnboardingGrade::from_counts(correct, total).unwrap();
        // Exact rational comparison as the oracle.
        prop_assert_eq!(g.passed, correct * 100 >= 85 * total);
    }
}

#[test]
fn worker_must_pass_onboarding_first() {
    let svc = service(corpus(1, 3), ServiceConfig::default());
    svc.register("w", Role::Worker).unwrap();
    assert!(matches!(svc.next_task("w"), Err(Error::Unauthorized(_))));
    let grade = svc.submit_onboarding("w", &answers(100, 84)).unwrap();
    assert!(!grade.passed);
    assert!(matches!(svc.next_task("w"), Err(Error::Unauthorized(_))));
    assert!(matches!(
        svc.submit_onboarding("w", &answers(100, 100)),
        Err(Error::Conflict(_))
    ));
    assert!(matches!(svc.next_task("ghost"), Err(Error::NotFound(_))));
    assert!(matches!(
        svc.register("w", Role::Worker),
        Err(Error::Conflict(_))
    ));
}

#[test]
fn label_state_machine() {
    let svc = service(corpus(1, 3), ServiceConfig::default());
    onboarded(&svc, "a");
    onboarded(&svc, "b");
    let ta = svc.next_task("a").unwrap().unwrap();
    assert_eq!(ta.kind, TaskKind::Primary);
    assert_eq!(ta.labels, vec![S, N, U]);
    assert_eq!(ta.image_url, format!("/images/{}", ta.image_ref));
    assert_eq!(ta.image_ref, "img/n0.jpg");
    // Polling again returns the same pending task.
    assert_eq!(svc.next_task("a").unwrap().unwrap().task_id, ta.task_id);
    let tb = svc.next_task("b").unwrap().unwrap();
    assert_ne!(ta.task_id, tb.task_id);

    assert!(matches!(
        svc.submit_label("b", &ta.task_id, S),
        Err(Error::Conflict(_))
    ));
    let (event, state) = svc.submit_label("a", &ta.task_id, S).unwrap();
    assert_eq!(state, TaskState::Labeled);
    assert_eq!(event.label, S);
    assert!(matches!(
        svc.submit_label("a", &ta.task_id, N),
        Err(Error::Conflict(_))
    ));

    let (_, state) = svc.submit_label("b", &tb.task_id, U).unwrap();
    assert_eq!(state, TaskState::Escalated);

    let tc = svc.next_task("a").unwrap().unwrap();
    svc.submit_label("a", &tc.task_id, N).unwrap();
    assert!(svc.next_task("a").unwrap().is_none());
    let p = svc.progress();
    assert_eq!(p.primary_total, 3);
    assert_eq!(p.primary_by_state[&TaskState::Labeled], 2);
    assert_eq!(p.primary_by_state[&TaskState::Escalated], 1);
    assert_eq!(p.events, 3);
}

#[test]
fn escalation_goes_to_three_experts() {
    let svc = service(corpus(0, 1), ServiceConfig::default());
    onboarded(&svc, "w");
    let t = svc.next_task("w").unwrap().unwrap();
    svc.submit_label("w", &t.task_id, U).unwrap();
    assert!(matches!(
        resolved_err(&svc),
        Error::Unresolved(ids) if ids == vec![t.task_id.clone()]
    ));

    for e in ["e1", "e2", "e3", "e4"] {
        svc.register(e, Role::Expert).unwrap();
    }
    let x1 = svc.next_task("e1").unwrap().unwrap();
    assert_eq!(x1.kind, TaskKind::Expert);
    assert_eq!(x1.labels, vec![S, N]);
    // Held by e1, so nobody else sees it.
    assert!(svc.next_task("e2").unwrap().is_none());
    assert!(matches!(
        svc.submit_label("e1", &t.task_id, U),
        Err(Error::Argument(_))
    ));
    svc.submit_label("e1", &t.task_id, S).unwrap();
    assert!(
        svc.next_task("e1").unwrap().is_none(),
        "one vote per expert"
    );
    svc.next_task("e2").unwrap().unwrap();
    svc.submit_label("e2", &t.task_id, N).unwrap();
    svc.next_task("e3").unwrap().unwrap();
    let (_, state) = svc.submit_label("e3", &t.task_id, S).unwrap();
    assert_eq!(state, TaskState::Resolved);
    assert!(svc.next_task("e4").unwrap().is_none());
    let labels = svc.resolved_labels().unwrap();
    assert_eq!(labels[&t.sample_id], Label::Sarcastic);
}

fn resolved_err(svc: &Service) -> Error {
    svc.resolved_labels().unwrap_err()
}

#[test]
fn experts_do_not_take_primary_tasks() {
    let svc = service(corpus(0, 2), ServiceConfig::default());
    svc.register("e", Role::Expert).unwrap();
    assert!(svc.next_task("e").unwrap().is_none());
}

#[test]
fn double_check_and_kappa() {
    let svc = service(corpus(0, 4), ServiceConfig::default());
    onboarded(&svc, "w");
    let first = [S, S, N, N];
    for l in first {
        let t = svc.next_task("w").unwrap().unwrap();
        svc.submit_label("w", &t.task_id, l).unwrap();
    }
    assert!(matches!(
        svc.start_double_check("w", 4, 0),
        Err(Error::Conflict(_))
    ));
    assert!(matches!(
        svc.start_double_check("v", 4, 0),
        Err(Error::NotFound(_))
    ));
    onboarded(&svc, "v");
    assert!(matches!(
        svc.start_double_check("v", 5, 0),
        Err(Error::Argument(_))
    ));
    assert!(matches!(svc.kappa(), Err(Error::Conflict(_))));
    let ids = svc.start_double_check("v", 4, 0).unwrap();
    assert_eq!(ids.len(), 4);
    assert!(matches!(
        svc.start_double_check("v", 1, 0),
        Err(Error::Conflict(_))
    ));
    let second = [S, N, N, N];
    for l in second {
        let t = svc.next_task("v").unwrap().unwrap();
        assert_eq!(t.kind, TaskKind::DoubleCheck);
        svc.submit_label("v", &t.task_id, l).unwrap();
    }
    let k = svc.kappa().unwrap();
    assert_eq!(k.n_items, 4);
    assert!((k.observed_agreement - 0.75).abs() < 1e-15);
    assert!((k.expected_agreement - 0.5).abs() < 1e-15);
    assert!((k.kappa - 0.5).abs() < 1e-15);
    let p = svc.progress();
    assert_eq!((p.double_check_total, p.double_check_labeled), (4, 4));
}

#[test]
fn double_check_sampling_is_seeded() {
    let pop: Vec<String> = (0..10_240).map(|i| format!("task-{i:06}")).collect();
    let a = sample_double_check(&pop, 1000, 42).unwrap();
    let b = sample_double_check(&pop, 1000, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 1000);
    let mut dedup = a.clone();
    dedup.dedup();
    assert_eq!(dedup.len(), 1000);
    assert_ne!(a, sample_double_check(&pop, 1000, 43).unwrap());
}

#[test]
fn kappa_worked_cases() {
    let (s, n) = (Label::Sarcastic, Label::NotSarcastic);
    assert_eq!(
        cohen_kappa(&[s, n, n, s], &[s, n, n, s]).unwrap().kappa,
        1.0
    );
    let k = cohen_kappa(&[s, s, n, n], &[s, n, n, n]).unwrap();
    assert_eq!(
        (k.observed_agreement, k.expected_agreement, k.kappa),
        (0.75, 0.5, 0.5)
    );
    let k = cohen_kappa(&[s, n, s, n], &[n, s, n, s]).unwrap();
    assert_eq!(
        (k.observed_agreement, k.expected_agreement, k.kappa),
        (0.0, 0.5, -1.0)
    );
    assert_eq!(cohen_kappa(&[n, n], &[n, n]).unwrap().kappa, 1.0);
    assert!(cohen_kappa(&[], &[]).is_err());
    assert!(cohen_kappa(&[s], &[s, n]).is_err());
}

fn labels() -> impl Strategy<Value = (Vec<Label>, Vec<Label>)> {
    (1usize..60).prop_flat_map(|n| {
        let l = prop_oneof![Just(Label::Sarcastic), Just(Label::NotSarcastic)];
        (
            prop::collection::vec(l.clone(), n),
            prop::collection::vec(l, n),
        )
    })
}

fn swap(xs: &[Label]) -> Vec<Label> {
    xs.iter()
        .map(|l| {
            if l.is_positive() {
                Label::NotSarcastic
            } else {
                Label::Sarcastic
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kappa_symmetric_and_renaming_invariant((a, b) in labels()) {
        let k = cohen_kappa(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&k.kappa));
        prop_assert!((k.kappa - cohen_kappa(&b, &a).unwrap().kappa).abs() < 1e-12);
        prop_assert!((k.kappa - cohen_kappa(&swap(&a), &swap(&b)).unwrap().kappa).abs() < 1e-12);
    }
}

#[test]
fn export_applies_resolutions() {
    let c = corpus(2, 3);
    let mut resolved: BTreeMap<String, Label> = select_candidates(&c)
        .into_iter()
        .map(|id| (id, Label::NotSarcastic))
        .collect();
    assert_eq!(export_corrected(&c, &resolved).unwrap(), c);
    resolved.insert("n001".into(), Label::Sarcastic);
    let out = export_corrected(&c, &resolved).unwrap();
    assert_eq!(out.get("n001").unwrap().label, Some(Label::Sarcastic));
    assert_eq!(out.get("p000").unwrap().label, Some(Label::Sarcastic));
    resolved.remove("n000");
    assert!(
        matches!(export_corrected(&c, &resolved), Err(Error::Unresolved(ids)) if ids == ["n000"])
    );
}

/// Original-benchmark counts per split: (positive, negative).
const MMSD: [(Split, usize, usize); 3] = [
    (Split::Train, 8642, 11174),
    (Split::Validation, 959, 1451),
    (Split::Test, 959, 1450),
];

#[test]
fn benchmark_scale_selection_and_export() {
    let mut samples = Vec::new();
    for (split, pos, neg) in MMSD {
        for (label, n) in [(Label::Sarcastic, pos), (Label::NotSarcastic, neg)] {
            for i in 0..n {
                samples.push(Sample::new(
                    format!("{split}-{}-{i}", label.index()),
                    "x",
                    "i.jpg",
                    Some(label),
                    split,
                ));
            }
        }
    }
    let c = Corpus::new(samples).unwrap();
    let candidates = select_candidates(&c);
    assert_eq!(candidates.len(), 11174 + 1451 + 1450);
    assert!(2 * candidates.len() > c.len());

    let flips = BTreeMap::from([
        (Split::Train, 930),
        (Split::Validation, 83),
        (Split::Test, 78),
    ]);
    let mut taken = BTreeMap::new();
    let resolved: BTreeMap<String, Label> = candidates
        .iter()
        .map(|id| {
            let split = c.get(id).unwrap().split;
            let k = taken.entry(split).or_insert(0);
            *k += 1;
            let label = if *k <= flips[&split] {
                Label::Sarcastic
            } else {
                Label::NotSarcastic
            };
            (id.clone(), label)
        })
        .collect();
    let out = export_corrected(&c, &resolved).unwrap();
    let positives = |split| {
        out.split(split)
            .filter(|s| s.label == Some(Label::Sarcastic))
            .count()
    };
    assert_eq!(positives(Split::Train), 9572);
    assert_eq!(positives(Split::Validation), 1042);
    assert_eq!(positives(Split::Test), 1037);
}

#[test]
fn service_export_writes_corpus_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        log_path: None,
        export_path: Some(dir.path().join("out.jsonl")),
        snapshot_path: Some(dir.path().join("snap.json")),
    };
    let svc = service(corpus(1, 2), config);
    onboarded(&svc, "w");
    assert!(matches!(svc.export(), Err(Error::Unresolved(ids)) if ids.len() == 2));
    for l in [S, N] {
        let t = svc.next_task("w").unwrap().unwrap();
        svc.submit_label("w", &t.task_id, l).unwrap();
    }
    let (corrected, summary) = svc.export().unwrap();
    assert_eq!(summary.flipped, vec!["n000"]);
    assert_eq!(summary.positives_before[&Split::Train], 1);
    assert_eq!(summary.positives_after[&Split::Train], 2);
    let reloaded = sarcasm_core::corpus::load_corpus(dir.path().join("out.jsonl")).unwrap();
    assert_eq!(reloaded, corrected);
    let snap: Snapshot =
        serde_json::from_slice(&std::fs::read(dir.path().join("snap.json")).unwrap()).unwrap();
    assert_eq!(snap, svc.snapshot());
}

#[test]
fn log_replay_reconstructs_state() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let config = ServiceConfig {
        log_path: Some(log.clone()),
        ..ServiceConfig::default()
    };
    let c = corpus(2, 6);
    let svc = service(c.clone(), config.clone());
    onboarded(&svc, "a");
    onboarded(&svc, "b");
    svc.register("e", Role::Expert).unwrap();
    for (who, l) in [("a", S), ("b", U), ("a", N), ("b", S), ("a", N)] {
        let t = svc.next_task(who).unwrap().unwrap();
        svc.submit_label(who, &t.task_id, l).unwrap();
    }
    svc.next_task("e").unwrap().unwrap();
    svc.next_task("a").unwrap().unwrap(); // left assigned
    let live = svc.snapshot();
    drop(svc);

    let text = std::fs::read_to_string(&log).unwrap();
    let records: Vec<Record> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let label_lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["type"] == "label")
        .collect();
    assert_eq!(label_lines.len(), 5);
    for v in &label_lines {
        for key in ["task_id", "annotator_id", "label", "timestamp"] {
            assert!(v.get(key).is_some(), "{key} missing in {v}");
        }
    }
    let replayed = State::replay(&select_candidates(&c), &records).unwrap();
    assert_eq!(replayed.snapshot(), live);

    // Reopening the service replays too, and keeps appending.
    let svc = service(c, config);
    assert_eq!(svc.snapshot(), live);
    let pending = svc.next_task("a").unwrap().unwrap();
    svc.submit_label("a", &pending.task_id, S).unwrap();
    assert_eq!(
        std::fs::read_to_string(&log).unwrap().lines().count(),
        records.len() + 1
    );
}

#[test]
fn corrupt_log_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    std::fs::write(&log, "{\"type\":\"assign\",\"task_id\":\"task-000000\",\"annotator_id\":\"nobody\",\"timestamp\":1}\n").unwrap();
    let r = Service::open(
        corpus(0, 1),
        gold(3),
        ServiceConfig {
            log_path: Some(log),
            ..ServiceConfig::default()
        },
    );
    assert!(matches!(r, Err(Error::Log { line: 1, .. })));
}

#[test]
fn concurrent_polls_never_share_a_task() {
    let svc = Arc::new(service(corpus(0, 150), ServiceConfig::default()));
    onboarded(&svc, "a");
    onboarded(&svc, "b");
    let handles: Vec<_> = ["a", "b"]
        .into_iter()
        .map(|who| {
            let svc = Arc::clone(&svc);
            thread::spawn(move || {
                let mut got = Vec::new();
                for _ in 0..100 {
                    if let Some(t) = svc.next_task(who).unwrap() {
                        svc.submit_label(who, &t.task_id, N).unwrap();
                        got.push(t.task_id);
                    }
                }
                got
            })
        })
        .collect();
    let lists: Vec<Vec<String>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let mut all: Vec<&String> = lists.iter().flatten().collect();
    assert_eq!(all.len(), 150);
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 150);
}
