//! Review service contract: visibility, protocol guards, scoring and replay.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use regverify_core::eval::ErrorCategory;
use regverify_core::pose::RegistrationLabel;
use regverify_core::review::{
    decisions_csv, summary_csv, surveys_csv, AcknowledgeInput, AiEvaluation, BankCase, CaseBank,
    CaseBankMeta, CreateSession, DecisionInput, ExportFilter, ManualClock, NextCase, ReviewConfig,
    ReviewService, StudyCondition, SurveyInput, TlxScores, DECISION_COLUMNS, SUMMARY_COLUMNS,
};
use regverify_core::Error;

const ACCEPT: RegistrationLabel = RegistrationLabel::Accept;
const REJECT: RegistrationLabel = RegistrationLabel::Reject;

fn case(i: usize, cat: ErrorCategory) -> BankCase {
    let (ai, truth) = match cat {
        ErrorCategory::Tp => (ACCEPT, ACCEPT),
        ErrorCategory::Tn => (REJECT, REJECT),
        ErrorCategory::Fp => (ACCEPT, REJECT),
        ErrorCategory::Fn => (REJECT, ACCEPT),
    };
    BankCase {
        case_id: format!("case-{i:03}"),
        source_uid: format!("specimen-00/proj-000/s-{i:03}"),
        ground_truth: truth,
        category: cat,
        ai_prediction: ai,
        ai_probability: if ai == ACCEPT { 0.8 } else { 0.2 },
        prediction_set: vec![ai],
        set_certain: true,
        set_fallback: false,
    }
}

fn bank(cats: &[ErrorCategory], per: usize) -> CaseBank {
    let mut cases = Vec::new();
    for &c in cats {
        for _ in 0..per {
            cases.push(case(cases.len(), c));
        }
    }
    CaseBank::in_memory(CaseBankMeta::default(), cases)
}

fn service(dir: &Path, bank: CaseBank, clock: Arc<ManualClock>) -> ReviewService {
    ReviewService::open(bank, ReviewConfig::default(), dir, clock).unwrap()
}

fn full_bank() -> CaseBank {
    bank(&ErrorCategory::ALL, 12)
}

fn create(svc: &ReviewService, who: &str, seed: u64) -> String {
    svc.create_session(CreateSession {
        participant: who.into(),
        seed: Some(seed),
    })
    .unwrap()
    .0
    .session
    .session_id
}

fn survey(cond: StudyCondition) -> SurveyInput {
    SurveyInput {
        condition: cond,
        tlx: TlxScores {
            mental_demand: 0,
            physical_demand: 0,
            temporal_demand: 0,
            performance: 0,
            effort: 0,
            frustration: 0,
        },
        ai: cond.shows_ai().then_some(AiEvaluation {
            usefulness: 4,
            trust: 4,
            understanding: 4,
        }),
        free_text: None,
    }
}

/// Runs a whole session, answering with `decide(ai_prediction, truth)`.
fn run_session(svc: &ReviewService, id: &str, decide: impl Fn(&BankCase) -> RegistrationLabel) {
    loop {
        match svc.next_case(id).unwrap() {
            NextCase::Case(p) => {
                if p.human_input_enabled {
                    let c = svc.bank().get(&p.case_id).unwrap().clone();
                    svc.submit_decision(
                        id,
                        DecisionInput {
                            case_id: p.case_id,
                            decision: decide(&c),
                            client_latency_ms: Some(10),
                            idempotency_key: None,
                        },
                    )
                    .unwrap();
                } else {
                    svc.acknowledge(id, AcknowledgeInput { case_id: p.case_id })
                        .unwrap();
                }
            }
            NextCase::ConditionComplete { condition, .. } => {
                svc.submit_survey(id, survey(condition)).unwrap();
            }
            NextCase::SessionComplete => break,
        }
    }
}

fn keys(v: &serde_json::Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn payload_fields_follow_condition_visibility() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let id = create(&svc, "p1", 7);
    let base: BTreeSet<String> = [
        "status",
        "session_id",
        "condition",
        "case_id",
        "index",
        "total",
        "xray_url",
        "drr_url",
        "human_input_enabled",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let with = |extra: &[&str]| -> BTreeSet<String> {
        base.iter()
            .cloned()
            .chain(extra.iter().map(|s| s.to_string()))
            .collect()
    };
    let expected: BTreeMap<StudyCondition, BTreeSet<String>> = [
        (StudyCondition::HumanOnly, with(&[])),
        (
            StudyCondition::AiOnly,
            with(&["ai_prediction", "ai_probability", "auto_decision"]),
        ),
        (
            StudyCondition::HumanAi,
            with(&["ai_prediction", "ai_probability"]),
        ),
        (
            StudyCondition::HumanXai,
            with(&[
                "ai_prediction",
                "ai_probability",
                "heatmap_url",
                "prediction_set",
            ]),
        ),
    ]
    .into();
    let mut seen = BTreeSet::new();
    loop {
        match svc.next_case(&id).unwrap() {
            NextCase::Case(p) => {
                let json = serde_json::to_value(NextCase::Case(p.clone())).unwrap();
                assert_eq!(keys(&json), expected[&p.condition], "{}", p.condition);
                assert!(json.as_object().unwrap().values().all(|v| !v.is_null()));
                assert_eq!(p.human_input_enabled, p.condition != StudyCondition::AiOnly);
                seen.insert(p.condition);
                if p.human_input_enabled {
                    let d = DecisionInput {
                        case_id: p.case_id,
                        decision: ACCEPT,
                        client_latency_ms: None,
                        idempotency_key: None,
                    };
                    svc.submit_decision(&id, d).unwrap();
                } else {
                    assert_eq!(p.auto_decision, p.ai.ai_prediction);
                    svc.acknowledge(&id, AcknowledgeInput { case_id: p.case_id })
                        .unwrap();
                }
            }
            NextCase::ConditionComplete {
                condition,
                survey_required,
            } => {
                assert!(survey_required);
                svc.submit_survey(&id, survey(condition)).unwrap();
            }
            NextCase::SessionComplete => break,
        }
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn sessions_are_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let (a, created) = svc
        .create_session(CreateSession {
            participant: "p1".into(),
            seed: Some(7),
        })
        .unwrap();
    assert!(created);
    let (b, created) = svc
        .create_session(CreateSession {
            participant: "p1".into(),
            seed: Some(7),
        })
        .unwrap();
    assert!(!created);
    assert_eq!(a, b);
    // a separate store with the same inputs plans the same session
    let other = tempfile::tempdir().unwrap();
    let svc2 = service(other.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let c = svc2.session(&create(&svc2, "p1", 7)).unwrap();
    assert_eq!(a.session, c.session);

    let s = &a.session;
    let order: BTreeSet<_> = s.condition_order.iter().collect();
    assert_eq!(order.len(), 4);
    let mut all = BTreeSet::new();
    for cond in StudyCondition::ALL {
        let list = &s.cases[&cond];
        assert_eq!(list.len(), 12);
        let per_cat = list.iter().fold(BTreeMap::new(), |mut m, id| {
            *m.entry(svc.bank().get(id).unwrap().category).or_insert(0) += 1;
            m
        });
        assert!(per_cat.values().all(|&n| n == 3));
        all.extend(list.iter().cloned());
    }
    // disjoint across conditions by default
    assert_eq!(all.len(), 48);
}

#[test]
fn condition_orders_are_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let mut counts: BTreeMap<Vec<StudyCondition>, usize> = BTreeMap::new();
    let n = 100;
    for i in 0..n {
        let view = svc
            .create_session(CreateSession {
                participant: format!("participant-{i}"),
                seed: Some(1000 + i),
            })
            .unwrap()
            .0;
        *counts.entry(view.session.condition_order).or_default() += 1;
    }
    assert_eq!(counts.len(), 24, "orderings observed: {}", counts.len());
    let expected = n as f64 / 24.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // upper 0.001 critical value of chi-square with 23 degrees of freedom
    assert!(chi2 < 49.728, "chi2 {chi2}");
}

#[test]
fn decision_protocol_guards() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(1_000));
    let svc = service(dir.path(), full_bank(), clock.clone());
    let id = create(&svc, "p1", 3);
    let first = svc.session(&id).unwrap().session.condition_order[0];

    // never issued
    let never = DecisionInput {
        case_id: "case-999".into(),
        decision: ACCEPT,
        client_latency_ms: None,
        idempotency_key: None,
    };
    assert!(matches!(
        svc.submit_decision(&id, never),
        Err(Error::Protocol(_))
    ));
    assert!(matches!(
        svc.next_case("s-missing"),
        Err(Error::NotFound(_))
    ));

    // skip to a human-input condition if AI_ONLY comes first
    let mut p = match svc.next_case(&id).unwrap() {
        NextCase::Case(p) => p,
        other => panic!("{other:?}"),
    };
    if first == StudyCondition::AiOnly {
        let d = DecisionInput {
            case_id: p.case_id.clone(),
            decision: ACCEPT,
            client_latency_ms: None,
            idempotency_key: None,
        };
        assert!(matches!(
            svc.submit_decision(&id, d),
            Err(Error::Protocol(_))
        ));
        return;
    }
    // refresh returns the same case with the original issue time
    clock.advance(500);
    let again = match svc.next_case(&id).unwrap() {
        NextCase::Case(q) => q,
        other => panic!("{other:?}"),
    };
    assert_eq!(again, p);
    clock.advance(250);
    let ack = svc
        .submit_decision(
            &id,
            DecisionInput {
                case_id: p.case_id.clone(),
                decision: REJECT,
                client_latency_ms: Some(1),
                idempotency_key: None,
            },
        )
        .unwrap();
    assert_eq!(ack.server_latency_ms, Some(750));

    let log = dir.path().join(format!("{id}.jsonl"));
    let before = std::fs::read(&log).unwrap();
    let dup = DecisionInput {
        case_id: p.case_id.clone(),
        decision: ACCEPT,
        client_latency_ms: None,
        idempotency_key: None,
    };
    assert!(matches!(
        svc.submit_decision(&id, dup),
        Err(Error::Duplicate(_))
    ));
    assert_eq!(std::fs::read(&log).unwrap(), before, "store unchanged");

    // surveys before completion are refused
    assert!(matches!(
        svc.submit_survey(&id, survey(first)),
        Err(Error::Protocol(_))
    ));
    p = match svc.next_case(&id).unwrap() {
        NextCase::Case(q) => q,
        other => panic!("{other:?}"),
    };
    assert_eq!(p.index, 2);
}

/// Drives a session until `cond` is current, answering everything else.
fn advance_to(
    svc: &ReviewService,
    id: &str,
    cond: StudyCondition,
) -> regverify_core::review::CasePayload {
    loop {
        match svc.next_case(id).unwrap() {
            NextCase::Case(p) if p.condition == cond => return p,
            NextCase::Case(p) if p.human_input_enabled => {
                let d = DecisionInput {
                    case_id: p.case_id,
                    decision: ACCEPT,
                    client_latency_ms: None,
                    idempotency_key: None,
                };
                svc.submit_decision(id, d).unwrap();
            }
            NextCase::Case(p) => {
                svc.acknowledge(id, AcknowledgeInput { case_id: p.case_id })
                    .unwrap();
            }
            NextCase::ConditionComplete { condition, .. } => {
                svc.submit_survey(id, survey(condition)).unwrap();
            }
            NextCase::SessionComplete => panic!("{cond} never reached"),
        }
    }
}

#[test]
fn ai_only_cases_wait_for_acknowledgement() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let id = create(&svc, "p1", 11);
    let p = advance_to(&svc, &id, StudyCondition::AiOnly);
    // refreshing neither skips nor re-records
    let decisions = svc.session(&id).unwrap().decisions;
    assert_eq!(svc.next_case(&id).unwrap(), NextCase::Case(p.clone()));
    assert_eq!(svc.session(&id).unwrap().decisions, decisions);
    let d = DecisionInput {
        case_id: p.case_id.clone(),
        decision: ACCEPT,
        client_latency_ms: None,
        idempotency_key: None,
    };
    assert!(matches!(
        svc.submit_decision(&id, d),
        Err(Error::Protocol(_))
    ));
    let stray = AcknowledgeInput {
        case_id: "case-999".into(),
    };
    assert!(matches!(
        svc.acknowledge(&id, stray),
        Err(Error::Protocol(_))
    ));
    let ack = AcknowledgeInput {
        case_id: p.case_id.clone(),
    };
    svc.acknowledge(&id, ack.clone()).unwrap();
    svc.acknowledge(&id, ack).unwrap();
    match svc.next_case(&id).unwrap() {
        NextCase::Case(q) => {
            assert_eq!(q.condition, StudyCondition::AiOnly);
            assert_eq!(q.index, p.index + 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn retries_with_the_same_idempotency_key_are_acknowledged() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let svc = service(dir.path(), full_bank(), clock.clone());
    let id = create(&svc, "p1", 12);
    let p = advance_to(&svc, &id, StudyCondition::HumanAi);
    clock.advance(40);
    let d = DecisionInput {
        case_id: p.case_id.clone(),
        decision: REJECT,
        client_latency_ms: Some(33),
        idempotency_key: Some("k-1".into()),
    };
    let first = svc.submit_decision(&id, d.clone()).unwrap();
    let log = dir.path().join(format!("{id}.jsonl"));
    let before = std::fs::read(&log).unwrap();
    clock.advance(1000);
    assert_eq!(svc.submit_decision(&id, d.clone()).unwrap(), first);
    let mut other = d.clone();
    other.decision = ACCEPT;
    assert!(matches!(
        svc.submit_decision(&id, other),
        Err(Error::Duplicate(_))
    ));
    let mut other = d;
    other.idempotency_key = Some("k-2".into());
    assert!(matches!(
        svc.submit_decision(&id, other),
        Err(Error::Duplicate(_))
    ));
    assert_eq!(std::fs::read(&log).unwrap(), before);
}

#[test]
fn survey_validation() {
    let mut s = survey(StudyCondition::HumanOnly);
    s.validate().unwrap();
    s.tlx.effort = 101;
    assert!(matches!(s.validate(), Err(Error::Validation(_))));
    let mut s = survey(StudyCondition::HumanOnly);
    s.ai = Some(AiEvaluation {
        usefulness: 3,
        trust: 3,
        understanding: 3,
    });
    assert!(matches!(s.validate(), Err(Error::Validation(_))));
    let mut s = survey(StudyCondition::HumanXai);
    s.ai = None;
    assert!(s.validate().is_err());
    let mut s = survey(StudyCondition::HumanXai);
    s.ai.as_mut().unwrap().trust = 8;
    assert!(s.validate().is_err());
    // unknown fields are rejected at the schema level
    let raw = r#"{"condition":"HUMAN_ONLY","tlx":{"mental_demand":0,"physical_demand":0,"temporal_demand":0,"performance":0,"effort":0,"frustration":0},"mood":1}"#;
    assert!(serde_json::from_str::<SurveyInput>(raw).is_err());
}

#[test]
fn duplicate_survey_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let id = create(&svc, "p1", 4);
    run_session(&svc, &id, |c| c.ground_truth);
    let cond = StudyCondition::HumanOnly;
    assert!(matches!(
        svc.submit_survey(&id, survey(cond)),
        Err(Error::Duplicate(_))
    ));
}

fn summary_for(
    svc: &ReviewService,
    cond: StudyCondition,
) -> regverify_core::review::ConditionSummary {
    let export = svc.export(&ExportFilter::default());
    export
        .summary
        .into_iter()
        .find(|s| s.condition == cond)
        .unwrap()
}

#[test]
fn agreeing_with_a_perfect_ai_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = bank(&[ErrorCategory::Tp, ErrorCategory::Tn], 24);
    let svc = service(dir.path(), perfect, Arc::new(ManualClock::new(0)));
    let id = create(&svc, "p1", 1);
    run_session(&svc, &id, |c| c.ai_prediction);
    let s = summary_for(&svc, StudyCondition::HumanAi);
    assert_eq!(s.weighted_accuracy, Some(1.0));
    assert_eq!(s.accuracy, 1.0);
}

#[test]
fn matching_ai_everywhere_scores_reference_weighted_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let id = create(&svc, "p1", 1);
    run_session(&svc, &id, |c| c.ai_prediction);
    for cond in StudyCondition::ALL {
        let s = summary_for(&svc, cond);
        if cond == StudyCondition::HumanOnly {
            continue;
        }
        let w = s.weighted_accuracy.unwrap();
        assert!((w - 0.760).abs() < 1e-9, "{cond}: {w}");
        assert!(!s.weighted_partial);
        let fr: Vec<_> = s
            .categories
            .iter()
            .map(|c| c.fraction_correct.unwrap())
            .collect();
        assert_eq!(fr, vec![1.0, 1.0, 0.0, 0.0]);
    }
}

#[test]
fn exports_with_no_sessions_are_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), full_bank(), Arc::new(ManualClock::new(0)));
    let e = svc.export(&ExportFilter::default());
    assert!(e.summary.is_empty() && e.decisions.is_empty());
    let lines = |s: String| s.lines().map(str::to_string).collect::<Vec<_>>();
    assert_eq!(
        lines(summary_csv(&e).unwrap()),
        vec![SUMMARY_COLUMNS.join(",")]
    );
    assert_eq!(
        lines(decisions_csv(&e).unwrap()),
        vec![DECISION_COLUMNS.join(",")]
    );
    assert_eq!(lines(surveys_csv(&e).unwrap()).len(), 1);
}

#[test]
fn export_is_a_pure_function_of_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(5));
    {
        let svc = service(dir.path(), full_bank(), clock.clone());
        let a = create(&svc, "p1", 1);
        run_session(&svc, &a, |c| c.ground_truth);
        let b = create(&svc, "p2", 2);
        // partially completed session
        for _ in 0..3 {
            if let NextCase::Case(p) = svc.next_case(&b).unwrap() {
                if p.human_input_enabled {
                    let d = DecisionInput {
                        case_id: p.case_id,
                        decision: ACCEPT,
                        client_latency_ms: None,
                        idempotency_key: None,
                    };
                    svc.submit_decision(&b, d).unwrap();
                }
            }
        }
    }
    let s1 = service(dir.path(), full_bank(), clock.clone());
    let s2 = service(dir.path(), full_bank(), clock.clone());
    let (e1, e2) = (
        s1.export(&ExportFilter::default()),
        s2.export(&ExportFilter::default()),
    );
    assert_eq!(e1, e2);
    assert_eq!(decisions_csv(&e1).unwrap(), decisions_csv(&e2).unwrap());
    let done = s1.export(&ExportFilter {
        completed_only: true,
        ..Default::default()
    });
    assert!(done.decisions.iter().all(|d| d.participant == "p1"));
    assert_eq!(done.decisions.len(), 48);
    let only = s1.export(&ExportFilter {
        condition: Some(StudyCondition::HumanXai),
        ..Default::default()
    });
    assert!(only
        .decisions
        .iter()
        .all(|d| d.condition == StudyCondition::HumanXai));
    assert_eq!(only.summary.len(), 1);
}

#[test]
fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let copy = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let svc = service(dir.path(), full_bank(), clock.clone());
    let id = create(&svc, "p9", 9);
    for _ in 0..20 {
        match svc.next_case(&id).unwrap() {
            NextCase::Case(p) if p.human_input_enabled => {
                let d = DecisionInput {
                    case_id: p.case_id,
                    decision: REJECT,
                    client_latency_ms: None,
                    idempotency_key: None,
                };
                svc.submit_decision(&id, d).unwrap();
            }
            NextCase::Case(p) => {
                svc.acknowledge(&id, AcknowledgeInput { case_id: p.case_id })
                    .unwrap();
            }
            NextCase::ConditionComplete { condition, .. } => {
                svc.submit_survey(&id, survey(condition)).unwrap();
            }
            _ => {}
        }
    }
    svc.next_case(&id).unwrap();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), copy.path().join(entry.file_name())).unwrap();
    }
    // the live service and a replayed copy answer identically
    let restarted = service(copy.path(), full_bank(), clock.clone());
    assert_eq!(restarted.session(&id).unwrap(), svc.session(&id).unwrap());
    assert_eq!(
        restarted.next_case(&id).unwrap(),
        svc.next_case(&id).unwrap()
    );
    assert_eq!(
        restarted.export(&ExportFilter::default()),
        svc.export(&ExportFilter::default())
    );
}

#[test]
fn empty_bank_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), bank(&[], 0), Arc::new(ManualClock::new(0)));
    let err = svc
        .create_session(CreateSession {
            participant: "p".into(),
            seed: None,
        })
        .unwrap_err();
    assert!(matches!(err, Error::Dependency(_)));
    assert!(matches!(
        CaseBank::load(dir.path()),
        Err(Error::Dependency(_))
    ));
    let small = service(
        dir.path(),
        bank(&ErrorCategory::ALL, 2),
        Arc::new(ManualClock::new(0)),
    );
    let err = small
        .create_session(CreateSession {
            participant: "p".into(),
            seed: None,
        })
        .unwrap_err();
    assert!(matches!(err, Error::Shortage { .. }));
}

#[test]
fn concurrent_sessions_do_not_interfere() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(service(
        dir.path(),
        bank(&ErrorCategory::ALL, 60),
        Arc::new(ManualClock::new(0)),
    ));
    let ids: Vec<String> = (0..4).map(|i| create(&svc, &format!("c{i}"), i)).collect();
    std::thread::scope(|s| {
        for id in &ids {
            let svc = svc.clone();
            s.spawn(move || run_session(&svc, id, |c| c.ground_truth));
        }
    });
    let e = svc.export(&ExportFilter {
        completed_only: true,
        ..Default::default()
    });
    assert_eq!(e.decisions.len(), 4 * 48);
    assert_eq!(e.surveys.len(), 16);
    assert!(e
        .summary
        .iter()
        .filter(|s| s.condition != StudyCondition::AiOnly)
        .all(|s| s.accuracy == 1.0));
}
