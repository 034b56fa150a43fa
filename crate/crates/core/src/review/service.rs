//! Study orchestration: session creation, case issuing with per-condition
//! visibility, decision and survey recording.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::index::sample;
use rand::seq::SliceRandom;

use super::bank::{CaseBank, DRR_ASSET, HEATMAP_ASSET, XRAY_ASSET};
use super::export::{build_export, Export, ExportFilter};
use super::store::{Event, EventStore};
use super::types::*;
use crate::error::{Error, Result};
use crate::hashing::bytes_hash;
use crate::rng::task_rng;

/// Millisecond wall clock; injectable for tests.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Cases(StudyCondition),
    Survey(StudyCondition),
    Done,
}

#[derive(Debug)]
struct SessionState {
    session: Session,
    /// Issue time per `(condition, case)`.
    issued: HashMap<(StudyCondition, String), u64>,
    acknowledged: HashSet<(StudyCondition, String)>,
    decisions: Vec<DecisionRecord>,
    surveys: Vec<SurveyResponse>,
}

impl SessionState {
    fn new(session: Session) -> Self {
        Self {
            session,
            issued: HashMap::new(),
            acknowledged: HashSet::new(),
            decisions: Vec::new(),
            surveys: Vec::new(),
        }
    }

    fn apply(&mut self, ev: Event) {
        match ev {
            Event::SessionCreated { session } => self.session = session,
            Event::CaseIssued {
                condition,
                case_id,
                at_ms,
            } => {
                self.issued.entry((condition, case_id)).or_insert(at_ms);
            }
            Event::Decision { record } => self.decisions.push(record),
            Event::CaseAcknowledged {
                condition, case_id, ..
            } => {
                self.acknowledged.insert((condition, case_id));
            }
            Event::Survey { response } => self.surveys.push(response),
        }
    }

    fn decision(&self, cond: StudyCondition, case_id: &str) -> Option<&DecisionRecord> {
        self.decisions
            .iter()
            .find(|d| d.condition == cond && d.case_id == case_id)
    }

    /// Decided, and for auto-decided conditions also acknowledged.
    fn finished(&self, cond: StudyCondition, case_id: &str) -> bool {
        self.decision(cond, case_id).is_some()
            && (cond.human_input() || self.acknowledged.contains(&(cond, case_id.to_string())))
    }

    fn answered(&self, cond: StudyCondition) -> usize {
        self.session.cases[&cond]
            .iter()
            .filter(|c| self.finished(cond, c))
            .count()
    }

    fn surveyed(&self, cond: StudyCondition) -> bool {
        self.surveys.iter().any(|s| s.input.condition == cond)
    }

    fn stage(&self) -> Stage {
        for &cond in &self.session.condition_order {
            if self.answered(cond) < self.session.cases[&cond].len() {
                return Stage::Cases(cond);
            }
            if !self.surveyed(cond) {
                return Stage::Survey(cond);
            }
        }
        Stage::Done
    }

    fn view(&self) -> SessionView {
        let stage = self.stage();
        SessionView {
            session: self.session.clone(),
            status: if stage == Stage::Done {
                SessionStatus::Complete
            } else {
                SessionStatus::Active
            },
            current_condition: match stage {
                Stage::Cases(c) | Stage::Survey(c) => Some(c),
                Stage::Done => None,
            },
            decisions: self.decisions.len(),
            surveys: self.surveys.len(),
        }
    }
}

pub struct ReviewService {
    bank: Arc<CaseBank>,
    config: ReviewConfig,
    store: EventStore,
    clock: Arc<dyn Clock>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<SessionState>>>>,
}

/// A resubmission with the original idempotency key and decision is
/// acknowledged again; anything else is a duplicate.
fn replay_or_duplicate(id: &str, prev: &DecisionRecord, input: &DecisionInput) -> Result<Ack> {
    let replay = input.idempotency_key.is_some()
        && prev.idempotency_key == input.idempotency_key
        && prev.human_decision == Some(input.decision);
    if !replay {
        return Err(Error::Duplicate(format!(
            "case {} already answered",
            input.case_id
        )));
    }
    Ok(Ack {
        ok: true,
        session_id: id.to_string(),
        case_id: Some(input.case_id.clone()),
        server_latency_ms: Some(prev.server_latency_ms),
    })
}

/// Deterministic id for a (participant, seed) pair.
pub fn session_id_for(participant: &str, seed: u64) -> String {
    let h = bytes_hash(format!("{participant}\u{0}{seed}").as_bytes());
    format!("s-{}", &h[..16])
}

fn asset_url(case_id: &str, file: &str) -> String {
    format!("/v1/assets/{case_id}/{file}")
}

impl ReviewService {
    /// Opens the store under `state_dir` and replays every session log.
    pub fn open(
        bank: CaseBank,
        config: ReviewConfig,
        state_dir: &Path,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let store = EventStore::open(state_dir)?;
        let mut sessions = BTreeMap::new();
        for id in store.session_ids()? {
            let events = store.read(&id)?;
            let mut iter = events.into_iter();
            let Some(Event::SessionCreated { session }) = iter.next() else {
                log::warn!("session log {id} does not start with a creation event; skipped");
                continue;
            };
            let mut st = SessionState::new(session);
            for ev in iter {
                st.apply(ev);
            }
            sessions.insert(id, Arc::new(Mutex::new(st)));
        }
        Ok(Self {
            bank: Arc::new(bank),
            config,
            store,
            clock,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn bank(&self) -> &CaseBank {
        &self.bank
    }

    pub fn config(&self) -> &ReviewConfig {
        &self.config
    }

    fn state(&self, id: &str) -> Result<Arc<Mutex<SessionState>>> {
        self.sessions
            .read()
            .expect("session index poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn plan(&self, participant: &str, seed: u64) -> Result<Session> {
        let pools = self.bank.by_category();
        if pools.is_empty() {
            return Err(Error::Dependency(vec![
                "case bank (train a fold and start the service with its checkpoint)".into(),
            ]));
        }
        let salt =
            u64::from_str_radix(&bytes_hash(participant.as_bytes())[..16], 16).expect("hex digest");
        let mut rng = task_rng(seed, &[40, salt]);
        let mut order = StudyCondition::ALL.to_vec();
        order.shuffle(&mut rng);
        let n = self.config.cases_per_category;
        let mut remaining = pools.clone();
        let mut shared: Option<Vec<String>> = None;
        let mut cases = BTreeMap::new();
        for cond in StudyCondition::ALL {
            let mut list = match (&shared, self.config.share_cases) {
                (Some(l), true) => l.clone(),
                _ => {
                    let mut list = Vec::new();
                    for (cat, pool) in remaining.iter_mut() {
                        if pool.len() < n {
                            return Err(Error::Shortage {
                                category: cat.to_string(),
                                requested: n,
                                available: pool.len(),
                            });
                        }
                        let mut idx = sample(&mut rng, pool.len(), n).into_vec();
                        idx.sort_unstable_by(|a, b| b.cmp(a));
                        for i in idx {
                            list.push(pool.remove(i));
                        }
                    }
                    if self.config.share_cases {
                        shared = Some(list.clone());
                    }
                    list
                }
            };
            list.shuffle(&mut rng);
            cases.insert(cond, list);
        }
        Ok(Session {
            session_id: session_id_for(participant, seed),
            participant: participant.to_string(),
            seed,
            condition_order: order,
            cases,
            created_at_ms: self.clock.now_ms(),
        })
    }

    /// Creates (or returns the existing) session for `(participant, seed)`.
    /// The flag is true when a new session was created.
    pub fn create_session(&self, req: CreateSession) -> Result<(SessionView, bool)> {
        let participant = req.participant.trim();
        if participant.is_empty() || participant.len() > 128 {
            return Err(Error::Validation(
                "participant pseudonym must be 1-128 characters".into(),
            ));
        }
        let seed = req.seed.unwrap_or_else(|| {
            u64::from_str_radix(&bytes_hash(participant.as_bytes())[..16], 16).expect("hex")
        });
        let id = session_id_for(participant, seed);
        let mut index = self.sessions.write().expect("session index poisoned");
        if let Some(st) = index.get(&id) {
            return Ok((st.lock().expect("session poisoned").view(), false));
        }
        let session = self.plan(participant, seed)?;
        self.store.append(
            &id,
            &Event::SessionCreated {
                session: session.clone(),
            },
        )?;
        let st = SessionState::new(session);
        let view = st.view();
        index.insert(id, Arc::new(Mutex::new(st)));
        Ok((view, true))
    }

    pub fn session(&self, id: &str) -> Result<SessionView> {
        Ok(self.state(id)?.lock().expect("session poisoned").view())
    }

    fn ai_fields(&self, cond: StudyCondition, case_id: &str) -> Result<AiFields> {
        let case = self
            .bank
            .get(case_id)
            .ok_or_else(|| Error::NotFound(format!("case {case_id}")))?;
        let mut f = AiFields::default();
        if cond.shows_ai() {
            f.ai_prediction = Some(case.ai_prediction);
            f.ai_probability = Some(case.ai_probability);
        }
        if cond.shows_explanations() {
            f.heatmap_url = Some(asset_url(case_id, HEATMAP_ASSET));
            f.prediction_set = Some(PredictionSetView {
                labels: case.prediction_set.clone(),
                certain: case.set_certain,
            });
        }
        Ok(f)
    }

    fn payload(
        &self,
        st: &SessionState,
        cond: StudyCondition,
        case_id: &str,
    ) -> Result<CasePayload> {
        let list = &st.session.cases[&cond];
        let index = list.iter().position(|c| c == case_id).map_or(0, |i| i + 1);
        let auto_decision = (!cond.human_input())
            .then(|| st.decision(cond, case_id).map(|d| d.final_decision))
            .flatten();
        Ok(CasePayload {
            session_id: st.session.session_id.clone(),
            condition: cond,
            case_id: case_id.to_string(),
            index,
            total: list.len(),
            xray_url: asset_url(case_id, XRAY_ASSET),
            drr_url: asset_url(case_id, DRR_ASSET),
            human_input_enabled: cond.human_input(),
            auto_decision,
            ai: self.ai_fields(cond, case_id)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        st: &SessionState,
        cond: StudyCondition,
        case_id: &str,
        human: Option<crate::pose::RegistrationLabel>,
        client_latency_ms: Option<u64>,
        idempotency_key: Option<String>,
        issued_at_ms: u64,
        now: u64,
    ) -> Result<DecisionRecord> {
        let case = self
            .bank
            .get(case_id)
            .ok_or_else(|| Error::NotFound(format!("case {case_id}")))?;
        let final_decision = human.unwrap_or(case.ai_prediction);
        Ok(DecisionRecord {
            session_id: st.session.session_id.clone(),
            participant: st.session.participant.clone(),
            condition: cond,
            case_id: case_id.to_string(),
            human_decision: human,
            final_decision,
            ground_truth: case.ground_truth,
            category: case.category,
            correct: final_decision == case.ground_truth,
            shown: self.ai_fields(cond, case_id)?,
            server_latency_ms: now.saturating_sub(issued_at_ms),
            client_latency_ms,
            issued_at_ms,
            decided_at_ms: now,
            idempotency_key,
        })
    }

    /// The current case. Repeated calls return the same unanswered case; the
    /// latency clock starts at its first issue.
    pub fn next_case(&self, id: &str) -> Result<NextCase> {
        let arc = self.state(id)?;
        let mut st = arc.lock().expect("session poisoned");
        let cond = match st.stage() {
            Stage::Done => return Ok(NextCase::SessionComplete),
            Stage::Survey(c) => {
                return Ok(NextCase::ConditionComplete {
                    condition: c,
                    survey_required: true,
                })
            }
            Stage::Cases(c) => c,
        };
        let case_id = st.session.cases[&cond]
            .iter()
            .find(|c| !st.finished(cond, c))
            .cloned()
            .expect("stage has an open case");
        let key = (cond, case_id.clone());
        if let std::collections::hash_map::Entry::Vacant(e) = st.issued.entry(key) {
            let now = self.clock.now_ms();
            let ev = Event::CaseIssued {
                condition: cond,
                case_id: case_id.clone(),
                at_ms: now,
            };
            self.store.append(id, &ev)?;
            e.insert(now);
            if !cond.human_input() {
                let record = self.record(&st, cond, &case_id, None, None, None, now, now)?;
                self.store.append(
                    id,
                    &Event::Decision {
                        record: record.clone(),
                    },
                )?;
                st.decisions.push(record);
            }
        }
        Ok(NextCase::Case(self.payload(&st, cond, &case_id)?))
    }

    /// Records a human decision on an issued case of the current condition.
    pub fn submit_decision(&self, id: &str, input: DecisionInput) -> Result<Ack> {
        let arc = self.state(id)?;
        let mut st = arc.lock().expect("session poisoned");
        let open = match st.stage() {
            Stage::Cases(c) => st.issued.get(&(c, input.case_id.clone())).map(|&t| (c, t)),
            _ => None,
        };
        let Some((cond, issued_at)) = open else {
            // not open now: either answered earlier or never issued
            return match st
                .decisions
                .iter()
                .find(|d| d.case_id == input.case_id && d.human_decision.is_some())
            {
                Some(prev) => replay_or_duplicate(id, prev, &input),
                None => Err(Error::Protocol(format!(
                    "case {} was not issued to this session",
                    input.case_id
                ))),
            };
        };
        if !cond.human_input() {
            return Err(Error::Protocol(format!(
                "{cond} cases take no human decision"
            )));
        }
        if let Some(prev) = st.decision(cond, &input.case_id) {
            return replay_or_duplicate(id, prev, &input);
        }
        let now = self.clock.now_ms();
        let record = self.record(
            &st,
            cond,
            &input.case_id,
            Some(input.decision),
            input.client_latency_ms,
            input.idempotency_key,
            issued_at,
            now,
        )?;
        self.store.append(
            id,
            &Event::Decision {
                record: record.clone(),
            },
        )?;
        let latency = record.server_latency_ms;
        st.decisions.push(record);
        Ok(Ack {
            ok: true,
            session_id: id.to_string(),
            case_id: Some(input.case_id),
            server_latency_ms: Some(latency),
        })
    }

    /// Moves past the current auto-decided case. Repeats are harmless.
    pub fn acknowledge(&self, id: &str, input: AcknowledgeInput) -> Result<Ack> {
        let arc = self.state(id)?;
        let mut st = arc.lock().expect("session poisoned");
        let ack = Ack {
            ok: true,
            session_id: id.to_string(),
            case_id: Some(input.case_id.clone()),
            server_latency_ms: None,
        };
        let key = st
            .issued
            .keys()
            .find(|(c, k)| !c.human_input() && *k == input.case_id)
            .cloned();
        let Some(key) = key else {
            return Err(Error::Protocol(format!(
                "case {} is not an issued auto-decided case",
                input.case_id
            )));
        };
        if st.acknowledged.contains(&key) {
            return Ok(ack);
        }
        let ev = Event::CaseAcknowledged {
            condition: key.0,
            case_id: key.1.clone(),
            at_ms: self.clock.now_ms(),
        };
        self.store.append(id, &ev)?;
        st.acknowledged.insert(key);
        Ok(ack)
    }

    pub fn submit_survey(&self, id: &str, input: SurveyInput) -> Result<Ack> {
        let arc = self.state(id)?;
        let mut st = arc.lock().expect("session poisoned");
        input.validate()?;
        let cond = input.condition;
        if st.surveyed(cond) {
            return Err(Error::Duplicate(format!(
                "survey for {cond} already submitted"
            )));
        }
        if st.answered(cond) < st.session.cases[&cond].len() {
            return Err(Error::Protocol(format!("{cond} is not completed yet")));
        }
        let response = SurveyResponse {
            session_id: id.to_string(),
            participant: st.session.participant.clone(),
            input,
            submitted_at_ms: self.clock.now_ms(),
        };
        self.store.append(
            id,
            &Event::Survey {
                response: response.clone(),
            },
        )?;
        st.surveys.push(response);
        Ok(Ack {
            ok: true,
            session_id: id.to_string(),
            case_id: None,
            server_latency_ms: None,
        })
    }

    pub fn export(&self, filter: &ExportFilter) -> Export {
        let index = self.sessions.read().expect("session index poisoned");
        let mut decisions = Vec::new();
        let mut surveys = Vec::new();
        for arc in index.values() {
            let st = arc.lock().expect("session poisoned");
            if filter.completed_only && st.stage() != Stage::Done {
                continue;
            }
            decisions.extend(st.decisions.iter().cloned());
            surveys.extend(st.surveys.iter().cloned());
        }
        build_export(decisions, surveys, filter)
    }

    pub fn asset(&self, case_id: &str, file: &str) -> Result<Vec<u8>> {
        self.bank.asset(case_id, file)
    }
}
