//! Session lifecycle over a shared engine. Each session has its own lock
//! and journal; a committed copy of its record serves concurrent reads.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use mcat_core::adaptive::{Engine, Readout, Session};
use mcat_core::data::{load_item_bank, ItemBank};
use mcat_core::efa::FactorStructure;
use mcat_core::error::{EmbedError, SessionError};
use mcat_core::langmodel::{score_answer, AnswerInput, EmbeddingClient, HttpEmbeddingClient, TrainedModel};
use parking_lot::{Mutex, RwLock};

use crate::api::*;
use crate::config::ServiceConfig;
use crate::journal::{Journal, SessionRecord, TurnEntry, RECORD_SCHEMA};

/// Error returned to API clients as `{code, message}` with an HTTP status.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "invalid_request", message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(404, code, message)
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(409, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, "internal", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code.to_string(),
            message: self.message.clone(),
        }
    }
}

impl From<mcat_core::Error> for ServiceError {
    fn from(e: mcat_core::Error) -> Self {
        use mcat_core::Error as E;
        let message = e.to_string();
        match e {
            E::Session(s) => match s {
                SessionError::OutOfOrder { .. } => Self::conflict("out_of_order", message),
                SessionError::Duplicate(_) => Self::conflict("duplicate", message),
                SessionError::Stopped | SessionError::PoolEmpty => Self::conflict("session_stopped", message),
                SessionError::CategoryRange { .. } => Self::new(400, "invalid_answer", message),
                SessionError::EmptyBank => Self::internal(message),
            },
            E::Embedding(EmbedError::Timeout | EmbedError::Unavailable(_)) => {
                Self::new(503, "embedding_unavailable", message)
            }
            E::Embedding(EmbedError::Malformed(_)) => Self::new(502, "embedding_malformed", message),
            E::Embedding(EmbedError::NotConfigured) => Self::new(400, "free_text_unavailable", message),
            E::Invalid(_) | E::UnknownItem(_) | E::Dimension { .. } => Self::bad_request(message),
            _ => Self::internal(message),
        }
    }
}

fn io_error(e: std::io::Error) -> ServiceError {
    ServiceError::internal(format!("storage failure: {e}"))
}

fn check_schema(schema: Option<&str>) -> Result<(), ServiceError> {
    match schema {
        Some(s) if s != API_SCHEMA => Err(ServiceError::bad_request(format!(
            "unsupported schema `{s}` (expected `{API_SCHEMA}`)"
        ))),
        _ => Ok(()),
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Everything a service needs besides its storage directory.
pub struct ServiceParts {
    pub engine: Engine,
    pub model: Option<TrainedModel>,
    pub client: Option<Arc<dyn EmbeddingClient>>,
    pub data_dir: PathBuf,
    pub compact_every: usize,
}

struct SlotState {
    record: SessionRecord,
    journal: Journal,
}

struct Slot {
    state: Mutex<SlotState>,
    committed: RwLock<Arc<SessionRecord>>,
}

pub struct Service {
    engine: Engine,
    model: Option<TrainedModel>,
    client: Option<Arc<dyn EmbeddingClient>>,
    data_dir: PathBuf,
    compact_every: usize,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("bank_id", &self.engine.bank_id())
            .field("data_dir", &self.data_dir)
            .field("sessions", &self.sessions.read().len())
            .finish()
    }
}

impl Service {
    /// Opens the data directory and restores every journaled session.
    pub fn open(parts: ServiceParts) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&parts.data_dir).map_err(io_error)?;
        let service = Self {
            engine: parts.engine,
            model: parts.model,
            client: parts.client,
            data_dir: parts.data_dir,
            compact_every: parts.compact_every.max(1),
            sessions: RwLock::new(HashMap::new()),
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&service.data_dir)
            .map_err(io_error)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        paths.sort();
        for path in paths {
            match path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => {
                    let (id, slot) = service.restore(&path)?;
                    service.sessions.write().insert(id, Arc::new(slot));
                }
                // interrupted compaction; the journal itself is intact
                Some("tmp") => std::fs::remove_file(&path).map_err(io_error)?,
                _ => {}
            }
        }
        Ok(service)
    }

    /// Loads bank, structure and optional model named by `config`.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p)
                .map_err(|e| ServiceError::internal(format!("cannot read {}: {e}", p.display())))
        };
        let bank: ItemBank = load_item_bank(read(&config.bank_path)?.as_bytes())?;
        let structure = FactorStructure::from_json_str(&read(&config.structure_path)?)?;
        let readout = Readout::from_structure(&structure)?;
        let engine = Engine::new(Arc::new(bank), config.bank_id.clone(), readout)?;
        let model = match &config.model_path {
            Some(p) => Some(TrainedModel::from_json_str(&read(p)?)?),
            None => None,
        };
        let client = config.embedding_url.as_ref().map(|url| {
            Arc::new(HttpEmbeddingClient::new(
                url.clone(),
                Duration::from_millis(config.embedding_timeout_ms),
            )) as Arc<dyn EmbeddingClient>
        });
        Self::open(ServiceParts {
            engine,
            model,
            client,
            data_dir: config.data_dir.clone(),
            compact_every: config.compact_every,
        })
    }

    fn restore(&self, path: &Path) -> Result<(String, Slot), ServiceError> {
        let (journal, contents) = Journal::open(path).map_err(io_error)?;
        let mut record = contents.snapshot;
        if record.schema != RECORD_SCHEMA {
            return Err(ServiceError::internal(format!(
                "{}: unsupported record schema `{}`",
                path.display(),
                record.schema
            )));
        }
        if record.session.bank_id != self.engine.bank_id() {
            return Err(ServiceError::internal(format!(
                "{}: session uses bank `{}`, service has `{}`",
                path.display(),
                record.session.bank_id,
                self.engine.bank_id()
            )));
        }
        for turn in &contents.turns {
            self.apply_turn(&mut record, turn).map_err(|e| {
                ServiceError::internal(format!("{}: replay failed: {}", path.display(), e.message))
            })?;
        }
        let id = record.session.id.clone();
        let committed = RwLock::new(Arc::new(record.clone()));
        Ok((
            id,
            Slot {
                state: Mutex::new(SlotState { record, journal }),
                committed,
            },
        ))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn free_text_enabled(&self) -> bool {
        self.model.is_some() && self.client.is_some()
    }

    fn question_view(&self, id: &str) -> QuestionView {
        let item = self.engine.bank().get(id).expect("question comes from the bank");
        let text = self.model.as_ref().is_some_and(|m| m.discretization.0.contains_key(id));
        QuestionView {
            id: item.id.clone(),
            text: item.text.clone(),
            categories: item.num_categories,
            response_kind: if text && self.free_text_enabled() {
                ResponseKind::CategoryOrText
            } else {
                ResponseKind::Category
            },
        }
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ServiceError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found("unknown_session", format!("no session `{id}`")))
    }

    /// Advances `record` by one committed turn. Used for live answers and
    /// journal replay, so both produce identical state.
    fn apply_turn(&self, record: &mut SessionRecord, turn: &TurnEntry) -> Result<AnswerResponse, ServiceError> {
        let engine = &self.engine;
        let session = &mut record.session;
        engine.submit_response_at(session, &turn.question, turn.category, Some(turn.timestamp_ms))?;
        let next_question = if session.is_active() {
            Some(self.question_view(&engine.select_next(session)?))
        } else {
            None
        };
        let est = session.current();
        let scores = &session.condition_history.last().expect("history is non-empty").scores;
        let response = AnswerResponse {
            schema: API_SCHEMA.to_string(),
            session_id: session.id.clone(),
            accepted: true,
            turn: session.administered.len(),
            question_id: turn.question.clone(),
            category: turn.category,
            next_question,
            stop_reason: session.stop_reason(),
            estimates: EstimateSnapshot::new(est, scores),
        };
        record.updated_at_ms = record.updated_at_ms.max(turn.timestamp_ms);
        if let Some(token) = &turn.token {
            record.submissions.insert(token.clone(), response.clone());
        }
        Ok(response)
    }

    pub fn create_session(&self, req: CreateSessionRequest) -> Result<CreateSessionResponse, ServiceError> {
        check_schema(req.schema.as_deref())?;
        let bank_id = req.bank_id.unwrap_or_else(|| self.engine.bank_id().to_string());
        if bank_id != self.engine.bank_id() {
            return Err(ServiceError::not_found("unknown_bank", format!("no bank `{bank_id}`")));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut session: Session = self.engine.start_session(id.clone(), req.config.unwrap_or_default())?;
        let first = self.engine.select_next(&mut session)?;
        let now = now_ms();
        let record = SessionRecord {
            schema: RECORD_SCHEMA.to_string(),
            created_at_ms: now,
            updated_at_ms: now,
            respondent: req.respondent,
            session,
            submissions: IndexMap::new(),
        };
        let journal = Journal::create(&self.data_dir, &record).map_err(io_error)?;
        let slot = Slot {
            committed: RwLock::new(Arc::new(record.clone())),
            state: Mutex::new(SlotState { record, journal }),
        };
        self.sessions.write().insert(id.clone(), Arc::new(slot));
        Ok(CreateSessionResponse {
            schema: API_SCHEMA.to_string(),
            session_id: id,
            bank_id,
            question: self.question_view(&first),
        })
    }

    pub fn answer(&self, id: &str, req: AnswerRequest) -> Result<AnswerResponse, ServiceError> {
        check_schema(req.schema.as_deref())?;
        let slot = self.slot(id)?;
        let mut st = slot.state.lock();
        if let Some(token) = &req.submission_token {
            if let Some(previous) = st.record.submissions.get(token) {
                if previous.question_id != req.question_id {
                    return Err(ServiceError::conflict(
                        "token_reused",
                        format!("submission token `{token}` was used for `{}`", previous.question_id),
                    ));
                }
                return Ok(previous.clone());
            }
        }
        precheck(&st.record.session, &req.question_id)?;
        let category = match &req.answer {
            AnswerValue::Category(k) => *k,
            AnswerValue::Text(text) => self.score_text(&req.question_id, text)?,
        };
        let turn = TurnEntry {
            question: req.question_id.clone(),
            category,
            timestamp_ms: now_ms().max(st.record.updated_at_ms),
            token: req.submission_token.clone(),
        };
        let mut next = st.record.clone();
        let response = self.apply_turn(&mut next, &turn)?;
        if let Err(e) = st.journal.append_turn(&turn) {
            // the line may or may not have reached disk: resync from it
            let path = Journal::path_for(&self.data_dir, id);
            if let Ok((_, restored)) = self.restore(&path) {
                *st = restored.state.into_inner();
                *slot.committed.write() = Arc::new(st.record.clone());
            }
            return Err(io_error(e));
        }
        st.record = next;
        *slot.committed.write() = Arc::new(st.record.clone());
        if st.journal.turns_since_snapshot() >= self.compact_every || !st.record.session.is_active() {
            let SlotState { record, journal } = &mut *st;
            // the turn is already durable; a failed compaction only leaves a longer journal
            if let Err(e) = journal.compact(record) {
                eprintln!("warning: compaction of session {id} failed: {e}");
            }
        }
        Ok(response)
    }

    fn score_text(&self, question: &str, text: &str) -> Result<usize, ServiceError> {
        let model = self.model.as_ref().ok_or_else(|| {
            ServiceError::new(400, "free_text_unavailable", "no embedding model is loaded; answer with a category")
        })?;
        let client = self.client.as_deref().ok_or_else(|| {
            ServiceError::new(400, "free_text_unavailable", "no embedding endpoint is configured; answer with a category")
        })?;
        Ok(score_answer(model, question, AnswerInput::Text(text), Some(client))?)
    }

    /// Latest committed record.
    pub fn record(&self, id: &str) -> Result<Arc<SessionRecord>, ServiceError> {
        Ok(self.slot(id)?.committed.read().clone())
    }

    pub fn session_view(&self, id: &str) -> Result<SessionView, ServiceError> {
        let record = self.record(id)?;
        let s = &record.session;
        let max_items = s.config.stopping.max_items.unwrap_or(self.engine.bank().len()).min(self.engine.bank().len());
        Ok(SessionView {
            schema: API_SCHEMA.to_string(),
            session_id: s.id.clone(),
            bank_id: s.bank_id.clone(),
            respondent: record.respondent.clone(),
            created_at_ms: record.created_at_ms,
            updated_at_ms: record.updated_at_ms,
            status: s.status,
            answered: s.administered.len(),
            max_items,
            pending_question: s.pending.as_deref().map(|q| self.question_view(q)),
            administered: s.administered.clone(),
        })
    }

    pub fn estimates(&self, id: &str) -> Result<EstimatesView, ServiceError> {
        let record = self.record(id)?;
        let s = &record.session;
        let est = s.current();
        let history = s
            .administered
            .iter()
            .enumerate()
            .map(|(t, a)| HistoryEntry {
                turn: t + 1,
                question_id: a.question.clone(),
                category: a.category,
                theta: s.theta_history[t + 1].theta.iter().copied().collect(),
                scores: s.condition_history[t + 1].scores.clone(),
            })
            .collect();
        let snap = EstimateSnapshot::new(est, &s.condition_history.last().expect("non-empty").scores);
        Ok(EstimatesView {
            schema: API_SCHEMA.to_string(),
            session_id: s.id.clone(),
            turns: s.administered.len(),
            theta: snap.theta,
            covariance: snap.covariance,
            standard_errors: est.standard_errors(),
            scores: snap.scores,
            history,
            stop: StopState {
                stopped: !s.is_active(),
                reason: s.stop_reason(),
            },
        })
    }

    pub fn bank_view(&self) -> BankView {
        let bank = self.engine.bank();
        BankView {
            schema: API_SCHEMA.to_string(),
            bank_id: self.engine.bank_id().to_string(),
            dimensions: bank.dim(),
            conditions: self.engine.readout().conditions.clone(),
            items: bank
                .items()
                .iter()
                .map(|i| BankItemView {
                    id: i.id.clone(),
                    text: i.text.clone(),
                    categories: i.num_categories,
                    factor_mask: i.factor_mask.clone(),
                })
                .collect(),
        }
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Protocol checks that must pass before an answer is scored.
fn precheck(session: &Session, question: &str) -> Result<(), ServiceError> {
    if !session.is_active() {
        return Err(mcat_core::Error::from(SessionError::Stopped).into());
    }
    if session.pending.as_deref() != Some(question) {
        let err = if session.administered.iter().any(|a| a.question == question) {
            SessionError::Duplicate(question.to_string())
        } else {
            SessionError::OutOfOrder {
                pending: session.pending.clone(),
                got: question.to_string(),
            }
        };
        return Err(mcat_core::Error::from(err).into());
    }
    Ok(())
}
