//! The `/v1` HTTP API.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

use habitus_core::corpus::{read_texts, CorpusError};
use habitus_core::gateway::{ChatMessage, Gateway, GatewayError};
use habitus_core::generation::{
    select_context_facts, DialogueState, GenerationError, Generator, Mode, ParaphraseExample, Turn,
};
use habitus_core::induction::{Inducer, InductionFailure};
use habitus_core::metrics::{evaluate_corpus, EvalReport, MetricMetadata, MetricsError};
use habitus_core::par::Exec;
use habitus_core::retrieval::{Embedder, EmbeddingIndex, RetrievalError, RetrievalResult};
use habitus_core::schema::{parse_schema, print_schema, EventSchema, Persona};

use crate::config::ServiceConfig;
use crate::store::{valid_id, PersonaStore, SessionData, SessionEvent, SessionStore, TranscriptTurn};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    retry_after: Option<u64>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), retry_after: None }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_input", message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    fn internal(err: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", err.to_string())
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": { "code": self.code, "message": self.message } }));
        let mut response = (self.status, body).into_response();
        if let Some(secs) = self.retry_after {
            response.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        response
    }
}

fn gateway_error(err: GatewayError, default_retry: Duration) -> ApiError {
    let (code, retry) = match &err {
        GatewayError::RateLimited { retry_after, .. } => ("rate_limited", retry_after.unwrap_or(default_retry)),
        GatewayError::CacheMiss(_) => ("cache_miss", default_retry),
        GatewayError::InvalidRequest(_) => return ApiError::unprocessable(err.to_string()),
        _ => ("provider_unavailable", default_retry),
    };
    let mut e = ApiError::new(StatusCode::BAD_GATEWAY, code, err.to_string());
    e.retry_after = Some(retry.as_secs().max(1));
    e
}

fn generation_error(err: GenerationError, default_retry: Duration) -> ApiError {
    match err {
        GenerationError::ModeMismatch { .. }
        | GenerationError::RawRequired
        | GenerationError::RawNotAllowed
        | GenerationError::EmptyUtterance
        | GenerationError::ExampleCount { .. }
        | GenerationError::Template(_) => ApiError::unprocessable(err.to_string()),
        GenerationError::MissingIndex | GenerationError::Retrieval(RetrievalError::EmptyIndex) => {
            ApiError::conflict("not_induced", "persona has no schemas yet; run induction first")
        }
        GenerationError::Retrieval(RetrievalError::EmbedderUnavailable(m)) => {
            let mut e = ApiError::new(StatusCode::BAD_GATEWAY, "embedder_unavailable", m);
            e.retry_after = Some(default_retry.as_secs().max(1));
            e
        }
        GenerationError::Gateway(g) => gateway_error(g, default_retry),
        GenerationError::EmptyGeneration => {
            let mut e = ApiError::new(StatusCode::BAD_GATEWAY, "empty_generation", err.to_string());
            e.retry_after = Some(default_retry.as_secs().max(1));
            e
        }
        other => ApiError::internal(other),
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub persona_id: String,
    pub state: JobState,
    /// Facts that needed a schema when the job started.
    pub pending: usize,
    pub completed: usize,
    pub induced: usize,
    pub skipped: usize,
    pub failures: Vec<InductionFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

struct PersonaEntry {
    persona: RwLock<Arc<Persona>>,
    index: Mutex<Option<Arc<EmbeddingIndex>>>,
    running_job: Mutex<Option<String>>,
}

impl PersonaEntry {
    fn new(persona: Persona) -> Arc<Self> {
        Arc::new(PersonaEntry {
            persona: RwLock::new(Arc::new(persona)),
            index: Mutex::new(None),
            running_job: Mutex::new(None),
        })
    }
}

struct SessionEntry {
    data: Mutex<SessionData>,
    busy: AtomicBool,
}

/// Clears a session's in-flight flag when dropped.
struct BusyGuard(Arc<SessionEntry>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::SeqCst);
    }
}

pub struct AppState {
    config: ServiceConfig,
    gateway: Gateway,
    embedder: Arc<dyn Embedder>,
    examples: Vec<ParaphraseExample>,
    persona_store: PersonaStore,
    session_store: SessionStore,
    personas: RwLock<BTreeMap<String, Arc<PersonaEntry>>>,
    sessions: RwLock<BTreeMap<String, Arc<SessionEntry>>>,
    jobs: RwLock<HashMap<String, Arc<Mutex<JobStatus>>>>,
}

impl AppState {
    /// Build the state from `config` and reload personas and sessions from
    /// its data directory.
    pub fn new(config: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let gateway = config.build_gateway()?;
        let embedder = config.build_embedder();
        Self::with_parts(config, gateway, embedder)
    }

    pub fn with_parts(config: ServiceConfig, gateway: Gateway, embedder: Arc<dyn Embedder>) -> anyhow::Result<Arc<Self>> {
        let examples = config.load_paraphrase_examples()?;
        let persona_store = PersonaStore::new(&config.data_dir);
        let session_store = SessionStore::new(&config.data_dir);
        let personas = persona_store
            .load_all()?
            .into_iter()
            .map(|p| (p.persona_id.clone(), PersonaEntry::new(p)))
            .collect();
        let sessions = session_store
            .load_all()?
            .into_iter()
            .map(|d| {
                (d.session_id.clone(), Arc::new(SessionEntry { data: Mutex::new(d), busy: AtomicBool::new(false) }))
            })
            .collect();
        Ok(Arc::new(AppState {
            config,
            gateway,
            embedder,
            examples,
            persona_store,
            session_store,
            personas: RwLock::new(personas),
            sessions: RwLock::new(sessions),
            jobs: RwLock::new(HashMap::new()),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn retry_hint(&self) -> Duration {
        self.config.retry_delay_hint()
    }

    fn persona_entry(&self, id: &str) -> ApiResult<Arc<PersonaEntry>> {
        self.personas.read().get(id).cloned().ok_or_else(|| ApiError::not_found("persona", id))
    }

    fn session_entry(&self, id: &str) -> ApiResult<Arc<SessionEntry>> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::not_found("session", id))
    }

    /// Index for the persona's current schemas, built or reloaded on demand.
    fn ensure_index(&self, entry: &PersonaEntry, persona: &Persona) -> ApiResult<Arc<EmbeddingIndex>> {
        let mut slot = entry.index.lock();
        if let Some(index) = slot.as_ref().filter(|i| i.is_current(persona, &*self.embedder)) {
            return Ok(index.clone());
        }
        if persona.schemas.is_empty() {
            return Err(ApiError::conflict("not_induced", "persona has no schemas yet; run induction first"));
        }
        let path = self.persona_store.index_path(&persona.persona_id);
        let index = EmbeddingIndex::load_or_build(&path, persona, &*self.embedder).map_err(|e| match e {
            RetrievalError::EmbedderUnavailable(m) => {
                let mut err = ApiError::new(StatusCode::BAD_GATEWAY, "embedder_unavailable", m);
                err.retry_after = Some(self.retry_hint().as_secs().max(1));
                err
            }
            other => ApiError::internal(other),
        })?;
        let index = Arc::new(index);
        *slot = Some(index.clone());
        Ok(index)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = if state.config.cors_origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> =
            state.config.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods(Any)
    .allow_headers(Any);

    let api = Router::new()
        .route("/personas", get(list_personas).post(create_persona))
        .route("/personas/{id}", get(get_persona).put(update_persona))
        .route("/personas/{id}/induce", post(start_induction))
        .route("/personas/{id}/schemas", get(list_schemas))
        .route("/jobs/{id}", get(get_job))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session).patch(update_session))
        .route("/sessions/{id}/turn", post(take_turn))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/eval", post(run_eval));
    let mut app = Router::new().route("/healthz", get(healthz)).nest("/v1", api);
    if let Some(dir) = &state.config.ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.with_state(state).layer(cors)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "provider": state.gateway.provider_id(),
        "cache_mode": state.gateway.cache_mode(),
        "embedder": state.embedder.embedder_id(),
        "personas": state.personas.read().len(),
        "sessions": state.sessions.read().len(),
    }))
}

#[derive(Debug, Serialize)]
struct PersonaView {
    persona_id: String,
    facts: Vec<String>,
    schema_count: usize,
    /// Per fact: whether a schema induced from it exists.
    induced: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    running_job: Option<String>,
}

fn persona_view(entry: &PersonaEntry) -> PersonaView {
    let p = entry.persona.read().clone();
    PersonaView {
        persona_id: p.persona_id.clone(),
        facts: p.facts.clone(),
        schema_count: p.schemas.len(),
        induced: (0..p.facts.len()).map(|i| p.has_schema_for(i)).collect(),
        running_job: entry.running_job.lock().clone(),
    }
}

fn clean_facts(facts: Vec<String>) -> ApiResult<Vec<String>> {
    let facts: Vec<String> = facts.into_iter().map(|f| f.trim().to_owned()).collect();
    if facts.iter().any(String::is_empty) {
        return Err(ApiError::unprocessable("persona facts must be non-empty"));
    }
    Ok(facts)
}

async fn list_personas(State(state): State<Arc<AppState>>) -> Json<Vec<PersonaView>> {
    Json(state.personas.read().values().map(|e| persona_view(e)).collect())
}

#[derive(Debug, Deserialize)]
struct CreatePersona {
    persona_id: Option<String>,
    #[serde(default)]
    facts: Vec<String>,
}

async fn create_persona(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreatePersona>,
) -> ApiResult<(StatusCode, Json<PersonaView>)> {
    let facts = clean_facts(req.facts)?;
    let id = req.persona_id.unwrap_or_else(|| format!("p-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]));
    if !valid_id(&id) {
        return Err(ApiError::unprocessable("persona_id must be 1-64 letters, digits, '-' or '_'"));
    }
    let persona = Persona::new(id.clone(), facts);
    let entry = {
        let mut personas = state.personas.write();
        if personas.contains_key(&id) {
            return Err(ApiError::conflict("exists", format!("persona {id:?} already exists")));
        }
        state.persona_store.save(&persona).map_err(ApiError::internal)?;
        let entry = PersonaEntry::new(persona);
        personas.insert(id, entry.clone());
        entry
    };
    Ok((StatusCode::CREATED, Json(persona_view(&entry))))
}

async fn get_persona(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<PersonaView>> {
    Ok(Json(persona_view(&*state.persona_entry(&id)?)))
}

#[derive(Debug, Deserialize)]
struct UpdatePersona {
    facts: Vec<String>,
}

/// Replace the facts. Schemas whose source fact is unchanged (same position
/// and text) are kept; the rest are dropped.
async fn update_persona(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<UpdatePersona>,
) -> ApiResult<Json<PersonaView>> {
    let entry = state.persona_entry(&id)?;
    let facts = clean_facts(req.facts)?;
    let running = entry.running_job.lock();
    if running.is_some() {
        return Err(ApiError::conflict("induction_running", "cannot change facts while induction runs"));
    }
    let mut persona = Persona::new(id.clone(), facts);
    let old = entry.persona.read().clone();
    persona.schemas = old
        .schemas
        .iter()
        .filter(|s| {
            s.source().is_some_and(|src| {
                (0..persona.facts.len())
                    .any(|i| src.persona_fact_id == persona.fact_id(i) && src.persona_fact == persona.facts[i])
            })
        })
        .cloned()
        .collect();
    state.persona_store.save(&persona).map_err(ApiError::internal)?;
    *entry.persona.write() = Arc::new(persona);
    *entry.index.lock() = None;
    drop(running);
    Ok(Json(persona_view(&entry)))
}

async fn start_induction(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let entry = state.persona_entry(&id)?;
    let mut running = entry.running_job.lock();
    if let Some(job) = running.as_ref() {
        return Err(ApiError::conflict("induction_running", format!("induction job {job} is already running")));
    }
    let persona = entry.persona.read().clone();
    if persona.facts.is_empty() {
        return Err(ApiError::unprocessable("persona has no facts to induce from"));
    }
    let job_id = format!("job-{}", uuid::Uuid::new_v4().simple());
    let status = JobStatus {
        job_id: job_id.clone(),
        persona_id: id.clone(),
        state: JobState::Queued,
        pending: Inducer::pending_facts(&persona).len(),
        completed: 0,
        induced: 0,
        skipped: 0,
        failures: Vec::new(),
        error: None,
        created_at: Utc::now(),
        finished_at: None,
    };
    let job = Arc::new(Mutex::new(status.clone()));
    state.jobs.write().insert(job_id.clone(), job.clone());
    *running = Some(job_id);
    drop(running);

    let worker_state = state.clone();
    tokio::task::spawn_blocking(move || run_induction(worker_state, entry, job));
    Ok((StatusCode::ACCEPTED, Json(status)))
}

fn run_induction(state: Arc<AppState>, entry: Arc<PersonaEntry>, job: Arc<Mutex<JobStatus>>) {
    job.lock().state = JobState::Running;
    let persona = (**entry.persona.read()).clone();
    let persona_id = persona.persona_id.clone();
    let inducer = Inducer::new(&state.gateway, state.config.induction.clone())
        .with_generation(state.config.generation.config.clone());
    let (persona, report) = inducer.build_persona_schemas_with_progress(persona, |_| job.lock().completed += 1);

    let saved = state.persona_store.save(&persona).and_then(|_| {
        let path = state.persona_store.report_path(&persona_id);
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        Ok(())
    });
    *entry.persona.write() = Arc::new(persona);
    *entry.index.lock() = None;
    {
        let mut status = job.lock();
        status.induced = report.induced;
        status.skipped = report.skipped;
        status.failures = report.failures;
        status.finished_at = Some(Utc::now());
        match saved {
            Ok(()) => status.state = JobState::Done,
            Err(e) => {
                status.state = JobState::Failed;
                status.error = Some(format!("saving schemas: {e}"));
            }
        }
        log::info!(
            "induction {} for {persona_id}: {} induced, {} failed",
            status.job_id,
            status.induced,
            status.failures.len()
        );
    }
    *entry.running_job.lock() = None;
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    let job = state.jobs.read().get(&id).cloned().ok_or_else(|| ApiError::not_found("job", &id))?;
    let status = job.lock().clone();
    Ok(Json(status))
}

#[derive(Debug, Serialize)]
struct SchemaView {
    schema_id: String,
    /// Canonical S-expression.
    sexpr: String,
    schema: EventSchema,
}

async fn list_schemas(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<SchemaView>>> {
    let persona = state.persona_entry(&id)?.persona.read().clone();
    Ok(Json(
        persona
            .schemas
            .iter()
            .map(|s| SchemaView { schema_id: s.id().to_owned(), sexpr: print_schema(s), schema: s.clone() })
            .collect(),
    ))
}

#[derive(Debug, Serialize)]
struct SessionView {
    session_id: String,
    persona_id: String,
    mode: Mode,
    system_name: String,
    user_name: String,
    user_background: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dialogue_schema: Option<String>,
    turn_count: usize,
    created_at: DateTime<Utc>,
    last_active: DateTime<Utc>,
}

fn session_view(data: &SessionData) -> SessionView {
    SessionView {
        session_id: data.session_id.clone(),
        persona_id: data.persona_id.clone(),
        mode: data.mode,
        system_name: data.system_name.clone(),
        user_name: data.user_name.clone(),
        user_background: data.user_background.clone(),
        dialogue_schema: data.dialogue_schema.as_ref().map(print_schema),
        turn_count: data.turns.len(),
        created_at: data.created_at,
        last_active: data.last_active,
    }
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionView>> {
    Json(state.sessions.read().values().map(|s| session_view(&s.data.lock())).collect())
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    persona_id: String,
    mode: Mode,
    session_id: Option<String>,
    system_name: Option<String>,
    user_name: Option<String>,
    #[serde(default)]
    user_background: Vec<String>,
    /// Current dialogue schema as an S-expression.
    dialogue_schema: Option<String>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    state.persona_entry(&req.persona_id)?;
    let session_id = req.session_id.unwrap_or_else(|| format!("s-{}", uuid::Uuid::new_v4().simple()));
    if !valid_id(&session_id) {
        return Err(ApiError::unprocessable("session_id must be 1-64 letters, digits, '-' or '_'"));
    }
    let name = |n: Option<String>, default: &str| {
        let n = n.unwrap_or_else(|| default.to_owned());
        let n = n.trim().to_owned();
        if n.is_empty() || n.contains(['\n', ':']) {
            Err(ApiError::unprocessable("speaker names must be non-empty and contain no ':' or newline"))
        } else {
            Ok(n)
        }
    };
    let system_name = name(req.system_name, DialogueState::DEFAULT_SYSTEM_NAME)?;
    let user_name = name(req.user_name, DialogueState::DEFAULT_USER_NAME)?;
    if system_name == user_name {
        return Err(ApiError::unprocessable("speaker names must differ"));
    }
    let dialogue_schema = req
        .dialogue_schema
        .as_deref()
        .map(parse_schema)
        .transpose()
        .map_err(|e| ApiError::unprocessable(format!("dialogue_schema: {e}")))?;
    let event = SessionEvent::Created {
        session_id: session_id.clone(),
        persona_id: req.persona_id,
        mode: req.mode,
        system_name,
        user_name,
        user_background: clean_facts(req.user_background)?,
        dialogue_schema: dialogue_schema.as_ref().map(print_schema),
        at: Utc::now(),
    };

    let mut sessions = state.sessions.write();
    if sessions.len() >= state.config.max_sessions {
        return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "session_limit", "session limit reached"));
    }
    if sessions.contains_key(&session_id) || state.session_store.exists(&session_id) {
        return Err(ApiError::conflict("exists", format!("session {session_id:?} already exists")));
    }
    state.session_store.append(&session_id, &event).map_err(ApiError::internal)?;
    let data = SessionData::from_events(std::slice::from_ref(&event)).map_err(ApiError::internal)?;
    let view = session_view(&data);
    sessions.insert(session_id, Arc::new(SessionEntry { data: Mutex::new(data), busy: AtomicBool::new(false) }));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(session_view(&state.session_entry(&id)?.data.lock())))
}

#[derive(Debug, Deserialize)]
struct UpdateSession {
    mode: Mode,
}

async fn update_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<UpdateSession>,
) -> ApiResult<Json<SessionView>> {
    let entry = state.session_entry(&id)?;
    if entry.busy.swap(true, Ordering::SeqCst) {
        return Err(ApiError::conflict("turn_in_flight", "a turn is in progress for this session"));
    }
    let _guard = BusyGuard(entry.clone());
    let event = SessionEvent::ModeChanged { mode: req.mode, at: Utc::now() };
    state.session_store.append(&id, &event).map_err(ApiError::internal)?;
    let mut data = entry.data.lock();
    data.apply(&event);
    Ok(Json(session_view(&data)))
}

#[derive(Debug, Deserialize)]
struct TurnRequest {
    user_utterance: String,
    raw: Option<String>,
}

#[derive(Debug, Serialize)]
struct TurnResponse {
    turn_index: usize,
    response: String,
    mode: Mode,
    /// Retrieved schema and ranked facts; null in baseline mode.
    retrieval: Option<RetrievalResult>,
    /// Non-episodic facts of the dialogue schema that entered the prompt.
    dialogue_facts: Vec<String>,
    raw_input: Option<String>,
    prompt_digest: String,
    /// The exact messages sent to the model.
    prompt_preview: Vec<ChatMessage>,
}

async fn take_turn(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<TurnRequest>,
) -> ApiResult<Json<TurnResponse>> {
    let entry = state.session_entry(&id)?;
    if entry.busy.swap(true, Ordering::SeqCst) {
        return Err(ApiError::conflict("turn_in_flight", "a turn is already in progress for this session"));
    }
    let guard = BusyGuard(entry.clone());
    blocking(move || {
        let _guard = guard;
        turn_blocking(&state, &entry, req)
    })
    .await
    .map(Json)
}

fn turn_blocking(state: &AppState, entry: &SessionEntry, req: TurnRequest) -> ApiResult<TurnResponse> {
    let data = entry.data.lock().clone();
    let raw = req.raw.filter(|r| !r.trim().is_empty());
    match (data.mode, &raw) {
        (Mode::Paraphrase, None) => return Err(ApiError::unprocessable("paraphrase mode requires a raw utterance")),
        (Mode::Baseline | Mode::Unconstrained, Some(_)) => {
            return Err(ApiError::unprocessable("raw utterances are only accepted in paraphrase mode"))
        }
        _ => {}
    }
    let persona_entry = state.persona_entry(&data.persona_id)?;
    let persona = persona_entry.persona.read().clone();
    let index = match data.mode {
        Mode::Baseline => None,
        _ => Some(state.ensure_index(&persona_entry, &persona)?),
    };
    let dialogue = DialogueState {
        turns: data.turns.iter().map(|t| Turn { speaker: t.speaker, text: t.text.clone() }).collect(),
        system_name: data.system_name.clone(),
        user_name: data.user_name.clone(),
        persona,
        user_background: data.user_background.clone(),
        dialogue_schema: data.dialogue_schema.clone(),
        mode: data.mode,
    };
    let generator = Generator::new(&state.gateway, &*state.embedder)
        .with_settings(state.config.generation.clone())
        .with_examples(state.examples.clone());
    let (_, response) = generator
        .take_turn(&dialogue, index.as_deref(), &req.user_utterance, raw.as_deref())
        .map_err(|e| generation_error(e, state.retry_hint()))?;

    let dialogue_facts = match &response.retrieval {
        Some(r) => select_context_facts(r, data.dialogue_schema.as_ref()).1,
        None => Vec::new(),
    };
    let event = SessionEvent::Turn {
        user_utterance: req.user_utterance,
        prompt: response.prompt.clone(),
        response: response.clone(),
        at: Utc::now(),
    };
    state.session_store.append(&data.session_id, &event).map_err(ApiError::internal)?;
    let mut live = entry.data.lock();
    live.apply(&event);
    Ok(TurnResponse {
        turn_index: live.turns.len() / 2 - 1,
        response: response.text,
        mode: response.mode,
        retrieval: response.retrieval,
        dialogue_facts,
        raw_input: response.raw_input,
        prompt_digest: response.prompt_digest,
        prompt_preview: response.prompt,
    })
}

#[derive(Debug, Serialize)]
struct Transcript {
    session_id: String,
    persona_id: String,
    system_name: String,
    user_name: String,
    turns: Vec<TranscriptTurn>,
}

async fn get_transcript(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Transcript>> {
    let entry = state.session_entry(&id)?;
    let data = entry.data.lock();
    Ok(Json(Transcript {
        session_id: data.session_id.clone(),
        persona_id: data.persona_id.clone(),
        system_name: data.system_name.clone(),
        user_name: data.user_name.clone(),
        turns: data.turns.clone(),
    }))
}

#[derive(Debug, Deserialize)]
struct EvalRequest {
    generated_path: Option<PathBuf>,
    gold_path: Option<PathBuf>,
    generated: Option<Vec<String>>,
    gold: Option<Vec<String>>,
    /// Compute embedding similarity (default true).
    #[serde(default = "yes")]
    st: bool,
}

fn yes() -> bool {
    true
}

async fn run_eval(State(state): State<Arc<AppState>>, Json(req): Json<EvalRequest>) -> ApiResult<Json<EvalReport>> {
    blocking(move || {
        let texts = |inline: Option<Vec<String>>, path: Option<PathBuf>, what: &str| -> ApiResult<Option<Vec<String>>> {
            match (inline, path) {
                (Some(_), Some(_)) => Err(ApiError::unprocessable(format!("give {what} inline or as a path, not both"))),
                (Some(t), None) => Ok(Some(t)),
                (None, Some(p)) => read_texts(&p, None).map(Some).map_err(|e| match e {
                    CorpusError::Io { .. } => ApiError::new(StatusCode::BAD_REQUEST, "unreadable", e.to_string()),
                    other => ApiError::unprocessable(other.to_string()),
                }),
                (None, None) => Ok(None),
            }
        };
        let generated = texts(req.generated, req.generated_path, "generated")?
            .ok_or_else(|| ApiError::unprocessable("generated texts are required"))?;
        let gold = texts(req.gold, req.gold_path, "gold")?;
        let embedder = req.st.then_some(&*state.embedder);
        let metrics = evaluate_corpus(&generated, gold.as_deref(), embedder, Exec::default()).map_err(|e| match e {
            MetricsError::Embedding(r) => {
                let mut err = ApiError::new(StatusCode::BAD_GATEWAY, "embedder_unavailable", r.to_string());
                err.retry_after = Some(state.retry_hint().as_secs().max(1));
                err
            }
            other => ApiError::unprocessable(other.to_string()),
        })?;
        let st_embedder = (req.st && gold.is_some()).then(|| state.embedder.embedder_id());
        Ok(Json(EvalReport { metadata: MetricMetadata::new(st_embedder), metrics }))
    })
    .await
}

/// Bind and serve until Ctrl-C.
pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
