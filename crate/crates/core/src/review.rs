//! Clinician review of model predictions.
//!
//! Reviews live in an append-only JSONL log. A second review of the same
//! case by the same reviewer is appended with a `supersedes` pointer to the
//! entry it replaces, so the full history stays on disk while statistics
//! only see the latest entry per (case, reviewer).
//!
//! Entry rules:
//!
//! - a reviewer who disagrees with the ground-truth stage must say why
//!   (`disagreement_type`), and one who agrees must not;
//! - a rationale rating is only accepted together with agreement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::mime_for_path;
use crate::domain::StageLabel;
use crate::harness::{read_jsonl, CaseResult, RunConfig, TraceLine};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("review log line {line}: {detail}")]
    MalformedLog { line: usize, detail: String },
    #[error("cannot load run directory: {0}")]
    RunDir(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleRating {
    Good,
    Passable,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisagreementType {
    Misclassification,
    HealingReverseStaging,
    Unstageable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    #[serde(default)]
    pub case_id: String,
    pub reviewer_id: String,
    pub agrees_with_ground_truth: bool,
    #[serde(default)]
    pub disagreement_type: Option<DisagreementType>,
    #[serde(default)]
    pub rating: Option<RationaleRating>,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub timestamp: Option<String>,
}

impl ReviewEntry {
    pub fn agree(case_id: &str, reviewer_id: &str, rating: Option<RationaleRating>) -> Self {
        Self {
            case_id: case_id.into(),
            reviewer_id: reviewer_id.into(),
            agrees_with_ground_truth: true,
            disagreement_type: None,
            rating,
            notes: String::new(),
            timestamp: None,
        }
    }

    pub fn disagree(case_id: &str, reviewer_id: &str, kind: DisagreementType) -> Self {
        Self {
            case_id: case_id.into(),
            reviewer_id: reviewer_id.into(),
            agrees_with_ground_truth: false,
            disagreement_type: Some(kind),
            rating: None,
            notes: String::new(),
            timestamp: None,
        }
    }

    /// Checks the entry rules; the message is the machine-readable reason.
    pub fn validate(&self) -> Result<(), ReviewError> {
        let violation = |m: &str| Err(ReviewError::InvariantViolation(m.to_string()));
        if self.reviewer_id.trim().is_empty() {
            return violation("reviewer_id required");
        }
        if self.rating.is_some() && !self.agrees_with_ground_truth {
            return violation("rating requires agreement");
        }
        match (self.agrees_with_ground_truth, self.disagreement_type) {
            (false, None) => violation("disagreement requires disagreement_type"),
            (true, Some(_)) => violation("disagreement_type requires disagreement"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredEntry {
    pub entry_id: u64,
    #[serde(default)]
    pub supersedes: Option<u64>,
    #[serde(flatten)]
    pub entry: ReviewEntry,
}

/// What the reviewer is shown for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub case_id: String,
    pub true_stage: StageLabel,
    pub predicted_stage: Option<StageLabel>,
    pub rationale: Option<String>,
    pub image_path: Option<PathBuf>,
    pub fold_id: Option<usize>,
}

/// Case catalog plus the review log.
#[derive(Debug)]
pub struct ReviewStore {
    catalog: BTreeMap<String, CaseInfo>,
    entries: Vec<StoredEntry>,
    /// (case, reviewer) -> index of the latest entry
    current: HashMap<(String, String), usize>,
    log: Option<(PathBuf, File)>,
}

impl ReviewStore {
    pub fn in_memory(cases: Vec<CaseInfo>) -> Self {
        Self {
            catalog: cases.into_iter().map(|c| (c.case_id.clone(), c)).collect(),
            entries: Vec::new(),
            current: HashMap::new(),
            log: None,
        }
    }

    /// Replays `log_path` if it exists and appends new entries to it.
    pub fn open(log_path: &Path, cases: Vec<CaseInfo>) -> Result<Self, ReviewError> {
        let mut store = Self::in_memory(cases);
        if log_path.exists() {
            let text = std::fs::read_to_string(log_path)
                .map_err(|source| ReviewError::Io { path: log_path.to_path_buf(), source })?;
            store.replay(&text)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|source| ReviewError::Io { path: log_path.to_path_buf(), source })?;
        store.log = Some((log_path.to_path_buf(), file));
        Ok(store)
    }

    /// Rebuilds state from exported JSONL.
    pub fn from_jsonl(text: &str, cases: Vec<CaseInfo>) -> Result<Self, ReviewError> {
        let mut store = Self::in_memory(cases);
        store.replay(text)?;
        Ok(store)
    }

    fn replay(&mut self, text: &str) -> Result<(), ReviewError> {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let stored: StoredEntry = serde_json::from_str(line)
                .map_err(|e| ReviewError::MalformedLog { line: i + 1, detail: e.to_string() })?;
            stored.entry.validate().map_err(|e| ReviewError::MalformedLog { line: i + 1, detail: e.to_string() })?;
            self.insert(stored);
        }
        Ok(())
    }

    fn insert(&mut self, stored: StoredEntry) {
        let key = (stored.entry.case_id.clone(), stored.entry.reviewer_id.clone());
        self.entries.push(stored);
        self.current.insert(key, self.entries.len() - 1);
    }

    pub fn catalog(&self) -> &BTreeMap<String, CaseInfo> {
        &self.catalog
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseInfo> {
        self.catalog.get(case_id)
    }

    /// Validates, appends and returns the stored entry.
    pub fn submit(&mut self, mut entry: ReviewEntry) -> Result<StoredEntry, ReviewError> {
        if !self.catalog.contains_key(&entry.case_id) {
            return Err(ReviewError::UnknownCase(entry.case_id));
        }
        entry.validate()?;
        if entry.timestamp.is_none() {
            entry.timestamp = Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true));
        }
        let key = (entry.case_id.clone(), entry.reviewer_id.clone());
        let supersedes = self.current.get(&key).map(|i| self.entries[*i].entry_id);
        let stored = StoredEntry { entry_id: self.entries.len() as u64 + 1, supersedes, entry };
        if let Some((path, file)) = self.log.as_mut() {
            let mut line = serde_json::to_string(&stored).expect("entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| ReviewError::Io { path: path.clone(), source })?;
        }
        self.insert(stored.clone());
        Ok(stored)
    }

    /// Every entry ever stored, in log order.
    pub fn history(&self) -> &[StoredEntry] {
        &self.entries
    }

    /// Latest entry per (case, reviewer), in log order.
    pub fn current_entries(&self) -> Vec<&StoredEntry> {
        let mut idx: Vec<usize> = self.current.values().copied().collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.entries[i]).collect()
    }

    pub fn reviews_for(&self, case_id: &str) -> Vec<&StoredEntry> {
        self.current_entries().into_iter().filter(|e| e.entry.case_id == case_id).collect()
    }

    pub fn export_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn stats(&self) -> ReviewStats {
        ReviewStats::aggregate(&self.catalog, &self.current_entries())
    }
}

/// A rate with its rounded percentage; `defined` is false for 0/0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub count: u64,
    pub total: u64,
    pub value: f64,
    pub percent: u32,
    pub defined: bool,
}

impl Rate {
    pub fn new(count: u64, total: u64) -> Self {
        if total == 0 {
            return Rate { count, total, value: 0.0, percent: 0, defined: false };
        }
        let value = count as f64 / total as f64;
        Rate { count, total, value, percent: (value * 100.0).round() as u32, defined: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingHistogram {
    pub good: Rate,
    pub passable: Rate,
    pub bad: Rate,
    /// Agreed entries submitted without a rating.
    pub unrated: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total_reviewed: u64,
    pub agreement: Rate,
    pub per_stage_reviewed: BTreeMap<StageLabel, u64>,
    pub per_stage_agreement: BTreeMap<StageLabel, u64>,
    pub ratings: RatingHistogram,
    pub disagreement_by_stage: BTreeMap<StageLabel, BTreeMap<DisagreementType, u64>>,
    /// Same figures per reviewer; empty when there is a single reviewer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_reviewer: BTreeMap<String, ReviewStats>,
}

impl ReviewStats {
    /// Pure function of the current entries.
    pub fn aggregate(catalog: &BTreeMap<String, CaseInfo>, entries: &[&StoredEntry]) -> Self {
        let mut stats = Self::single(catalog, entries);
        let reviewers: BTreeSet<&str> = entries.iter().map(|e| e.entry.reviewer_id.as_str()).collect();
        if reviewers.len() > 1 {
            for r in reviewers {
                let theirs: Vec<&StoredEntry> = entries.iter().copied().filter(|e| e.entry.reviewer_id == r).collect();
                stats.per_reviewer.insert(r.to_string(), Self::single(catalog, &theirs));
            }
        }
        stats
    }

    fn single(catalog: &BTreeMap<String, CaseInfo>, entries: &[&StoredEntry]) -> Self {
        let zero_by_stage = || StageLabel::ALL.iter().map(|s| (*s, 0u64)).collect::<BTreeMap<_, _>>();
        let mut per_stage_reviewed = zero_by_stage();
        let mut per_stage_agreement = zero_by_stage();
        let mut disagreement_by_stage: BTreeMap<StageLabel, BTreeMap<DisagreementType, u64>> =
            StageLabel::ALL.iter().map(|s| (*s, BTreeMap::new())).collect();
        let (mut agreed, mut good, mut passable, mut bad, mut unrated) = (0, 0, 0, 0, 0);
        for e in entries {
            let Some(stage) = catalog.get(&e.entry.case_id).map(|c| c.true_stage) else { continue };
            *per_stage_reviewed.get_mut(&stage).unwrap() += 1;
            if e.entry.agrees_with_ground_truth {
                agreed += 1;
                *per_stage_agreement.get_mut(&stage).unwrap() += 1;
                match e.entry.rating {
                    Some(RationaleRating::Good) => good += 1,
                    Some(RationaleRating::Passable) => passable += 1,
                    Some(RationaleRating::Bad) => bad += 1,
                    None => unrated += 1,
                }
            } else if let Some(kind) = e.entry.disagreement_type {
                *disagreement_by_stage.get_mut(&stage).unwrap().entry(kind).or_insert(0) += 1;
            }
        }
        let total: u64 = per_stage_reviewed.values().sum();
        ReviewStats {
            total_reviewed: total,
            agreement: Rate::new(agreed, total),
            per_stage_reviewed,
            per_stage_agreement,
            ratings: RatingHistogram {
                good: Rate::new(good, agreed),
                passable: Rate::new(passable, agreed),
                bad: Rate::new(bad, agreed),
                unrated: Rate::new(unrated, agreed),
            },
            disagreement_by_stage,
            per_reviewer: BTreeMap::new(),
        }
    }
}

/// Builds the case catalog from a finished run directory: predictions from
/// `cases.jsonl`, image paths from the manifest named in `config.snapshot`.
pub fn catalog_from_run_dir(run_dir: &Path) -> Result<Vec<CaseInfo>, ReviewError> {
    let err = |e: crate::harness::HarnessError| ReviewError::RunDir(e.to_string());
    let cfg = RunConfig::load(&run_dir.join("config.snapshot")).map_err(err)?;
    let manifest = crate::harness::load_manifest_auto(&cfg.manifest_path).map_err(err)?;
    let results: Vec<CaseResult> = read_jsonl(&run_dir.join("cases.jsonl")).map_err(err)?;
    Ok(results
        .into_iter()
        .map(|r| CaseInfo {
            image_path: manifest.get(&r.case_id).map(|c| c.image_path.clone()),
            case_id: r.case_id,
            true_stage: r.true_stage,
            predicted_stage: r.predicted,
            rationale: r.rationale,
            fold_id: Some(r.fold_id),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// HTTP service
// ---------------------------------------------------------------------------

pub const TOKEN_HEADER: &str = "x-review-token";

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Required value of the `x-review-token` header, if set.
    pub token: Option<String>,
    /// Withhold model output from case views unless `?reveal=true`.
    pub blind: bool,
    /// Static bundle served for paths outside the API.
    pub ui_dir: Option<PathBuf>,
    /// Transcripts keyed by case id, served at `/cases/{id}/transcript`.
    pub transcripts: Option<PathBuf>,
}

struct AppState {
    store: RwLock<ReviewStore>,
    options: ServeOptions,
    transcripts: HashMap<String, serde_json::Value>,
}

type Shared = Arc<AppState>;

/// A running review service.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the service stops.
    pub fn join(mut self) -> std::io::Result<()> {
        self.thread.take().map_or(Ok(()), |t| t.join().unwrap_or(Ok(())))
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.thread.take().map_or(Ok(()), |t| t.join().unwrap_or(Ok(())))
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn load_transcripts(path: &Path) -> Result<HashMap<String, serde_json::Value>, ReviewError> {
    let lines: Vec<TraceLine> = read_jsonl(path).map_err(|e| ReviewError::RunDir(e.to_string()))?;
    Ok(lines
        .into_iter()
        .map(|l| {
            let id = match &l {
                TraceLine::Reflection { transcript, .. } => transcript.case_id.clone(),
                TraceLine::SingleShot { record, .. } => record.case_id.clone(),
            };
            (id, serde_json::to_value(&l).expect("trace serializes"))
        })
        .collect())
}

pub fn router(store: ReviewStore, options: ServeOptions) -> Result<Router, ReviewError> {
    let transcripts = match &options.transcripts {
        Some(p) if p.exists() => load_transcripts(p)?,
        _ => HashMap::new(),
    };
    let state: Shared = Arc::new(AppState { store: RwLock::new(store), options, transcripts });
    let api = Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/image", get(get_image))
        .route("/cases/{id}/transcript", get(get_transcript))
        .route("/cases/{id}/review", post(post_review))
        .route("/stats", get(get_stats))
        .route("/export", get(get_export))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Ok(api.fallback(get(static_file)).with_state(state))
}

/// Binds `addr` and serves on a background runtime.
pub fn serve(store: ReviewStore, addr: SocketAddr, options: ServeOptions) -> Result<ServiceHandle, ReviewError> {
    let app = router(store, options)?;
    let listener = std::net::TcpListener::bind(addr)
        .and_then(|l| l.set_nonblocking(true).map(|_| l))
        .map_err(|source| ReviewError::Io { path: PathBuf::from(addr.to_string()), source })?;
    let addr = listener.local_addr().map_err(|source| ReviewError::Io { path: PathBuf::new(), source })?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || -> std::io::Result<()> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServiceHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}

async fn require_token(State(state): State<Shared>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.options.token {
        let given = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong review token");
        }
    }
    next.run(req).await
}

fn error(status: StatusCode, kind: &str, reason: &str) -> Response {
    (status, Json(json!({ "error": kind, "reason": reason }))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, "unknown_case", &format!("no case {id:?}"))
}

#[derive(Deserialize)]
struct RevealQuery {
    #[serde(default)]
    reveal: bool,
}

async fn list_cases(State(state): State<Shared>) -> Response {
    let store = state.store.read().unwrap();
    let items: Vec<serde_json::Value> = store
        .catalog()
        .values()
        .map(|c| {
            let reviewers: Vec<String> = store.reviews_for(&c.case_id).iter().map(|e| e.entry.reviewer_id.clone()).collect();
            json!({
                "case_id": c.case_id,
                "true_stage": c.true_stage,
                "status": if reviewers.is_empty() { "pending" } else { "reviewed" },
                "reviewers": reviewers,
            })
        })
        .collect();
    Json(items).into_response()
}

async fn get_case(State(state): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<RevealQuery>) -> Response {
    let store = state.store.read().unwrap();
    let Some(case) = store.case(&id) else { return not_found(&id) };
    let hidden = state.options.blind && !q.reveal;
    let reviews: Vec<&StoredEntry> = store.reviews_for(&id);
    Json(json!({
        "case_id": case.case_id,
        "true_stage": case.true_stage,
        "fold_id": case.fold_id,
        "blind": hidden,
        "predicted_stage": if hidden { None } else { case.predicted_stage },
        "rationale": if hidden { None } else { case.rationale.clone() },
        "image_url": format!("/cases/{id}/image"),
        "transcript_url": state.transcripts.contains_key(&id).then(|| format!("/cases/{id}/transcript")),
        "reviews": reviews,
    }))
    .into_response()
}

async fn get_image(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    let path = {
        let store = state.store.read().unwrap();
        let Some(case) = store.case(&id) else { return not_found(&id) };
        case.image_path.clone()
    };
    let Some(path) = path else { return error(StatusCode::NOT_FOUND, "no_image", "case has no image") };
    let Some(mime) = mime_for_path(&path) else {
        return error(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_image", "unknown image type");
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "no_image", "image file missing"),
    }
}

async fn get_transcript(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    match state.transcripts.get(&id) {
        Some(v) => Json(v.clone()).into_response(),
        None => not_found(&id),
    }
}

async fn post_review(State(state): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let mut entry: ReviewEntry = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_body", &e.to_string()),
    };
    if !entry.case_id.is_empty() && entry.case_id != id {
        return error(StatusCode::BAD_REQUEST, "malformed_body", "case_id does not match the URL");
    }
    entry.case_id = id.clone();
    let result = state.store.write().unwrap().submit(entry);
    match result {
        Ok(stored) => (StatusCode::CREATED, Json(stored)).into_response(),
        Err(ReviewError::UnknownCase(_)) => not_found(&id),
        Err(ReviewError::InvariantViolation(reason)) => {
            error(StatusCode::UNPROCESSABLE_ENTITY, "invariant_violation", &reason)
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "storage", &e.to_string()),
    }
}

async fn get_stats(State(state): State<Shared>) -> Response {
    Json(state.store.read().unwrap().stats()).into_response()
}

async fn get_export(State(state): State<Shared>) -> Response {
    let body = state.store.read().unwrap().export_jsonl();
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

async fn static_file(State(state): State<Shared>, req: Request) -> Response {
    let Some(root) = &state.options.ui_dir else {
        return error(StatusCode::NOT_FOUND, "not_found", "no such route");
    };
    let rel = Path::new(req.uri().path().trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "not_found", "no such file");
    }
    let mut path = root.join(rel);
    if rel.as_os_str().is_empty() || path.is_dir() {
        path = path.join("index.html");
    }
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not_found", "no such file"),
    }
}
