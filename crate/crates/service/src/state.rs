use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rarequery_core::classifier::FeatureTable;
use rarequery_core::engine::{
    ActiveSession, BatchPlan, EngineError, GroundTruthOracle, Labeler, SessionData,
};
use rarequery_core::experiments::session_inputs;
use rarequery_core::protocol::{
    parse_label, BatchResponse, CreateSessionRequest, Detection, LabelRequest, LabelSubmission,
    OracleKind, ResultsResponse, SessionState, SessionStatus, SCHEMA_VERSION,
};
use rarequery_core::ranking::{rank_tiles, RankOrder, RankingSpec};
use rarequery_core::tilestore::{ensure_modality, load_tileset, Band, Label, Modality, Tileset};
use serde_json::json;

use crate::error::ApiError;
use crate::events::{read_events, Event, EventLog};
use crate::preview::render_base64;

/// A tileset held in memory with its ranking and cached features.
pub struct LoadedTileset {
    tileset: RwLock<Tileset>,
    features: Mutex<HashMap<(Modality, usize), Arc<FeatureTable>>>,
    rank: RankOrder,
    rank_position: Vec<usize>,
    labels: Vec<Label>,
    centers: Vec<(f64, f64)>,
}

impl LoadedTileset {
    fn load(name: &str, dir: &Path) -> Result<Self, ApiError> {
        let tileset = load_tileset(dir)
            .map_err(|e| ApiError::internal(format!("loading tileset {name}: {e}")))?;
        let rank = rank_tiles(&tileset, &RankingSpec::default()).map_err(|e| {
            ApiError::unprocessable(format!("tileset {name} cannot be ranked: {e}"))
        })?;
        let mut rank_position = vec![0; tileset.len()];
        for (pos, &id) in rank.ids.iter().enumerate() {
            rank_position[id] = pos;
        }
        Ok(Self {
            labels: tileset.labels(),
            centers: tileset.tiles.iter().map(|t| t.center).collect(),
            tileset: RwLock::new(tileset),
            features: Mutex::new(HashMap::new()),
            rank,
            rank_position,
        })
    }

    fn features(&self, modality: Modality, grid: usize) -> Result<Arc<FeatureTable>, ApiError> {
        let mut cache = self.features.lock().expect("feature cache poisoned");
        if let Some(f) = cache.get(&(modality, grid)) {
            return Ok(f.clone());
        }
        if !self.tileset.read().expect("tileset poisoned").has(modality) {
            let mut ts = self.tileset.write().expect("tileset poisoned");
            ensure_modality(&mut ts, modality)
                .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        }
        let ts = self.tileset.read().expect("tileset poisoned");
        let table = Arc::new(
            FeatureTable::build(&ts, modality, grid, None)
                .map_err(|e| ApiError::unprocessable(e.to_string()))?,
        );
        cache.insert((modality, grid), table.clone());
        Ok(table)
    }

    /// Builds a fresh session exactly as a headless run would.
    fn open_session(&self, req: &CreateSessionRequest) -> Result<ActiveSession, ApiError> {
        let strategy = req
            .strategy()
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let config = req.session_config();
        config
            .classifier
            .validate()
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        if req.oracle == OracleKind::GroundTruth {
            if let Some(id) = self.labels.iter().position(|l| *l == Label::Unlabeled) {
                return Err(ApiError::unprocessable(format!(
                    "ground-truth sessions need a fully labeled tileset; tile {id} is unlabeled"
                )));
            }
        }
        let (pool, test) = session_inputs(&self.labels, req.evaluate, req.seed)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        if req.budget > pool.len() {
            return Err(ApiError::unprocessable(format!(
                "budget {} exceeds the {} unlabeled tiles available",
                req.budget,
                pool.len()
            ))
            .with_detail(json!({ "max_budget": pool.len() })));
        }
        let features = strategy
            .modalities
            .iter()
            .map(|&m| self.features(m, config.classifier.pool_grid))
            .collect::<Result<Vec<_>, _>>()?;
        let data = SessionData {
            features,
            rank: self.rank.clone(),
            pool,
            test,
        };
        ActiveSession::new(strategy, config, data)
            .map_err(|e| ApiError::unprocessable(e.to_string()))
    }

    fn label_request(&self, session_id: &str, id: usize) -> LabelRequest {
        let ts = self.tileset.read().expect("tileset poisoned");
        let mut previews = std::collections::BTreeMap::new();
        for band in Band::ALL {
            if let Ok(stack) = ts.stack(Modality::single(band)) {
                previews.insert(
                    band.name().to_string(),
                    render_base64(
                        stack.block(id),
                        stack.height,
                        stack.width,
                        stack.channels,
                        band,
                    ),
                );
            }
        }
        LabelRequest {
            session_id: session_id.to_string(),
            tile_id: id,
            rank_position: self.rank_position[id],
            metric_value: self.rank.metrics[id],
            previews,
        }
    }
}

struct SessionInner {
    session: ActiveSession,
    pending: Option<BatchPlan>,
    failed: Option<String>,
    log: EventLog,
}

pub struct SessionHandle {
    pub id: String,
    pub request: CreateSessionRequest,
    dir: PathBuf,
    tileset: Arc<LoadedTileset>,
    inner: Mutex<SessionInner>,
}

fn diverged(what: &str) -> ApiError {
    ApiError::internal(format!("event log diverged from replay: {what}"))
}

impl SessionHandle {
    fn lock(&self) -> std::sync::MutexGuard<'_, SessionInner> {
        self.inner.lock().expect("session lock poisoned")
    }

    pub fn is_ground_truth(&self) -> bool {
        self.request.oracle == OracleKind::GroundTruth
    }

    pub fn is_finished(&self) -> bool {
        let inner = self.lock();
        inner.failed.is_some() || inner.session.is_complete()
    }

    fn status_of(&self, inner: &SessionInner) -> SessionStatus {
        let s = &inner.session;
        let state = if inner.failed.is_some() {
            SessionState::Failed
        } else if s.is_complete() {
            SessionState::Complete
        } else if self.is_ground_truth() {
            SessionState::Running
        } else {
            SessionState::AwaitingLabels
        };
        SessionStatus {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            tileset: self.request.tileset.clone(),
            strategy: s.strategy().clone(),
            oracle: self.request.oracle,
            state,
            round: s.round(),
            labels_used: s.labels_used(),
            budget: s.config().budget,
            positives_found: s.positives_found(),
            weights: s.weights().weights.clone(),
            pending_batch: inner.pending.as_ref().map(|p| p.ids.clone()),
            last_round: s.rounds().last().cloned(),
            error: inner.failed.clone(),
        }
    }

    pub fn status(&self) -> SessionStatus {
        self.status_of(&self.lock())
    }

    fn write_run_log(&self, inner: &SessionInner) -> Result<(), ApiError> {
        fs::write(
            self.dir.join("run.json"),
            inner.session.run_log().to_json_bytes(),
        )?;
        Ok(())
    }

    /// The pending batch, assembling (and logging) one if there is none.
    pub fn batch(&self) -> Result<BatchResponse, ApiError> {
        if self.is_ground_truth() {
            return Err(ApiError::conflict(
                "session is labeled by ground truth; no batches are issued",
            ));
        }
        let mut inner = self.lock();
        if inner.failed.is_some() || inner.session.is_complete() {
            let status = self.status_of(&inner);
            return Err(ApiError::conflict("labeling budget exhausted")
                .with_detail(serde_json::to_value(status).expect("status serializes")));
        }
        if inner.pending.is_none() {
            let plan = inner.session.next_batch();
            inner.log.append(&Event::BatchIssued {
                round: plan.round,
                ids: plan.ids.clone(),
            })?;
            inner.pending = Some(plan);
        }
        let plan = inner.pending.as_ref().expect("just set");
        Ok(BatchResponse {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            round: plan.round,
            requests: plan
                .ids
                .iter()
                .map(|&id| self.tileset.label_request(&self.id, id))
                .collect(),
        })
    }

    /// Applies a full batch of labels atomically.
    pub fn submit(&self, submission: &LabelSubmission) -> Result<SessionStatus, ApiError> {
        if self.is_ground_truth() {
            return Err(ApiError::conflict("session is labeled by ground truth"));
        }
        let mut parsed = HashMap::new();
        for l in &submission.labels {
            let y = parse_label(&l.label).ok_or_else(|| {
                ApiError::unprocessable(format!(
                    "unknown label {:?} for tile {}",
                    l.label, l.tile_id
                ))
            })?;
            if parsed.insert(l.tile_id, y).is_some() {
                return Err(ApiError::conflict(format!(
                    "tile {} labeled twice in one submission",
                    l.tile_id
                )));
            }
        }
        let mut inner = self.lock();
        let plan = inner
            .pending
            .clone()
            .ok_or_else(|| ApiError::conflict("no batch is pending"))?;
        if parsed.len() != plan.ids.len() || plan.ids.iter().any(|id| !parsed.contains_key(id)) {
            return Err(
                ApiError::conflict("labels must cover exactly the pending batch")
                    .with_detail(json!({ "pending": plan.ids, "round": plan.round })),
            );
        }
        let labels: Vec<bool> = plan.ids.iter().map(|id| parsed[id]).collect();
        self.apply_round(&mut inner, &plan, labels)?;
        Ok(self.status_of(&inner))
    }

    fn apply_round(
        &self,
        inner: &mut SessionInner,
        plan: &BatchPlan,
        labels: Vec<bool>,
    ) -> Result<(), ApiError> {
        inner.log.append(&Event::LabelsReceived {
            round: plan.round,
            ids: plan.ids.clone(),
            labels: labels.clone(),
        })?;
        self.train_round(inner, plan, &labels)
    }

    fn train_round(
        &self,
        inner: &mut SessionInner,
        plan: &BatchPlan,
        labels: &[bool],
    ) -> Result<(), ApiError> {
        let result = inner
            .session
            .complete_round(plan, labels)
            .map(|r| (r.round, r.labels_used));
        match result {
            Ok((round, labels_used)) => {
                inner.pending = None;
                inner
                    .log
                    .append(&Event::RoundTrained { round, labels_used })?;
                if inner.session.is_complete() {
                    self.write_run_log(inner)?;
                }
                Ok(())
            }
            Err(e @ EngineError::BatchMismatch(_)) => Err(ApiError::conflict(e.to_string())),
            Err(e) => {
                inner.failed = Some(e.to_string());
                Err(ApiError::internal(e.to_string()))
            }
        }
    }

    /// One ground-truth round; `true` once the session has finished.
    pub fn step_ground_truth(&self) -> Result<bool, ApiError> {
        let mut inner = self.lock();
        if inner.failed.is_some() {
            return Ok(true);
        }
        if inner.session.is_complete() {
            self.write_run_log(&inner)?;
            return Ok(true);
        }
        let plan = match inner.pending.clone() {
            Some(p) => p,
            None => {
                let plan = inner.session.next_batch();
                inner.log.append(&Event::BatchIssued {
                    round: plan.round,
                    ids: plan.ids.clone(),
                })?;
                inner.pending = Some(plan.clone());
                plan
            }
        };
        let mut oracle = GroundTruthOracle::new(self.tileset.labels.clone());
        let labels = oracle.label(&plan.ids).map_err(|e| {
            inner.failed = Some(e.to_string());
            ApiError::internal(e.to_string())
        })?;
        self.apply_round(&mut inner, &plan, labels)?;
        Ok(inner.session.is_complete())
    }

    pub fn fail(&self, message: String) {
        self.lock().failed = Some(message);
    }

    pub fn results(&self) -> ResultsResponse {
        let inner = self.lock();
        let s = &inner.session;
        let threshold = s.config().classifier.decision_threshold;
        let detections = (0..self.tileset.centers.len())
            .filter_map(|id| {
                let score = s.score(id);
                (score >= threshold).then(|| Detection {
                    tile_id: id,
                    center: self.tileset.centers[id],
                    score,
                })
            })
            .collect();
        ResultsResponse {
            schema_version: SCHEMA_VERSION,
            status: self.status_of(&inner),
            run_log: s.run_log(),
            detections,
        }
    }
}

/// Shared server state: tilesets on disk, live sessions and idempotency keys.
pub struct Shared {
    data_dir: PathBuf,
    tilesets: Mutex<HashMap<String, Arc<LoadedTileset>>>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    idempotency: Mutex<HashMap<String, String>>,
    creating: Mutex<()>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Shared {
    /// Loads every session under `data_dir/sessions` by replaying its log.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, ApiError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(data_dir.join("tilesets"))?;
        fs::create_dir_all(data_dir.join("sessions"))?;
        let shared = Self {
            data_dir,
            tilesets: Mutex::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
            idempotency: Mutex::new(HashMap::new()),
            creating: Mutex::new(()),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(shared.data_dir.join("sessions"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("events.jsonl").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            match shared.replay(&dir) {
                Ok(handle) => {
                    if let Some(key) = &handle.request.idempotency_key {
                        shared
                            .idempotency
                            .lock()
                            .expect("poisoned")
                            .insert(key.clone(), handle.id.clone());
                    }
                    shared
                        .sessions
                        .write()
                        .expect("poisoned")
                        .insert(handle.id.clone(), handle);
                }
                Err(e) => {
                    tracing::error!(dir = %dir.display(), error = %e, "could not restore session")
                }
            }
        }
        Ok(shared)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn tileset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(self.data_dir.join("tilesets"))
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter(|e| e.path().join("manifest.json").is_file())
                    .filter_map(|e| e.file_name().into_string().ok())
                    .collect()
            })
            .unwrap_or_default();
        names.sort();
        names
    }

    fn tileset(&self, name: &str) -> Result<Arc<LoadedTileset>, ApiError> {
        let mut cache = self.tilesets.lock().expect("tileset cache poisoned");
        if let Some(t) = cache.get(name) {
            return Ok(t.clone());
        }
        let dir = self.data_dir.join("tilesets").join(name);
        if !valid_name(name) || !dir.join("manifest.json").is_file() {
            return Err(ApiError::not_found(format!("unknown tileset {name:?}")));
        }
        let loaded = Arc::new(LoadedTileset::load(name, &dir)?);
        cache.insert(name.to_string(), loaded.clone());
        Ok(loaded)
    }

    pub fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("sessions poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    pub fn sessions(&self) -> Vec<Arc<SessionHandle>> {
        let mut v: Vec<_> = self
            .sessions
            .read()
            .expect("sessions poisoned")
            .values()
            .cloned()
            .collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    /// Returns the session and whether it was newly created.
    pub fn create_session(
        &self,
        req: CreateSessionRequest,
    ) -> Result<(Arc<SessionHandle>, bool), ApiError> {
        let _guard = self.creating.lock().expect("poisoned");
        if let Some(key) = &req.idempotency_key {
            if let Some(id) = self.idempotency.lock().expect("poisoned").get(key) {
                return Ok((self.session(id)?, false));
            }
        }
        let tileset = self.tileset(&req.tileset)?;
        let session = tileset.open_session(&req)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.data_dir.join("sessions").join(&id);
        let mut log = EventLog::create(&dir.join("events.jsonl"))?;
        log.append(&Event::Created {
            session_id: id.clone(),
            request: req.clone(),
        })?;
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            request: req.clone(),
            dir,
            tileset,
            inner: Mutex::new(SessionInner {
                session,
                pending: None,
                failed: None,
                log,
            }),
        });
        if let Some(key) = &req.idempotency_key {
            self.idempotency
                .lock()
                .expect("poisoned")
                .insert(key.clone(), id.clone());
        }
        self.sessions
            .write()
            .expect("poisoned")
            .insert(id, handle.clone());
        tracing::info!(session = %handle.id, tileset = %req.tileset, "session created");
        Ok((handle, true))
    }

    /// Rebuilds a session by re-executing its logged rounds. Labels that were
    /// recorded but never trained on are trained now.
    fn replay(&self, dir: &Path) -> Result<Arc<SessionHandle>, ApiError> {
        let path = dir.join("events.jsonl");
        let events = read_events(&path)?;
        let (id, request) = match events.first() {
            Some(Event::Created {
                session_id,
                request,
            }) => (session_id.clone(), request.clone()),
            _ => return Err(diverged("log does not start with a created event")),
        };
        let tileset = self.tileset(&request.tileset)?;
        let session = tileset.open_session(&request)?;
        let log = EventLog::open(&path)?;
        let handle = SessionHandle {
            id,
            request,
            dir: dir.to_path_buf(),
            tileset,
            inner: Mutex::new(SessionInner {
                session,
                pending: None,
                failed: None,
                log,
            }),
        };
        {
            let mut inner = handle.lock();
            let mut trained_pending = false;
            for event in &events[1..] {
                match event {
                    Event::Created { .. } => return Err(diverged("second created event")),
                    Event::BatchIssued { round, ids } => {
                        let plan = inner.session.next_batch();
                        if plan.round != *round || plan.ids != *ids {
                            return Err(diverged("re-assembled batch differs from the issued one"));
                        }
                        inner.pending = Some(plan);
                    }
                    Event::LabelsReceived { round, ids, labels } => {
                        let plan = inner
                            .pending
                            .take()
                            .unwrap_or_else(|| inner.session.next_batch());
                        if plan.round != *round || plan.ids != *ids {
                            return Err(diverged("labels refer to a different batch"));
                        }
                        inner
                            .session
                            .complete_round(&plan, labels)
                            .map_err(|e| diverged(&format!("retraining failed: {e}")))?;
                        trained_pending = true;
                    }
                    Event::RoundTrained { round, .. } => {
                        if inner.session.round() != round + 1 {
                            return Err(diverged("round count mismatch"));
                        }
                        trained_pending = false;
                    }
                }
            }
            if trained_pending {
                let last = inner.session.rounds().last().expect("a round was trained");
                let event = Event::RoundTrained {
                    round: last.round,
                    labels_used: last.labels_used,
                };
                inner.log.append(&event)?;
            }
            if inner.session.is_complete() {
                handle.write_run_log(&inner)?;
            }
        }
        tracing::info!(session = %handle.id, "session restored");
        Ok(Arc::new(handle))
    }
}
