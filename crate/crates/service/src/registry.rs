//! Live sessions backed by an on-disk store.
//!
//! ```text
//! {store}/blobs/                 content-addressed PNGs, shared
//! {store}/sessions/{id}/session.json
//! {store}/sessions/{id}/graph.jsonl   replayable state-graph log
//! {store}/sessions/{id}/debug.jsonl   execution-level tool records
//! ```
//!
//! Each session has one writer: mutations take its mutex with `try_lock`
//! and report [`RegistryError::Busy`] when a turn is already running.
//! Graph reads go to a snapshot swapped in after every mutation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use foldedit_core::engine::{synth_initial_state, EngineError, SessionSpec};
use foldedit_core::eval::{
    drift_report, mean_series, score_images, EvalError, EvalOptions, GmsFallback, PerceptualProvider, SessionReport,
    Summary, TurnScore, REPORT_SCHEMA_VERSION,
};
use foldedit_core::imageio::{decode_png, png_from_base64};
use foldedit_core::par::Exec;
use foldedit_core::planner::{
    Instruction, Perception, PerceptionHint, Session, SessionError, SymbolicPerception, TurnOutcome,
};
use foldedit_core::scene::{apply_transition, diff_states, render, EditCommand, SceneState};
use foldedit_core::store::{
    BlobStore, DebugLog, DirBlobs, ImageContext, ImageUri, ReplayReport, StateGraph, Store, StoreError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EditSettings, FieldError};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("session {0} is busy")]
    Busy(String),
    #[error("validation failed")]
    Validation(Vec<FieldError>),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl From<ConfigError> for RegistryError {
    fn from(e: ConfigError) -> RegistryError {
        match e {
            ConfigError::Invalid(v) => RegistryError::Validation(v),
            other => RegistryError::Validation(vec![FieldError::new("config", other.to_string())]),
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> RegistryError {
    RegistryError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub config: EditSettings,
    /// Relative to the store root.
    pub graph_log_path: PathBuf,
    pub status: SessionStatus,
    pub root_uri: ImageUri,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// Overrides on top of the server's edit settings.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub initial_image_png_base64: Option<String>,
    /// Symbolic state of the uploaded image; required with it.
    #[serde(default)]
    pub scene: Option<SceneState>,
    /// Synthesizes the initial scene the data engine would for this seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub spec: Option<SessionSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub root_uri: ImageUri,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UndoResponse {
    pub head_uri: ImageUri,
    pub node: ImageContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub session_id: String,
    pub perceptual_provider: String,
    /// One score per committed action on the path from the root to the head.
    pub turns: Vec<TurnScore>,
    pub summary: Summary,
    /// PSNR_OM rose on every turn.
    pub drift_flag: bool,
}

pub struct Entry {
    record: Mutex<SessionRecord>,
    session: Mutex<Session>,
    graph: RwLock<Arc<StateGraph>>,
}

impl Entry {
    pub fn record(&self) -> SessionRecord {
        self.record.lock().expect("record lock").clone()
    }

    pub fn graph(&self) -> Arc<StateGraph> {
        self.graph.read().expect("graph lock").clone()
    }

    fn writer(&self) -> Result<std::sync::MutexGuard<'_, Session>, RegistryError> {
        match self.session.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::WouldBlock) => Err(RegistryError::Busy(self.record().session_id)),
            // a panicked turn leaves the session as it was before the turn
            // started committing, so keep serving it
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
        }
    }

    fn publish(&self, session: &Session) {
        *self.graph.write().expect("graph lock") = Arc::new(session.store().graph().clone());
    }
}

pub struct Registry {
    root: PathBuf,
    blobs: Arc<dyn BlobStore>,
    defaults: EditSettings,
    perception: Arc<dyn Perception>,
    sessions: RwLock<BTreeMap<String, Arc<Entry>>>,
    next_id: AtomicU64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RegistryError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn id_number(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

impl Registry {
    /// Opens (or creates) a store and replays every recorded session.
    pub fn open(root: impl Into<PathBuf>, defaults: EditSettings) -> Result<Registry, RegistryError> {
        let root = root.into();
        defaults.validate()?;
        let sessions_dir = root.join("sessions");
        fs::create_dir_all(&sessions_dir).map_err(|e| io_err(&sessions_dir, e))?;
        let blob_dir = root.join("blobs");
        let blobs: Arc<dyn BlobStore> = Arc::new(DirBlobs::open(&blob_dir).map_err(|e| io_err(&blob_dir, e))?);
        let reg = Registry {
            root,
            blobs,
            defaults,
            perception: Arc::new(SymbolicPerception::default()),
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&sessions_dir)
            .map_err(|e| io_err(&sessions_dir, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .collect();
        dirs.sort();
        let mut max_id = 0;
        for dir in dirs {
            let rec_path = dir.join("session.json");
            if let Some(n) = dir.file_name().and_then(|n| n.to_str()).and_then(id_number) {
                max_id = max_id.max(n);
            }
            // a directory without a record is a create that never finished
            if !rec_path.exists() {
                continue;
            }
            let text = fs::read_to_string(&rec_path).map_err(|e| io_err(&rec_path, e))?;
            let record: SessionRecord = serde_json::from_str(&text).map_err(|e| io_err(&rec_path, e))?;
            let (entry, _) = reg.replay_entry(record)?;
            let id = entry.record().session_id;
            reg.sessions.write().expect("sessions lock").insert(id, Arc::new(entry));
        }
        reg.next_id.store(max_id + 1, Ordering::SeqCst);
        Ok(reg)
    }

    fn replay_entry(&self, record: SessionRecord) -> Result<(Entry, ReplayReport), RegistryError> {
        let dir = self.session_dir(&record.session_id);
        let (store, report) = Store::replay(
            self.blobs.clone(),
            self.root.join(&record.graph_log_path),
            DebugLog::file(dir.join("debug.jsonl")),
        )?;
        let built = record.config.build()?;
        let mut session = Session::resume(store, built.backend, self.perception.clone(), built.planner, built.cfg)?;
        if record.status == SessionStatus::Closed {
            session.close();
        }
        let graph = RwLock::new(Arc::new(session.store().graph().clone()));
        Ok((
            Entry {
                record: Mutex::new(record),
                session: Mutex::new(session),
                graph,
            },
            report,
        ))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn defaults(&self) -> &EditSettings {
        &self.defaults
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Entry>, RegistryError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(format!("session {id}")))
    }

    pub fn list(&self) -> Vec<SessionRecord> {
        self.sessions
            .read()
            .expect("sessions lock")
            .values()
            .map(|e| e.record())
            .collect()
    }

    fn initial(&self, req: &CreateRequest) -> Result<(foldedit_core::RgbImage, SceneState), RegistryError> {
        let invalid = |f: &str, m: String| RegistryError::Validation(vec![FieldError::new(f, m)]);
        match (&req.initial_image_png_base64, req.seed) {
            (Some(_), Some(_)) | (None, None) => Err(invalid(
                "initial_image_png_base64",
                "give exactly one of initial_image_png_base64 and seed".into(),
            )),
            (Some(b64), None) => {
                let img = png_from_base64(b64).map_err(|e| invalid("initial_image_png_base64", e.to_string()))?;
                let scene = req
                    .scene
                    .clone()
                    .ok_or_else(|| invalid("scene", "required with an uploaded image".into()))?;
                if img.dimensions() != (scene.canvas_w, scene.canvas_h) {
                    return Err(invalid(
                        "scene",
                        format!(
                            "canvas {}x{} does not match the image's {}x{}",
                            scene.canvas_w,
                            scene.canvas_h,
                            img.width(),
                            img.height()
                        ),
                    ));
                }
                Ok((img, scene))
            }
            (None, Some(seed)) => {
                if req.scene.is_some() {
                    return Err(invalid("scene", "only allowed with an uploaded image".into()));
                }
                let spec = SessionSpec {
                    seed,
                    ..req.spec.clone().unwrap_or_default()
                };
                let scene = synth_initial_state(seed, &spec).map_err(|e| match e {
                    EngineError::InvalidSpec(m) => invalid("spec", m),
                    other => invalid("seed", other.to_string()),
                })?;
                let img = render(&scene, scene.canvas_w, scene.canvas_h).map_err(|e| invalid("seed", e.to_string()))?;
                Ok((img, scene))
            }
        }
    }

    pub fn create(&self, req: &CreateRequest) -> Result<CreateResponse, RegistryError> {
        let settings = match &req.config {
            Some(patch) => self.defaults.overlay_json(patch)?,
            None => self.defaults.clone(),
        };
        let built = settings.build()?;
        let (img, scene) = self.initial(req)?;

        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        let id = format!("s{n:06}");
        let dir = self.session_dir(&id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let log_rel = PathBuf::from("sessions").join(&id).join("graph.jsonl");
        let store = Store::new(
            self.blobs.clone(),
            Some(self.root.join(&log_rel)),
            DebugLog::file(dir.join("debug.jsonl")),
        );
        let session = Session::open(
            store,
            &img,
            Some(scene),
            built.backend,
            self.perception.clone(),
            built.planner,
            built.cfg,
        )?;
        let record = SessionRecord {
            session_id: id.clone(),
            config: settings,
            graph_log_path: log_rel,
            status: SessionStatus::Open,
            root_uri: session.head_uri().clone(),
        };
        self.save_record(&record)?;
        let entry = Entry {
            graph: RwLock::new(Arc::new(session.store().graph().clone())),
            record: Mutex::new(record.clone()),
            session: Mutex::new(session),
        };
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(id.clone(), Arc::new(entry));
        Ok(CreateResponse {
            session_id: id,
            root_uri: record.root_uri,
        })
    }

    fn save_record(&self, record: &SessionRecord) -> Result<(), RegistryError> {
        let json = serde_json::to_string_pretty(record).expect("record serializes") + "\n";
        write_atomic(
            &self.session_dir(&record.session_id).join("session.json"),
            json.as_bytes(),
        )
    }

    pub fn turn(&self, id: &str, instruction: &Instruction) -> Result<TurnOutcome, RegistryError> {
        let entry = self.get(id)?;
        if instruction.is_empty() {
            return Err(RegistryError::Validation(vec![FieldError::new(
                "instruction",
                "must not be empty",
            )]));
        }
        let mut session = entry.writer()?;
        let out = session.run_turn(instruction);
        entry.publish(&session);
        Ok(out?)
    }

    /// Moves the head to `target`, or by default to where an undo of the
    /// latest turn lands. Records no action; the next turn branches.
    pub fn undo(&self, id: &str, target: Option<&ImageUri>) -> Result<UndoResponse, RegistryError> {
        let entry = self.get(id)?;
        let mut session = entry.writer()?;
        let target = match target {
            Some(t) => {
                if !session.store().graph().nodes.contains_key(t) {
                    return Err(RegistryError::NotFound(format!("image {t} in session {id}")));
                }
                t.clone()
            }
            None => session.store().graph().undo_target().ok_or_else(|| {
                RegistryError::Validation(vec![FieldError::new(
                    "target_uri",
                    "the head is the root; nothing to undo",
                )])
            })?,
        };
        let node = session.move_head(&target)?;
        entry.publish(&session);
        Ok(UndoResponse {
            head_uri: node.uri.clone(),
            node,
        })
    }

    pub fn close(&self, id: &str) -> Result<SessionRecord, RegistryError> {
        let entry = self.get(id)?;
        let mut session = entry.writer()?;
        session.close();
        let mut rec = entry.record.lock().expect("record lock");
        rec.status = SessionStatus::Closed;
        self.save_record(&rec)?;
        Ok(rec.clone())
    }

    /// PNG bytes of any stored image.
    pub fn image(&self, uri: &ImageUri) -> Result<Vec<u8>, RegistryError> {
        let missing = || RegistryError::NotFound(format!("image {uri}"));
        if !uri.is_well_formed() {
            return Err(missing());
        }
        self.blobs
            .get(uri)
            .map_err(|e| io_err(&self.root.join("blobs"), e))?
            .ok_or_else(missing)
    }

    /// Scores every committed action on the head's lineage. Waits for no
    /// turn: a running one makes this Busy.
    pub fn metrics(&self, id: &str) -> Result<MetricsResponse, RegistryError> {
        let entry = self.get(id)?;
        let session = entry.writer()?;
        let store = session.store();
        let turns = lineage_scores(store, self.perception.as_ref(), &GmsFallback)?;
        let report = SessionReport {
            schema_version: REPORT_SCHEMA_VERSION,
            session: id.to_string(),
            seed: 0,
            perceptual_provider: Some(GmsFallback.name().to_string()),
            summary: Summary::of(&turns),
            turns,
        };
        let drift = drift_report(&[mean_series(id, std::slice::from_ref(&report))]);
        Ok(MetricsResponse {
            session_id: id.to_string(),
            perceptual_provider: GmsFallback.name().to_string(),
            drift_flag: drift.systems[0].psnr_increasing,
            summary: report.summary,
            turns: report.turns,
        })
    }
}

/// The per-action scores behind the metrics endpoint. Targets are
/// recomputed from each action's commands; the predicted state is what
/// perception recovers from the produced image.
pub fn lineage_scores(
    store: &Store,
    perception: &dyn Perception,
    perceptual: &dyn PerceptualProvider,
) -> Result<Vec<TurnScore>, RegistryError> {
    let g = store.graph();
    let Some(head) = g.head_uri.as_ref() else {
        return Ok(Vec::new());
    };
    let path: Vec<&ImageUri> = g.lineage(head)?.into_iter().map(|n| &n.uri).collect();
    let pos = |u: &ImageUri| path.iter().position(|p| *p == u);
    let mut on_path: Vec<(usize, _)> = g
        .actions
        .iter()
        .filter_map(|a| {
            let end = pos(a.key_image_uris.last()?)?;
            pos(&a.base_uri).map(|_| (end, a))
        })
        .collect();
    on_path.sort_by_key(|(end, _)| *end);

    let metric = |e: EvalError| RegistryError::Metrics(e.to_string());
    let opts = EvalOptions {
        perception,
        perceptual: Some(perceptual),
        exec: Exec::default(),
    };
    let mut out = Vec::with_capacity(on_path.len());
    for (i, (_, action)) in on_path.iter().enumerate() {
        let post_uri = action.key_image_uris.last().expect("filtered above");
        let (base_node, post_node) = (&g.nodes[&action.base_uri], &g.nodes[post_uri]);
        let (Some(prev), Some(post_scene)) = (&base_node.scene_ref, &post_node.scene_ref) else {
            return Err(RegistryError::Metrics("image has no scene state".into()));
        };
        let target = if action.command_summary.iter().any(|c| matches!(c, EditCommand::Undo)) {
            post_scene.clone()
        } else {
            apply_transition(prev, &action.command_summary).map_err(|e| RegistryError::Metrics(e.to_string()))?
        };
        let (input, output) = (
            store.image(&action.base_uri)?,
            decode_png(&store.png(post_uri)?).map_err(StoreError::from)?,
        );
        let predicted = perception
            .perceive(
                &output,
                &PerceptionHint {
                    expected: &target,
                    previous: prev,
                },
            )
            .map_err(|e| RegistryError::Metrics(e.to_string()))?;
        let edited = diff_states(prev, &target).touched_ids();
        out.push(score_images(i as u32 + 1, &input, &output, &predicted, &target, &edited, &opts).map_err(metric)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(seed: u64) -> CreateRequest {
        CreateRequest {
            seed: Some(seed),
            ..CreateRequest::default()
        }
    }

    #[test]
    fn create_turn_and_reopen() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        let c = reg.create(&seeded(3)).unwrap();
        let scene = reg
            .get(&c.session_id)
            .unwrap()
            .graph()
            .root()
            .unwrap()
            .scene_ref
            .clone()
            .unwrap();
        let first = scene.objects[0].id.clone();
        let out = reg
            .turn(&c.session_id, &Instruction::dsl(format!("remove({first})")))
            .unwrap();
        assert_ne!(out.final_uri, c.root_uri);
        drop(reg);

        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        let g = reg.get(&c.session_id).unwrap().graph();
        assert_eq!(g.head_uri.as_ref(), Some(&out.final_uri));
        assert_eq!(reg.create(&seeded(4)).unwrap().session_id, "s000002");
    }

    #[test]
    fn create_validates_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        let field = |r: Result<CreateResponse, RegistryError>| match r {
            Err(RegistryError::Validation(v)) => v[0].field.clone(),
            other => panic!("{other:?}"),
        };
        assert_eq!(field(reg.create(&CreateRequest::default())), "initial_image_png_base64");
        let bad = CreateRequest {
            config: Some(serde_json::json!({"backend": "remote"})),
            ..seeded(1)
        };
        assert_eq!(field(reg.create(&bad)), "backend_url");
        let bad = CreateRequest {
            initial_image_png_base64: Some("not png".into()),
            ..CreateRequest::default()
        };
        assert_eq!(field(reg.create(&bad)), "initial_image_png_base64");
    }

    #[test]
    fn undo_then_edit_branches() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        let c = reg.create(&seeded(5)).unwrap();
        let id = &c.session_id;
        let scene = reg.get(id).unwrap().graph().root().unwrap().scene_ref.clone().unwrap();
        let ids: Vec<_> = scene.objects.iter().map(|o| o.id.clone()).collect();
        reg.turn(id, &Instruction::dsl(format!("remove({})", ids[0]))).unwrap();
        let u = reg.undo(id, None).unwrap();
        assert_eq!(u.head_uri, c.root_uri);
        reg.turn(id, &Instruction::dsl(format!("remove({})", ids[1]))).unwrap();
        let g = reg.get(id).unwrap().graph();
        assert_eq!(g.children(&c.root_uri).len(), 2);
        let m = reg.metrics(id).unwrap();
        assert_eq!(m.turns.len(), 1);
        assert_eq!((m.turns[0].if_score, m.turns[0].ic_score), (1.0, 1.0));
    }

    #[test]
    fn closed_sessions_refuse_turns_and_stay_closed() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        let c = reg.create(&seeded(9)).unwrap();
        reg.close(&c.session_id).unwrap();
        let err = reg.turn(&c.session_id, &Instruction::dsl("undo")).unwrap_err();
        assert!(matches!(err, RegistryError::Session(SessionError::Closed)));
        drop(reg);
        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        assert_eq!(reg.list()[0].status, SessionStatus::Closed);
    }

    #[test]
    fn unknown_images_are_not_found() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path(), EditSettings::default()).unwrap();
        for u in ["img-00", "../../etc/passwd", &format!("img-{}", "0".repeat(64))] {
            assert!(matches!(
                reg.image(&ImageUri(u.to_string())),
                Err(RegistryError::NotFound(_))
            ));
        }
    }
}
