//! Folded context store.
//!
//! Three record kinds, matching the three levels of editing memory:
//!
//! - [`ImageContext`]: one node per distinct image, content addressed, in an
//!   append-only DAG ([`StateGraph`]).
//! - [`ToolContext`]: per-attempt working records. They stream to a
//!   [`DebugLog`] and never enter persistent memory.
//! - [`ActionContext`]: one per committed turn, holding only the verified
//!   intent, the accepted image path and the command summary.
//!
//! [`Store`] pairs a graph with a blob store and an optional JSON-lines log
//! that can be replayed after a crash.

mod blobs;
mod log;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::{fmt, io};

use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl;
use crate::imageio::{self, ImageIoError};
use crate::scene::{diff_states, CommandKind, EditCommand, FieldChange, SceneState};

pub use blobs::{BlobStore, DirBlobs, MemoryBlobs, Overlay};
pub use log::{read_log, LogRecord, ReplayReport};

pub const STORE_SCHEMA_VERSION: u32 = 1;

/// `"img-"` followed by the lowercase hex sha256 of the canonical pixel
/// encoding (see [`imageio::pixel_digest`]).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageUri(pub String);

impl ImageUri {
    pub fn of(img: &RgbImage) -> ImageUri {
        ImageUri(format!("img-{}", imageio::pixel_digest(img)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True for `img-` plus 64 lowercase hex digits. Anything else can never
    /// name a blob, which keeps user-supplied URIs out of file paths.
    pub fn is_well_formed(&self) -> bool {
        self.0
            .strip_prefix("img-")
            .is_some_and(|h| h.len() == 64 && h.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
    }

    /// First 12 hex digits, for human-facing text.
    pub fn short(&self) -> &str {
        let end = self.0.len().min(16);
        &self.0[..end]
    }
}

impl fmt::Display for ImageUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformationType {
    Root,
    Replace,
    Remove,
    Add,
    Adjust,
    Undo,
}

impl From<CommandKind> for TransformationType {
    fn from(k: CommandKind) -> TransformationType {
        match k {
            CommandKind::Add => TransformationType::Add,
            CommandKind::Remove => TransformationType::Remove,
            CommandKind::Replace => TransformationType::Replace,
            CommandKind::Adjust => TransformationType::Adjust,
            CommandKind::Undo => TransformationType::Undo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageContext {
    pub uri: ImageUri,
    pub description: String,
    pub parent_uri: Option<ImageUri>,
    pub transformation_type: TransformationType,
    /// Symbolic snapshot, present for synthetic sessions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_ref: Option<SceneState>,
    pub created_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Succeeded,
    Failed,
    Retried,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolContext {
    pub tool_name: String,
    pub parameters: serde_json::Map<String, serde_json::Value>,
    pub thought: String,
    /// Input image first; the produced image last for succeeded attempts.
    pub referenced_uris: Vec<ImageUri>,
    pub status: ToolStatus,
    pub attempt_index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionContext {
    pub intent: String,
    pub key_image_uris: Vec<ImageUri>,
    pub turn_index: u32,
    pub command_summary: Vec<EditCommand>,
    /// Head when the turn started.
    pub base_uri: ImageUri,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown parent `{0}`")]
    UnknownParent(ImageUri),
    #[error("recording `{0}` would close a cycle")]
    CycleWouldForm(ImageUri),
    #[error("the graph already has a root")]
    RootExists,
    #[error("unknown image `{0}`")]
    UnknownTarget(ImageUri),
    #[error("no succeeded attempt to fold")]
    NoSuccessfulPath,
    #[error("blob for `{0}` is missing")]
    MissingBlob(ImageUri),
    #[error("session log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Append-only image DAG plus the persistent action list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateGraph {
    pub nodes: IndexMap<ImageUri, ImageContext>,
    pub actions: Vec<ActionContext>,
    pub head_uri: Option<ImageUri>,
}

impl StateGraph {
    pub fn new() -> StateGraph {
        StateGraph::default()
    }

    pub fn node(&self, uri: &ImageUri) -> Option<&ImageContext> {
        self.nodes.get(uri)
    }

    pub fn head(&self) -> Option<&ImageContext> {
        self.head_uri.as_ref().and_then(|u| self.nodes.get(u))
    }

    pub fn root(&self) -> Option<&ImageContext> {
        self.nodes.values().find(|n| n.parent_uri.is_none())
    }

    pub fn children(&self, uri: &ImageUri) -> Vec<&ImageContext> {
        self.nodes
            .values()
            .filter(|n| n.parent_uri.as_ref() == Some(uri))
            .collect()
    }

    /// Adds a node for `uri` unless one exists; returns the node and whether
    /// it is new. An existing node is returned as is, even when `parent`
    /// differs: a uri names exactly one node. The head does not move, except
    /// that the first root becomes the head of an empty graph.
    pub fn record(
        &mut self,
        uri: ImageUri,
        parent: Option<&ImageUri>,
        transformation_type: TransformationType,
        description: String,
        scene_ref: Option<SceneState>,
    ) -> Result<(ImageContext, bool), StoreError> {
        if let Some(existing) = self.nodes.get(&uri) {
            return Ok((existing.clone(), false));
        }
        match (parent, transformation_type) {
            (None, TransformationType::Root) => {
                if self.root().is_some() {
                    return Err(StoreError::RootExists);
                }
            }
            (None, _) => return Err(StoreError::UnknownParent(ImageUri(String::new()))),
            (Some(p), _) => {
                if !self.nodes.contains_key(p) {
                    return Err(StoreError::UnknownParent(p.clone()));
                }
                if p == &uri {
                    return Err(StoreError::CycleWouldForm(uri));
                }
            }
        }
        let node = ImageContext {
            uri: uri.clone(),
            description,
            parent_uri: parent.cloned(),
            transformation_type,
            scene_ref,
            created_at: self.nodes.len() as u64,
        };
        self.insert(node.clone());
        Ok((node, true))
    }

    fn insert(&mut self, node: ImageContext) {
        if node.parent_uri.is_none() && self.head_uri.is_none() {
            self.head_uri = Some(node.uri.clone());
        }
        self.nodes.insert(node.uri.clone(), node);
    }

    pub fn rollback(&mut self, target: &ImageUri) -> Result<ImageContext, StoreError> {
        let node = self
            .nodes
            .get(target)
            .ok_or_else(|| StoreError::UnknownTarget(target.clone()))?
            .clone();
        self.head_uri = Some(target.clone());
        Ok(node)
    }

    /// Path from the root to `uri`, root first.
    pub fn lineage(&self, uri: &ImageUri) -> Result<Vec<&ImageContext>, StoreError> {
        let mut out = Vec::new();
        let mut cur = self
            .nodes
            .get(uri)
            .ok_or_else(|| StoreError::UnknownTarget(uri.clone()))?;
        loop {
            out.push(cur);
            if out.len() > self.nodes.len() {
                return Err(StoreError::CycleWouldForm(uri.clone()));
            }
            match &cur.parent_uri {
                None => break,
                Some(p) => cur = self.nodes.get(p).ok_or_else(|| StoreError::UnknownParent(p.clone()))?,
            }
        }
        out.reverse();
        Ok(out)
    }

    /// Where an undo from the current head lands: the start of the last turn
    /// when the head is still that turn's result, otherwise the head's parent.
    pub fn undo_target(&self) -> Option<ImageUri> {
        let head = self.head_uri.as_ref()?;
        if let Some(last) = self.actions.last() {
            if last.key_image_uris.last() == Some(head) && &last.base_uri != head {
                return Some(last.base_uri.clone());
            }
        }
        self.nodes.get(head)?.parent_uri.clone()
    }

    /// Node uris in an order where every parent precedes its children, or
    /// `None` if the parent links contain a cycle.
    pub fn topological_order(&self) -> Option<Vec<ImageUri>> {
        let mut depth: IndexMap<&ImageUri, usize> = IndexMap::new();
        for uri in self.nodes.keys() {
            let lineage = self.lineage(uri).ok()?;
            depth.insert(uri, lineage.len());
        }
        let mut order: Vec<(&ImageUri, usize)> = depth.into_iter().collect();
        order.sort_by_key(|&(_, d)| d);
        Some(order.into_iter().map(|(u, _)| u.clone()).collect())
    }

    /// Folds a turn's attempts into one [`ActionContext`]. Only succeeded
    /// attempts contribute, through the image each one produced; everything
    /// else about the attempts is dropped.
    pub fn fold_turn(
        &mut self,
        tool_contexts: &[ToolContext],
        intent: &str,
        verified_commands: &[EditCommand],
        base_uri: &ImageUri,
    ) -> Result<ActionContext, StoreError> {
        let mut key: Vec<ImageUri> = Vec::new();
        for tc in tool_contexts {
            if tc.status != ToolStatus::Succeeded {
                continue;
            }
            let out = tc.referenced_uris.last().ok_or(StoreError::NoSuccessfulPath)?;
            if !self.nodes.contains_key(out) {
                return Err(StoreError::UnknownTarget(out.clone()));
            }
            if key.last() != Some(out) {
                key.push(out.clone());
            }
        }
        if key.is_empty() {
            return Err(StoreError::NoSuccessfulPath);
        }
        if !self.nodes.contains_key(base_uri) {
            return Err(StoreError::UnknownTarget(base_uri.clone()));
        }
        let action = ActionContext {
            intent: intent.to_string(),
            key_image_uris: key,
            turn_index: self.actions.len() as u32 + 1,
            command_summary: verified_commands.to_vec(),
            base_uri: base_uri.clone(),
        };
        self.actions.push(action.clone());
        Ok(action)
    }

    /// Planner-facing memory: the head lineage and the committed turns.
    /// Never includes tool records, so its size depends only on the number
    /// of turns. With a budget, the oldest turns are elided first.
    pub fn render_memory(&self, budget_hint: Option<usize>) -> String {
        let mut header = String::new();
        let Some(head) = self.head() else {
            return "empty graph\n".to_string();
        };
        let _ = writeln!(header, "head: {}", head.uri);
        header.push_str("lineage:\n");
        for n in self.lineage(&head.uri).unwrap_or_default() {
            let kind = serde_json::to_value(n.transformation_type)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let _ = writeln!(header, "  [{kind}] {}: {}", n.uri, n.description);
        }
        let turns: Vec<String> = self
            .actions
            .iter()
            .map(|a| {
                format!(
                    "  {}. {:?} => {} (now {})\n",
                    a.turn_index,
                    a.intent,
                    dsl::print_program(&a.command_summary),
                    a.key_image_uris.last().map_or("", |u| u.as_str())
                )
            })
            .collect();
        let mut skip = 0;
        if let Some(budget) = budget_hint {
            let mut total = header.len() + "turns:\n".len() + turns.iter().map(String::len).sum::<usize>();
            while total > budget && skip < turns.len() {
                total -= turns[skip].len();
                skip += 1;
            }
        }
        let mut doc = header;
        if !turns.is_empty() {
            doc.push_str("turns:\n");
            if skip > 0 {
                let _ = writeln!(doc, "  ({skip} earlier turns omitted)");
            }
            for t in &turns[skip..] {
                doc.push_str(t);
            }
        }
        doc
    }

    /// Canonical serialization of everything that persists across turns.
    pub fn persistent_memory(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }
}

/// Template description of the change from `pre` to `post`.
pub fn describe_transition(pre: &SceneState, post: &SceneState) -> String {
    let diff = diff_states(pre, post);
    let mut parts: Vec<String> = Vec::new();
    for id in &diff.removed {
        parts.push(format!("removed {id}"));
    }
    for c in &diff.changes {
        match &c.change {
            FieldChange::Attribute { old, new } => {
                parts.push(format!("adjusted {} of {} from {old} to {new}", old.attribute(), c.id))
            }
            FieldChange::Name { old, new } => parts.push(format!("replaced {old} ({}) with {new}", c.id)),
            FieldChange::Placement { .. } => parts.push(format!("moved {}", c.id)),
        }
    }
    for o in &diff.added {
        parts.push(format!(
            "added {} {} {} {} {}",
            o.size, o.color, o.material, o.shape, o.name
        ));
    }
    if parts.is_empty() {
        "no symbolic change".to_string()
    } else {
        parts.join("; ")
    }
}

pub fn describe_root(scene: Option<&SceneState>, img: &RgbImage) -> String {
    match scene {
        Some(s) => {
            let names: Vec<&str> = s.objects.iter().map(|o| o.name.as_str()).collect();
            format!(
                "initial {} scene with {} objects: {}",
                s.background,
                names.len(),
                names.join(", ")
            )
        }
        None => format!("uploaded image {}x{}", img.width(), img.height()),
    }
}

/// One streamed tool record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebugRecord {
    pub schema_version: u32,
    pub turn_index: u32,
    pub sub_goal: usize,
    pub tool: ToolContext,
}

enum DebugSink {
    Off,
    Memory(Vec<DebugRecord>),
    File(PathBuf),
}

/// Sidecar sink for [`ToolContext`]s. Cheap to clone; clones share the
/// sink. Nothing here is ever read back into planner memory.
#[derive(Clone)]
pub struct DebugLog(Arc<Mutex<DebugSink>>);

impl DebugLog {
    pub fn off() -> DebugLog {
        DebugLog(Arc::new(Mutex::new(DebugSink::Off)))
    }

    pub fn memory() -> DebugLog {
        DebugLog(Arc::new(Mutex::new(DebugSink::Memory(Vec::new()))))
    }

    pub fn file(path: impl Into<PathBuf>) -> DebugLog {
        DebugLog(Arc::new(Mutex::new(DebugSink::File(path.into()))))
    }

    pub fn record(&self, rec: DebugRecord) -> io::Result<()> {
        let mut sink = self.0.lock().expect("debug log lock");
        match &mut *sink {
            DebugSink::Off => Ok(()),
            DebugSink::Memory(v) => {
                v.push(rec);
                Ok(())
            }
            DebugSink::File(p) => log::append_lines(p, &[serde_json::to_string(&rec)?]),
        }
    }

    /// Records so far: the in-memory list, or the file parsed back.
    pub fn records(&self) -> Vec<DebugRecord> {
        let sink = self.0.lock().expect("debug log lock");
        match &*sink {
            DebugSink::Off => Vec::new(),
            DebugSink::Memory(v) => v.clone(),
            DebugSink::File(p) => std::fs::read_to_string(p)
                .unwrap_or_default()
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect(),
        }
    }
}

/// Full transcript with every tool record inlined, as an unfolded memory
/// would carry it. Only used to measure what folding saves.
pub fn raw_transcript(graph: &StateGraph, debug: &[DebugRecord]) -> String {
    let mut doc = graph.render_memory(None);
    doc.push_str("tool calls:\n");
    for r in debug {
        let _ = writeln!(
            doc,
            "  turn {} sub-goal {}: {}",
            r.turn_index,
            r.sub_goal,
            serde_json::to_string(&r.tool).expect("tool context serializes")
        );
    }
    doc
}

/// A staged node waiting for commit.
#[derive(Clone, Debug)]
pub struct StagedImage {
    pub node: ImageContext,
    pub png: Vec<u8>,
}

/// A [`StateGraph`] bound to blob storage, a replayable log and a debug
/// sink. All mutation goes through here so the log stays in step.
pub struct Store {
    graph: StateGraph,
    blobs: Arc<dyn BlobStore>,
    log: Option<PathBuf>,
    debug: DebugLog,
    /// Nodes recorded since this store was staged, in order.
    staged: Vec<ImageUri>,
}

impl Store {
    pub fn new(blobs: Arc<dyn BlobStore>, log: Option<PathBuf>, debug: DebugLog) -> Store {
        Store {
            graph: StateGraph::new(),
            blobs,
            log,
            debug,
            staged: Vec::new(),
        }
    }

    pub fn in_memory() -> Store {
        Store::new(Arc::new(MemoryBlobs::new()), None, DebugLog::memory())
    }

    /// Rebuilds a store from its log. The log is then appended to as usual.
    pub fn replay(
        blobs: Arc<dyn BlobStore>,
        log_path: PathBuf,
        debug: DebugLog,
    ) -> Result<(Store, ReplayReport), StoreError> {
        let (graph, report) = log::replay_file(&log_path)?;
        let mut store = Store::new(blobs, Some(log_path), debug);
        store.graph = graph;
        Ok((store, report))
    }

    pub fn graph(&self) -> &StateGraph {
        &self.graph
    }

    pub fn blobs(&self) -> &Arc<dyn BlobStore> {
        &self.blobs
    }

    pub fn debug(&self) -> &DebugLog {
        &self.debug
    }

    pub fn head_uri(&self) -> Option<&ImageUri> {
        self.graph.head_uri.as_ref()
    }

    fn append(&self, records: &[LogRecord]) -> Result<(), StoreError> {
        if let Some(p) = &self.log {
            let lines: Vec<String> = records
                .iter()
                .map(|r| serde_json::to_string(r).expect("log record serializes"))
                .collect();
            log::append_lines(p, &lines)?;
        }
        Ok(())
    }

    pub fn record_image(
        &mut self,
        img: &RgbImage,
        parent: Option<&ImageUri>,
        transformation_type: TransformationType,
        description: String,
        scene_ref: Option<SceneState>,
    ) -> Result<ImageContext, StoreError> {
        let uri = ImageUri::of(img);
        if self.graph.nodes.contains_key(&uri) {
            return Ok(self.graph.nodes[&uri].clone());
        }
        let head_before = self.graph.head_uri.clone();
        let (node, _) = self
            .graph
            .record(uri.clone(), parent, transformation_type, description, scene_ref)?;
        let persisted = self
            .blobs
            .put(&uri, &imageio::encode_png(img))
            .map_err(StoreError::from)
            .and_then(|()| self.append(&[LogRecord::image_node(node.clone())]));
        if let Err(e) = persisted {
            self.graph.nodes.pop();
            self.graph.head_uri = head_before;
            return Err(e);
        }
        self.staged.push(uri);
        Ok(node)
    }

    /// Creates the root node from an initial image.
    pub fn record_root(&mut self, img: &RgbImage, scene: Option<SceneState>) -> Result<ImageContext, StoreError> {
        let description = describe_root(scene.as_ref(), img);
        let node = self.record_image(img, None, TransformationType::Root, description, scene)?;
        self.append(&[LogRecord::head_move(None, node.uri.clone(), "root")])?;
        Ok(node)
    }

    /// Moves the head to `target` and logs the move.
    pub fn rollback(&mut self, target: &ImageUri) -> Result<ImageContext, StoreError> {
        let from = self.graph.head_uri.clone();
        let node = self.graph.rollback(target)?;
        if let Err(e) = self.append(&[LogRecord::head_move(from.clone(), target.clone(), "rollback")]) {
            self.graph.head_uri = from;
            return Err(e);
        }
        Ok(node)
    }

    pub fn image(&self, uri: &ImageUri) -> Result<RgbImage, StoreError> {
        let png = self.png(uri)?;
        Ok(imageio::decode_png(&png)?)
    }

    pub fn png(&self, uri: &ImageUri) -> Result<Vec<u8>, StoreError> {
        if !self.graph.nodes.contains_key(uri) {
            return Err(StoreError::UnknownTarget(uri.clone()));
        }
        self.blobs.get(uri)?.ok_or_else(|| StoreError::MissingBlob(uri.clone()))
    }

    pub fn record_tool(&self, turn_index: u32, sub_goal: usize, tool: ToolContext) -> Result<(), StoreError> {
        self.debug.record(DebugRecord {
            schema_version: STORE_SCHEMA_VERSION,
            turn_index,
            sub_goal,
            tool,
        })?;
        Ok(())
    }

    /// A scratch copy for one turn: same graph, blob writes held in memory,
    /// no log, shared debug sink. Nothing done to it is visible here until
    /// [`Store::commit_turn`].
    pub fn stage(&self) -> Store {
        Store {
            graph: self.graph.clone(),
            blobs: Arc::new(Overlay::new(self.blobs.clone())),
            log: None,
            debug: self.debug.clone(),
            staged: Vec::new(),
        }
    }

    /// Images recorded in this (staged) store with their PNG bytes.
    pub fn staged_images(&self) -> Result<Vec<StagedImage>, StoreError> {
        self.staged
            .iter()
            .map(|u| {
                Ok(StagedImage {
                    node: self.graph.nodes[u].clone(),
                    png: self.blobs.get(u)?.ok_or_else(|| StoreError::MissingBlob(u.clone()))?,
                })
            })
            .collect()
    }

    /// Commits a verified turn: the staged images that lie on the accepted
    /// path, the folded action, and the head move, written to the log as one
    /// batch. `new_head` must be the last key image.
    pub fn commit_turn(
        &mut self,
        staged: &[StagedImage],
        tool_contexts: &[ToolContext],
        intent: &str,
        verified_commands: &[EditCommand],
        new_head: &ImageUri,
    ) -> Result<ActionContext, StoreError> {
        let base = self.graph.head_uri.clone().ok_or(StoreError::NoSuccessfulPath)?;
        let mut g = self.graph.clone();
        let mut records = Vec::new();
        let mut blobs = Vec::new();
        for s in staged {
            let n = &s.node;
            let (node, is_new) = g.record(
                n.uri.clone(),
                n.parent_uri.as_ref(),
                n.transformation_type,
                n.description.clone(),
                n.scene_ref.clone(),
            )?;
            if is_new {
                records.push(LogRecord::image_node(node));
                blobs.push((n.uri.clone(), &s.png));
            }
        }
        let action = g.fold_turn(tool_contexts, intent, verified_commands, &base)?;
        if action.key_image_uris.last() != Some(new_head) {
            return Err(StoreError::UnknownTarget(new_head.clone()));
        }
        g.rollback(new_head)?;
        records.push(LogRecord::action(action.clone()));
        records.push(LogRecord::head_move(Some(base), new_head.clone(), "commit"));
        for (uri, png) in blobs {
            self.blobs.put(&uri, png)?;
        }
        self.append(&records)?;
        self.graph = g;
        Ok(action)
    }

    pub fn render_memory(&self, budget_hint: Option<usize>) -> String {
        self.graph.render_memory(budget_hint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AttrValue, Color};

    fn img(seed: u8) -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| image::Rgb([seed, x as u8, y as u8]))
    }

    fn tool(status: ToolStatus, input: &ImageUri, output: Option<&ImageUri>, attempt: u32) -> ToolContext {
        let mut params = serde_json::Map::new();
        params.insert("padding".into(), 16.into());
        let mut refs = vec![input.clone()];
        refs.extend(output.cloned());
        ToolContext {
            tool_name: "adjust".into(),
            parameters: params,
            thought: "make the cooler greener".into(),
            referenced_uris: refs,
            status,
            attempt_index: attempt,
        }
    }

    #[test]
    fn same_bytes_same_node() {
        let mut s = Store::in_memory();
        let root = s.record_root(&img(0), None).unwrap();
        let a = s
            .record_image(&img(1), Some(&root.uri), TransformationType::Adjust, "a".into(), None)
            .unwrap();
        let b = s
            .record_image(&img(1), Some(&root.uri), TransformationType::Adjust, "b".into(), None)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(s.graph().nodes.len(), 2);
        assert_eq!(s.head_uri(), Some(&root.uri));
    }

    #[test]
    fn unknown_parent() {
        let mut s = Store::in_memory();
        let ghost = ImageUri::of(&img(9));
        let e = s
            .record_image(&img(1), Some(&ghost), TransformationType::Add, String::new(), None)
            .unwrap_err();
        assert!(matches!(e, StoreError::UnknownParent(_)));
        let e = s
            .record_image(&img(1), None, TransformationType::Add, String::new(), None)
            .unwrap_err();
        assert!(matches!(e, StoreError::UnknownParent(_)));
        assert!(s.graph().nodes.is_empty());
    }

    #[test]
    fn rollback_and_branch() {
        let mut s = Store::in_memory();
        let root = s.record_root(&img(0), None).unwrap();
        let a = s
            .record_image(&img(1), Some(&root.uri), TransformationType::Add, "a".into(), None)
            .unwrap();
        s.rollback(&a.uri).unwrap();
        s.rollback(&root.uri).unwrap();
        let b = s
            .record_image(&img(2), Some(&root.uri), TransformationType::Add, "b".into(), None)
            .unwrap();
        s.rollback(&b.uri).unwrap();
        assert_eq!(s.graph().children(&root.uri).len(), 2);
        assert_eq!(s.graph().lineage(&b.uri).unwrap().len(), 2);
        s.rollback(&root.uri).unwrap();
        assert_eq!(s.image(&root.uri).unwrap(), img(0));
        assert!(matches!(
            s.rollback(&ImageUri::of(&img(7))),
            Err(StoreError::UnknownTarget(_))
        ));
    }

    #[test]
    fn fold_drops_attempt_details() {
        let cmds = vec![EditCommand::adjust("cooler", AttrValue::Color(Color::SeaFoamGreen))];
        let run = |failures: u32| {
            let mut s = Store::in_memory();
            let root = s.record_root(&img(0), None).unwrap();
            let mut staging = s.stage();
            let out = staging
                .record_image(&img(1), Some(&root.uri), TransformationType::Adjust, "x".into(), None)
                .unwrap();
            let mut tools: Vec<ToolContext> = (1..=failures)
                .map(|i| tool(ToolStatus::Retried, &root.uri, None, i))
                .collect();
            tools.push(tool(ToolStatus::Succeeded, &root.uri, Some(&out.uri), failures + 1));
            let staged = staging.staged_images().unwrap();
            let action = s
                .commit_turn(&staged, &tools, "make it sea-foam green", &cmds, &out.uri)
                .unwrap();
            (serde_json::to_string(&action).unwrap(), s.graph().persistent_memory())
        };
        let (a0, m0) = run(0);
        let (a9, m9) = run(9);
        assert_eq!(a0.len(), a9.len());
        assert_eq!(m0, m9);
        assert!(!a9.contains("padding") && !a9.contains("thought"));
    }

    #[test]
    fn fold_requires_success() {
        let mut g = StateGraph::new();
        let root = ImageUri::of(&img(0));
        g.record(root.clone(), None, TransformationType::Root, String::new(), None)
            .unwrap();
        let tools = vec![tool(ToolStatus::Failed, &root, None, 1)];
        assert!(matches!(
            g.fold_turn(&tools, "x", &[], &root),
            Err(StoreError::NoSuccessfulPath)
        ));
        assert!(g.actions.is_empty());
    }

    #[test]
    fn undo_target_prefers_turn_start() {
        let mut s = Store::in_memory();
        let root = s.record_root(&img(0), None).unwrap();
        let mut st = s.stage();
        let a = st
            .record_image(&img(1), Some(&root.uri), TransformationType::Add, "a".into(), None)
            .unwrap();
        let b = st
            .record_image(&img(2), Some(&a.uri), TransformationType::Adjust, "b".into(), None)
            .unwrap();
        let tools = vec![
            tool(ToolStatus::Succeeded, &root.uri, Some(&a.uri), 1),
            tool(ToolStatus::Succeeded, &a.uri, Some(&b.uri), 1),
        ];
        s.commit_turn(&st.staged_images().unwrap(), &tools, "two things", &[], &b.uri)
            .unwrap();
        assert_eq!(s.graph().undo_target(), Some(root.uri.clone()));
        s.rollback(&a.uri).unwrap();
        assert_eq!(s.graph().undo_target(), Some(root.uri.clone()));
        s.rollback(&root.uri).unwrap();
        assert_eq!(s.graph().undo_target(), None);
    }

    #[test]
    fn memory_renders_root_only_for_fresh_graph() {
        let mut s = Store::in_memory();
        s.record_root(&img(0), None).unwrap();
        let doc = s.render_memory(None);
        assert!(doc.contains("[root]"));
        assert!(!doc.contains("turns:"));
        assert_eq!(doc.lines().count(), 3);
    }
}
