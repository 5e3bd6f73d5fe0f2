//! JSON-lines session log: one record per node, action or head move.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionContext, ImageContext, ImageUri, StateGraph, StoreError, STORE_SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    ImageNode {
        schema_version: u32,
        node: ImageContext,
    },
    ActionContext {
        schema_version: u32,
        action: ActionContext,
    },
    HeadMove {
        schema_version: u32,
        from: Option<ImageUri>,
        to: ImageUri,
        reason: String,
    },
}

impl LogRecord {
    pub fn image_node(node: ImageContext) -> LogRecord {
        LogRecord::ImageNode {
            schema_version: STORE_SCHEMA_VERSION,
            node,
        }
    }

    pub fn action(action: ActionContext) -> LogRecord {
        LogRecord::ActionContext {
            schema_version: STORE_SCHEMA_VERSION,
            action,
        }
    }

    pub fn head_move(from: Option<ImageUri>, to: ImageUri, reason: &str) -> LogRecord {
        LogRecord::HeadMove {
            schema_version: STORE_SCHEMA_VERSION,
            from,
            to,
            reason: reason.to_string(),
        }
    }
}

/// Appends whole lines with a single write and syncs, so a crash leaves at
/// most one torn line at the end of the file.
pub(crate) fn append_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    if lines.is_empty() {
        return Ok(());
    }
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(buf.as_bytes())?;
    f.sync_data()
}

/// What replay had to skip.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    /// A trailing line that did not parse (torn write).
    pub torn_tail: bool,
    /// A trailing action whose head move never made it to disk.
    pub dropped_action: bool,
}

/// Parses a log. Only the final line may be malformed; it is reported as
/// torn and ignored.
pub fn read_log(text: &str) -> Result<(Vec<LogRecord>, bool), StoreError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    let mut torn = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => torn = true,
            Err(e) => {
                return Err(StoreError::CorruptLog {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((out, torn))
}

/// Applies records in order. A commit is written as nodes, action, head
/// move; an action not followed by its head move is an interrupted commit
/// and is dropped so the head stays at the last completed move.
pub fn replay(records: &[LogRecord]) -> Result<(StateGraph, bool), StoreError> {
    let mut g = StateGraph::new();
    let mut pending: Option<ActionContext> = None;
    for (i, r) in records.iter().enumerate() {
        match r {
            LogRecord::ImageNode { node, .. } => {
                if let Some(p) = &node.parent_uri {
                    if !g.nodes.contains_key(p) {
                        return Err(StoreError::CorruptLog {
                            line: i + 1,
                            message: format!("node before its parent {p}"),
                        });
                    }
                }
                g.insert(node.clone());
            }
            LogRecord::ActionContext { action, .. } => {
                if let Some(a) = pending.take() {
                    g.actions.push(a);
                }
                pending = Some(action.clone());
            }
            LogRecord::HeadMove { to, .. } => {
                if !g.nodes.contains_key(to) {
                    return Err(StoreError::CorruptLog {
                        line: i + 1,
                        message: format!("head move to unknown {to}"),
                    });
                }
                if let Some(a) = pending.take() {
                    g.actions.push(a);
                }
                g.head_uri = Some(to.clone());
            }
        }
    }
    Ok((g, pending.is_some()))
}

pub(crate) fn replay_file(path: &Path) -> Result<(StateGraph, ReplayReport), StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let (records, torn_tail) = read_log(&text)?;
    let (graph, dropped_action) = replay(&records)?;
    if torn_tail {
        // cut the torn bytes so later appends start on a fresh line
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        fs::write(path, &text[..keep])?;
    }
    Ok((
        graph,
        ReplayReport {
            records: records.len(),
            torn_tail,
            dropped_action,
        },
    ))
}
