//! Drives a generated session through the editing loop and writes an
//! outputs directory the evaluator can score.
//!
//! ```text
//! images/s{t}.png   head image after turn t (s0 is the session's s0)
//! states/s{t}.json  head scene after turn t
//! run.json          per-turn outcomes and the final persistent memory
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{load_session, LayoutError};
use crate::ild::Backend;
use crate::imageio::encode_png;
use crate::planner::{Instruction, Perception, Planner, Session, SessionConfig, SessionError, TurnStatus};
use crate::store::{ImageUri, Store, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// What the planner is shown each turn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionSource {
    /// Paraphrase text plus the canonical program.
    #[default]
    Dsl,
    /// Paraphrase text only.
    Text,
}

#[derive(Clone)]
pub struct RunOptions {
    pub backend: Arc<dyn Backend>,
    pub perception: Arc<dyn Perception>,
    pub planner: Planner,
    pub cfg: SessionConfig,
    pub source: InstructionSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    pub status: TurnStatus,
    pub attempts: u32,
    pub uri: ImageUri,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub backend: String,
    pub turns: Vec<TurnRecord>,
    pub persistent_memory: String,
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs every turn of the session in `session_dir` against a fresh
/// in-memory store (or `store`, when given) and writes the outputs.
/// Failed and rolled-back turns still write the head image they left.
pub fn run_session(
    session_dir: &Path,
    outputs_dir: &Path,
    opts: &RunOptions,
    store: Option<Store>,
) -> Result<RunReport, PipelineError> {
    let session = load_session(session_dir)?;
    let mut live = Session::open(
        store.unwrap_or_else(Store::in_memory),
        &session.images[0],
        Some(session.states[0].clone()),
        opts.backend.clone(),
        opts.perception.clone(),
        opts.planner.clone(),
        SessionConfig {
            turn_limit: opts.cfg.turn_limit.max(session.manifest.n_turns),
            ..opts.cfg.clone()
        },
    )?;
    write(&outputs_dir.join("images/s0.png"), &encode_png(&session.images[0]))?;
    let mut turns = Vec::new();
    for (i, text) in session.instructions.iter().enumerate() {
        let t = i + 1;
        let instr = Instruction {
            text: text.clone(),
            dsl: match opts.source {
                InstructionSource::Dsl => Some(session.dsl[i].clone()),
                InstructionSource::Text => None,
            },
        };
        let out = live.run_turn(&instr)?;
        write(
            &outputs_dir.join(format!("images/s{t}.png")),
            &encode_png(&live.head_image()?),
        )?;
        if let Some(scene) = live.head_scene() {
            write(
                &outputs_dir.join(format!("states/s{t}.json")),
                scene.to_canonical_json().as_bytes(),
            )?;
        }
        turns.push(TurnRecord {
            turn: t as u32,
            status: out.status,
            attempts: out.attempts,
            uri: out.final_uri,
            error: out.error,
        });
    }
    let report = RunReport {
        seed: session.manifest.seed,
        backend: opts.backend.name().to_string(),
        turns,
        persistent_memory: live.store().graph().persistent_memory(),
    };
    let json = serde_json::to_string_pretty(&report).expect("run report serializes") + "\n";
    write(&outputs_dir.join("run.json"), json.as_bytes())?;
    Ok(report)
}
