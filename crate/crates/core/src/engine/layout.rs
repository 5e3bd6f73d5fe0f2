//! On-disk session directories:
//!
//! ```text
//! manifest.json
//! states/s{t}.json      t = 0..=T
//! dsl/t{t}.txt          t = 1..=T
//! instructions/t{t}.txt
//! images/s{t}.png
//! ```
//!
//! Every file except the manifest is a pure function of `(seed, spec)`.
//! The manifest's `generated_at` is the only wall-clock value anywhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{build_session_with, BenchSession, EngineError, Filter, Phrasing, SessionSpec};
use crate::dsl::{parse_canonical, DslError};
use crate::imageio::{decode_png, encode_png, ImageIoError};
use crate::par::{self, Exec};
use crate::scene::{CommandKind, EditCommand, SceneState};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImageIoError },
    #[error("{path}: {source}")]
    Dsl { path: PathBuf, source: DslError },
    #[error("unsupported manifest schema version {0}")]
    SchemaVersion(u32),
    #[error("hash mismatch for {0}")]
    HashMismatch(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub spec: SessionSpec,
    pub n_turns: u32,
    /// Command kinds per turn, in program order.
    pub command_kinds: Vec<Vec<CommandKind>>,
    /// Relative path → lowercase hex sha256 of the file bytes.
    pub artifacts: BTreeMap<String, String>,
    /// Unix seconds at write time.
    pub generated_at: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LayoutError + '_ {
    move |source| LayoutError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(dir: &Path, rel: &str) -> Result<Vec<u8>, LayoutError> {
    let p = dir.join(rel);
    fs::read(&p).map_err(io_err(&p))
}

/// Serialized artifacts of a session, in write order.
fn artifacts(s: &BenchSession) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for (t, st) in s.states.iter().enumerate() {
        out.push((format!("states/s{t}.json"), st.to_canonical_json().into_bytes()));
    }
    for t in 1..=s.n_turns() {
        out.push((format!("dsl/t{t}.txt"), format!("{}\n", s.dsl[t - 1]).into_bytes()));
        out.push((
            format!("instructions/t{t}.txt"),
            format!("{}\n", s.instructions[t - 1]).into_bytes(),
        ));
    }
    for (t, img) in s.images.iter().enumerate() {
        out.push((format!("images/s{t}.png"), encode_png(img)));
    }
    out
}

pub fn write_session(dir: &Path, s: &BenchSession) -> Result<Manifest, LayoutError> {
    for sub in ["states", "dsl", "instructions", "images"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut hashes = BTreeMap::new();
    for (rel, bytes) in artifacts(s) {
        let p = dir.join(&rel);
        fs::write(&p, &bytes).map_err(io_err(&p))?;
        hashes.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: s.spec.seed,
        spec: s.spec.clone(),
        n_turns: s.n_turns() as u32,
        command_kinds: s
            .commands
            .iter()
            .map(|c| c.iter().map(EditCommand::kind).collect())
            .collect(),
        artifacts: hashes,
        generated_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let p = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, json + "\n").map_err(io_err(&p))?;
    Ok(manifest)
}

/// A session read back from disk. Instructions are kept verbatim; the
/// commands come from parsing the DSL files.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSession {
    pub manifest: Manifest,
    pub states: Vec<SceneState>,
    pub commands: Vec<Vec<EditCommand>>,
    pub dsl: Vec<String>,
    pub instructions: Vec<String>,
    pub images: Vec<RgbImage>,
}

fn text(dir: &Path, rel: &str) -> Result<String, LayoutError> {
    let bytes = read(dir, rel)?;
    let s = String::from_utf8_lossy(&bytes);
    Ok(s.strip_suffix('\n').unwrap_or(&s).to_string())
}

/// Loads and hash-checks a session directory.
pub fn load_session(dir: &Path) -> Result<LoadedSession, LayoutError> {
    let mp = dir.join("manifest.json");
    let raw = fs::read(&mp).map_err(io_err(&mp))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|source| LayoutError::Json { path: mp, source })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(LayoutError::SchemaVersion(manifest.schema_version));
    }
    for (rel, want) in &manifest.artifacts {
        if &hex::encode(Sha256::digest(read(dir, rel)?)) != want {
            return Err(LayoutError::HashMismatch(rel.clone()));
        }
    }
    let n = manifest.n_turns as usize;
    let mut states = Vec::with_capacity(n + 1);
    let mut images = Vec::with_capacity(n + 1);
    for t in 0..=n {
        let rel = format!("states/s{t}.json");
        let st = serde_json::from_slice(&read(dir, &rel)?).map_err(|source| LayoutError::Json {
            path: dir.join(&rel),
            source,
        })?;
        states.push(st);
        let rel = format!("images/s{t}.png");
        images.push(decode_png(&read(dir, &rel)?).map_err(|source| LayoutError::Image {
            path: dir.join(&rel),
            source,
        })?);
    }
    let mut dsl = Vec::with_capacity(n);
    let mut commands = Vec::with_capacity(n);
    let mut instructions = Vec::with_capacity(n);
    for t in 1..=n {
        let rel = format!("dsl/t{t}.txt");
        let src = text(dir, &rel)?;
        commands.push(parse_canonical(&src).map_err(|source| LayoutError::Dsl {
            path: dir.join(&rel),
            source,
        })?);
        dsl.push(src);
        instructions.push(text(dir, &format!("instructions/t{t}.txt"))?);
    }
    Ok(LoadedSession {
        manifest,
        states,
        commands,
        dsl,
        instructions,
        images,
    })
}

/// Builds `seeds` in parallel and writes those passing `filter` to
/// `root/session_{seed:04}`. Returns the written directories in seed order.
pub fn build_batch(
    root: &Path,
    base: &SessionSpec,
    seeds: &[u64],
    filter: Filter,
    exec: Exec,
) -> Result<Vec<PathBuf>, LayoutError> {
    let results = par::map(exec, seeds, |&seed| -> Result<Option<PathBuf>, LayoutError> {
        let spec = SessionSpec { seed, ..base.clone() };
        // sessions already run in parallel; render each one sequentially
        let s = build_session_with(&spec, Phrasing::Template, Exec::Sequential)?;
        if !filter.accepts(&s) {
            return Ok(None);
        }
        let dir = root.join(format!("session_{seed:04}"));
        write_session(&dir, &s)?;
        Ok(Some(dir))
    });
    results.into_iter().filter_map(Result::transpose).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::build_session;

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for sub in ["states", "dsl", "instructions", "images"] {
            for e in fs::read_dir(dir.join(sub)).unwrap() {
                let p = e.unwrap().path();
                out.insert(
                    format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                    fs::read(p).unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn round_trip_and_repeatable_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let s = build_session(&SessionSpec::with_seed(5)).unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let ma = write_session(&a, &s).unwrap();
        let mb = write_session(&b, &build_session(&SessionSpec::with_seed(5)).unwrap()).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
        assert_eq!(ma.artifacts, mb.artifacts);
        assert_eq!(ma.artifacts.len(), 4 + 3 + 3 + 4);

        let l = load_session(&a).unwrap();
        assert_eq!(l.manifest, ma);
        assert_eq!((l.states, l.commands, l.images), (s.states, s.commands, s.images));
        assert_eq!((l.dsl, l.instructions), (s.dsl, s.instructions));
    }

    #[test]
    fn tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        write_session(tmp.path(), &build_session(&SessionSpec::with_seed(1)).unwrap()).unwrap();
        fs::write(tmp.path().join("dsl/t1.txt"), "undo\n").unwrap();
        assert!(matches!(load_session(tmp.path()), Err(LayoutError::HashMismatch(p)) if p == "dsl/t1.txt"));
    }

    #[test]
    fn batch_writes_one_directory_per_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SessionSpec {
            canvas: (64, 48),
            ..SessionSpec::default()
        };
        let seeds: Vec<u64> = (0..96).collect();
        let dirs = build_batch(tmp.path(), &spec, &seeds, Filter::default(), Exec::default()).unwrap();
        assert_eq!(dirs.len(), 96);
        for d in &dirs {
            load_session(d).unwrap();
        }
        let none = build_batch(
            &tmp.path().join("x"),
            &spec,
            &seeds[..4],
            Filter {
                min_objects: 50,
                min_kinds: 0,
            },
            Exec::Sequential,
        )
        .unwrap();
        assert!(none.is_empty());
    }
}
