//! State-based instruction-following and consistency scores, Otsu-masked
//! background fidelity, and per-turn drift reports.
//!
//! An outputs directory mirrors part of the session layout:
//!
//! ```text
//! images/s{t}.png    editor output after turn t (s0 optional, defaults to
//!                    the session's own s0)
//! states/s{t}.json   optional recorded post-state; when absent the state
//!                    is recovered from the image by a perception provider
//! ```

pub mod metrics;
pub mod perceptual;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{load_session, LayoutError};
use crate::imageio::decode_png;
use crate::mask::BitMask;
use crate::par::{self, Exec};
use crate::planner::{Perception, PerceptionError, PerceptionHint};
use crate::scene::{diff_states, Attribute, ObjectId, ObjectSpec, SceneState};

pub use metrics::{background_mask, diff_map, masked_psnr, masked_ssim, otsu_threshold, DiffMap, Otsu, PSNR_CAP_DB};
pub use perceptual::{GmsFallback, HttpPerceptual, PerceptualProvider, FALLBACK_NAME};
pub use report::{drift_report, mean_series, DriftReport, DriftStats, SystemDrift, SystemSeries};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("{0} pixels exceed the exact Otsu search range")]
    TooManyPixels(u64),
    #[error("mask is empty")]
    EmptyMask,
    #[error("no pixel has full window support inside the mask")]
    MaskTooThin,
    #[error("perceptual provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

/// One binary attribute check. `attribute` is one of the four vocabulary
/// attributes, or `presence` for a removal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub object_id: ObjectId,
    pub attribute: String,
    pub s: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateScores {
    pub if_score: f64,
    pub ic_score: f64,
    pub if_detail: Vec<AttributeScore>,
    pub ic_detail: Vec<AttributeScore>,
}

/// Pairs target objects with predicted ones by name, breaking ties by the
/// highest bbox IoU and then the smallest id. Targets are visited in id
/// order, so the result does not depend on list order.
fn match_objects<'a>(predicted: &'a SceneState, target: &'a SceneState) -> BTreeMap<&'a ObjectId, &'a ObjectSpec> {
    let mut targets: Vec<&ObjectSpec> = target.objects.iter().collect();
    targets.sort_by(|a, b| a.id.cmp(&b.id));
    let mut used: BTreeSet<&ObjectId> = BTreeSet::new();
    let mut out = BTreeMap::new();
    for t in targets {
        let best = predicted
            .objects
            .iter()
            .filter(|p| p.name == t.name && !used.contains(&p.id))
            .max_by(|a, b| {
                a.bbox
                    .iou(&t.bbox)
                    .total_cmp(&b.bbox.iou(&t.bbox))
                    .then_with(|| b.id.cmp(&a.id))
            });
        if let Some(p) = best {
            used.insert(&p.id);
            out.insert(&t.id, p);
        }
    }
    out
}

fn object_scores(id: &ObjectId, target: &ObjectSpec, got: Option<&ObjectSpec>) -> Vec<AttributeScore> {
    Attribute::ALL
        .iter()
        .map(|&a| AttributeScore {
            object_id: id.clone(),
            attribute: a.token().to_string(),
            s: got.is_some_and(|g| g.get(a) == target.get(a)) as u8,
        })
        .collect()
}

/// `(1/N) Σ_i (1/M_i) Σ_j s_ij` over per-object groups; no groups scores 1.
fn average(groups: &[Vec<AttributeScore>]) -> f64 {
    if groups.is_empty() {
        return 1.0;
    }
    let per = |g: &Vec<AttributeScore>| g.iter().map(|a| a.s as f64).sum::<f64>() / g.len() as f64;
    groups.iter().map(per).sum::<f64>() / groups.len() as f64
}

/// Scores one turn. `edited_ids` are the objects the turn's commands
/// touched, including removed ones; every other object of `target` is
/// preserved. Edited objects present in `target` are checked on their four
/// attributes; edited objects absent from `target` (removals) get one
/// `presence` check passing iff `predicted` has no object with that id.
/// Predicted objects matched to nothing and not accounted for by a removal
/// are charged to IC as all-zero objects.
pub fn score_turn(predicted: &SceneState, target: &SceneState, edited_ids: &[ObjectId]) -> StateScores {
    let edited: BTreeSet<&ObjectId> = edited_ids.iter().collect();
    let matched = match_objects(predicted, target);
    let mut if_groups = Vec::new();
    for id in &edited {
        if_groups.push(match target.object(id) {
            Some(t) => object_scores(id, t, matched.get(id).copied()),
            None => vec![AttributeScore {
                object_id: (*id).clone(),
                attribute: "presence".into(),
                s: (!predicted.contains(id)) as u8,
            }],
        });
    }
    let mut ic_groups = Vec::new();
    let mut preserved: Vec<&ObjectSpec> = target.objects.iter().filter(|o| !edited.contains(&o.id)).collect();
    preserved.sort_by(|a, b| a.id.cmp(&b.id));
    for t in preserved {
        ic_groups.push(object_scores(&t.id, t, matched.get(&t.id).copied()));
    }
    let taken: BTreeSet<&ObjectId> = matched.values().map(|p| &p.id).collect();
    let mut extras: Vec<&ObjectSpec> = predicted
        .objects
        .iter()
        .filter(|p| !taken.contains(&p.id) && !(edited.contains(&p.id) && !target.contains(&p.id)))
        .collect();
    extras.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.name.cmp(&b.name)));
    for p in extras {
        ic_groups.push(object_scores(&p.id, p, None));
    }
    StateScores {
        if_score: average(&if_groups),
        ic_score: average(&ic_groups),
        if_detail: if_groups.concat(),
        ic_detail: ic_groups.concat(),
    }
}

/// Instruction following over `edited_ids`.
pub fn score_if(predicted: &SceneState, target: &SceneState, edited_ids: &[ObjectId]) -> (f64, Vec<AttributeScore>) {
    let s = score_turn(predicted, target, edited_ids);
    (s.if_score, s.if_detail)
}

/// Image consistency over `preserved_ids`; every other object of `target`
/// counts as edited.
pub fn score_ic(predicted: &SceneState, target: &SceneState, preserved_ids: &[ObjectId]) -> (f64, Vec<AttributeScore>) {
    let edited: Vec<ObjectId> = target.ids().filter(|id| !preserved_ids.contains(id)).cloned().collect();
    let s = score_turn(predicted, target, &edited);
    (s.ic_score, s.ic_detail)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub turn_index: u32,
    pub if_score: f64,
    pub ic_score: f64,
    pub psnr_om: f64,
    /// `None` when no pixel has full window support in the background mask.
    pub ssim_om: Option<f64>,
    pub perceptual_om: Option<f64>,
    /// Perceptual distance from the session's first image to this output,
    /// over the pixels no turn so far has changed. Rises when an editor
    /// keeps re-synthesizing content it was told to leave alone.
    #[serde(default)]
    pub perceptual_drift: Option<f64>,
    pub mask_coverage: f64,
    pub otsu_k: Option<u8>,
    /// The editor produced no image for this turn.
    pub missing_output: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub if_score: f64,
    pub ic_score: f64,
    pub psnr_om: f64,
    pub ssim_om: Option<f64>,
    pub perceptual_om: Option<f64>,
    pub mask_coverage: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Summary {
    /// Unweighted mean per metric; optional metrics average their present
    /// values.
    pub fn of(turns: &[TurnScore]) -> Summary {
        Summary {
            if_score: mean(turns.iter().map(|t| t.if_score)).unwrap_or(0.0),
            ic_score: mean(turns.iter().map(|t| t.ic_score)).unwrap_or(0.0),
            psnr_om: mean(turns.iter().map(|t| t.psnr_om)).unwrap_or(0.0),
            ssim_om: mean(turns.iter().filter_map(|t| t.ssim_om)),
            perceptual_om: mean(turns.iter().filter_map(|t| t.perceptual_om)),
            mask_coverage: mean(turns.iter().map(|t| t.mask_coverage)).unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub schema_version: u32,
    pub session: String,
    pub seed: u64,
    pub perceptual_provider: Option<String>,
    pub turns: Vec<TurnScore>,
    pub summary: Summary,
}

pub struct EvalOptions<'a> {
    /// Recovers states from images when no post-state was recorded.
    pub perception: &'a dyn Perception,
    pub perceptual: Option<&'a dyn PerceptualProvider>,
    pub exec: Exec,
}

fn read_output_image(path: &Path) -> Result<Option<RgbImage>, EvalError> {
    match fs::read(path) {
        Ok(b) => decode_png(&b).map(Some).map_err(|e| EvalError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(EvalError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
    }
}

fn read_output_state(path: &Path) -> Result<Option<SceneState>, EvalError> {
    let err = |message: String| EvalError::Output {
        path: path.display().to_string(),
        message,
    };
    match fs::read(path) {
        Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| err(e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(err(e.to_string())),
    }
}

/// Scores one edit: attribute scores of `predicted` against `target`, and
/// the Otsu-masked fidelity of `output` against `input`.
pub fn score_images(
    turn_index: u32,
    input: &RgbImage,
    output: &RgbImage,
    predicted: &SceneState,
    target: &SceneState,
    edited: &[ObjectId],
    opts: &EvalOptions<'_>,
) -> Result<TurnScore, EvalError> {
    score_with_mask(turn_index, input, output, predicted, target, edited, opts).map(|(s, _)| s)
}

#[allow(clippy::too_many_arguments)]
fn score_with_mask(
    turn_index: u32,
    input: &RgbImage,
    output: &RgbImage,
    predicted: &SceneState,
    target: &SceneState,
    edited: &[ObjectId],
    opts: &EvalOptions<'_>,
) -> Result<(TurnScore, BitMask), EvalError> {
    let scores = score_turn(predicted, target, edited);
    let (mask, otsu) = background_mask(input, output)?;
    let ssim_om = match masked_ssim(input, output, &mask, opts.exec) {
        Ok(v) => Some(v),
        Err(EvalError::MaskTooThin) => None,
        Err(e) => return Err(e),
    };
    let perceptual_om = match opts.perceptual {
        Some(p) => match p.score(input, output, &mask) {
            Ok(v) => Some(v),
            Err(EvalError::MaskTooThin) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let score = TurnScore {
        turn_index,
        if_score: scores.if_score,
        ic_score: scores.ic_score,
        psnr_om: masked_psnr(input, output, &mask)?,
        ssim_om,
        perceptual_om,
        mask_coverage: mask.count() as f64 / (mask.width() as u64 * mask.height() as u64) as f64,
        otsu_k: match otsu {
            Otsu::Threshold(k) => Some(k),
            Otsu::Degenerate => None,
        },
        perceptual_drift: None,
        missing_output: false,
    };
    Ok((score, mask))
}

fn optional_score(r: Result<f64, EvalError>) -> Result<Option<f64>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::MaskTooThin | EvalError::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores every turn of one session against an editor's outputs.
///
/// Turn `t` compares the editor's `s{t-1}` output (its input) with its `s{t}`
/// output. A missing output counts as an unchanged input and scores IF 0.
pub fn evaluate_session(
    session_dir: &Path,
    outputs_dir: &Path,
    opts: &EvalOptions<'_>,
) -> Result<SessionReport, EvalError> {
    let session = load_session(session_dir)?;
    let n = session.manifest.n_turns as usize;
    let mut input = read_output_image(&outputs_dir.join("images/s0.png"))?.unwrap_or_else(|| session.images[0].clone());
    let origin = input.clone();
    let mut untouched = BitMask::full(origin.width(), origin.height());
    let mut turns = Vec::with_capacity(n);
    for t in 1..=n {
        let (prev, target) = (&session.states[t - 1], &session.states[t]);
        let produced = read_output_image(&outputs_dir.join(format!("images/s{t}.png")))?;
        let missing = produced.is_none();
        let output = produced.unwrap_or_else(|| input.clone());
        let recorded = if missing {
            None
        } else {
            read_output_state(&outputs_dir.join(format!("states/s{t}.json")))?
        };
        let predicted = match recorded {
            Some(s) => s,
            None => opts.perception.perceive(
                &output,
                &PerceptionHint {
                    expected: target,
                    previous: prev,
                },
            )?,
        };
        let edited = diff_states(prev, target).touched_ids();
        let (mut score, mask) = score_with_mask(t as u32, &input, &output, &predicted, target, &edited, opts)?;
        untouched = untouched.intersection(&mask);
        if let Some(p) = opts.perceptual {
            score.perceptual_drift = optional_score(p.score(&origin, &output, &untouched))?;
        }
        if missing {
            score.if_score = 0.0;
            score.missing_output = true;
        }
        turns.push(score);
        input = output;
    }
    Ok(SessionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        session: session_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: session.manifest.seed,
        perceptual_provider: opts.perceptual.map(|p| p.name().to_string()),
        summary: Summary::of(&turns),
        turns,
    })
}

/// Evaluates `(session_dir, outputs_dir)` pairs in parallel, preserving
/// order. Each session is scored with sequential inner loops.
pub fn evaluate_batch(
    pairs: &[(std::path::PathBuf, std::path::PathBuf)],
    opts: &EvalOptions<'_>,
) -> Vec<Result<SessionReport, EvalError>> {
    let inner = EvalOptions {
        perception: opts.perception,
        perceptual: opts.perceptual,
        exec: Exec::Sequential,
    };
    par::map(opts.exec, pairs, |(s, o)| evaluate_session(s, o, &inner))
}
