//! Seeded synthesis of benchmark sessions: an initial scene, a few turns of
//! canonical commands, their paraphrases and the rendered state images.
//!
//! All randomness is ChaCha8 seeded with `seed_from_u64(seed)`, one stream
//! per purpose: stream 0 builds the initial scene, stream `t` samples turn
//! `t`'s commands and stream `PARAPHRASE_STREAM + t` picks its wording.

mod layout;
mod paraphrase;

use std::collections::BTreeSet;
use std::sync::LazyLock;

use image::RgbImage;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::print_program;
use crate::par::{self, Exec};
use crate::scene::render::{render_with, visible_fraction};
use crate::scene::{
    apply_transition, AttrValue, Attribute, BBox, Color, CommandKind, EditCommand, Material, NewObject, ObjectId,
    ObjectSpec, Ratio, RenderError, Replacement, SceneState, Shape, Size, TransitionError,
};
use crate::store::ImageUri;

pub use layout::{
    build_batch, load_session, write_session, LayoutError, LoadedSession, Manifest, MANIFEST_SCHEMA_VERSION,
};
pub use paraphrase::{paraphrase, Paraphrase, Phrasing, TEMPLATES_JSON};

pub const PARAPHRASE_STREAM: u64 = 1 << 32;

/// Smallest visible share any object may keep.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;

/// Placement grid: boxes are multiples of 1/20 of the canvas.
const GRID: u32 = 20;
const BOX_CELLS: std::ops::RangeInclusive<u32> = 4..=9;
const SAMPLE_TRIES: usize = 200;

pub static NOUNS: LazyLock<Vec<String>> = LazyLock::new(|| {
    include_str!("../../data/nouns.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
});

const BACKGROUNDS: [Color; 4] = [Color::Cream, Color::White, Color::LightGray, Color::Tan];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSpec {
    pub seed: u64,
    pub n_turns: u32,
    pub canvas: (u32, u32),
    pub n_objects_range: (u32, u32),
    /// Probability that a turn carries two or more commands.
    pub intent_mix_prob: f64,
}

impl Default for SessionSpec {
    fn default() -> SessionSpec {
        SessionSpec {
            seed: 0,
            n_turns: 3,
            canvas: (384, 256),
            n_objects_range: (3, 6),
            intent_mix_prob: 0.3,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid session spec: {0}")]
    InvalidSpec(String),
    #[error("no legal command for turn {turn}")]
    Unsatisfiable { turn: u32 },
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Paraphrase(#[from] crate::llm::LlmError),
}

impl SessionSpec {
    pub fn with_seed(seed: u64) -> SessionSpec {
        SessionSpec {
            seed,
            ..SessionSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidSpec(m.to_string()));
        let (lo, hi) = self.n_objects_range;
        if self.n_turns < 1 {
            return bad("n_turns must be at least 1");
        }
        if self.canvas.0 < 16 || self.canvas.1 < 16 {
            return bad("canvas sides must be at least 16");
        }
        if !(0.0..=1.0).contains(&self.intent_mix_prob) {
            return bad("intent_mix_prob must lie in [0, 1]");
        }
        if lo < 1 || lo > hi || hi as usize > NOUNS.len() / 2 {
            return bad("n_objects_range must be 1 <= min <= max <= half the noun list");
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn grid_ratio(n: u32) -> Ratio {
    Ratio::new(n, GRID).expect("grid ratio in range")
}

fn sample_bbox(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(BOX_CELLS);
    let h = rng.random_range(BOX_CELLS);
    let x = rng.random_range(0..=GRID - w);
    let y = rng.random_range(0..=GRID - h);
    BBox::new(grid_ratio(x), grid_ratio(y), grid_ratio(w), grid_ratio(h)).expect("grid box fits")
}

fn sample_color(rng: &mut impl Rng, background: Color) -> Color {
    loop {
        let c = *Color::ALL.choose(rng).expect("palette nonempty");
        if c != background {
            return c;
        }
    }
}

fn occlusion_ok(state: &SceneState) -> Result<bool, RenderError> {
    for o in &state.objects {
        if visible_fraction(state, &o.id, state.canvas_w, state.canvas_h)? < MIN_VISIBLE_FRACTION {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `s0`: deterministic in `(seed, spec)`, object count within range, unique
/// nouns as names and ids, every object at least 30% visible.
pub fn synth_initial_state(seed: u64, spec: &SessionSpec) -> Result<SceneState, EngineError> {
    spec.validate()?;
    let mut rng = rng_for(seed, 0);
    let background = *BACKGROUNDS.choose(&mut rng).expect("backgrounds");
    let (lo, hi) = spec.n_objects_range;
    let n = rng.random_range(lo..=hi) as usize;
    let mut names: Vec<&String> = NOUNS.iter().collect();
    names.shuffle(&mut rng);
    let mut state = SceneState::new(spec.canvas.0, spec.canvas.1, background);
    for (z, name) in names.into_iter().take(n).enumerate() {
        let mut placed = false;
        for _ in 0..SAMPLE_TRIES {
            let o = ObjectSpec {
                id: ObjectId::new(name.clone()),
                name: name.clone(),
                color: sample_color(&mut rng, background),
                size: *Size::ALL.choose(&mut rng).expect("sizes"),
                material: *Material::ALL.choose(&mut rng).expect("materials"),
                shape: *Shape::ALL.choose(&mut rng).expect("shapes"),
                bbox: sample_bbox(&mut rng),
                z_order: z as i32,
            };
            let mut next = state.clone();
            next.objects.push(o);
            if occlusion_ok(&next)? {
                state = next;
                placed = true;
                break;
            }
        }
        if !placed {
            // crowded canvas: stop short, but never below the minimum
            if state.objects.len() >= lo as usize {
                break;
            }
            return Err(EngineError::Unsatisfiable { turn: 0 });
        }
    }
    Ok(state)
}

/// Relative weights of the single-command kinds. Undo only from turn 2.
const KIND_WEIGHTS: [(CommandKind, u32); 5] = [
    (CommandKind::Add, 20),
    (CommandKind::Remove, 15),
    (CommandKind::Replace, 15),
    (CommandKind::Adjust, 35),
    (CommandKind::Undo, 15),
];

fn pick_kind(rng: &mut impl Rng, allow_undo: bool, state: &SceneState) -> CommandKind {
    let options: Vec<(CommandKind, u32)> = KIND_WEIGHTS
        .iter()
        .copied()
        .filter(|(k, _)| match k {
            CommandKind::Undo => allow_undo,
            CommandKind::Remove => state.objects.len() >= 2,
            CommandKind::Replace | CommandKind::Adjust => !state.objects.is_empty(),
            CommandKind::Add => true,
        })
        .collect();
    options
        .choose_weighted(rng, |(_, w)| *w)
        .expect("add is always allowed")
        .0
}

fn fresh_name(rng: &mut impl Rng, taken: &BTreeSet<String>) -> Option<String> {
    let free: Vec<&String> = NOUNS.iter().filter(|n| !taken.contains(*n)).collect();
    free.choose(rng).map(|s| (*s).clone())
}

fn sample_one(
    rng: &mut impl Rng,
    kind: CommandKind,
    state: &SceneState,
    used_targets: &BTreeSet<ObjectId>,
    taken: &BTreeSet<String>,
) -> Option<EditCommand> {
    let bg = state.background;
    let targets: Vec<&ObjectSpec> = state.objects.iter().filter(|o| !used_targets.contains(&o.id)).collect();
    Some(match kind {
        CommandKind::Add => {
            let name = fresh_name(rng, taken)?;
            EditCommand::Add {
                object: NewObject {
                    id: ObjectId::new(name.clone()),
                    name,
                    color: sample_color(rng, bg),
                    size: *Size::ALL.choose(rng)?,
                    material: *Material::ALL.choose(rng)?,
                    shape: *Shape::ALL.choose(rng)?,
                    bbox: sample_bbox(rng),
                    z_order: None,
                },
            }
        }
        CommandKind::Remove => EditCommand::remove(targets.choose(rng)?.id.clone()),
        CommandKind::Replace => {
            let t = targets.choose(rng)?;
            EditCommand::Replace {
                target: t.id.clone(),
                with: Replacement {
                    name: fresh_name(rng, taken)?,
                    color: sample_color(rng, bg),
                    size: *Size::ALL.choose(rng)?,
                    material: *Material::ALL.choose(rng)?,
                    shape: *Shape::ALL.choose(rng)?,
                    bbox: if rng.random_bool(0.3) {
                        Some(sample_bbox(rng))
                    } else {
                        None
                    },
                },
            }
        }
        CommandKind::Adjust => {
            let t = targets.choose(rng)?;
            let attr = *Attribute::ALL.choose(rng)?;
            let value = loop {
                let v = match attr {
                    Attribute::Color => AttrValue::Color(sample_color(rng, bg)),
                    Attribute::Size => AttrValue::Size(*Size::ALL.choose(rng)?),
                    Attribute::Material => AttrValue::Material(*Material::ALL.choose(rng)?),
                    Attribute::Shape => AttrValue::Shape(*Shape::ALL.choose(rng)?),
                };
                if t.get(attr) != v {
                    break v;
                }
            };
            EditCommand::adjust(t.id.clone(), value)
        }
        CommandKind::Undo => EditCommand::Undo,
    })
}

/// Whether applying `cmd` to `state` keeps every object visible enough and
/// changes the rendered image.
fn acceptable(state: &SceneState, cmd: &EditCommand, before: &RgbImage, exec: Exec) -> Result<bool, EngineError> {
    let next = match apply_transition(state, std::slice::from_ref(cmd)) {
        Ok(n) => n,
        Err(_) => return Ok(false),
    };
    if !occlusion_ok(&next)? {
        return Ok(false);
    }
    Ok(&render_with(exec, &next, state.canvas_w, state.canvas_h)? != before)
}

/// Commands for turn `turn_index` (1-based) against `state`: valid, never a
/// no-op, each visibly changing the image, on distinct objects, and at
/// least two of them with probability `intent_mix_prob`. A sampled undo is
/// always alone in its turn.
pub fn sample_commands(
    state: &SceneState,
    turn_index: u32,
    seed: u64,
    spec: &SessionSpec,
) -> Result<Vec<EditCommand>, EngineError> {
    let taken = state.objects.iter().map(|o| o.name.clone()).collect();
    sample_turn(state, turn_index, seed, spec, &taken, Exec::Sequential)
}

fn sample_turn(
    state: &SceneState,
    turn_index: u32,
    seed: u64,
    spec: &SessionSpec,
    taken: &BTreeSet<String>,
    exec: Exec,
) -> Result<Vec<EditCommand>, EngineError> {
    let mut rng = rng_for(seed, turn_index as u64);
    let mixed = rng.random_bool(spec.intent_mix_prob);
    let count = if mixed { 2 + rng.random_bool(0.25) as usize } else { 1 };
    let mut taken = taken.clone();
    let mut work = state.clone();
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let allow_undo = !mixed && turn_index >= 2;
        let before = render_with(exec, &work, work.canvas_w, work.canvas_h)?;
        let mut found = None;
        for _ in 0..SAMPLE_TRIES {
            let kind = pick_kind(&mut rng, allow_undo, &work);
            let Some(cmd) = sample_one(&mut rng, kind, &work, &used, &taken) else {
                continue;
            };
            if cmd == EditCommand::Undo || acceptable(&work, &cmd, &before, exec)? {
                found = Some(cmd);
                break;
            }
        }
        let cmd = found.ok_or(EngineError::Unsatisfiable { turn: turn_index })?;
        if cmd == EditCommand::Undo {
            return Ok(vec![cmd]);
        }
        work = apply_transition(&work, std::slice::from_ref(&cmd))?;
        used.insert(cmd.target().expect("non-undo").clone());
        if let EditCommand::Add { object } = &cmd {
            taken.insert(object.name.clone());
        }
        if let EditCommand::Replace { with, .. } = &cmd {
            taken.insert(with.name.clone());
        }
        out.push(cmd);
    }
    Ok(out)
}

/// One generated session. `states[0]` is `s0`; turn `t` (1-based) maps
/// `states[t-1]` to `states[t]` with `commands[t-1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSession {
    pub spec: SessionSpec,
    pub states: Vec<SceneState>,
    pub commands: Vec<Vec<EditCommand>>,
    pub dsl: Vec<String>,
    pub instructions: Vec<String>,
    pub images: Vec<RgbImage>,
    pub image_uris: Vec<ImageUri>,
}

impl BenchSession {
    pub fn n_turns(&self) -> usize {
        self.commands.len()
    }

    pub fn kinds(&self) -> BTreeSet<CommandKind> {
        self.commands.iter().flatten().map(EditCommand::kind).collect()
    }
}

/// Resolves one turn against the history: undo yields the objects of the
/// state two steps back, anything else goes through the transition.
pub fn next_state(history: &[SceneState], commands: &[EditCommand]) -> Result<SceneState, EngineError> {
    let cur = history.last().expect("history nonempty");
    if commands == [EditCommand::Undo] {
        let back = history.len().checked_sub(2).ok_or(EngineError::Unsatisfiable {
            turn: cur.turn_index + 1,
        })?;
        let mut s = history[back].clone();
        s.turn_index = cur.turn_index + 1;
        return Ok(s);
    }
    Ok(apply_transition(cur, commands)?)
}

pub fn build_session(spec: &SessionSpec) -> Result<BenchSession, EngineError> {
    build_session_with(spec, Phrasing::Template, Exec::default())
}

pub fn build_session_with(spec: &SessionSpec, phrasing: Phrasing<'_>, exec: Exec) -> Result<BenchSession, EngineError> {
    let s0 = synth_initial_state(spec.seed, spec)?;
    let mut taken: BTreeSet<String> = s0.objects.iter().map(|o| o.name.clone()).collect();
    let mut states = vec![s0];
    let mut commands = Vec::new();
    let mut dsl = Vec::new();
    let mut instructions = Vec::new();
    for t in 1..=spec.n_turns {
        let cur = states.last().expect("nonempty");
        let cmds = sample_turn(cur, t, spec.seed, spec, &taken, exec)?;
        let next = next_state(&states, &cmds)?;
        let p = paraphrase(&cmds, cur, spec.seed, t, phrasing)?;
        taken.extend(next.objects.iter().map(|o| o.name.clone()));
        dsl.push(print_program(&cmds));
        instructions.push(p.text);
        commands.push(cmds);
        states.push(next);
    }
    let (w, h) = spec.canvas;
    let images = par::map(exec, &states, |s| render_with(Exec::Sequential, s, w, h))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let image_uris = images.iter().map(ImageUri::of).collect();
    Ok(BenchSession {
        spec: spec.clone(),
        states,
        commands,
        dsl,
        instructions,
        images,
        image_uris,
    })
}

/// Curation predicates over generated sessions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Filter {
    /// Minimum object count of `s0`.
    pub min_objects: usize,
    /// Minimum number of distinct command kinds across the session.
    pub min_kinds: usize,
}

impl Filter {
    pub fn accepts(&self, s: &BenchSession) -> bool {
        s.states[0].objects.len() >= self.min_objects && s.kinds().len() >= self.min_kinds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_canonical;

    #[test]
    fn initial_state_is_deterministic_and_in_range() {
        let spec = SessionSpec::default();
        assert_eq!(
            synth_initial_state(7, &spec).unwrap(),
            synth_initial_state(7, &spec).unwrap()
        );
        let one = SessionSpec {
            n_objects_range: (1, 1),
            ..spec.clone()
        };
        assert_eq!(synth_initial_state(3, &one).unwrap().objects.len(), 1);
    }

    #[test]
    fn initial_states_respect_invariants() {
        let spec = SessionSpec {
            canvas: (96, 64),
            ..SessionSpec::default()
        };
        for seed in 0..1000 {
            let s = synth_initial_state(seed, &spec).unwrap();
            s.validate().unwrap();
            let n = s.objects.len() as u32;
            assert!(
                (spec.n_objects_range.0..=spec.n_objects_range.1).contains(&n),
                "seed {seed}"
            );
            let names: BTreeSet<_> = s.objects.iter().map(|o| &o.name).collect();
            assert_eq!(names.len(), s.objects.len());
            assert!(occlusion_ok(&s).unwrap(), "seed {seed}");
            assert!(s.objects.iter().all(|o| o.color != s.background));
        }
    }

    #[test]
    fn turn_one_never_undoes_and_adjusts_are_never_no_ops() {
        let spec = SessionSpec {
            canvas: (96, 64),
            ..SessionSpec::default()
        };
        for seed in 0..1000 {
            let s = synth_initial_state(seed, &spec).unwrap();
            let cmds = sample_commands(&s, 1, seed, &spec).unwrap();
            assert!(!cmds.contains(&EditCommand::Undo));
            for c in &cmds {
                if let EditCommand::Adjust { target, value } = c {
                    assert_ne!(s.object(target).unwrap().get(value.attribute()), *value);
                }
            }
        }
    }

    #[test]
    fn mixed_turn_rate_matches_the_spec() {
        let spec = SessionSpec {
            canvas: (48, 32),
            ..SessionSpec::default()
        };
        let n = 10_000u64;
        let mixed = par::map_range(Exec::default(), n as usize, |seed| {
            let s = synth_initial_state(seed as u64, &spec).unwrap();
            let cmds = sample_commands(&s, 1, seed as u64, &spec).unwrap();
            let ids: BTreeSet<_> = cmds.iter().filter_map(EditCommand::target).collect();
            assert_eq!(ids.len(), cmds.len(), "targets must be distinct");
            cmds.len() >= 2
        })
        .into_iter()
        .filter(|m| *m)
        .count();
        let rate = mixed as f64 / n as f64;
        assert!((rate - spec.intent_mix_prob).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn every_kind_is_covered() {
        let spec = SessionSpec {
            canvas: (64, 48),
            ..SessionSpec::default()
        };
        let kinds = par::map_range(Exec::default(), 500, |seed| {
            build_session(&SessionSpec {
                seed: seed as u64,
                ..spec.clone()
            })
            .unwrap()
            .kinds()
        })
        .into_iter()
        .flatten()
        .collect::<BTreeSet<_>>();
        assert_eq!(kinds.len(), CommandKind::ALL.len());
    }

    #[test]
    fn validation() {
        for bad in [
            SessionSpec {
                n_turns: 0,
                ..SessionSpec::default()
            },
            SessionSpec {
                canvas: (15, 64),
                ..SessionSpec::default()
            },
            SessionSpec {
                intent_mix_prob: 1.5,
                ..SessionSpec::default()
            },
            SessionSpec {
                n_objects_range: (4, 2),
                ..SessionSpec::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(EngineError::InvalidSpec(_))));
        }
    }

    #[test]
    fn default_session_shape_and_chain_validity() {
        let b = build_session(&SessionSpec::with_seed(11)).unwrap();
        assert_eq!((b.n_turns(), b.states.len(), b.images.len()), (3, 4, 4));
        assert_eq!(b.instructions.len(), 3);
        for t in 0..b.n_turns() {
            let cmds = parse_canonical(&b.dsl[t]).unwrap();
            assert_eq!(cmds, b.commands[t]);
            assert_eq!(next_state(&b.states[..=t], &cmds).unwrap(), b.states[t + 1]);
            assert_eq!(b.states[t + 1].turn_index, t as u32 + 1);
        }
        assert_eq!(b, build_session(&SessionSpec::with_seed(11)).unwrap());
    }

    #[test]
    fn undo_resolves_two_states_back() {
        let a = synth_initial_state(1, &SessionSpec::default()).unwrap();
        let b = apply_transition(&a, &[EditCommand::remove(a.objects[0].id.clone())]).unwrap();
        let c = next_state(&[a.clone(), b], &[EditCommand::Undo]).unwrap();
        assert_eq!(c.objects, a.objects);
        assert_eq!(c.turn_index, 2);
        assert!(next_state(&[a], &[EditCommand::Undo]).is_err());
    }

    #[test]
    fn filter_predicates() {
        let b = build_session(&SessionSpec::with_seed(2)).unwrap();
        assert!(Filter::default().accepts(&b));
        assert!(!Filter {
            min_objects: 99,
            min_kinds: 0
        }
        .accepts(&b));
        assert!(!Filter {
            min_objects: 0,
            min_kinds: 6
        }
        .accepts(&b));
    }
}
