//! Symbolic scene states and the deterministic transition operator.
//!
//! A [`SceneState`] is the ground truth behind an image: a list of objects
//! with a name, four closed-vocabulary attributes and a rational placement.
//! [`apply_transition`] applies a set of canonical [`EditCommand`]s and
//! touches nothing else; [`diff_states`] is its inverse view.

pub mod geom;
pub mod render;
pub mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geom::{BBox, GeomError, PixelRect, Ratio};
pub use render::{object_mask, render, render_window, RenderError};
pub use vocab::{canonicalize, canonicalize_named, AttrValue, Attribute, Canonical, Color, Material, Rgb, Shape, Size};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

impl ObjectId {
    pub fn new(s: impl Into<String>) -> ObjectId {
        ObjectId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ObjectId {
    fn from(s: &str) -> ObjectId {
        ObjectId(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub name: String,
    pub color: Color,
    pub size: Size,
    pub material: Material,
    pub shape: Shape,
    pub bbox: BBox,
    pub z_order: i32,
}

impl ObjectSpec {
    pub fn get(&self, attribute: Attribute) -> AttrValue {
        match attribute {
            Attribute::Color => AttrValue::Color(self.color),
            Attribute::Size => AttrValue::Size(self.size),
            Attribute::Material => AttrValue::Material(self.material),
            Attribute::Shape => AttrValue::Shape(self.shape),
        }
    }

    pub fn set(&mut self, value: AttrValue) {
        match value {
            AttrValue::Color(v) => self.color = v,
            AttrValue::Size(v) => self.size = v,
            AttrValue::Material(v) => self.material = v,
            AttrValue::Shape(v) => self.shape = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneState {
    pub schema_version: u32,
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub background: Color,
    pub turn_index: u32,
    pub objects: Vec<ObjectSpec>,
}

impl SceneState {
    pub fn new(canvas_w: u32, canvas_h: u32, background: Color) -> SceneState {
        SceneState {
            schema_version: SCENE_SCHEMA_VERSION,
            canvas_w,
            canvas_h,
            background,
            turn_index: 0,
            objects: Vec::new(),
        }
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| &o.id == id)
    }

    pub fn contains(&self, id: &ObjectId) -> bool {
        self.object(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ObjectId> {
        self.objects.iter().map(|o| &o.id)
    }

    /// Checks every per-object invariant.
    pub fn validate(&self) -> Result<(), TransitionError> {
        let mut seen = HashSet::new();
        for o in &self.objects {
            if !seen.insert(&o.id) {
                return Err(TransitionError::DuplicateObject(o.id.clone()));
            }
            o.bbox.validate().map_err(TransitionError::Geometry)?;
        }
        Ok(())
    }

    /// Objects in paint order: ascending z, list order breaking ties.
    pub fn draw_order(&self) -> Vec<&ObjectSpec> {
        let mut v: Vec<&ObjectSpec> = self.objects.iter().collect();
        v.sort_by_key(|o| o.z_order);
        v
    }

    pub fn max_z(&self) -> Option<i32> {
        self.objects.iter().map(|o| o.z_order).max()
    }

    /// Same objects keyed by id, for order-insensitive comparison.
    pub fn by_id(&self) -> BTreeMap<&ObjectId, &ObjectSpec> {
        self.objects.iter().map(|o| (&o.id, o)).collect()
    }

    /// Equality of everything but `turn_index` and object list order.
    pub fn same_content(&self, other: &SceneState) -> bool {
        self.canvas_w == other.canvas_w
            && self.canvas_h == other.canvas_h
            && self.background == other.background
            && self.by_id() == other.by_id()
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// Object to insert with an `Add` command. Without a z order the object goes
/// on top of everything present.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NewObject {
    pub id: ObjectId,
    pub name: String,
    pub color: Color,
    pub size: Size,
    pub material: Material,
    pub shape: Shape,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_order: Option<i32>,
}

impl NewObject {
    fn into_spec(self, default_z: i32) -> ObjectSpec {
        ObjectSpec {
            id: self.id,
            name: self.name,
            color: self.color,
            size: self.size,
            material: self.material,
            shape: self.shape,
            bbox: self.bbox,
            z_order: self.z_order.unwrap_or(default_z),
        }
    }
}

impl From<&ObjectSpec> for NewObject {
    fn from(o: &ObjectSpec) -> NewObject {
        NewObject {
            id: o.id.clone(),
            name: o.name.clone(),
            color: o.color,
            size: o.size,
            material: o.material,
            shape: o.shape,
            bbox: o.bbox,
            z_order: Some(o.z_order),
        }
    }
}

/// New content for a `Replace` target. The target keeps its id and z order,
/// and its bbox unless one is given.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Replacement {
    pub name: String,
    pub color: Color,
    pub size: Size,
    pub material: Material,
    pub shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

/// Canonical atomic edit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditCommand {
    Add {
        object: NewObject,
    },
    Remove {
        target: ObjectId,
    },
    Replace {
        target: ObjectId,
        with: Replacement,
    },
    Adjust {
        target: ObjectId,
        #[serde(flatten)]
        value: AttrValue,
    },
    Undo,
}

/// Command kinds, used for coverage accounting and transformation labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Add,
    Remove,
    Replace,
    Adjust,
    Undo,
}

impl CommandKind {
    pub const ALL: [CommandKind; 5] = [
        CommandKind::Add,
        CommandKind::Remove,
        CommandKind::Replace,
        CommandKind::Adjust,
        CommandKind::Undo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Add => "add",
            CommandKind::Remove => "remove",
            CommandKind::Replace => "replace",
            CommandKind::Adjust => "adjust",
            CommandKind::Undo => "undo",
        }
    }
}

impl EditCommand {
    pub fn kind(&self) -> CommandKind {
        match self {
            EditCommand::Add { .. } => CommandKind::Add,
            EditCommand::Remove { .. } => CommandKind::Remove,
            EditCommand::Replace { .. } => CommandKind::Replace,
            EditCommand::Adjust { .. } => CommandKind::Adjust,
            EditCommand::Undo => CommandKind::Undo,
        }
    }

    /// The object this command creates or modifies.
    pub fn target(&self) -> Option<&ObjectId> {
        match self {
            EditCommand::Add { object } => Some(&object.id),
            EditCommand::Remove { target }
            | EditCommand::Replace { target, .. }
            | EditCommand::Adjust { target, .. } => Some(target),
            EditCommand::Undo => None,
        }
    }

    pub fn adjust(target: impl Into<ObjectId>, value: AttrValue) -> EditCommand {
        EditCommand::Adjust {
            target: target.into(),
            value,
        }
    }

    pub fn remove(target: impl Into<ObjectId>) -> EditCommand {
        EditCommand::Remove { target: target.into() }
    }
}

impl From<String> for ObjectId {
    fn from(s: String) -> ObjectId {
        ObjectId(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("unknown object `{0}`")]
    UnknownObject(ObjectId),
    #[error("more than one command targets `{0}`")]
    ConflictingCommands(ObjectId),
    #[error("`{value}` is not a valid {attribute}")]
    VocabularyViolation { attribute: String, value: String },
    #[error("undo is resolved by the state graph, not the transition operator")]
    UndoInTransition,
    #[error("object `{0}` already exists")]
    DuplicateObject(ObjectId),
    #[error(transparent)]
    Geometry(GeomError),
}

/// `s' = T(s, C)`: applies `commands` in order to a copy of `state`.
///
/// Objects not referenced by a command are carried over unchanged and
/// `turn_index` advances by one.
pub fn apply_transition(state: &SceneState, commands: &[EditCommand]) -> Result<SceneState, TransitionError> {
    let mut targets = HashSet::new();
    for cmd in commands {
        let Some(target) = cmd.target() else {
            return Err(TransitionError::UndoInTransition);
        };
        if !targets.insert(target.clone()) {
            return Err(TransitionError::ConflictingCommands(target.clone()));
        }
    }

    let mut next = state.clone();
    for cmd in commands {
        match cmd {
            EditCommand::Add { object } => {
                if next.contains(&object.id) {
                    return Err(TransitionError::DuplicateObject(object.id.clone()));
                }
                object.bbox.validate().map_err(TransitionError::Geometry)?;
                let z = next.max_z().map_or(0, |z| z + 1);
                next.objects.push(object.clone().into_spec(z));
            }
            EditCommand::Remove { target } => {
                let idx = position(&next, target)?;
                next.objects.remove(idx);
            }
            EditCommand::Replace { target, with } => {
                let idx = position(&next, target)?;
                if let Some(b) = &with.bbox {
                    b.validate().map_err(TransitionError::Geometry)?;
                }
                let o = &mut next.objects[idx];
                o.name = with.name.clone();
                o.color = with.color;
                o.size = with.size;
                o.material = with.material;
                o.shape = with.shape;
                if let Some(b) = with.bbox {
                    o.bbox = b;
                }
            }
            EditCommand::Adjust { target, value } => {
                let idx = position(&next, target)?;
                next.objects[idx].set(*value);
            }
            EditCommand::Undo => unreachable!("rejected above"),
        }
    }
    next.turn_index = state.turn_index + 1;
    Ok(next)
}

fn position(state: &SceneState, id: &ObjectId) -> Result<usize, TransitionError> {
    state
        .objects
        .iter()
        .position(|o| &o.id == id)
        .ok_or_else(|| TransitionError::UnknownObject(id.clone()))
}

/// A changed field of an object present in both states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case")]
pub enum FieldChange {
    Attribute { old: AttrValue, new: AttrValue },
    Name { old: String, new: String },
    Placement { old: BBox, new: BBox },
}

impl FieldChange {
    pub fn field_name(&self) -> &'static str {
        match self {
            FieldChange::Attribute { old, .. } => old.attribute().token(),
            FieldChange::Name { .. } => "name",
            FieldChange::Placement { .. } => "bbox",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectChange {
    pub id: ObjectId,
    pub change: FieldChange,
}

/// Difference between two states. Draw order is not compared.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDiff {
    pub changes: Vec<ObjectChange>,
    pub added: Vec<ObjectSpec>,
    pub removed: Vec<ObjectId>,
}

impl StateDiff {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty() && self.added.is_empty() && self.removed.is_empty()
    }

    pub fn added_ids(&self) -> Vec<&ObjectId> {
        self.added.iter().map(|o| &o.id).collect()
    }

    /// Every id the diff touches, sorted.
    pub fn touched_ids(&self) -> Vec<ObjectId> {
        let mut ids: Vec<ObjectId> = self
            .changes
            .iter()
            .map(|c| c.id.clone())
            .chain(self.added.iter().map(|o| o.id.clone()))
            .chain(self.removed.iter().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Commands that turn the diff's source state into its target: `Remove`
    /// and `Add` for membership, `Adjust` for attribute-only changes and
    /// `Replace` when the name or placement moved. `b` must be the target
    /// state the diff was computed against.
    pub fn to_commands(&self, b: &SceneState) -> Vec<EditCommand> {
        let mut out: Vec<EditCommand> = self
            .removed
            .iter()
            .map(|id| EditCommand::Remove { target: id.clone() })
            .collect();
        let mut per_object: BTreeMap<&ObjectId, Vec<&FieldChange>> = BTreeMap::new();
        for c in &self.changes {
            per_object.entry(&c.id).or_default().push(&c.change);
        }
        for (id, changes) in per_object {
            let structural = changes.iter().any(|c| !matches!(c, FieldChange::Attribute { .. }));
            if structural {
                let o = b.object(id).expect("diff target present in b");
                out.push(EditCommand::Replace {
                    target: id.clone(),
                    with: Replacement {
                        name: o.name.clone(),
                        color: o.color,
                        size: o.size,
                        material: o.material,
                        shape: o.shape,
                        bbox: Some(o.bbox),
                    },
                });
            } else {
                // one Adjust per object: merge into a Replace when several
                // attributes moved, since commands may not share a target
                if changes.len() == 1 {
                    if let FieldChange::Attribute { new, .. } = changes[0] {
                        out.push(EditCommand::Adjust {
                            target: id.clone(),
                            value: *new,
                        });
                    }
                } else {
                    let o = b.object(id).expect("diff target present in b");
                    out.push(EditCommand::Replace {
                        target: id.clone(),
                        with: Replacement {
                            name: o.name.clone(),
                            color: o.color,
                            size: o.size,
                            material: o.material,
                            shape: o.shape,
                            bbox: None,
                        },
                    });
                }
            }
        }
        out.extend(self.added.iter().map(|o| EditCommand::Add { object: o.into() }));
        out
    }
}

/// Field-level difference from `a` to `b`, sorted by object id.
pub fn diff_states(a: &SceneState, b: &SceneState) -> StateDiff {
    let am = a.by_id();
    let bm = b.by_id();
    let mut diff = StateDiff::default();
    for (id, oa) in &am {
        match bm.get(id) {
            None => diff.removed.push((*id).clone()),
            Some(ob) => {
                let push = |diff: &mut StateDiff, change| {
                    diff.changes.push(ObjectChange {
                        id: (*id).clone(),
                        change,
                    })
                };
                if oa.name != ob.name {
                    push(
                        &mut diff,
                        FieldChange::Name {
                            old: oa.name.clone(),
                            new: ob.name.clone(),
                        },
                    );
                }
                for attr in Attribute::ALL {
                    let (va, vb) = (oa.get(*attr), ob.get(*attr));
                    if va != vb {
                        push(&mut diff, FieldChange::Attribute { old: va, new: vb });
                    }
                }
                if oa.bbox != ob.bbox {
                    push(
                        &mut diff,
                        FieldChange::Placement {
                            old: oa.bbox,
                            new: ob.bbox,
                        },
                    );
                }
            }
        }
    }
    for (id, ob) in &bm {
        if !am.contains_key(id) {
            diff.added.push((*ob).clone());
        }
    }
    diff
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn ratio(s: &str) -> Ratio {
        s.parse().unwrap()
    }

    pub fn bbox(x: &str, y: &str, w: &str, h: &str) -> BBox {
        BBox::new(ratio(x), ratio(y), ratio(w), ratio(h)).unwrap()
    }

    pub fn obj(id: &str, color: Color, shape: Shape, b: BBox, z: i32) -> ObjectSpec {
        ObjectSpec {
            id: id.into(),
            name: id.to_string(),
            color,
            size: Size::Medium,
            material: Material::Matte,
            shape,
            bbox: b,
            z_order: z,
        }
    }

    pub fn three_objects() -> SceneState {
        let mut s = SceneState::new(128, 96, Color::Cream);
        s.objects = vec![
            obj(
                "obj_1",
                Color::Red,
                Shape::Rectangle,
                bbox("0.05", "0.1", "0.2", "0.3"),
                0,
            ),
            obj("obj_2", Color::Teal, Shape::Circle, bbox("0.4", "0.4", "0.3", "0.3"), 1),
            obj(
                "obj_3",
                Color::Navy,
                Shape::Triangle,
                bbox("0.7", "0.05", "0.25", "0.4"),
                2,
            ),
        ];
        s
    }
}
