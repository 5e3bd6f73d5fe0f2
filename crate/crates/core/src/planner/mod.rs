//! Planning, the quality test and the per-turn session loop.

mod perception;
mod session;

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, DslError};
use crate::llm::{LlmClient, LlmError, Message};
use crate::scene::{diff_states, Attribute, Color, EditCommand, Material, ObjectId, SceneState, Shape, Size};

pub use perception::{
    FixturePerception, Perception, PerceptionError, PerceptionHint, SymbolicPerception, UNEXPLAINED_ID,
};
pub use session::{Session, SessionConfig, SessionError, TurnOutcome, TurnStatus};

pub const DEFAULT_MAX_SUBGOALS: usize = 8;

/// A user turn. `dsl` is the canonical payload when the caller has one
/// (benchmark sessions always do).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsl: Option<String>,
}

impl Instruction {
    pub fn dsl(dsl: impl Into<String>) -> Instruction {
        let dsl = dsl.into();
        Instruction {
            text: dsl.clone(),
            dsl: Some(dsl),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty() && self.dsl.as_deref().is_none_or(|d| d.trim().is_empty())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    RuleBased,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub sub_goals: Vec<EditCommand>,
    pub rationale: String,
    pub source: PlanSource,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("could not parse the plan: {0}")]
    ParseFailed(#[from] DslError),
    #[error(transparent)]
    LlmUnavailable(#[from] LlmError),
    #[error("plan has {len} sub-goals, at most {max} allowed")]
    PlanTooLarge { len: usize, max: usize },
    #[error("two sub-goals target `{0}`")]
    Conflict(ObjectId),
    #[error("undo may only be the first sub-goal")]
    UndoNotFirst,
}

/// Who turns instructions into plans.
#[derive(Clone)]
pub enum Planner {
    /// Parses the instruction's DSL payload (or its text when there is none).
    RuleBased,
    Llm(LlmClient),
}

impl Planner {
    pub fn source(&self) -> PlanSource {
        match self {
            Planner::RuleBased => PlanSource::RuleBased,
            Planner::Llm(_) => PlanSource::Llm,
        }
    }

    pub fn plan(
        &self,
        instruction: &Instruction,
        state: &SceneState,
        memory: &str,
        max_subgoals: usize,
    ) -> Result<Plan, PlanError> {
        let (program, rationale) = match self {
            Planner::RuleBased => {
                let src = instruction.dsl.as_deref().unwrap_or(&instruction.text);
                (src.to_string(), "canonical payload".to_string())
            }
            Planner::Llm(client) => {
                let messages = [
                    Message::system(system_prompt()),
                    Message::user(user_prompt(instruction, state, memory)),
                ];
                let reply = client.complete(&messages)?;
                (extract_program(&reply), format!("model reply: {}", reply.trim()))
            }
        };
        let sub_goals = dsl::parse_canonical(&program)?;
        check_plan(&sub_goals, max_subgoals)?;
        Ok(Plan {
            sub_goals,
            rationale,
            source: self.source(),
        })
    }
}

fn check_plan(sub_goals: &[EditCommand], max: usize) -> Result<(), PlanError> {
    if sub_goals.len() > max {
        return Err(PlanError::PlanTooLarge {
            len: sub_goals.len(),
            max,
        });
    }
    let mut seen = HashSet::new();
    for (i, c) in sub_goals.iter().enumerate() {
        match c.target() {
            None if i > 0 => return Err(PlanError::UndoNotFirst),
            None => {}
            Some(t) if !seen.insert(t) => return Err(PlanError::Conflict(t.clone())),
            Some(_) => {}
        }
    }
    Ok(())
}

/// Drops markdown fences and a leading `dsl:` label, if the model added them.
fn extract_program(reply: &str) -> String {
    let mut body = reply.trim();
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.split_once('\n').map_or("", |(_, r)| r);
        body = rest.rsplit_once("```").map_or(rest, |(b, _)| b).trim();
    }
    body.strip_prefix("dsl:").unwrap_or(body).trim().to_string()
}

fn tokens<T: Copy + std::fmt::Display>(all: &[T]) -> String {
    all.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn system_prompt() -> String {
    let mut s = String::from(
        "You plan image edits. Answer with a program in the edit language below and nothing else.\n\
         Statements are separated by ';':\n\
         add(<name>, shape=<shape>, color=<color>, size=<size>, material=<material>, at=(x,y,w,h))\n\
         remove(<id>)\n\
         replace(<id>, name=<name>, shape=<shape>, color=<color>, size=<size>, material=<material>)\n\
         adjust(<id>, <attribute>=<value>)\n\
         undo()\n\
         Coordinates are fractions of the canvas in [0,1]. Each object may be targeted once; undo only first.\n",
    );
    let _ = writeln!(s, "colors: {}", tokens(Color::ALL));
    let _ = writeln!(s, "sizes: {}", tokens(Size::ALL));
    let _ = writeln!(s, "materials: {}", tokens(Material::ALL));
    let _ = writeln!(s, "shapes: {}", tokens(Shape::ALL));
    let _ = writeln!(s, "attributes: {}", tokens(Attribute::ALL));
    s
}

fn user_prompt(instruction: &Instruction, state: &SceneState, memory: &str) -> String {
    let mut s = String::from("objects:\n");
    for o in &state.objects {
        let _ = writeln!(
            s,
            "- {} ({}): {} {} {} {}",
            o.id, o.name, o.size, o.color, o.material, o.shape
        );
    }
    let _ = write!(s, "history:\n{memory}\ninstruction: {}", instruction.text);
    s
}

/// One violated (object, field) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFailure {
    pub object: ObjectId,
    /// An attribute name, `name`, `bbox`, or `presence`.
    pub field: String,
    /// Whether the object was a target of the checked edit.
    pub edited: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pass: bool,
    pub failures: Vec<QualityFailure>,
}

/// Compares what was perceived with what the edit should have produced.
/// Any difference fails, on edited objects and bystanders alike.
pub fn quality_test(perceived: &SceneState, target: &SceneState, edited_ids: &[ObjectId]) -> QualityReport {
    let d = diff_states(perceived, target);
    let edited = |id: &ObjectId| edited_ids.contains(id);
    let mut failures: Vec<QualityFailure> = d
        .changes
        .iter()
        .map(|c| QualityFailure {
            object: c.id.clone(),
            field: c.change.field_name().to_string(),
            edited: edited(&c.id),
        })
        .collect();
    for id in d.removed.iter().chain(d.added.iter().map(|o| &o.id)) {
        failures.push(QualityFailure {
            object: id.clone(),
            field: "presence".into(),
            edited: edited(id),
        });
    }
    failures.sort_by(|a, b| (&a.object, &a.field).cmp(&(&b.object, &b.field)));
    QualityReport {
        pass: failures.is_empty(),
        failures,
    }
}
