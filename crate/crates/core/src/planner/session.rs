//! The per-turn loop: plan, execute each sub-goal, perceive, check, retry,
//! then commit or roll back.

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    quality_test, Instruction, Perception, PerceptionHint, Plan, Planner, QualityFailure, DEFAULT_MAX_SUBGOALS,
};
use crate::ild::{execute_atomic, Backend, ExecConfig};
use crate::scene::{apply_transition, EditCommand, SceneState};
use crate::store::{ActionContext, ImageContext, ImageUri, Store, StoreError, ToolContext, ToolStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Extra attempts per sub-goal after the first.
    pub retry_budget: u32,
    /// Committed turns after which the session stops accepting input.
    pub turn_limit: u32,
    pub max_subgoals: usize,
    /// Character budget for the memory handed to the planner.
    pub memory_budget: Option<usize>,
    pub exec: ExecConfig,
}

impl Default for SessionConfig {
    fn default() -> SessionConfig {
        SessionConfig {
            retry_budget: 3,
            turn_limit: 10,
            max_subgoals: DEFAULT_MAX_SUBGOALS,
            memory_budget: None,
            exec: ExecConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnStatus {
    Committed,
    RolledBack,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub status: TurnStatus,
    /// Most executor invocations any one sub-goal needed.
    pub attempts: u32,
    /// The head after the turn.
    pub final_uri: ImageUri,
    pub action_context: Option<ActionContext>,
    pub plan: Option<Plan>,
    /// Quality-test failures of the last failed attempt, if any.
    pub failures: Vec<QualityFailure>,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is closed")]
    Closed,
    #[error("turn limit of {0} reached")]
    TurnLimit(u32),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("session has no root image")]
    NoRoot,
    #[error("head image has no scene state")]
    NoScene,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct Session {
    store: Store,
    backend: Arc<dyn Backend>,
    perception: Arc<dyn Perception>,
    planner: Planner,
    cfg: SessionConfig,
    closed: bool,
}

/// How one sub-goal ended.
enum SubGoal {
    Done {
        image: RgbImage,
        scene: SceneState,
        attempts: u32,
    },
    Exhausted {
        attempts: u32,
        failures: Vec<QualityFailure>,
        error: Option<String>,
    },
    Broken(String),
}

impl Session {
    /// Wraps a store whose graph already has a root.
    pub fn resume(
        store: Store,
        backend: Arc<dyn Backend>,
        perception: Arc<dyn Perception>,
        planner: Planner,
        cfg: SessionConfig,
    ) -> Result<Session, SessionError> {
        if store.head_uri().is_none() {
            return Err(SessionError::NoRoot);
        }
        Ok(Session {
            store,
            backend,
            perception,
            planner,
            cfg,
            closed: false,
        })
    }

    /// Records `image` as the root of an empty store and opens a session.
    pub fn open(
        mut store: Store,
        image: &RgbImage,
        scene: Option<SceneState>,
        backend: Arc<dyn Backend>,
        perception: Arc<dyn Perception>,
        planner: Planner,
        cfg: SessionConfig,
    ) -> Result<Session, SessionError> {
        store.record_root(image, scene)?;
        Session::resume(store, backend, perception, planner, cfg)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn head_uri(&self) -> &ImageUri {
        self.store.head_uri().expect("open sessions have a head")
    }

    pub fn head_scene(&self) -> Option<&SceneState> {
        self.store.graph().head().and_then(|n| n.scene_ref.as_ref())
    }

    pub fn head_image(&self) -> Result<RgbImage, StoreError> {
        self.store.image(self.head_uri())
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn turns_committed(&self) -> usize {
        self.store.graph().actions.len()
    }

    /// Points the head at any existing node without recording an action;
    /// the next turn branches from there.
    pub fn move_head(&mut self, target: &ImageUri) -> Result<ImageContext, SessionError> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        Ok(self.store.rollback(target)?)
    }

    /// Runs one user turn. The head ends either on the committed result or
    /// exactly where it started.
    pub fn run_turn(&mut self, instruction: &Instruction) -> Result<TurnOutcome, SessionError> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        if instruction.is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        if self.turns_committed() >= self.cfg.turn_limit as usize {
            return Err(SessionError::TurnLimit(self.cfg.turn_limit));
        }
        let base_uri = self.head_uri().clone();
        let base_scene = self.head_scene().cloned().ok_or(SessionError::NoScene)?;
        let base_image = self.store.image(&base_uri)?;
        let turn = self.turns_committed() as u32 + 1;
        let failed = |error: String, plan: Option<Plan>| TurnOutcome {
            status: TurnStatus::Failed,
            attempts: 0,
            final_uri: base_uri.clone(),
            action_context: None,
            plan,
            failures: Vec::new(),
            error: Some(error),
        };

        let memory = self.store.render_memory(self.cfg.memory_budget);
        let plan = match self
            .planner
            .plan(instruction, &base_scene, &memory, self.cfg.max_subgoals)
        {
            Ok(p) => p,
            Err(e) => return Ok(failed(e.to_string(), None)),
        };

        let mut staged = self.store.stage();
        let mut image = base_image;
        let mut scene = base_scene.clone();
        let mut tools: Vec<ToolContext> = Vec::new();
        let mut attempts = 0;
        for (i, cmd) in plan.sub_goals.iter().enumerate() {
            match self.sub_goal(
                &mut staged,
                &mut tools,
                turn,
                i,
                cmd,
                &image,
                &scene,
                base_scene.turn_index,
            ) {
                SubGoal::Done {
                    image: img,
                    scene: s,
                    attempts: a,
                } => {
                    image = img;
                    scene = s;
                    attempts = attempts.max(a);
                }
                SubGoal::Broken(e) => {
                    let mut out = failed(e, Some(plan.clone()));
                    out.attempts = attempts;
                    return Ok(out);
                }
                SubGoal::Exhausted {
                    attempts: a,
                    failures,
                    error,
                } => {
                    self.store.rollback(&base_uri)?;
                    return Ok(TurnOutcome {
                        status: TurnStatus::RolledBack,
                        attempts: attempts.max(a),
                        final_uri: base_uri,
                        action_context: None,
                        plan: Some(plan),
                        failures,
                        error,
                    });
                }
            }
        }

        let new_head = ImageUri::of(&image);
        let keys: Vec<&ImageUri> = tools
            .iter()
            .filter(|t| t.status == ToolStatus::Succeeded)
            .filter_map(|t| t.referenced_uris.last())
            .collect();
        let on_path: Vec<_> = staged
            .staged_images()?
            .into_iter()
            .filter(|s| keys.contains(&&s.node.uri))
            .collect();
        let action = self
            .store
            .commit_turn(&on_path, &tools, &instruction.text, &plan.sub_goals, &new_head)?;
        Ok(TurnOutcome {
            status: TurnStatus::Committed,
            attempts,
            final_uri: new_head,
            action_context: Some(action),
            plan: Some(plan),
            failures: Vec::new(),
            error: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn sub_goal(
        &self,
        staged: &mut Store,
        tools: &mut Vec<ToolContext>,
        turn: u32,
        index: usize,
        cmd: &EditCommand,
        image: &RgbImage,
        scene: &SceneState,
        base_turn: u32,
    ) -> SubGoal {
        let input_uri = ImageUri::of(image);
        let mut params = serde_json::Map::new();
        params.insert("command".into(), serde_json::to_value(cmd).expect("command serializes"));
        params.insert("backend".into(), self.backend.name().into());
        let log = |staged: &Store, tool: ToolContext, tools: &mut Vec<ToolContext>| {
            // the debug sidecar is best effort; it never decides a turn
            let _ = staged.record_tool(turn, index, tool.clone());
            tools.push(tool);
        };

        if let EditCommand::Undo = cmd {
            return match execute_atomic(staged, image, scene, cmd, self.backend.as_ref(), &self.cfg.exec) {
                Ok(ex) => {
                    log(
                        staged,
                        ToolContext {
                            tool_name: "undo".into(),
                            parameters: params,
                            thought: format!("revert to {}", ex.node.uri.short()),
                            referenced_uris: vec![input_uri, ex.node.uri.clone()],
                            status: ToolStatus::Succeeded,
                            attempt_index: 1,
                        },
                        tools,
                    );
                    SubGoal::Done {
                        image: ex.image,
                        scene: ex.scene,
                        attempts: 1,
                    }
                }
                Err(e) => SubGoal::Broken(e.to_string()),
            };
        }

        let mut from = scene.clone();
        from.turn_index = base_turn;
        let target = match apply_transition(&from, std::slice::from_ref(cmd)) {
            Ok(t) => t,
            Err(e) => return SubGoal::Broken(e.to_string()),
        };
        let edited = cmd.target().cloned().into_iter().collect::<Vec<_>>();
        let mut last_failures = Vec::new();
        let mut last_error = None;
        for attempt in 1..=self.cfg.retry_budget + 1 {
            let final_try = attempt == self.cfg.retry_budget + 1;
            let miss = if final_try {
                ToolStatus::Failed
            } else {
                ToolStatus::Retried
            };
            let mut tool = ToolContext {
                tool_name: cmd.kind().name().into(),
                parameters: params.clone(),
                thought: String::new(),
                referenced_uris: vec![input_uri.clone()],
                status: miss,
                attempt_index: attempt,
            };
            let ex = match execute_atomic(staged, image, &from, cmd, self.backend.as_ref(), &self.cfg.exec) {
                Ok(ex) => ex,
                Err(e) if e.is_retryable() => {
                    tool.thought = e.to_string();
                    log(staged, tool, tools);
                    last_error = Some(e.to_string());
                    last_failures.clear();
                    continue;
                }
                Err(e) => return SubGoal::Broken(e.to_string()),
            };
            tool.referenced_uris.push(ex.node.uri.clone());
            let hint = PerceptionHint {
                expected: &target,
                previous: &from,
            };
            let perceived = match self.perception.perceive(&ex.image, &hint) {
                Ok(p) => p,
                Err(e) => return SubGoal::Broken(e.to_string()),
            };
            let report = quality_test(&perceived, &target, &edited);
            if report.pass {
                tool.status = ToolStatus::Succeeded;
                tool.thought = "quality test passed".into();
                log(staged, tool, tools);
                return SubGoal::Done {
                    image: ex.image,
                    scene: target,
                    attempts: attempt,
                };
            }
            tool.thought = format!(
                "quality test failed on {}",
                report
                    .failures
                    .iter()
                    .map(|f| format!("{}.{}", f.object, f.field))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            log(staged, tool, tools);
            last_failures = report.failures;
            last_error = None;
        }
        SubGoal::Exhausted {
            attempts: self.cfg.retry_budget + 1,
            failures: last_failures,
            error: last_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ild::{ScriptedBackend, ScriptedStep, SymbolicBackend};
    use crate::planner::SymbolicPerception;
    use crate::scene::testutil::three_objects;
    use crate::scene::{render, AttrValue, Color};
    use crate::store::DebugLog;

    const TWO: &str = "adjust(obj_1, color=sea-foam-green); remove(obj_3)";

    fn open(backend: impl Backend + 'static) -> Session {
        let s = three_objects();
        let img = render(&s, s.canvas_w, s.canvas_h).unwrap();
        Session::open(
            Store::in_memory(),
            &img,
            Some(s),
            Arc::new(backend),
            Arc::new(SymbolicPerception::default()),
            Planner::RuleBased,
            SessionConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn two_subgoals_commit_first_time() {
        let mut sess = open(SymbolicBackend::default());
        let out = sess.run_turn(&Instruction::dsl(TWO)).unwrap();
        assert_eq!(out.status, TurnStatus::Committed);
        assert_eq!(out.attempts, 1);
        let want = apply_transition(&three_objects(), &crate::dsl::parse_canonical(TWO).unwrap()).unwrap();
        assert_eq!(sess.head_scene().unwrap(), &want);
        assert_eq!(&out.final_uri, sess.head_uri());
        assert_eq!(out.action_context.unwrap().key_image_uris.len(), 2);
    }

    #[test]
    fn corrupted_attempt_is_retried() {
        let mut sess = open(ScriptedBackend::new(
            SymbolicBackend::default(),
            [ScriptedStep::Scramble],
        ));
        let out = sess.run_turn(&Instruction::dsl("adjust(obj_2, color=navy)")).unwrap();
        assert_eq!(out.status, TurnStatus::Committed);
        assert_eq!(out.attempts, 2);
        let debug = sess.store().debug().records();
        let statuses: Vec<_> = debug.iter().map(|r| r.tool.status).collect();
        assert_eq!(statuses, vec![ToolStatus::Retried, ToolStatus::Succeeded]);
        assert!(debug[0].tool.thought.contains("obj_2"));
    }

    #[test]
    fn exhausted_retries_roll_back() {
        let mut sess = open(ScriptedBackend::new(
            SymbolicBackend::default(),
            [ScriptedStep::Fail; 10],
        ));
        let start = sess.head_uri().clone();
        let nodes = sess.store().graph().nodes.len();
        let out = sess.run_turn(&Instruction::dsl("remove(obj_1)")).unwrap();
        assert_eq!(out.status, TurnStatus::RolledBack);
        assert_eq!(out.attempts, 4);
        assert_eq!(sess.head_uri(), &start);
        assert_eq!(sess.store().graph().nodes.len(), nodes);
        assert!(sess.store().graph().actions.is_empty());
        assert_eq!(
            sess.store().debug().records().last().unwrap().tool.status,
            ToolStatus::Failed
        );
    }

    #[test]
    fn ignored_edit_rolls_back_with_failures() {
        let mut sess = open(ScriptedBackend::new(
            SymbolicBackend::default(),
            [ScriptedStep::Ignore; 4],
        ));
        let out = sess.run_turn(&Instruction::dsl("adjust(obj_1, size=large)")).unwrap();
        assert_eq!(out.status, TurnStatus::RolledBack);
        assert_eq!(out.failures[0].object, "obj_1".into());
        assert!(out.failures[0].edited);
    }

    #[test]
    fn folded_memory_ignores_failures() {
        let three = "adjust(obj_1, color=navy); adjust(obj_2, size=small); remove(obj_3)";
        let mut clean = open(SymbolicBackend::default());
        clean.run_turn(&Instruction::dsl(three)).unwrap();
        let schedule = [
            ScriptedStep::Fail,
            ScriptedStep::Timeout,
            ScriptedStep::Scramble,
            ScriptedStep::Pass,
        ];
        let mut noisy = open(ScriptedBackend::new(SymbolicBackend::default(), schedule.repeat(3)));
        let out = noisy.run_turn(&Instruction::dsl(three)).unwrap();
        assert_eq!(out.attempts, 4);
        assert_eq!(noisy.store().debug().records().len(), 12);
        assert_eq!(
            clean.store().graph().persistent_memory(),
            noisy.store().graph().persistent_memory()
        );
    }

    #[test]
    fn undo_restores_turn_start_and_branches() {
        let mut sess = open(SymbolicBackend::default());
        let root = sess.head_uri().clone();
        sess.run_turn(&Instruction::dsl(TWO)).unwrap();
        let out = sess.run_turn(&Instruction::dsl("undo()")).unwrap();
        assert_eq!(out.status, TurnStatus::Committed);
        assert_eq!(sess.head_uri(), &root);
        assert_eq!(sess.head_scene().unwrap().objects, three_objects().objects);
        let out = sess.run_turn(&Instruction::dsl("adjust(obj_2, color=red)")).unwrap();
        assert_eq!(out.status, TurnStatus::Committed);
        assert_eq!(sess.store().graph().children(&root).len(), 2);
    }

    #[test]
    fn planner_errors_fail_without_side_effects() {
        let mut sess = open(SymbolicBackend::default());
        let before = sess.store().graph().clone();
        let out = sess.run_turn(&Instruction::dsl("adjust(obj_1, colour=red)")).unwrap();
        assert_eq!(out.status, TurnStatus::Failed);
        assert!(out.error.is_some());
        let out = sess.run_turn(&Instruction::dsl("adjust(ghost, color=red)")).unwrap();
        assert_eq!(out.status, TurnStatus::Failed);
        let out = sess.run_turn(&Instruction::dsl("undo()")).unwrap();
        assert_eq!(out.status, TurnStatus::Failed);
        assert_eq!(sess.store().graph(), &before);
        assert!(matches!(
            sess.run_turn(&Instruction::default()),
            Err(SessionError::EmptyInstruction)
        ));
    }

    #[test]
    fn turn_limit_and_close() {
        let mut sess = open(SymbolicBackend::default());
        sess.cfg.turn_limit = 2;
        let colors = [Color::Navy, Color::Red];
        for c in colors {
            let cmd = crate::dsl::print_command(&EditCommand::adjust("obj_2", AttrValue::Color(c)));
            assert_eq!(
                sess.run_turn(&Instruction::dsl(cmd)).unwrap().status,
                TurnStatus::Committed
            );
        }
        assert!(matches!(
            sess.run_turn(&Instruction::dsl("remove(obj_1)")),
            Err(SessionError::TurnLimit(2))
        ));
        sess.close();
        assert!(matches!(
            sess.run_turn(&Instruction::dsl("remove(obj_1)")),
            Err(SessionError::Closed)
        ));
    }

    #[test]
    fn replayed_log_matches_session() {
        let dir = tempfile::tempdir().unwrap();
        let blobs: Arc<dyn crate::store::BlobStore> =
            Arc::new(crate::store::DirBlobs::open(dir.path().join("blobs")).unwrap());
        let log = dir.path().join("graph.jsonl");
        let s = three_objects();
        let img = render(&s, s.canvas_w, s.canvas_h).unwrap();
        let mut sess = Session::open(
            Store::new(blobs.clone(), Some(log.clone()), DebugLog::off()),
            &img,
            Some(s),
            Arc::new(ScriptedBackend::new(
                SymbolicBackend::default(),
                [ScriptedStep::Fail; 4],
            )),
            Arc::new(SymbolicPerception::default()),
            Planner::RuleBased,
            SessionConfig::default(),
        )
        .unwrap();
        sess.run_turn(&Instruction::dsl("remove(obj_1)")).unwrap();
        sess.run_turn(&Instruction::dsl(TWO)).unwrap();
        sess.run_turn(&Instruction::dsl("undo()")).unwrap();
        let (back, _) = Store::replay(blobs, log, DebugLog::off()).unwrap();
        assert_eq!(back.graph(), sess.store().graph());
    }
}
