//! Deterministic synthetic web environment.
//!
//! Sites are small graphs of pages holding rectangular UI elements. Tasks
//! carry a verifiable goal and a golden (shortest) action sequence. All
//! observations are symbolic element lists rather than pixels.

mod generate;
mod planner;
mod suite;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionType, Point};
use crate::trajectory::{StateContext, TrajectoryRecord};

pub use generate::{generate_site, generate_task, generate_tasks, SiteParams, TaskKind, DEFAULT_STUCK_RATE, MAX_BRANCHING, MAX_PAGES};
pub use planner::{Distance, Planner};
pub use suite::{TaskSuite, SUITE_FORMAT, SUITE_VERSION};

/// Training rollout horizon.
pub const DEFAULT_MAX_STEPS: u32 = 20;
/// Evaluation horizon.
pub const EVAL_MAX_STEPS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub u32);

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn contains(&self, p: Point) -> bool {
        self.x0 <= p.x && p.x < self.x1 && self.y0 <= p.y && p.y < self.y1
    }

    pub fn center(&self) -> Point {
        Point::new(((self.x0 + self.x1) / 2.0).floor(), ((self.y0 + self.y1) / 2.0).floor())
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Link,
    Button,
    Textfield,
    Text,
    /// "Home" anchor present on regular pages; navigates to the start page.
    BackAnchor,
}

impl ElementKind {
    pub fn is_interactable(self) -> bool {
        !matches!(self, ElementKind::Text)
    }

    pub fn navigates(self) -> bool {
        matches!(self, ElementKind::Link | ElementKind::Button | ElementKind::BackAnchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub element_id: ElementId,
    pub kind: ElementKind,
    pub label: String,
    pub bbox: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_page: Option<PageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page_id: PageId,
    pub title: String,
    pub elements: Vec<Element>,
}

impl Page {
    pub fn element(&self, id: ElementId) -> Option<&Element> {
        self.elements.iter().find(|e| e.element_id == id)
    }

    /// Element whose box contains `p`, if any.
    pub fn hit_test(&self, p: Point) -> Option<&Element> {
        self.elements.iter().find(|e| e.bbox.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub pages: Vec<Page>,
    pub start_page: PageId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SiteError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("malformed site: {0}")]
    Malformed(String),
}

impl Site {
    pub fn page(&self, id: PageId) -> &Page {
        &self.pages[id.0 as usize]
    }

    /// Checks geometry, id uniqueness, link resolution and connectivity.
    pub fn validate(&self) -> Result<(), SiteError> {
        let bad = |m: String| Err(SiteError::Malformed(m));
        if self.start_page.0 as usize >= self.pages.len() {
            return bad("start page missing".into());
        }
        for (i, page) in self.pages.iter().enumerate() {
            if page.page_id.0 as usize != i {
                return bad(format!("page at index {i} has id {}", page.page_id.0));
            }
            for (j, e) in page.elements.iter().enumerate() {
                let b = e.bbox;
                if !(0.0 <= b.x0 && b.x0 < b.x1 && b.x1 <= 1280.0 && 0.0 <= b.y0 && b.y0 < b.y1 && b.y1 <= 720.0) {
                    return bad(format!("element {} on page {i} has invalid bbox", e.element_id.0));
                }
                if let Some(t) = e.target_page {
                    if t.0 as usize >= self.pages.len() {
                        return bad(format!("dangling link to page {}", t.0));
                    }
                }
                for other in &page.elements[j + 1..] {
                    if other.element_id == e.element_id {
                        return bad(format!("duplicate element id {} on page {i}", e.element_id.0));
                    }
                    if other.bbox.intersects(&b) {
                        return bad(format!("overlapping elements on page {i}"));
                    }
                }
            }
        }
        let reach = self.reachable_from_start();
        if let Some(i) = reach.iter().position(|r| !r) {
            return bad(format!("page {i} unreachable from start"));
        }
        Ok(())
    }

    fn reachable_from_start(&self) -> Vec<bool> {
        let mut seen = vec![false; self.pages.len()];
        let mut queue = std::collections::VecDeque::from([self.start_page]);
        seen[self.start_page.0 as usize] = true;
        while let Some(p) = queue.pop_front() {
            for t in self.page(p).elements.iter().filter_map(|e| e.target_page) {
                if !seen[t.0 as usize] {
                    seen[t.0 as usize] = true;
                    queue.push_back(t);
                }
            }
        }
        seen
    }
}

/// A textfield that must hold a given text when the task finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRequirement {
    pub page: PageId,
    pub element: ElementId,
    pub text: String,
}

/// Success predicate: correct final answer, plus optional field content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_field: Option<FieldRequirement>,
}

pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

impl Goal {
    pub fn answer_matches(&self, answer: &str) -> bool {
        normalize_text(answer) == normalize_text(&self.answer)
    }

    pub fn fields_satisfied(&self, fields: &FieldMap) -> bool {
        match &self.required_field {
            None => true,
            Some(req) => fields
                .get(&(req.page, req.element))
                .is_some_and(|v| normalize_text(v) == normalize_text(&req.text)),
        }
    }

    /// Visited pages are accepted for future goal shapes; current goals
    /// depend only on the answer and field contents.
    pub fn holds(&self, final_answer: &str, _visited: &[PageId], fields: &FieldMap) -> bool {
        self.answer_matches(final_answer) && self.fields_satisfied(fields)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenStep {
    pub fingerprint: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub kind: TaskKind,
    pub instruction: String,
    pub site: Site,
    pub goal: Goal,
    /// Strings the agent may type into a focused field.
    pub vocabulary: Vec<String>,
    pub golden: Vec<GoldenStep>,
}

impl Task {
    /// Reference action for the state with this fingerprint, if that state
    /// lies on the golden path.
    pub fn golden_action(&self, fingerprint: &str) -> Option<&Action> {
        self.golden
            .iter()
            .find(|g| g.fingerprint == fingerprint)
            .map(|g| &g.action)
    }

    /// True iff the trajectory ended through `finished` and the goal holds
    /// on the replayed final state.
    pub fn is_success(&self, trajectory: &TrajectoryRecord) -> bool {
        let Some(last) = trajectory.steps.last() else {
            return false;
        };
        if last.output.answer.action_type != ActionType::Finished {
            return false;
        }
        let mut state = EnvState::initial(self, trajectory.steps.len() as u32);
        for step in &trajectory.steps {
            if state.terminal {
                return false;
            }
            state = transition(self, &state, &step.output.answer);
        }
        state.goal_reached(self)
    }
}

pub type FieldMap = BTreeMap<(PageId, ElementId), String>;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub page: PageId,
    pub fields: FieldMap,
    pub focus: Option<ElementId>,
    pub back_stack: Vec<PageId>,
    pub visited: Vec<PageId>,
    pub steps: u32,
    pub max_steps: u32,
    pub terminal: bool,
    pub final_answer: Option<String>,
}

impl EnvState {
    pub fn initial(task: &Task, max_steps: u32) -> Self {
        EnvState {
            page: task.site.start_page,
            fields: FieldMap::new(),
            focus: None,
            back_stack: Vec::new(),
            visited: vec![task.site.start_page],
            steps: 0,
            max_steps,
            terminal: false,
            final_answer: None,
        }
    }

    pub fn budget_exhausted(&self) -> bool {
        self.steps >= self.max_steps
    }

    pub fn goal_reached(&self, task: &Task) -> bool {
        self.terminal
            && self
                .final_answer
                .as_deref()
                .is_some_and(|a| task.goal.holds(a, &self.visited, &self.fields))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedElement {
    pub element_id: ElementId,
    pub kind: ElementKind,
    pub label: String,
    pub bbox: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_page: Option<PageId>,
    /// Static text for text elements, current contents for textfields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub page_id: PageId,
    pub title: String,
    pub elements: Vec<ObservedElement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focused: Option<ElementId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_marker: Option<Point>,
}

impl Observation {
    pub fn element(&self, id: ElementId) -> Option<&ObservedElement> {
        self.elements.iter().find(|e| e.element_id == id)
    }

    pub fn hit_test(&self, p: Point) -> Option<&ObservedElement> {
        self.elements.iter().find(|e| e.bbox.contains(p))
    }

    /// Copy with the marker placed at `p`.
    pub fn annotated(&self, p: Option<Point>) -> Observation {
        Observation {
            annotation_marker: p,
            ..self.clone()
        }
    }
}

pub fn observe(task: &Task, state: &EnvState) -> Observation {
    let page = task.site.page(state.page);
    let elements = page
        .elements
        .iter()
        .map(|e| ObservedElement {
            element_id: e.element_id,
            kind: e.kind,
            label: e.label.clone(),
            bbox: e.bbox,
            target_page: e.target_page,
            content: match e.kind {
                ElementKind::Textfield => state.fields.get(&(page.page_id, e.element_id)).cloned(),
                _ => e.content.clone(),
            },
        })
        .collect();
    Observation {
        page_id: page.page_id,
        title: page.title.clone(),
        elements,
        focused: state.focus,
        annotation_marker: None,
    }
}

/// Pure transition model. Increments the step counter and applies the
/// action; performs no budget or terminal checks.
///
/// `left_click` and `double_click` activate the element under the pointer
/// (navigation or focus). Right clicks, drags, hotkeys, scrolling, mouse
/// moves and waits only consume a step.
pub fn transition(task: &Task, state: &EnvState, action: &Action) -> EnvState {
    let mut next = state.clone();
    next.steps += 1;
    match action.action_type {
        ActionType::LeftClick | ActionType::DoubleClick => {
            let page = task.site.page(state.page);
            let hit = action.point_2d.and_then(|p| page.hit_test(p));
            next.focus = None;
            match hit {
                Some(e) if e.kind.navigates() => {
                    if let Some(target) = e.target_page {
                        next.back_stack.push(state.page);
                        next.page = target;
                        next.visited.push(target);
                    }
                }
                Some(e) if e.kind == ElementKind::Textfield => next.focus = Some(e.element_id),
                _ => {}
            }
        }
        ActionType::TypeText => {
            if let Some(f) = state.focus {
                next.fields
                    .insert((state.page, f), action.value.clone().unwrap_or_default());
            }
        }
        ActionType::GoBack => {
            if let Some(prev) = next.back_stack.pop() {
                next.page = prev;
                next.focus = None;
                next.visited.push(prev);
            }
        }
        ActionType::Finished => {
            next.terminal = true;
            next.final_answer = Some(action.value.clone().unwrap_or_default());
        }
        ActionType::RightClick
        | ActionType::MouseMove
        | ActionType::LeftClickDrag
        | ActionType::Scroll
        | ActionType::Hotkey
        | ActionType::Wait => {}
    }
    next
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("step called on a terminal state")]
    TerminalStateStep,
    #[error("step budget of {0} exhausted")]
    StepBudgetExhausted(u32),
}

/// Live environment endpoint. Counts every executed step so callers can
/// check that optimization never touches the environment.
#[derive(Debug, Default)]
pub struct LiveEnv {
    steps_executed: AtomicU64,
}

impl LiveEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_executed(&self) -> u64 {
        self.steps_executed.load(Ordering::Relaxed)
    }

    pub fn reset(&self, task: &Task, max_steps: u32) -> (EnvState, Observation) {
        let state = EnvState::initial(task, max_steps);
        let obs = observe(task, &state);
        (state, obs)
    }

    /// Executes one action. The returned flag is true once the episode is
    /// over, either through `finished` or by reaching the step cap.
    pub fn step(
        &self,
        task: &Task,
        state: &EnvState,
        action: &Action,
    ) -> Result<(EnvState, Observation, bool), EnvError> {
        if state.terminal {
            return Err(EnvError::TerminalStateStep);
        }
        if state.budget_exhausted() {
            return Err(EnvError::StepBudgetExhausted(state.max_steps));
        }
        self.steps_executed.fetch_add(1, Ordering::Relaxed);
        let next = transition(task, state, action);
        let obs = observe(task, &next);
        let done = next.terminal || next.budget_exhausted();
        Ok((next, obs, done))
    }
}

/// The finite action support offered to the policy in a given observation.
///
/// One click per interactable element (at its center), one `type` per
/// vocabulary string when a field is focused, then `goback`, `wait`, and
/// one `finished` per distinct visible text.
pub fn candidates_for(vocabulary: &[String], obs: &Observation) -> Vec<Action> {
    let mut out: Vec<Action> = Vec::new();
    for e in obs.elements.iter().filter(|e| e.kind.is_interactable()) {
        out.push(Action::click(format!("click {}", e.label), e.bbox.center()));
    }
    if let Some(field) = obs.focused.and_then(|f| obs.element(f)) {
        for word in vocabulary {
            out.push(Action::type_text(
                format!("type into {}", field.label),
                word.clone(),
                Some(field.bbox.center()),
            ));
        }
    }
    out.push(Action::go_back());
    out.push(Action::wait());
    for e in obs.elements.iter().filter(|e| e.kind == ElementKind::Text) {
        let a = Action::finished(e.content.clone().unwrap_or_default());
        if !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

/// Candidate enumeration for a live state. Panics on a terminal state.
pub fn enumerate_candidates(task: &Task, state: &EnvState) -> Vec<Action> {
    assert!(!state.terminal, "enumerate_candidates on a terminal state");
    candidates_for(&task.vocabulary, &observe(task, state))
}

/// Rebuilds the environment state behind a step context by replaying its
/// action history through the transition model. No live steps are taken.
pub fn replay_context(task: &Task, ctx: &StateContext, max_steps: u32) -> EnvState {
    let mut state = EnvState::initial(task, max_steps.max(ctx.history.len() as u32 + 1));
    for h in &ctx.history {
        state = transition(task, &state, &h.action);
    }
    state.max_steps = max_steps;
    state
}
