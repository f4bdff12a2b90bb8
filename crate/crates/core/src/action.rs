//! Computer-use action space and the `<think>…</think><answer>…</answer>`
//! output format shared by the policy, the verifiers and the PRM client.
//!
//! The answer block is a JSON object with the fields `action_type`,
//! `description`, `value`, `point_2d` and (for drags) `point_2d_end`.
//! Unknown fields are ignored when parsing.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Viewport width in pixels.
pub const VIEWPORT_WIDTH: f64 = 1280.0;
/// Viewport height in pixels.
pub const VIEWPORT_HEIGHT: f64 = 720.0;

/// The eleven primitive GUI operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionType {
    #[serde(rename = "left_click")]
    LeftClick,
    #[serde(rename = "double_click")]
    DoubleClick,
    #[serde(rename = "right_click")]
    RightClick,
    #[serde(rename = "mouse_move")]
    MouseMove,
    #[serde(rename = "left_click_drag")]
    LeftClickDrag,
    #[serde(rename = "scroll")]
    Scroll,
    #[serde(rename = "type")]
    TypeText,
    #[serde(rename = "hotkey")]
    Hotkey,
    #[serde(rename = "wait")]
    Wait,
    #[serde(rename = "goback")]
    GoBack,
    #[serde(rename = "finished")]
    Finished,
}

impl ActionType {
    pub const ALL: [ActionType; 11] = [
        ActionType::LeftClick,
        ActionType::DoubleClick,
        ActionType::RightClick,
        ActionType::MouseMove,
        ActionType::LeftClickDrag,
        ActionType::Scroll,
        ActionType::TypeText,
        ActionType::Hotkey,
        ActionType::Wait,
        ActionType::GoBack,
        ActionType::Finished,
    ];

    /// Wire name used inside the answer JSON.
    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::LeftClick => "left_click",
            ActionType::DoubleClick => "double_click",
            ActionType::RightClick => "right_click",
            ActionType::MouseMove => "mouse_move",
            ActionType::LeftClickDrag => "left_click_drag",
            ActionType::Scroll => "scroll",
            ActionType::TypeText => "type",
            ActionType::Hotkey => "hotkey",
            ActionType::Wait => "wait",
            ActionType::GoBack => "goback",
            ActionType::Finished => "finished",
        }
    }

    pub fn from_wire(name: &str) -> Option<ActionType> {
        ActionType::ALL.into_iter().find(|t| t.as_str() == name)
    }

    /// Position in [`ActionType::ALL`]; used for one-hot features.
    pub fn index(self) -> usize {
        ActionType::ALL.iter().position(|t| *t == self).unwrap()
    }

    /// Actions that must carry `point_2d` and are graded on grounding.
    pub fn is_grounded(self) -> bool {
        matches!(
            self,
            ActionType::LeftClick
                | ActionType::DoubleClick
                | ActionType::RightClick
                | ActionType::MouseMove
                | ActionType::LeftClickDrag
                | ActionType::Scroll
        )
    }

    /// Actions that must carry `value`.
    pub fn carries_value(self) -> bool {
        matches!(
            self,
            ActionType::TypeText | ActionType::Hotkey | ActionType::Finished | ActionType::Scroll
        )
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A viewport coordinate in pixels. Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn in_viewport(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && (0.0..VIEWPORT_WIDTH).contains(&self.x)
            && (0.0..VIEWPORT_HEIGHT).contains(&self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

pub const SCROLL_DIRECTIONS: [&str; 4] = ["up", "down", "left", "right"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub action_type: ActionType,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_2d: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_2d_end: Option<Point>,
}

impl Action {
    fn bare(action_type: ActionType, description: impl Into<String>) -> Self {
        Action {
            action_type,
            description: description.into(),
            value: None,
            point_2d: None,
            point_2d_end: None,
        }
    }

    pub fn click(description: impl Into<String>, at: Point) -> Self {
        Action {
            point_2d: Some(at),
            ..Action::bare(ActionType::LeftClick, description)
        }
    }

    /// `type` action. The target point is optional; candidates generated by
    /// the environment carry the focused field's center.
    pub fn type_text(description: impl Into<String>, text: impl Into<String>, at: Option<Point>) -> Self {
        Action {
            value: Some(text.into()),
            point_2d: at,
            ..Action::bare(ActionType::TypeText, description)
        }
    }

    pub fn wait() -> Self {
        Action::bare(ActionType::Wait, "")
    }

    pub fn go_back() -> Self {
        Action::bare(ActionType::GoBack, "go back")
    }

    pub fn finished(answer: impl Into<String>) -> Self {
        Action {
            value: Some(answer.into()),
            ..Action::bare(ActionType::Finished, "report answer")
        }
    }

    pub fn drag(description: impl Into<String>, from: Point, to: Point) -> Self {
        Action {
            point_2d: Some(from),
            point_2d_end: Some(to),
            ..Action::bare(ActionType::LeftClickDrag, description)
        }
    }

    /// Checks the per-type field rules.
    pub fn validate(&self) -> Result<(), ParseError> {
        let t = self.action_type;
        let violation = |msg: String| Err(ParseError::SchemaViolation(msg));

        match (t.is_grounded(), self.point_2d) {
            (true, None) => return violation(format!("{t} requires point_2d")),
            (false, Some(_)) if t != ActionType::TypeText => {
                return violation(format!("{t} does not take point_2d"))
            }
            _ => {}
        }
        for p in self.point_2d.iter().chain(self.point_2d_end.iter()) {
            if !p.in_viewport() {
                return violation(format!("point ({}, {}) outside the viewport", p.x, p.y));
            }
        }
        match (t == ActionType::LeftClickDrag, self.point_2d_end.is_some()) {
            (true, false) => return violation("left_click_drag requires point_2d_end".into()),
            (false, true) => return violation(format!("{t} does not take point_2d_end")),
            _ => {}
        }
        match (t.carries_value(), &self.value) {
            (true, None) => return violation(format!("{t} requires value")),
            (false, Some(_)) => return violation(format!("{t} does not take value")),
            _ => {}
        }
        if t == ActionType::Scroll {
            let dir = self.value.as_deref().unwrap_or_default();
            if !SCROLL_DIRECTIONS.contains(&dir) {
                return violation(format!("unknown scroll direction {dir:?}"));
            }
        }
        Ok(())
    }

    /// The answer-block JSON text for this action.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("action serialization is infallible")
    }
}

/// Parsed agent emission: free-text thought plus the structured action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub think: String,
    pub answer: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("output lacks <think>…</think><answer>…</answer> tags in order")]
    MissingTags,
    #[error("answer block is not a JSON object: {0}")]
    MalformedAnswer(String),
    #[error("unknown action_type {0:?}")]
    UnknownActionType(String),
    #[error("answer violates the action schema: {0}")]
    SchemaViolation(String),
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Parses raw agent output. The thought is everything between the first
/// `<think>` and the next `</think>`; the answer is everything between the
/// following `<answer>` and the last `</answer>`.
pub fn parse_output(text: &str) -> Result<StructuredOutput, ParseError> {
    let t0 = text.find(THINK_OPEN).ok_or(ParseError::MissingTags)? + THINK_OPEN.len();
    let t1 = t0 + text[t0..].find(THINK_CLOSE).ok_or(ParseError::MissingTags)?;
    let rest = t1 + THINK_CLOSE.len();
    let a0 = rest + text[rest..].find(ANSWER_OPEN).ok_or(ParseError::MissingTags)? + ANSWER_OPEN.len();
    let a1 = text[a0..].rfind(ANSWER_CLOSE).ok_or(ParseError::MissingTags)? + a0;

    let answer = parse_action_json(&text[a0..a1])?;
    Ok(StructuredOutput {
        think: text[t0..t1].to_string(),
        answer,
    })
}

fn parse_action_json(body: &str) -> Result<Action, ParseError> {
    let value: Value =
        serde_json::from_str(body.trim()).map_err(|e| ParseError::MalformedAnswer(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ParseError::MalformedAnswer("answer is not an object".into()));
    };

    let action_type = match obj.get("action_type") {
        Some(Value::String(s)) => {
            ActionType::from_wire(s).ok_or_else(|| ParseError::UnknownActionType(s.clone()))?
        }
        Some(other) => return Err(ParseError::UnknownActionType(other.to_string())),
        None => return Err(ParseError::SchemaViolation("missing action_type".into())),
    };

    let description = match obj.get("description") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ParseError::SchemaViolation("description must be a string".into())),
    };
    let value = match obj.get("value") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ParseError::SchemaViolation("value must be a string".into())),
    };

    let action = Action {
        action_type,
        description,
        value,
        point_2d: read_point(obj.get("point_2d"), "point_2d")?,
        point_2d_end: read_point(obj.get("point_2d_end"), "point_2d_end")?,
    };
    action.validate()?;
    Ok(action)
}

fn read_point(v: Option<&Value>, field: &str) -> Result<Option<Point>, ParseError> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.eq_ignore_ascii_case("none") => Ok(None),
        Some(Value::Array(xs)) if xs.len() == 2 => {
            let coord = |v: &Value| {
                v.as_f64()
                    .ok_or_else(|| ParseError::SchemaViolation(format!("{field} coordinates must be numbers")))
            };
            Ok(Some(Point::new(coord(&xs[0])?, coord(&xs[1])?)))
        }
        Some(_) => Err(ParseError::SchemaViolation(format!("{field} must be a pair of numbers"))),
    }
}

/// Renders the canonical text form. Inverse of [`parse_output`] for any
/// output whose thought contains no `</think>` and whose action validates.
pub fn serialize_output(out: &StructuredOutput) -> String {
    format!(
        "{THINK_OPEN}{}{THINK_CLOSE}{ANSWER_OPEN}{}{ANSWER_CLOSE}",
        out.think,
        out.answer.to_json()
    )
}

/// Templated thought attached to an action. Thoughts carry no probability
/// mass; they exist so every step has the full output format.
pub fn thought_for(action: &Action) -> String {
    let value = action.value.as_deref().unwrap_or_default();
    match action.action_type {
        ActionType::LeftClick | ActionType::DoubleClick | ActionType::RightClick => {
            format!("The element matters for the task, so I will {}.", action.description)
        }
        ActionType::TypeText => format!("I will type \"{value}\" into the field."),
        ActionType::GoBack => "This page does not help; going back.".into(),
        ActionType::Wait => "Waiting for the page to settle.".into(),
        ActionType::Finished => format!("The task is complete; the answer is {value}."),
        other => format!("Next I will {other}."),
    }
}
