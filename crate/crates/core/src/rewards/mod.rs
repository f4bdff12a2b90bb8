//! Step-level reward sources: the rule-based verifier against golden
//! actions, a simulation-oracle process reward model, and a client for
//! external graders speaking the prompt/JSON wire format.

use std::collections::HashMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_output, serialize_output, Action, Point, StructuredOutput};
use crate::seeding::{hash_str, rng_for};
use crate::synthweb::{replay_context, transition, Distance, Planner, Rect, Task};
use crate::trajectory::StateContext;

/// Default weight of the format term in the rule-based reward.
pub const DEFAULT_W_FMT: f64 = 0.1;

/// Word-level F1 over lowercased whitespace tokens, counting multiplicity.
pub fn word_f1(pred: &str, reference: &str) -> f64 {
    let p: Vec<String> = pred.split_whitespace().map(str::to_lowercase).collect();
    let r: Vec<String> = reference.split_whitespace().map(str::to_lowercase).collect();
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Half-open containment, identical to environment hit-testing.
pub fn in_bbox(point: Point, bbox: &Rect) -> bool {
    bbox.contains(point)
}

/// Components of the rule-based reward. All components are 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleRewardBreakdown {
    pub r_fmt: f64,
    pub r_type: f64,
    pub r_value: f64,
    pub r_ground: f64,
    pub r_acc: f64,
    pub total: f64,
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl RuleRewardBreakdown {
    /// Combines boolean components. Accuracy components cannot be judged
    /// on an unparseable output, so they are zeroed when `fmt` is false.
    pub fn from_components(fmt: bool, type_ok: bool, value_ok: bool, ground_ok: bool, w_fmt: f64) -> Self {
        let r_fmt = indicator(fmt);
        let r_type = indicator(fmt && type_ok);
        let r_value = indicator(fmt && value_ok);
        let r_ground = indicator(fmt && ground_ok);
        let r_acc = r_type * r_value * r_ground;
        RuleRewardBreakdown {
            r_fmt,
            r_type,
            r_value,
            r_ground,
            r_acc,
            total: w_fmt * r_fmt + (1.0 - w_fmt) * r_acc,
        }
    }
}

/// Grades raw model output against a golden action. For grounded golden
/// actions without a box, the predicted point must equal the golden one.
pub fn rule_reward(raw_output: &str, golden: &Action, golden_bbox: Option<&Rect>, w_fmt: f64) -> RuleRewardBreakdown {
    let Ok(out) = parse_output(raw_output) else {
        return RuleRewardBreakdown::from_components(false, false, false, false, w_fmt);
    };
    let pred = &out.answer;
    let type_ok = pred.action_type == golden.action_type;
    let value_ok = !golden.action_type.carries_value()
        || word_f1(
            pred.value.as_deref().unwrap_or_default(),
            golden.value.as_deref().unwrap_or_default(),
        ) > 0.5;
    let ground_ok = !golden.action_type.is_grounded()
        || match (pred.point_2d, golden_bbox) {
            (Some(p), Some(b)) => in_bbox(p, b),
            (Some(p), None) => Some(p) == golden.point_2d,
            (None, _) => false,
        };
    RuleRewardBreakdown::from_components(true, type_ok, value_ok, ground_ok, w_fmt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PRMVerdict {
    pub is_correct: bool,
    pub reflection: String,
}

impl PRMVerdict {
    pub fn reward(&self) -> f64 {
        indicator(self.is_correct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    Lenient,
    Conservative,
}

impl std::str::FromStr for Strictness {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lenient" => Ok(Strictness::Lenient),
            "conservative" => Ok(Strictness::Conservative),
            other => Err(format!("unknown strictness `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRMOracleConfig {
    pub strictness: Strictness,
    pub noise_rate: f64,
    pub seed: u64,
}

impl PRMOracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(format!("noise_rate must lie in [0, 0.5), got {}", self.noise_rate));
        }
        Ok(())
    }
}

/// Verdict before noise. Conservative accepts only steps that shorten the
/// remaining distance, which places them on a minimal path. Lenient also
/// accepts steps that keep the distance unchanged. Neither accepts an
/// exact repeat of an earlier action.
pub fn oracle_base_verdict(before: Distance, after: Distance, repeats: bool, strictness: Strictness) -> bool {
    if repeats {
        return false;
    }
    match (before, after) {
        (_, Some(0)) => true,
        (Some(b), Some(a)) => match strictness {
            Strictness::Conservative => a < b,
            Strictness::Lenient => a <= b,
        },
        (None, Some(_)) => true,
        (_, None) => false,
    }
}

/// Simulated grader. Rebuilds the state behind `x` by replaying its
/// history through the transition model, scores the candidate's effect on
/// the shortest distance to success, then flips the verdict with
/// probability `noise_rate` using a seed tied to the state and candidate.
pub fn oracle_prm(task: &Task, planner: &Planner, x: &StateContext, candidate: &Action, cfg: &PRMOracleConfig) -> PRMVerdict {
    let state = replay_context(task, x, u32::MAX);
    let next = transition(task, &state, candidate);
    let before = planner.distance(task, &state);
    let after = planner.distance(task, &next);
    let repeats = x.history.iter().any(|h| h.action == *candidate);
    let base = oracle_base_verdict(before, after, repeats, cfg.strictness);

    let mut verdict = base;
    if cfg.noise_rate > 0.0 {
        let mut rng = rng_for(cfg.seed, &[hash_str(&x.fingerprint), hash_str(&candidate.to_json())]);
        if rng.gen_bool(cfg.noise_rate) {
            verdict = !verdict;
        }
    }
    let fmt = |d: Distance| d.map_or("unreachable".to_string(), |d| d.to_string());
    let reflection = if repeats {
        "The action repeats an earlier step.".to_string()
    } else {
        format!("Remaining distance {} -> {}.", fmt(before), fmt(after))
    };
    PRMVerdict {
        is_correct: verdict,
        reflection,
    }
}

pub const PRM_PROMPT_TEMPLATE: &str = include_str!("prm_prompt.txt");

/// Rendered grading request for an external PRM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrmRequest {
    pub text: String,
}

fn history_block(x: &StateContext) -> String {
    if x.history.is_empty() {
        return "None".to_string();
    }
    x.history
        .iter()
        .enumerate()
        .map(|(i, h)| format!("Step {}: {}", i + 1, h.action.to_json()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fills the grading template. The observation is attached after the
/// template with its marker at the candidate's target point; drags are
/// marked at their start point.
pub fn build_prm_request(x: &StateContext, thought: &str, candidate: &Action) -> PrmRequest {
    let action_code = serialize_output(&StructuredOutput {
        think: thought.to_string(),
        answer: candidate.clone(),
    });
    let body = PRM_PROMPT_TEMPLATE
        .replace("{instruction}", &x.instruction)
        .replace("{history_actions}", &history_block(x))
        .replace("{step_index}", &x.step_index().to_string())
        .replace("{action_code}", &action_code);
    let annotated = x.observation.annotated(candidate.point_2d);
    let obs = serde_json::to_string(&annotated).expect("observation serialization is infallible");
    PrmRequest {
        text: format!("{}\n\n<annotated_observation>\n{obs}\n</annotated_observation>\n", body.trim_end()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrmError {
    #[error("malformed PRM response: {0}")]
    MalformedResponse(String),
    #[error("PRM transport failure: {0}")]
    Transport(String),
}

#[derive(Deserialize)]
struct RawVerdict {
    is_correct: bool,
    reflection: String,
}

fn verdict_from(value: serde_json::Value) -> Result<PRMVerdict, PrmError> {
    let raw: RawVerdict = serde_json::from_value(value).map_err(|e| PrmError::MalformedResponse(e.to_string()))?;
    if raw.reflection.trim().is_empty() {
        return Err(PrmError::MalformedResponse("empty reflection".into()));
    }
    Ok(PRMVerdict {
        is_correct: raw.is_correct,
        reflection: raw.reflection,
    })
}

/// Reads the first fenced block, or failing that the first JSON object,
/// from a grader's reply.
pub fn parse_prm_response(text: &str) -> Result<PRMVerdict, PrmError> {
    if let Some(start) = text.find("```") {
        let rest = &text[start + 3..];
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        if let Some(end) = rest.find("```") {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(rest[..end].trim()) {
                return verdict_from(v);
            }
        }
    }
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = stream.next() {
            if v.is_object() {
                return verdict_from(v);
            }
        }
    }
    Err(PrmError::MalformedResponse("no JSON block found".into()))
}

/// Environment variable overriding the configured PRM endpoint.
pub const PRM_ENDPOINT_ENV: &str = "PROCUA_PRM_ENDPOINT";

/// HTTP client for an external grader: one POST of the rendered prompt,
/// one retry on failure.
#[derive(Debug, Clone)]
pub struct ExternalPrm {
    endpoint: String,
    agent: ureq::Agent,
}

impl ExternalPrm {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        ExternalPrm {
            endpoint: endpoint.into(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_once(&self, body: &str) -> Result<String, PrmError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "text/plain; charset=utf-8")
            .send(body)
            .map_err(|e| PrmError::Transport(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| PrmError::Transport(e.to_string()))
    }

    pub fn grade(&self, request: &PrmRequest) -> Result<PRMVerdict, PrmError> {
        let reply = match self.post_once(&request.text) {
            Ok(r) => r,
            Err(first) => {
                log::debug!("PRM request failed ({first}), retrying");
                self.post_once(&request.text)?
            }
        };
        parse_prm_response(&reply)
    }
}

/// Reward source used during optimization.
#[derive(Debug, Clone)]
pub enum Grader {
    Oracle(PRMOracleConfig),
    External(ExternalPrm),
}

impl Grader {
    /// Binary reward for one candidate. External failures score 0 and are
    /// logged.
    pub fn reward(&self, task: &Task, planner: &Planner, x: &StateContext, thought: &str, candidate: &Action) -> f64 {
        match self {
            Grader::Oracle(cfg) => oracle_prm(task, planner, x, candidate, cfg).reward(),
            Grader::External(client) => match client.grade(&build_prm_request(x, thought, candidate)) {
                Ok(v) => v.reward(),
                Err(e) => {
                    log::warn!("skipping PRM grade for {}: {e}", x.fingerprint);
                    0.0
                }
            },
        }
    }
}
