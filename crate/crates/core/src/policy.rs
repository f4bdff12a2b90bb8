//! Log-linear policy over the environment's enumerated candidate actions.
//!
//! `π_θ(a_j | x) ∝ exp(⟨θ, φ(x, a_j)⟩ / T)`. Log-probabilities, score
//! functions and KL divergences are exact over the finite support.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{thought_for, Action, ActionType, VIEWPORT_HEIGHT};
use crate::error::{Error, Result};
use crate::synthweb::ElementKind;
use crate::trajectory::StateContext;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("action is not among the state's candidates")]
    CandidateNotInSupport,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be positive and finite")]
    BadTemperature,
}

/// Feature layout. Indices 0..11 are the action-type one-hot.
pub mod feat {
    pub const TYPE_ONE_HOT: usize = 0;
    pub const CLICK_LABEL_OVERLAP: usize = 11;
    pub const CLICK_TEXTFIELD: usize = 12;
    pub const CLICK_FOCUSED_FIELD: usize = 13;
    /// Submit-button click scaled by how well the filled field matches.
    pub const CLICK_BUTTON_FORM_FILLED: usize = 14;
    pub const CLICK_HOME_ANCHOR: usize = 15;
    pub const TYPE_VALUE_OVERLAP: usize = 16;
    pub const FINISH_LABEL_OVERLAP: usize = 17;
    pub const FINISH_TITLE_OVERLAP: usize = 18;
    pub const FINISH_LABEL_X_TITLE: usize = 19;
    pub const FINISH_AFTER_TYPING: usize = 20;
    pub const REPEATS_HISTORY: usize = 21;
    pub const REPEATS_LAST: usize = 22;
    pub const GOBACK_OFF_TOPIC: usize = 23;
    pub const FINISH_HISTORY_LEN: usize = 24;
    pub const CLICK_SELF_LOOP: usize = 25;
    pub const CLICK_BUTTON_FORM_EMPTY: usize = 26;
    /// Vertical position of the targeted element, in viewport units.
    pub const TARGET_ROW: usize = 27;
    pub const TYPE_VALUE_CHAR_SIM: usize = 28;
    /// Typing into a field whose current content already matches.
    pub const TYPE_OVERWRITES_MATCH: usize = 29;
    pub const DIM: usize = 30;
}

pub const FEATURE_DIM: usize = feat::DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.0.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Fraction of `label`'s words that also occur in the instruction.
fn overlap(label: &str, instruction: &HashSet<String>) -> f64 {
    let ws = words(label);
    if ws.is_empty() {
        return 0.0;
    }
    ws.iter().filter(|w| instruction.contains(*w)).count() as f64 / ws.len() as f64
}

fn bigrams(s: &str) -> Vec<(char, char)> {
    let cs: Vec<char> = s.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect();
    cs.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Share of `value`'s character bigrams present in the instruction.
fn char_similarity(value: &str, instruction: &str) -> f64 {
    let v = bigrams(value);
    if v.is_empty() {
        return 0.0;
    }
    let pool: HashSet<(char, char)> = bigrams(instruction).into_iter().collect();
    v.iter().filter(|b| pool.contains(b)).count() as f64 / v.len() as f64
}

/// Deterministic features of a candidate action in a step context. They
/// read only what the agent sees: instruction, history and the current
/// observation.
pub fn featurize(ctx: &StateContext, action: &Action) -> FeatureVector {
    use feat::*;
    let mut f = vec![0.0; DIM];
    f[TYPE_ONE_HOT + action.action_type.index()] = 1.0;

    let instr: HashSet<String> = words(&ctx.instruction).into_iter().collect();
    let obs = &ctx.observation;
    let title_overlap = overlap(&obs.title, &instr);
    let page_relevance = obs
        .elements
        .iter()
        .filter(|e| e.kind == ElementKind::Text)
        .map(|e| overlap(&e.label, &instr))
        .fold(title_overlap, f64::max);
    let field_match = |e: &crate::synthweb::ObservedElement| e.content.as_deref().map_or(0.0, |c| overlap(c, &instr));
    let any_field_filled = obs
        .elements
        .iter()
        .any(|e| e.kind == ElementKind::Textfield && e.content.as_deref().is_some_and(|c| !c.is_empty()));
    let best_field_match = obs
        .elements
        .iter()
        .filter(|e| e.kind == ElementKind::Textfield)
        .map(field_match)
        .fold(0.0, f64::max);
    let has_field = obs.elements.iter().any(|e| e.kind == ElementKind::Textfield);

    match action.action_type {
        ActionType::LeftClick | ActionType::DoubleClick => {
            if let Some(p) = action.point_2d {
                f[TARGET_ROW] = p.y / VIEWPORT_HEIGHT;
            }
            if let Some(e) = action.point_2d.and_then(|p| obs.hit_test(p)) {
                f[CLICK_LABEL_OVERLAP] = overlap(&e.label, &instr);
                match e.kind {
                    ElementKind::Textfield => {
                        f[CLICK_TEXTFIELD] = 1.0;
                        if obs.focused == Some(e.element_id) {
                            f[CLICK_FOCUSED_FIELD] = 1.0;
                        }
                    }
                    ElementKind::Button if has_field => {
                        if any_field_filled {
                            f[CLICK_BUTTON_FORM_FILLED] = best_field_match;
                        } else {
                            f[CLICK_BUTTON_FORM_EMPTY] = 1.0;
                        }
                    }
                    ElementKind::BackAnchor => f[CLICK_HOME_ANCHOR] = 1.0,
                    _ => {}
                }
                if e.target_page == Some(obs.page_id) {
                    f[CLICK_SELF_LOOP] = 1.0;
                }
            }
        }
        ActionType::TypeText => {
            let value = action.value.as_deref().unwrap_or_default();
            f[TYPE_VALUE_OVERLAP] = overlap(value, &instr);
            f[TYPE_VALUE_CHAR_SIM] = char_similarity(value, &ctx.instruction);
            if let Some(field) = obs.focused.and_then(|id| obs.element(id)) {
                f[TYPE_OVERWRITES_MATCH] = field_match(field);
            }
        }
        ActionType::Finished => {
            let answer = action.value.as_deref().unwrap_or_default();
            let source = obs
                .elements
                .iter()
                .find(|e| e.kind == ElementKind::Text && e.content.as_deref() == Some(answer));
            let label_overlap = source.map_or(0.0, |e| overlap(&e.label, &instr));
            if let Some(e) = source {
                f[TARGET_ROW] = e.bbox.center().y / VIEWPORT_HEIGHT;
            }
            f[FINISH_LABEL_OVERLAP] = label_overlap;
            f[FINISH_TITLE_OVERLAP] = title_overlap;
            f[FINISH_LABEL_X_TITLE] = label_overlap * title_overlap;
            if ctx.history.iter().any(|h| h.action.action_type == ActionType::TypeText) {
                f[FINISH_AFTER_TYPING] = 1.0;
            }
            f[FINISH_HISTORY_LEN] = (ctx.history.len() as f64 / 20.0).min(1.0);
        }
        ActionType::GoBack => f[GOBACK_OFF_TOPIC] = 1.0 - page_relevance,
        _ => {}
    }

    if ctx.history.iter().any(|h| h.action == *action) {
        f[REPEATS_HISTORY] = 1.0;
    }
    if ctx.history.last().is_some_and(|h| h.action == *action) {
        f[REPEATS_LAST] = 1.0;
    }
    FeatureVector(f)
}

/// A state's candidate actions together with their feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub actions: Vec<Action>,
    pub features: Vec<FeatureVector>,
}

impl CandidateSet {
    pub fn new(ctx: &StateContext, actions: Vec<Action>) -> Self {
        let features = actions.iter().map(|a| featurize(ctx, a)).collect();
        CandidateSet { actions, features }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn index_of(&self, action: &Action) -> Result<usize, PolicyError> {
        self.actions
            .iter()
            .position(|a| a == action)
            .ok_or(PolicyError::CandidateNotInSupport)
    }

    fn check(&self, theta: &PolicyParams) -> Result<(), PolicyError> {
        if self.is_empty() {
            return Err(PolicyError::EmptyCandidates);
        }
        let found = self.features[0].0.len();
        if found != theta.dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: theta.dim(),
                found,
            });
        }
        Ok(())
    }
}

/// Policy weights. Frozen copies serve as the sampling-time and reference
/// policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    /// Zero weights: the uniform base policy.
    pub fn zeros(dim: usize) -> Self {
        PolicyParams {
            weights: vec![0.0; dim],
            version: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

pub fn logits(theta: &PolicyParams, set: &CandidateSet) -> Vec<f64> {
    set.features.iter().map(|f| f.dot(&theta.weights)).collect()
}

/// Log-softmax of `logits / temperature` with max subtraction.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - lse).collect()
}

fn check_temperature(t: f64) -> Result<(), PolicyError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::BadTemperature)
    }
}

pub fn log_distribution(theta: &PolicyParams, set: &CandidateSet, temperature: f64) -> Result<Vec<f64>, PolicyError> {
    set.check(theta)?;
    check_temperature(temperature)?;
    Ok(log_softmax(&logits(theta, set), temperature))
}

pub fn distribution(theta: &PolicyParams, set: &CandidateSet, temperature: f64) -> Result<Vec<f64>, PolicyError> {
    Ok(log_distribution(theta, set, temperature)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Temperature-1 log-probability of `action`.
pub fn logprob(theta: &PolicyParams, set: &CandidateSet, action: &Action) -> Result<f64, PolicyError> {
    let i = set.index_of(action)?;
    Ok(log_distribution(theta, set, 1.0)?[i])
}

/// Mean feature vector under the temperature-1 policy.
pub fn expected_features(probs: &[f64], set: &CandidateSet) -> Vec<f64> {
    let dim = set.features[0].0.len();
    let mut mean = vec![0.0; dim];
    for (p, f) in probs.iter().zip(&set.features) {
        for (m, x) in mean.iter_mut().zip(&f.0) {
            *m += p * x;
        }
    }
    mean
}

/// `∇_θ log π_θ(a|x) = φ(x,a) − E_π[φ]` at temperature 1, by candidate index.
pub fn grad_logprob_index(theta: &PolicyParams, set: &CandidateSet, i: usize) -> Result<Vec<f64>, PolicyError> {
    let probs = distribution(theta, set, 1.0)?;
    let mean = expected_features(&probs, set);
    Ok(set.features[i].0.iter().zip(&mean).map(|(f, m)| f - m).collect())
}

pub fn grad_logprob(theta: &PolicyParams, set: &CandidateSet, action: &Action) -> Result<Vec<f64>, PolicyError> {
    grad_logprob_index(theta, set, set.index_of(action)?)
}

/// Exact `KL(π_θ ‖ π_ref)` over the candidate support at temperature 1.
pub fn kl(theta: &PolicyParams, reference: &PolicyParams, set: &CandidateSet) -> Result<f64, PolicyError> {
    let lp = log_distribution(theta, set, 1.0)?;
    let lq = log_distribution(reference, set, 1.0)?;
    let v: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
    Ok(v.max(0.0))
}

/// `∇_θ KL(π_θ ‖ π_ref) = Σ_j p_j (log p_j − log q_j)(φ_j − E_p[φ])`.
pub fn grad_kl(theta: &PolicyParams, reference: &PolicyParams, set: &CandidateSet) -> Result<Vec<f64>, PolicyError> {
    let lp = log_distribution(theta, set, 1.0)?;
    let lq = log_distribution(reference, set, 1.0)?;
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mean = expected_features(&probs, set);
    let mut g = vec![0.0; theta.dim()];
    for j in 0..set.len() {
        let c = probs[j] * (lp[j] - lq[j]);
        for (gk, (f, m)) in g.iter_mut().zip(set.features[j].0.iter().zip(&mean)) {
            *gk += c * (f - m);
        }
    }
    Ok(g)
}

/// Most probable candidate; ties go to the lowest index.
pub fn greedy_index(theta: &PolicyParams, set: &CandidateSet) -> Result<usize, PolicyError> {
    set.check(theta)?;
    let ls = logits(theta, set);
    let mut best = 0;
    for (i, l) in ls.iter().enumerate() {
        if *l > ls[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One sampled thought/action pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSample {
    pub thought: String,
    pub action: Action,
    /// Index into the state's candidate set.
    pub index: usize,
    /// Log-probability at the sampling temperature.
    pub logprob: f64,
    /// Log-probability at temperature 1.
    pub logprob_t1: f64,
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `g` independent draws with replacement at `temperature`.
pub fn sample_group<R: Rng + ?Sized>(
    theta: &PolicyParams,
    set: &CandidateSet,
    temperature: f64,
    g: usize,
    rng: &mut R,
) -> Result<Vec<CandidateSample>, PolicyError> {
    let lt = log_distribution(theta, set, temperature)?;
    let l1 = log_distribution(theta, set, 1.0)?;
    let probs: Vec<f64> = lt.iter().map(|l| l.exp()).collect();
    Ok((0..g)
        .map(|_| {
            let i = sample_index(&probs, rng);
            CandidateSample {
                thought: thought_for(&set.actions[i]),
                action: set.actions[i].clone(),
                index: i,
                logprob: lt[i],
                logprob_t1: l1[i],
            }
        })
        .collect())
}

pub const CHECKPOINT_FORMAT: &str = "procua-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    policy_version: u64,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn to_checkpoint_text(&self) -> String {
        let c = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            policy_version: self.version,
            weights: self.weights.clone(),
        };
        serde_json::to_string_pretty(&c).expect("checkpoint serialization is infallible") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
            line: e.line(),
            reason: e.to_string(),
        })?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"),
                found: format!("{} v{}", c.format, c.version),
            });
        }
        Ok(PolicyParams {
            weights: c.weights,
            version: c.policy_version,
        })
    }
}
