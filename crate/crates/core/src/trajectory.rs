//! Step contexts, rollout logs, the on-policy state dataset and its
//! line-delimited file format.
//!
//! A dataset file starts with a header line
//! `procua-dstate v1 iteration=<k> filter=<name>` followed by one JSON
//! record per line.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{Action, StructuredOutput};
use crate::error::{Error, Result};
use crate::synthweb::{Observation, Rect};

pub const DSTATE_MAGIC: &str = "procua-dstate";
pub const TRAJECTORY_MAGIC: &str = "procua-trajectories";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub thought: String,
    pub action: Action,
}

/// What the agent sees at step n: instruction, all earlier thought/action
/// pairs and only the most recent observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateContext {
    pub instruction: String,
    pub history: Vec<HistoryStep>,
    pub observation: Observation,
    pub fingerprint: String,
}

pub fn fingerprint_of(instruction: &str, history: &[HistoryStep], observation: &Observation) -> String {
    let canonical = serde_json::to_string(&(instruction, history, observation))
        .expect("context serialization is infallible");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl StateContext {
    pub fn new(instruction: &str, history: Vec<HistoryStep>, observation: Observation) -> Self {
        let fingerprint = fingerprint_of(instruction, &history, &observation);
        StateContext {
            instruction: instruction.to_string(),
            history,
            observation,
            fingerprint,
        }
    }

    /// Context for the next step after executing `action` with `thought`.
    pub fn advance(&self, thought: String, action: Action, next: Observation) -> Self {
        let mut history = self.history.clone();
        history.push(HistoryStep { thought, action });
        StateContext::new(&self.instruction, history, next)
    }

    /// 1-based step index of this context.
    pub fn step_index(&self) -> usize {
        self.history.len() + 1
    }

    pub fn fingerprint_is_valid(&self) -> bool {
        self.fingerprint == fingerprint_of(&self.instruction, &self.history, &self.observation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub context: StateContext,
    pub output: StructuredOutput,
    pub next_observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory_id: String,
    pub task_id: String,
    pub steps: Vec<TrajectoryStep>,
    /// Ended through `finished` within the budget.
    pub finished: bool,
    pub success: bool,
    pub rollout_temperature: f64,
    pub policy_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Every step of every trajectory.
    All,
    /// Steps of trajectories that ended with `finished`.
    Finished,
    /// Steps of successful trajectories, with the executed action kept as
    /// the reference.
    Successful,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::All => "all",
            FilterKind::Finished => "finished",
            FilterKind::Successful => "successful",
        })
    }
}

impl FromStr for FilterKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(FilterKind::All),
            "finished" => Ok(FilterKind::Finished),
            "successful" => Ok(FilterKind::Successful),
            other => Err(format!("unknown filter {other:?}")),
        }
    }
}

/// Reference action taken from a successful trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenRef {
    pub action: Action,
    /// Box of the element under the action's point, for grounded actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub trajectory_id: String,
    pub task_id: String,
    /// 0-based position of the step in its trajectory.
    pub step_index: usize,
    pub context: StateContext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<GoldenRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDataset {
    pub iteration: u32,
    pub filter: FilterKind,
    pub entries: Vec<DatasetEntry>,
}

impl StateDataset {
    pub fn new(iteration: u32, filter: FilterKind) -> Self {
        StateDataset {
            iteration,
            filter,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(&mut self, entries: impl IntoIterator<Item = DatasetEntry>) {
        self.entries.extend(entries);
    }

    /// Builds the dataset from the trajectories the filter keeps, in input
    /// order.
    pub fn from_trajectories(trajectories: &[TrajectoryRecord], filter: FilterKind, iteration: u32) -> Self {
        let mut ds = StateDataset::new(iteration, filter);
        for t in trajectories {
            let keep = match filter {
                FilterKind::All => true,
                FilterKind::Finished => t.finished,
                FilterKind::Successful => t.success,
            };
            if !keep {
                continue;
            }
            ds.append(t.steps.iter().enumerate().map(|(i, s)| DatasetEntry {
                trajectory_id: t.trajectory_id.clone(),
                task_id: t.task_id.clone(),
                step_index: i,
                context: s.context.clone(),
                golden: (filter == FilterKind::Successful).then(|| GoldenRef {
                    action: s.output.answer.clone(),
                    bbox: s
                        .output
                        .answer
                        .point_2d
                        .filter(|_| s.output.answer.action_type.is_grounded())
                        .and_then(|p| s.context.observation.hit_test(p))
                        .map(|e| e.bbox),
                }),
            }));
        }
        ds
    }

    pub fn header(&self) -> String {
        format!(
            "{DSTATE_MAGIC} v{FORMAT_VERSION} iteration={} filter={}",
            self.iteration, self.filter
        )
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.header()).map_err(io)?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("entry serialization is infallible");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(corrupt(1, "missing header")),
        };
        let (iteration, filter) = parse_dstate_header(&header)?;
        let mut ds = StateDataset::new(iteration, filter);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: DatasetEntry =
                serde_json::from_str(&line).map_err(|e| corrupt(line_no, &e.to_string()))?;
            if !entry.context.fingerprint_is_valid() {
                return Err(corrupt(line_no, "fingerprint does not match context"));
            }
            ds.entries.push(entry);
        }
        Ok(ds)
    }
}

fn corrupt(line: usize, reason: &str) -> Error {
    Error::CorruptRecord {
        line,
        reason: reason.to_string(),
    }
}

fn check_magic_and_version<'a>(header: &'a str, magic: &str) -> Result<Vec<&'a str>> {
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.first() != Some(&magic) {
        return Err(corrupt(1, &format!("expected `{magic}` header")));
    }
    let version = tokens
        .get(1)
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| corrupt(1, "missing format version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: format!("v{FORMAT_VERSION}"),
            found: format!("v{version}"),
        });
    }
    Ok(tokens[2..].to_vec())
}

fn header_value<'a>(tokens: &[&'a str], key: &str) -> Result<&'a str> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| corrupt(1, &format!("header lacks {key}=")))
}

fn parse_dstate_header(header: &str) -> Result<(u32, FilterKind)> {
    let tokens = check_magic_and_version(header, DSTATE_MAGIC)?;
    let iteration = header_value(&tokens, "iteration")?
        .parse()
        .map_err(|_| corrupt(1, "bad iteration"))?;
    let filter = header_value(&tokens, "filter")?
        .parse()
        .map_err(|e: String| corrupt(1, &e))?;
    Ok((iteration, filter))
}

/// Steps kept by `filter_finished`: every step of every finished trajectory.
pub fn filter_finished(trajectories: &[TrajectoryRecord], iteration: u32) -> StateDataset {
    StateDataset::from_trajectories(trajectories, FilterKind::Finished, iteration)
}

/// Steps of successful trajectories, each with its executed action as the
/// golden reference.
pub fn filter_successful(trajectories: &[TrajectoryRecord], iteration: u32) -> StateDataset {
    StateDataset::from_trajectories(trajectories, FilterKind::Successful, iteration)
}

pub fn save_trajectories(trajectories: &[TrajectoryRecord], iteration: u32, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{TRAJECTORY_MAGIC} v{FORMAT_VERSION} iteration={iteration}").map_err(io)?;
    for t in trajectories {
        writeln!(w, "{}", serde_json::to_string(t).expect("serializable")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_trajectories(path: &Path) -> Result<(u32, Vec<TrajectoryRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let tokens = check_magic_and_version(lines.next().unwrap_or_default(), TRAJECTORY_MAGIC)?;
    let iteration = header_value(&tokens, "iteration")?
        .parse()
        .map_err(|_| corrupt(1, "bad iteration"))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| corrupt(i + 2, &e.to_string()))?);
    }
    Ok((iteration, out))
}
