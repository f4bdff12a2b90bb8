use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_tasks, SiteError, SiteParams, Task};
use crate::error::{Error, Result};

pub const SUITE_FORMAT: &str = "procua-tasks";
pub const SUITE_VERSION: u32 = 1;

/// A versioned, self-describing set of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub params: SiteParams,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn generate(seed: u64, count: usize, params: SiteParams, prefix: &str) -> std::result::Result<Self, SiteError> {
        Ok(TaskSuite {
            format: SUITE_FORMAT.into(),
            version: SUITE_VERSION,
            seed,
            params,
            tasks: generate_tasks(seed, count, &params, prefix)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serialization is infallible")
    }

    /// Content hash identifying the suite.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_json().as_bytes());
        h.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let suite: TaskSuite = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptRecord { line: e.line(), reason: e.to_string() })?;
        if suite.format != SUITE_FORMAT || suite.version != SUITE_VERSION {
            return Err(Error::VersionMismatch {
                expected: format!("{SUITE_FORMAT} v{SUITE_VERSION}"),
                found: format!("{} v{}", suite.format, suite.version),
            });
        }
        Ok(suite)
    }
}
