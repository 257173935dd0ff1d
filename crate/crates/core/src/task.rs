use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three downstream tasks, in the fixed training order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// 5-class single-sentence sentiment.
    Sst,
    /// Binary sentence-pair paraphrase detection.
    Para,
    /// Real-valued sentence-pair similarity in [0, 5].
    Sts,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Sst, TaskKind::Para, TaskKind::Sts];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Sst => "sst",
            TaskKind::Para => "para",
            TaskKind::Sts => "sts",
        }
    }

    pub fn is_pair(self) -> bool {
        !matches!(self, TaskKind::Sst)
    }

    pub fn is_regression(self) -> bool {
        matches!(self, TaskKind::Sts)
    }

    /// Output width of the linear head for this task.
    pub fn head_arity(self) -> usize {
        match self {
            TaskKind::Sst => 5,
            TaskKind::Para | TaskKind::Sts => 1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            TaskKind::Sst => 0,
            TaskKind::Para => 1,
            TaskKind::Sts => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sst" => Ok(TaskKind::Sst),
            "para" => Ok(TaskKind::Para),
            "sts" => Ok(TaskKind::Sts),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected sst, para or sts)"
            ))),
        }
    }
}

/// Parse a comma-separated task list; the result is sorted into training order.
pub fn parse_task_list(s: &str) -> Result<Vec<TaskKind>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part.eq_ignore_ascii_case("none") {
            continue;
        }
        let t: TaskKind = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out.sort();
    Ok(out)
}

pub fn format_task_list(tasks: &[TaskKind]) -> String {
    if tasks.is_empty() {
        return "none".to_string();
    }
    tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
}
