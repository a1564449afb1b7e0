//! Test-suite execution, report parsing and regression diffs.

mod parse;
mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use parse::{parse_junit, parse_line_protocol, ParsedReport};
pub use run::run_suite;

pub const BASELINE_FILE: &str = "baseline.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
    Skip,
}

impl Outcome {
    pub fn parse(word: &str) -> Option<Outcome> {
        match word.to_ascii_lowercase().as_str() {
            "pass" | "passed" | "ok" => Some(Outcome::Pass),
            "fail" | "failed" | "failure" => Some(Outcome::Fail),
            "error" | "errored" => Some(Outcome::Error),
            "skip" | "skipped" => Some(Outcome::Skip),
            _ => None,
        }
    }

    /// Errors count as failures for regression purposes.
    pub fn is_failing(self) -> bool {
        matches!(self, Outcome::Fail | Outcome::Error)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    LineProtocol,
    JunitXml,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestRunnerConfig {
    /// argv; `{workspace}` in any element is replaced by the workspace path.
    pub command: Vec<String>,
    pub report_format: ReportFormat,
    /// For JUnit: report file to read after the run, relative to the
    /// workspace unless absolute. Without it the XML is read from stdout.
    pub report_path: Option<String>,
    pub timeout_secs: u64,
    pub env: BTreeMap<String, String>,
}

impl Default for TestRunnerConfig {
    fn default() -> Self {
        TestRunnerConfig {
            command: Vec::new(),
            report_format: ReportFormat::LineProtocol,
            report_path: None,
            timeout_secs: 600,
            env: BTreeMap::new(),
        }
    }
}

impl TestRunnerConfig {
    pub fn validate(&self) -> Result<(), ValidatorError> {
        if self.command.is_empty() || self.command[0].trim().is_empty() {
            return Err(ValidatorError::Config("test command is empty".into()));
        }
        if self.timeout_secs == 0 {
            return Err(ValidatorError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub outcomes: BTreeMap<String, Outcome>,
    /// Failure text per test, when the runner reports one.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub messages: BTreeMap<String, String>,
    pub wall_time: f64,
    /// Runner timed out, crashed, or produced unparseable output.
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    /// Tail of the runner's combined output.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub output_tail: String,
}

impl TestReport {
    pub fn from_outcomes<I, S>(outcomes: I) -> Self
    where
        I: IntoIterator<Item = (S, Outcome)>,
        S: Into<String>,
    {
        TestReport {
            outcomes: outcomes.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            ..TestReport::default()
        }
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.outcomes.values().filter(|o| **o == outcome).count()
    }

    pub fn write(&self, path: &Path) -> Result<(), ValidatorError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n")
            .map_err(|e| ValidatorError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, ValidatorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ValidatorError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ValidatorError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionDiff {
    /// Baseline pass, now fail or error.
    pub new_failures: BTreeSet<String>,
    /// Baseline fail or error, now pass.
    pub new_passes: BTreeSet<String>,
    /// Failing on both sides.
    pub still_failing: BTreeSet<String>,
    /// In the baseline but missing afterwards, or pass turned skip.
    pub vanished: BTreeSet<String>,
    /// The part of `vanished` that passed at baseline.
    pub lost_passes: BTreeSet<String>,
}

impl RegressionDiff {
    /// Whether the candidate must be eliminated: any pass turned fail, and
    /// any baseline pass that can no longer be observed.
    pub fn is_regression(&self) -> bool {
        !self.new_failures.is_empty() || !self.lost_passes.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.new_failures.is_empty()
            && self.new_passes.is_empty()
            && self.still_failing.is_empty()
            && self.vanished.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ValidatorError {
    #[error("test runner configuration: {0}")]
    Config(String),
    #[error("test command `{0}` not found")]
    CommandNotFound(String),
    #[error("report is truncated: {0}")]
    Truncated(String),
    #[error("baseline unusable: {0}")]
    BaselineTruncated(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Classifies every baseline test against `post`. Tests new in `post` and
/// skips at baseline are neutral.
pub fn diff_reports(
    baseline: &TestReport,
    post: &TestReport,
) -> Result<RegressionDiff, ValidatorError> {
    for (name, r) in [("baseline", baseline), ("post", post)] {
        if r.truncated {
            return Err(ValidatorError::Truncated(format!(
                "{name}: {}",
                r.diagnostic.as_deref().unwrap_or("runner did not finish")
            )));
        }
    }
    let mut diff = RegressionDiff::default();
    for (id, before) in &baseline.outcomes {
        let after = post.outcomes.get(id).copied();
        match (before, after) {
            (_, None) => {
                diff.vanished.insert(id.clone());
                if *before == Outcome::Pass {
                    diff.lost_passes.insert(id.clone());
                }
            }
            (Outcome::Pass, Some(a)) if a.is_failing() => {
                diff.new_failures.insert(id.clone());
            }
            (Outcome::Pass, Some(Outcome::Skip)) => {
                diff.vanished.insert(id.clone());
                diff.lost_passes.insert(id.clone());
            }
            (b, Some(Outcome::Pass)) if b.is_failing() => {
                diff.new_passes.insert(id.clone());
            }
            (b, Some(a)) if b.is_failing() && a.is_failing() => {
                diff.still_failing.insert(id.clone());
            }
            _ => {}
        }
    }
    Ok(diff)
}

/// Runs the suite in `checkout` and persists it as the baseline. A
/// truncated baseline cannot support elimination and is an error.
pub fn record_baseline(
    checkout: &Path,
    config: &TestRunnerConfig,
    out_dir: &Path,
) -> Result<TestReport, ValidatorError> {
    let report = run_suite(checkout, config)?;
    fs::create_dir_all(out_dir).map_err(|e| ValidatorError::Io(e.to_string()))?;
    report.write(&out_dir.join(BASELINE_FILE))?;
    if report.truncated {
        return Err(ValidatorError::BaselineTruncated(
            report
                .diagnostic
                .clone()
                .unwrap_or_else(|| "runner did not finish".into()),
        ));
    }
    Ok(report)
}
