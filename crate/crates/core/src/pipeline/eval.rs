use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::editor::{apply_patch, split_patch};
use crate::indexer::PythonParser;
use crate::llm::{Gateway, LlmError};
use crate::validator::{run_suite, Outcome};
use crate::workspace::create_scratch;

use super::config::RunConfig;
use super::index::build_index;
use super::issue::{strip_hints, Issue};
use super::run::{candidate_files, run_fix, FailureKind, FixInputs, CHOSEN_PATCH};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub instance_id: String,
    /// Checkout path; relative paths are resolved against the instances file.
    pub repo: PathBuf,
    pub problem_statement: String,
    pub gold_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_test_patch: Option<String>,
    /// Tests expected to go from failing to passing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub designated_tests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub candidates: Vec<String>,
    pub top1_hit: bool,
    pub top5_hit: bool,
    /// Whole suite passes with the chosen patch and the test patch applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<bool>,
    /// Every designated test passes with both patches applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_designated: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: Vec<InstanceResult>,
    pub evaluated: usize,
    pub errored: usize,
    pub top1_pct: Option<f64>,
    pub top5_pct: Option<f64>,
    pub resolved_pct: Option<f64>,
    pub resolved_designated_pct: Option<f64>,
}

/// Whether any gold file appears among the first `k` candidates.
pub fn topk_hit(candidates: &[String], gold: &[String], k: usize) -> bool {
    candidates.iter().take(k).any(|c| gold.contains(c))
}

fn pct(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

impl EvalReport {
    pub fn from_results(instances: Vec<InstanceResult>) -> Self {
        let scored: Vec<&InstanceResult> = instances.iter().filter(|r| r.error.is_none()).collect();
        let n = scored.len();
        let hits = |f: &dyn Fn(&InstanceResult) -> bool| scored.iter().filter(|r| f(r)).count();
        let fixed: Vec<bool> = scored.iter().filter_map(|r| r.resolved).collect();
        let designated: Vec<bool> = scored
            .iter()
            .filter_map(|r| r.resolved_designated)
            .collect();
        EvalReport {
            evaluated: n,
            errored: instances.len() - n,
            top1_pct: pct(hits(&|r| r.top1_hit), n),
            top5_pct: pct(hits(&|r| r.top5_hit), n),
            resolved_pct: pct(fixed.iter().filter(|b| **b).count(), fixed.len()),
            resolved_designated_pct: pct(
                designated.iter().filter(|b| **b).count(),
                designated.len(),
            ),
            instances,
        }
    }
}

/// Maps one benchmark record (`instance_id`, `patch`, `test_patch`,
/// `FAIL_TO_PASS`, ...) to an instance whose checkout is
/// `checkouts/<instance_id>`.
pub fn from_swebench(record: &Value, checkouts: &Path) -> Result<EvalInstance, String> {
    let field = |k: &str| record.get(k).and_then(Value::as_str);
    let id = field("instance_id").ok_or("record has no instance_id")?;
    let problem =
        field("problem_statement").ok_or_else(|| format!("{id}: no problem_statement"))?;
    let patch = field("patch").ok_or_else(|| format!("{id}: no patch"))?;
    let mut gold: Vec<String> = split_patch(patch)
        .map_err(|e| format!("{id}: {e}"))?
        .iter()
        .map(|p| p.path().to_string())
        .collect();
    gold.dedup();
    let designated = match record.get("FAIL_TO_PASS") {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(String::from)
            .collect(),
        Some(Value::String(s)) => serde_json::from_str::<Vec<String>>(s)
            .map_err(|e| format!("{id}: FAIL_TO_PASS: {e}"))?,
        _ => Vec::new(),
    };
    Ok(EvalInstance {
        instance_id: id.to_string(),
        repo: checkouts.join(id),
        problem_statement: problem.to_string(),
        gold_files: gold,
        gold_test_patch: field("test_patch")
            .map(String::from)
            .filter(|p| !p.trim().is_empty()),
        designated_tests: designated,
    })
}

/// Reads a JSON-lines file of instances. Records without `gold_files` are
/// treated as benchmark records. Hint fields are dropped on the way in.
pub fn load_instances(path: &Path, checkouts: Option<&Path>) -> Result<Vec<EvalInstance>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let checkouts = checkouts.unwrap_or(base);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("{} line {}", path.display(), i + 1);
        let mut record: Value = serde_json::from_str(line).map_err(|e| format!("{where_}: {e}"))?;
        strip_hints(&mut record);
        let mut instance = if record.get("gold_files").is_some() {
            serde_json::from_value::<EvalInstance>(record).map_err(|e| format!("{where_}: {e}"))?
        } else {
            from_swebench(&record, checkouts).map_err(|e| format!("{where_}: {e}"))?
        };
        if instance.repo.is_relative() {
            instance.repo = base.join(&instance.repo);
        }
        if instance.gold_files.is_empty() {
            return Err(format!("{where_}: gold_files is empty"));
        }
        out.push(instance);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Candidate files only.
    Localize,
    /// Full repair per instance, then scoring of the chosen patch.
    Fix,
}

fn errored(instance: &EvalInstance, message: String) -> InstanceResult {
    InstanceResult {
        instance_id: instance.instance_id.clone(),
        error: Some(message),
        candidates: Vec::new(),
        top1_hit: false,
        top5_hit: false,
        resolved: None,
        resolved_designated: None,
    }
}

/// Scores every instance. `make_gateway` supplies a fresh gateway per
/// instance so call accounting stays per instance.
pub fn run_eval(
    instances: &[EvalInstance],
    config: &RunConfig,
    mode: EvalMode,
    work_dir: &Path,
    make_gateway: &dyn Fn(&EvalInstance) -> Result<Gateway, LlmError>,
) -> EvalReport {
    let mut results = Vec::new();
    for instance in instances {
        let result = eval_one(instance, config, mode, work_dir, make_gateway);
        tracing::info!(id = %instance.instance_id, top5 = result.top5_hit, error = ?result.error, "instance scored");
        results.push(result);
    }
    EvalReport::from_results(results)
}

fn eval_one(
    instance: &EvalInstance,
    config: &RunConfig,
    mode: EvalMode,
    work_dir: &Path,
    make_gateway: &dyn Fn(&EvalInstance) -> Result<Gateway, LlmError>,
) -> InstanceResult {
    if !instance.repo.is_dir() {
        return errored(
            instance,
            format!("checkout {} not found", instance.repo.display()),
        );
    }
    let dir = work_dir.join(&instance.instance_id);
    let parser = PythonParser::new();
    let index = match build_index(
        &instance.repo,
        &dir.join("index"),
        &config.index,
        &config.embedder,
        &parser,
    ) {
        Ok((index, _)) => index,
        Err(e) => return errored(instance, format!("index: {e}")),
    };
    let gateway = match make_gateway(instance) {
        Ok(g) => g,
        Err(e) => return errored(instance, format!("backend: {e}")),
    };
    let issue = Issue {
        instance_id: Some(instance.instance_id.clone()),
        text: instance.problem_statement.clone(),
    };
    let scored = |candidates: Vec<String>| InstanceResult {
        instance_id: instance.instance_id.clone(),
        error: None,
        top1_hit: topk_hit(&candidates, &instance.gold_files, 1),
        top5_hit: topk_hit(&candidates, &instance.gold_files, 5),
        candidates,
        resolved: None,
        resolved_designated: None,
    };
    match mode {
        EvalMode::Localize => {
            match candidate_files(config, &index, &instance.repo, &issue, &gateway) {
                Ok(c) => scored(c),
                Err(f) if f.kind == FailureKind::Localization => scored(Vec::new()),
                Err(f) => errored(instance, f.to_string()),
            }
        }
        EvalMode::Fix => {
            let run_dir = dir.join("run");
            let outcome = run_fix(&FixInputs {
                config,
                index: &index,
                repo_root: &instance.repo,
                issue: &issue,
                run_dir: &run_dir,
                gateway: &gateway,
            });
            if let Some(f) = &outcome.report.failure {
                if matches!(
                    f.kind,
                    FailureKind::Backend | FailureKind::Config | FailureKind::Runtime
                ) {
                    return errored(instance, f.to_string());
                }
            }
            let candidates = outcome
                .report
                .localization
                .as_ref()
                .map(|l| l.candidates.paths())
                .unwrap_or_default();
            let mut result = scored(candidates);
            let chosen = fs::read_to_string(run_dir.join(CHOSEN_PATCH)).ok();
            match chosen {
                Some(patch) if outcome.report.resolved => {
                    match score_resolution(instance, config, &patch, &dir) {
                        Ok((full, designated)) => {
                            result.resolved = Some(full);
                            result.resolved_designated = designated;
                        }
                        Err(e) => return errored(instance, format!("resolution check: {e}")),
                    }
                }
                _ => {
                    result.resolved = Some(false);
                    result.resolved_designated =
                        (!instance.designated_tests.is_empty()).then_some(false);
                }
            }
            result
        }
    }
}

/// Chosen patch first, then the held-out test patch, then one suite run.
fn score_resolution(
    instance: &EvalInstance,
    config: &RunConfig,
    chosen: &str,
    dir: &Path,
) -> Result<(bool, Option<bool>), String> {
    let dest = dir.join("resolution");
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| e.to_string())?;
    }
    let ws = create_scratch(&instance.repo, &dest).map_err(|e| e.to_string())?;
    apply_patch(ws.path(), chosen).map_err(|e| e.to_string())?;
    if let Some(tp) = &instance.gold_test_patch {
        apply_patch(ws.path(), tp).map_err(|e| format!("test patch: {e}"))?;
    }
    let post = run_suite(ws.path(), &config.runner).map_err(|e| e.to_string())?;
    let _ = ws.destroy();
    if post.truncated {
        return Err(post
            .diagnostic
            .unwrap_or_else(|| "runner did not finish".into()));
    }
    let full = !post.outcomes.values().any(|o| o.is_failing());
    let designated = (!instance.designated_tests.is_empty()).then(|| {
        let wanted: BTreeSet<&String> = instance.designated_tests.iter().collect();
        wanted
            .iter()
            .all(|t| post.outcomes.get(*t) == Some(&Outcome::Pass))
    });
    Ok((full, designated))
}
