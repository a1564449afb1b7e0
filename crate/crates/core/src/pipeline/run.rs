use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editor::apply_patch;
use crate::engine::{CandidateSolution, CandidateStatus, Engine, EngineError, SolutionSet};
use crate::indexer::PythonParser;
use crate::llm::{Gateway, Role, Usage};
use crate::localizer::{self, Context, Localization, LocalizeError, ProblemStatement};
use crate::validator::{
    diff_reports, record_baseline, run_suite, Outcome, RegressionDiff, TestReport, ValidatorError,
};
use crate::workspace::{create_scratch, tree_hashes, WorkspaceError};

use super::config::RunConfig;
use super::index::LoadedIndex;
use super::issue::Issue;

pub const REPORT_FILE: &str = "report.json";
pub const PLAN_FILE: &str = "plan.json";
pub const CHOSEN_PATCH: &str = "chosen.patch";
pub const CANDIDATES_DIR: &str = "candidates";
pub const WORKSPACES_DIR: &str = "workspaces";
pub const CALL_LOG: &str = "calls.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Baseline,
    Localize,
    Generate,
    Validate,
    Select,
    Revalidate,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Config,
    Localization,
    NoSurvivor,
    Backend,
    Runtime,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Localization => 2,
            FailureKind::NoSurvivor => 3,
            FailureKind::Backend => 4,
            FailureKind::Config => 5,
            FailureKind::Runtime => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{stage:?} stage failed: {message}")]
pub struct StageFailure {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl StageFailure {
    pub fn new(stage: Stage, kind: FailureKind, message: impl Into<String>) -> Self {
        StageFailure {
            stage,
            kind,
            message: message.into(),
        }
    }

    fn localize(e: LocalizeError) -> Self {
        let kind = match e {
            LocalizeError::Llm(_) => FailureKind::Backend,
            LocalizeError::BadConfig(_) => FailureKind::Config,
            LocalizeError::Vector(_) | LocalizeError::Io { .. } => FailureKind::Runtime,
            _ => FailureKind::Localization,
        };
        StageFailure::new(Stage::Localize, kind, e.to_string())
    }

    fn engine(stage: Stage, e: EngineError) -> Self {
        let kind = match &e {
            EngineError::Llm(_) => FailureKind::Backend,
            EngineError::Config(_) | EngineError::Validator(ValidatorError::Config(_)) => {
                FailureKind::Config
            }
            EngineError::Validator(ValidatorError::CommandNotFound(_)) => FailureKind::Config,
            _ => FailureKind::Runtime,
        };
        StageFailure::new(stage, kind, e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub tests: usize,
    pub pass: usize,
    pub fail: usize,
    pub error: usize,
    pub skip: usize,
}

impl SuiteSummary {
    pub fn of(report: &TestReport) -> Self {
        SuiteSummary {
            tests: report.outcomes.len(),
            pass: report.count(Outcome::Pass),
            fail: report.count(Outcome::Fail),
            error: report.count(Outcome::Error),
            skip: report.count(Outcome::Skip),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub file: String,
    pub name: String,
    pub start_line: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub index: usize,
    pub temperature: f64,
    pub status: CandidateStatus,
    pub refined: bool,
    pub selected: bool,
    pub calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_file: Option<String>,
    pub edits: Vec<EditSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<SuiteSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<RegressionDiff>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl CandidateSummary {
    fn of(c: &CandidateSolution) -> Self {
        CandidateSummary {
            index: c.index,
            temperature: c.temperature,
            status: c.status,
            refined: c.refined,
            selected: c.selected,
            calls: c.calls,
            patch_file: (!c.patch.is_empty())
                .then(|| format!("{CANDIDATES_DIR}/candidate_{}.patch", c.index)),
            edits: c
                .edits
                .iter()
                .map(|e| EditSummary {
                    file: e.location.file.clone(),
                    name: e.location.name.clone(),
                    start_line: e.location.start_line,
                    attempts: e.attempts,
                })
                .collect(),
            post: c.post.as_ref().map(SuiteSummary::of),
            diff: c.diff.clone(),
            diagnostic: c.diagnostic.clone(),
        }
    }
}

/// Contents of `report.json`. Holds no timings or absolute paths so that a
/// replayed run reproduces it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixReport {
    pub resolved: bool,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<SuiteSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<Localization>,
    pub candidates: Vec<CandidateSummary>,
    pub refinement_round: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_reason: Option<String>,
    /// Chosen patch applied to a fresh copy and run again.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revalidation: Option<RegressionDiff>,
    pub calls_by_role: BTreeMap<Role, usize>,
    pub usage: Usage,
    pub pristine_unchanged: bool,
}

impl FixReport {
    fn empty(issue: &Issue) -> Self {
        FixReport {
            resolved: false,
            exit_code: 0,
            failure: None,
            instance_id: issue.instance_id.clone(),
            baseline: None,
            localization: None,
            candidates: Vec::new(),
            refinement_round: false,
            chosen: None,
            selection_reason: None,
            revalidation: None,
            calls_by_role: BTreeMap::new(),
            usage: Usage::default(),
            pristine_unchanged: true,
        }
    }
}

pub struct FixInputs<'a> {
    pub config: &'a RunConfig,
    pub index: &'a LoadedIndex,
    pub repo_root: &'a Path,
    pub issue: &'a Issue,
    pub run_dir: &'a Path,
    pub gateway: &'a Gateway,
}

pub struct FixOutcome {
    pub report: FixReport,
    pub solutions: Option<SolutionSet>,
    pub run_dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<(), StageFailure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| {
            StageFailure::new(
                Stage::Output,
                FailureKind::Runtime,
                format!("{}: {e}", parent.display()),
            )
        })?;
    }
    fs::write(path, text).map_err(|e| {
        StageFailure::new(
            Stage::Output,
            FailureKind::Runtime,
            format!("{}: {e}", path.display()),
        )
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageFailure> {
    write_text(
        path,
        &(serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"),
    )
}

/// Rejects run directories that would write into the checkout.
pub fn check_run_dir(repo_root: &Path, run_dir: &Path) -> Result<(), StageFailure> {
    let root = fs::canonicalize(repo_root).map_err(|e| {
        StageFailure::new(
            Stage::Setup,
            FailureKind::Config,
            format!("{}: {e}", repo_root.display()),
        )
    })?;
    let probe = run_dir
        .ancestors()
        .find(|p| p.exists())
        .unwrap_or(Path::new("."));
    let probe = fs::canonicalize(probe).unwrap_or_else(|_| probe.to_path_buf());
    if probe.starts_with(&root) {
        return Err(StageFailure::new(
            Stage::Setup,
            FailureKind::Config,
            format!(
                "run directory {} lies inside the checkout; choose another",
                run_dir.display()
            ),
        ));
    }
    Ok(())
}

fn localize_with(
    config: &RunConfig,
    index: &LoadedIndex,
    repo_root: &Path,
    issue: &Issue,
    gateway: &Gateway,
) -> Result<Localization, StageFailure> {
    let parser = PythonParser::new();
    let embedder = index.meta.embedder.build();
    let ctx = Context {
        gateway,
        parser: &parser,
        embedder: embedder.as_ref(),
        index: &index.vectors,
        map: &index.map,
        schematics: &index.schematics,
        config: &config.localizer,
    };
    let problem = ProblemStatement::new(issue.text.clone(), repo_root.to_path_buf())
        .map_err(StageFailure::localize)?;
    localizer::localize(&ctx, &problem).map_err(StageFailure::localize)
}

/// Localization only; the result is written to `out` when given.
pub fn run_localize(
    config: &RunConfig,
    index: &LoadedIndex,
    repo_root: &Path,
    issue: &Issue,
    gateway: &Gateway,
    out: Option<&Path>,
) -> Result<Localization, StageFailure> {
    let loc = localize_with(config, index, repo_root, issue, gateway)?;
    if let Some(out) = out {
        write_json(out, &loc)?;
    }
    Ok(loc)
}

/// Stage 1 only: ranked candidate files, with no further calls.
pub fn candidate_files(
    config: &RunConfig,
    index: &LoadedIndex,
    repo_root: &Path,
    issue: &Issue,
    gateway: &Gateway,
) -> Result<Vec<String>, StageFailure> {
    let parser = PythonParser::new();
    let embedder = index.meta.embedder.build();
    let ctx = Context {
        gateway,
        parser: &parser,
        embedder: embedder.as_ref(),
        index: &index.vectors,
        map: &index.map,
        schematics: &index.schematics,
        config: &config.localizer,
    };
    let problem = ProblemStatement::new(issue.text.clone(), repo_root.to_path_buf())
        .map_err(StageFailure::localize)?;
    let cfg = &config.localizer;
    let queries = localizer::generate_queries(&ctx, &problem, cfg.n_queries)
        .map_err(StageFailure::localize)?;
    let rag = if index.vectors.is_empty() {
        Vec::new()
    } else {
        localizer::retrieve_candidate_files(
            &queries,
            &index.vectors,
            embedder.as_ref(),
            cfg.per_query_k,
        )
        .map_err(StageFailure::localize)?
    };
    let (map_files, _, _) = localizer::locate_files_from_map(&ctx, &problem, cfg.m_files)
        .map_err(StageFailure::localize)?;
    let rag: Vec<String> = rag.into_iter().map(|r| r.path).collect();
    let set =
        localizer::union_candidates(&rag, &map_files, cfg.cap).map_err(StageFailure::localize)?;
    Ok(set.paths())
}

/// Baseline, localization, generation, validation, refinement and
/// selection. `report.json` is written whatever happens.
pub fn run_fix(inputs: &FixInputs) -> FixOutcome {
    let mut report = FixReport::empty(inputs.issue);
    if let Err(failure) = check_run_dir(inputs.repo_root, inputs.run_dir) {
        // Nothing may be written, not even the report.
        report.exit_code = failure.kind.exit_code();
        report.failure = Some(failure);
        return FixOutcome {
            report,
            solutions: None,
            run_dir: inputs.run_dir.to_path_buf(),
        };
    }
    let before = tree_hashes(inputs.repo_root).ok();
    let mut solutions = None;
    let result = fix_stages(inputs, &mut report, &mut solutions);

    if !inputs.config.keep_workspaces {
        let ws = inputs.run_dir.join(WORKSPACES_DIR);
        if ws.exists() {
            if let Err(e) = fs::remove_dir_all(&ws) {
                tracing::warn!(error = %e, "could not remove workspaces");
            }
        }
    }
    let after = tree_hashes(inputs.repo_root).ok();
    report.pristine_unchanged = before.is_some() && before == after;
    report.calls_by_role = inputs.gateway.calls_by_role();
    report.usage = inputs.gateway.usage_total();
    match result {
        Ok(()) => {
            report.resolved = true;
            report.exit_code = 0;
        }
        Err(failure) => {
            tracing::error!(stage = ?failure.stage, "{}", failure.message);
            report.resolved = false;
            report.exit_code = failure.kind.exit_code();
            report.failure = Some(failure);
        }
    }
    if !report.pristine_unchanged {
        tracing::error!("checkout changed during the run");
    }
    if let Err(e) = write_json(&inputs.run_dir.join(REPORT_FILE), &report) {
        tracing::error!("cannot write report: {e}");
    }
    FixOutcome {
        report,
        solutions,
        run_dir: inputs.run_dir.to_path_buf(),
    }
}

fn fix_stages(
    inputs: &FixInputs,
    report: &mut FixReport,
    solutions: &mut Option<SolutionSet>,
) -> Result<(), StageFailure> {
    let cfg = inputs.config;
    let run_dir = inputs.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| {
        StageFailure::new(
            Stage::Setup,
            FailureKind::Runtime,
            format!("{}: {e}", run_dir.display()),
        )
    })?;
    cfg.runner
        .validate()
        .map_err(|e| StageFailure::new(Stage::Setup, FailureKind::Config, e.to_string()))?;
    let workspaces = run_dir.join(WORKSPACES_DIR);

    let baseline = {
        let scratch =
            create_scratch(inputs.repo_root, &workspaces.join("baseline")).map_err(|e| {
                let kind = match e {
                    WorkspaceError::MissingPristine(_) => FailureKind::Config,
                    _ => FailureKind::Runtime,
                };
                StageFailure::new(Stage::Baseline, kind, e.to_string())
            })?;
        let result = record_baseline(scratch.path(), &cfg.runner, run_dir);
        let _ = scratch.destroy();
        result.map_err(|e| {
            let kind = match e {
                ValidatorError::Io(_) => FailureKind::Runtime,
                _ => FailureKind::Config,
            };
            StageFailure::new(Stage::Baseline, kind, e.to_string())
        })?
    };
    report.baseline = Some(SuiteSummary::of(&baseline));

    let loc = localize_with(
        cfg,
        inputs.index,
        inputs.repo_root,
        inputs.issue,
        inputs.gateway,
    )?;
    write_json(&run_dir.join(PLAN_FILE), &loc)?;
    report.localization = Some(loc.clone());

    let parser = PythonParser::new();
    let engine = Engine {
        gateway: inputs.gateway,
        parser: &parser,
        pristine: inputs.repo_root,
        workspaces: &workspaces,
        runner: &cfg.runner,
        config: &cfg.engine,
    };
    let schedule = crate::engine::TemperatureSchedule::new(cfg.engine.temperatures.clone())
        .map_err(|e| StageFailure::engine(Stage::Generate, e))?;
    let mut candidates = engine
        .generate_candidates(&inputs.issue.text, &loc.plan, &schedule)
        .map_err(|e| StageFailure::engine(Stage::Generate, e))?;
    let record_candidates = |report: &mut FixReport, cs: &[CandidateSolution]| {
        report.candidates = cs.iter().map(CandidateSummary::of).collect();
    };
    record_candidates(report, &candidates);
    write_candidate_patches(run_dir, &candidates)?;

    engine
        .filter_by_validation(&mut candidates, &baseline)
        .map_err(|e| StageFailure::engine(Stage::Validate, e))?;
    let mut set = SolutionSet::default();
    if cfg.engine.refine && !candidates.iter().any(|c| c.survived()) {
        let refined = engine.refine(&inputs.issue.text, &mut candidates, &baseline);
        record_candidates(report, &candidates);
        set.refinement_round = refined.map_err(|e| StageFailure::engine(Stage::Validate, e))? > 0;
        report.refinement_round = set.refinement_round;
    }
    write_candidate_patches(run_dir, &candidates)?;
    for c in &candidates {
        if let Some(post) = &c.post {
            post.write(&run_dir.join(format!("candidate_{}_post.json", c.index)))
                .map_err(|e| {
                    StageFailure::new(Stage::Output, FailureKind::Runtime, e.to_string())
                })?;
        }
    }
    set.candidates = candidates;
    let select = engine.select_final(&inputs.issue.text, &mut set);
    record_candidates(report, &set.candidates);
    report.chosen = set.chosen;
    report.selection_reason = set.selection_reason.clone();
    let selected = select
        .map_err(|e| StageFailure::engine(Stage::Select, e))
        .map(|_| set.chosen());
    let chosen = match selected {
        Ok(Some(c)) => c.clone(),
        Ok(None) => {
            *solutions = Some(set);
            return Err(StageFailure::new(
                Stage::Select,
                FailureKind::NoSurvivor,
                "no candidate survived validation",
            ));
        }
        Err(e) => {
            *solutions = Some(set);
            return Err(e);
        }
    };
    *solutions = Some(set);

    let diff = revalidate(inputs, &chosen, &baseline, &workspaces)?;
    let regressed = diff.is_regression();
    report.revalidation = Some(diff);
    if regressed {
        return Err(StageFailure::new(
            Stage::Revalidate,
            FailureKind::NoSurvivor,
            "chosen patch regressed when re-run on a fresh copy",
        ));
    }
    write_text(&run_dir.join(CHOSEN_PATCH), &chosen.patch)?;
    Ok(())
}

fn write_candidate_patches(
    run_dir: &Path,
    candidates: &[CandidateSolution],
) -> Result<(), StageFailure> {
    for c in candidates.iter().filter(|c| !c.patch.is_empty()) {
        write_text(
            &run_dir
                .join(CANDIDATES_DIR)
                .join(format!("candidate_{}.patch", c.index)),
            &c.patch,
        )?;
    }
    Ok(())
}

/// Applies the chosen patch to a fresh copy of the checkout and reruns the suite.
fn revalidate(
    inputs: &FixInputs,
    chosen: &CandidateSolution,
    baseline: &TestReport,
    workspaces: &Path,
) -> Result<RegressionDiff, StageFailure> {
    let fail = |e: String| StageFailure::new(Stage::Revalidate, FailureKind::Runtime, e);
    let dest = workspaces.join("chosen");
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| fail(e.to_string()))?;
    }
    let ws = create_scratch(inputs.repo_root, &dest).map_err(|e| fail(e.to_string()))?;
    apply_patch(ws.path(), &chosen.patch).map_err(|e| fail(e.to_string()))?;
    let post = run_suite(ws.path(), &inputs.config.runner).map_err(|e| fail(e.to_string()))?;
    let diff = diff_reports(baseline, &post).map_err(|e| fail(e.to_string()))?;
    let _ = ws.destroy();
    Ok(diff)
}
