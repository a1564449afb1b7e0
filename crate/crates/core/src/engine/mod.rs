//! Candidate generation across a temperature schedule, regression
//! filtering, one refinement round and final selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::editor::{
    contained_path, line_delta, resolve_span, span_text, splice, workspace_patch, EditTarget,
    GeneratedCode, Level, RelevantLocation,
};
use crate::indexer::SourceParser;
use crate::llm::{
    complete_with_retry, parse_as, render as render_prompt, template, CompletionRequest, Field,
    Gateway, LlmError, Role, Shape,
};
use crate::localizer::{EditPlan, PlanElement};
use crate::validator::{
    diff_reports, run_suite, Outcome, RegressionDiff, TestReport, TestRunnerConfig, ValidatorError,
};
use crate::workspace::{create_scratch, ensure_space, Workspace, WorkspaceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub temperatures: Vec<f64>,
    /// Extra attempts per generation call after a malformed or unsplicable reply.
    pub retry_budget: usize,
    pub refine: bool,
    /// Refinement calls allowed per run, across candidates.
    pub max_refinements: usize,
    pub refine_temperature: f64,
    pub selection_temperature: f64,
    /// Failure text per test included in refinement prompts.
    pub failure_message_chars: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            temperatures: vec![0.0, 0.4, 0.8],
            retry_budget: 2,
            refine: true,
            max_refinements: 16,
            refine_temperature: 0.0,
            selection_temperature: 0.0,
            failure_message_chars: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub temps: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn new(temps: Vec<f64>) -> Result<Self, EngineError> {
        if temps.is_empty() {
            return Err(EngineError::Config("temperature schedule is empty".into()));
        }
        if let Some(t) = temps
            .iter()
            .find(|t| !t.is_finite() || **t < 0.0 || **t > 2.0)
        {
            return Err(EngineError::Config(format!(
                "temperature {t} outside [0, 2]"
            )));
        }
        Ok(TemperatureSchedule { temps })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("engine configuration: {0}")]
    Config(String),
    #[error("edit plan is empty")]
    EmptyPlan,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    /// Edits applied, not yet validated.
    Generated,
    /// Some plan element could not be turned into a valid splice.
    SpliceFailed,
    /// Edits left every file as it was.
    Unchanged,
    /// Breaks a test that passed at baseline.
    Regressed,
    /// Post-edit test run did not produce a usable report.
    ValidationError,
    Survived,
}

impl CandidateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateStatus::Generated => "generated",
            CandidateStatus::SpliceFailed => "splice_failed",
            CandidateStatus::Unchanged => "unchanged",
            CandidateStatus::Regressed => "regressed",
            CandidateStatus::ValidationError => "validation_error",
            CandidateStatus::Survived => "survived",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedEdit {
    pub location: RelevantLocation,
    pub instruction: String,
    /// Text the edit replaced, as it was in the pristine file.
    pub original: String,
    pub code: String,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub index: usize,
    pub temperature: f64,
    pub status: CandidateStatus,
    pub edits: Vec<AppliedEdit>,
    pub patch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<RegressionDiff>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    /// Completion calls spent on this candidate, refinement included.
    pub calls: usize,
    pub refined: bool,
    pub selected: bool,
    #[serde(skip)]
    pub post: Option<TestReport>,
    #[serde(skip)]
    pub workspace: Option<PathBuf>,
}

impl CandidateSolution {
    pub fn survived(&self) -> bool {
        self.status == CandidateStatus::Survived
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionSet {
    pub candidates: Vec<CandidateSolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_reason: Option<String>,
    pub refinement_round: bool,
}

impl SolutionSet {
    pub fn survivors(&self) -> impl Iterator<Item = &CandidateSolution> {
        self.candidates.iter().filter(|c| c.survived())
    }

    pub fn chosen(&self) -> Option<&CandidateSolution> {
        self.chosen.map(|i| &self.candidates[i])
    }
}

/// Shared inputs for one run.
pub struct Engine<'a> {
    pub gateway: &'a Gateway,
    pub parser: &'a dyn SourceParser,
    pub pristine: &'a Path,
    /// Parent directory for candidate workspaces.
    pub workspaces: &'a Path,
    pub runner: &'a TestRunnerConfig,
    pub config: &'a EngineConfig,
}

#[derive(Debug, Deserialize)]
struct CodeReply {
    code: String,
}

fn code_shape() -> Shape {
    Shape::Object(vec![Field::required("code", Shape::String)])
}

fn prompt(role: Role, values: &[(&str, &str)]) -> String {
    render_prompt(template(role), values).expect("role templates match their placeholders")
}

pub fn render_plan(plan: &EditPlan) -> String {
    let mut out = String::new();
    for (i, el) in plan.elements.iter().enumerate() {
        let loc = &el.location;
        let what = match loc.level {
            Level::TopLevel => format!(
                "top-level lines {}-{}",
                loc.start_line,
                loc.end_line.unwrap_or(loc.start_line)
            ),
            Level::Class => format!("class {} (line {})", loc.name, loc.start_line),
            Level::Method => format!("{} (line {})", loc.name, loc.start_line),
        };
        let _ = writeln!(out, "{}. {} {}: {}", i + 1, loc.file, what, el.instruction);
    }
    out
}

fn shifted(line: usize, delta: isize) -> usize {
    (line as isize + delta).max(1) as usize
}

/// Shifts later locations in the same file after an edit changed its length.
fn shift_location(loc: &RelevantLocation, edited: &EditTarget, delta: isize) -> RelevantLocation {
    let mut out = loc.clone();
    if loc.file == edited.location.file && loc.start_line > edited.resolved_span.end_line {
        out.start_line = shifted(loc.start_line, delta);
        out.end_line = loc.end_line.map(|l| shifted(l, delta));
    }
    out
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EngineError {
    EngineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Outcome of applying a sequence of generated edits in one workspace.
enum ApplyOutcome {
    Applied(Vec<AppliedEdit>),
    Failed(Vec<AppliedEdit>, String),
}

impl<'a> Engine<'a> {
    fn workspace_for(&self, name: &str) -> Result<Workspace, EngineError> {
        let dest = self.workspaces.join(name);
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(|e| io_err(&dest, e))?;
        }
        Ok(create_scratch(self.pristine, &dest)?)
    }

    /// Applies the plan element by element, asking `make_request` for each
    /// element's prompt. Each reply is accepted only if it splices cleanly.
    fn apply_edits(
        &self,
        workspace: &Path,
        elements: &[(PlanElement, Option<String>)],
        temperature: f64,
        calls: &mut usize,
        make_request: &dyn Fn(&PlanElement, &str, Option<&str>) -> CompletionRequest,
    ) -> Result<ApplyOutcome, EngineError> {
        let mut applied: Vec<AppliedEdit> = Vec::new();
        let mut locations: Vec<RelevantLocation> =
            elements.iter().map(|(e, _)| e.location.clone()).collect();
        for (i, (element, previous)) in elements.iter().enumerate() {
            let loc = locations[i].clone();
            let path = match contained_path(workspace, &loc.file) {
                Ok(p) => p,
                Err(e) => return Ok(ApplyOutcome::Failed(applied, e.to_string())),
            };
            let content = match fs::read_to_string(&path) {
                Ok(c) => c,
                Err(e) => return Ok(ApplyOutcome::Failed(applied, format!("{}: {e}", loc.file))),
            };
            let target = match resolve_span(self.parser, &content, &loc) {
                Ok(t) => t,
                Err(e) => return Ok(ApplyOutcome::Failed(applied, e.to_string())),
            };
            let original = span_text(&content, target.resolved_span);
            let request = make_request(element, &original, previous.as_deref());
            let request = CompletionRequest {
                temperature,
                ..request
            };
            let shape = code_shape();
            let result =
                complete_with_retry(self.gateway, &request, self.config.retry_budget, |text| {
                    let reply: CodeReply = parse_as(text, &shape)?;
                    let code = GeneratedCode {
                        text: reply.code.clone(),
                        temperature,
                        attempt: 0,
                    };
                    let spliced =
                        splice(self.parser, &content, &target, &code).map_err(|e| e.to_string())?;
                    if !spliced.syntax_ok {
                        return Err(format!(
                            "the file no longer parses after substitution: {}",
                            spliced.diagnostic.unwrap_or_default()
                        ));
                    }
                    Ok((reply.code, spliced))
                });
            match result {
                Ok(((code, spliced), attempts)) => {
                    *calls += attempts;
                    fs::write(&path, &spliced.new_content).map_err(|e| io_err(&path, e))?;
                    let delta = line_delta(&target, &spliced);
                    for later in locations.iter_mut().skip(i + 1) {
                        *later = shift_location(later, &target, delta);
                    }
                    applied.push(AppliedEdit {
                        location: element.location.clone(),
                        instruction: element.instruction.clone(),
                        original,
                        code,
                        attempts,
                    });
                }
                Err(LlmError::Exhausted {
                    attempts,
                    diagnostic,
                    ..
                }) => {
                    *calls += attempts;
                    return Ok(ApplyOutcome::Failed(
                        applied,
                        format!("{}: {diagnostic}", element.location.file),
                    ));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(ApplyOutcome::Applied(applied))
    }

    fn touched_files(elements: &[PlanElement]) -> Vec<String> {
        let set: BTreeSet<String> = elements.iter().map(|e| e.location.file.clone()).collect();
        set.into_iter().collect()
    }

    /// One candidate per temperature, each in its own workspace.
    pub fn generate_candidates(
        &self,
        problem: &str,
        plan: &EditPlan,
        schedule: &TemperatureSchedule,
    ) -> Result<Vec<CandidateSolution>, EngineError> {
        if plan.elements.is_empty() {
            return Err(EngineError::EmptyPlan);
        }
        fs::create_dir_all(self.workspaces).map_err(|e| io_err(self.workspaces, e))?;
        ensure_space(self.pristine, self.workspaces, schedule.temps.len())?;
        let plan_text = render_plan(plan);
        let elements: Vec<(PlanElement, Option<String>)> =
            plan.elements.iter().map(|e| (e.clone(), None)).collect();
        let files = Self::touched_files(&plan.elements);
        let mut out = Vec::new();
        for (index, &temperature) in schedule.temps.iter().enumerate() {
            let ws = self.workspace_for(&format!("candidate_{index}"))?;
            let mut calls = 0;
            let make = |el: &PlanElement, original: &str, _: Option<&str>| {
                let text = prompt(
                    Role::CodeGeneration,
                    &[
                        ("problem", problem),
                        ("plan", &plan_text),
                        ("file", &el.location.file),
                        ("instruction", &el.instruction),
                        ("original", original),
                    ],
                );
                CompletionRequest::new(Role::CodeGeneration, text, temperature)
            };
            let outcome = self.apply_edits(ws.path(), &elements, temperature, &mut calls, &make)?;
            let (edits, status, diagnostic) = match outcome {
                ApplyOutcome::Applied(edits) => (edits, CandidateStatus::Generated, None),
                ApplyOutcome::Failed(edits, diag) => {
                    (edits, CandidateStatus::SpliceFailed, Some(diag))
                }
            };
            let patch = workspace_patch(self.pristine, ws.path(), &files)
                .map_err(|e| io_err(ws.path(), e))?;
            let status = if status == CandidateStatus::Generated && patch.is_empty() {
                CandidateStatus::Unchanged
            } else {
                status
            };
            tracing::info!(
                index,
                temperature,
                status = status.as_str(),
                "candidate generated"
            );
            out.push(CandidateSolution {
                index,
                temperature,
                status,
                edits,
                patch,
                diff: None,
                diagnostic,
                calls,
                refined: false,
                selected: false,
                post: None,
                workspace: Some(ws.path().to_path_buf()),
            });
        }
        Ok(out)
    }

    fn validate_one(
        &self,
        candidate: &mut CandidateSolution,
        baseline: &TestReport,
    ) -> Result<(), EngineError> {
        let Some(ws) = candidate.workspace.clone() else {
            return Ok(());
        };
        let post = run_suite(&ws, self.runner)?;
        match diff_reports(baseline, &post) {
            Ok(diff) => {
                candidate.status = if diff.is_regression() {
                    CandidateStatus::Regressed
                } else {
                    CandidateStatus::Survived
                };
                candidate.diff = Some(diff);
            }
            Err(e) => {
                candidate.status = CandidateStatus::ValidationError;
                candidate.diagnostic = Some(e.to_string());
            }
        }
        tracing::info!(
            index = candidate.index,
            status = candidate.status.as_str(),
            "candidate validated"
        );
        candidate.post = Some(post);
        Ok(())
    }

    /// Runs the suite for every generated candidate, one at a time.
    pub fn filter_by_validation(
        &self,
        candidates: &mut [CandidateSolution],
        baseline: &TestReport,
    ) -> Result<(), EngineError> {
        for c in candidates
            .iter_mut()
            .filter(|c| c.status == CandidateStatus::Generated)
        {
            self.validate_one(c, baseline)?;
        }
        Ok(())
    }

    fn failure_report(&self, candidate: &CandidateSolution) -> String {
        let Some(diff) = &candidate.diff else {
            return String::new();
        };
        let post = candidate.post.as_ref();
        let mut out = String::new();
        for id in diff.new_failures.iter().chain(&diff.lost_passes) {
            let outcome = post
                .and_then(|p| p.outcomes.get(id))
                .map(|o| format!("{o:?}").to_lowercase())
                .unwrap_or_else(|| "missing".into());
            let _ = writeln!(out, "- {id}: {outcome}");
            if let Some(msg) = post.and_then(|p| p.messages.get(id)) {
                let msg: String = msg
                    .chars()
                    .take(self.config.failure_message_chars)
                    .collect();
                for line in msg.lines() {
                    let _ = writeln!(out, "    {line}");
                }
            }
        }
        out
    }

    /// Single corrective pass over regressed candidates. Only invoked when
    /// nothing survived; each candidate is refined at most once.
    pub fn refine(
        &self,
        problem: &str,
        candidates: &mut [CandidateSolution],
        baseline: &TestReport,
    ) -> Result<usize, EngineError> {
        let mut budget = self.config.max_refinements;
        let mut refined = 0;
        for c in candidates.iter_mut() {
            if c.status != CandidateStatus::Regressed || c.refined {
                continue;
            }
            if c.edits.len() > budget {
                tracing::warn!(index = c.index, "refinement budget exhausted");
                break;
            }
            budget -= c.edits.len();
            c.refined = true;
            refined += 1;
            let failures = self.failure_report(c);
            let elements: Vec<(PlanElement, Option<String>)> = c
                .edits
                .iter()
                .map(|e| {
                    (
                        PlanElement {
                            location: e.location.clone(),
                            instruction: e.instruction.clone(),
                        },
                        Some(e.code.clone()),
                    )
                })
                .collect();
            let ws = self.workspace_for(&format!("candidate_{}_refined", c.index))?;
            let make = |el: &PlanElement, original: &str, attempt: Option<&str>| {
                let text = prompt(
                    Role::Refinement,
                    &[
                        ("problem", problem),
                        ("file", &el.location.file),
                        ("instruction", &el.instruction),
                        ("original", original),
                        ("attempt", attempt.unwrap_or_default()),
                        ("failures", &failures),
                    ],
                );
                CompletionRequest::new(Role::Refinement, text, self.config.refine_temperature)
            };
            let mut calls = 0;
            let outcome = self.apply_edits(
                ws.path(),
                &elements,
                self.config.refine_temperature,
                &mut calls,
                &make,
            )?;
            c.calls += calls;
            let plan_elements: Vec<PlanElement> = elements.into_iter().map(|(e, _)| e).collect();
            let files = Self::touched_files(&plan_elements);
            match outcome {
                ApplyOutcome::Applied(edits) => {
                    c.edits = edits;
                    c.patch = workspace_patch(self.pristine, ws.path(), &files)
                        .map_err(|e| io_err(ws.path(), e))?;
                    c.workspace = Some(ws.path().to_path_buf());
                    if c.patch.is_empty() {
                        c.status = CandidateStatus::Unchanged;
                    } else {
                        c.status = CandidateStatus::Generated;
                        self.validate_one(c, baseline)?;
                    }
                }
                ApplyOutcome::Failed(_, diag) => {
                    c.diagnostic = Some(format!("refinement failed: {diag}"));
                    ws.destroy()?;
                }
            }
        }
        Ok(refined)
    }

    /// Chooses among survivors. A lone survivor is taken without a call;
    /// an unusable selection reply falls back to the lowest temperature.
    pub fn select_final(&self, problem: &str, set: &mut SolutionSet) -> Result<(), EngineError> {
        let survivors: Vec<usize> = set
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.survived())
            .map(|(i, _)| i)
            .collect();
        let fallback = || {
            *survivors
                .iter()
                .min_by(|a, b| {
                    set.candidates[**a]
                        .temperature
                        .partial_cmp(&set.candidates[**b].temperature)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(b))
                })
                .expect("survivors is non-empty")
        };
        let (choice, reason) = match survivors.len() {
            0 => return Ok(()),
            1 => (survivors[0], "only survivor".to_string()),
            _ => {
                let listing = render_survivors(&set.candidates, &survivors);
                let text = prompt(
                    Role::FinalSelection,
                    &[("problem", problem), ("candidates", &listing)],
                );
                let request = CompletionRequest::new(
                    Role::FinalSelection,
                    text,
                    self.config.selection_temperature,
                );
                let shape = Shape::Object(vec![
                    Field::required("choice", Shape::Integer),
                    Field::optional("reason", Shape::String),
                ]);
                let result =
                    complete_with_retry(self.gateway, &request, self.config.retry_budget, |t| {
                        let v = parse_as::<SelectionReply>(t, &shape)?;
                        let candidate_index = usize::try_from(v.choice).ok();
                        match candidate_index.and_then(|ci| {
                            survivors.iter().find(|&&s| set.candidates[s].index == ci)
                        }) {
                            Some(&s) => Ok((s, v.reason.unwrap_or_default())),
                            None => Err(format!(
                                "choice {} is not one of the listed candidates",
                                v.choice
                            )),
                        }
                    });
                match result {
                    Ok((pick, _)) => pick,
                    Err(LlmError::Exhausted { diagnostic, .. }) => {
                        tracing::warn!(%diagnostic, "selection reply unusable, using lowest temperature");
                        (fallback(), "fallback: lowest temperature".to_string())
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        set.candidates[choice].selected = true;
        set.chosen = Some(choice);
        set.selection_reason = Some(reason);
        Ok(())
    }

    /// Generation, validation, refinement when nothing survived, selection.
    pub fn solve(
        &self,
        problem: &str,
        plan: &EditPlan,
        baseline: &TestReport,
    ) -> Result<SolutionSet, EngineError> {
        let schedule = TemperatureSchedule::new(self.config.temperatures.clone())?;
        let mut candidates = self.generate_candidates(problem, plan, &schedule)?;
        self.filter_by_validation(&mut candidates, baseline)?;
        let mut set = SolutionSet::default();
        if self.config.refine && !candidates.iter().any(|c| c.survived()) {
            set.refinement_round = self.refine(problem, &mut candidates, baseline)? > 0;
        }
        set.candidates = candidates;
        self.select_final(problem, &mut set)?;
        Ok(set)
    }
}

#[derive(Debug, Deserialize)]
struct SelectionReply {
    choice: i64,
    #[serde(default)]
    reason: Option<String>,
}

fn render_survivors(candidates: &[CandidateSolution], survivors: &[usize]) -> String {
    let mut out = String::new();
    for &i in survivors {
        let c = &candidates[i];
        let (passed, failed, fixed) = match (&c.post, &c.diff) {
            (Some(post), Some(diff)) => (
                post.count(Outcome::Pass),
                post.count(Outcome::Fail) + post.count(Outcome::Error),
                diff.new_passes
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", "),
            ),
            _ => (0, 0, String::new()),
        };
        let fixed = if fixed.is_empty() {
            "none".to_string()
        } else {
            fixed
        };
        let _ = writeln!(
            out,
            "Candidate {} (temperature {}): {passed} passing, {failed} failing, newly passing: {fixed}",
            c.index, c.temperature
        );
        let _ = writeln!(out, "```diff\n{}```\n", c.patch);
    }
    out
}
