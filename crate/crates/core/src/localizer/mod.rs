//! Three-stage narrowing from a problem statement to an edit plan.
//!
//! Stage one unions vector retrieval over method documents with a
//! file-map completion. Stage two lets the model keep at most `l_max` of
//! those files after seeing their schematics. Stage three reads each kept
//! file in full and names the definitions (or top-level spans) to rewrite.

mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::editor::{
    check_top_level, contained_path, resolve_in_schematic, Level, RelevantLocation,
};
use crate::indexer::{render_repo_map_within, FileSchematic, RepoFileMap, SourceParser};
use crate::llm::{
    complete_with_retry, parse_as, render as render_prompt, template, CompletionRequest, Field,
    Gateway, LlmError, Role, Shape, RETRY_HEADER,
};
use crate::vector::{Embedder, VectorError, VectorIndex};

pub use render::{numbered_source, render_schematic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub n_queries: usize,
    pub m_files: usize,
    pub per_query_k: usize,
    pub cap: usize,
    pub l_max: usize,
    pub retry_budget: usize,
    /// Serialized repo maps longer than this are cut by directory depth.
    pub repo_map_max_chars: usize,
    pub temperature: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            n_queries: 4,
            m_files: 5,
            per_query_k: 5,
            cap: 5,
            l_max: 2,
            retry_budget: 2,
            repo_map_max_chars: 60_000,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LocalizeError {
    #[error("problem statement is empty")]
    EmptyProblem,
    #[error("{0} must be at least 1")]
    BadConfig(&'static str),
    #[error("no candidate files from retrieval or the file map")]
    NoCandidates,
    #[error("no valid edit locations: {0}")]
    NoLocations(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemStatement {
    pub text: String,
    pub repo_root: PathBuf,
}

impl ProblemStatement {
    pub fn new(
        text: impl Into<String>,
        repo_root: impl Into<PathBuf>,
    ) -> Result<Self, LocalizeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(LocalizeError::EmptyProblem);
        }
        Ok(ProblemStatement {
            text,
            repo_root: repo_root.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<String>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Rag,
    FileMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFile {
    pub path: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFile {
    pub path: String,
    pub provenance: BTreeSet<Provenance>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFileSet {
    pub ranked_files: Vec<CandidateFile>,
}

impl CandidateFileSet {
    pub fn paths(&self) -> Vec<String> {
        self.ranked_files.iter().map(|f| f.path.clone()).collect()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.ranked_files.iter().any(|f| f.path == path)
    }

    pub fn len(&self) -> usize {
        self.ranked_files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_files.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSelection {
    pub files: Vec<String>,
    pub rationale: String,
    pub l_max: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanElement {
    pub location: RelevantLocation,
    pub instruction: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    pub elements: Vec<PlanElement>,
}

impl EditPlan {
    pub fn files(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.elements {
            if !seen.contains(&e.location.file) {
                seen.push(e.location.file.clone());
            }
        }
        seen
    }
}

/// Everything localization produced, in emission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub queries: QuerySet,
    pub rag_files: Vec<RankedFile>,
    pub map_files: Vec<String>,
    pub map_truncated: bool,
    pub candidates: CandidateFileSet,
    pub selection: FileSelection,
    pub plan: EditPlan,
    pub warnings: Vec<String>,
}

/// Read-only inputs shared by all stages.
pub struct Context<'a> {
    pub gateway: &'a Gateway,
    pub parser: &'a dyn SourceParser,
    pub embedder: &'a dyn Embedder,
    pub index: &'a VectorIndex,
    pub map: &'a RepoFileMap,
    pub schematics: &'a BTreeMap<String, FileSchematic>,
    pub config: &'a LocalizerConfig,
}

fn prompt(role: Role, values: &[(&str, &str)]) -> String {
    render_prompt(template(role), values).expect("role templates match their placeholders")
}

/// Completion whose structural rejections are retried but which gives up
/// quietly (returning `None`) when the budget runs out.
fn soft_structured<T: serde::de::DeserializeOwned>(
    ctx: &Context,
    request: &CompletionRequest,
    shape: &Shape,
) -> Result<Option<T>, LlmError> {
    match complete_with_retry(ctx.gateway, request, ctx.config.retry_budget, |t| {
        parse_as(t, shape)
    }) {
        Ok((v, _)) => Ok(Some(v)),
        Err(LlmError::Exhausted { diagnostic, .. }) => {
            tracing::warn!(role = %request.role, %diagnostic, "giving up on structured reply");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn generate_queries(
    ctx: &Context,
    problem: &ProblemStatement,
    n: usize,
) -> Result<QuerySet, LocalizeError> {
    if n == 0 {
        return Err(LocalizeError::BadConfig("n_queries"));
    }
    let count = n.to_string();
    let text = prompt(
        Role::QueryGeneration,
        &[("problem", &problem.text), ("count", &count)],
    );
    let request = CompletionRequest::new(Role::QueryGeneration, text, ctx.config.temperature);
    let (raw, _): (Vec<String>, usize) =
        complete_with_retry(ctx.gateway, &request, ctx.config.retry_budget, |t| {
            parse_as(t, &Shape::list(Shape::String))
        })?;
    Ok(pad_queries(raw, &problem.text, n))
}

/// Trims, drops empties, caps at `n`, pads with the problem text and dedupes.
pub fn pad_queries(raw: Vec<String>, problem_text: &str, n: usize) -> QuerySet {
    let mut queries: Vec<String> = raw
        .into_iter()
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty())
        .take(n)
        .collect();
    if queries.len() < n {
        queries.push(problem_text.trim().to_string());
    }
    let mut seen = BTreeSet::new();
    queries.retain(|q| seen.insert(q.clone()));
    QuerySet {
        n: queries.len(),
        queries,
    }
}

/// Per-file score is the best hit over all queries; ties order by path.
pub fn retrieve_candidate_files(
    queries: &QuerySet,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    per_query_k: usize,
) -> Result<Vec<RankedFile>, LocalizeError> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for q in &queries.queries {
        let vector = embedder.embed(q)?;
        for hit in index.search(&vector, per_query_k)? {
            let slot = best
                .entry(hit.entry.doc.file_name.clone())
                .or_insert(f64::NEG_INFINITY);
            if hit.score > *slot {
                *slot = hit.score;
            }
        }
    }
    let mut ranked: Vec<RankedFile> = best
        .into_iter()
        .map(|(path, score)| RankedFile { path, score })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.path.cmp(&b.path))
    });
    Ok(ranked)
}

#[derive(Debug, Deserialize)]
struct FileItem {
    file: String,
}

/// Map-based file proposals, filtered to files that exist. Returns the
/// files, whether the map had to be truncated, and warnings.
pub fn locate_files_from_map(
    ctx: &Context,
    problem: &ProblemStatement,
    m: usize,
) -> Result<(Vec<String>, bool, Vec<String>), LocalizeError> {
    if ctx.map.is_empty() {
        return Ok((Vec::new(), false, vec!["repository map is empty".into()]));
    }
    let (map_text, truncated) = render_repo_map_within(ctx.map, ctx.config.repo_map_max_chars);
    let count = m.to_string();
    let text = prompt(
        Role::FileLocator,
        &[
            ("problem", &problem.text),
            ("repo_map", &map_text),
            ("count", &count),
        ],
    );
    let request = CompletionRequest::new(Role::FileLocator, text, ctx.config.temperature);
    let shape = Shape::list(Shape::Object(vec![Field::required("file", Shape::String)]));
    let mut warnings = Vec::new();
    if truncated {
        warnings.push("repository map truncated by depth for the file locator".into());
    }
    let Some(items) = soft_structured::<Vec<FileItem>>(ctx, &request, &shape)? else {
        warnings.push("file locator reply unusable; continuing with retrieval only".into());
        return Ok((Vec::new(), truncated, warnings));
    };
    let mut files = Vec::new();
    for item in items {
        let path = item.file.trim().trim_start_matches("./").to_string();
        if !ctx.map.contains(&path) {
            warnings.push(format!("file locator named unknown file `{path}`"));
            continue;
        }
        if !files.contains(&path) {
            files.push(path);
        }
    }
    files.truncate(m);
    Ok((files, truncated, warnings))
}

/// RAG files first in score order, then map files not already present.
pub fn union_candidates(
    rag: &[String],
    map_based: &[String],
    cap: usize,
) -> Result<CandidateFileSet, LocalizeError> {
    if rag.is_empty() && map_based.is_empty() {
        return Err(LocalizeError::NoCandidates);
    }
    let mut out: Vec<CandidateFile> = Vec::new();
    for (source, list) in [(Provenance::Rag, rag), (Provenance::FileMap, map_based)] {
        for path in list {
            match out.iter_mut().find(|f| &f.path == path) {
                Some(existing) => {
                    existing.provenance.insert(source);
                }
                None => out.push(CandidateFile {
                    path: path.clone(),
                    provenance: [source].into_iter().collect(),
                }),
            }
        }
    }
    out.truncate(cap);
    Ok(CandidateFileSet { ranked_files: out })
}

#[derive(Debug, Deserialize)]
struct SelectionReply {
    files: Vec<String>,
    #[serde(default)]
    rationale: Option<String>,
}

pub const FALLBACK_RATIONALE: &str = "fallback";

pub fn preassimilate(
    ctx: &Context,
    problem: &ProblemStatement,
    candidates: &CandidateFileSet,
    l_max: usize,
) -> Result<FileSelection, LocalizeError> {
    if l_max == 0 {
        return Err(LocalizeError::BadConfig("l_max"));
    }
    if candidates.is_empty() {
        return Err(LocalizeError::NoCandidates);
    }
    let listing: Vec<String> = candidates
        .ranked_files
        .iter()
        .map(|c| match ctx.schematics.get(&c.path) {
            Some(s) => render_schematic(s),
            None => format!("{}\n  (not parsed)\n", c.path),
        })
        .collect();
    let max_files = l_max.to_string();
    let text = prompt(
        Role::Preassimilator,
        &[
            ("problem", &problem.text),
            ("candidates", &listing.join("\n")),
            ("max_files", &max_files),
        ],
    );
    let request = CompletionRequest::new(Role::Preassimilator, text, ctx.config.temperature);
    let shape = Shape::Object(vec![
        Field::required("files", Shape::list(Shape::String)),
        Field::optional("rationale", Shape::String),
    ]);
    let reply = soft_structured::<SelectionReply>(ctx, &request, &shape)?;
    let mut files = Vec::new();
    let mut rationale = String::new();
    if let Some(reply) = reply {
        for f in reply.files {
            let f = f.trim().trim_start_matches("./").to_string();
            if candidates.contains(&f) && !files.contains(&f) {
                files.push(f);
            } else if !candidates.contains(&f) {
                tracing::warn!(file = %f, "preassimilator chose a non-candidate");
            }
        }
        rationale = reply.rationale.unwrap_or_default();
    }
    files.truncate(l_max);
    if files.is_empty() {
        let top = candidates
            .ranked_files
            .iter()
            .find(|c| c.provenance.contains(&Provenance::Rag))
            .unwrap_or(&candidates.ranked_files[0]);
        return Ok(FileSelection {
            files: vec![top.path.clone()],
            rationale: FALLBACK_RATIONALE.into(),
            l_max,
        });
    }
    Ok(FileSelection {
        files,
        rationale,
        l_max,
    })
}

#[derive(Debug, Clone, Deserialize)]
struct LocationReply {
    level: Level,
    #[serde(default)]
    name: String,
    start_line: usize,
    #[serde(default)]
    end_line: Option<usize>,
    instruction: String,
}

fn location_shape() -> Shape {
    Shape::list(Shape::Object(vec![
        Field::required("level", Shape::String),
        Field::optional("name", Shape::String),
        Field::required("start_line", Shape::Integer),
        Field::optional("end_line", Shape::Integer),
        Field::required("instruction", Shape::String),
    ]))
}

/// Checks one proposed location, returning it normalized to the unit it
/// resolves to.
fn validate_location(
    file: &str,
    schematic: &FileSchematic,
    line_count: usize,
    reply: &LocationReply,
) -> Result<PlanElement, String> {
    if reply.instruction.trim().is_empty() {
        return Err("instruction is empty".into());
    }
    let location = RelevantLocation {
        level: reply.level,
        name: reply.name.trim().to_string(),
        start_line: reply.start_line,
        end_line: reply.end_line,
        file: file.to_string(),
    };
    let location = match reply.level {
        Level::TopLevel => {
            let span =
                check_top_level(schematic, &location, line_count).map_err(|e| e.to_string())?;
            RelevantLocation {
                name: String::new(),
                start_line: span.start_line,
                end_line: Some(span.end_line),
                ..location
            }
        }
        Level::Class | Level::Method => {
            let unit = resolve_in_schematic(schematic, &location).map_err(|e| e.to_string())?;
            RelevantLocation {
                name: unit.qualified_name.clone(),
                start_line: unit.span.start_line,
                end_line: None,
                ..location
            }
        }
    };
    Ok(PlanElement {
        location,
        instruction: reply.instruction.trim().to_string(),
    })
}

fn validate_all(
    file: &str,
    schematic: &FileSchematic,
    line_count: usize,
    replies: &[LocationReply],
) -> (Vec<PlanElement>, Vec<String>) {
    let mut valid: Vec<PlanElement> = Vec::new();
    let mut problems = Vec::new();
    for (i, reply) in replies.iter().enumerate() {
        match validate_location(file, schematic, line_count, reply) {
            Ok(el) => {
                if !valid.iter().any(|v| v.location == el.location) {
                    valid.push(el);
                }
            }
            Err(e) => problems.push(format!("location {}: {e}", i + 1)),
        }
    }
    (valid, problems)
}

/// Edit locations for one file. Invalid locations get one corrective
/// round trip and are dropped if still invalid.
pub fn parse_locations(
    ctx: &Context,
    problem: &ProblemStatement,
    file: &str,
    content: &str,
    schematic: &FileSchematic,
) -> Result<(Vec<PlanElement>, Vec<String>), LocalizeError> {
    if !schematic.parse_ok {
        return Err(LocalizeError::NoLocations(format!(
            "{file} does not parse: {}",
            schematic.parse_error.as_deref().unwrap_or("unknown error")
        )));
    }
    let line_count = content.split_inclusive('\n').count();
    let text = prompt(
        Role::CoderParser,
        &[
            ("problem", &problem.text),
            ("file", file),
            ("schematic", &render_schematic(schematic)),
            ("source", &numbered_source(content)),
        ],
    );
    let request = CompletionRequest::new(Role::CoderParser, text, ctx.config.temperature);
    let shape = location_shape();
    let mut warnings = Vec::new();
    let Some(first) = soft_structured::<Vec<LocationReply>>(ctx, &request, &shape)? else {
        return Err(LocalizeError::NoLocations(format!(
            "{file}: no usable reply"
        )));
    };
    let (mut valid, problems) = validate_all(file, schematic, line_count, &first);
    if !problems.is_empty() {
        let retry = CompletionRequest {
            prompt: format!(
                "{}\n\n{RETRY_HEADER}\n{}",
                request.prompt,
                problems.join("\n")
            ),
            ..request.clone()
        };
        match soft_structured::<Vec<LocationReply>>(ctx, &retry, &shape)? {
            Some(second) => {
                let (v2, p2) = validate_all(file, schematic, line_count, &second);
                for p in p2 {
                    warnings.push(format!("{file}: dropped {p}"));
                }
                valid = v2;
            }
            None => {
                for p in &problems {
                    warnings.push(format!("{file}: dropped {p}"));
                }
            }
        }
    }
    if valid.is_empty() {
        return Err(LocalizeError::NoLocations(format!(
            "{file}: every proposed location was invalid"
        )));
    }
    Ok((valid, warnings))
}

pub fn localize(ctx: &Context, problem: &ProblemStatement) -> Result<Localization, LocalizeError> {
    let cfg = ctx.config;
    for (name, v) in [
        ("per_query_k", cfg.per_query_k),
        ("cap", cfg.cap),
        ("m_files", cfg.m_files),
    ] {
        if v == 0 {
            return Err(LocalizeError::BadConfig(name));
        }
    }
    let queries = generate_queries(ctx, problem, cfg.n_queries)?;
    let rag_files = if ctx.index.is_empty() {
        Vec::new()
    } else {
        retrieve_candidate_files(&queries, ctx.index, ctx.embedder, cfg.per_query_k)?
    };
    let (map_files, map_truncated, mut warnings) =
        locate_files_from_map(ctx, problem, cfg.m_files)?;
    let rag_paths: Vec<String> = rag_files.iter().map(|r| r.path.clone()).collect();
    let candidates = union_candidates(&rag_paths, &map_files, cfg.cap)?;
    let selection = preassimilate(ctx, problem, &candidates, cfg.l_max)?;

    let mut plan = EditPlan::default();
    let mut failures = Vec::new();
    for file in &selection.files {
        let path = contained_path(&problem.repo_root, file).map_err(|e| LocalizeError::Io {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let content = std::fs::read_to_string(&path).map_err(|e| LocalizeError::Io {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let schematic = ctx.parser.parse_file(file, &content);
        match parse_locations(ctx, problem, file, &content, &schematic) {
            Ok((elements, w)) => {
                plan.elements.extend(elements);
                warnings.extend(w);
            }
            Err(LocalizeError::NoLocations(msg)) => failures.push(msg),
            Err(e) => return Err(e),
        }
    }
    if plan.elements.is_empty() {
        return Err(LocalizeError::NoLocations(failures.join("; ")));
    }
    warnings.extend(failures);
    Ok(Localization {
        queries,
        rag_files,
        map_files,
        map_truncated,
        candidates,
        selection,
        plan,
        warnings,
    })
}
