//! End-to-end runs: configuration, issue ingestion, index artifacts, the
//! `fix` pipeline and the localization evaluation harness.

mod config;
mod eval;
mod index;
mod issue;
mod run;

pub use config::{parse_temperatures, spread_temperatures, ConfigError, RunConfig};
pub use eval::{
    from_swebench, load_instances, run_eval, topk_hit, EvalInstance, EvalMode, EvalReport,
    InstanceResult,
};
pub use index::{
    build_index, load_index, IndexMeta, IndexStoreError, LoadedIndex, META_FILE, REPO_MAP_FILE,
    SCHEMATICS_FILE,
};
pub use issue::{parse_issue, strip_hints, Issue, HINT_FIELDS};
pub use run::{
    candidate_files, check_run_dir, run_fix, run_localize, CandidateSummary, FailureKind,
    FixInputs, FixOutcome, FixReport, Stage, StageFailure, SuiteSummary, CALL_LOG, CANDIDATES_DIR,
    CHOSEN_PATCH, PLAN_FILE, REPORT_FILE, WORKSPACES_DIR,
};
