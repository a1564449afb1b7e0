use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use pinpatch_core::indexer::PythonParser;
use pinpatch_core::llm::{
    BackendMode, Gateway, HttpTransport, LlmError, PoisonedTransport, Transport, TRANSCRIPT_FILE,
};
use pinpatch_core::pipeline::{
    build_index, check_run_dir, load_index, load_instances, parse_issue, parse_temperatures,
    run_eval, run_fix, run_localize, EvalMode, FixInputs, Issue, LoadedIndex, RunConfig, CALL_LOG,
};

#[derive(Parser, Debug)]
#[command(
    name = "pinpatch",
    version,
    about = "Localize and patch bugs in Python repositories"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Output directory for this run [default: run/<timestamp>].
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["live", "replay", "record"])]
    backend: Option<String>,
    /// Transcript to replay or record [default: <run-dir>/transcript.jsonl].
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the repository map, schematics and vector index.
    Index(IndexArgs),
    /// Locate files and edit points for an issue.
    Localize(LocalizeArgs),
    /// Generate, validate and select a patch for an issue.
    Fix(FixArgs),
    /// Score localization (and optionally repair) over a set of instances.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// File extension to index; repeatable.
    #[arg(long = "ext")]
    ext: Vec<String>,
    /// Glob of repo-relative paths to skip; repeatable.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    /// Issue file, JSON or plain text; `-` reads stdin.
    #[arg(long)]
    issue: Option<PathBuf>,
    /// Checkout to read; defaults to the indexed root.
    #[arg(long)]
    repo: Option<PathBuf>,
    /// Candidate files kept after the union.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FixArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    issue: Option<PathBuf>,
    #[arg(long)]
    repo: Option<PathBuf>,
    /// Number of candidates.
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated sampling temperatures, one per candidate.
    #[arg(long)]
    temps: Option<String>,
    #[arg(long)]
    retry: Option<usize>,
    /// Run directory for artifacts; same as --run-dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rebuild the index before fixing.
    #[arg(long)]
    reindex: bool,
    #[arg(long)]
    keep_workspaces: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON-lines instance file.
    #[arg(long)]
    instances: PathBuf,
    /// Directory holding one checkout per instance id, for benchmark records.
    #[arg(long)]
    checkouts: Option<PathBuf>,
    /// Run the full repair per instance instead of localization only.
    #[arg(long)]
    fix: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure { code: 5, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if cli.verbose { "debug" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::config(e.into()))?,
        None => RunConfig::default(),
    };
    if let Some(b) = &cli.backend {
        config.backend = b.parse().map_err(|e: String| Failure::config(anyhow!(e)))?;
    }
    if cli.transcript.is_some() {
        config.transcript = cli.transcript.clone();
    }
    if cli.run_dir.is_some() {
        config.run_dir = cli.run_dir.clone();
    }
    config.llm = config.llm.clone().with_env();
    match cli.command {
        Command::Index(args) => cmd_index(config, args),
        Command::Localize(args) => cmd_localize(config, args),
        Command::Fix(args) => cmd_fix(config, args),
        Command::Eval(args) => cmd_eval(config, args),
    }
}

fn default_run_dir() -> PathBuf {
    let stamp = humantime::format_rfc3339_seconds(std::time::SystemTime::now())
        .to_string()
        .replace(':', "-");
    PathBuf::from("run").join(stamp)
}

fn run_dir(config: &RunConfig) -> PathBuf {
    config.run_dir.clone().unwrap_or_else(default_run_dir)
}

fn transport(config: &RunConfig) -> Arc<dyn Transport> {
    match config.backend {
        BackendMode::Replay => Arc::new(PoisonedTransport::default()),
        BackendMode::Live | BackendMode::Record => Arc::new(HttpTransport::new(config.llm.clone())),
    }
}

fn gateway(config: &RunConfig, run_dir: &Path) -> Result<Gateway, LlmError> {
    let transcript = config
        .transcript
        .clone()
        .unwrap_or_else(|| run_dir.join(TRANSCRIPT_FILE));
    let gateway = Gateway::new(config.backend, transport(config), Some(&transcript))?;
    std::fs::create_dir_all(run_dir)
        .map_err(|e| LlmError::Transcript(format!("{}: {e}", run_dir.display())))?;
    gateway.with_run_log(run_dir.join(CALL_LOG))
}

fn backend_failure(e: LlmError) -> Failure {
    let code = match e {
        LlmError::Transcript(_) | LlmError::InvalidRequest(_) => 5,
        _ => 4,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn read_issue(config: &RunConfig, flag: Option<PathBuf>) -> Result<Issue, Failure> {
    let path = flag
        .or_else(|| config.issue.clone())
        .ok_or_else(|| Failure::config(anyhow!("no issue given (--issue)")))?;
    let raw = if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .context("reading issue from stdin")?;
        s
    } else {
        std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::config)?
    };
    parse_issue(&raw).map_err(|e| Failure::config(anyhow!(e)))
}

fn open_index(
    config: &RunConfig,
    flag: Option<PathBuf>,
    repo: Option<PathBuf>,
    reindex: bool,
) -> Result<(LoadedIndex, PathBuf), Failure> {
    let dir = flag
        .or_else(|| config.index_dir.clone())
        .ok_or_else(|| Failure::config(anyhow!("no index directory given (--index)")))?;
    let repo = repo.or_else(|| config.repo_root.clone());
    let index = if reindex {
        let root = repo
            .clone()
            .ok_or_else(|| Failure::config(anyhow!("--reindex needs --repo")))?;
        build_index(
            &root,
            &dir,
            &config.index,
            &config.embedder,
            &PythonParser::new(),
        )
        .map_err(|e| Failure::config(e.into()))?
        .0
    } else {
        load_index(&dir)
            .map_err(|e| Failure::config(anyhow!("{e}; run `pinpatch index` or pass --reindex")))?
    };
    let root = repo.unwrap_or_else(|| index.meta.repo_root.clone());
    Ok((index, root))
}

fn cmd_index(mut config: RunConfig, args: IndexArgs) -> Result<(), Failure> {
    let root = args
        .root
        .or_else(|| config.repo_root.clone())
        .ok_or_else(|| Failure::config(anyhow!("no repository given (--root)")))?;
    let out = args
        .out
        .or_else(|| config.index_dir.clone())
        .ok_or_else(|| Failure::config(anyhow!("no output directory given (--out)")))?;
    if !args.ext.is_empty() {
        config.index.extensions = args
            .ext
            .iter()
            .map(|e| {
                if e.starts_with('.') {
                    e.clone()
                } else {
                    format!(".{e}")
                }
            })
            .collect();
    }
    config.index.exclude_globs.extend(args.exclude);
    let (index, warnings) = build_index(
        &root,
        &out,
        &config.index,
        &config.embedder,
        &PythonParser::new(),
    )
    .map_err(|e| match e {
        pinpatch_core::pipeline::IndexStoreError::Index(_) => Failure::config(e.into()),
        other => Failure::from(anyhow::Error::from(other)),
    })?;
    for w in &warnings {
        tracing::warn!("{w}");
    }
    println!(
        "indexed {} files, {} units, {} documents into {}",
        index.meta.file_count,
        index.meta.unit_count,
        index.meta.document_count,
        out.display()
    );
    Ok(())
}

fn cmd_localize(mut config: RunConfig, args: LocalizeArgs) -> Result<(), Failure> {
    if let Some(k) = args.top_k {
        config.localizer.cap = k;
    }
    if let Some(l) = args.l_max {
        config.localizer.l_max = l;
    }
    let issue = read_issue(&config, args.issue)?;
    let (index, root) = open_index(&config, args.index, args.repo, false)?;
    let run_dir = run_dir(&config);
    check_run_dir(&root, &run_dir).map_err(|e| Failure::config(e.into()))?;
    let gateway = gateway(&config, &run_dir).map_err(backend_failure)?;
    let loc =
        run_localize(&config, &index, &root, &issue, &gateway, Some(&args.out)).map_err(|f| {
            Failure {
                code: f.kind.exit_code() as u8,
                error: f.into(),
            }
        })?;
    println!(
        "{} candidate files, selected {}, {} edit locations -> {}",
        loc.candidates.len(),
        loc.selection.files.join(", "),
        loc.plan.elements.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_fix(mut config: RunConfig, args: FixArgs) -> Result<(), Failure> {
    if let Some(t) = &args.temps {
        config.engine.temperatures =
            parse_temperatures(t).map_err(|e| Failure::config(e.into()))?;
    }
    if let Some(k) = args.k {
        config
            .set_candidate_count(k)
            .map_err(|e| Failure::config(e.into()))?;
    }
    if let Some(r) = args.retry {
        config.engine.retry_budget = r;
        config.localizer.retry_budget = r;
    }
    config.keep_workspaces |= args.keep_workspaces;
    if args.out.is_some() {
        config.run_dir = args.out.clone();
    }
    let issue = read_issue(&config, args.issue)?;
    let (index, root) = open_index(&config, args.index, args.repo, args.reindex)?;
    let run_dir = run_dir(&config);
    check_run_dir(&root, &run_dir).map_err(|e| Failure::config(e.into()))?;
    let gateway = gateway(&config, &run_dir).map_err(backend_failure)?;
    std::fs::write(run_dir.join("config.toml"), config.to_toml()).context("writing config.toml")?;
    let outcome = run_fix(&FixInputs {
        config: &config,
        index: &index,
        repo_root: &root,
        issue: &issue,
        run_dir: &run_dir,
        gateway: &gateway,
    });
    let report = &outcome.report;
    for c in &report.candidates {
        println!(
            "candidate {} (t={}): {}{}",
            c.index,
            c.temperature,
            serde_json::to_value(c.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            if c.selected { " [chosen]" } else { "" }
        );
    }
    match &report.failure {
        None => {
            println!(
                "chosen patch written to {}",
                run_dir.join("chosen.patch").display()
            );
            Ok(())
        }
        Some(f) => Err(Failure {
            code: f.kind.exit_code() as u8,
            error: anyhow!("{f}; see {}", run_dir.join("report.json").display()),
        }),
    }
}

fn cmd_eval(config: RunConfig, args: EvalArgs) -> Result<(), Failure> {
    let instances = load_instances(&args.instances, args.checkouts.as_deref())
        .map_err(|e| Failure::config(anyhow!(e)))?;
    let run_dir = run_dir(&config);
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let transcript = config
        .transcript
        .clone()
        .unwrap_or_else(|| run_dir.join(TRANSCRIPT_FILE));
    let mode = if args.fix {
        EvalMode::Fix
    } else {
        EvalMode::Localize
    };
    let make = |_: &pinpatch_core::pipeline::EvalInstance| {
        Gateway::new(config.backend, transport(&config), Some(&transcript))
    };
    let report = run_eval(&instances, &config, mode, &run_dir.join("eval"), &make);
    let out = args.out.unwrap_or_else(|| run_dir.join("eval_report.json"));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    for r in &report.instances {
        match &r.error {
            Some(e) => println!("{}: error: {e}", r.instance_id),
            None => println!("{}: top1={} top5={}", r.instance_id, r.top1_hit, r.top5_hit),
        }
    }
    let fmt = |p: Option<f64>| p.map_or("n/a".to_string(), |v| format!("{v:.2}%"));
    println!(
        "evaluated {} (errored {}): top-1 {}, top-5 {}, resolved {}, resolved (designated) {}",
        report.evaluated,
        report.errored,
        fmt(report.top1_pct),
        fmt(report.top5_pct),
        fmt(report.resolved_pct),
        fmt(report.resolved_designated_pct)
    );
    Ok(())
}
