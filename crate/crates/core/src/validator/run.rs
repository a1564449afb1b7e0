use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use super::{
    parse_junit, parse_line_protocol, ReportFormat, TestReport, TestRunnerConfig, ValidatorError,
};

const TAIL_CHARS: usize = 4000;

fn tail(text: &str) -> String {
    let count = text.chars().count();
    if count <= TAIL_CHARS {
        return text.to_string();
    }
    text.chars().skip(count - TAIL_CHARS).collect()
}

fn substitute(arg: &str, workspace: &Path) -> String {
    arg.replace("{workspace}", &workspace.to_string_lossy())
}

fn drain(mut pipe: impl Read + Send + 'static) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

/// Runs the configured suite in `workspace` and parses its report. The
/// runner is killed together with its process group on timeout.
pub fn run_suite(
    workspace: &Path,
    config: &TestRunnerConfig,
) -> Result<TestReport, ValidatorError> {
    config.validate()?;
    let argv: Vec<String> = config
        .command
        .iter()
        .map(|a| substitute(a, workspace))
        .collect();
    let report_file = config.report_path.as_ref().map(|p| {
        let p = substitute(p, workspace);
        let path = Path::new(&p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            workspace.join(path)
        }
    });
    if let Some(file) = &report_file {
        let _ = std::fs::remove_file(file);
    }

    let started = Instant::now();
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(workspace)
        .envs(&config.env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ValidatorError::CommandNotFound(argv[0].clone()),
            _ => ValidatorError::Io(format!("cannot start `{}`: {e}", argv[0])),
        })?;
    let stdout = drain(child.stdout.take().expect("stdout piped"));
    let stderr = drain(child.stderr.take().expect("stderr piped"));

    let timeout = Duration::from_secs(config.timeout_secs);
    let status = child
        .wait_timeout(timeout)
        .map_err(|e| ValidatorError::Io(e.to_string()))?;
    let timed_out = status.is_none();
    let status = match status {
        Some(s) => s,
        None => {
            // SAFETY: kill(2) on our own child's process group has no memory effects.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            child
                .wait()
                .map_err(|e| ValidatorError::Io(e.to_string()))?
        }
    };
    let wall_time = started.elapsed().as_secs_f64();
    let out = String::from_utf8_lossy(&stdout.join().unwrap_or_default()).into_owned();
    let err = String::from_utf8_lossy(&stderr.join().unwrap_or_default()).into_owned();

    let (parsed, read_problem) = match config.report_format {
        ReportFormat::LineProtocol => (parse_line_protocol(&out), None),
        ReportFormat::JunitXml => match &report_file {
            None => (parse_junit(&out), None),
            Some(file) => match std::fs::read_to_string(file) {
                Ok(xml) => (parse_junit(&xml), None),
                Err(e) => (
                    Default::default(),
                    Some(format!("report {}: {e}", file.display())),
                ),
            },
        },
    };

    let mut diagnostic = None;
    if timed_out {
        diagnostic = Some(format!("runner exceeded {}s timeout", config.timeout_secs));
    } else if status.code().is_none() {
        diagnostic = Some(format!("runner terminated abnormally ({status})"));
    } else if let Some(p) = read_problem.or(parsed.problem.clone()) {
        diagnostic = Some(p);
    } else if parsed.outcomes.is_empty() && status.code() != Some(0) {
        diagnostic = Some(format!("runner exited with {status} and reported no tests"));
    }
    let truncated = diagnostic.is_some();
    if truncated && !timed_out {
        tracing::warn!(workspace = %workspace.display(), diagnostic = ?diagnostic, "test report unusable");
    }
    Ok(TestReport {
        outcomes: parsed.outcomes,
        messages: parsed.messages,
        wall_time,
        truncated,
        diagnostic,
        exit_code: status.code(),
        output_tail: tail(&format!("{out}{err}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validator::Outcome;

    fn sh(script: &str, timeout_secs: u64) -> TestRunnerConfig {
        TestRunnerConfig {
            command: vec!["/bin/sh".into(), "-c".into(), script.into()],
            timeout_secs,
            ..TestRunnerConfig::default()
        }
    }

    #[test]
    fn fake_runner_line_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_suite(dir.path(), &sh("printf 't1 pass\\nt2 fail\\n'; exit 1", 10)).unwrap();
        assert!(!r.truncated);
        assert_eq!(r.outcomes.len(), 2);
        assert_eq!(r.outcomes["t1"], Outcome::Pass);
        assert_eq!(r.outcomes["t2"], Outcome::Fail);
        assert_eq!(r.exit_code, Some(1));
    }

    #[test]
    fn empty_stream_is_truncated_only_on_failure_exit() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_suite(dir.path(), &sh("true", 10)).unwrap();
        assert!(r.outcomes.is_empty());
        assert!(!r.truncated);
        let r = run_suite(dir.path(), &sh("exit 139", 10)).unwrap();
        assert!(r.truncated);
    }

    #[test]
    fn timeout_kills_the_group() {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let r = run_suite(dir.path(), &sh("echo 't1 pass'; sleep 30 & sleep 30", 1)).unwrap();
        assert!(r.truncated);
        assert_eq!(r.outcomes.len(), 1);
        assert!(started.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn missing_command_and_bad_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TestRunnerConfig {
            command: vec!["definitely-not-a-runner-xyz".into()],
            ..TestRunnerConfig::default()
        };
        assert!(matches!(
            run_suite(dir.path(), &cfg),
            Err(ValidatorError::CommandNotFound(_))
        ));
        let r = run_suite(dir.path(), &sh("echo 'Segmentation fault'", 10)).unwrap();
        assert!(r.truncated);
    }

    #[test]
    fn workspace_substitution_and_junit_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TestRunnerConfig {
            command: vec![
                "/bin/sh".into(),
                "-c".into(),
                "cd {workspace} && printf '<testsuite><testcase classname=\"c\" name=\"n\"/></testsuite>' > out.xml".into(),
            ],
            report_format: ReportFormat::JunitXml,
            report_path: Some("out.xml".into()),
            ..TestRunnerConfig::default()
        };
        let r = run_suite(dir.path(), &cfg).unwrap();
        assert!(!r.truncated, "{:?}", r.diagnostic);
        assert_eq!(r.outcomes["c::n"], Outcome::Pass);
    }
}
