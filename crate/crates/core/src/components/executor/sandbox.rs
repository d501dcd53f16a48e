//! Running actions inside a directory jail.
//!
//! Shell actions run as `sh -c <body>` with the working directory inside the
//! sandbox, a cleared environment and no stdin. Builtin actions are a small
//! command set whose path arguments must stay inside the sandbox:
//!
//! | builtin | effect |
//! |---|---|
//! | `echo <text>` | returns the text |
//! | `write <path> <text>` | replaces the file with the text and a newline |
//! | `append <path> <text>` | appends the text and a newline |
//! | `read <path>` | returns the file contents |
//! | `count_lines <path>` | `Found N existing lines in <path>` (0 if missing) |
//! | `rm <path>` | removes a file |
//! | `list [dir]` | sorted directory listing |
//! | `process_items <path> <from> <to>` | appends `item-<i>` for each i in from..=to |
//! | `fail <text>` | an error result |

use std::fs::{self, OpenOptions};
use std::io::{Read, Write};
use std::path::{Component as PathPart, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use agentbus::{ActionKind, ActionSpec, ResultStatus};
use thiserror::Error;
use wait_timeout::ChildExt;

/// Called before every side effect; returning false kills the executor on
/// the spot, before the effect happens.
pub type SideEffectHook = Box<dyn FnMut() -> bool + Send>;

const MAX_OUTPUT: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox violation: {0}")]
    Violation(String),
    #[error("killed before a side effect")]
    Killed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionOutcome {
    pub status: ResultStatus,
    pub output: String,
}

impl ActionOutcome {
    fn ok(output: impl Into<String>) -> Self {
        ActionOutcome {
            status: ResultStatus::Ok,
            output: output.into(),
        }
    }

    fn error(output: impl Into<String>) -> Self {
        ActionOutcome {
            status: ResultStatus::Error,
            output: output.into(),
        }
    }
}

pub struct Sandbox {
    root: PathBuf,
    timeout: Duration,
    hook: Option<SideEffectHook>,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("root", &self.root)
            .field("timeout", &self.timeout)
            .finish()
    }
}

/// Resolves `.` and `..` without touching the filesystem.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for part in path.components() {
        match part {
            PathPart::ParentDir => {
                out.pop();
            }
            PathPart::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

impl Sandbox {
    pub fn new(root: impl AsRef<Path>) -> std::io::Result<Self> {
        fs::create_dir_all(root.as_ref())?;
        Ok(Sandbox {
            root: root.as_ref().canonicalize()?,
            timeout: Duration::from_secs(60),
            hook: None,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_hook(mut self, hook: SideEffectHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn side_effect(&mut self) -> Result<(), SandboxError> {
        let alive = self.hook.as_mut().is_none_or(|h| h());
        if alive {
            Ok(())
        } else {
            Err(SandboxError::Killed)
        }
    }

    /// Maps `rel` (relative to `base`) into the jail.
    fn jail(&self, base: &Path, rel: &str) -> Result<PathBuf, SandboxError> {
        if Path::new(rel).is_absolute() {
            return Err(SandboxError::Violation(format!("absolute path `{rel}`")));
        }
        let candidate = normalize(&base.join(rel));
        if !candidate.starts_with(&self.root) {
            return Err(SandboxError::Violation(format!("`{rel}` escapes the sandbox")));
        }
        // Follow symlinks for the deepest existing ancestor.
        let mut probe = candidate.as_path();
        while !probe.exists() {
            match probe.parent() {
                Some(p) => probe = p,
                None => break,
            }
        }
        if let Ok(real) = probe.canonicalize() {
            if !real.starts_with(&self.root) {
                return Err(SandboxError::Violation(format!("`{rel}` leaves the sandbox via a link")));
            }
        }
        Ok(candidate)
    }

    pub fn run(&mut self, action: &ActionSpec) -> Result<ActionOutcome, SandboxError> {
        let root = self.root.clone();
        let workdir = self.jail(&root, &action.workdir)?;
        if !workdir.is_dir() {
            return Ok(ActionOutcome::error(format!(
                "workdir `{}` does not exist",
                action.workdir
            )));
        }
        match action.kind {
            ActionKind::Shell => self.shell(&workdir, &action.body),
            ActionKind::Builtin => self.builtin(&workdir, &action.body),
        }
    }

    fn shell(&mut self, workdir: &Path, body: &str) -> Result<ActionOutcome, SandboxError> {
        self.side_effect()?;
        let mut child = match Command::new("sh")
            .arg("-c")
            .arg(body)
            .current_dir(workdir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", &self.root)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return Ok(ActionOutcome::error(format!("spawn failed: {e}"))),
        };
        let drain = |r: Option<Box<dyn Read + Send>>| {
            std::thread::spawn(move || {
                let mut buf = Vec::new();
                if let Some(mut r) = r {
                    let _ = r.read_to_end(&mut buf);
                }
                buf
            })
        };
        let out = drain(child.stdout.take().map(|s| Box::new(s) as Box<dyn Read + Send>));
        let err = drain(child.stderr.take().map(|s| Box::new(s) as Box<dyn Read + Send>));
        let status = match child.wait_timeout(self.timeout) {
            Ok(Some(s)) => Some(s),
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                None
            }
            Err(e) => return Ok(ActionOutcome::error(format!("wait failed: {e}"))),
        };
        let mut text = String::from_utf8_lossy(&out.join().unwrap_or_default()).into_owned();
        let stderr = String::from_utf8_lossy(&err.join().unwrap_or_default()).into_owned();
        if !stderr.is_empty() {
            text.push_str(&stderr);
        }
        if text.len() > MAX_OUTPUT {
            let mut cut = MAX_OUTPUT;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
            text.push_str("\n[output truncated]");
        }
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        Ok(match status {
            Some(s) if s.success() => {
                text.push_str("[exit 0]");
                ActionOutcome::ok(text)
            }
            Some(s) => {
                text.push_str(&match s.code() {
                    Some(c) => format!("[exit {c}]"),
                    None => "[killed by signal]".to_string(),
                });
                ActionOutcome::error(text)
            }
            None => {
                text.push_str(&format!("[timed out after {} ms]", self.timeout.as_millis()));
                ActionOutcome::error(text)
            }
        })
    }

    fn builtin(&mut self, cwd: &Path, body: &str) -> Result<ActionOutcome, SandboxError> {
        let body = body.trim();
        let (cmd, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        let rest = rest.trim_start();
        let (arg, text) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        let need_path = |arg: &str| {
            if arg.is_empty() {
                Err(format!("`{cmd}` needs a path"))
            } else {
                Ok(())
            }
        };
        macro_rules! try_usage {
            ($e:expr) => {
                if let Err(msg) = $e {
                    return Ok(ActionOutcome::error(msg));
                }
            };
        }
        let io_err = |e: std::io::Error| ActionOutcome::error(format!("{cmd}: {e}"));
        Ok(match cmd {
            "echo" => ActionOutcome::ok(rest),
            "fail" => ActionOutcome::error(rest),
            "write" | "append" => {
                try_usage!(need_path(arg));
                let path = self.jail(cwd, arg)?;
                self.side_effect()?;
                let res = (|| {
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    let mut f = OpenOptions::new()
                        .create(true)
                        .write(true)
                        .append(cmd == "append")
                        .truncate(cmd == "write")
                        .open(&path)?;
                    writeln!(f, "{text}")
                })();
                match res {
                    Ok(()) => ActionOutcome::ok(format!("{cmd} {arg}: {} bytes", text.len() + 1)),
                    Err(e) => io_err(e),
                }
            }
            "read" => {
                try_usage!(need_path(arg));
                match fs::read_to_string(self.jail(cwd, arg)?) {
                    Ok(s) => ActionOutcome::ok(s),
                    Err(e) => io_err(e),
                }
            }
            "count_lines" => {
                try_usage!(need_path(arg));
                let n = match fs::read_to_string(self.jail(cwd, arg)?) {
                    Ok(s) => s.lines().count(),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
                    Err(e) => return Ok(io_err(e)),
                };
                ActionOutcome::ok(format!("Found {n} existing lines in {arg}"))
            }
            "rm" => {
                try_usage!(need_path(arg));
                let path = self.jail(cwd, arg)?;
                self.side_effect()?;
                match fs::remove_file(&path) {
                    Ok(()) => ActionOutcome::ok(format!("removed {arg}")),
                    Err(e) => io_err(e),
                }
            }
            "list" => {
                let dir = self.jail(cwd, if arg.is_empty() { "." } else { arg })?;
                match fs::read_dir(&dir) {
                    Ok(rd) => {
                        let mut names: Vec<String> = rd
                            .filter_map(Result::ok)
                            .map(|e| e.file_name().to_string_lossy().into_owned())
                            .collect();
                        names.sort();
                        ActionOutcome::ok(names.join("\n"))
                    }
                    Err(e) => io_err(e),
                }
            }
            "process_items" => {
                let mut parts = text.split_whitespace().map(str::parse::<u64>);
                let (Some(Ok(from)), Some(Ok(to)), None) = (parts.next(), parts.next(), parts.next())
                else {
                    return Ok(ActionOutcome::error("usage: process_items <path> <from> <to>"));
                };
                try_usage!(need_path(arg));
                let path = self.jail(cwd, arg)?;
                let mut done = 0u64;
                for i in from..=to {
                    self.side_effect()?;
                    let res = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .and_then(|mut f| writeln!(f, "item-{i}"));
                    if let Err(e) = res {
                        return Ok(io_err(e));
                    }
                    done += 1;
                }
                ActionOutcome::ok(format!("processed items {from}..{to} ({done} items) into {arg}"))
            }
            other => ActionOutcome::error(format!("unknown builtin `{other}`")),
        })
    }
}
