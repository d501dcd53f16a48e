//! `logctl`: inspect buses, send mail, append policies, run components.
//!
//! Exit codes: 0 success, 1 other failure, 2 permission denied,
//! 3 malformed input, 4 unknown bus.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use agentbus::{
    BusClient, BusError, ClientIdentity, DirSnapshotStore, DurableBus, Entry, PayloadType,
    SharedBus, SyncMode, SystemClock, TypeSet,
};
use clap::{Args, Parser, Subcommand};
use logact::components::ComponentContext;
use logact::config::ComponentConfig;
use logact::harness::{self, Scenario};
use logact::kernel::{resolve_bus, Backend, BusSpec, Kernel, KernelError};
use logact::policy::parse_policy;
use logact::roles::Role;
use logact::runner::{run_loop, DEFAULT_POLL};

const SUMMARY_LIMIT: usize = 200;

#[derive(Parser)]
#[command(name = "logctl", version, about = "Operator tool for agent buses")]
struct Cli {
    /// Identity file used for bus reads and writes.
    #[arg(long, global = true, env = "LOGCTL_IDENTITY")]
    identity: Option<PathBuf>,
    /// Directory holding kernel-managed buses.
    #[arg(long, global = true, env = "LOGCTL_ROOT", default_value = ".")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print entries in position order.
    Tail(TailArgs),
    /// Append a Mail entry.
    Mail {
        bus: String,
        #[arg(long)]
        body: String,
    },
    /// Append a Policy entry from a policy document.
    Policy {
        bus: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Run one component until SIGTERM or SIGINT.
    Run {
        role: Role,
        #[arg(long)]
        config: PathBuf,
    },
    /// Create, list and destroy kernel-managed buses.
    #[command(subcommand)]
    Kernel(KernelCommand),
    /// Run scenarios under the deterministic harness.
    #[command(subcommand)]
    Harness(HarnessCommand),
}

#[derive(Args)]
struct TailArgs {
    bus: String,
    /// Comma separated payload types.
    #[arg(long, value_delimiter = ',')]
    types: Vec<String>,
    #[arg(long)]
    follow: bool,
    /// One JSON record per line.
    #[arg(long)]
    json: bool,
    /// Do not truncate summaries.
    #[arg(long)]
    raw: bool,
}

#[derive(Subcommand)]
enum KernelCommand {
    /// Create a bus from a spec file. Durable buses get one process per
    /// component; in-memory buses are hosted here until signaled.
    Create {
        #[arg(long)]
        spec: PathBuf,
    },
    List,
    Destroy { bus: String },
}

#[derive(Subcommand)]
enum HarnessCommand {
    /// Run a scenario file or a built-in scenario by name.
    Run {
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Print per-stage metrics as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Crash one component at each of its append boundaries.
    Sweep {
        scenario: String,
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// List the built-in scenarios.
    List,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("unknown bus `{0}`")]
    UnknownBus(String),
    #[error("{0}")]
    Failed(String),
    #[error("{0:#}")]
    Other(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Permission(_) => 2,
            CliError::Malformed(_) => 3,
            CliError::UnknownBus(_) => 4,
            CliError::Failed(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<BusError> for CliError {
    fn from(e: BusError) -> Self {
        match e {
            BusError::PermissionDenied { .. } => CliError::Permission(e.to_string()),
            BusError::UnknownType(_) | BusError::EmptyFilter | BusError::InvalidPermissions(_) => {
                CliError::Malformed(e.to_string())
            }
            other => CliError::Other(other.into()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::UnknownBusId(id) => CliError::UnknownBus(id),
            KernelError::InvalidSpec(m) => CliError::Malformed(m),
            KernelError::Bus(b) => b.into(),
            other => CliError::Other(other.into()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("LOGCTL_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("logctl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let root = cli.root.clone();
    match cli.command {
        Command::Tail(args) => {
            let client = open_client(&root, &args.bus, cli.identity.as_deref())?;
            tail(&client, &args)
        }
        Command::Mail { bus, body } => {
            let client = open_client(&root, &bus, cli.identity.as_deref())?;
            let sender = client.identity().client_id.clone();
            let pos = client.append(agentbus::Payload::mail(sender, body))?;
            println!("{pos}");
            Ok(())
        }
        Command::Policy { bus, file } => {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| CliError::Malformed(format!("{}: {e}", file.display())))?;
            let doc = parse_policy(&text).map_err(|e| CliError::Malformed(e.to_string()))?;
            let client = open_client(&root, &bus, cli.identity.as_deref())?;
            let issuer = client.identity().client_id.clone();
            let pos = client.append(doc.to_payload(issuer))?;
            println!("{pos}");
            Ok(())
        }
        Command::Run { role, config } => run_component(&root, role, &config),
        Command::Kernel(k) => kernel(&root, k),
        Command::Harness(h) => harness_cmd(h),
    }
}

fn load_identity(path: Option<&Path>) -> CliResult<ClientIdentity> {
    let path = path.ok_or_else(|| {
        CliError::Malformed("no identity: pass --identity <file> or set LOGCTL_IDENTITY".into())
    })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
    let identity: ClientIdentity = serde_json::from_str(&text)
        .map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
    let p = identity.permissions;
    if !p.pollable.is_subset(p.readable) {
        return Err(CliError::Malformed(format!(
            "{}: pollable types must be readable",
            path.display()
        )));
    }
    Ok(identity)
}

fn open_bus(root: &Path, name: &str, sync: SyncMode) -> CliResult<SharedBus> {
    let path = resolve_bus(root, name).ok_or_else(|| CliError::UnknownBus(name.to_string()))?;
    Ok(Arc::new(DurableBus::open(path, sync)?))
}

fn open_client(root: &Path, bus: &str, identity: Option<&Path>) -> CliResult<BusClient> {
    let identity = load_identity(identity)?;
    Ok(BusClient::new(open_bus(root, bus, SyncMode::Always)?, identity))
}

fn parse_types(names: &[String]) -> CliResult<Option<TypeSet>> {
    if names.is_empty() {
        return Ok(None);
    }
    let mut set = TypeSet::empty();
    for n in names.iter().map(|n| n.trim()).filter(|n| !n.is_empty()) {
        set.insert(n.parse::<PayloadType>()?);
    }
    if set.is_empty() {
        return Err(CliError::Malformed("--types names no type".into()));
    }
    Ok(Some(set))
}

fn render(entry: &Entry, raw: bool) -> String {
    let mut summary = entry.payload.summary().replace('\n', "\\n");
    if !raw {
        if let Some((cut, _)) = summary.char_indices().nth(SUMMARY_LIMIT) {
            summary.truncate(cut);
            summary.push_str("...");
        }
    }
    format!(
        "{}\t{}\t{}\t{}",
        entry.position,
        entry.realtime_ts,
        entry.payload_type(),
        summary
    )
}

fn tail(client: &BusClient, args: &TailArgs) -> CliResult {
    let perms = client.identity().permissions;
    let requested = parse_types(&args.types)?;
    if let Some(types) = requested {
        if let Some(t) = types.iter().find(|t| !perms.can_read(*t)) {
            return Err(CliError::Permission(format!(
                "client `{}` may not read {t} entries",
                client.identity().client_id
            )));
        }
    }
    let wanted = |e: &Entry| requested.is_none_or(|s| s.contains(e.payload_type()));
    let stdout = std::io::stdout();
    let print = |entries: &[Entry]| -> CliResult {
        let mut out = stdout.lock();
        for e in entries.iter().filter(|e| wanted(e)) {
            let line = if args.json { e.to_record_json() } else { render(e, args.raw) };
            if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
                // Closed pipe: the reader is gone.
                std::process::exit(0);
            }
        }
        Ok(())
    };
    let mut cursor = client.tail();
    print(&client.read(0, cursor)?)?;
    if !args.follow {
        return Ok(());
    }
    let filter = requested.unwrap_or(perms.pollable);
    if filter.is_empty() {
        return Err(CliError::Permission(format!(
            "client `{}` may not poll any type",
            client.identity().client_id
        )));
    }
    let stop = signal_flag()?;
    while !stop.load(Ordering::SeqCst) {
        client.poll(cursor, filter, Duration::from_millis(500))?;
        let end = client.tail();
        if end > cursor {
            print(&client.read(cursor, end)?)?;
            cursor = end;
        }
    }
    Ok(())
}

fn signal_flag() -> CliResult<Arc<AtomicBool>> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, flag.clone()).map_err(anyhow::Error::from)?;
    }
    Ok(flag)
}

fn run_component(root: &Path, role: Role, config: &Path) -> CliResult {
    let cfg = ComponentConfig::load(config).map_err(|e| CliError::Malformed(e.to_string()))?;
    if cfg.role.role() != role {
        return Err(CliError::Malformed(format!(
            "{} configures a {}, not a {role}",
            config.display(),
            cfg.role.role()
        )));
    }
    let bus = open_bus(root, &cfg.bus, cfg.sync.into())?;
    let identity = role.identity(&cfg.id);
    let mut ctx = ComponentContext::new(BusClient::new(bus, identity), Arc::new(SystemClock));
    if let Some(s) = &cfg.snapshots {
        let store = DirSnapshotStore::open(&s.dir).map_err(anyhow::Error::from)?;
        ctx = ctx.with_snapshots(Arc::new(store), s.every);
    }
    let mut component = cfg
        .role
        .build(ctx)
        .map_err(|e| CliError::Malformed(e.to_string()))?;
    let stop = signal_flag()?;
    tracing::info!(id = cfg.id, %role, "component running");
    run_loop(component.as_mut(), &stop, DEFAULT_POLL).map_err(|e| CliError::Failed(e.to_string()))
}

fn kernel(root: &Path, cmd: KernelCommand) -> CliResult {
    let exe = std::env::current_exe().map_err(anyhow::Error::from)?;
    let kernel = Kernel::new(root).with_component_binary(exe);
    match cmd {
        KernelCommand::Create { spec } => {
            let spec = BusSpec::load(&spec).map_err(|e| match e {
                KernelError::Io { .. } => CliError::Malformed(e.to_string()),
                other => other.into(),
            })?;
            let hosted_here = spec.backend == Backend::Memory;
            let info = kernel.create_bus(spec)?;
            println!("{}", info.bus_id);
            for c in &info.components {
                match c.pid {
                    Some(pid) => println!("{}\t{}\tpid {pid}", c.id, c.role),
                    None => println!("{}\t{}\tthread", c.id, c.role),
                }
            }
            if hosted_here {
                std::io::stdout().flush().ok();
                let stop = signal_flag()?;
                while !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(Duration::from_millis(100));
                }
                kernel.destroy_bus(&info.bus_id)?;
            }
            Ok(())
        }
        KernelCommand::List => {
            for id in kernel.list_buses() {
                let n = kernel.components(&id).map(|c| c.len()).unwrap_or(0);
                println!("{id}\t{n} component(s)");
            }
            Ok(())
        }
        KernelCommand::Destroy { bus } => Ok(kernel.destroy_bus(&bus)?),
    }
}

fn load_scenario(name: &str) -> CliResult<Scenario> {
    if let Some(s) = harness::builtin(name) {
        return Ok(s);
    }
    if !Path::new(name).is_file() {
        return Err(CliError::Malformed(format!(
            "`{name}` is neither a scenario file nor one of: {}",
            harness::builtin_names().join(", ")
        )));
    }
    Scenario::load(name).map_err(|e| CliError::Malformed(e.to_string()))
}

fn work_dir(given: Option<PathBuf>) -> CliResult<(PathBuf, Option<tempfile::TempDir>)> {
    match given {
        Some(d) => Ok((d, None)),
        None => {
            let t = tempfile::tempdir().map_err(anyhow::Error::from)?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

fn harness_cmd(cmd: HarnessCommand) -> CliResult {
    match cmd {
        HarnessCommand::List => {
            for n in harness::builtin_names() {
                println!("{n}");
            }
            Ok(())
        }
        HarnessCommand::Run {
            scenario,
            seed,
            work_dir: dir,
            json,
            csv,
        } => {
            let scenario = load_scenario(&scenario)?;
            let (dir, _guard) = work_dir(dir)?;
            let run = harness::run_scenario(&scenario, seed, &dir).map_err(anyhow::Error::from)?;
            let report = &run.report;
            if json {
                println!("{}", serde_json::to_string_pretty(report).map_err(anyhow::Error::from)?);
            } else if csv {
                print!("{}", report.metrics.to_csv());
            } else {
                println!("{}", report.summary());
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Failed(format!("scenario `{}` failed", report.scenario)))
            }
        }
        HarnessCommand::Sweep {
            scenario,
            component,
            seed,
            work_dir: dir,
            json,
        } => {
            let scenario = load_scenario(&scenario)?;
            if !scenario.component_names().contains(&component) {
                return Err(CliError::Malformed(format!(
                    "no component `{component}` in `{}`",
                    scenario.name
                )));
            }
            let (dir, _guard) = work_dir(dir)?;
            let report = harness::crash_point_sweep(&scenario, &component, seed, &dir)
                .map_err(anyhow::Error::from)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
            } else {
                for r in &report.runs {
                    println!(
                        "crash after {:>3}: {}  {}",
                        r.crash_after,
                        if r.passed { "ok  " } else { "FAIL" },
                        r.summary
                    );
                }
            }
            match report.first_failure() {
                None => Ok(()),
                Some(r) => Err(CliError::Failed(format!(
                    "crash after {} appends broke the run",
                    r.crash_after
                ))),
            }
        }
    }
}
