//! The control plane: creates buses and optionally stands components up on
//! them.
//!
//! A bus spec picks the backend and which components the kernel runs:
//!
//! ```json
//! {
//!   "bus_id": "demo",
//!   "backend": {"kind": "durable"},
//!   "auto_decider": {"policy": {"expr": "first_voter"}},
//!   "auto_voters": [{"id": "rule-1", "voter_type": "rule", "behavior": "rule", "rules": []}],
//!   "spawn": {"driver": {"adapter": {"adapter": "echo"}}, "executor": {}, "task": "say hi"}
//! }
//! ```
//!
//! Durable buses live under the kernel root:
//!
//! ```text
//! <root>/<bus_id>/spec.json         registry record, removed on destroy
//! <root>/<bus_id>/bus.log           the bus; never deleted
//! <root>/<bus_id>/pids.json         component processes
//! <root>/<bus_id>/components/*.json component configs
//! <root>/<bus_id>/logs/*.log        component process output
//! <root>/<bus_id>/snapshots/        component snapshots
//! <root>/<bus_id>/sandbox/          default executor sandbox
//! ```
//!
//! With a component binary configured, components of durable buses run as
//! separate processes (`<binary> run <role> --config <file>`); otherwise they
//! run as threads of the calling process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use agentbus::{
    BusClient, BusError, ClientIdentity, Clock, DirSnapshotStore, DurableBus, MemoryBus,
    Payload, PayloadType, Position, SharedBus, SyncMode, SystemClock,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::components::ComponentContext;
use crate::config::{
    ComponentConfig, DeciderConfig, DriverConfig, ExecutorConfig, RoleConfig, SnapshotConfig,
    SyncChoice, VoterConfig,
};
use crate::roles::Role;
use crate::runner::{ComponentHandle, DEFAULT_POLL};

const SNAPSHOT_EVERY: u64 = 64;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("bus `{0}` already exists")]
    DuplicateBusId(String),
    #[error("unknown bus `{0}`")]
    UnknownBusId(String),
    #[error("invalid bus spec: {0}")]
    InvalidSpec(String),
    #[error("failed to start components: {0}")]
    SpawnFailure(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> KernelError {
    let context = context.into();
    move |source| KernelError::Io { context, source }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Memory,
    /// Defaults to `<root>/<bus_id>/bus.log`.
    Durable {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterDescriptor {
    pub id: String,
    #[serde(flatten)]
    pub config: VoterConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpawnExecutor {
    /// Defaults to `<root>/<bus_id>/sandbox`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpawnSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor: Option<SpawnExecutor>,
    /// Delivered as the first mail once the components are up.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub bus_id: String,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_decider: Option<DeciderConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub auto_voters: Vec<VoterDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn: Option<SpawnSpec>,
    /// Extra identities declared for external clients.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub identities: Vec<ClientIdentity>,
}

impl BusSpec {
    /// A bus with no components.
    pub fn raw(bus_id: impl Into<String>) -> Self {
        BusSpec {
            bus_id: bus_id.into(),
            backend: Backend::Memory,
            auto_decider: None,
            auto_voters: Vec::new(),
            spawn: None,
            identities: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KernelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| KernelError::InvalidSpec(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let invalid = |m: String| Err(KernelError::InvalidSpec(m));
        if self.bus_id.is_empty()
            || !self
                .bus_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.bus_id.starts_with('.')
        {
            return invalid(format!("bus id `{}` must be [A-Za-z0-9._-]+", self.bus_id));
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in self.component_configs_unrooted() {
            if !ids.insert(c.0.clone()) {
                return invalid(format!("component id `{}` used twice", c.0));
            }
        }
        if self.spawn.is_some()
            && self.auto_decider.is_none()
            && !self
                .identities
                .iter()
                .any(|i| i.permissions.can_append(PayloadType::Commit))
        {
            return invalid("spawn needs auto_decider or an identity that may append Commit".into());
        }
        Ok(())
    }

    /// (id, settings) of every component the spec asks for, sandbox unresolved.
    fn component_configs_unrooted(&self) -> Vec<(String, RoleConfig)> {
        let mut out = Vec::new();
        if let Some(d) = &self.auto_decider {
            out.push(("decider".to_string(), RoleConfig::Decider(d.clone())));
        }
        for v in &self.auto_voters {
            out.push((v.id.clone(), RoleConfig::Voter(v.config.clone())));
        }
        if let Some(spawn) = &self.spawn {
            if let Some(d) = &spawn.driver {
                out.push(("driver".to_string(), RoleConfig::Driver(d.clone())));
            }
            if let Some(x) = &spawn.executor {
                out.push((
                    "executor".to_string(),
                    RoleConfig::Executor(ExecutorConfig {
                        sandbox: x.sandbox.clone().unwrap_or_default(),
                        action_timeout_ms: x.action_timeout_ms.unwrap_or(60_000),
                    }),
                ));
            }
        }
        out
    }
}

/// A component the kernel started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnedComponent {
    pub id: String,
    pub role: Role,
    pub identity: ClientIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BusInfo {
    pub bus_id: String,
    pub path: Option<PathBuf>,
    pub components: Vec<SpawnedComponent>,
}

enum Running {
    Thread(ComponentHandle),
    Process(Child),
}

struct Hosted {
    bus: SharedBus,
    path: Option<PathBuf>,
    components: Vec<(SpawnedComponent, Running)>,
}

impl Hosted {
    fn shutdown(&mut self) {
        for (c, run) in self.components.drain(..) {
            match run {
                Running::Thread(h) => {
                    if let Err(e) = h.stop() {
                        tracing::info!(component = c.id, error = %e, "component ended with error");
                    }
                }
                Running::Process(mut child) => {
                    terminate(child.id());
                    let _ = child.wait();
                }
            }
        }
    }
}

fn terminate(pid: u32) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGTERM);
    }
}

pub struct Kernel {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    component_binary: Option<PathBuf>,
    poll: Duration,
    hosted: Mutex<BTreeMap<String, Hosted>>,
}

/// Finds a bus by path or by id under `root`.
pub fn resolve_bus(root: &Path, name: &str) -> Option<PathBuf> {
    let direct = Path::new(name);
    if direct.is_file() {
        return Some(direct.to_path_buf());
    }
    let under_root = root.join(name).join("bus.log");
    under_root.is_file().then_some(under_root)
}

impl Kernel {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Kernel {
            root: root.into(),
            clock: Arc::new(SystemClock),
            component_binary: None,
            poll: DEFAULT_POLL,
            hosted: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Runs components of durable buses as processes of this binary.
    pub fn with_component_binary(mut self, path: impl Into<PathBuf>) -> Self {
        self.component_binary = Some(path.into());
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn bus_dir(&self, bus_id: &str) -> PathBuf {
        self.root.join(bus_id)
    }

    fn registered_on_disk(&self, bus_id: &str) -> bool {
        self.bus_dir(bus_id).join("spec.json").is_file()
    }

    pub fn create_bus(&self, spec: BusSpec) -> Result<BusInfo, KernelError> {
        spec.validate()?;
        let mut hosted = self.hosted.lock().unwrap_or_else(|e| e.into_inner());
        let id = spec.bus_id.clone();
        if hosted.contains_key(&id) || self.registered_on_disk(&id) {
            return Err(KernelError::DuplicateBusId(id));
        }
        let dir = self.bus_dir(&id);
        let (bus, path): (SharedBus, Option<PathBuf>) = match &spec.backend {
            Backend::Memory => (Arc::new(MemoryBus::with_clock(self.clock.clone())), None),
            Backend::Durable { path } => {
                let path = path.clone().unwrap_or_else(|| dir.join("bus.log"));
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(io_err(parent.display().to_string()))?;
                }
                fs::create_dir_all(&dir).map_err(io_err(dir.display().to_string()))?;
                let bus = DurableBus::open_with_clock(&path, SyncMode::Always, self.clock.clone())?;
                let record = serde_json::to_string_pretty(&spec).expect("spec serializes");
                fs::write(dir.join("spec.json"), record).map_err(io_err("writing spec.json"))?;
                (Arc::new(bus), Some(path))
            }
        };
        let mut entry = Hosted {
            bus,
            path,
            components: Vec::new(),
        };
        if let Err(e) = self.start_components(&spec, &mut entry) {
            entry.shutdown();
            let _ = fs::remove_file(dir.join("spec.json"));
            let _ = fs::remove_file(dir.join("pids.json"));
            return Err(e);
        }
        if let Some(task) = spec.spawn.as_ref().and_then(|s| s.task.clone()) {
            BusClient::new(entry.bus.clone(), Role::User.identity("kernel")).append(Payload::mail("kernel", task))?;
        }
        let info = BusInfo {
            bus_id: id.clone(),
            path: entry.path.clone(),
            components: entry.components.iter().map(|(c, _)| c.clone()).collect(),
        };
        hosted.insert(id, entry);
        Ok(info)
    }

    fn start_components(&self, spec: &BusSpec, entry: &mut Hosted) -> Result<(), KernelError> {
        let dir = self.bus_dir(&spec.bus_id);
        let as_process = entry.path.is_some() && self.component_binary.is_some();
        for (id, mut role_cfg) in spec.component_configs_unrooted() {
            if let RoleConfig::Executor(x) = &mut role_cfg {
                if x.sandbox.as_os_str().is_empty() {
                    x.sandbox = dir.join("sandbox");
                }
            }
            let role = role_cfg.role();
            let identity = role.identity(&id);
            let snapshot_dir = dir.join("snapshots");
            let (pid, running) = if as_process {
                let child = self.spawn_process(spec, &id, role_cfg, entry.path.as_deref().unwrap(), &snapshot_dir)?;
                (Some(child.id()), Running::Process(child))
            } else {
                let mut ctx = ComponentContext::new(BusClient::new(entry.bus.clone(), identity.clone()), self.clock.clone());
                if entry.path.is_some() {
                    let store = DirSnapshotStore::open(&snapshot_dir)
                        .map_err(|e| KernelError::SpawnFailure(e.to_string()))?;
                    ctx = ctx.with_snapshots(Arc::new(store), SNAPSHOT_EVERY);
                }
                let component = role_cfg
                    .build(ctx)
                    .map_err(|e| KernelError::SpawnFailure(format!("{id}: {e}")))?;
                (None, Running::Thread(ComponentHandle::spawn(component, self.poll)))
            };
            entry.components.push((
                SpawnedComponent {
                    id,
                    role,
                    identity,
                    pid,
                },
                running,
            ));
        }
        if as_process {
            let pids: Vec<&SpawnedComponent> = entry.components.iter().map(|(c, _)| c).collect();
            fs::write(dir.join("pids.json"), serde_json::to_string_pretty(&pids).expect("pids serialize"))
                .map_err(io_err("writing pids.json"))?;
        }
        Ok(())
    }

    fn spawn_process(
        &self,
        spec: &BusSpec,
        id: &str,
        role: RoleConfig,
        bus_path: &Path,
        snapshot_dir: &Path,
    ) -> Result<Child, KernelError> {
        let dir = self.bus_dir(&spec.bus_id);
        let cfg = ComponentConfig {
            bus: bus_path.display().to_string(),
            id: id.to_string(),
            snapshots: Some(SnapshotConfig {
                dir: snapshot_dir.to_path_buf(),
                every: SNAPSHOT_EVERY,
            }),
            sync: SyncChoice::Always,
            role,
        };
        let role_name = cfg.role.role().to_string();
        let cfg_dir = dir.join("components");
        let log_dir = dir.join("logs");
        for d in [&cfg_dir, &log_dir] {
            fs::create_dir_all(d).map_err(io_err(d.display().to_string()))?;
        }
        let cfg_path = cfg_dir.join(format!("{id}.json"));
        fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).expect("config serializes"))
            .map_err(io_err(cfg_path.display().to_string()))?;
        let log = fs::File::create(log_dir.join(format!("{id}.log"))).map_err(io_err("creating component log"))?;
        let log2 = log.try_clone().map_err(io_err("creating component log"))?;
        let binary = self.component_binary.as_ref().expect("process mode has a binary");
        Command::new(binary)
            .arg("run")
            .arg(&role_name)
            .arg("--config")
            .arg(&cfg_path)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log2)
            .spawn()
            .map_err(|e| KernelError::SpawnFailure(format!("{id}: {}: {e}", binary.display())))
    }

    /// The bus handle of a bus this kernel hosts, or a fresh handle on a
    /// durable bus registered under the root.
    pub fn bus(&self, bus_id: &str) -> Result<SharedBus, KernelError> {
        if let Some(h) = self.hosted.lock().unwrap_or_else(|e| e.into_inner()).get(bus_id) {
            return Ok(h.bus.clone());
        }
        let path = resolve_bus(&self.root, bus_id).ok_or_else(|| KernelError::UnknownBusId(bus_id.to_string()))?;
        Ok(Arc::new(DurableBus::open_with_clock(path, SyncMode::Always, self.clock.clone())?))
    }

    pub fn send_mail(&self, bus_id: &str, sender: &ClientIdentity, body: &str) -> Result<Position, KernelError> {
        let bus = self.bus(bus_id)?;
        Ok(bus.append(sender, Payload::mail(sender.client_id.clone(), body))?)
    }

    pub fn list_buses(&self) -> Vec<String> {
        let mut ids: std::collections::BTreeSet<String> = self
            .hosted
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect();
        if let Ok(rd) = fs::read_dir(&self.root) {
            for e in rd.filter_map(Result::ok) {
                if e.path().join("spec.json").is_file() {
                    ids.insert(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.into_iter().collect()
    }

    /// Components started for `bus_id`, with the identities they hold.
    pub fn components(&self, bus_id: &str) -> Result<Vec<SpawnedComponent>, KernelError> {
        if let Some(h) = self.hosted.lock().unwrap_or_else(|e| e.into_inner()).get(bus_id) {
            return Ok(h.components.iter().map(|(c, _)| c.clone()).collect());
        }
        if !self.registered_on_disk(bus_id) {
            return Err(KernelError::UnknownBusId(bus_id.to_string()));
        }
        Ok(self.recorded_pids(bus_id))
    }

    fn recorded_pids(&self, bus_id: &str) -> Vec<SpawnedComponent> {
        fs::read_to_string(self.bus_dir(bus_id).join("pids.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    /// Stops the bus's components and unregisters it. Bus files stay on disk.
    pub fn destroy_bus(&self, bus_id: &str) -> Result<(), KernelError> {
        let removed = self.hosted.lock().unwrap_or_else(|e| e.into_inner()).remove(bus_id);
        let on_disk = self.registered_on_disk(bus_id);
        match removed {
            Some(mut h) => {
                h.shutdown();
                h.bus.close();
            }
            None if on_disk => {
                for c in self.recorded_pids(bus_id) {
                    if let Some(pid) = c.pid {
                        terminate(pid);
                    }
                }
            }
            None => return Err(KernelError::UnknownBusId(bus_id.to_string())),
        }
        if on_disk {
            let dir = self.bus_dir(bus_id);
            fs::remove_file(dir.join("spec.json")).map_err(io_err("removing spec.json"))?;
            let _ = fs::remove_file(dir.join("pids.json"));
        }
        Ok(())
    }
}

impl Drop for Kernel {
    fn drop(&mut self) {
        let hosted = std::mem::take(self.hosted.get_mut().unwrap_or_else(|e| e.into_inner()));
        for (_, mut h) in hosted {
            // Threads die with the kernel; processes keep running and stay
            // listed in pids.json.
            h.components.retain(|(_, r)| matches!(r, Running::Thread(_)));
            h.shutdown();
        }
    }
}
