//! Deterministic scenario runs with injected faults.
//!
//! A [`Scenario`] names the components, the scripted inference behind the
//! driver, a workload and a set of faults. [`run_scenario`] plays it out on a
//! single thread under a seed and reports invariant violations, oracle
//! verdicts, stage metrics and digests of the log and the sandbox.

mod builtin;
mod faulty;
mod invariants;
mod metrics;
mod scenario;
mod sim;
mod sweep;

pub use builtin::{
    builtin, builtin_names, delta_logging, executor_kill, hello_task, hot_swap, hot_swap_task_kind,
    protocol_fuzz, TaskKind, DELTA_PROMPT_BYTES, DELTA_TASKS, HOT_SWAP_TASKS_PER_PHASE,
};
pub use faulty::{AppendRecord, FaultyBus};
pub use invariants::{check_run, Execution, Invariant, InvariantChecker, Violation};
pub use metrics::StageMetrics;
pub use scenario::{
    BackendKind, DriverSpec, ExecutorSpec, Fault, FaultKind, Oracle, Scenario, ScenarioError,
    Trigger, VoterSpec, WorkloadAction, WorkloadItem,
};
pub use sim::{run_scenario, tree_digest, OracleResult, ScenarioReport, ScenarioRun, SimError, SIM_EPOCH_MS};
pub use sweep::{crash_point_sweep, SweepReport, SweepRun};
