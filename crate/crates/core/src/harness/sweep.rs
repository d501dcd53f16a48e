//! Crash a component at every one of its append boundaries in turn.

use std::path::Path;

use serde::Serialize;

use super::invariants::Violation;
use super::scenario::{Fault, FaultKind, Scenario, Trigger};
use super::sim::{run_scenario, SimError};

#[derive(Debug, Clone, Serialize)]
pub struct SweepRun {
    /// The component was crashed right after this many of its own appends.
    pub crash_after: u64,
    pub passed: bool,
    pub oracles_passed: bool,
    pub violations: Vec<Violation>,
    pub replay_mismatches: Vec<String>,
    pub summary: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub component: String,
    /// Appends the component made in the fault-free baseline.
    pub baseline_appends: u64,
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.passed)
    }

    /// The first crash point that broke something.
    pub fn first_failure(&self) -> Option<&SweepRun> {
        self.runs.iter().find(|r| !r.passed)
    }
}

fn owned_by(component: &str, client_id: &str) -> bool {
    if component == "driver" {
        client_id.starts_with("driver-")
    } else {
        client_id == component
    }
}

/// Runs `scenario` once without faults to count `component`'s appends, then
/// once per boundary `0..=n` with a crash (and recovery) at that boundary.
pub fn crash_point_sweep(
    scenario: &Scenario,
    component: &str,
    seed: u64,
    work_dir: &Path,
) -> Result<SweepReport, SimError> {
    let mut clean = scenario.clone();
    clean.faults.clear();
    let baseline = run_scenario(&clean, seed, &work_dir.join("baseline"))?;
    let n = baseline
        .records
        .iter()
        .filter(|r| owned_by(component, &r.client.client_id))
        .count() as u64;
    let mut runs = Vec::new();
    for k in 0..=n {
        let mut s = clean.clone();
        s.faults.push(Fault::new(
            Trigger::ClientAppends {
                target: component.to_string(),
                count: k,
            },
            component,
            FaultKind::Crash,
        ));
        let run = run_scenario(&s, seed, &work_dir.join(format!("crash-{k}")))?;
        let r = run.report;
        runs.push(SweepRun {
            crash_after: k,
            passed: r.passed(),
            oracles_passed: r.oracles_passed(),
            summary: r.summary(),
            violations: r.violations,
            replay_mismatches: r.replay_mismatches,
        });
    }
    Ok(SweepReport {
        scenario: scenario.name.clone(),
        component: component.to_string(),
        baseline_appends: n,
        runs,
    })
}
