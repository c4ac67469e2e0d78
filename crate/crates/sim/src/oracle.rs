//! Runs every oracle over one trace.

use crate::linearizability::{check_linearizability, LinearizabilityViolation};
use crate::liveness::{check_liveness, StuckPoint};
use crate::safety::{check_safety, SafetyViolation};
use crate::scenario::Scenario;
use crate::trace::{EventKind, Trace};
use std::fmt;

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub safety: Vec<SafetyViolation>,
    pub linearizability: Vec<LinearizabilityViolation>,
    /// Empty unless the scenario carries a liveness expectation.
    pub liveness: Vec<StuckPoint>,
    /// The run stopped at the simulator's event budget.
    pub halted: bool,
}

impl Report {
    pub fn is_clean(&self) -> bool {
        self.safety.is_empty() && self.linearizability.is_empty() && self.liveness.is_empty() && !self.halted
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return writeln!(f, "no violations");
        }
        for v in &self.safety {
            writeln!(f, "safety: {v}")?;
        }
        for v in &self.linearizability {
            writeln!(f, "linearizability: {v}")?;
        }
        for v in &self.liveness {
            writeln!(f, "liveness: {v}")?;
        }
        if self.halted {
            writeln!(f, "halted: the run exhausted the event budget")?;
        }
        Ok(())
    }
}

pub fn check(scenario: &Scenario, trace: &Trace) -> Report {
    Report {
        safety: check_safety(trace),
        linearizability: check_linearizability(trace),
        liveness: scenario.liveness.as_ref().map(|l| check_liveness(trace, &scenario.workload, l)).unwrap_or_default(),
        halted: trace.events.iter().any(|e| matches!(e.kind, EventKind::Halted { .. })),
    }
}
