//! Checkpoint protocols and the predicates used to judge them.
//!
//! Two things are distinguished throughout: what a protocol *declares* (its
//! decision) and what the trace shows actually happened (the final epoch
//! vector and the convergence predicate evaluated over the event history).

mod battery;
mod bilateral;
mod faults;
mod naive;
mod retry;

use std::fmt;

use serde::Serialize;

pub use battery::{compare_protocols, Comparison, ComparisonConfig, ProtocolTally};
pub use bilateral::{run_bilateral, BilateralConfig};
pub use faults::{CrashPlan, CrashSpec, FaultProfile};
pub use naive::{run_naive, NaiveCheckpointConfig};
pub use retry::{
    attempt_failure_probability, geometric_expected_attempts, run_retry_loop, InnerProtocol,
    RetryModel, RetryStats,
};

use crate::lattice::{AtomicityClass, EpochVector};
use crate::persistence::{Directive, PersistenceStage};
use crate::sim::{ComponentId, EventKind, Message, Target, Trace, VirtualTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Naive,
    Bilateral,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::Naive => "naive",
            ProtocolKind::Bilateral => "bilateral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "decision", content = "epoch", rename_all = "snake_case")]
pub enum Decision {
    Committed(u64),
    RolledBack(u64),
    NoDecision,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Committed(e) => write!(f, "committed({e})"),
            Decision::RolledBack(e) => write!(f, "rolled_back({e})"),
            Decision::NoDecision => f.write_str("no_decision"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub protocol: ProtocolKind,
    pub epoch: u64,
    pub decision: Decision,
    pub final_vector: EpochVector,
    /// Naive protocol only: the true vector at the declared boundary.
    pub boundary_vector: Option<EpochVector>,
    /// Components left without a directive when the coordinator never decided.
    pub blocked: Vec<ComponentId>,
    pub trace: Trace,
}

impl ProtocolOutcome {
    pub fn vector_class(&self) -> AtomicityClass {
        self.final_vector.classify()
    }

    /// The decision claims a commit the final state does not back up.
    pub fn disagrees(&self) -> bool {
        matches!(self.decision, Decision::Committed(_)) && self.vector_class() != AtomicityClass::Top
    }

    pub fn record(&self, attempts: u32) -> OutcomeRecord {
        OutcomeRecord {
            protocol: self.protocol,
            seed: self.trace.seed,
            decision: self.decision,
            vector_class: self.vector_class(),
            attempts,
        }
    }
}

/// Exported form of a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OutcomeRecord {
    pub protocol: ProtocolKind,
    pub seed: u64,
    #[serde(flatten)]
    pub decision: Decision,
    pub vector_class: AtomicityClass,
    pub attempts: u32,
}

/// Which trace events count as a component durably committing the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitEvidence {
    /// The persist itself reached its durable point (metadata written).
    DurableWrite,
    /// A `commit(e)` directive was applied.
    Directive,
}

fn commits_at(event: &crate::sim::Event, epoch: u64, evidence: CommitEvidence) -> Option<ComponentId> {
    let Target::Component(c) = event.target else {
        return None;
    };
    let hit = match (&event.kind, evidence) {
        (
            EventKind::LocalStep {
                stage: PersistenceStage::MetadataUpdate,
                ..
            },
            CommitEvidence::DurableWrite,
        ) => true,
        (
            EventKind::Deliver(Message::Directive {
                directive: Directive::Commit,
                epoch: e,
            }),
            CommitEvidence::Directive,
        ) => *e == epoch,
        _ => false,
    };
    hit.then_some(c)
}

/// Convergence as a trace property: every component has an applied commit
/// event for `epoch` somewhere in the history. Committed states are stable,
/// so once all `n` have committed no later event can undo it.
pub fn conv_holds(trace: &Trace, n: usize, epoch: u64, evidence: CommitEvidence) -> bool {
    first_conv_time(trace, n, epoch, evidence).is_some()
}

/// Earliest prefix (by virtual time of its last event) at which convergence holds.
pub fn first_conv_time(trace: &Trace, n: usize, epoch: u64, evidence: CommitEvidence) -> Option<VirtualTime> {
    let mut seen = vec![false; n];
    let mut remaining = n;
    for event in trace.applied() {
        if let Some(c) = commits_at(event, epoch, evidence) {
            if c.0 < n && !seen[c.0] {
                seen[c.0] = true;
                remaining -= 1;
                if remaining == 0 {
                    return Some(event.time);
                }
            }
        }
    }
    None
}

/// The instant predicate: all components committed at clock time `t`.
pub fn snap_at(trace: &Trace, t: VirtualTime, n: usize, epoch: u64, evidence: CommitEvidence) -> bool {
    first_conv_time(trace, n, epoch, evidence).is_some_and(|c| c <= t)
}
