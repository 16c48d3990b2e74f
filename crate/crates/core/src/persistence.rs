//! Per-component persistence state machine.
//!
//! A component that receives a checkpoint signal walks through the staged
//! durable-write sequence below. A crash interrupts the sequence and leaves
//! stable storage in one of three conditions, decided by the stage the crash
//! landed in (see [`DurabilityMap`]).
//!
//! In tentative mode (used by the bilateral protocol) a completed write is
//! staged rather than published: it survives crashes, and only a coordinator
//! directive turns it into a stable commit or discards it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::PersistError;
use crate::lattice::EpochPoint;
use crate::sim::ComponentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PersistenceStage {
    Idle,
    BufferFlush,
    DmaTransfer,
    WriteSyscall,
    Fsync,
    MetadataUpdate,
    Done,
}

impl PersistenceStage {
    pub const ALL: [PersistenceStage; 7] = [
        PersistenceStage::Idle,
        PersistenceStage::BufferFlush,
        PersistenceStage::DmaTransfer,
        PersistenceStage::WriteSyscall,
        PersistenceStage::Fsync,
        PersistenceStage::MetadataUpdate,
        PersistenceStage::Done,
    ];

    /// Stages that take time, i.e. everything a persist walks through after
    /// leaving `Idle` and before reaching `Done`.
    pub const TIMED: [PersistenceStage; 5] = [
        PersistenceStage::BufferFlush,
        PersistenceStage::DmaTransfer,
        PersistenceStage::WriteSyscall,
        PersistenceStage::Fsync,
        PersistenceStage::MetadataUpdate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn next(self) -> Option<PersistenceStage> {
        Self::ALL.get(self.index() + 1).copied()
    }
}

impl fmt::Display for PersistenceStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// What a component's stable storage reflects for the epoch under way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ComponentEpochState {
    /// Epoch `epoch` is durably stored.
    Committed { epoch: u64 },
    /// Only the earlier epoch `epoch` is reflected.
    Prior { epoch: u64 },
    /// Cannot tell which epoch is reflected without outside help.
    Ambiguous,
}

impl ComponentEpochState {
    /// Position on the epoch lattice relative to the attempted epoch.
    pub fn lattice_point(self, attempted: u64) -> EpochPoint {
        match self {
            ComponentEpochState::Committed { epoch } if epoch == attempted => EpochPoint::E,
            ComponentEpochState::Committed { .. } | ComponentEpochState::Prior { .. } => {
                EpochPoint::EMinus1
            }
            ComponentEpochState::Ambiguous => EpochPoint::Bottom,
        }
    }
}

impl fmt::Display for ComponentEpochState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentEpochState::Committed { epoch } => write!(f, "committed({epoch})"),
            ComponentEpochState::Prior { epoch } => write!(f, "prior({epoch})"),
            ComponentEpochState::Ambiguous => f.write_str("ambiguous"),
        }
    }
}

/// Epistemic category of stable storage after a crash in a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CrashOutcome {
    Prior,
    Ambiguous,
    Committed,
}

/// Stage → crash outcome table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurabilityMap {
    outcomes: [CrashOutcome; 7],
}

impl Default for DurabilityMap {
    fn default() -> Self {
        use CrashOutcome::*;
        DurabilityMap {
            outcomes: [Prior, Prior, Prior, Ambiguous, Ambiguous, Committed, Committed],
        }
    }
}

impl DurabilityMap {
    /// Builds a map, rejecting tables that are not monotone along the stage
    /// order or that do not end in `Committed`.
    pub fn new(outcomes: [CrashOutcome; 7]) -> Result<Self, PersistError> {
        if outcomes[PersistenceStage::Idle.index()] != CrashOutcome::Prior {
            return Err(PersistError::NonMonotoneMap(
                "Idle must map to Prior".to_string(),
            ));
        }
        if outcomes[PersistenceStage::Done.index()] != CrashOutcome::Committed {
            return Err(PersistError::NonMonotoneMap(
                "Done must map to Committed".to_string(),
            ));
        }
        for pair in PersistenceStage::ALL.windows(2) {
            let (a, b) = (outcomes[pair[0].index()], outcomes[pair[1].index()]);
            if b < a {
                return Err(PersistError::NonMonotoneMap(format!(
                    "{:?}→{a:?} followed by {:?}→{b:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(DurabilityMap { outcomes })
    }

    pub fn outcome(&self, stage: PersistenceStage) -> CrashOutcome {
        self.outcomes[stage.index()]
    }

    pub fn is_monotone(&self) -> bool {
        self.outcomes.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Outcome of a crash during a direct persist of `epoch` under the default map.
pub fn crash_outcome(stage: PersistenceStage, epoch: u64) -> ComponentEpochState {
    resolve(DurabilityMap::default().outcome(stage), epoch)
}

fn resolve(outcome: CrashOutcome, epoch: u64) -> ComponentEpochState {
    match outcome {
        CrashOutcome::Prior => ComponentEpochState::Prior {
            epoch: epoch.saturating_sub(1),
        },
        CrashOutcome::Ambiguous => ComponentEpochState::Ambiguous,
        CrashOutcome::Committed => ComponentEpochState::Committed { epoch },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersistMode {
    /// Completion publishes the epoch immediately.
    Direct,
    /// Completion stages the epoch; a directive decides it.
    Tentative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Commit,
    Rollback,
}

/// Coarse view of a process for reports and assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessStatus {
    Idle,
    Persisting(PersistenceStage),
    Tentative(u64),
    Settled(ComponentEpochState),
}

#[derive(Debug, Clone)]
pub struct PersistenceProcess {
    id: ComponentId,
    up: bool,
    stage: PersistenceStage,
    mode: PersistMode,
    epoch: Option<u64>,
    durable: ComponentEpochState,
    tentative: Option<u64>,
    directive: Option<(Directive, u64)>,
    incarnation: u64,
}

impl PersistenceProcess {
    pub fn new(id: ComponentId, base_epoch: u64) -> Self {
        PersistenceProcess {
            id,
            up: true,
            stage: PersistenceStage::Idle,
            mode: PersistMode::Direct,
            epoch: None,
            durable: ComponentEpochState::Prior { epoch: base_epoch },
            tentative: None,
            directive: None,
            incarnation: 0,
        }
    }

    pub fn id(&self) -> ComponentId {
        self.id
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    pub fn stage(&self) -> PersistenceStage {
        self.stage
    }

    pub fn mode(&self) -> PersistMode {
        self.mode
    }

    pub fn epoch(&self) -> Option<u64> {
        self.epoch
    }

    /// Bumped on every crash and abort; stage events carry it so that steps
    /// scheduled by an interrupted persist are recognisably stale.
    pub fn incarnation(&self) -> u64 {
        self.incarnation
    }

    pub fn tentative(&self) -> Option<u64> {
        self.tentative
    }

    pub fn directive(&self) -> Option<(Directive, u64)> {
        self.directive
    }

    pub fn is_persisting(&self) -> bool {
        !matches!(self.stage, PersistenceStage::Idle | PersistenceStage::Done)
    }

    pub fn status(&self) -> ProcessStatus {
        if self.is_persisting() {
            ProcessStatus::Persisting(self.stage)
        } else if let (Some(e), None) = (self.tentative, self.directive) {
            ProcessStatus::Tentative(e)
        } else if self.stage == PersistenceStage::Idle && self.epoch.is_none() {
            ProcessStatus::Idle
        } else {
            ProcessStatus::Settled(self.durable)
        }
    }

    /// What recovery would read from stable storage right now.
    pub fn durable_state(&self, map: &DurabilityMap) -> ComponentEpochState {
        match (self.is_persisting(), self.epoch) {
            (true, Some(epoch)) => match (self.mode, map.outcome(self.stage)) {
                (PersistMode::Direct, outcome) => resolve(outcome, epoch),
                (PersistMode::Tentative, CrashOutcome::Prior) => self.durable,
                (PersistMode::Tentative, _) => ComponentEpochState::Ambiguous,
            },
            _ => {
                if self.tentative.is_some() && self.directive.is_none() {
                    ComponentEpochState::Ambiguous
                } else {
                    self.durable
                }
            }
        }
    }

    pub fn begin(&mut self, epoch: u64, mode: PersistMode) -> Result<(), PersistError> {
        if !self.up {
            return Err(PersistError::Down { component: self.id });
        }
        if self.is_persisting() {
            return Err(PersistError::AlreadyPersisting {
                component: self.id,
                stage: self.stage,
            });
        }
        self.stage = PersistenceStage::BufferFlush;
        self.mode = mode;
        self.epoch = Some(epoch);
        self.tentative = None;
        self.directive = None;
        Ok(())
    }

    /// Moves to `to`, which must be the stage directly after the current one.
    pub fn advance(&mut self, to: PersistenceStage) -> Result<(), PersistError> {
        if !self.is_persisting() || self.stage.next() != Some(to) {
            return Err(PersistError::StageOrder {
                component: self.id,
                from: self.stage,
                to,
            });
        }
        self.stage = to;
        if to == PersistenceStage::Done {
            let epoch = self.epoch.expect("persisting implies an epoch");
            match self.mode {
                PersistMode::Direct => {
                    self.durable = ComponentEpochState::Committed { epoch };
                }
                PersistMode::Tentative => self.tentative = Some(epoch),
            }
        }
        Ok(())
    }

    /// Crash: interrupts any persist in flight. Returns `false` if already down.
    pub fn crash(&mut self, map: &DurabilityMap) -> bool {
        if !self.up {
            return false;
        }
        self.up = false;
        if self.is_persisting() {
            let epoch = self.epoch.expect("persisting implies an epoch");
            let outcome = map.outcome(self.stage);
            match self.mode {
                PersistMode::Direct => self.durable = resolve(outcome, epoch),
                PersistMode::Tentative => match outcome {
                    CrashOutcome::Committed => self.tentative = Some(epoch),
                    CrashOutcome::Ambiguous => self.durable = ComponentEpochState::Ambiguous,
                    CrashOutcome::Prior => {}
                },
            }
            self.stage = PersistenceStage::Idle;
        }
        self.incarnation += 1;
        true
    }

    /// Returns `false` if the component was already up.
    pub fn recover(&mut self) -> bool {
        if self.up {
            return false;
        }
        self.up = true;
        true
    }

    /// Resolves a tentative persist. Re-applying the same directive is a no-op.
    pub fn apply_directive(&mut self, directive: Directive, epoch: u64) -> Result<(), PersistError> {
        let expected = self.epoch.unwrap_or(epoch);
        if expected != epoch {
            return Err(PersistError::WrongEpoch {
                component: self.id,
                expected,
                got: epoch,
            });
        }
        if self.directive == Some((directive, epoch)) {
            return Ok(());
        }
        match directive {
            Directive::Commit => {
                if self.tentative != Some(epoch) {
                    return Err(PersistError::NoTentative {
                        component: self.id,
                        epoch,
                    });
                }
                self.durable = ComponentEpochState::Committed { epoch };
            }
            Directive::Rollback => {
                if self.durable == (ComponentEpochState::Committed { epoch }) {
                    return Err(PersistError::RevertCommitted {
                        component: self.id,
                        epoch,
                    });
                }
                if self.is_persisting() {
                    self.stage = PersistenceStage::Idle;
                    self.incarnation += 1;
                }
                self.tentative = None;
                self.durable = ComponentEpochState::Prior {
                    epoch: epoch.saturating_sub(1),
                };
            }
        }
        self.epoch = Some(epoch);
        self.directive = Some((directive, epoch));
        Ok(())
    }
}
