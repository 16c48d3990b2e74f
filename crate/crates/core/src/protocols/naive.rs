use crate::error::SimError;
use crate::lattice::EpochVector;
use crate::persistence::PersistMode;
use crate::sim::{Handler, Message, Simulation, Target, Timer, VirtualTime};

use super::{Decision, ProtocolKind, ProtocolOutcome};

/// The temporal-boundary protocol: signal everyone, then declare the epoch
/// committed once the clock reaches `boundary`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NaiveCheckpointConfig {
    pub epoch: u64,
    pub boundary: VirtualTime,
}

impl NaiveCheckpointConfig {
    pub fn new(epoch: u64, boundary: VirtualTime) -> Self {
        NaiveCheckpointConfig { epoch, boundary }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.boundary.0 == 0 {
            return Err(SimError::InvalidConfig("boundary time must be positive".into()));
        }
        Ok(())
    }
}

struct Naive {
    epoch: u64,
    boundary_states: Option<Vec<crate::persistence::ComponentEpochState>>,
}

impl Handler for Naive {
    fn on_deliver(&mut self, sim: &mut Simulation, to: Target, msg: &Message) -> Result<(), SimError> {
        if let (Target::Component(c), Message::Checkpoint { epoch }) = (to, msg) {
            sim.begin_persist(c, *epoch, PersistMode::Direct)?;
        }
        Ok(())
    }

    fn on_timer(&mut self, sim: &mut Simulation, _target: Target, timer: Timer) -> Result<(), SimError> {
        if timer == Timer::Boundary {
            self.boundary_states = Some(sim.durable_states());
        }
        Ok(())
    }
}

/// Runs the naive protocol on `sim` (crashes may already be injected).
///
/// The decision is `Committed` unconditionally; the outcome also carries the
/// vector actually observed at the boundary and after quiescence.
pub fn run_naive(sim: &mut Simulation, config: &NaiveCheckpointConfig) -> Result<ProtocolOutcome, SimError> {
    config.validate()?;
    let start = sim.now();
    sim.broadcast(&Message::Checkpoint { epoch: config.epoch })?;
    sim.set_timer(Target::Coordinator, start + config.boundary.0, Timer::Boundary)?;
    let mut handler = Naive {
        epoch: config.epoch,
        boundary_states: None,
    };
    let trace = sim.run(&mut handler)?;
    Ok(ProtocolOutcome {
        protocol: ProtocolKind::Naive,
        epoch: config.epoch,
        decision: Decision::Committed(config.epoch),
        final_vector: trace.vector(config.epoch),
        boundary_vector: handler
            .boundary_states
            .map(|s| EpochVector::from_states(&s, handler.epoch)),
        blocked: Vec::new(),
        trace,
    })
}
