//! Two-phase checkpoint commit.
//!
//! Phase one: every component persists tentatively and answers with a
//! `ready` carrying a digest of what it wrote. Phase two: the coordinator
//! commits if all `n` acknowledgments arrive before the timeout and rolls
//! back otherwise. The decision is logged durably at the coordinator.
//!
//! Recovery: a component that comes back without a directive asks the
//! coordinator; a coordinator that comes back with a decision re-broadcasts
//! it. A coordinator that crashes before deciding stays undecided, which is
//! the usual two-phase-commit blocking case and is reported as
//! [`Decision::NoDecision`].

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::error::SimError;
use crate::persistence::{Directive, PersistMode};
use crate::sim::{ComponentId, Handler, Message, Simulation, Target, Timer, VirtualTime};

use super::{Decision, ProtocolKind, ProtocolOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilateralConfig {
    pub epoch: u64,
    /// Ticks after the broadcast by which all acks must have arrived.
    pub ack_timeout: u64,
    /// Reject acks whose digest does not match the expected content.
    pub verify_acks: bool,
    /// Components that report a wrong digest (for exercising verification).
    pub corrupt_acks: BTreeSet<usize>,
}

impl BilateralConfig {
    pub fn new(epoch: u64, ack_timeout: u64) -> Self {
        BilateralConfig {
            epoch,
            ack_timeout,
            verify_acks: false,
            corrupt_acks: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.ack_timeout == 0 {
            return Err(SimError::InvalidConfig("ack timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Digest of the state a component persisted for `epoch`.
pub(crate) fn content_hash(seed: u64, component: ComponentId, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((component.0 as u64).to_le_bytes());
    h.update(epoch.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

struct Bilateral<'a> {
    config: &'a BilateralConfig,
    seed: u64,
    acks: BTreeSet<usize>,
    decision: Option<Directive>,
}

impl Bilateral<'_> {
    fn decide(&mut self, sim: &mut Simulation, directive: Directive) -> Result<(), SimError> {
        self.decision = Some(directive);
        sim.broadcast(&Message::Directive {
            directive,
            epoch: self.config.epoch,
        })
    }
}

impl Handler for Bilateral<'_> {
    fn on_deliver(&mut self, sim: &mut Simulation, to: Target, msg: &Message) -> Result<(), SimError> {
        let epoch = self.config.epoch;
        match (to, msg) {
            (Target::Component(c), Message::Checkpoint { epoch: e }) => {
                // a rollback can overtake a slow checkpoint signal
                if sim.process(c).directive().is_none() {
                    sim.begin_persist(c, *e, PersistMode::Tentative)?;
                }
            }
            (Target::Component(c), Message::Directive { directive, epoch: e }) => {
                sim.apply_directive(c, *directive, *e)?;
            }
            (Target::Coordinator, Message::Ready { from, epoch: e, hash }) => {
                if self.decision.is_some() || *e != epoch {
                    return Ok(());
                }
                if self.config.verify_acks && *hash != content_hash(self.seed, *from, epoch) {
                    return Ok(());
                }
                self.acks.insert(from.0);
                if self.acks.len() == sim.components() {
                    self.decide(sim, Directive::Commit)?;
                }
            }
            (Target::Coordinator, Message::DecisionQuery { from, epoch: e }) => {
                if let (Some(directive), true) = (self.decision, *e == epoch) {
                    sim.send(Target::Component(*from), Message::Directive { directive, epoch })?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn on_timer(&mut self, sim: &mut Simulation, target: Target, timer: Timer) -> Result<(), SimError> {
        if target == Target::Coordinator && timer == Timer::AckTimeout && self.decision.is_none() {
            self.decide(sim, Directive::Rollback)?;
        }
        Ok(())
    }

    fn on_persisted(&mut self, sim: &mut Simulation, component: ComponentId) -> Result<(), SimError> {
        let epoch = self.config.epoch;
        let mut hash = content_hash(self.seed, component, epoch);
        if self.config.corrupt_acks.contains(&component.0) {
            hash = !hash;
        }
        sim.send(Target::Coordinator, Message::Ready {
            from: component,
            epoch,
            hash,
        })?;
        Ok(())
    }

    fn on_recover(&mut self, sim: &mut Simulation, target: Target) -> Result<(), SimError> {
        let epoch = self.config.epoch;
        match target {
            Target::Component(c) => {
                if sim.process(c).directive().is_none() {
                    sim.send(Target::Coordinator, Message::DecisionQuery { from: c, epoch })?;
                }
            }
            Target::Coordinator => {
                if let Some(directive) = self.decision {
                    sim.broadcast(&Message::Directive { directive, epoch })?;
                }
            }
        }
        Ok(())
    }
}

pub fn run_bilateral(sim: &mut Simulation, config: &BilateralConfig) -> Result<ProtocolOutcome, SimError> {
    config.validate()?;
    let start: VirtualTime = sim.now();
    sim.broadcast(&Message::Checkpoint { epoch: config.epoch })?;
    sim.set_timer(Target::Coordinator, start + config.ack_timeout, Timer::AckTimeout)?;
    let mut handler = Bilateral {
        config,
        seed: sim.config().seed,
        acks: BTreeSet::new(),
        decision: None,
    };
    let trace = sim.run(&mut handler)?;
    let decision = match handler.decision {
        Some(Directive::Commit) => Decision::Committed(config.epoch),
        Some(Directive::Rollback) => Decision::RolledBack(config.epoch),
        None => Decision::NoDecision,
    };
    let blocked = sim
        .processes()
        .iter()
        .filter(|p| p.directive().is_none())
        .map(|p| p.id())
        .collect();
    Ok(ProtocolOutcome {
        protocol: ProtocolKind::Bilateral,
        epoch: config.epoch,
        decision,
        final_vector: trace.vector(config.epoch),
        boundary_vector: None,
        blocked,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::AtomicityClass;
    use crate::persistence::{ComponentEpochState, PersistenceStage};
    use crate::protocols::{conv_holds, CommitEvidence};
    use crate::sim::{DelayPolicy, SimConfig};

    fn sim(n: usize, seed: u64) -> Simulation {
        Simulation::new(SimConfig::new(n, DelayPolicy::UniformRandom { lo: 1, hi: 10 }, seed)).unwrap()
    }

    #[test]
    fn two_component_hand_trace() {
        // Fixed(1): checkpoint at 1, stages 1..5 reach Done at 6, ready at 7,
        // commit broadcast arrives at 8.
        let mut s = Simulation::new(SimConfig::new(2, DelayPolicy::Fixed(1), 42)).unwrap();
        let out = run_bilateral(&mut s, &BilateralConfig::new(1, 100)).unwrap();
        assert_eq!(out.decision, Decision::Committed(1));
        assert_eq!(out.vector_class(), AtomicityClass::Top);
        assert!(out.trace.final_states.iter().all(|s| *s == ComponentEpochState::Committed { epoch: 1 }));
        let commit_times: Vec<u64> = out
            .trace
            .applied()
            .filter(|e| matches!(e.kind, crate::sim::EventKind::Deliver(Message::Directive { .. })))
            .map(|e| e.time.0)
            .collect();
        assert_eq!(commit_times, vec![8, 8]);
        assert!(conv_holds(&out.trace, 2, 1, CommitEvidence::Directive));
    }

    #[test]
    fn pre_ack_crash_rolls_back() {
        let mut s = sim(3, 5);
        s.crash_on_entering(ComponentId(1), PersistenceStage::DmaTransfer).unwrap();
        let out = run_bilateral(&mut s, &BilateralConfig::new(1, 100)).unwrap();
        assert_eq!(out.decision, Decision::RolledBack(1));
        assert_eq!(out.vector_class(), AtomicityClass::BottomAll);
        assert!(out.blocked.is_empty());
    }

    #[test]
    fn post_ack_crash_still_converges_to_commit() {
        for seed in 0..20 {
            let mut s = sim(3, seed);
            s.crash_on_entering(ComponentId(2), PersistenceStage::Done).unwrap();
            let out = run_bilateral(&mut s, &BilateralConfig::new(1, 200)).unwrap();
            assert_eq!(out.decision, Decision::Committed(1), "seed {seed}");
            assert_eq!(out.vector_class(), AtomicityClass::Top, "seed {seed}");
        }
    }

    #[test]
    fn post_ack_crash_down_through_directive_replays_on_recovery() {
        // D1 acks, crashes right away and stays down past the commit broadcast
        let mut sched = crate::sim::AdversarialSchedule::new(1);
        sched.set(
            crate::sim::DelayKey::Recovery {
                target: Target::component(1),
            },
            50,
        );
        let mut s = Simulation::new(SimConfig::new(2, DelayPolicy::Adversarial(sched), 1)).unwrap();
        s.crash_on_entering(ComponentId(1), PersistenceStage::Done).unwrap();
        let out = run_bilateral(&mut s, &BilateralConfig::new(1, 30)).unwrap();
        assert_eq!(out.decision, Decision::Committed(1));
        assert_eq!(out.vector_class(), AtomicityClass::Top);
        let dropped = out
            .trace
            .entries
            .iter()
            .any(|e| !e.applied && matches!(e.event.kind, crate::sim::EventKind::Deliver(Message::Directive { .. })));
        assert!(dropped, "directive should have been missed while down");
        assert!(out
            .trace
            .applied()
            .any(|e| matches!(e.kind, crate::sim::EventKind::Deliver(Message::DecisionQuery { .. }))));
    }

    #[test]
    fn slow_ack_times_out() {
        let mut s = Simulation::new(SimConfig::new(2, DelayPolicy::Fixed(10), 1)).unwrap();
        let out = run_bilateral(&mut s, &BilateralConfig::new(1, 20)).unwrap();
        assert_eq!(out.decision, Decision::RolledBack(1));
        assert_eq!(out.vector_class(), AtomicityClass::BottomAll);
    }

    #[test]
    fn corrupted_ack_counts_as_missing_only_when_verified() {
        let mut cfg = BilateralConfig::new(1, 100);
        cfg.corrupt_acks.insert(0);
        let mut s = sim(2, 9);
        assert_eq!(run_bilateral(&mut s, &cfg).unwrap().decision, Decision::Committed(1));
        cfg.verify_acks = true;
        let mut s = sim(2, 9);
        let out = run_bilateral(&mut s, &cfg).unwrap();
        assert_eq!(out.decision, Decision::RolledBack(1));
        assert_eq!(out.vector_class(), AtomicityClass::BottomAll);
    }

    #[test]
    fn coordinator_crash_before_decision_blocks() {
        let mut cfg = SimConfig::new(2, DelayPolicy::Fixed(1), 1);
        cfg.auto_recover = false;
        let mut s = Simulation::new(cfg).unwrap();
        s.inject_crash(Target::Coordinator, VirtualTime(2)).unwrap();
        let out = run_bilateral(&mut s, &BilateralConfig::new(1, 100)).unwrap();
        assert_eq!(out.decision, Decision::NoDecision);
        assert_eq!(out.blocked, vec![ComponentId(0), ComponentId(1)]);
        assert_eq!(out.vector_class(), AtomicityClass::Mixed);
    }

    #[test]
    fn coordinator_crash_after_decision_rebroadcasts() {
        let mut cfg = SimConfig::new(2, DelayPolicy::Fixed(1), 1);
        cfg.auto_recover = true;
        let mut s = Simulation::new(cfg).unwrap();
        // acks land at 7, commit reaches components at 8; D0 and the
        // coordinator crash at 8 ahead of that delivery
        s.inject_crash(Target::component(0), VirtualTime(8)).unwrap();
        s.inject_crash(Target::Coordinator, VirtualTime(8)).unwrap();
        let out = run_bilateral(&mut s, &BilateralConfig::new(1, 100)).unwrap();
        assert_eq!(out.decision, Decision::Committed(1));
        assert_eq!(out.vector_class(), AtomicityClass::Top);
    }
}
