//! Adversarial schedules.
//!
//! [`construct_straddling`] builds a delay assignment under which one
//! component is still mid-persist at a chosen boundary instant while the
//! others finish early. [`witness_mixed`] crashes that component at the
//! boundary under the naive protocol and checks the resulting vector is
//! mixed. [`search_schedules`] is a generic directed-plus-random search used
//! for both checkpoints and firmware deploys.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::AdversaryError;
use crate::lattice::{AtomicityClass, EpochVector};
use crate::persistence::PersistenceStage;
use crate::protocols::{
    run_bilateral, run_naive, BilateralConfig, CrashPlan, CrashSpec, FaultProfile,
    NaiveCheckpointConfig, ProtocolKind, ProtocolOutcome,
};
use crate::sim::{
    derive_seed, AdversarialSchedule, ComponentId, DelayKey, DelayPolicy, EventKind, SimConfig,
    Simulation, Target, Trace, VirtualTime,
};

/// Delay of every message and stage not singled out by a schedule.
const BASE_DELAY: u64 = 1;

/// Earliest tick any component can reach `Done`: one message hop plus one
/// tick per timed stage.
pub const EARLIEST_COMPLETION: u64 = BASE_DELAY * (1 + PersistenceStage::TIMED.len() as u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StraddlingSchedule {
    pub components: usize,
    pub straddler: ComponentId,
    pub boundary: VirtualTime,
    pub delays: AdversarialSchedule,
    /// A component that reaches `Done` strictly before the boundary. Only
    /// possible once the boundary is past [`EARLIEST_COMPLETION`].
    pub early_completer: Option<ComponentId>,
}

impl StraddlingSchedule {
    /// Tick at which `c` receives the checkpoint and enters `BufferFlush`.
    pub fn begin(&self, c: ComponentId) -> VirtualTime {
        VirtualTime(self.delays.get(&DelayKey::Message {
            to: Target::Component(c),
            nth: 0,
        }))
    }

    /// Tick at which `c` reaches `Done` if nothing crashes.
    pub fn complete(&self, c: ComponentId) -> VirtualTime {
        let stages: u64 = PersistenceStage::TIMED
            .iter()
            .map(|&stage| self.delays.get(&DelayKey::Stage { component: c, stage }))
            .sum();
        self.begin(c) + stages
    }

    /// Stage `c` occupies at tick `t` if nothing crashes.
    pub fn stage_at(&self, c: ComponentId, t: VirtualTime) -> PersistenceStage {
        let mut at = self.begin(c);
        if t < at {
            return PersistenceStage::Idle;
        }
        for stage in PersistenceStage::TIMED {
            at = at + self.delays.get(&DelayKey::Stage { component: c, stage });
            if t < at {
                return stage;
            }
        }
        PersistenceStage::Done
    }

    pub fn check_invariants(&self) -> Result<(), AdversaryError> {
        let bad = |m: String| Err(AdversaryError::Invariant(m));
        if self.delays.fallback == 0 || self.delays.delays.values().any(|&d| d == 0) {
            return bad("zero delay".into());
        }
        let j = self.straddler;
        if !(self.begin(j) < self.boundary && self.boundary < self.complete(j)) {
            return bad(format!(
                "{j} persists over [{}, {}], which does not straddle {}",
                self.begin(j).0,
                self.complete(j).0,
                self.boundary
            ));
        }
        match self.early_completer {
            Some(i) if i == j => bad(format!("early completer {i} is the straddler")),
            Some(i) if self.complete(i) >= self.boundary => {
                bad(format!("{i} completes at {} (not before {})", self.complete(i).0, self.boundary))
            }
            None if self.boundary.0 > EARLIEST_COMPLETION => bad("missing early completer".into()),
            _ => Ok(()),
        }
    }
}

/// Builds a schedule where component `j` straddles `t_c`.
///
/// All other components get one-tick delays and finish at
/// [`EARLIEST_COMPLETION`]. From `t_c ≥ 4` on, `j` enters `WriteSyscall` one
/// tick before `t_c` and stays there two ticks, so a crash at `t_c` is
/// ambiguous. For `t_c` of 2 or 3 there is no room for that and `j` instead
/// starts at `t_c − 1` with a two-tick `BufferFlush`.
pub fn construct_straddling(n: usize, j: usize, t_c: u64) -> Result<StraddlingSchedule, AdversaryError> {
    if n < 2 {
        return Err(AdversaryError::TooFewComponents(n));
    }
    if j >= n {
        return Err(AdversaryError::TargetOutOfRange { target: j, n });
    }
    if t_c < 2 {
        return Err(AdversaryError::BoundaryTooEarly(t_c));
    }
    let cj = ComponentId(j);
    let to = Target::Component(cj);
    let mut delays = AdversarialSchedule::new(BASE_DELAY);
    let stage = |stage| DelayKey::Stage { component: cj, stage };
    if t_c >= 4 {
        delays.set(DelayKey::Message { to, nth: 0 }, t_c - 3);
        delays.set(stage(PersistenceStage::WriteSyscall), 2);
    } else {
        delays.set(DelayKey::Message { to, nth: 0 }, t_c - 1);
        delays.set(stage(PersistenceStage::BufferFlush), 2);
    }
    let early_completer = (t_c > EARLIEST_COMPLETION).then(|| ComponentId((j + 1) % n));
    let s = StraddlingSchedule {
        components: n,
        straddler: cj,
        boundary: VirtualTime(t_c),
        delays,
        early_completer,
    };
    s.check_invariants()?;
    Ok(s)
}

/// What to do to the straddler when replaying a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StraddleCrash {
    AtBoundary,
    /// Crash right after the persist completes.
    OnDone,
    None,
}

/// Runs the naive protocol under `schedule` with the given crash.
pub fn run_straddle(schedule: &StraddlingSchedule, crash: StraddleCrash, epoch: u64) -> Result<ProtocolOutcome, AdversaryError> {
    let config = SimConfig::new(schedule.components, DelayPolicy::Adversarial(schedule.delays.clone()), 0);
    let mut sim = Simulation::new(config)?;
    match crash {
        StraddleCrash::AtBoundary => {
            sim.inject_crash(Target::Component(schedule.straddler), schedule.boundary)?;
        }
        StraddleCrash::OnDone => sim.crash_on_entering(schedule.straddler, PersistenceStage::Done)?,
        StraddleCrash::None => {}
    }
    Ok(run_naive(&mut sim, &NaiveCheckpointConfig::new(epoch, schedule.boundary))?)
}

#[derive(Debug, Clone)]
pub struct MixedWitness {
    pub schedule: StraddlingSchedule,
    pub crash: (ComponentId, VirtualTime),
    pub resulting_vector: EpochVector,
    pub outcome: ProtocolOutcome,
}

/// Crashes the last component at `t_c` while it straddles the boundary.
pub fn witness_mixed(n: usize, t_c: u64) -> Result<MixedWitness, AdversaryError> {
    witness_mixed_for(n, n.saturating_sub(1), t_c)
}

pub fn witness_mixed_for(n: usize, j: usize, t_c: u64) -> Result<MixedWitness, AdversaryError> {
    let schedule = construct_straddling(n, j, t_c)?;
    let outcome = run_straddle(&schedule, StraddleCrash::AtBoundary, 1)?;
    let vector = outcome.final_vector.clone();
    if vector.classify() != AtomicityClass::Mixed {
        return Err(AdversaryError::NotAWitness {
            boundary: t_c,
            vector: vector.to_string(),
        });
    }
    Ok(MixedWitness {
        crash: (schedule.straddler, schedule.boundary),
        schedule,
        resulting_vector: vector,
        outcome,
    })
}

impl MixedWitness {
    /// Event-by-event explanation of the straddle and the crash.
    pub fn narrative(&self) -> String {
        let s = &self.schedule;
        let j = s.straddler;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{j} persists over [{}, {}] across the boundary {}",
            s.begin(j).0,
            s.complete(j).0,
            s.boundary
        );
        match s.early_completer {
            Some(i) => {
                let _ = writeln!(out, "{i} completes at t={}, before the boundary", s.complete(i).0);
            }
            None => {
                let _ = writeln!(
                    out,
                    "no component can finish before t={EARLIEST_COMPLETION}; the others complete after the boundary"
                );
            }
        }
        let _ = writeln!(out, "{j} crashes at {} in {}", s.boundary, s.stage_at(j, s.boundary));
        out.push_str(&narrate_trace(&self.outcome.trace));
        let _ = writeln!(
            out,
            "declared {}, final vector {} ({})",
            self.outcome.decision,
            self.resulting_vector,
            self.resulting_vector.classify()
        );
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let events: Vec<serde_json::Value> = self
            .outcome
            .trace
            .to_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).expect("trace lines are JSON"))
            .collect();
        serde_json::json!({
            "components": self.schedule.components,
            "straddler": self.schedule.straddler.to_string(),
            "boundary": self.schedule.boundary.0,
            "early_completer": self.schedule.early_completer.map(|c| c.to_string()),
            "crash": { "component": self.crash.0.to_string(), "time": self.crash.1.0 },
            "decision": self.outcome.decision,
            "vector": self.resulting_vector.to_string(),
            "class": self.resulting_vector.classify().to_string(),
            "trace_hash": format!("{:016x}", self.outcome.trace.hash()),
            "trace": events,
        })
    }
}

/// One line per processed event; skipped events are marked.
pub fn narrate_trace(trace: &Trace) -> String {
    let mut out = String::new();
    for e in &trace.entries {
        let ev = &e.event;
        let what = match &ev.kind {
            EventKind::Deliver(m) => format!("receives {m}"),
            EventKind::LocalStep { stage, .. } => format!("enters {stage}"),
            EventKind::Crash => "crashes".to_string(),
            EventKind::Recover => "recovers".to_string(),
            EventKind::TimerFire(t) => format!("timer {t}"),
        };
        let skipped = if e.applied { "" } else { " (no effect)" };
        let _ = writeln!(out, "  {:>8} {:<12} {what}{skipped}", ev.time.to_string(), ev.target.to_string());
    }
    out
}

/// A protocol plus a way to generate and execute candidate schedules.
pub trait ScheduleTarget: Sync {
    type Candidate: Clone + fmt::Debug + Send;
    type Run: Send;

    /// A candidate aimed at the known weak spot.
    fn directed(&self, rng: &mut ChaCha8Rng) -> Self::Candidate;
    fn random(&self, rng: &mut ChaCha8Rng) -> Self::Candidate;
    fn execute(&self, candidate: &Self::Candidate) -> Result<Self::Run, AdversaryError>;
}

#[derive(Debug)]
pub enum SearchOutcome<C, R> {
    Found { index: u64, candidate: C, run: R },
    Exhausted { tried: u64 },
}

impl<C, R> SearchOutcome<C, R> {
    pub fn is_found(&self) -> bool {
        matches!(self, SearchOutcome::Found { .. })
    }
}

const SEARCH_CHUNK: u64 = 256;

/// Candidate `i` of the stream seeded with `seed`: directed at even indices,
/// random at odd ones.
pub fn nth_candidate<T: ScheduleTarget>(target: &T, seed: u64, i: u64) -> T::Candidate {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
    if i % 2 == 0 {
        target.directed(&mut rng)
    } else {
        target.random(&mut rng)
    }
}

/// Tries up to `budget` candidates, alternating directed (even indices) and
/// random ones, and returns the lowest-index run satisfying `predicate`.
pub fn search_schedules<T, P>(
    target: &T,
    predicate: P,
    budget: u64,
    seed: u64,
) -> Result<SearchOutcome<T::Candidate, T::Run>, AdversaryError>
where
    T: ScheduleTarget,
    P: Fn(&T::Run) -> bool + Sync,
{
    if budget == 0 {
        return Err(AdversaryError::ZeroBudget);
    }
    let attempt = |i: u64| -> Result<Option<(u64, T::Candidate, T::Run)>, AdversaryError> {
        let candidate = nth_candidate(target, seed, i);
        let run = target.execute(&candidate)?;
        Ok(predicate(&run).then_some((i, candidate, run)))
    };
    let mut lo = 0;
    while lo < budget {
        let hi = (lo + SEARCH_CHUNK).min(budget);
        let hit = (lo..hi)
            .into_par_iter()
            .map(attempt)
            .find_first(|r| !matches!(r, Ok(None)));
        match hit {
            Some(Ok(Some((index, candidate, run)))) => return Ok(SearchOutcome::Found { index, candidate, run }),
            Some(Err(e)) => return Err(e),
            _ => lo = hi,
        }
    }
    Ok(SearchOutcome::Exhausted { tried: budget })
}

/// Checkpoint protocols as a search target.
#[derive(Debug, Clone)]
pub struct CheckpointSearch {
    pub components: usize,
    pub protocol: ProtocolKind,
    pub epoch: u64,
    /// Directed candidates draw their boundary from `2..=max_boundary`.
    pub max_boundary: u64,
    pub ack_timeout: u64,
}

impl CheckpointSearch {
    pub fn new(components: usize, protocol: ProtocolKind) -> Self {
        CheckpointSearch {
            components,
            protocol,
            epoch: 1,
            max_boundary: 60,
            ack_timeout: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointCandidate {
    pub seed: u64,
    pub delays: AdversarialSchedule,
    pub crashes: CrashPlan,
    pub boundary: u64,
}

impl ScheduleTarget for CheckpointSearch {
    type Candidate = CheckpointCandidate;
    type Run = ProtocolOutcome;

    fn directed(&self, rng: &mut ChaCha8Rng) -> CheckpointCandidate {
        let n = self.components;
        if n < 2 {
            return self.random(rng);
        }
        let j = rng.random_range(0..n);
        let t_c = rng.random_range(2..=self.max_boundary.max(2));
        let s = construct_straddling(n, j, t_c).expect("parameters are in range");
        CheckpointCandidate {
            seed: rng.random(),
            delays: s.delays,
            crashes: CrashPlan {
                crashes: vec![CrashSpec::At {
                    target: Target::Component(s.straddler),
                    time: s.boundary,
                }],
            },
            boundary: t_c,
        }
    }

    fn random(&self, rng: &mut ChaCha8Rng) -> CheckpointCandidate {
        let n = self.components;
        let mut delays = AdversarialSchedule::new(rng.random_range(1..=5));
        for i in 0..n {
            let c = ComponentId(i);
            delays.set(DelayKey::Message { to: Target::Component(c), nth: 0 }, rng.random_range(1..=20));
            for stage in PersistenceStage::TIMED {
                delays.set(DelayKey::Stage { component: c, stage }, rng.random_range(1..=10));
            }
        }
        let boundary = rng.random_range(1..=self.max_boundary.max(1));
        let mut faults = FaultProfile::every_stage(0.3);
        faults.window = 2 * self.max_boundary;
        CheckpointCandidate {
            seed: rng.random(),
            crashes: CrashPlan::random(n, &faults, rng),
            delays,
            boundary,
        }
    }

    fn execute(&self, c: &CheckpointCandidate) -> Result<ProtocolOutcome, AdversaryError> {
        let config = SimConfig::new(self.components, DelayPolicy::Adversarial(c.delays.clone()), c.seed);
        let mut sim = Simulation::new(config)?;
        c.crashes.apply(&mut sim)?;
        let out = match self.protocol {
            ProtocolKind::Naive => run_naive(&mut sim, &NaiveCheckpointConfig::new(self.epoch, VirtualTime(c.boundary)))?,
            ProtocolKind::Bilateral => run_bilateral(&mut sim, &BilateralConfig::new(self.epoch, self.ack_timeout))?,
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::EpochPoint;
    use proptest::prelude::*;

    #[test]
    fn straddle_with_large_boundary() {
        let s = construct_straddling(2, 1, 100).unwrap();
        assert!(s.complete(ComponentId(0)).0 <= 99);
        assert!(s.begin(ComponentId(1)).0 <= 99);
        assert!(s.complete(ComponentId(1)).0 >= 101);
        assert_eq!(s.early_completer, Some(ComponentId(0)));
    }

    #[test]
    fn minimal_boundary() {
        let s = construct_straddling(2, 1, 2).unwrap();
        assert_eq!(s.begin(ComponentId(1)), VirtualTime(1));
        assert!(s.complete(ComponentId(1)).0 >= 3);
        assert_eq!(s.early_completer, None);
    }

    #[test]
    fn huge_instance() {
        let s = construct_straddling(4000, 2719, 1_000_000).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.stage_at(s.straddler, s.boundary), PersistenceStage::WriteSyscall);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(construct_straddling(1, 0, 10), Err(AdversaryError::TooFewComponents(1))));
        assert!(matches!(construct_straddling(2, 2, 10), Err(AdversaryError::TargetOutOfRange { .. })));
        assert!(matches!(construct_straddling(2, 0, 1), Err(AdversaryError::BoundaryTooEarly(1))));
    }

    #[test]
    fn witness_two_components() {
        let w = witness_mixed(2, 100).unwrap();
        let e = w.resulting_vector.entries();
        assert_eq!(e[0], EpochPoint::E);
        assert!(matches!(e[1], EpochPoint::Bottom | EpochPoint::EMinus1));
        assert!(w.narrative().contains("crashes"));
        assert_eq!(w.to_json()["class"], "mixed");
    }

    #[test]
    fn small_boundary_witness_is_prior() {
        let w = witness_mixed(2, 3).unwrap();
        assert_eq!(w.resulting_vector.entries()[1], EpochPoint::EMinus1);
    }

    #[test]
    fn crash_after_done_is_not_a_witness() {
        let s = construct_straddling(2, 1, 100).unwrap();
        let out = run_straddle(&s, StraddleCrash::OnDone, 1).unwrap();
        assert_eq!(out.vector_class(), AtomicityClass::Top);
        let out = run_straddle(&s, StraddleCrash::None, 1).unwrap();
        assert_eq!(out.vector_class(), AtomicityClass::Top);
    }

    #[test]
    fn search_always_false_exhausts() {
        let t = CheckpointSearch::new(3, ProtocolKind::Naive);
        let r = search_schedules(&t, |_| false, 10, 1).unwrap();
        assert!(matches!(r, SearchOutcome::Exhausted { tried: 10 }));
        assert!(search_schedules(&t, |_| false, 0, 1).is_err());
    }

    #[test]
    fn search_finds_naive_mixed_first_try() {
        let t = CheckpointSearch::new(3, ProtocolKind::Naive);
        let r = search_schedules(&t, |o| o.vector_class() == AtomicityClass::Mixed, 100, 7).unwrap();
        match r {
            SearchOutcome::Found { index, .. } => assert_eq!(index, 0),
            SearchOutcome::Exhausted { .. } => panic!("no witness"),
        }
    }

    #[test]
    fn search_is_deterministic() {
        let t = CheckpointSearch::new(4, ProtocolKind::Naive);
        let pick = |r: SearchOutcome<CheckpointCandidate, ProtocolOutcome>| match r {
            SearchOutcome::Found { index, run, .. } => (index, run.trace.hash()),
            SearchOutcome::Exhausted { .. } => (u64::MAX, 0),
        };
        // odd-index hits only: random candidates
        let pred = |o: &ProtocolOutcome| o.vector_class() == AtomicityClass::BottomAll;
        let a = pick(search_schedules(&t, pred, 2000, 3).unwrap());
        let b = pick(search_schedules(&t, pred, 2000, 3).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn straddling_invariants_hold(n in 2usize..200, jr in 0usize..1000, t_c in 2u64..100_000) {
            let s = construct_straddling(n, jr % n, t_c).unwrap();
            prop_assert!(s.check_invariants().is_ok());
            prop_assert!(s.begin(s.straddler) < s.boundary);
            prop_assert!(s.boundary < s.complete(s.straddler));
        }

        #[test]
        fn every_boundary_yields_a_witness(n in 2usize..12, t_c in 2u64..500) {
            let w = witness_mixed(n, t_c).unwrap();
            prop_assert_eq!(w.resulting_vector.classify(), AtomicityClass::Mixed);
        }
    }
}
