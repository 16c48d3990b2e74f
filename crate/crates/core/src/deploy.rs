//! Firmware transitions across a fleet and the collectives that run during
//! them.
//!
//! The naive deploy pushes F1 at a wall-clock instant and lets collectives run
//! with whatever each node holds. The consensus deploy linearizes the
//! transition through a once-writable register; every node reads it before a
//! collective and sits the collective out (is fenced) if its installed version
//! does not match.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::ScheduleTarget;
use crate::error::{AdversaryError, DeployError, SimError};
use crate::protocols::{CrashPlan, CrashSpec};
use crate::sim::{
    AdversarialSchedule, ComponentId, DelayKey, DelayPolicy, Handler, Message, SimConfig, Simulation, Target,
    Timer, Trace, VirtualTime,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FirmwareEpoch {
    #[default]
    F0,
    F1,
}

impl fmt::Display for FirmwareEpoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FirmwareEpoch::F0 => "F0",
            FirmwareEpoch::F1 => "F1",
        })
    }
}

/// A collective scheduled at `time` over `participants`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveSpec {
    pub id: u32,
    pub time: VirtualTime,
    pub participants: Vec<ComponentId>,
}

impl CollectiveSpec {
    pub fn all(id: u32, time: u64, n: usize) -> Self {
        CollectiveSpec {
            id,
            time: VirtualTime(time),
            participants: (0..n).map(ComponentId).collect(),
        }
    }
}

fn validate_schedule(n: usize, schedule: &[CollectiveSpec]) -> Result<(), DeployError> {
    let mut seen = std::collections::BTreeSet::new();
    for c in schedule {
        if c.participants.is_empty() {
            return Err(DeployError::InvalidConfig(format!("collective #{} has no participants", c.id)));
        }
        if let Some(p) = c.participants.iter().find(|p| p.0 >= n) {
            return Err(DeployError::InvalidConfig(format!("collective #{}: no node {p}", c.id)));
        }
        if !seen.insert(c.id) {
            return Err(DeployError::InvalidConfig(format!("duplicate collective id {}", c.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Participant {
    pub node: ComponentId,
    pub version: FirmwareEpoch,
    pub crashed: bool,
    pub fenced: bool,
}

impl Participant {
    /// Takes part in the collective: up and not fenced.
    pub fn is_correct(&self) -> bool {
        !self.crashed && !self.fenced
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveStatus {
    Executed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CollectiveInstance {
    pub id: u32,
    pub time: VirtualTime,
    pub participants: Vec<Participant>,
    pub status: CollectiveStatus,
}

impl CollectiveInstance {
    pub fn versions(&self) -> Vec<FirmwareEpoch> {
        let mut v: Vec<_> = self
            .participants
            .iter()
            .filter(|p| p.is_correct())
            .map(|p| p.version)
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn is_mixed(&self) -> bool {
        self.status == CollectiveStatus::Executed && self.versions().len() >= 2
    }
}

/// Once-writable linearized register.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecisionRegister {
    pub committed_epoch: Option<FirmwareEpoch>,
    pub decision_time: Option<VirtualTime>,
}

impl DecisionRegister {
    /// Returns `false` (and changes nothing) if already written.
    pub fn write_once(&mut self, version: FirmwareEpoch, at: VirtualTime) -> bool {
        if self.committed_epoch.is_some() {
            return false;
        }
        self.committed_epoch = Some(version);
        self.decision_time = Some(at);
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegisterRead {
    pub node: ComponentId,
    pub time: VirtualTime,
    pub value: Option<FirmwareEpoch>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FencePolicy {
    /// Run without fenced nodes if anyone is left.
    #[default]
    Shrink,
    /// Abort the collective if anyone is fenced.
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployKind {
    Naive,
    Consensus,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeployReport {
    pub kind: DeployKind,
    pub collectives: Vec<CollectiveInstance>,
    /// Ids of mixed collectives.
    pub violations: Vec<u32>,
    pub final_versions: Vec<FirmwareEpoch>,
    pub register: Option<DecisionRegister>,
    pub reads: Vec<RegisterRead>,
    #[serde(skip)]
    pub trace: Trace,
}

impl DeployReport {
    pub fn fenced(&self) -> usize {
        self.collectives
            .iter()
            .flat_map(|c| &c.participants)
            .filter(|p| p.fenced)
            .count()
    }

    pub fn aborted(&self) -> usize {
        self.collectives
            .iter()
            .filter(|c| c.status == CollectiveStatus::Aborted)
            .count()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Executed collectives whose correct participants hold two or more versions.
pub fn detect_mixed(report: &DeployReport) -> Vec<&CollectiveInstance> {
    report.collectives.iter().filter(|c| c.is_mixed()).collect()
}

/// At most one committed value; reads never go back from committed to empty
/// and never precede the decision. An empty read in the decision tick itself
/// was dispatched before the write and is allowed.
pub fn check_register_linearizable(report: &DeployReport) -> bool {
    let Some(reg) = report.register else {
        return report.reads.is_empty();
    };
    let mut seen: BTreeMap<ComponentId, Option<FirmwareEpoch>> = BTreeMap::new();
    for r in &report.reads {
        if r.value.is_some() && r.value != reg.committed_epoch {
            return false;
        }
        match (r.value, reg.decision_time) {
            (Some(_), Some(t)) if r.time < t => return false,
            (Some(_), None) => return false,
            (None, Some(t)) if r.time > t => return false,
            _ => {}
        }
        if let Some(Some(_)) = seen.get(&r.node) {
            if r.value.is_none() {
                return false;
            }
        }
        seen.insert(r.node, r.value);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveDeployConfig {
    pub deploy_time: VirtualTime,
    pub collectives: Vec<CollectiveSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusDeployConfig {
    /// `None`: no transition is proposed.
    pub propose_time: Option<VirtualTime>,
    pub collectives: Vec<CollectiveSpec>,
    pub fence: FencePolicy,
    /// Half-open interval during which the register cannot be reached.
    pub register_outage: Option<(VirtualTime, VirtualTime)>,
}

impl ConsensusDeployConfig {
    pub fn new(propose_time: u64, collectives: Vec<CollectiveSpec>) -> Self {
        ConsensusDeployConfig {
            propose_time: Some(VirtualTime(propose_time)),
            collectives,
            fence: FencePolicy::Shrink,
            register_outage: None,
        }
    }
}

struct Fleet {
    kind: DeployKind,
    versions: Vec<FirmwareEpoch>,
    specs: BTreeMap<u32, CollectiveSpec>,
    instances: Vec<CollectiveInstance>,
    register: DecisionRegister,
    reads: Vec<RegisterRead>,
    fence: FencePolicy,
    outage: Option<(VirtualTime, VirtualTime)>,
}

impl Fleet {
    fn new(kind: DeployKind, n: usize, specs: &[CollectiveSpec]) -> Self {
        Fleet {
            kind,
            versions: vec![FirmwareEpoch::F0; n],
            specs: specs.iter().map(|c| (c.id, c.clone())).collect(),
            instances: Vec::new(),
            register: DecisionRegister::default(),
            reads: Vec::new(),
            fence: FencePolicy::Shrink,
            outage: None,
        }
    }

    fn register_up(&self, t: VirtualTime) -> bool {
        !self.outage.is_some_and(|(a, b)| a <= t && t < b)
    }

    fn read(&mut self, node: ComponentId, time: VirtualTime) -> Option<FirmwareEpoch> {
        let value = self.register.committed_epoch;
        self.reads.push(RegisterRead { node, time, value });
        value
    }

    fn collective(&mut self, sim: &mut Simulation, id: u32) -> Result<(), SimError> {
        let Some(spec) = self.specs.get(&id).cloned() else {
            return Ok(());
        };
        let now = sim.now();
        let mut participants: Vec<Participant> = spec
            .participants
            .iter()
            .map(|&node| Participant {
                node,
                version: self.versions[node.0],
                crashed: !sim.is_up(Target::Component(node)),
                fenced: false,
            })
            .collect();
        let mut status = CollectiveStatus::Executed;
        if self.kind == DeployKind::Consensus {
            if !self.register_up(now) {
                status = CollectiveStatus::Aborted;
            } else {
                for p in participants.iter_mut().filter(|p| !p.crashed) {
                    let decided = self.read(p.node, now).unwrap_or(FirmwareEpoch::F0);
                    if p.version != decided {
                        p.fenced = true;
                        // learned the decision on this read; install it
                        sim.send(Target::Component(p.node), Message::DecisionNotice { version: decided })?;
                    }
                }
                let fenced = participants.iter().any(|p| p.fenced);
                let remaining = participants.iter().any(|p| p.is_correct());
                if !remaining || (fenced && self.fence == FencePolicy::Abort) {
                    status = CollectiveStatus::Aborted;
                }
            }
        }
        self.instances.push(CollectiveInstance {
            id,
            time: now,
            participants,
            status,
        });
        Ok(())
    }
}

impl Handler for Fleet {
    fn on_deliver(&mut self, sim: &mut Simulation, to: Target, msg: &Message) -> Result<(), SimError> {
        match (to, msg) {
            (Target::Component(c), Message::Firmware { version }) => self.versions[c.0] = *version,
            (Target::Component(c), Message::DecisionNotice { version }) => {
                self.versions[c.0] = self.versions[c.0].max(*version);
            }
            (Target::Coordinator, Message::ProposeTransition { version }) => {
                let now = sim.now();
                if !self.register_up(now) {
                    // retry once the register is back
                    let (_, back) = self.outage.expect("register down implies an outage");
                    sim.set_timer(Target::Coordinator, back, Timer::Propose)?;
                    return Ok(());
                }
                if self.register.write_once(*version, now) {
                    sim.broadcast(&Message::DecisionNotice { version: *version })?;
                }
            }
            (Target::Coordinator, Message::RegisterRead { from }) => {
                let now = sim.now();
                if self.register_up(now) {
                    if let Some(version) = self.read(*from, now) {
                        sim.send(Target::Component(*from), Message::DecisionNotice { version })?;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn on_timer(&mut self, sim: &mut Simulation, _target: Target, timer: Timer) -> Result<(), SimError> {
        match timer {
            Timer::Deploy => sim.broadcast(&Message::Firmware {
                version: FirmwareEpoch::F1,
            })?,
            Timer::Propose => {
                sim.send(Target::Coordinator, Message::ProposeTransition {
                    version: FirmwareEpoch::F1,
                })?;
            }
            Timer::Collective(id) => self.collective(sim, id)?,
            _ => {}
        }
        Ok(())
    }

    fn on_recover(&mut self, sim: &mut Simulation, target: Target) -> Result<(), SimError> {
        if let (DeployKind::Consensus, Target::Component(c)) = (self.kind, target) {
            sim.send(Target::Coordinator, Message::RegisterRead { from: c })?;
        }
        Ok(())
    }
}

fn schedule_collectives(sim: &mut Simulation, specs: &[CollectiveSpec]) -> Result<(), SimError> {
    for c in specs {
        sim.set_timer(Target::Coordinator, c.time, Timer::Collective(c.id))?;
    }
    Ok(())
}

fn finish(fleet: Fleet, trace: Trace) -> DeployReport {
    let violations = fleet
        .instances
        .iter()
        .filter(|c| c.is_mixed())
        .map(|c| c.id)
        .collect();
    DeployReport {
        kind: fleet.kind,
        violations,
        final_versions: fleet.versions,
        register: (fleet.kind == DeployKind::Consensus).then_some(fleet.register),
        reads: fleet.reads,
        collectives: fleet.instances,
        trace,
    }
}

/// Broadcasts F1 at `deploy_time`; each node switches when the message lands.
pub fn run_naive_deploy(sim: &mut Simulation, config: &NaiveDeployConfig) -> Result<DeployReport, DeployError> {
    validate_schedule(sim.components(), &config.collectives)?;
    sim.set_timer(Target::Coordinator, config.deploy_time, Timer::Deploy)?;
    schedule_collectives(sim, &config.collectives)?;
    let mut fleet = Fleet::new(DeployKind::Naive, sim.components(), &config.collectives);
    let trace = sim.run(&mut fleet)?;
    Ok(finish(fleet, trace))
}

/// Proposes F1 to the register; collectives only admit nodes whose installed
/// version matches what the register says.
pub fn run_consensus_deploy(sim: &mut Simulation, config: &ConsensusDeployConfig) -> Result<DeployReport, DeployError> {
    validate_schedule(sim.components(), &config.collectives)?;
    if let Some((a, b)) = config.register_outage {
        if b <= a {
            return Err(DeployError::InvalidConfig(format!("empty register outage [{}, {})", a.0, b.0)));
        }
    }
    if let Some(t) = config.propose_time {
        sim.set_timer(Target::Coordinator, t, Timer::Propose)?;
    }
    schedule_collectives(sim, &config.collectives)?;
    let mut fleet = Fleet::new(DeployKind::Consensus, sim.components(), &config.collectives);
    fleet.fence = config.fence;
    fleet.outage = config.register_outage;
    let trace = sim.run(&mut fleet)?;
    Ok(finish(fleet, trace))
}

/// Deploy as a search target; candidates are shared by both protocols.
#[derive(Debug, Clone)]
pub struct DeploySearch {
    pub nodes: usize,
    pub kind: DeployKind,
    pub fence: FencePolicy,
    pub crash_prob: f64,
}

impl DeploySearch {
    pub fn new(nodes: usize, kind: DeployKind) -> Self {
        DeploySearch {
            nodes,
            kind,
            fence: FencePolicy::Shrink,
            crash_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeployCandidate {
    pub seed: u64,
    pub delays: AdversarialSchedule,
    pub crashes: CrashPlan,
    pub deploy_time: u64,
    pub collectives: Vec<CollectiveSpec>,
}

const DEPLOY_AT: u64 = 10;

impl ScheduleTarget for DeploySearch {
    type Candidate = DeployCandidate;
    type Run = DeployReport;

    /// One node hears about F1 a tick after the deploy, another much later,
    /// and a collective lands in between.
    fn directed(&self, rng: &mut ChaCha8Rng) -> DeployCandidate {
        let n = self.nodes;
        let mut delays = AdversarialSchedule::new(1);
        let fast = rng.random_range(0..n);
        let slow = (fast + rng.random_range(1..n.max(2))) % n;
        let lag = rng.random_range(3..=20);
        for i in 0..n {
            let d = if i == slow { lag } else { 1 };
            delays.set(DelayKey::Message { to: Target::component(i), nth: 0 }, d);
        }
        let at = DEPLOY_AT + rng.random_range(1..lag.max(2));
        DeployCandidate {
            seed: rng.random(),
            delays,
            crashes: CrashPlan::none(),
            deploy_time: DEPLOY_AT,
            collectives: vec![CollectiveSpec::all(0, at, n)],
        }
    }

    fn random(&self, rng: &mut ChaCha8Rng) -> DeployCandidate {
        let n = self.nodes;
        let mut delays = AdversarialSchedule::new(rng.random_range(1..=8));
        for i in 0..n {
            let to = Target::component(i);
            for nth in 0..3 {
                delays.set(DelayKey::Message { to, nth }, rng.random_range(1..=15));
            }
            delays.set(DelayKey::Recovery { target: to }, rng.random_range(1..=30));
        }
        let mut crashes = Vec::new();
        for i in 0..n {
            if rng.random::<f64>() < self.crash_prob {
                crashes.push(CrashSpec::At {
                    target: Target::component(i),
                    time: VirtualTime(rng.random_range(0..=40)),
                });
            }
        }
        let k = rng.random_range(1..=4);
        let collectives = (0..k)
            .map(|id| CollectiveSpec::all(id, rng.random_range(1..=60), n))
            .collect();
        DeployCandidate {
            seed: rng.random(),
            delays,
            crashes: CrashPlan { crashes },
            deploy_time: rng.random_range(1..=30),
            collectives,
        }
    }

    fn execute(&self, c: &DeployCandidate) -> Result<DeployReport, AdversaryError> {
        let config = SimConfig::new(self.nodes, DelayPolicy::Adversarial(c.delays.clone()), c.seed);
        let mut sim = Simulation::new(config)?;
        c.crashes.apply(&mut sim)?;
        let report = match self.kind {
            DeployKind::Naive => run_naive_deploy(&mut sim, &NaiveDeployConfig {
                deploy_time: VirtualTime(c.deploy_time),
                collectives: c.collectives.clone(),
            }),
            DeployKind::Consensus => run_consensus_deploy(&mut sim, &ConsensusDeployConfig {
                propose_time: Some(VirtualTime(c.deploy_time)),
                collectives: c.collectives.clone(),
                fence: self.fence,
                register_outage: None,
            }),
        };
        report.map_err(|e| match e {
            DeployError::Sim(s) => AdversaryError::Sim(s),
            other => AdversaryError::Invariant(other.to_string()),
        })
    }
}

/// Totals over a battery of deploy candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DeployBattery {
    pub runs: u64,
    pub collectives: u64,
    pub mixed_collectives: u64,
    pub runs_with_mixed: u64,
    pub fenced: u64,
    pub aborted: u64,
    /// Runs whose register history failed the linearizability check.
    pub register_violations: u64,
}

/// Executes candidates `0..runs` of the stream `seed` (the same candidates
/// [`crate::adversary::search_schedules`] would try) and totals the outcome.
pub fn deploy_battery(target: &DeploySearch, runs: u64, seed: u64) -> Result<DeployBattery, AdversaryError> {
    use rayon::prelude::*;
    let per_run: Vec<DeployBattery> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let c = crate::adversary::nth_candidate(target, seed, i);
            let r = target.execute(&c)?;
            let mixed = detect_mixed(&r).len() as u64;
            Ok(DeployBattery {
                runs: 1,
                collectives: r.collectives.len() as u64,
                mixed_collectives: mixed,
                runs_with_mixed: (mixed > 0) as u64,
                fenced: r.fenced() as u64,
                aborted: r.aborted() as u64,
                register_violations: (r.kind == DeployKind::Consensus && !check_register_linearizable(&r)) as u64,
            })
        })
        .collect::<Result<_, AdversaryError>>()?;
    Ok(per_run.into_iter().fold(DeployBattery::default(), |a, b| DeployBattery {
        runs: a.runs + b.runs,
        collectives: a.collectives + b.collectives,
        mixed_collectives: a.mixed_collectives + b.mixed_collectives,
        runs_with_mixed: a.runs_with_mixed + b.runs_with_mixed,
        fenced: a.fenced + b.fenced,
        aborted: a.aborted + b.aborted,
        register_violations: a.register_violations + b.register_violations,
    }))
}

/// Collective-by-collective account of a deploy run.
pub fn narrate_deploy(report: &DeployReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    for c in &report.collectives {
        let cells: Vec<String> = c
            .participants
            .iter()
            .map(|p| {
                let mark = if p.crashed {
                    "(down)"
                } else if p.fenced {
                    "(fenced)"
                } else {
                    ""
                };
                format!("{}={}{mark}", p.node, p.version)
            })
            .collect();
        let flag = if c.is_mixed() { "  MIXED" } else { "" };
        let _ = writeln!(
            out,
            "collective #{} at {} {:?}: {}{flag}",
            c.id,
            c.time,
            c.status,
            cells.join(" ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(n: usize, delay: DelayPolicy) -> Simulation {
        Simulation::new(SimConfig::new(n, delay, 1)).unwrap()
    }

    #[test]
    fn uniform_delays_never_mixed() {
        let mut s = sim(4, DelayPolicy::Fixed(3));
        let cfg = NaiveDeployConfig {
            deploy_time: VirtualTime(10),
            collectives: vec![CollectiveSpec::all(0, 5, 4), CollectiveSpec::all(1, 20, 4)],
        };
        let r = run_naive_deploy(&mut s, &cfg).unwrap();
        assert!(detect_mixed(&r).is_empty());
        assert_eq!(r.collectives[0].versions(), vec![FirmwareEpoch::F0]);
        assert_eq!(r.collectives[1].versions(), vec![FirmwareEpoch::F1]);
    }

    #[test]
    fn spread_delivery_mixes_naive() {
        let mut d = AdversarialSchedule::new(1);
        d.set(DelayKey::Message { to: Target::component(1), nth: 0 }, 10);
        let mut s = sim(2, DelayPolicy::Adversarial(d));
        let cfg = NaiveDeployConfig {
            deploy_time: VirtualTime(10),
            collectives: vec![CollectiveSpec::all(0, 15, 2)],
        };
        let r = run_naive_deploy(&mut s, &cfg).unwrap();
        assert_eq!(r.violations, vec![0]);
    }

    #[test]
    fn single_node_never_mixed() {
        let mut s = sim(1, DelayPolicy::UniformRandom { lo: 1, hi: 9 });
        let cfg = NaiveDeployConfig {
            deploy_time: VirtualTime(2),
            collectives: (0..5).map(|i| CollectiveSpec::all(i, 2 * i as u64 + 1, 1)).collect(),
        };
        assert!(detect_mixed(&run_naive_deploy(&mut s, &cfg).unwrap()).is_empty());
    }

    fn instance(parts: &[(FirmwareEpoch, bool)]) -> CollectiveInstance {
        CollectiveInstance {
            id: 0,
            time: VirtualTime(1),
            participants: parts
                .iter()
                .enumerate()
                .map(|(i, &(version, crashed))| Participant {
                    node: ComponentId(i),
                    version,
                    crashed,
                    fenced: false,
                })
                .collect(),
            status: CollectiveStatus::Executed,
        }
    }

    #[test]
    fn crashed_participants_do_not_count() {
        use FirmwareEpoch::*;
        assert!(!instance(&[(F0, false), (F0, false)]).is_mixed());
        assert!(instance(&[(F0, false), (F1, false)]).is_mixed());
        assert!(!instance(&[(F0, true), (F1, false), (F1, false)]).is_mixed());
    }

    #[test]
    fn crashed_before_decision_is_fenced() {
        let mut d = AdversarialSchedule::new(1);
        d.set(DelayKey::Recovery { target: Target::component(1) }, 5);
        let mut s = sim(3, DelayPolicy::Adversarial(d));
        s.inject_crash(Target::component(1), VirtualTime(1)).unwrap();
        let cfg = ConsensusDeployConfig::new(2, vec![CollectiveSpec::all(0, 7, 3), CollectiveSpec::all(1, 30, 3)]);
        let r = run_consensus_deploy(&mut s, &cfg).unwrap();
        assert!(detect_mixed(&r).is_empty());
        // recovered at 6; register read lands 7 and the notice at 8
        let first = &r.collectives[0];
        assert!(first.participants[1].fenced);
        assert_eq!(first.status, CollectiveStatus::Executed);
        assert!(r.collectives[1].participants.iter().all(|p| p.is_correct()));
        assert!(check_register_linearizable(&r));
    }

    #[test]
    fn fence_abort_policy() {
        let mut d = AdversarialSchedule::new(1);
        d.set(DelayKey::Message { to: Target::component(2), nth: 0 }, 20);
        let mut s = sim(3, DelayPolicy::Adversarial(d));
        let mut cfg = ConsensusDeployConfig::new(2, vec![CollectiveSpec::all(0, 8, 3)]);
        cfg.fence = FencePolicy::Abort;
        let r = run_consensus_deploy(&mut s, &cfg).unwrap();
        assert_eq!(r.collectives[0].status, CollectiveStatus::Aborted);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn no_proposal_all_f0() {
        let mut s = sim(3, DelayPolicy::Fixed(2));
        let mut cfg = ConsensusDeployConfig::new(0, vec![CollectiveSpec::all(0, 4, 3), CollectiveSpec::all(1, 40, 3)]);
        cfg.propose_time = None;
        let r = run_consensus_deploy(&mut s, &cfg).unwrap();
        assert!(r.violations.is_empty());
        assert!(r.collectives.iter().all(|c| c.versions() == vec![FirmwareEpoch::F0]));
    }

    #[test]
    fn register_outage_aborts() {
        let mut s = sim(3, DelayPolicy::Fixed(1));
        let mut cfg = ConsensusDeployConfig::new(2, vec![CollectiveSpec::all(0, 5, 3), CollectiveSpec::all(1, 30, 3)]);
        cfg.register_outage = Some((VirtualTime(1), VirtualTime(20)));
        let r = run_consensus_deploy(&mut s, &cfg).unwrap();
        assert_eq!(r.collectives[0].status, CollectiveStatus::Aborted);
        assert_eq!(r.register.unwrap().decision_time, Some(VirtualTime(21)));
        assert_eq!(r.collectives[1].versions(), vec![FirmwareEpoch::F1]);
    }

    #[test]
    fn register_written_once() {
        let mut r = DecisionRegister::default();
        assert!(r.write_once(FirmwareEpoch::F1, VirtualTime(3)));
        assert!(!r.write_once(FirmwareEpoch::F0, VirtualTime(4)));
        assert_eq!(r.committed_epoch, Some(FirmwareEpoch::F1));
    }

    #[test]
    fn bad_schedules_rejected() {
        let mut s = sim(2, DelayPolicy::Fixed(1));
        let cfg = NaiveDeployConfig {
            deploy_time: VirtualTime(1),
            collectives: vec![CollectiveSpec {
                id: 0,
                time: VirtualTime(3),
                participants: vec![],
            }],
        };
        assert!(run_naive_deploy(&mut s, &cfg).is_err());
    }
}
