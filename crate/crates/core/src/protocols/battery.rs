use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adversary::construct_straddling;
use crate::error::SimError;
use crate::lattice::AtomicityClass;
use crate::sim::{derive_seed, DelayPolicy, SimConfig, Simulation, Target, VirtualTime};

use super::{run_bilateral, run_naive, BilateralConfig, CrashPlan, CrashSpec, Decision, FaultProfile, NaiveCheckpointConfig, ProtocolOutcome};

/// Class counts for one protocol over a battery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProtocolTally {
    pub runs: u64,
    pub top: u64,
    pub bottom: u64,
    pub mixed: u64,
    pub committed: u64,
    pub rolled_back: u64,
    pub no_decision: u64,
    /// Declared `Committed` while the final vector is not top.
    pub disagreements: u64,
}

impl ProtocolTally {
    fn record(&mut self, out: &ProtocolOutcome) {
        self.runs += 1;
        match out.vector_class() {
            AtomicityClass::Top => self.top += 1,
            AtomicityClass::BottomAll => self.bottom += 1,
            AtomicityClass::Mixed => self.mixed += 1,
        }
        match out.decision {
            Decision::Committed(_) => self.committed += 1,
            Decision::RolledBack(_) => self.rolled_back += 1,
            Decision::NoDecision => self.no_decision += 1,
        }
        if out.disagrees() {
            self.disagreements += 1;
        }
    }

    fn merge(mut self, o: ProtocolTally) -> ProtocolTally {
        self.runs += o.runs;
        self.top += o.top;
        self.bottom += o.bottom;
        self.mixed += o.mixed;
        self.committed += o.committed;
        self.rolled_back += o.rolled_back;
        self.no_decision += o.no_decision;
        self.disagreements += o.disagreements;
        self
    }

    pub fn mixed_rate(&self) -> f64 {
        rate(self.mixed, self.runs)
    }

    pub fn disagreement_rate(&self) -> f64 {
        rate(self.disagreements, self.runs)
    }
}

fn rate(k: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Battery parameters. Both protocols see the same seed, delays and crash
/// plan in each run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonConfig {
    pub components: usize,
    pub runs: u64,
    pub seed: u64,
    pub delay: DelayPolicy,
    pub faults: FaultProfile,
    pub epoch: u64,
    pub boundary: u64,
    pub ack_timeout: u64,
    /// Every k-th run uses a straddling schedule with a boundary crash
    /// instead of random faults.
    pub adversarial_every: Option<u64>,
}

impl ComparisonConfig {
    pub fn new(components: usize, runs: u64, crash_prob: f64, seed: u64) -> Self {
        ComparisonConfig {
            components,
            runs,
            seed,
            delay: DelayPolicy::UniformRandom { lo: 1, hi: 10 },
            faults: FaultProfile::every_stage(crash_prob),
            epoch: 1,
            boundary: 40,
            ack_timeout: 100,
            adversarial_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub naive: ProtocolTally,
    pub bilateral: ProtocolTally,
}

struct RunSetup {
    config: SimConfig,
    plan: CrashPlan,
    boundary: u64,
}

fn setup(cfg: &ComparisonConfig, i: u64) -> Result<RunSetup, SimError> {
    let seed = derive_seed(cfg.seed, i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adversarial = cfg.adversarial_every.is_some_and(|k| k > 0 && i % k == 0);
    if adversarial && cfg.components >= 2 {
        let j = rng.random_range(0..cfg.components);
        let t_c = rng.random_range(2..=cfg.boundary.max(2));
        let s = construct_straddling(cfg.components, j, t_c).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let plan = CrashPlan {
            crashes: vec![CrashSpec::At {
                target: Target::Component(s.straddler),
                time: s.boundary,
            }],
        };
        return Ok(RunSetup {
            config: SimConfig::new(cfg.components, DelayPolicy::Adversarial(s.delays.clone()), seed),
            plan,
            boundary: t_c,
        });
    }
    let plan = CrashPlan::random(cfg.components, &cfg.faults, &mut rng);
    Ok(RunSetup {
        config: SimConfig::new(cfg.components, cfg.delay.clone(), seed),
        plan,
        boundary: cfg.boundary,
    })
}

fn one_run(cfg: &ComparisonConfig, i: u64) -> Result<Comparison, SimError> {
    let RunSetup { config, plan, boundary } = setup(cfg, i)?;

    let mut sim = Simulation::new(config.clone())?;
    plan.apply(&mut sim)?;
    let naive = run_naive(&mut sim, &NaiveCheckpointConfig::new(cfg.epoch, VirtualTime(boundary)))?;

    let mut sim = Simulation::new(config)?;
    plan.apply(&mut sim)?;
    let bilateral = run_bilateral(&mut sim, &BilateralConfig::new(cfg.epoch, cfg.ack_timeout))?;

    let mut out = Comparison::default();
    out.naive.record(&naive);
    out.bilateral.record(&bilateral);
    Ok(out)
}

/// Runs both protocols `runs` times under identical fault injection. The
/// result does not depend on the number of worker threads.
pub fn compare_protocols(cfg: &ComparisonConfig) -> Result<Comparison, SimError> {
    if cfg.components == 0 {
        return Err(SimError::InvalidConfig("components must be ≥ 1".into()));
    }
    cfg.delay.validate()?;
    let per_run: Vec<Comparison> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| one_run(cfg, i))
        .collect::<Result<_, _>>()?;
    Ok(per_run.into_iter().fold(Comparison::default(), |acc, c| Comparison {
        naive: acc.naive.merge(c.naive),
        bilateral: acc.bilateral.merge(c.bilateral),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_crashes_everything_top() {
        let cfg = ComparisonConfig::new(4, 50, 0.0, 9);
        let c = compare_protocols(&cfg).unwrap();
        assert_eq!(c.naive.top, 50);
        assert_eq!(c.bilateral.top, 50);
        assert_eq!(c.bilateral.committed, 50);
    }

    #[test]
    fn bilateral_never_mixed_naive_sometimes() {
        let cfg = ComparisonConfig::new(6, 400, 0.2, 17);
        let c = compare_protocols(&cfg).unwrap();
        assert_eq!(c.bilateral.mixed, 0);
        assert!(c.naive.mixed > 0);
        assert!(c.naive.disagreements > 0);
        assert_eq!(c.bilateral.disagreements, 0);
    }

    #[test]
    fn adversarial_runs_only_hurt_naive() {
        let mut cfg = ComparisonConfig::new(3, 20, 0.0, 5);
        cfg.adversarial_every = Some(2);
        let c = compare_protocols(&cfg).unwrap();
        assert_eq!(c.naive.mixed, 10);
        assert_eq!(c.bilateral.mixed, 0);
        assert_eq!(c.bilateral.rolled_back, 10);
    }
}
