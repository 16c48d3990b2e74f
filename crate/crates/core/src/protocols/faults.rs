use rand::Rng;
use serde::Serialize;

use crate::error::SimError;
use crate::persistence::PersistenceStage;
use crate::sim::{ComponentId, Simulation, Target, VirtualTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrashSpec {
    At {
        #[serde(serialize_with = "ser_target")]
        target: Target,
        time: VirtualTime,
    },
    /// Crash the moment the component enters `stage`.
    OnStage {
        component: ComponentId,
        stage: PersistenceStage,
    },
}

fn ser_target<S: serde::Serializer>(t: &Target, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(t)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CrashPlan {
    pub crashes: Vec<CrashSpec>,
}

/// How a random crash plan is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultProfile {
    /// Independent per-component crash probability.
    pub crash_prob: f64,
    /// Stage-triggered crashes pick uniformly from these.
    pub stages: Vec<PersistenceStage>,
    /// Fraction of crashes placed at a uniform time instead of a stage.
    pub timed_fraction: f64,
    /// Upper bound for timed crashes.
    pub window: u64,
}

impl FaultProfile {
    /// Crashes in every persistence stage (including right after the ack at
    /// `Done`) plus crashes at arbitrary times.
    pub fn every_stage(crash_prob: f64) -> Self {
        let mut stages = PersistenceStage::TIMED.to_vec();
        stages.push(PersistenceStage::Done);
        FaultProfile {
            crash_prob,
            stages,
            timed_fraction: 0.25,
            window: 150,
        }
    }

    /// Crashes that always prevent the component's commit: before the
    /// durable metadata point.
    pub fn fatal(crash_prob: f64) -> Self {
        FaultProfile {
            crash_prob,
            stages: vec![
                PersistenceStage::BufferFlush,
                PersistenceStage::DmaTransfer,
                PersistenceStage::WriteSyscall,
                PersistenceStage::Fsync,
            ],
            timed_fraction: 0.0,
            window: 0,
        }
    }

    pub fn none() -> Self {
        FaultProfile {
            crash_prob: 0.0,
            stages: Vec::new(),
            timed_fraction: 0.0,
            window: 0,
        }
    }
}

impl CrashPlan {
    pub fn none() -> Self {
        CrashPlan::default()
    }

    pub fn random<R: Rng + ?Sized>(n: usize, profile: &FaultProfile, rng: &mut R) -> Self {
        let mut crashes = Vec::new();
        for i in 0..n {
            if profile.crash_prob <= 0.0 || rng.random::<f64>() >= profile.crash_prob {
                continue;
            }
            let timed = profile.stages.is_empty() || rng.random::<f64>() < profile.timed_fraction;
            if timed {
                crashes.push(CrashSpec::At {
                    target: Target::component(i),
                    time: VirtualTime(rng.random_range(0..=profile.window)),
                });
            } else {
                let stage = profile.stages[rng.random_range(0..profile.stages.len())];
                crashes.push(CrashSpec::OnStage {
                    component: ComponentId(i),
                    stage,
                });
            }
        }
        CrashPlan { crashes }
    }

    pub fn apply(&self, sim: &mut Simulation) -> Result<(), SimError> {
        for spec in &self.crashes {
            match *spec {
                CrashSpec::At { target, time } => {
                    sim.inject_crash(target, time)?;
                }
                CrashSpec::OnStage { component, stage } => sim.crash_on_entering(component, stage)?,
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.crashes.is_empty()
    }
}
