//! Retry amplification.
//!
//! A failed checkpoint attempt is retried under a load that grows by the
//! factor `alpha` per attempt, so attempt `k` sees a per-component failure
//! probability of `min(1, p0·alpha^(k−1))`. With `alpha = 1` attempts are
//! independent and their count is geometric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::SimError;
use crate::lattice::AtomicityClass;
use crate::sim::{derive_seed, SimConfig, Simulation};

use super::{run_bilateral, run_naive, BilateralConfig, CrashPlan, Decision, FaultProfile, NaiveCheckpointConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetryModel {
    pub p0: f64,
    pub alpha: f64,
    pub max_attempts: u32,
}

impl RetryModel {
    pub fn new(p0: f64, alpha: f64, max_attempts: u32) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(SimError::InvalidConfig(format!("p0={p0} outside [0,1]")));
        }
        if !(alpha >= 1.0 && alpha.is_finite()) {
            return Err(SimError::InvalidConfig(format!("alpha={alpha} must be ≥ 1")));
        }
        if max_attempts == 0 {
            return Err(SimError::InvalidConfig("max_attempts must be ≥ 1".into()));
        }
        Ok(RetryModel { p0, alpha, max_attempts })
    }

    /// Per-component failure probability on attempt `k` (1-based).
    pub fn failure_probability(&self, k: u32) -> f64 {
        (self.p0 * self.alpha.powi(k as i32 - 1)).min(1.0)
    }

    /// Load factor of attempt `k`.
    pub fn load(&self, k: u32) -> f64 {
        self.alpha.powi(k as i32 - 1)
    }
}

/// Probability that an attempt with per-component failure `p` fails for `n` components.
pub fn attempt_failure_probability(p: f64, n: usize) -> f64 {
    1.0 - (1.0 - p).powi(n as i32)
}

/// `1 / (1 − P_fail)` with `P_fail = 1 − (1 − p0)^n`.
pub fn geometric_expected_attempts(p0: f64, n: usize) -> f64 {
    1.0 / (1.0 - attempt_failure_probability(p0, n))
}

#[derive(Debug, Clone)]
pub enum InnerProtocol {
    Bilateral(BilateralConfig),
    /// Success means the final vector is actually top, whatever was declared.
    Naive(NaiveCheckpointConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetryStats {
    pub attempts: u32,
    pub succeeded: bool,
    pub total_load: f64,
}

/// Repeats `inner` until it converges or `max_attempts` is spent. Each
/// attempt runs in a fresh simulation seeded from `base.seed`.
pub fn run_retry_loop(base: &SimConfig, model: &RetryModel, inner: &InnerProtocol) -> Result<RetryStats, SimError> {
    let mut total_load = 0.0;
    for k in 1..=model.max_attempts {
        total_load += model.load(k);
        let mut config = base.clone();
        config.seed = derive_seed(base.seed, k as u64);
        let mut sim = Simulation::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sim.config().seed, u64::MAX));
        let profile = FaultProfile::fatal(model.failure_probability(k));
        CrashPlan::random(sim.components(), &profile, &mut rng).apply(&mut sim)?;
        let converged = match inner {
            InnerProtocol::Bilateral(cfg) => {
                matches!(run_bilateral(&mut sim, cfg)?.decision, Decision::Committed(_))
            }
            InnerProtocol::Naive(cfg) => run_naive(&mut sim, cfg)?.vector_class() == AtomicityClass::Top,
        };
        if converged {
            return Ok(RetryStats {
                attempts: k,
                succeeded: true,
                total_load,
            });
        }
    }
    Ok(RetryStats {
        attempts: model.max_attempts,
        succeeded: false,
        total_load,
    })
}
