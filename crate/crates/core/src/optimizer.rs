//! AdamW over an epoch-typed optimizer state.
//!
//! Every field of the state carries the epoch it was last written at. A state
//! is consistent when all six tags agree; a strict step refuses anything else,
//! while a coercing step advances each tag independently the way a runtime
//! that never checks would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::OptimizerError;
use crate::sim::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpochTags {
    pub w: u64,
    pub m: u64,
    pub v: u64,
    pub g: u64,
    pub rng: u64,
    pub data: u64,
}

impl EpochTags {
    pub fn uniform(epoch: u64) -> Self {
        EpochTags {
            w: epoch,
            m: epoch,
            v: epoch,
            g: epoch,
            rng: epoch,
            data: epoch,
        }
    }

    pub fn fields(&self) -> [(&'static str, u64); 6] {
        [
            ("w", self.w),
            ("m", self.m),
            ("v", self.v),
            ("g", self.g),
            ("rng", self.rng),
            ("data", self.data),
        ]
    }

    pub fn is_consistent(&self) -> bool {
        self.fields().iter().all(|&(_, t)| t == self.w)
    }

    fn advanced(&self) -> Self {
        EpochTags {
            w: self.w + 1,
            m: self.m + 1,
            v: self.v + 1,
            g: self.g + 1,
            rng: self.rng + 1,
            data: self.data + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTypedOptimizerState {
    pub w: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub rng: u64,
    pub data_pos: u64,
    pub tags: EpochTags,
}

impl EpochTypedOptimizerState {
    /// Fresh state at epoch 0: zero moments and gradient buffer.
    pub fn new(w: Vec<f64>, rng: u64) -> Self {
        let d = w.len();
        EpochTypedOptimizerState {
            w,
            m: vec![0.0; d],
            v: vec![0.0; d],
            g: vec![0.0; d],
            rng,
            data_pos: 0,
            tags: EpochTags::uniform(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn epoch(&self) -> u64 {
        self.tags.w
    }

    pub fn is_consistent(&self) -> bool {
        self.tags.is_consistent()
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let d = self.w.len();
        if self.m.len() != d || self.v.len() != d || self.g.len() != d {
            return Err(OptimizerError::Dimension(format!(
                "w={d} m={} v={} g={}",
                self.m.len(),
                self.v.len(),
                self.g.len()
            )));
        }
        if let Some(i) = self.v.iter().position(|&x| !(x >= 0.0)) {
            return Err(OptimizerError::InvalidArgument(format!("v[{i}] = {} is negative", self.v[i])));
        }
        Ok(())
    }

    /// Copy whose `m` (and its tag) is taken from an older state, as after
    /// restoring a checkpoint where the shard holding `m` missed one write.
    pub fn with_lagged_moment(&self, older_m: Vec<f64>) -> Self {
        let mut s = self.clone();
        s.m = older_m;
        s.tags.m = self.tags.m.saturating_sub(1);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyperparams {
    fn default() -> Self {
        AdamWHyperparams {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-3,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWHyperparams {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: String| Err(OptimizerError::InvalidHyper(m));
        // beta1 = 0 is allowed: plain RMSProp-style first moment.
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1={} outside [0,1)", self.beta1));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("beta2={} outside (0,1)", self.beta2));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr={} must be positive", self.lr));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps={} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay={} must be ≥ 0", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Strict,
    Coerce,
}

fn next_rng(x: u64) -> u64 {
    derive_seed(x, 0)
}

/// One AdamW step. The bias-correction exponent is the W tag plus one.
pub fn adamw_step(
    state: &EpochTypedOptimizerState,
    gradient: &[f64],
    hyper: &AdamWHyperparams,
    mode: StepMode,
) -> Result<EpochTypedOptimizerState, OptimizerError> {
    hyper.validate()?;
    state.validate()?;
    if gradient.len() != state.dim() {
        return Err(OptimizerError::Dimension(format!(
            "gradient has {} entries, state has {}",
            gradient.len(),
            state.dim()
        )));
    }
    if mode == StepMode::Strict && !state.is_consistent() {
        let w = state.tags.w;
        let mut fields = vec![("w", w)];
        fields.extend(state.tags.fields().into_iter().filter(|&(_, t)| t != w));
        return Err(OptimizerError::TypeViolation(fields));
    }
    let AdamWHyperparams {
        beta1: b1,
        beta2: b2,
        lr,
        eps,
        weight_decay,
    } = *hyper;
    let t = (state.tags.w + 1) as f64;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let d = state.dim();
    let mut next = EpochTypedOptimizerState {
        w: Vec::with_capacity(d),
        m: Vec::with_capacity(d),
        v: Vec::with_capacity(d),
        g: gradient.to_vec(),
        rng: next_rng(state.rng),
        data_pos: state.data_pos + 1,
        tags: match mode {
            StepMode::Strict => EpochTags::uniform(state.tags.w + 1),
            StepMode::Coerce => state.tags.advanced(),
        },
    };
    for i in 0..d {
        let g = gradient[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = m / c1;
        let v_hat = v / c2;
        let w = state.w[i] - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * state.w[i]);
        next.m.push(m);
        next.v.push(v);
        next.w.push(w);
    }
    Ok(next)
}

/// `β1·(1−β1)·g_prev`: the first-moment error one step after restoring an
/// `m` that missed the write of `g_prev`, starting from zero moments.
pub fn moment_skew(g_prev: &[f64], beta1: f64) -> Vec<f64> {
    g_prev.iter().map(|g| beta1 * (1.0 - beta1) * g).collect()
}

/// General form: `β1·(1−β1)·(g_skipped − m_lagged)`. Reduces to
/// [`moment_skew`] when the lagged moment is zero.
pub fn moment_skew_general(g_skipped: &[f64], m_lagged: &[f64], beta1: f64) -> Vec<f64> {
    g_skipped
        .iter()
        .zip(m_lagged)
        .map(|(g, m)| beta1 * (1.0 - beta1) * (g - m))
        .collect()
}

/// Takes one coercing step from both states with the same gradient and
/// returns `m_reference − m_lagged`.
pub fn skew_consistency_check(
    reference: &EpochTypedOptimizerState,
    lagged: &EpochTypedOptimizerState,
    gradient: &[f64],
    hyper: &AdamWHyperparams,
) -> Result<Vec<f64>, OptimizerError> {
    let differ = |what: &str| Err(OptimizerError::NotASkewPair(format!("{what} differs")));
    if reference.dim() != lagged.dim() {
        return Err(OptimizerError::Dimension(format!("{} vs {}", reference.dim(), lagged.dim())));
    }
    if reference.w != lagged.w {
        return differ("w");
    }
    if reference.v != lagged.v {
        return differ("v");
    }
    if reference.g != lagged.g {
        return differ("g");
    }
    if reference.rng != lagged.rng {
        return differ("rng");
    }
    if reference.data_pos != lagged.data_pos {
        return differ("data position");
    }
    let (rt, lt) = (reference.tags, lagged.tags);
    if !rt.is_consistent() || (EpochTags { m: rt.m, ..lt }) != rt || lt.m + 1 != rt.m {
        return Err(OptimizerError::NotASkewPair(format!(
            "tags {:?} vs {:?}: only m may lag, by exactly one epoch",
            rt, lt
        )));
    }
    let a = adamw_step(reference, gradient, hyper, StepMode::Coerce)?;
    let b = adamw_step(lagged, gradient, hyper, StepMode::Coerce)?;
    Ok(a.m.iter().zip(&b.m).map(|(x, y)| x - y).collect())
}

/// Diagonal quadratic `½ Σ A_i (w_i − x*_i)²` with Gaussian gradient noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTask {
    pub curvature: Vec<f64>,
    pub target: Vec<f64>,
    pub noise_scale: f64,
    pub noise_seed: u64,
}

/// Noise stream used for the held-out validation batch.
const HELD_OUT_STREAM: u64 = u64::MAX;

impl QuadraticTask {
    pub fn new(curvature: Vec<f64>, target: Vec<f64>, noise_scale: f64, noise_seed: u64) -> Result<Self, OptimizerError> {
        if curvature.is_empty() || curvature.len() != target.len() {
            return Err(OptimizerError::Dimension(format!(
                "curvature={} target={}",
                curvature.len(),
                target.len()
            )));
        }
        if let Some(i) = curvature.iter().position(|&a| !(a > 0.0)) {
            return Err(OptimizerError::InvalidArgument(format!("curvature[{i}] must be positive")));
        }
        if !(noise_scale >= 0.0) {
            return Err(OptimizerError::InvalidArgument("noise scale must be ≥ 0".into()));
        }
        Ok(QuadraticTask {
            curvature,
            target,
            noise_scale,
            noise_seed,
        })
    }

    pub fn scalar(curvature: f64, target: f64) -> Self {
        QuadraticTask::new(vec![curvature], vec![target], 0.0, 0).expect("positive curvature")
    }

    pub fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn noise(&self, stream: u64) -> Vec<f64> {
        if self.noise_scale == 0.0 {
            return vec![0.0; self.dim()];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.noise_seed, stream));
        (0..self.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.noise_scale * z
            })
            .collect()
    }

    /// Minibatch gradient at `w` for step `step`; the noise depends only on
    /// the step index, so two trajectories see the same batches.
    pub fn gradient(&self, w: &[f64], step: u64) -> Vec<f64> {
        let noise = self.noise(step);
        (0..self.dim())
            .map(|i| self.curvature[i] * (w[i] - self.target[i]) + noise[i])
            .collect()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.batch_loss(w, &vec![0.0; self.dim()])
    }

    fn batch_loss(&self, w: &[f64], shift: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| {
                let r = w[i] - self.target[i] - shift[i];
                0.5 * self.curvature[i] * r * r
            })
            .sum()
    }

    /// Loss on the fixed held-out batch.
    pub fn validation_loss(&self, w: &[f64]) -> f64 {
        self.batch_loss(w, &self.noise(HELD_OUT_STREAM))
    }

    /// Three standard deviations of the per-batch loss at `w`; falls back to
    /// a small absolute floor on a noiseless task.
    pub fn default_delta(&self, w: &[f64]) -> f64 {
        const BATCHES: u64 = 256;
        const FLOOR: f64 = 1e-9;
        if self.noise_scale == 0.0 {
            return FLOOR;
        }
        let losses: Vec<f64> = (0..BATCHES)
            .map(|k| self.batch_loss(w, &self.noise(HELD_OUT_STREAM - 1 - k)))
            .collect();
        let mean = losses.iter().sum::<f64>() / BATCHES as f64;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
        (3.0 * var.sqrt()).max(FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergencePoint {
    /// Epoch reached after this step (1-based).
    pub step: u64,
    pub distance: f64,
    pub ref_loss: f64,
    pub mixed_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryDivergence {
    pub skew_epoch: u64,
    /// Gradient of the step whose moment write was lost.
    pub skipped_gradient: Vec<f64>,
    pub points: Vec<DivergencePoint>,
    pub reference_final: EpochTypedOptimizerState,
    pub mixed_final: EpochTypedOptimizerState,
}

impl TrajectoryDivergence {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,distance,ref_loss,mixed_loss\n");
        for p in &self.points {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", p.step, p.distance, p.ref_loss, p.mixed_loss));
        }
        out
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs `horizon` steps from `w0` twice. The second run restores a state at
/// epoch `skew_epoch` whose `m` is one epoch stale, then continues with
/// coercing steps. Both runs draw the same noise per step.
pub fn trajectory_divergence(
    task: &QuadraticTask,
    hyper: &AdamWHyperparams,
    w0: &[f64],
    skew_epoch: u64,
    horizon: u64,
) -> Result<TrajectoryDivergence, OptimizerError> {
    hyper.validate()?;
    if w0.len() != task.dim() {
        return Err(OptimizerError::Dimension(format!("w0={} task={}", w0.len(), task.dim())));
    }
    if horizon == 0 || skew_epoch == 0 || skew_epoch >= horizon {
        return Err(OptimizerError::InvalidArgument(format!(
            "need 1 ≤ skew_epoch < horizon, got skew_epoch={skew_epoch} horizon={horizon}"
        )));
    }
    let mut reference = EpochTypedOptimizerState::new(w0.to_vec(), 0);
    let mut mixed = reference.clone();
    let mut prev_m = reference.m.clone();
    let mut skipped_gradient = Vec::new();
    let mut points = Vec::with_capacity(horizon as usize);
    for step in 0..horizon {
        let g_ref = task.gradient(&reference.w, step);
        let g_mix = task.gradient(&mixed.w, step);
        if step + 1 == skew_epoch {
            prev_m = reference.m.clone();
            skipped_gradient = g_ref.clone();
        }
        reference = adamw_step(&reference, &g_ref, hyper, StepMode::Strict)?;
        mixed = adamw_step(&mixed, &g_mix, hyper, StepMode::Coerce)?;
        if step + 1 == skew_epoch {
            mixed = mixed.with_lagged_moment(prev_m.clone());
        }
        points.push(DivergencePoint {
            step: step + 1,
            distance: euclid(&reference.w, &mixed.w),
            ref_loss: task.loss(&reference.w),
            mixed_loss: task.loss(&mixed.w),
        });
    }
    Ok(TrajectoryDivergence {
        skew_epoch,
        skipped_gradient,
        points,
        reference_final: reference,
        mixed_final: mixed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ValidationVerdict {
    Accept { observed: f64 },
    Reject { observed: f64, threshold: f64 },
}

impl ValidationVerdict {
    pub fn accepted(&self) -> bool {
        matches!(self, ValidationVerdict::Accept { .. })
    }
}

/// One forward pass on the held-out batch: accept iff the loss is within
/// `delta` of `reference_loss`. Blind to anything that does not move W.
pub fn validation_checkpoint(
    loaded: &EpochTypedOptimizerState,
    task: &QuadraticTask,
    reference_loss: f64,
    delta: f64,
) -> Result<ValidationVerdict, OptimizerError> {
    if !(delta > 0.0) {
        return Err(OptimizerError::InvalidArgument(format!("delta={delta} must be positive")));
    }
    if loaded.dim() != task.dim() {
        return Err(OptimizerError::Dimension(format!("state={} task={}", loaded.dim(), task.dim())));
    }
    let observed = (task.validation_loss(&loaded.w) - reference_loss).abs();
    Ok(if observed <= delta {
        ValidationVerdict::Accept { observed }
    } else {
        ValidationVerdict::Reject {
            observed,
            threshold: delta,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hyper(beta1: f64) -> AdamWHyperparams {
        AdamWHyperparams {
            beta1,
            lr: 0.05,
            ..AdamWHyperparams::default()
        }
    }

    #[test]
    fn zero_gradient_keeps_w() {
        let s = EpochTypedOptimizerState::new(vec![1.0, -2.0], 7);
        let next = adamw_step(&s, &[0.0, 0.0], &hyper(0.9), StepMode::Strict).unwrap();
        assert_eq!(next.w, s.w);
        assert_eq!(next.m, vec![0.0, 0.0]);
        assert_eq!(next.tags, EpochTags::uniform(1));
    }

    #[test]
    fn strict_rejects_lagging_moment() {
        let mut s = EpochTypedOptimizerState::new(vec![1.0], 0);
        s.tags = EpochTags::uniform(1000);
        s.tags.m = 999;
        let err = adamw_step(&s, &[1.0], &hyper(0.9), StepMode::Strict).unwrap_err();
        assert_eq!(err, OptimizerError::TypeViolation(vec![("w", 1000), ("m", 999)]));
        assert!(err.to_string().contains("m@999"));
        let coerced = adamw_step(&s, &[1.0], &hyper(0.9), StepMode::Coerce).unwrap();
        assert_eq!(coerced.tags.m, 1000);
        assert_eq!(coerced.tags.w, 1001);
    }

    #[test]
    fn dimension_checked() {
        let s = EpochTypedOptimizerState::new(vec![1.0, 2.0], 0);
        assert!(matches!(
            adamw_step(&s, &[1.0], &hyper(0.9), StepMode::Strict),
            Err(OptimizerError::Dimension(_))
        ));
    }

    #[test]
    fn hyper_ranges() {
        assert!(hyper(1.0).validate().is_err());
        assert!(hyper(0.0).validate().is_ok());
        assert!(AdamWHyperparams { lr: 0.0, ..hyper(0.9) }.validate().is_err());
        assert!(AdamWHyperparams { beta2: 1.0, ..hyper(0.9) }.validate().is_err());
    }

    #[test]
    fn moment_skew_examples() {
        assert!((moment_skew(&[1.0], 0.9)[0] - 0.09).abs() < 1e-15);
        assert_eq!(moment_skew(&[1.0], 0.0)[0], 0.0);
        assert_eq!(moment_skew(&[0.0], 0.9)[0], 0.0);
        assert_eq!(moment_skew(&[2.0], 0.5)[0], 0.5);
    }

    #[test]
    fn skew_pair_validation() {
        let s0 = EpochTypedOptimizerState::new(vec![1.0], 0);
        let s1 = adamw_step(&s0, &[1.0], &hyper(0.9), StepMode::Strict).unwrap();
        let lagged = s1.with_lagged_moment(s0.m.clone());
        assert!(skew_consistency_check(&s1, &lagged, &[0.5], &hyper(0.9)).is_ok());
        let mut bad = lagged.clone();
        bad.w[0] += 1.0;
        assert!(matches!(
            skew_consistency_check(&s1, &bad, &[0.5], &hyper(0.9)),
            Err(OptimizerError::NotASkewPair(_))
        ));
        assert!(skew_consistency_check(&s1, &s1, &[0.5], &hyper(0.9)).is_err());
    }

    #[test]
    fn noiseless_zero_skipped_gradient_no_divergence() {
        // start at the optimum: every gradient is zero
        let task = QuadraticTask::scalar(2.0, 3.0);
        let d = trajectory_divergence(&task, &hyper(0.9), &[3.0], 5, 20).unwrap();
        assert!(d.points.iter().all(|p| p.distance == 0.0));
    }

    #[test]
    fn divergence_arguments_checked() {
        let task = QuadraticTask::scalar(2.0, 3.0);
        assert!(trajectory_divergence(&task, &hyper(0.9), &[0.0], 0, 10).is_err());
        assert!(trajectory_divergence(&task, &hyper(0.9), &[0.0], 10, 10).is_err());
        let d = trajectory_divergence(&task, &hyper(0.9), &[0.0], 3, 10).unwrap();
        assert_eq!(d.to_csv().lines().count(), 11);
    }

    #[test]
    fn validation_gate() {
        let task = QuadraticTask::new(vec![50.0, 50.0], vec![0.0, 0.0], 0.1, 4).unwrap();
        let s = EpochTypedOptimizerState::new(vec![0.3, -0.2], 0);
        let reference = task.validation_loss(&s.w);
        let delta = task.default_delta(&s.w);
        assert!(validation_checkpoint(&s, &task, reference, delta).unwrap().accepted());
        let mut moved = s.clone();
        moved.w[0] += 1.0;
        assert!(!validation_checkpoint(&moved, &task, reference, delta).unwrap().accepted());
        let skewed = s.with_lagged_moment(vec![123.0, -9.0]);
        assert!(validation_checkpoint(&skewed, &task, reference, delta).unwrap().accepted());
        assert!(validation_checkpoint(&s, &task, reference, 0.0).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let task = QuadraticTask::new(vec![1.0; 3], vec![0.0; 3], 0.5, 11).unwrap();
        assert_eq!(task.gradient(&[1.0, 1.0, 1.0], 4), task.gradient(&[1.0, 1.0, 1.0], 4));
        assert_ne!(task.gradient(&[1.0, 1.0, 1.0], 4), task.gradient(&[1.0, 1.0, 1.0], 5));
    }

    proptest! {
        #[test]
        fn strict_step_preserves_consistency(
            e in 0u64..10_000,
            w in proptest::collection::vec(-10.0f64..10.0, 1..6),
            seed in any::<u64>(),
        ) {
            let mut s = EpochTypedOptimizerState::new(w.clone(), seed);
            s.tags = EpochTags::uniform(e);
            let g: Vec<f64> = w.iter().map(|x| 0.3 * x - 0.1).collect();
            let next = adamw_step(&s, &g, &hyper(0.9), StepMode::Strict).unwrap();
            prop_assert!(next.is_consistent());
            prop_assert_eq!(next.epoch(), e + 1);
            prop_assert!(next.v.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn general_skew_identity(
            beta1 in 0.0f64..0.999,
            g_skip in -5.0f64..5.0,
            m_old in -5.0f64..5.0,
            g_next in -5.0f64..5.0,
        ) {
            let h = hyper(beta1);
            let mut s0 = EpochTypedOptimizerState::new(vec![0.5], 1);
            s0.m = vec![m_old];
            s0.tags = EpochTags::uniform(3);
            let s1 = adamw_step(&s0, &[g_skip], &h, StepMode::Strict).unwrap();
            let lagged = s1.with_lagged_moment(s0.m.clone());
            let dm = skew_consistency_check(&s1, &lagged, &[g_next], &h).unwrap();
            let want = moment_skew_general(&[g_skip], &[m_old], beta1);
            prop_assert!((dm[0] - want[0]).abs() < 1e-12);
        }
    }
}
