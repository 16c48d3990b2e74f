//! The product lattice over `{e−1 < ⊥ < e}^n` and the probability of landing
//! on one of its two atomic points.
//!
//! Only the top (everything committed) and bottom (everything reverted)
//! elements are atomic. Any ambiguous entry makes a vector mixed, since a
//! system cannot soundly resume on state whose epoch is unknown.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::LatticeError;
use crate::persistence::ComponentEpochState;

/// Above this unit count powers are evaluated in the log domain.
pub const LOG_DOMAIN_THRESHOLD: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EpochPoint {
    EMinus1,
    Bottom,
    E,
}

impl EpochPoint {
    pub fn symbol(self) -> char {
        match self {
            EpochPoint::EMinus1 => '-',
            EpochPoint::Bottom => '?',
            EpochPoint::E => '+',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomicityClass {
    Top,
    BottomAll,
    Mixed,
}

impl AtomicityClass {
    pub fn is_atomic(self) -> bool {
        self != AtomicityClass::Mixed
    }
}

impl fmt::Display for AtomicityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AtomicityClass::Top => "top",
            AtomicityClass::BottomAll => "bottom",
            AtomicityClass::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<EpochPoint>", into = "Vec<EpochPoint>")]
pub struct EpochVector(Vec<EpochPoint>);

impl TryFrom<Vec<EpochPoint>> for EpochVector {
    type Error = LatticeError;

    fn try_from(v: Vec<EpochPoint>) -> Result<Self, Self::Error> {
        EpochVector::new(v)
    }
}

impl From<EpochVector> for Vec<EpochPoint> {
    fn from(v: EpochVector) -> Self {
        v.0
    }
}

impl EpochVector {
    pub fn new(entries: Vec<EpochPoint>) -> Result<Self, LatticeError> {
        if entries.is_empty() {
            return Err(LatticeError::Empty);
        }
        Ok(EpochVector(entries))
    }

    pub fn top(n: usize) -> Self {
        EpochVector(vec![EpochPoint::E; n.max(1)])
    }

    pub fn bottom(n: usize) -> Self {
        EpochVector(vec![EpochPoint::EMinus1; n.max(1)])
    }

    /// Projects component states for an attempt at epoch `attempted`.
    ///
    /// Panics on an empty slice.
    pub fn from_states(states: &[ComponentEpochState], attempted: u64) -> Self {
        assert!(!states.is_empty(), "epoch vector needs at least one component");
        EpochVector(states.iter().map(|s| s.lattice_point(attempted)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[EpochPoint] {
        &self.0
    }

    pub fn classify(&self) -> AtomicityClass {
        if self.0.iter().all(|&p| p == EpochPoint::E) {
            AtomicityClass::Top
        } else if self.0.iter().all(|&p| p == EpochPoint::EMinus1) {
            AtomicityClass::BottomAll
        } else {
            AtomicityClass::Mixed
        }
    }

    fn zip_with(&self, other: &Self, f: fn(EpochPoint, EpochPoint) -> EpochPoint) -> Result<Self, LatticeError> {
        if self.len() != other.len() {
            return Err(LatticeError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(EpochVector(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn join(&self, other: &Self) -> Result<Self, LatticeError> {
        self.zip_with(other, std::cmp::max)
    }

    pub fn meet(&self, other: &Self) -> Result<Self, LatticeError> {
        self.zip_with(other, std::cmp::min)
    }

    /// Componentwise order.
    pub fn le(&self, other: &Self) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }
}

impl fmt::Display for EpochVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 64;
        f.write_str("[")?;
        for p in self.0.iter().take(SHOWN) {
            write!(f, "{}", p.symbol())?;
        }
        if self.0.len() > SHOWN {
            write!(f, "…+{}", self.0.len() - SHOWN)?;
        }
        f.write_str("]")
    }
}

pub fn classify(entries: &[EpochPoint]) -> Result<AtomicityClass, LatticeError> {
    Ok(EpochVector::new(entries.to_vec())?.classify())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryModelParams {
    pub q: f64,
    pub n: u64,
}

impl BinaryModelParams {
    pub fn new(q: f64, n: u64) -> Result<Self, LatticeError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(LatticeError::InvalidParams(format!("q={q} must lie in (0,1)")));
        }
        if n == 0 {
            return Err(LatticeError::InvalidParams("n must be at least 1".into()));
        }
        Ok(BinaryModelParams { q, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TernaryModelParams {
    pub q: f64,
    pub p: f64,
    pub r: f64,
    pub n: u64,
}

impl TernaryModelParams {
    /// `r` is implied as `1 − q − p` and must be positive.
    pub fn new(q: f64, p: f64, n: u64) -> Result<Self, LatticeError> {
        let r = 1.0 - q - p;
        if !(q > 0.0 && p > 0.0 && r > 0.0) {
            return Err(LatticeError::InvalidParams(format!(
                "need q, p, 1-q-p > 0 (q={q}, p={p}, r={r})"
            )));
        }
        if n == 0 {
            return Err(LatticeError::InvalidParams("n must be at least 1".into()));
        }
        Ok(TernaryModelParams { q, p, r, n })
    }

    /// Sampling parameters for the binary model embedded as `r = 0`.
    ///
    /// The analytic ternary bounds require `r > 0`; Monte-Carlo sampling does
    /// not, so this constructor exists for cross-checking the binary closed form.
    pub fn binary(q: f64, n: u64) -> Result<Self, LatticeError> {
        let b = BinaryModelParams::new(q, n)?;
        Ok(TernaryModelParams {
            q: b.q,
            p: 1.0 - b.q,
            r: 0.0,
            n: b.n,
        })
    }
}

/// `base^n`, switching to `exp(n·ln base)` for large `n`.
pub fn stable_pow(base: f64, n: u64) -> f64 {
    if base == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if n <= LOG_DOMAIN_THRESHOLD {
        base.powi(n as i32)
    } else {
        (n as f64 * base.ln()).exp()
    }
}

/// `1 − q^n − (1−q)^n`.
pub fn pr_mixed_analytic(params: BinaryModelParams) -> f64 {
    1.0 - pr_atomic_analytic(params)
}

/// `q^n + (1−q)^n`.
pub fn pr_atomic_analytic(params: BinaryModelParams) -> f64 {
    stable_pow(params.q, params.n) + stable_pow(1.0 - params.q, params.n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TernaryBounds {
    /// `q^n + p^n`
    pub atomic_bound: f64,
    /// `q^n`; any ambiguous entry rules out resuming.
    pub operational_bound: f64,
}

pub fn pr_atomic_ternary(params: TernaryModelParams) -> TernaryBounds {
    let top = stable_pow(params.q, params.n);
    TernaryBounds {
        atomic_bound: top + stable_pow(params.p, params.n),
        operational_bound: top,
    }
}

/// Positively correlated failures: with probability `prob` a trial is hit by
/// a common shock and every unit commits with the degraded probability
/// `shocked_q` instead of `q` (the other mass is split in proportion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommonShock {
    pub prob: f64,
    pub shocked_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub trials: u64,
    pub pr_top: f64,
    pub pr_bottom: f64,
    pub pr_mixed: f64,
    /// Binomial standard error of `pr_top`.
    pub stderr_top: f64,
    pub stderr_bottom: f64,
    pub stderr_mixed: f64,
}

impl MonteCarloEstimate {
    fn from_counts(top: u64, bottom: u64, mixed: u64) -> Self {
        let trials = top + bottom + mixed;
        let t = trials as f64;
        let se = |k: u64| {
            let p = k as f64 / t;
            (p * (1.0 - p) / t).sqrt()
        };
        MonteCarloEstimate {
            trials,
            pr_top: top as f64 / t,
            pr_bottom: bottom as f64 / t,
            pr_mixed: mixed as f64 / t,
            stderr_top: se(top),
            stderr_bottom: se(bottom),
            stderr_mixed: se(mixed),
        }
    }

    pub fn pr_atomic(&self) -> f64 {
        self.pr_top + self.pr_bottom
    }

    pub fn stderr_atomic(&self) -> f64 {
        self.stderr_mixed
    }
}

/// Draws one i.i.d. epoch vector entry by entry.
pub fn sample_vector<R: Rng + ?Sized>(q: f64, p: f64, n: usize, rng: &mut R) -> EpochVector {
    EpochVector(
        (0..n.max(1))
            .map(|_| {
                let u: f64 = rng.random();
                if u < q {
                    EpochPoint::E
                } else if u < q + p {
                    EpochPoint::EMinus1
                } else {
                    EpochPoint::Bottom
                }
            })
            .collect(),
    )
}

/// Longest run of leading successes (each with probability `stay`), capped
/// at `cap`. Same law as scanning entries one by one.
fn leading_run<R: Rng + ?Sized>(stay: f64, cap: u64, rng: &mut R) -> u64 {
    if stay <= 0.0 {
        return 0;
    }
    if stay >= 1.0 {
        return cap;
    }
    let g = Geometric::new(1.0 - stay).expect("probability in (0,1)");
    g.sample(rng).min(cap)
}

/// Class of one i.i.d. vector, drawn without materialising it. The vector
/// is scanned as leading runs, which is exact for the classification.
pub fn sample_class<R: Rng + ?Sized>(q: f64, p: f64, n: u64, rng: &mut R) -> AtomicityClass {
    let run_e = leading_run(q, n, rng);
    if run_e == n {
        return AtomicityClass::Top;
    }
    if run_e > 0 {
        return AtomicityClass::Mixed;
    }
    // first entry is not E; it is EMinus1 with probability p / (1 − q)
    let first_prior = rng.random::<f64>() * (1.0 - q) < p;
    if !first_prior {
        return AtomicityClass::Mixed;
    }
    let rest = n - 1;
    if leading_run(p, rest, rng) == rest {
        AtomicityClass::BottomAll
    } else {
        AtomicityClass::Mixed
    }
}

pub fn monte_carlo_atomicity(params: TernaryModelParams, trials: u64, seed: u64) -> MonteCarloEstimate {
    monte_carlo_with_shock(params, None, trials, seed)
}

pub fn monte_carlo_with_shock(
    params: TernaryModelParams,
    shock: Option<CommonShock>,
    trials: u64,
    seed: u64,
) -> MonteCarloEstimate {
    let trials = trials.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut top, mut bottom, mut mixed) = (0u64, 0u64, 0u64);
    for _ in 0..trials {
        let (q, p) = match shock {
            Some(s) if rng.random::<f64>() < s.prob => {
                let rest = 1.0 - params.q;
                let scale = if rest > 0.0 { (1.0 - s.shocked_q) / rest } else { 0.0 };
                (s.shocked_q, params.p * scale)
            }
            _ => (params.q, params.p),
        };
        match sample_class(q, p, params.n, &mut rng) {
            AtomicityClass::Top => top += 1,
            AtomicityClass::BottomAll => bottom += 1,
            AtomicityClass::Mixed => mixed += 1,
        }
    }
    MonteCarloEstimate::from_counts(top, bottom, mixed)
}

/// Published reliability figures, to three decimals.
pub const PUBLISHED_ROWS: [(f64, u64, f64); 5] = [
    (0.999, 1000, 0.368),
    (0.999, 4000, 0.018),
    (0.9999, 4000, 0.670),
    (0.9999, 10000, 0.368),
    (0.99999, 10000, 0.905),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliabilityRow {
    pub q: f64,
    pub n: u64,
    pub pr_atomic: f64,
    pub published: f64,
}

impl ReliabilityRow {
    pub fn rounded(&self) -> f64 {
        (self.pr_atomic * 1000.0).round() / 1000.0
    }

    pub fn matches_published(&self) -> bool {
        (self.rounded() - self.published).abs() < 1e-9
    }
}

pub fn reliability_table() -> Vec<ReliabilityRow> {
    PUBLISHED_ROWS
        .iter()
        .map(|&(q, n, published)| ReliabilityRow {
            q,
            n,
            pr_atomic: pr_atomic_analytic(BinaryModelParams { q, n }),
            published,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use EpochPoint::*;

    fn v(entries: &[EpochPoint]) -> EpochVector {
        EpochVector::new(entries.to_vec()).unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(v(&[E, E, E]).classify(), AtomicityClass::Top);
        assert_eq!(v(&[EMinus1, EMinus1]).classify(), AtomicityClass::BottomAll);
        assert_eq!(v(&[E, Bottom, E]).classify(), AtomicityClass::Mixed);
        assert_eq!(v(&[Bottom]).classify(), AtomicityClass::Mixed);
        assert_eq!(classify(&[]), Err(LatticeError::Empty));
    }

    #[test]
    fn join_meet_examples() {
        assert_eq!(v(&[E, EMinus1]).join(&v(&[EMinus1, E])).unwrap(), v(&[E, E]));
        assert_eq!(v(&[E, EMinus1]).meet(&v(&[EMinus1, E])).unwrap(), v(&[EMinus1, EMinus1]));
        assert!(matches!(
            v(&[E]).join(&v(&[E, E])),
            Err(LatticeError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn single_unit_cannot_be_mixed() {
        let p = BinaryModelParams::new(0.5, 1).unwrap();
        assert!(pr_mixed_analytic(p).abs() < 1e-15);
    }

    #[test]
    fn ternary_direct_power() {
        let b = pr_atomic_ternary(TernaryModelParams::new(0.9, 0.05, 10).unwrap());
        assert!((b.operational_bound - 0.3486784401).abs() < 1e-12);
        assert!((b.atomic_bound - (0.3486784401 + 0.05f64.powi(10))).abs() < 1e-12);
    }

    #[test]
    fn ternary_bound_tends_to_one_as_q_tends_to_one() {
        let mut last = 0.0;
        for k in 2..10 {
            let q = 1.0 - 10f64.powi(-k);
            let b = pr_atomic_ternary(TernaryModelParams::new(q, (1.0 - q) / 2.0, 100).unwrap());
            assert!(b.operational_bound > last);
            last = b.operational_bound;
        }
        assert!(last > 0.999_999);
    }

    #[test]
    fn invalid_params() {
        assert!(BinaryModelParams::new(0.0, 3).is_err());
        assert!(BinaryModelParams::new(1.0, 3).is_err());
        assert!(BinaryModelParams::new(0.5, 0).is_err());
        assert!(TernaryModelParams::new(0.5, 0.5, 3).is_err());
    }

    #[test]
    fn log_domain_agrees_with_powi_near_threshold() {
        let q: f64 = 0.9999;
        let direct = q.powi(10_001);
        let logd = stable_pow(q, 10_001);
        assert!((direct - logd).abs() / direct < 1e-12);
        assert!(stable_pow(0.5, 1_000_000) == 0.0);
    }

    #[test]
    fn one_trial_has_single_tally() {
        let est = monte_carlo_atomicity(TernaryModelParams::new(0.5, 0.3, 4).unwrap(), 1, 5);
        let tallies = [est.pr_top, est.pr_bottom, est.pr_mixed];
        assert_eq!(tallies.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(tallies.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let p = TernaryModelParams::new(0.7, 0.2, 5).unwrap();
        assert_eq!(monte_carlo_atomicity(p, 10_000, 11), monte_carlo_atomicity(p, 10_000, 11));
    }

    #[test]
    fn run_sampler_matches_entrywise_sampler() {
        // both samplers must have the same class law; compare against each
        // other and against the closed forms
        let (q, p, n) = (0.8, 0.15, 6u64);
        let trials = 200_000;
        let fast = monte_carlo_atomicity(TernaryModelParams::new(q, p, n).unwrap(), trials, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut top, mut bot) = (0u64, 0u64);
        for _ in 0..trials {
            match sample_vector(q, p, n as usize, &mut rng).classify() {
                AtomicityClass::Top => top += 1,
                AtomicityClass::BottomAll => bot += 1,
                AtomicityClass::Mixed => {}
            }
        }
        let slow_top = top as f64 / trials as f64;
        let slow_bot = bot as f64 / trials as f64;
        assert!((fast.pr_top - slow_top).abs() < 4.0 * std::f64::consts::SQRT_2 * fast.stderr_top);
        assert!((fast.pr_top - q.powi(n as i32)).abs() < 4.0 * fast.stderr_top);
        assert!((slow_bot - fast.pr_bottom).abs() < 1e-3);
        assert!((fast.pr_bottom - p.powi(n as i32)).abs() < 1e-3);
    }

    #[test]
    fn common_shock_lowers_top_probability() {
        let p = TernaryModelParams::new(0.99, 0.005, 50).unwrap();
        let shock = CommonShock { prob: 0.3, shocked_q: 0.9 };
        let plain = monte_carlo_atomicity(p, 100_000, 3);
        let shocked = monte_carlo_with_shock(p, Some(shock), 100_000, 3);
        assert!(shocked.pr_top < plain.pr_top);
        assert!(plain.pr_top <= 0.99f64.powi(50) + 4.0 * plain.stderr_top);
    }

    #[test]
    fn table_rows() {
        let table = reliability_table();
        assert_eq!(table.len(), 5);
        for row in &table {
            assert!(row.matches_published(), "{row:?}");
        }
        assert_eq!(table[1].rounded(), 0.018);
        assert_eq!(table[3].rounded(), 0.368);
        assert_eq!(table[0].rounded(), 0.368);
    }

    #[test]
    fn atomic_probability_strictly_decreasing_in_n() {
        for &q in &[0.5, 0.9, 0.999, 0.9999] {
            let mut prev = f64::INFINITY;
            let mut n = 2u64;
            while n <= 1 << 24 {
                let a = pr_atomic_analytic(BinaryModelParams { q, n });
                assert!(a < prev || (a == 0.0 && prev == 0.0), "q={q} n={n}");
                prev = a;
                n *= 2;
            }
            assert!(prev < 1e-12, "q={q} tail {prev}");
        }
    }

    fn point() -> impl Strategy<Value = EpochPoint> {
        prop_oneof![Just(EMinus1), Just(Bottom), Just(E)]
    }

    fn triple() -> impl Strategy<Value = (EpochVector, EpochVector, EpochVector)> {
        (1usize..12).prop_flat_map(|n| {
            let vec = move || prop::collection::vec(point(), n).prop_map(EpochVector);
            (vec(), vec(), vec())
        })
    }

    proptest! {
        #[test]
        fn lattice_laws((a, b, c) in triple()) {
            let n = a.len();
            prop_assert_eq!(a.join(&b).unwrap(), b.join(&a).unwrap());
            prop_assert_eq!(a.meet(&b).unwrap(), b.meet(&a).unwrap());
            prop_assert_eq!(a.join(&b).unwrap().join(&c).unwrap(), a.join(&b.join(&c).unwrap()).unwrap());
            prop_assert_eq!(a.meet(&b).unwrap().meet(&c).unwrap(), a.meet(&b.meet(&c).unwrap()).unwrap());
            prop_assert_eq!(a.join(&a).unwrap(), a.clone());
            prop_assert_eq!(a.meet(&a).unwrap(), a.clone());
            prop_assert_eq!(a.join(&a.meet(&b).unwrap()).unwrap(), a.clone());
            prop_assert_eq!(a.meet(&a.join(&b).unwrap()).unwrap(), a.clone());
            prop_assert_eq!(a.meet(&EpochVector::top(n)).unwrap(), a.clone());
            prop_assert_eq!(a.join(&EpochVector::bottom(n)).unwrap(), a.clone());
            prop_assert!(EpochVector::bottom(n).le(&a) && a.le(&EpochVector::top(n)));
            prop_assert!(a.meet(&b).unwrap().le(&a) && a.le(&a.join(&b).unwrap()));
        }

        #[test]
        fn bottom_entry_is_always_mixed(mut a in prop::collection::vec(point(), 1..10), idx in 0usize..10) {
            let i = idx % a.len();
            a[i] = Bottom;
            prop_assert_eq!(classify(&a).unwrap(), AtomicityClass::Mixed);
        }
    }
}
