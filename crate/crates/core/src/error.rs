use thiserror::Error;

use crate::persistence::PersistenceStage;
use crate::sim::{ComponentId, Target, VirtualTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot schedule at {at} while virtual time is {now}")]
    ScheduleInPast { at: VirtualTime, now: VirtualTime },

    #[error("step limit of {limit} events exceeded (livelock?)")]
    StepLimitExceeded { limit: u64 },

    #[error("unknown target {0}")]
    UnknownTarget(Target),

    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersistError {
    #[error("{component} is already persisting (stage {stage:?})")]
    AlreadyPersisting {
        component: ComponentId,
        stage: PersistenceStage,
    },

    #[error("{component} is down")]
    Down { component: ComponentId },

    #[error("{component}: stage {from:?} cannot advance to {to:?}")]
    StageOrder {
        component: ComponentId,
        from: PersistenceStage,
        to: PersistenceStage,
    },

    #[error("{component}: directive for epoch {got}, expected epoch {expected}")]
    WrongEpoch {
        component: ComponentId,
        expected: u64,
        got: u64,
    },

    #[error("{component}: commit directive without tentative data for epoch {epoch}")]
    NoTentative { component: ComponentId, epoch: u64 },

    #[error("{component}: stable commit of epoch {epoch} cannot be reverted")]
    RevertCommitted { component: ComponentId, epoch: u64 },

    #[error("durability map is not monotone: {0}")]
    NonMonotoneMap(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("epoch vector must have at least one entry")]
    Empty,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("straddling schedules need at least two components, got {0}")]
    TooFewComponents(usize),

    #[error("target component {target} out of range for n={n}")]
    TargetOutOfRange { target: usize, n: usize },

    #[error("boundary time must be at least 2 ticks, got {0}")]
    BoundaryTooEarly(u64),

    #[error("no mixed witness at t_c={boundary}: final vector {vector}")]
    NotAWitness { boundary: u64, vector: String },

    #[error("schedule invariant violated: {0}")]
    Invariant(String),

    #[error("search budget must be at least 1")]
    ZeroBudget,

    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("epoch type violation: {}", describe_tags(.0))]
    TypeViolation(Vec<(&'static str, u64)>),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("state pair is not a one-epoch moment skew: {0}")]
    NotASkewPair(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn describe_tags(tags: &[(&'static str, u64)]) -> String {
    tags.iter()
        .map(|(field, tag)| format!("{field}@{tag}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeployError {
    #[error("invalid deploy configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Sim(#[from] SimError),
}
