//! Community-based multi-agent actor-critic.
//!
//! Agents hold mixed memberships over `K` latent communities. Each community
//! keeps a linear critic; agents aggregate community parameters by their
//! membership weights and run Boltzmann-policy actor steps. The crate also
//! carries the spectral membership estimator used to place new agents, the
//! transfer and active-selection machinery, a neighbor-consensus baseline,
//! and exact enumeration oracles for small instances.

pub mod acq;
pub mod acv;
pub mod baseline;
pub mod env;
pub mod harness;
pub mod membership;
pub mod mscore;
pub mod oracle;
pub mod rng;
pub mod trace;
pub mod transfer;

pub use env::{AgentPolicy, FeatureMap, MdpShape, MultiAgentMdp, StepSchedule, Storage};
pub use membership::MembershipMatrix;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("explicit table needs {entries} entries, cap is {cap}; use lazy-seeded storage")]
    TableTooLarge { entries: u64, cap: u64 },
    #[error("enumeration needs {entries} state/joint-action pairs, cap is {cap}")]
    EnumerationCap { entries: u64, cap: u64 },
    #[error("membership matrix is rank deficient (smallest eigenvalue of Γ'Γ is {min_eig:e}); pass ε > 0")]
    RankDeficient { min_eig: f64 },
    #[error("feature assumption violated: {0}")]
    Assumption(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("non-finite value at step {step}: {what}")]
    NumericAbort { step: u64, what: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
