//! Distributed online control of networked LTI systems under adversarial
//! disturbances.
//!
//! Agents share one linear system `x_{i,t+1} = A x_{i,t} + B u_{i,t} + w_t`,
//! observe only their local time-varying costs, and gossip over a doubly
//! stochastic mixing matrix. Each agent runs a disturbance-feedback
//! controller whose parameters are updated by distributed online gradient
//! descent. With unknown dynamics the agents first identify `(A, B)` jointly
//! from Rademacher probes, then commit to the learning controller on their
//! own estimates.

pub mod config;
pub mod dfc;
pub mod error;
pub mod harness;
pub mod known;
pub mod linalg;
pub mod lti;
pub mod network;
pub mod regret;
pub mod stability;
pub mod sysid;
pub mod unknown;

pub use error::{Error, Result};
