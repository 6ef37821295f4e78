//! Disagreement-driven explicit explore-exploit reinforcement learning.
//!
//! The crate contains the idealized version-space elimination algorithm
//! ([`dreem`]) over tabular model classes, its practical ensemble-based
//! counterpart ([`ensemble`]), the planners both rely on ([`planners`]), the
//! benchmark environments ([`envs`]), a numerical laboratory for misfit
//! matrices and ellipsoid geometry ([`misfit`]), and experiment orchestration
//! ([`harness`]).

pub mod agent;
pub mod dreem;
pub mod ensemble;
pub mod envs;
pub mod error;
pub mod harness;
pub mod lab;
pub mod linalg;
pub mod mdp;
pub mod misfit;
pub mod planners;
pub mod rng;

pub use error::{Error, Result};
