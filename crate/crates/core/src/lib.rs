//! Tabular VAPOR exploration for finite-horizon layered MDPs.
//!
//! The crate covers the occupancy-measure program and its Frank-Wolfe solver
//! ([`solver`]), conjugate beliefs and their optimistic transformation
//! ([`bayes`]), the comparison agents ([`agents`]), exact and Monte-Carlo
//! references ([`oracles`]), environments ([`envs`]) and the experiment
//! runner ([`harness`]).

pub mod agents;
pub mod bayes;
pub mod envs;
pub mod harness;
pub mod error;
pub mod mdp;
pub mod oracles;
pub mod par;
pub mod solver;
pub mod table;

pub use error::{Result, VaporError};
