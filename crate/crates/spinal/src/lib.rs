//! Simulation and verification toolkit for sampled ancestral lineages in
//! density-dependent multi-type populations.
//!
//! The crate has three layers:
//!
//! * exact machinery at finite capacity `K`: Gillespie simulation of the
//!   population with full genealogy ([`popsim`]), the m-function solved on
//!   the enumerated state space ([`msolver`]), and the time-inhomogeneous
//!   spinal process whose single path has the law of a sampled lineage
//!   ([`spine`]);
//! * the large-population limit: the deterministic flow, the limit
//!   m-function along characteristics, limit spines with and without
//!   exponential weighting, and couplings between finite `K` and the limit
//!   ([`lln`]);
//! * an experiment harness with built-in path functionals, seeded
//!   Monte-Carlo statistics and machine-readable reports ([`harness`]).

pub mod harness;
pub mod lln;
pub mod model;
pub mod msolver;
pub mod ode;
pub mod popsim;
pub mod rng;
pub mod spine;

pub use model::{parse_model, ModelSpec, StateIndex, TypeId};
