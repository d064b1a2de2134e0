//! Deterministic, single-process simulator for four collaborative-learning
//! protocols: sequential split learning (SL), split-federated learning (SFL),
//! sharded split-federated learning (SSFL) and a ledger-backed variant (BSFL)
//! with committee scoring and top-K aggregation.
//!
//! Everything is a pure function of explicit inputs plus a master seed.
//! Repeated runs of the same configuration are bitwise reproducible.

pub mod attacks;
pub mod cost;
pub mod data;
pub mod ledger;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod topology;
