//! Graph-enhanced tool planning.
//!
//! Tool dependency graphs are built from historical tool trajectories, a
//! request node is attached to every tool, and an attention-based graph
//! encoder produces a graph token that a frozen language model consumes when
//! planning. The encoder is trained jointly on the planning loss and on
//! predicting masked dependency edges.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod gnn;
pub mod lmbridge;
pub mod synth;
pub mod toolgraph;
pub mod trainer;

pub use error::{Error, Result};
