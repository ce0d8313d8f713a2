//! Causal strategy discovery, counterfactual dialogue generation and
//! offline policy learning for persuasive dialogues.

pub mod actions;
pub mod cfengine;
pub mod corpus;
pub mod discovery;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod strategy;
pub mod synth;

pub use error::{Error, Result};
