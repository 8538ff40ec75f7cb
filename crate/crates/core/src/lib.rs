//! Iterative causal-tree analysis with agent-proposed confounders.
//!
//! Each iteration fits causal trees, asks an agent (backed by a pluggable LLM
//! backend and a retrieval stack) for confounders suggested by the tree's
//! subgroup rules, gates them through an expert policy, restricts the data on
//! the accepted confounders and keeps only samples whose bootstrap interval is
//! wider than average for the next round.

pub mod agent;
pub mod bootstrap_ci;
pub mod causal_tree;
pub mod dataset;
pub mod knowledge;
pub mod orchestrator;
pub mod review;
pub mod rng;
pub mod synth;
