//! Graph-based semantic parsing.
//!
//! A sentence of `n` words is turned into a clustered graph with one vertex
//! per (word, tag) pair plus a null vertex per word. Parsing is the search
//! for a maximum-weight generalized spanning arborescence whose non-null part
//! is a well-typed program tree. The problem is NP-hard, so [`solver`]
//! relaxes it, smooths the hard constraints into quadratic penalties and runs
//! a conditional-gradient loop on top of exact linear maximization oracles
//! ([`arborescence::lmo_sa`] and [`anchoring::lmo_align`]).

pub mod anchoring;
pub mod arborescence;
pub mod data;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod graph;
pub mod losses;
pub mod oracle;
pub mod selftest;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use grammar::{Ast, Grammar};
pub use graph::{ExtendedGraph, Label, SolutionVector};
