//! Toolkit for learned construction heuristics on routing problems.
//!
//! A small attention encoder/decoder builds tours action by action; training
//! uses multi-start REINFORCE with a shared baseline, and at test time a set
//! of search strategies adapts a per-instance parameter subset (embedding
//! keys, a residual layer on the decoder query, or a lookup table over edges)
//! while tracking the best solution found.

pub mod autodiff;
pub mod model;
pub mod problems;
pub mod search;
pub mod training;
