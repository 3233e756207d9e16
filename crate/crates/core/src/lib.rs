//! Gated-guidance imitation learning in a partially observable gridworld.
//!
//! A learner imitates a scripted expert and may open a binary gate to receive
//! a two-word message from a pretrained guide; each opening costs `lambda`
//! in the loss. The crate contains the simulator, the expert planner, a
//! small reverse-mode differentiation engine, the agent networks, the
//! training pipeline and the post-hoc analysis of validation logs.

pub mod agents;
pub mod analysis;
pub mod diffcore;
pub mod expert;
pub mod gridworld;
pub mod seeds;
pub mod training;
