//! Collaborative, asynchronous evolution of a shared modular multitask
//! network.
//!
//! Independent per-task agents sample parent paths from a shared system,
//! mutate and train children, and publish improved paths back. Agents only
//! communicate through the on-disk [`store`]; published components are
//! immutable and content-addressed.

pub mod bench;
pub mod canonical;
pub mod coordinator;
pub mod evolution;
pub mod graph;
pub mod mutation;
pub mod nn;
pub mod rng;
pub mod store;
pub mod tasks;
