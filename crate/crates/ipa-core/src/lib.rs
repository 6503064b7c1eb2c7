//! Error-propagation analysis workbench.
//!
//! The pipeline: a miniature multithreaded VM executes benchmark programs
//! and emits value traces ([`vm`], [`trace`]); likely invariants are
//! inferred from fault-free traces ([`inference`]); faults from six runtime
//! classes are injected ([`injector`]); and error propagation is detected
//! either by classic golden-run diffing or by invariant violations
//! ([`epa`]). [`campaign`] orchestrates full injection campaigns and their
//! statistics.

pub mod batch;
pub mod campaign;
pub mod epa;
pub mod inference;
pub mod injector;
pub mod rng;
pub mod stats;
pub mod trace;
pub mod value;
pub mod vm;
