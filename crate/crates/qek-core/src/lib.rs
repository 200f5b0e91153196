//! Graph classification on emulated neutral-atom registers.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! | module       | responsibility                                                  |
//! |--------------|-----------------------------------------------------------------|
//! | [`graph`]    | TU-format corpora: parsing, stats, node-count filtering          |
//! | [`embedding`]| constrained unit-disk placement of graphs into atom registers    |
//! | [`pulse`]    | layered drive/wait schedules and hardware task documents         |
//! | [`emulator`] | Schrodinger state-vector evolution and seeded measurement        |
//! | [`features`] | interaction-energy distributions, JS divergence, QEK/SPK kernels |
//! | [`svm`]      | kernel SVM (SMO dual), metrics, stratified k-fold grid search    |
//! | [`bayesopt`] | GP surrogate with UCB acquisition over pulse parameters          |
//! | [`pipeline`] | end-to-end orchestration, artifacts, run manifests               |
//!
//! Everything downstream of parsing is deterministic given a master seed;
//! see [`seeding`] for how per-stage/per-graph streams are derived.

pub mod bayesopt;
pub mod embedding;
pub mod emulator;
pub mod error;
pub mod features;
pub mod graph;
pub mod pipeline;
pub mod pulse;
pub mod seeding;
pub mod svm;

pub use error::{Error, Result};
