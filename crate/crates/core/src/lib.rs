//! In-context learning over graphs.
//!
//! The library builds *prompt graphs* out of few-shot classification
//! episodes sampled from a source graph, runs a two-stage message-passing
//! model over them (data-graph encoder followed by task-graph attention),
//! and provides an episodic pretraining loop plus an in-context evaluation
//! harness with reference baselines.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`graph`]: immutable graph storage, hop queries, loaders, synthetic
//!   generators
//! - [`prompt`]: data-graph contextualization, augmentation, task-graph
//!   assembly
//! - [`tasks`]: neighbor-matching / multi-task episode samplers
//! - [`tape`]: the reverse-mode autodiff engine the model is built on
//! - [`model`]: architecture, parameters, forward pass, checkpoints
//! - [`train`]: pretraining loop, loss, optimizer, resume
//! - [`eval`]: in-context evaluation and baselines
//! - [`config`]: run configuration with dotted-key overrides

pub mod config;
pub mod dump;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod prompt;
pub mod seeds;
pub mod tape;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Datapoint, Graph, Level, NodeLabeling};
pub use prompt::{AugConfig, DataGraph, PromptGraph, TaskGraph};
pub use tasks::{ClassMeta, FewShotPrompt, TaskParams};
