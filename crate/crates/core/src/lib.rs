//! Core of the flowgate workflow system: DAG model, run configuration,
//! the event-sourced metadata store and the execution engine.

pub mod config;
pub mod dag;
pub mod dagfile;
pub mod engine;
pub mod executor;
pub mod pipeline;
pub mod run;
pub mod shell;
pub mod state;
pub mod store;
pub mod testkit;
pub mod workspace;

pub use engine::{Engine, EngineError, EngineOptions, TaskContext, TaskResult, TaskRunner};
pub use store::MetadataStore;
