//! Tree-search orchestration of LLM fine-tuning experiments.
//!
//! The engine grows an experiment tree one node per iteration: a selection
//! policy picks a node, a researcher drafts a plan from the condensed history,
//! an executor runs the plan's data pipeline and training configurations, and
//! the normalized best score is backpropagated to the root.
//!
//! Interchangeable pieces live behind traits and are looked up by name at
//! runtime: selection policies ([`search::PolicyRegistry`]), dataset operators
//! ([`aidp::OperatorRegistry`]), researchers and executors
//! ([`runtime::Components`]).

pub mod agents;
pub mod aidp;
pub mod diagnostics;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod search;
pub mod seed;
pub mod sim;
pub mod util;

pub use model::{
    ExperimentNode, ExperimentPlan, ExperimentResult, ExperimentTree, NodeId, NodeStatus,
    StrategyKind, TaskDefinition, TrainingConfig,
};
