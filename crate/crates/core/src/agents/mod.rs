//! The plan-writing Researcher, the Executor delegation protocol, and the
//! chat client and search tools they use.

pub mod chat;
pub mod executor;
pub mod plan;
pub mod researcher;
pub mod tools;
